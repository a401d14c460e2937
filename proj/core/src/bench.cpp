#include "shoal/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <istream>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <sstream>

#include "json.hpp"

namespace shoal {

namespace {

using Clock = std::chrono::steady_clock;

constexpr std::chrono::milliseconds kCellWait{60000};
constexpr std::uint32_t kWindow = 64;  // sync AMs in flight per wait
constexpr std::uint32_t kMaxContiguousPayload = std::uint32_t(kMaxPacketBytes - kBaseHeaderBytes);

const char* const kAmTypes[] = {"medium_fifo", "medium", "long_fifo",
                                "long",        "get_medium", "get_long"};

struct Cell {
    std::string am_type;
    std::uint32_t payload = 0;
};

std::uint64_t ns_now() {
    return std::uint64_t(
        std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now().time_since_epoch())
            .count());
}

std::uint64_t clock_resolution_ns() {
    std::uint64_t best = ~0ull;
    for (int i = 0; i < 200; ++i) {
        const std::uint64_t a = ns_now();
        std::uint64_t b = a;
        while (b == a) b = ns_now();
        best = std::min(best, b - a);
    }
    return best == ~0ull ? 1 : best;
}

std::string format_value(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

std::vector<Cell> make_cells(const BenchOptions& options) {
    std::vector<Cell> cells;
    cells.push_back(Cell{"short", 0});
    for (const char* type : kAmTypes) {
        for (std::uint32_t s : options.sizes) cells.push_back(Cell{type, s});
    }
    return cells;
}

// Both kernels evaluate this identically so the pair stays in step. The
// biggest frame a cell moves is base header + payload, except a long get,
// whose response is sized with the request's offset argument on top.
std::optional<std::string> skip_reason(const ClusterMap& map, const Cell& cell) {
    if (cell.am_type == "short") return std::nullopt;
    const std::uint64_t overhead =
        cell.am_type == "get_long" ? kBaseHeaderBytes + kWordBytes : kBaseHeaderBytes;
    const std::uint64_t frame = overhead + cell.payload;
    if (frame > kMaxPacketBytes) return "OVERSIZE";
    const bool crosses_nodes = map.node_of(0) != map.node_of(1);
    if (crosses_nodes && map.transport == TransportKind::Udp && frame > map.udp_max_bytes) {
        return "UDP_FRAGMENT_LIMIT";
    }
    return std::nullopt;
}

bool consumes_receiver_queue(const std::string& am_type) {
    return am_type == "medium_fifo" || am_type == "medium";
}

std::vector<std::byte> fill_pattern(std::uint32_t n) {
    std::vector<std::byte> out(n);
    for (std::uint32_t i = 0; i < n; ++i) out[i] = std::byte((i * 131 + 17) & 0xFF);
    return out;
}

void send_cell_op(KernelContext& ctx, const Cell& cell, std::span<const std::byte> pattern) {
    if (cell.am_type == "short") {
        ctx.am_short(1, 0);
    } else if (cell.am_type == "medium_fifo") {
        ctx.am_medium_fifo(1, 0, pattern.subspan(0, cell.payload));
    } else if (cell.am_type == "medium") {
        ctx.am_medium(1, 0, 0, cell.payload);
    } else if (cell.am_type == "long_fifo") {
        ctx.am_long_fifo(1, 0, pattern.subspan(0, cell.payload), 0);
    } else if (cell.am_type == "long") {
        ctx.am_long(1, 0, 0, cell.payload, 0);
    } else if (cell.am_type == "get_medium") {
        ctx.get_medium(1, 0, cell.payload);
    } else if (cell.am_type == "get_long") {
        ctx.get_long(1, 0, cell.payload, 0);
    } else {
        throw ShoalError(ErrorCode::ValidationError, "unknown am_type " + cell.am_type);
    }
}

// Issues `count` operations keeping at most kWindow unacknowledged.
void run_windowed(KernelContext& ctx, const Cell& cell, std::span<const std::byte> pattern,
                  std::uint32_t count) {
    std::uint32_t done = 0;
    while (done < count) {
        const std::uint32_t batch = std::min(kWindow, count - done);
        for (std::uint32_t i = 0; i < batch; ++i) send_cell_op(ctx, cell, pattern);
        ctx.wait_replies(batch, kCellWait);
        done += batch;
    }
}

void drain_own_queue(KernelContext& ctx, std::uint32_t count) {
    for (std::uint32_t i = 0; i < count; ++i) ctx.recv_payload(kCellWait);
}

std::vector<BenchRecord> run_driver(KernelContext& ctx, const BenchOptions& options,
                                    std::vector<LatencySample>* latency_samples) {
    const ClusterMap& map = ctx.cluster();
    const std::string topology = bench_topology(map);
    const std::string transport = bench_transport_label(map);

    const auto pattern = fill_pattern(kMaxContiguousPayload);
    ctx.partition().write(0, std::span<const std::byte>(pattern).first(std::min<std::uint64_t>(
                                 pattern.size(), ctx.partition().size())));

    nlohmann::json cfg{{"mode", to_string(options.mode)},
                       {"sizes", options.sizes},
                       {"iters", options.iters},
                       {"warmup", options.warmup}};
    const std::string cfg_text = cfg.dump();
    std::vector<std::byte> cfg_bytes(cfg_text.size());
    std::transform(cfg_text.begin(), cfg_text.end(), cfg_bytes.begin(),
                   [](char c) { return std::byte(c); });
    ctx.am_medium_fifo(1, 0, cfg_bytes);
    ctx.wait_replies(1, kCellWait);

    std::vector<BenchRecord> records;
    auto add = [&](const Cell& cell, const std::string& metric, const std::string& value,
                   std::uint32_t iterations) {
        records.push_back(BenchRecord{topology, transport, cell.am_type, cell.payload, iterations,
                                      metric, value});
    };

    for (const Cell& cell : make_cells(options)) {
        ctx.barrier(kCellWait);
        if (auto why = skip_reason(map, cell)) {
            add(cell, "skipped", *why, 0);
            continue;
        }
        const std::uint64_t replies_before = ctx.reply_count();

        if (options.mode == BenchMode::Latency) {
            for (std::uint32_t w = 0; w < options.warmup; ++w) {
                send_cell_op(ctx, cell, pattern);
                ctx.wait_replies(1, kCellWait);
            }
            std::vector<std::uint64_t> samples;
            samples.reserve(options.iters);
            for (std::uint32_t i = 0; i < options.iters; ++i) {
                const std::uint64_t t0 = ns_now();
                send_cell_op(ctx, cell, pattern);
                ctx.wait_replies(1, kCellWait);
                samples.push_back(ns_now() - t0);
            }
            if (latency_samples) {
                for (std::uint64_t s : samples) {
                    latency_samples->push_back(LatencySample{cell.am_type, cell.payload, s});
                }
            }
            std::sort(samples.begin(), samples.end());
            const std::size_t n = samples.size();
            const double median = n % 2 == 1
                                      ? double(samples[n / 2])
                                      : (double(samples[n / 2 - 1]) + double(samples[n / 2])) / 2.0;
            const double mean =
                double(std::accumulate(samples.begin(), samples.end(), std::uint64_t{0})) / n;
            add(cell, "latency_median_ns", format_value(median), options.iters);
            add(cell, "latency_mean_ns", format_value(mean), options.iters);
        } else {
            run_windowed(ctx, cell, pattern, options.warmup);
            const std::uint64_t t0 = ns_now();
            run_windowed(ctx, cell, pattern, options.iters);
            const std::uint64_t elapsed = std::max<std::uint64_t>(1, ns_now() - t0);
            const double msgs_per_s = double(options.iters) * 1e9 / double(elapsed);
            add(cell, "throughput_msgs_per_s", format_value(msgs_per_s), options.iters);
            add(cell, "throughput_bytes_per_s",
                format_value(msgs_per_s * double(cell.payload)), options.iters);
        }

        // Every synchronous send or get must come back exactly once.
        const std::uint64_t expected = replies_before + options.warmup + options.iters;
        if (ctx.reply_count() != expected) {
            throw ShoalError(ErrorCode::ValidationError,
                             "reply conservation broke on " + cell.am_type + "/" +
                                 std::to_string(cell.payload) + ": counted " +
                                 std::to_string(ctx.reply_count() - replies_before) +
                                 " of " + std::to_string(options.warmup + options.iters));
        }

        // Fetched medium payloads queue locally; keep the queue flat.
        if (cell.am_type == "get_medium") drain_own_queue(ctx, options.warmup + options.iters);
    }
    ctx.barrier(kCellWait);
    return records;
}

void run_responder(KernelContext& ctx) {
    const ClusterMap& map = ctx.cluster();
    const auto pattern = fill_pattern(kMaxContiguousPayload);
    ctx.partition().write(0, std::span<const std::byte>(pattern).first(std::min<std::uint64_t>(
                                 pattern.size(), ctx.partition().size())));

    Delivery cfg_msg = ctx.recv_payload(kCellWait);
    std::string cfg_text(cfg_msg.payload.size(), '\0');
    std::transform(cfg_msg.payload.begin(), cfg_msg.payload.end(), cfg_text.begin(),
                   [](std::byte b) { return char(std::to_integer<unsigned char>(b)); });

    BenchOptions options;
    try {
        const auto cfg = nlohmann::json::parse(cfg_text);
        options.mode = bench_mode_from_string(cfg.at("mode").get<std::string>());
        options.sizes = cfg.at("sizes").get<std::vector<std::uint32_t>>();
        options.iters = cfg.at("iters").get<std::uint32_t>();
        options.warmup = cfg.at("warmup").get<std::uint32_t>();
    } catch (const nlohmann::json::exception& e) {
        throw ShoalError(ErrorCode::ParseError, std::string("bad bench config: ") + e.what());
    }

    for (const Cell& cell : make_cells(options)) {
        ctx.barrier(kCellWait);
        if (skip_reason(map, cell)) continue;
        if (consumes_receiver_queue(cell.am_type)) {
            for (std::uint32_t i = 0; i < options.warmup + options.iters; ++i) {
                ctx.recv_payload(kCellWait);
            }
        }
    }
    ctx.barrier(kCellWait);
}

}  // namespace

const char* to_string(BenchMode mode) {
    return mode == BenchMode::Latency ? "latency" : "throughput";
}

BenchMode bench_mode_from_string(const std::string& name) {
    if (name == "latency") return BenchMode::Latency;
    if (name == "throughput") return BenchMode::Throughput;
    throw ShoalError(ErrorCode::ValidationError,
                     "mode must be latency or throughput, got \"" + name + "\"");
}

std::vector<std::uint32_t> parse_size_list(const std::string& text) {
    auto parse_one = [](const std::string& s) -> std::uint32_t {
        std::size_t used = 0;
        unsigned long v = 0;
        try {
            v = std::stoul(s, &used);
        } catch (const std::exception&) {
            throw ShoalError(ErrorCode::ParseError, "bad size \"" + s + "\"");
        }
        if (used != s.size() || v == 0 || v > 0xFFFFFFFFull) {
            throw ShoalError(ErrorCode::ParseError, "bad size \"" + s + "\"");
        }
        return std::uint32_t(v);
    };

    std::vector<std::uint32_t> sizes;
    if (auto dots = text.find(".."); dots != std::string::npos) {
        const std::uint32_t lo = parse_one(text.substr(0, dots));
        const std::uint32_t hi = parse_one(text.substr(dots + 2));
        if (lo > hi) {
            throw ShoalError(ErrorCode::ParseError, "size range is inverted: " + text);
        }
        for (std::uint64_t s = lo; s <= hi; s *= 2) sizes.push_back(std::uint32_t(s));
    } else {
        std::stringstream ss(text);
        std::string item;
        while (std::getline(ss, item, ',')) sizes.push_back(parse_one(item));
        if (sizes.empty()) throw ShoalError(ErrorCode::ParseError, "empty size list");
    }
    return sizes;
}

std::string bench_topology(const ClusterMap& map) {
    return map.node_of(0) == map.node_of(1) ? "intra_node" : "inter_node";
}

std::string bench_transport_label(const ClusterMap& map) {
    if (map.node_of(0) == map.node_of(1)) return "loopback";
    return to_string(map.transport);
}

std::vector<BenchRecord> run_bench_kernel(KernelContext& ctx, const BenchOptions& options,
                                          std::vector<LatencySample>* latency_samples) {
    if (ctx.cluster().kernel_count() != 2) {
        throw ShoalError(ErrorCode::ConfigInvalid,
                         "the benchmark pair needs a cluster map with exactly kernels 0 and 1");
    }
    if (ctx.id() == 0) return run_driver(ctx, options, latency_samples);
    run_responder(ctx);
    return {};
}

void write_results_csv(std::ostream& out, const std::vector<BenchRecord>& records) {
    if (records.empty()) {
        throw ShoalError(ErrorCode::ValidationError, "no benchmark records to write");
    }
    out << "# shoal-bench results\n";
    out << "# clock_resolution_ns=" << clock_resolution_ns() << "\n";
    out << "topology,transport,am_type,payload_bytes,iterations,metric,value\n";
    for (const BenchRecord& r : records) {
        out << r.topology << ',' << r.transport << ',' << r.am_type << ',' << r.payload_bytes
            << ',' << r.iterations << ',' << r.metric << ',' << r.value << '\n';
    }
}

std::vector<BenchRecord> read_results_csv(std::istream& in) {
    std::vector<BenchRecord> records;
    std::string line;
    bool header_seen = false;
    while (std::getline(in, line)) {
        if (line.empty() || line[0] == '#') continue;
        if (!header_seen) {
            if (line != "topology,transport,am_type,payload_bytes,iterations,metric,value") {
                throw ShoalError(ErrorCode::ParseError, "unexpected results header: " + line);
            }
            header_seen = true;
            continue;
        }
        std::stringstream ss(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ss, field, ',')) fields.push_back(field);
        if (fields.size() != 7) {
            throw ShoalError(ErrorCode::ParseError, "unexpected results row: " + line);
        }
        BenchRecord r;
        r.topology = fields[0];
        r.transport = fields[1];
        r.am_type = fields[2];
        r.payload_bytes = std::uint32_t(std::stoul(fields[3]));
        r.iterations = std::uint32_t(std::stoul(fields[4]));
        r.metric = fields[5];
        r.value = fields[6];
        records.push_back(std::move(r));
    }
    if (!header_seen) throw ShoalError(ErrorCode::ParseError, "results csv has no header");
    return records;
}

void write_samples_csv(std::ostream& out, const std::vector<LatencySample>& samples) {
    out << "am_type,payload_bytes,sample_ns\n";
    for (const LatencySample& s : samples) {
        out << s.am_type << ',' << s.payload_bytes << ',' << s.sample_ns << '\n';
    }
}

}  // namespace shoal
