#include "shoal/jacobi.hpp"

#include <algorithm>
#include <chrono>
#include <cstring>
#include <ostream>
#include <string>
#include <utility>

namespace shoal {

namespace {

using Clock = std::chrono::steady_clock;

// Halo rows land on the built-in reply counter so arrival is countable;
// parameters and timing reports go through a registered sink handler to
// keep that counter free for the exchange accounting.
constexpr HandlerId kSinkHandler = 2;
constexpr std::chrono::milliseconds kJacobiWait{120000};
constexpr std::uint64_t kParamsOk = 1;
constexpr std::uint64_t kParamsAbort = 0;
constexpr std::uint32_t kCollectChunkBytes = 8192;
constexpr std::uint32_t kCollectWindow = 32;

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

double cell_value(std::uint64_t seed, std::uint32_t row, std::uint32_t col,
                  std::uint32_t grid_size) {
    const std::uint64_t index = std::uint64_t(row) * grid_size + col;
    const std::uint64_t bits = splitmix64(seed ^ splitmix64(index));
    return double(bits >> 11) * 0x1.0p-53;
}

std::uint64_t elapsed_ns(Clock::time_point since) {
    return std::uint64_t(
        std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - since).count());
}

std::vector<std::byte> pack_u64s(std::initializer_list<std::uint64_t> values) {
    std::vector<std::byte> out(values.size() * sizeof(std::uint64_t));
    std::size_t i = 0;
    for (std::uint64_t v : values) {
        std::memcpy(out.data() + i * sizeof(std::uint64_t), &v, sizeof(v));
        ++i;
    }
    return out;
}

std::uint64_t unpack_u64(std::span<const std::byte> bytes, std::size_t index) {
    std::uint64_t v = 0;
    std::memcpy(&v, bytes.data() + index * sizeof(std::uint64_t), sizeof(v));
    return v;
}

void doubles_from_bytes(std::span<const std::byte> bytes, double* out) {
    std::memcpy(out, bytes.data(), bytes.size());
}

std::vector<std::byte> doubles_to_bytes(const double* values, std::size_t count) {
    std::vector<std::byte> out(count * sizeof(double));
    std::memcpy(out.data(), values, out.size());
    return out;
}

void validate_config(const JacobiConfig& config, const ClusterMap& map) {
    if (config.grid_size < 2) {
        throw ShoalError(ErrorCode::ConfigInvalid, "grid must be at least 2x2");
    }
    if (config.iterations < 1) {
        throw ShoalError(ErrorCode::ConfigInvalid, "at least one iteration is required");
    }
    if (config.kernel_count < 1) {
        throw ShoalError(ErrorCode::ConfigInvalid, "at least one compute kernel is required");
    }
    if (config.grid_size % config.kernel_count != 0) {
        throw ShoalError(ErrorCode::ConfigInvalid,
                         "grid of " + std::to_string(config.grid_size) +
                             " rows does not split evenly over " +
                             std::to_string(config.kernel_count) + " kernels");
    }
    if (map.kernel_count() != config.kernel_count + 1) {
        throw ShoalError(ErrorCode::ConfigInvalid,
                         "cluster map must hold the control kernel plus " +
                             std::to_string(config.kernel_count) + " compute kernels, found " +
                             std::to_string(map.kernel_count()));
    }
    if (config.kernel_count > 1) check_halo_fits(config.grid_size);

    const std::uint64_t row_bytes = std::uint64_t(config.grid_size) * sizeof(double);
    const std::uint64_t strip_bytes =
        (std::uint64_t(config.grid_size) / config.kernel_count + 2) * row_bytes;
    for (std::uint32_t k = 1; k <= config.kernel_count; ++k) {
        if (map.kernels[k].partition_bytes < strip_bytes) {
            throw ShoalError(ErrorCode::ConfigInvalid,
                             "kernel " + std::to_string(k) + " partition of " +
                                 std::to_string(map.kernels[k].partition_bytes) +
                                 " bytes cannot hold a " + std::to_string(strip_bytes) +
                                 " byte strip");
        }
    }
    const std::uint64_t grid_bytes = row_bytes * config.grid_size;
    if (map.kernels[0].partition_bytes < grid_bytes) {
        throw ShoalError(ErrorCode::ConfigInvalid,
                         "control partition of " +
                             std::to_string(map.kernels[0].partition_bytes) +
                             " bytes cannot hold the " + std::to_string(grid_bytes) +
                             " byte gathered grid");
    }
}

JacobiResult run_control(KernelContext& ctx, const JacobiConfig& config) {
    const ClusterMap& map = ctx.cluster();
    ctx.register_handler(kSinkHandler, [](KernelId, std::span<const std::uint64_t>,
                                          std::span<const std::byte>, Token) {});
    ctx.barrier(kJacobiWait);  // sink handlers registered everywhere
    try {
        validate_config(config, map);
    } catch (const ShoalError& e) {
        // Compute kernels idle in recv_payload; wave them off before failing.
        const auto abort_msg = pack_u64s({kParamsAbort, std::uint64_t(e.code())});
        for (KernelId k = 1; k < map.kernel_count(); ++k) {
            ctx.am_medium_fifo(k, kSinkHandler, abort_msg, {}, /*async=*/true);
        }
        throw;
    }

    const auto params = pack_u64s({kParamsOk, config.grid_size, config.iterations,
                                   config.kernel_count, config.seed});
    for (KernelId k = 1; k <= config.kernel_count; ++k) {
        ctx.am_medium_fifo(k, kSinkHandler, params);
    }
    ctx.wait_replies(config.kernel_count, kJacobiWait);

    const auto t_start = Clock::now();
    ctx.barrier(kJacobiWait);  // everyone initialized
    for (std::uint32_t iter = 0; iter < config.iterations; ++iter) {
        ctx.barrier(kJacobiWait);
    }

    std::vector<KernelTiming> timings;
    for (std::uint32_t i = 0; i < config.kernel_count; ++i) {
        const Delivery report = ctx.recv_payload(kJacobiWait);
        KernelTiming t;
        t.kernel = report.src;
        t.compute_ns = unpack_u64(report.payload, 0);
        t.sync_ns = unpack_u64(report.payload, 1);
        t.total_ns = unpack_u64(report.payload, 2);
        timings.push_back(t);
    }
    std::sort(timings.begin(), timings.end(),
              [](const KernelTiming& a, const KernelTiming& b) { return a.kernel < b.kernel; });

    // Pull every strip's owner rows into our partition, assembling the full
    // grid at offset 0. One AM cannot carry a whole strip, so gets go out in
    // bounded windows of chunks.
    const std::uint64_t row_bytes = std::uint64_t(config.grid_size) * sizeof(double);
    const std::uint64_t strip_bytes = (config.grid_size / config.kernel_count) * row_bytes;
    struct Chunk {
        KernelId kernel;
        std::uint64_t remote_offset;
        std::uint64_t local_offset;
        std::uint32_t len;
    };
    std::vector<Chunk> chunks;
    for (KernelId k = 1; k <= config.kernel_count; ++k) {
        const std::uint64_t local_base = std::uint64_t(k - 1) * strip_bytes;
        for (std::uint64_t off = 0; off < strip_bytes; off += kCollectChunkBytes) {
            const std::uint32_t len =
                std::uint32_t(std::min<std::uint64_t>(kCollectChunkBytes, strip_bytes - off));
            chunks.push_back(Chunk{k, row_bytes + off, local_base + off, len});
        }
    }
    std::size_t issued = 0;
    while (issued < chunks.size()) {
        const std::size_t batch = std::min<std::size_t>(kCollectWindow, chunks.size() - issued);
        for (std::size_t i = 0; i < batch; ++i) {
            const Chunk& c = chunks[issued + i];
            ctx.get_long(c.kernel, c.remote_offset, c.len, c.local_offset);
        }
        ctx.wait_replies(std::uint32_t(batch), kJacobiWait);
        issued += batch;
    }

    const std::uint64_t grid_bytes = row_bytes * config.grid_size;
    const auto grid_raw = ctx.partition().read(0, grid_bytes);
    JacobiResult result;
    result.grid.resize(std::size_t(config.grid_size) * config.grid_size);
    doubles_from_bytes(grid_raw, result.grid.data());
    result.checksum = grid_checksum(result.grid);
    result.timings = std::move(timings);

    ctx.barrier(kJacobiWait);  // releases the compute kernels
    result.total_ns = elapsed_ns(t_start);
    return result;
}

JacobiResult run_compute(KernelContext& ctx) {
    ctx.register_handler(kSinkHandler, [](KernelId, std::span<const std::uint64_t>,
                                          std::span<const std::byte>, Token) {});
    ctx.barrier(kJacobiWait);  // sink handlers registered everywhere

    const Delivery params = ctx.recv_payload(kJacobiWait);
    if (unpack_u64(params.payload, 0) != kParamsOk) {
        throw ShoalError(ErrorCode(unpack_u64(params.payload, 1)),
                         "control kernel aborted the run");
    }
    JacobiConfig config;
    config.grid_size = std::uint32_t(unpack_u64(params.payload, 1));
    config.iterations = std::uint32_t(unpack_u64(params.payload, 2));
    config.kernel_count = std::uint32_t(unpack_u64(params.payload, 3));
    config.seed = unpack_u64(params.payload, 4);

    const std::uint32_t k = ctx.id();
    const std::uint32_t rows = config.grid_size / config.kernel_count;
    const std::uint64_t row_bytes = std::uint64_t(config.grid_size) * sizeof(double);
    StripState strip = make_strip(config, (k - 1) * rows, rows);

    // Partition layout mirrors the strip: local row r sits at r * row_bytes,
    // so the ghost slots (rows 0 and rows + 1) are the put targets the
    // neighbours aim at.
    Partition& part = ctx.partition();
    part.write(0, doubles_to_bytes(strip.cells.data(), strip.cells.size()));

    const bool has_up = k > 1;
    const bool has_down = k < config.kernel_count;
    const std::uint32_t neighbours = std::uint32_t(has_up) + std::uint32_t(has_down);
    const std::uint64_t top_owner_off = row_bytes;
    const std::uint64_t bottom_owner_off = std::uint64_t(rows) * row_bytes;
    const std::uint64_t top_ghost_off = 0;
    const std::uint64_t bottom_ghost_off = std::uint64_t(rows + 1) * row_bytes;

    ctx.barrier(kJacobiWait);  // everyone initialized

    KernelTiming timing;
    timing.kernel = k;
    const auto t_loop = Clock::now();
    for (std::uint32_t iter = 0; iter < config.iterations; ++iter) {
        const auto t_sync = Clock::now();
        if (neighbours > 0) {
            // Async puts onto the reply counter: each arrival bumps the
            // receiver once, so waiting for `neighbours` bumps means this
            // kernel's own ghost rows are in place.
            if (has_up) {
                ctx.am_long(k - 1, 0, top_owner_off, std::uint32_t(row_bytes),
                            bottom_ghost_off, {}, /*async=*/true);
            }
            if (has_down) {
                ctx.am_long(k + 1, 0, bottom_owner_off, std::uint32_t(row_bytes),
                            top_ghost_off, {}, /*async=*/true);
            }
            ctx.wait_replies(neighbours, kJacobiWait);
        }
        timing.sync_ns += elapsed_ns(t_sync);

        const auto t_compute = Clock::now();
        if (has_up) {
            doubles_from_bytes(part.read(top_ghost_off, row_bytes), &strip.at(0, 0));
        }
        if (has_down) {
            doubles_from_bytes(part.read(bottom_ghost_off, row_bytes), &strip.at(rows + 1, 0));
        }
        strip = jacobi_step(strip);
        part.write(top_owner_off,
                   doubles_to_bytes(&strip.at(1, 0), std::size_t(rows) * config.grid_size));
        timing.compute_ns += elapsed_ns(t_compute);

        // The iteration barrier keeps next iteration's puts from landing in
        // ghost rows a neighbour is still reading.
        const auto t_barrier = Clock::now();
        ctx.barrier(kJacobiWait);
        timing.sync_ns += elapsed_ns(t_barrier);
    }
    timing.total_ns = elapsed_ns(t_loop);

    ctx.am_medium_fifo(0, kSinkHandler,
                       pack_u64s({timing.compute_ns, timing.sync_ns, timing.total_ns}));
    ctx.wait_replies(1, kJacobiWait);

    // Hold the partition live until the control kernel has gathered it.
    ctx.barrier(kJacobiWait);

    JacobiResult result;
    result.timings.push_back(timing);
    return result;
}

}  // namespace

StripState make_strip(const JacobiConfig& config, std::uint32_t row0, std::uint32_t rows) {
    StripState strip;
    strip.grid_size = config.grid_size;
    strip.row0 = row0;
    strip.rows = rows;
    strip.cells.assign(std::size_t(rows + 2) * config.grid_size, 0.0);
    for (std::uint32_t r = 1; r <= rows; ++r) {
        for (std::uint32_t c = 0; c < config.grid_size; ++c) {
            strip.at(r, c) = cell_value(config.seed, row0 + r - 1, c, config.grid_size);
        }
    }
    return strip;
}

StripState jacobi_step(const StripState& strip) {
    StripState next = strip;
    const std::uint32_t n = strip.grid_size;
    for (std::uint32_t r = 1; r <= strip.rows; ++r) {
        const std::uint32_t global_row = strip.row0 + r - 1;
        if (global_row == 0 || global_row == n - 1) continue;  // Dirichlet rows
        for (std::uint32_t c = 1; c + 1 < n; ++c) {
            next.at(r, c) = (strip.at(r - 1, c) + strip.at(r + 1, c) + strip.at(r, c - 1) +
                             strip.at(r, c + 1)) *
                            0.25;
        }
    }
    next.iteration = strip.iteration + 1;
    return next;
}

void check_halo_fits(std::uint32_t grid_size) {
    const std::uint64_t row_bytes = std::uint64_t(grid_size) * sizeof(double);
    if (row_bytes > kHaloPayloadBudget) {
        throw ShoalError(ErrorCode::HaloTooLarge,
                         "halo row of " + std::to_string(row_bytes) +
                             " bytes does not fit the " + std::to_string(kHaloPayloadBudget) +
                             " byte single-AM payload budget");
    }
}

JacobiResult run_jacobi(KernelContext& ctx, const JacobiConfig& config) {
    if (ctx.id() == 0) return run_control(ctx, config);
    return run_compute(ctx);
}

std::vector<double> jacobi_oracle(const JacobiConfig& config) {
    const std::uint32_t n = config.grid_size;
    std::vector<double> cur(std::size_t(n) * n);
    for (std::uint32_t r = 0; r < n; ++r) {
        for (std::uint32_t c = 0; c < n; ++c) {
            cur[std::size_t(r) * n + c] = cell_value(config.seed, r, c, n);
        }
    }
    std::vector<double> next = cur;
    for (std::uint32_t iter = 0; iter < config.iterations; ++iter) {
        for (std::uint32_t r = 1; r + 1 < n; ++r) {
            for (std::uint32_t c = 1; c + 1 < n; ++c) {
                // Same operand order as jacobi_step keeps results bit-equal.
                next[std::size_t(r) * n + c] =
                    (cur[std::size_t(r - 1) * n + c] + cur[std::size_t(r + 1) * n + c] +
                     cur[std::size_t(r) * n + c - 1] + cur[std::size_t(r) * n + c + 1]) *
                    0.25;
            }
        }
        std::swap(cur, next);
    }
    return cur;
}

std::uint64_t grid_checksum(const std::vector<double>& grid) {
    std::uint64_t h = 1469598103934665603ull;
    const auto* bytes = reinterpret_cast<const unsigned char*>(grid.data());
    for (std::size_t i = 0; i < grid.size() * sizeof(double); ++i) {
        h ^= bytes[i];
        h *= 1099511628211ull;
    }
    return h;
}

void write_timings_csv(std::ostream& out, const std::vector<KernelTiming>& timings) {
    out << "kernel,compute_ns,sync_ns,total_ns\n";
    for (const KernelTiming& t : timings) {
        out << t.kernel << ',' << t.compute_ns << ',' << t.sync_ns << ',' << t.total_ns << '\n';
    }
}

}  // namespace shoal
