#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "shoal/runtime.hpp"

namespace shoal {

enum class BenchMode { Latency, Throughput };

const char* to_string(BenchMode mode);
BenchMode bench_mode_from_string(const std::string& name);  // throws ValidationError

struct BenchOptions {
    BenchMode mode = BenchMode::Latency;
    std::vector<std::uint32_t> sizes = {8, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096};
    std::uint32_t iters = 1000;
    std::uint32_t warmup = 100;
};

// One result row. `value` stays textual so skipped cells can carry their
// reason through the same schema.
struct BenchRecord {
    std::string topology;   // intra_node | inter_node
    std::string transport;  // loopback | tcp | udp
    std::string am_type;
    std::uint32_t payload_bytes = 0;
    std::uint32_t iterations = 0;
    std::string metric;
    std::string value;
};

// "8..4096" doubles from low to high; "8,64,512" lists sizes explicitly.
std::vector<std::uint32_t> parse_size_list(const std::string& text);

std::string bench_topology(const ClusterMap& map);
std::string bench_transport_label(const ClusterMap& map);

// One timed round trip, kept when the caller wants raw data next to the
// summary rows.
struct LatencySample {
    std::string am_type;
    std::uint32_t payload_bytes = 0;
    std::uint64_t sample_ns = 0;
};

// Ping-pong pair over kernels 0 (driver) and 1 (responder); the cluster map
// must hold exactly those two. Kernel 0 decides the options, ships them to
// kernel 1, and returns the measurements; kernel 1 returns an empty vector.
// Cells whose frames cannot fit the transport come back with metric
// "skipped" instead of failing the sweep. In latency mode, a non-null
// `latency_samples` receives every timed iteration.
std::vector<BenchRecord> run_bench_kernel(KernelContext& ctx, const BenchOptions& options,
                                          std::vector<LatencySample>* latency_samples = nullptr);

void write_results_csv(std::ostream& out, const std::vector<BenchRecord>& records);
std::vector<BenchRecord> read_results_csv(std::istream& in);
void write_samples_csv(std::ostream& out, const std::vector<LatencySample>& samples);

}  // namespace shoal
