#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "shoal/bench.hpp"

using namespace shoal;

int main(int argc, char** argv) {
    CLI::App app{"Latency/throughput sweep over a two-kernel Shoal pair"};

    std::string cluster_path;
    std::string mode_name;
    std::string transport_name;
    std::string sizes_text;
    std::string out_path;
    std::string samples_path;
    std::uint16_t node_id = 0;
    BenchOptions options;
    std::uint64_t udp_max_override = 0;

    app.add_option("--cluster", cluster_path, "cluster map file")
        ->required()
        ->check(CLI::ExistingFile);
    app.add_option("--node", node_id, "id of the node this process runs")->required();
    app.add_option("--mode", mode_name, "latency or throughput")->required();
    app.add_option("--transport", transport_name,
                   "tcp, udp or loopback; must agree with the cluster map")
        ->required();
    app.add_option("--sizes", sizes_text,
                   "payload sizes: lo..hi doubling (8..4096) or a comma list (8,64,512)");
    app.add_option("--iters", options.iters, "timed iterations per cell");
    app.add_option("--warmup", options.warmup, "untimed iterations per cell");
    app.add_option("--out", out_path, "results CSV path (written by the node hosting kernel 0)")
        ->required();
    app.add_option("--samples-out", samples_path, "raw latency samples CSV path");
    app.add_option("--udp-max-bytes", udp_max_override, "override the datagram size cap");

    CLI11_PARSE(app, argc, argv);

    try {
        ClusterMap map = load_cluster_map(cluster_path);
        if (map.kernel_count() != 2) {
            throw ShoalError(ErrorCode::ConfigInvalid,
                             "the benchmark needs a cluster map with exactly kernels 0 and 1");
        }
        const bool intra_node = map.node_of(0) == map.node_of(1);
        if (transport_name == "loopback") {
            if (!intra_node) {
                throw ShoalError(ErrorCode::ConfigInvalid,
                                 "--transport loopback needs both kernels on one node");
            }
        } else if (auto kind = transport_from_string(transport_name)) {
            if (intra_node) {
                throw ShoalError(ErrorCode::ConfigInvalid,
                                 "--transport " + transport_name +
                                     " needs the kernels on different nodes; this map is "
                                     "single-node (use loopback)");
            }
            map.transport = *kind;
        } else {
            throw ShoalError(ErrorCode::ValidationError,
                             "--transport must be tcp, udp or loopback, got \"" +
                                 transport_name + "\"");
        }
        if (udp_max_override != 0) map.udp_max_bytes = udp_max_override;

        options.mode = bench_mode_from_string(mode_name);
        if (!sizes_text.empty()) options.sizes = parse_size_list(sizes_text);

        Node node(map, node_id);
        node.connect_peers();

        std::vector<BenchRecord> records;
        std::vector<LatencySample> samples;
        std::vector<KernelHandle> handles;
        const bool hosts_driver = map.node_of(0) == node_id;
        if (hosts_driver) {
            handles.push_back(node.spawn_kernel(0, [&](KernelContext& ctx) {
                records = run_bench_kernel(ctx, options,
                                           samples_path.empty() ? nullptr : &samples);
            }));
        }
        if (map.node_of(1) == node_id) {
            handles.push_back(node.spawn_kernel(
                1, [&](KernelContext& ctx) { run_bench_kernel(ctx, options); }));
        }
        if (handles.empty()) {
            throw ShoalError(ErrorCode::ConfigInvalid,
                             "no benchmark kernel lives on node " + std::to_string(node_id));
        }
        for (auto& h : handles) h.join();
        node.shutdown();

        if (hosts_driver) {
            std::ofstream out(out_path);
            if (!out) {
                throw ShoalError(ErrorCode::IoError, "cannot open " + out_path + " for writing");
            }
            write_results_csv(out, records);
            if (!samples_path.empty()) {
                std::ofstream sout(samples_path);
                if (!sout) {
                    throw ShoalError(ErrorCode::IoError,
                                     "cannot open " + samples_path + " for writing");
                }
                write_samples_csv(sout, samples);
            }
            std::size_t skipped = 0;
            for (const auto& r : records) skipped += r.metric == "skipped" ? 1 : 0;
            std::cout << "wrote " << records.size() << " rows to " << out_path;
            if (skipped > 0) std::cout << " (" << skipped << " cells skipped)";
            std::cout << "\n";
        }
    } catch (const std::exception& e) {
        std::cerr << "shoal-bench: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
