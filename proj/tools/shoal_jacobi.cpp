#include <cmath>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "shoal/jacobi.hpp"

using namespace shoal;

int main(int argc, char** argv) {
    CLI::App app{"Distributed Jacobi relaxation over the Shoal runtime"};

    std::string cluster_path;
    std::string out_path;
    std::uint16_t node_id = 0;
    JacobiConfig config;
    bool verify = false;

    app.add_option("--cluster", cluster_path, "cluster map file")
        ->required()
        ->check(CLI::ExistingFile);
    app.add_option("--node", node_id, "id of the node this process runs")->required();
    app.add_option("--grid", config.grid_size, "grid edge length N (the grid is N x N)")
        ->required();
    app.add_option("--kernels", config.kernel_count, "compute kernel count K")->required();
    app.add_option("--iters", config.iterations, "relaxation sweeps to run")->required();
    app.add_option("--seed", config.seed, "seed for the initial grid values");
    app.add_flag("--verify", verify,
                 "check the result against the sequential reference (control node only)");
    app.add_option("--out", out_path, "per-kernel timing CSV path");

    CLI11_PARSE(app, argc, argv);

    try {
        const ClusterMap map = load_cluster_map(cluster_path);
        Node node(map, node_id);
        node.connect_peers();

        JacobiResult result;
        std::vector<KernelHandle> handles;
        const bool hosts_control = map.kernel_count() > 0 && map.node_of(0) == node_id;
        for (KernelId k = 0; k < map.kernel_count(); ++k) {
            if (map.node_of(k) != node_id) continue;
            if (k == 0) {
                handles.push_back(node.spawn_kernel(
                    0, [&](KernelContext& ctx) { result = run_jacobi(ctx, config); }));
            } else {
                handles.push_back(node.spawn_kernel(
                    k, [&](KernelContext& ctx) { run_jacobi(ctx, config); }));
            }
        }
        if (handles.empty()) {
            throw ShoalError(ErrorCode::ConfigInvalid,
                             "no kernels live on node " + std::to_string(node_id));
        }
        for (auto& h : handles) h.join();
        node.shutdown();

        if (hosts_control) {
            std::cout << "grid " << config.grid_size << "x" << config.grid_size << ", "
                      << config.iterations << " iterations over " << config.kernel_count
                      << " kernels in " << double(result.total_ns) / 1e6 << " ms, checksum "
                      << std::hex << result.checksum << std::dec << "\n";
            if (!out_path.empty()) {
                std::ofstream out(out_path);
                if (!out) {
                    throw ShoalError(ErrorCode::IoError,
                                     "cannot open " + out_path + " for writing");
                }
                write_timings_csv(out, result.timings);
            }
            if (verify) {
                const auto expected = jacobi_oracle(config);
                double worst = 0.0;
                for (std::size_t i = 0; i < expected.size(); ++i) {
                    worst = std::max(worst, std::abs(result.grid[i] - expected[i]));
                }
                if (worst > 1e-12) {
                    std::cerr << "shoal-jacobi: verification failed, max deviation " << worst
                              << "\n";
                    return 2;
                }
                std::cout << "verified against the sequential reference (max deviation "
                          << worst << ")\n";
            }
        }
    } catch (const std::exception& e) {
        std::cerr << "shoal-jacobi: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
