#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <vector>

#include "shoal/runtime.hpp"

namespace shoal {

// Largest contiguous payload a single AM can carry; one grid row must fit
// or the halo exchange cannot run.
inline constexpr std::size_t kHaloPayloadBudget = kMaxPacketBytes - kBaseHeaderBytes;

struct JacobiConfig {
    std::uint32_t grid_size = 64;    // N; the grid is N x N doubles
    std::uint32_t iterations = 1024;
    std::uint32_t kernel_count = 1;  // compute kernels; the control kernel is extra
    std::uint64_t seed = 1;          // initial interior values derive from this
};

// A horizontal slice of the grid: `rows` owner rows starting at global row
// `row0`, framed by one ghost row above and one below. cells is
// (rows + 2) x grid_size, row-major, with the ghosts at local rows 0 and
// rows + 1.
struct StripState {
    std::uint32_t grid_size = 0;
    std::uint32_t row0 = 0;
    std::uint32_t rows = 0;
    std::uint64_t iteration = 0;
    std::vector<double> cells;

    double& at(std::uint32_t local_row, std::uint32_t col) {
        return cells[std::size_t(local_row) * grid_size + col];
    }
    double at(std::uint32_t local_row, std::uint32_t col) const {
        return cells[std::size_t(local_row) * grid_size + col];
    }
};

// Owner rows take their deterministic initial values, ghosts start zeroed.
StripState make_strip(const JacobiConfig& config, std::uint32_t row0, std::uint32_t rows);

// One relaxation sweep: every cell away from the grid boundary becomes the
// average of its four cardinal neighbours; boundary cells are fixed. Ghost
// rows must hold the neighbours' rows for the strip's current iteration.
StripState jacobi_step(const StripState& strip);

// Throws HaloTooLarge when a grid row cannot travel in one AM.
void check_halo_fits(std::uint32_t grid_size);

struct KernelTiming {
    KernelId kernel = 0;
    std::uint64_t compute_ns = 0;
    std::uint64_t sync_ns = 0;
    std::uint64_t total_ns = 0;
};

struct JacobiResult {
    std::uint64_t total_ns = 0;          // wall clock over the whole run
    std::uint64_t checksum = 0;          // FNV-1a over the gathered grid bytes
    std::vector<double> grid;            // final N x N grid, row-major
    std::vector<KernelTiming> timings;   // control: one entry per compute kernel
};

// Cooperative entry point: every kernel in the cluster calls this. Kernel 0
// acts as control: it validates `config`, broadcasts the parameters, keeps
// the per-iteration barriers company, then gathers timings and the final
// grid; its return value carries everything. Compute kernels (1..K) take
// their parameters from the broadcast, iterate, and return only their own
// timing entry. The cluster map must hold exactly kernel_count + 1 kernels.
JacobiResult run_jacobi(KernelContext& ctx, const JacobiConfig& config);

// Sequential double-buffered reference with the identical initial state and
// update rule; returns the grid after config.iterations sweeps.
std::vector<double> jacobi_oracle(const JacobiConfig& config);

std::uint64_t grid_checksum(const std::vector<double>& grid);

void write_timings_csv(std::ostream& out, const std::vector<KernelTiming>& timings);

}  // namespace shoal
