#pragma once

#include <cstddef>
#include <cstdint>
#include <mutex>
#include <span>
#include <variant>
#include <vector>

#include "shoal/protocol.hpp"

namespace shoal {

struct GlobalAddress {
    KernelId kernel = 0;
    std::uint64_t offset = 0;

    bool operator==(const GlobalAddress&) const = default;
};

// Contiguous access of `len` bytes starting at the base offset.
struct Contiguous {
    std::uint64_t len = 0;

    bool operator==(const Contiguous&) const = default;
};

// A memory access pattern. Strided blocks start at base_offset + i*stride;
// vectored entries use absolute offsets and ignore the base.
using Layout = std::variant<Contiguous, StridedSpec, VectoredSpec>;

std::uint64_t layout_total_bytes(const Layout& layout) noexcept;

// One kernel's slice of the global address space: a zero-initialized,
// bounds-checked byte store. Operations are atomic with respect to each
// other (a reader never observes a torn scatter); the owner kernel and the
// kernel's message engine are the only two parties that touch it.
class Partition {
  public:
    Partition(KernelId owner, std::uint64_t size_bytes);

    Partition(const Partition&) = delete;
    Partition& operator=(const Partition&) = delete;

    KernelId owner() const noexcept { return owner_; }
    std::uint64_t size() const noexcept { return data_.size(); }

    std::vector<std::byte> read(std::uint64_t offset, std::uint64_t len) const;
    void write(std::uint64_t offset, std::span<const std::byte> data);

    std::vector<std::byte> gather(std::uint64_t base_offset, const Layout& layout) const;
    void scatter(std::uint64_t base_offset, const Layout& layout, std::span<const std::byte> data);

    std::vector<std::byte> snapshot() const;

    // Direct storage access for the owner's compute loops. Unsynchronized:
    // the caller must separate its use from engine-side writes (Jacobi does
    // this with the per-iteration barrier).
    std::byte* data() noexcept { return data_.data(); }
    const std::byte* data() const noexcept { return data_.data(); }

  private:
    void check_range(std::uint64_t offset, std::uint64_t len) const;
    template <typename BlockFn>
    void for_each_block(std::uint64_t base_offset, const Layout& layout, BlockFn&& fn) const;

    KernelId owner_;
    mutable std::mutex mu_;
    std::vector<std::byte> data_;
};

}  // namespace shoal
