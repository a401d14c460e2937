#include "shoal/memory.hpp"

#include <cstring>
#include <string>

namespace shoal {

std::uint64_t layout_total_bytes(const Layout& layout) noexcept {
    return std::visit([](const auto& l) -> std::uint64_t {
        using T = std::decay_t<decltype(l)>;
        if constexpr (std::is_same_v<T, Contiguous>) {
            return l.len;
        } else {
            return l.total_bytes();
        }
    }, layout);
}

Partition::Partition(KernelId owner, std::uint64_t size_bytes)
    : owner_(owner), data_(size_bytes) {}

void Partition::check_range(std::uint64_t offset, std::uint64_t len) const {
    if (offset > data_.size() || len > data_.size() - offset) {
        throw ShoalError(ErrorCode::OutOfBounds,
                         "range [" + std::to_string(offset) + ", " + std::to_string(offset + len) +
                             ") exceeds partition of " + std::to_string(data_.size()) + " bytes");
    }
}

// Visits (partition_offset, data_offset, len) for each block of the layout,
// in layout order. Bounds are checked up front so a failing scatter writes
// nothing.
template <typename BlockFn>
void Partition::for_each_block(std::uint64_t base_offset, const Layout& layout, BlockFn&& fn) const {
    if (const auto* c = std::get_if<Contiguous>(&layout)) {
        check_range(base_offset, c->len);
        fn(base_offset, std::uint64_t{0}, c->len);
    } else if (const auto* s = std::get_if<StridedSpec>(&layout)) {
        for (std::uint32_t i = 0; i < s->block_count; ++i) {
            check_range(base_offset + std::uint64_t{i} * s->stride_bytes, s->block_bytes);
        }
        for (std::uint32_t i = 0; i < s->block_count; ++i) {
            fn(base_offset + std::uint64_t{i} * s->stride_bytes,
               std::uint64_t{i} * s->block_bytes, std::uint64_t{s->block_bytes});
        }
    } else {
        const auto& v = std::get<VectoredSpec>(layout);
        for (const auto& e : v.entries) check_range(e.offset, e.len);
        std::uint64_t pos = 0;
        for (const auto& e : v.entries) {
            fn(e.offset, pos, std::uint64_t{e.len});
            pos += e.len;
        }
    }
}

std::vector<std::byte> Partition::read(std::uint64_t offset, std::uint64_t len) const {
    std::lock_guard lock(mu_);
    check_range(offset, len);
    return {data_.begin() + std::ptrdiff_t(offset), data_.begin() + std::ptrdiff_t(offset + len)};
}

void Partition::write(std::uint64_t offset, std::span<const std::byte> data) {
    std::lock_guard lock(mu_);
    check_range(offset, data.size());
    if (!data.empty()) std::memcpy(data_.data() + offset, data.data(), data.size());
}

std::vector<std::byte> Partition::gather(std::uint64_t base_offset, const Layout& layout) const {
    std::lock_guard lock(mu_);
    std::vector<std::byte> out(layout_total_bytes(layout));
    for_each_block(base_offset, layout, [&](std::uint64_t part_off, std::uint64_t data_off, std::uint64_t len) {
        if (len) std::memcpy(out.data() + data_off, data_.data() + part_off, len);
    });
    return out;
}

void Partition::scatter(std::uint64_t base_offset, const Layout& layout, std::span<const std::byte> data) {
    std::lock_guard lock(mu_);
    const std::uint64_t total = layout_total_bytes(layout);
    if (data.size() != total) {
        throw ShoalError(ErrorCode::LengthMismatch,
                         "layout covers " + std::to_string(total) + " bytes, data is " +
                             std::to_string(data.size()));
    }
    for_each_block(base_offset, layout, [&](std::uint64_t part_off, std::uint64_t data_off, std::uint64_t len) {
        if (len) std::memcpy(data_.data() + part_off, data.data() + data_off, len);
    });
}

std::vector<std::byte> Partition::snapshot() const {
    std::lock_guard lock(mu_);
    return data_;
}

}  // namespace shoal
