#pragma once

#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "shoal/cluster.hpp"
#include "shoal/error.hpp"
#include "shoal/protocol.hpp"

// Checks that `expr` throws ShoalError carrying the given code.
#define CHECK_SHOAL_ERROR(expr, expected_code)                                        \
    do {                                                                              \
        bool threw_ = false;                                                          \
        try {                                                                         \
            (void)(expr);                                                             \
        } catch (const shoal::ShoalError& e_) {                                       \
            threw_ = true;                                                            \
            CHECK_MESSAGE(e_.code() == shoal::ErrorCode::expected_code,               \
                          #expr " threw ", e_.what(), " instead of ",                 \
                          shoal::to_string(shoal::ErrorCode::expected_code));         \
        }                                                                             \
        CHECK_MESSAGE(threw_, #expr " did not throw");                                \
    } while (0)

namespace testsupport {

// doctest assertions are not safe off the main thread; kernel bodies throw
// instead and the failure surfaces through KernelHandle::join.
inline void expect(bool ok, const std::string& what) {
    if (!ok) throw std::runtime_error("expectation failed: " + what);
}

inline std::uint16_t free_port(int socktype) {
    int fd = ::socket(AF_INET, socktype, 0);
    if (fd < 0) throw std::runtime_error("free_port: socket failed");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
        ::close(fd);
        throw std::runtime_error("free_port: bind failed");
    }
    socklen_t len = sizeof(addr);
    ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
    std::uint16_t port = ntohs(addr.sin_port);
    ::close(fd);
    return port;
}

inline std::uint16_t free_tcp_port() { return free_port(SOCK_STREAM); }
inline std::uint16_t free_udp_port() { return free_port(SOCK_DGRAM); }

inline shoal::ClusterMap single_node_map(std::size_t kernels,
                                         std::uint64_t partition_bytes = 1u << 20,
                                         bool event_log = false) {
    shoal::ClusterMap map;
    map.nodes.push_back(shoal::NodeSpec{0, "127.0.0.1", 0, 0});
    for (std::size_t k = 0; k < kernels; ++k) {
        map.kernels.push_back(shoal::KernelSpec{shoal::KernelId(k), 0, partition_bytes});
    }
    map.event_log = event_log;
    return map;
}

// Kernels 0..on_first-1 live on node 0, the rest on node 1. Ports are
// allocated fresh so parallel test binaries do not collide.
inline shoal::ClusterMap two_node_map(std::size_t on_first, std::size_t on_second,
                                      shoal::TransportKind transport = shoal::TransportKind::Tcp,
                                      std::uint64_t partition_bytes = 1u << 20,
                                      bool event_log = false) {
    shoal::ClusterMap map;
    map.transport = transport;
    map.nodes.push_back(shoal::NodeSpec{0, "127.0.0.1", free_tcp_port(), free_udp_port()});
    map.nodes.push_back(shoal::NodeSpec{1, "127.0.0.1", free_tcp_port(), free_udp_port()});
    for (std::size_t k = 0; k < on_first + on_second; ++k) {
        map.kernels.push_back(shoal::KernelSpec{shoal::KernelId(k),
                                                shoal::NodeId(k < on_first ? 0 : 1),
                                                partition_bytes});
    }
    map.event_log = event_log;
    return map;
}

inline std::vector<std::byte> random_bytes(std::mt19937_64& rng, std::size_t n) {
    std::uniform_int_distribution<int> dist(0, 255);
    std::vector<std::byte> out(n);
    for (auto& b : out) b = std::byte(static_cast<unsigned char>(dist(rng)));
    return out;
}

struct GeneratedPacket {
    shoal::AmHeader header;
    std::vector<std::byte> payload;
};

// Draws a header uniformly-ish over the space the validator accepts,
// including every class, flag combination and descriptor shape.
inline GeneratedPacket random_valid_packet(std::mt19937_64& rng) {
    using namespace shoal;
    auto pick = [&rng](int lo, int hi) {
        return std::uniform_int_distribution<int>(lo, hi)(rng);
    };

    GeneratedPacket g;
    AmHeader& h = g.header;
    h.cls = AmClass(pick(0, 2));
    h.src = KernelId(pick(0, 0xFFFF));
    h.dst = KernelId(pick(0, 0xFFFF));
    h.handler = HandlerId(pick(0, 0xFFFF));
    h.token = Token(rng());
    const int nargs = pick(0, int(kMaxArgs));
    for (int i = 0; i < nargs; ++i) h.args.push_back(rng());
    h.flags.async = pick(0, 1) != 0;

    const std::size_t budget = kMaxPacketBytes - kBaseHeaderBytes - kWordBytes * nargs;

    switch (h.cls) {
        case AmClass::Short:
            if (pick(0, 3) == 0) {
                h.flags.reply = true;
                h.flags.async = true;
            }
            break;
        case AmClass::Medium: {
            const int variant = pick(0, 2);
            if (variant == 2) {
                h.flags.get = true;
                h.flags.async = true;
                h.payload_len = std::uint32_t(rng() % 1000000);
                h.dest_offset = rng() % (1ull << 40);
            } else {
                h.flags.fifo = variant == 0;
                h.payload_len = std::uint32_t(pick(0, int(budget)));
                g.payload = random_bytes(rng, h.payload_len);
            }
            break;
        }
        case AmClass::Long: {
            const int variant = pick(0, 3);
            if (variant == 3) {
                h.flags.get = true;
                h.flags.async = true;
                h.payload_len = std::uint32_t(rng() % 1000000);
                h.dest_offset = rng() % (1ull << 40);
            } else if (variant == 1) {
                const std::size_t desc_budget = budget - 12;
                const std::uint32_t block = std::uint32_t(pick(1, 64));
                const int max_count = int(std::min<std::size_t>(16, desc_budget / block));
                const std::uint32_t count = std::uint32_t(pick(1, std::max(1, max_count)));
                h.flags.fifo = true;
                h.flags.strided = true;
                h.layout = StridedSpec{block, block + std::uint32_t(pick(0, 32)), count};
                h.payload_len = block * count;
                h.dest_offset = rng() % (1ull << 20);
                g.payload = random_bytes(rng, h.payload_len);
            } else if (variant == 2) {
                const int k = pick(1, int(kMaxVectoredEntries));
                const std::size_t desc_budget = budget - 4 - 12 * std::size_t(k);
                const int per = int(std::min<std::size_t>(128, std::max<std::size_t>(1, desc_budget / k)));
                VectoredSpec v;
                std::uint64_t total = 0;
                for (int i = 0; i < k; ++i) {
                    const std::uint32_t len = std::uint32_t(pick(1, per));
                    v.entries.push_back(VectoredEntry{rng() % (1ull << 20), len});
                    total += len;
                }
                h.flags.fifo = true;
                h.flags.vectored = true;
                h.layout = v;
                h.payload_len = std::uint32_t(total);
                g.payload = random_bytes(rng, h.payload_len);
            } else {
                h.flags.fifo = pick(0, 1) != 0;
                h.payload_len = std::uint32_t(pick(0, int(budget)));
                h.dest_offset = rng() % (1ull << 40);
                g.payload = random_bytes(rng, h.payload_len);
            }
            break;
        }
    }
    return g;
}

}  // namespace testsupport
