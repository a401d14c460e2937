#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shoal/cluster.hpp"
#include "shoal/protocol.hpp"

namespace shoal {

struct PeerCounters {
    std::atomic<std::uint64_t> packets_sent{0};
    std::atomic<std::uint64_t> packets_received{0};
    std::atomic<std::uint64_t> bytes_sent{0};
    std::atomic<std::uint64_t> bytes_received{0};
};

// Network traffic counters, totals plus per peer node. Only AM packet frames
// are counted; the tiny connection-setup control frames are not, so a run
// whose AMs all stay on-node reads zero here.
class TransportStats {
  public:
    explicit TransportStats(std::size_t node_count);

    const PeerCounters& totals() const noexcept { return totals_; }
    const PeerCounters& peer(NodeId id) const { return per_peer_[id]; }

    void record_sent(NodeId peer, std::uint64_t frame_bytes);
    void record_received(std::optional<NodeId> peer, std::uint64_t frame_bytes);

    std::uint64_t network_bytes() const noexcept {
        return totals_.bytes_sent.load() + totals_.bytes_received.load();
    }
    std::uint64_t network_packets() const noexcept {
        return totals_.packets_sent.load() + totals_.packets_received.load();
    }

  private:
    PeerCounters totals_;
    std::vector<PeerCounters> per_peer_;
};

struct DriverCallbacks {
    // Called from a receive thread with one whole encoded packet.
    std::function<void(std::vector<std::byte>&&, std::optional<NodeId> from)> on_frame;
    // Framing or socket-level problem; never fatal.
    std::function<void(const std::string&)> on_error;
};

// Moves encoded packets between nodes. TCP frames are length-prefixed
// (4-byte little-endian count of the packet bytes that follow); UDP sends
// one packet per datagram.
class NetDriver {
  public:
    virtual ~NetDriver() = default;

    // Bind listeners and start receive threads. Throws BindFailure.
    virtual void start() = 0;

    // Establish (tcp) or probe (udp) connectivity to every other node,
    // retrying until the deadline. Throws PeerUnreachable.
    virtual void connect_peers(std::chrono::steady_clock::time_point deadline) = 0;

    // Hand one encoded packet to the peer node. Callable concurrently;
    // writes to a given peer are serialized so TCP per-pair FIFO holds.
    virtual void send_to(NodeId peer, std::span<const std::byte> packet) = 0;

    virtual void stop() = 0;
};

std::unique_ptr<NetDriver> make_tcp_driver(const ClusterMap& map, NodeId self,
                                           TransportStats& stats, DriverCallbacks callbacks);
std::unique_ptr<NetDriver> make_udp_driver(const ClusterMap& map, NodeId self,
                                           TransportStats& stats, DriverCallbacks callbacks);

std::unique_ptr<NetDriver> make_driver(const ClusterMap& map, NodeId self, TransportStats& stats,
                                       DriverCallbacks callbacks);

}  // namespace shoal
