#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shoal/cluster.hpp"
#include "shoal/error.hpp"
#include "shoal/memory.hpp"
#include "shoal/protocol.hpp"
#include "shoal/transport.hpp"

namespace shoal {

class Node;

namespace detail {
struct KernelState;
}

// Invoked on the receiving kernel's engine thread. Handlers may touch the
// kernel's partition and local state but must not send messages or block on
// runtime calls; doing so throws HANDLER_RESTRICTION.
using Handler = std::function<void(KernelId src, std::span<const std::uint64_t> args,
                                   std::span<const std::byte> payload, Token token)>;

struct Delivery {
    KernelId src = 0;
    std::vector<std::byte> payload;
};

struct EventRecord {
    std::uint64_t timestamp_ns = 0;
    KernelId kernel = 0;
    std::string event;
    std::string detail;
};

struct FaultRecord {
    KernelId kernel = 0;
    ErrorCode code = ErrorCode::ValidationError;
    std::string detail;
};

struct Diagnostics {
    std::uint64_t decode_errors = 0;
    std::uint64_t dropped_foreign = 0;  // frames for kernels that do not live here
    std::vector<FaultRecord> faults;
};

// Per-kernel face of the runtime, passed to the kernel body and valid for
// the body's lifetime. All blocking calls throw SHUTDOWN if the node stops
// underneath them and TIMEOUT if the optional deadline expires.
class KernelContext {
  public:
    KernelId id() const;
    Partition& partition();
    const ClusterMap& cluster() const;

    // Handler ids are caller-chosen; 0 and the internal band are refused.
    void register_handler(HandlerId handler, Handler fn);

    void am_short(KernelId dst, HandlerId handler, const std::vector<std::uint64_t>& args = {},
                  bool async = false);

    // Medium payloads ride to the destination's delivery queue. The fifo
    // variant takes the bytes from the caller; the plain variant reads them
    // from this kernel's partition.
    void am_medium_fifo(KernelId dst, HandlerId handler, std::span<const std::byte> payload,
                        const std::vector<std::uint64_t>& args = {}, bool async = false);
    void am_medium(KernelId dst, HandlerId handler, std::uint64_t src_offset, std::uint32_t len,
                   const std::vector<std::uint64_t>& args = {}, bool async = false);

    // Long payloads land in the destination partition at dest_offset before
    // the handler runs.
    void am_long_fifo(KernelId dst, HandlerId handler, std::span<const std::byte> payload,
                      std::uint64_t dest_offset, const std::vector<std::uint64_t>& args = {},
                      bool async = false);
    void am_long(KernelId dst, HandlerId handler, std::uint64_t src_offset, std::uint32_t len,
                 std::uint64_t dest_offset, const std::vector<std::uint64_t>& args = {},
                 bool async = false);
    void am_long_strided(KernelId dst, HandlerId handler, std::span<const std::byte> payload,
                         std::uint64_t dest_offset, const StridedSpec& layout,
                         const std::vector<std::uint64_t>& args = {}, bool async = false);
    void am_long_vectored(KernelId dst, HandlerId handler, std::span<const std::byte> payload,
                          const VectoredSpec& layout, const std::vector<std::uint64_t>& args = {},
                          bool async = false);

    // One-sided reads. Completion bumps the reply counter; a medium get also
    // queues the fetched bytes and runs `handler` with them, a long get
    // writes them into this kernel's partition at local_offset.
    Token get_medium(KernelId src_kernel, std::uint64_t src_offset, std::uint32_t len,
                     HandlerId handler = kReplyHandler,
                     const std::vector<std::uint64_t>& args = {});
    Token get_long(KernelId src_kernel, std::uint64_t src_offset, std::uint32_t len,
                   std::uint64_t local_offset);

    // Blocks until n more replies than the last wait consumed have arrived.
    void wait_replies(std::uint64_t n, std::optional<std::chrono::milliseconds> timeout = {});
    std::uint64_t reply_count() const;

    // Pops the oldest queued medium payload.
    Delivery recv_payload(std::optional<std::chrono::milliseconds> timeout = {});

    void barrier(std::optional<std::chrono::milliseconds> timeout = {});

  private:
    friend class Node;
    friend struct detail::KernelState;
    KernelContext(Node& node, detail::KernelState& state);
    Node* node_;
    detail::KernelState* state_;
};

using KernelBody = std::function<void(KernelContext&)>;

class KernelHandle {
  public:
    // Waits for the kernel body to return; rethrows anything it threw.
    void join();
    bool joinable() const;

  private:
    friend class Node;
    explicit KernelHandle(detail::KernelState* state) : state_(state) {}
    detail::KernelState* state_;
};

// One runtime instance per cluster node. Owns the partitions and message
// engines for every kernel mapped here; engines run from construction so
// messages can arrive before a kernel body is spawned.
class Node {
  public:
    Node(ClusterMap map, NodeId self);
    ~Node();
    Node(const Node&) = delete;
    Node& operator=(const Node&) = delete;

    // Waits until every other node answers on the configured transport.
    void connect_peers(std::chrono::milliseconds timeout = std::chrono::milliseconds(5000));

    KernelHandle spawn_kernel(KernelId id, KernelBody body);

    // Stops engines and transport; blocked kernel calls throw SHUTDOWN.
    void shutdown();

    NodeId id() const { return self_; }
    const ClusterMap& cluster() const { return map_; }
    const TransportStats& stats() const { return stats_; }
    Partition& partition(KernelId id);
    Diagnostics diagnostics() const;
    std::vector<EventRecord> events() const;

  private:
    friend class KernelContext;
    friend struct detail::KernelState;

    detail::KernelState& local_state(KernelId id);
    detail::KernelState* local_state_or_null(KernelId id);
    void route_frame(std::vector<std::byte>&& frame);
    void on_wire_frame(std::vector<std::byte>&& frame, std::optional<NodeId> from);
    void on_wire_error(const std::string& what);
    void log_event(KernelId kernel, const std::string& event, const std::string& detail);
    void record_fault(KernelId kernel, ErrorCode code, const std::string& detail);
    void flush_event_log();

    ClusterMap map_;
    NodeId self_;
    TransportStats stats_;
    std::unique_ptr<NetDriver> driver_;
    std::vector<std::unique_ptr<detail::KernelState>> kernels_;
    std::vector<detail::KernelState*> by_kernel_id_;  // index = KernelId, null if remote
    std::atomic<std::uint64_t> decode_errors_{0};
    std::atomic<std::uint64_t> dropped_foreign_{0};
    mutable std::mutex faults_mu_;
    std::vector<FaultRecord> faults_;
    mutable std::mutex events_mu_;
    std::vector<EventRecord> events_;
    std::atomic<bool> stopped_{false};
};

}  // namespace shoal
