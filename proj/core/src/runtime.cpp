#include "shoal/runtime.hpp"

#include <algorithm>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <thread>
#include <unordered_map>
#include <utility>

namespace shoal {

namespace {

// Runtime control traffic sits in the reserved handler band.
constexpr HandlerId kBarrierEnterHandler = 0xFFF1;
constexpr HandlerId kBarrierReleaseHandler = 0xFFF2;

// Tokens with the top bit set belong to outstanding gets; the low 31 bits
// come from the per-kernel sequence counter.
constexpr Token kGetTokenFlag = 0x80000000u;

thread_local int t_handler_depth = 0;

struct HandlerScope {
    HandlerScope() { ++t_handler_depth; }
    ~HandlerScope() { --t_handler_depth; }
};

void check_not_in_handler(const char* op) {
    if (t_handler_depth > 0) {
        throw ShoalError(ErrorCode::HandlerRestriction,
                         std::string(op) + " is not allowed inside a message handler");
    }
}

std::uint64_t now_ns() {
    return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(
                                          std::chrono::steady_clock::now().time_since_epoch())
                                          .count());
}

ErrorCode code_from_u64(std::uint64_t v) {
    if (v > static_cast<std::uint64_t>(ErrorCode::IoError)) return ErrorCode::ValidationError;
    return static_cast<ErrorCode>(v);
}

KernelId peek_dst(std::span<const std::byte> frame) {
    return static_cast<KernelId>(std::to_integer<std::uint8_t>(frame[6]) |
                                 (std::to_integer<std::uint8_t>(frame[7]) << 8));
}

}  // namespace

namespace detail {

struct PendingGet {
    AmClass cls = AmClass::Medium;
};

struct KernelState {
    KernelState(Node& n, const KernelSpec& spec)
        : node(&n), id(spec.id), part(spec.id, spec.partition_bytes) {}

    Node* node;
    KernelId id;
    Partition part;
    std::unique_ptr<KernelContext> ctx;

    std::thread engine_thread;
    std::mutex inbox_mu;
    std::condition_variable inbox_cv;
    std::deque<std::vector<std::byte>> inbox;
    std::atomic<bool> stop_flag{false};

    // Kernel-visible progress state; state_cv wakes waiters on any change.
    mutable std::mutex state_mu;
    std::condition_variable state_cv;
    std::uint64_t reply_count = 0;
    std::uint64_t reply_baseline = 0;
    std::deque<Delivery> recv_queue;
    std::uint64_t released_epoch = 0;
    std::uint64_t root_entered = 0;                    // kernel 0 only
    std::map<std::uint64_t, std::uint32_t> arrivals;   // kernel 0 only
    std::map<std::pair<KernelId, Token>, PendingGet> pending_gets;

    std::mutex handlers_mu;
    std::unordered_map<HandlerId, Handler> handlers;

    std::atomic<std::uint32_t> token_seq{0};

    std::thread body_thread;
    std::exception_ptr body_error;
    std::atomic<bool> spawned{false};
    std::atomic<bool> body_joined{false};

    std::uint64_t local_epoch = 0;  // barrier count; body thread only

    // -- engine lifecycle ---------------------------------------------------

    void start_engine() {
        engine_thread = std::thread([this] { engine_loop(); });
    }

    void signal_stop() {
        stop_flag.store(true);
        inbox_cv.notify_all();
        state_cv.notify_all();
    }

    void join_engine() {
        if (engine_thread.joinable()) engine_thread.join();
    }

    void enqueue(std::vector<std::byte>&& frame) {
        {
            std::lock_guard<std::mutex> lk(inbox_mu);
            inbox.push_back(std::move(frame));
        }
        inbox_cv.notify_one();
    }

    void engine_loop() {
        for (;;) {
            std::vector<std::byte> frame;
            {
                std::unique_lock<std::mutex> lk(inbox_mu);
                inbox_cv.wait(lk, [&] { return stop_flag.load() || !inbox.empty(); });
                if (stop_flag.load()) return;
                frame = std::move(inbox.front());
                inbox.pop_front();
            }
            Packet p;
            try {
                p = decode_packet(frame);
            } catch (const ShoalError& e) {
                node->decode_errors_.fetch_add(1, std::memory_order_relaxed);
                node->record_fault(id, e.code(), std::string("inbound frame rejected: ") + e.what());
                continue;
            }
            process(std::move(p));
        }
    }

    // -- inbound processing (engine thread) ---------------------------------

    void process(Packet&& p) {
        const AmHeader& h = p.header;
        if (h.handler >= kFirstInternalHandler && !h.flags.reply) {
            handle_internal(h);
        } else if (h.flags.reply) {
            handle_reply(h);
        } else if (h.flags.get) {
            serve_get(h);
        } else {
            deliver(std::move(p));
        }
    }

    void handle_internal(const AmHeader& h) {
        const std::uint64_t epoch = h.args.empty() ? 0 : h.args[0];
        if (h.handler == kBarrierEnterHandler) {
            {
                std::lock_guard<std::mutex> lk(state_mu);
                arrivals[epoch] += 1;
            }
            root_maybe_release(epoch);
        } else if (h.handler == kBarrierReleaseHandler) {
            {
                std::lock_guard<std::mutex> lk(state_mu);
                released_epoch = std::max(released_epoch, epoch);
            }
            state_cv.notify_all();
        } else {
            node->record_fault(id, ErrorCode::UnknownHandler,
                               "internal handler " + std::to_string(h.handler));
        }
    }

    // Kernel 0 releases an epoch once it has entered itself and every other
    // kernel's ENTER arrived. Called from both the body thread (own entry)
    // and the engine thread (arrivals).
    void root_maybe_release(std::uint64_t epoch) {
        const std::size_t k = node->map_.kernel_count();
        bool release = false;
        {
            std::lock_guard<std::mutex> lk(state_mu);
            auto it = arrivals.find(epoch);
            const std::uint32_t got = it == arrivals.end() ? 0 : it->second;
            if (root_entered >= epoch && got == k - 1 && released_epoch < epoch) {
                released_epoch = epoch;
                if (it != arrivals.end()) arrivals.erase(it);
                release = true;
            }
        }
        if (!release) return;
        state_cv.notify_all();
        AmHeader rel;
        rel.cls = AmClass::Short;
        rel.flags.async = true;
        rel.src = id;
        rel.handler = kBarrierReleaseHandler;
        rel.args = {epoch};
        for (const KernelSpec& ks : node->map_.kernels) {
            if (ks.id == id) continue;
            rel.dst = ks.id;
            node->route_frame(encode_packet(rel, {}));
        }
    }

    void handle_reply(const AmHeader& h) {
        std::optional<ErrorCode> fault;
        if (!h.args.empty()) fault = code_from_u64(h.args[0]);
        const bool for_get = (h.token & kGetTokenFlag) != 0;
        bool counted = false;
        {
            std::lock_guard<std::mutex> lk(state_mu);
            if (for_get) {
                auto it = pending_gets.find({h.src, h.token});
                if (it != pending_gets.end()) {
                    pending_gets.erase(it);
                    reply_count += 1;
                    counted = true;
                }
            } else {
                reply_count += 1;
                counted = true;
            }
        }
        state_cv.notify_all();
        if (!counted) {
            node->record_fault(id, ErrorCode::ValidationError,
                               "reply for unknown get token from kernel " + std::to_string(h.src));
            return;
        }
        if (fault) {
            node->record_fault(id, *fault,
                               "kernel " + std::to_string(h.src) + " rejected request (token " +
                                   std::to_string(h.token) + ")");
        }
    }

    void serve_get(const AmHeader& h) {
        std::vector<std::byte> data;
        try {
            data = part.read(h.dest_offset, h.payload_len);
        } catch (const ShoalError& e) {
            node->record_fault(id, e.code(), std::string("get rejected: ") + e.what());
            send_reply(h, e.code());
            return;
        }
        AmHeader resp;
        resp.cls = h.cls;
        resp.flags.fifo = true;
        resp.flags.async = true;
        resp.src = id;
        resp.dst = h.src;
        resp.handler = h.handler;
        resp.token = h.token;
        resp.payload_len = h.payload_len;
        if (h.cls == AmClass::Long) {
            // args[0] of a long get carries the requester-side offset.
            resp.dest_offset = h.args.empty() ? 0 : h.args[0];
        } else {
            resp.args = h.args;
        }
        try {
            node->route_frame(encode_packet(resp, data));
        } catch (const ShoalError& e) {
            node->record_fault(id, e.code(), std::string("get response failed: ") + e.what());
            send_reply(h, e.code());
        }
    }

    // Puts and shorts. Long payloads are committed to the partition before
    // the handler runs or any reply leaves.
    void deliver(Packet&& p) {
        const AmHeader& h = p.header;
        std::optional<ErrorCode> fault;
        std::string fault_detail;

        if (h.cls == AmClass::Long) {
            try {
                if (h.layout) {
                    const Layout lay =
                        std::visit([](const auto& v) -> Layout { return v; }, *h.layout);
                    part.scatter(h.dest_offset, lay, p.payload);
                } else {
                    part.write(h.dest_offset, p.payload);
                }
            } catch (const ShoalError& e) {
                fault = e.code();
                fault_detail = e.what();
            }
        }

        if ((h.token & kGetTokenFlag) != 0) {
            complete_get(std::move(p), fault, fault_detail);
            return;
        }

        if (fault) {
            node->record_fault(id, *fault, "long payload dropped: " + fault_detail);
        } else {
            if (h.cls == AmClass::Medium) {
                {
                    std::lock_guard<std::mutex> lk(state_mu);
                    recv_queue.push_back(Delivery{h.src, p.payload});
                }
                state_cv.notify_all();
            }
            if (h.handler == kReplyHandler) {
                {
                    std::lock_guard<std::mutex> lk(state_mu);
                    reply_count += 1;
                }
                state_cv.notify_all();
            } else {
                auto res = run_handler(h, p.payload);
                fault = res.first;
                fault_detail = res.second;
            }
        }

        if (!h.flags.async) send_reply(h, fault);
    }

    // A put whose token carries the get bit is the response to one of our
    // own get requests; it completes locally and never triggers a reply.
    void complete_get(Packet&& p, std::optional<ErrorCode> fault, const std::string& fault_detail) {
        const AmHeader& h = p.header;
        bool known = false;
        {
            std::lock_guard<std::mutex> lk(state_mu);
            auto it = pending_gets.find({h.src, h.token});
            if (it != pending_gets.end()) {
                known = true;
                pending_gets.erase(it);
            }
        }
        if (!known) {
            node->record_fault(id, ErrorCode::ValidationError,
                               "unmatched get response from kernel " + std::to_string(h.src));
            return;
        }
        if (fault) {
            node->record_fault(id, *fault, "get response dropped: " + fault_detail);
        } else if (h.cls == AmClass::Medium) {
            {
                std::lock_guard<std::mutex> lk(state_mu);
                recv_queue.push_back(Delivery{h.src, p.payload});
            }
            state_cv.notify_all();
            if (h.handler != kReplyHandler) run_handler(h, p.payload);
        }
        {
            std::lock_guard<std::mutex> lk(state_mu);
            reply_count += 1;
        }
        state_cv.notify_all();
    }

    std::pair<std::optional<ErrorCode>, std::string> run_handler(
        const AmHeader& h, std::span<const std::byte> payload) {
        Handler fn;
        {
            std::lock_guard<std::mutex> lk(handlers_mu);
            auto it = handlers.find(h.handler);
            if (it != handlers.end()) fn = it->second;
        }
        if (!fn) {
            std::string detail = "no handler " + std::to_string(h.handler) + " at kernel " +
                                 std::to_string(id);
            node->record_fault(id, ErrorCode::UnknownHandler, detail);
            return {ErrorCode::UnknownHandler, detail};
        }
        try {
            HandlerScope scope;
            fn(h.src, h.args, payload, h.token);
            return {std::nullopt, {}};
        } catch (const ShoalError& e) {
            node->record_fault(id, e.code(), std::string("handler threw: ") + e.what());
            return {e.code(), e.what()};
        } catch (const std::exception& e) {
            node->record_fault(id, ErrorCode::ValidationError,
                               std::string("handler threw: ") + e.what());
            return {ErrorCode::ValidationError, e.what()};
        }
    }

    void send_reply(const AmHeader& req, std::optional<ErrorCode> fault) {
        AmHeader r;
        r.cls = AmClass::Short;
        r.flags.reply = true;
        r.flags.async = true;
        r.src = id;
        r.dst = req.src;
        r.handler = kReplyHandler;
        r.token = req.token;
        if (fault) r.args = {static_cast<std::uint64_t>(*fault)};
        try {
            node->route_frame(encode_packet(r, {}));
        } catch (const ShoalError& e) {
            node->record_fault(id, e.code(), std::string("reply send failed: ") + e.what());
        }
    }

    // -- kernel body side ---------------------------------------------------

    void send_request(AmHeader& h, std::span<const std::byte> payload) {
        check_not_in_handler("sending");
        if (stop_flag.load()) throw ShoalError(ErrorCode::Shutdown, "node is stopping");
        if (h.dst >= node->map_.kernel_count()) {
            throw ShoalError(ErrorCode::ValidationError,
                             "destination kernel " + std::to_string(h.dst) + " not in cluster map");
        }
        if (h.handler >= kFirstInternalHandler) {
            throw ShoalError(ErrorCode::ReservedId,
                             "handler " + std::to_string(h.handler) + " is reserved");
        }
        h.src = id;
        h.token = token_seq.fetch_add(1, std::memory_order_relaxed) & ~kGetTokenFlag;
        node->route_frame(encode_packet(h, payload));
    }

    Token send_get(AmHeader& h, AmClass expected) {
        check_not_in_handler("get");
        if (stop_flag.load()) throw ShoalError(ErrorCode::Shutdown, "node is stopping");
        if (h.dst >= node->map_.kernel_count()) {
            throw ShoalError(ErrorCode::ValidationError,
                             "source kernel " + std::to_string(h.dst) + " not in cluster map");
        }
        if (h.handler >= kFirstInternalHandler) {
            throw ShoalError(ErrorCode::ReservedId,
                             "handler " + std::to_string(h.handler) + " is reserved");
        }
        const std::size_t response_bytes =
            kBaseHeaderBytes + kWordBytes * h.args.size() + h.payload_len;
        if (response_bytes > kMaxPacketBytes) {
            throw ShoalError(ErrorCode::Oversize,
                             "get of " + std::to_string(h.payload_len) + " bytes needs a " +
                                 std::to_string(response_bytes) + " byte response, cap is " +
                                 std::to_string(kMaxPacketBytes));
        }
        if (node->map_.transport == TransportKind::Udp &&
            node->map_.node_of(h.dst) != node->self_ &&
            response_bytes > node->map_.udp_max_bytes) {
            throw ShoalError(ErrorCode::UdpFragmentLimit,
                             "get response of " + std::to_string(response_bytes) +
                                 " bytes exceeds udp datagram cap of " +
                                 std::to_string(node->map_.udp_max_bytes));
        }
        h.src = id;
        h.token = kGetTokenFlag |
                  (token_seq.fetch_add(1, std::memory_order_relaxed) & ~kGetTokenFlag);
        {
            std::lock_guard<std::mutex> lk(state_mu);
            pending_gets[{h.dst, h.token}] = PendingGet{expected};
        }
        try {
            node->route_frame(encode_packet(h, {}));
        } catch (...) {
            std::lock_guard<std::mutex> lk(state_mu);
            pending_gets.erase({h.dst, h.token});
            throw;
        }
        return h.token;
    }

    void wait_replies(std::uint64_t n, std::optional<std::chrono::milliseconds> timeout) {
        check_not_in_handler("wait_replies");
        std::unique_lock<std::mutex> lk(state_mu);
        auto ready = [&] { return stop_flag.load() || reply_count - reply_baseline >= n; };
        if (timeout) {
            if (!state_cv.wait_for(lk, *timeout, ready)) {
                throw ShoalError(ErrorCode::Timeout,
                                 "waited for " + std::to_string(n) + " replies, have " +
                                     std::to_string(reply_count - reply_baseline));
            }
        } else {
            state_cv.wait(lk, ready);
        }
        if (reply_count - reply_baseline < n) {
            throw ShoalError(ErrorCode::Shutdown, "node stopped while waiting for replies");
        }
        reply_baseline += n;
    }

    Delivery recv_payload(std::optional<std::chrono::milliseconds> timeout) {
        check_not_in_handler("recv_payload");
        std::unique_lock<std::mutex> lk(state_mu);
        auto ready = [&] { return stop_flag.load() || !recv_queue.empty(); };
        if (timeout) {
            if (!state_cv.wait_for(lk, *timeout, ready)) {
                throw ShoalError(ErrorCode::Timeout, "no payload delivered in time");
            }
        } else {
            state_cv.wait(lk, ready);
        }
        if (recv_queue.empty()) {
            throw ShoalError(ErrorCode::Shutdown, "node stopped while waiting for a payload");
        }
        Delivery d = std::move(recv_queue.front());
        recv_queue.pop_front();
        return d;
    }

    void barrier(std::optional<std::chrono::milliseconds> timeout) {
        check_not_in_handler("barrier");
        if (stop_flag.load()) throw ShoalError(ErrorCode::Shutdown, "node is stopping");
        const std::uint64_t epoch = ++local_epoch;
        node->log_event(id, "BARRIER_ENTER", "epoch=" + std::to_string(epoch));
        const std::size_t k = node->map_.kernel_count();
        if (k == 1) {
            node->log_event(id, "BARRIER_EXIT", "epoch=" + std::to_string(epoch));
            return;
        }
        if (id == 0) {
            {
                std::lock_guard<std::mutex> lk(state_mu);
                root_entered = epoch;
            }
            root_maybe_release(epoch);
        } else {
            AmHeader enter;
            enter.cls = AmClass::Short;
            enter.flags.async = true;
            enter.src = id;
            enter.dst = 0;
            enter.handler = kBarrierEnterHandler;
            enter.args = {epoch};
            node->route_frame(encode_packet(enter, {}));
        }
        {
            std::unique_lock<std::mutex> lk(state_mu);
            auto ready = [&] { return stop_flag.load() || released_epoch >= epoch; };
            if (timeout) {
                if (!state_cv.wait_for(lk, *timeout, ready)) {
                    throw ShoalError(ErrorCode::Timeout,
                                     "barrier epoch " + std::to_string(epoch) + " did not release");
                }
            } else {
                state_cv.wait(lk, ready);
            }
            if (released_epoch < epoch) {
                throw ShoalError(ErrorCode::Shutdown, "node stopped inside barrier");
            }
        }
        node->log_event(id, "BARRIER_EXIT", "epoch=" + std::to_string(epoch));
    }
};

}  // namespace detail

// -- KernelContext ----------------------------------------------------------

KernelContext::KernelContext(Node& node, detail::KernelState& state)
    : node_(&node), state_(&state) {}

KernelId KernelContext::id() const { return state_->id; }

Partition& KernelContext::partition() { return state_->part; }

const ClusterMap& KernelContext::cluster() const { return node_->map_; }

void KernelContext::register_handler(HandlerId handler, Handler fn) {
    if (handler == kReplyHandler) {
        throw ShoalError(ErrorCode::ReservedId, "handler 0 is the built-in reply counter");
    }
    if (handler >= kFirstInternalHandler) {
        throw ShoalError(ErrorCode::ReservedId,
                         "handler " + std::to_string(handler) + " is reserved");
    }
    if (!fn) throw ShoalError(ErrorCode::ValidationError, "handler function is empty");
    std::lock_guard<std::mutex> lk(state_->handlers_mu);
    if (!state_->handlers.emplace(handler, std::move(fn)).second) {
        throw ShoalError(ErrorCode::DuplicateHandler,
                         "handler " + std::to_string(handler) + " already registered");
    }
}

void KernelContext::am_short(KernelId dst, HandlerId handler,
                             const std::vector<std::uint64_t>& args, bool async) {
    AmHeader h;
    h.cls = AmClass::Short;
    h.flags.async = async;
    h.dst = dst;
    h.handler = handler;
    h.args = args;
    state_->send_request(h, {});
}

void KernelContext::am_medium_fifo(KernelId dst, HandlerId handler,
                                   std::span<const std::byte> payload,
                                   const std::vector<std::uint64_t>& args, bool async) {
    AmHeader h;
    h.cls = AmClass::Medium;
    h.flags.fifo = true;
    h.flags.async = async;
    h.dst = dst;
    h.handler = handler;
    h.args = args;
    h.payload_len = static_cast<std::uint32_t>(payload.size());
    state_->send_request(h, payload);
}

void KernelContext::am_medium(KernelId dst, HandlerId handler, std::uint64_t src_offset,
                              std::uint32_t len, const std::vector<std::uint64_t>& args,
                              bool async) {
    const std::vector<std::byte> data = state_->part.read(src_offset, len);
    AmHeader h;
    h.cls = AmClass::Medium;
    h.flags.async = async;
    h.dst = dst;
    h.handler = handler;
    h.args = args;
    h.payload_len = len;
    state_->send_request(h, data);
}

void KernelContext::am_long_fifo(KernelId dst, HandlerId handler,
                                 std::span<const std::byte> payload, std::uint64_t dest_offset,
                                 const std::vector<std::uint64_t>& args, bool async) {
    AmHeader h;
    h.cls = AmClass::Long;
    h.flags.fifo = true;
    h.flags.async = async;
    h.dst = dst;
    h.handler = handler;
    h.args = args;
    h.payload_len = static_cast<std::uint32_t>(payload.size());
    h.dest_offset = dest_offset;
    state_->send_request(h, payload);
}

void KernelContext::am_long(KernelId dst, HandlerId handler, std::uint64_t src_offset,
                            std::uint32_t len, std::uint64_t dest_offset,
                            const std::vector<std::uint64_t>& args, bool async) {
    const std::vector<std::byte> data = state_->part.read(src_offset, len);
    AmHeader h;
    h.cls = AmClass::Long;
    h.flags.async = async;
    h.dst = dst;
    h.handler = handler;
    h.args = args;
    h.payload_len = len;
    h.dest_offset = dest_offset;
    state_->send_request(h, data);
}

void KernelContext::am_long_strided(KernelId dst, HandlerId handler,
                                    std::span<const std::byte> payload, std::uint64_t dest_offset,
                                    const StridedSpec& layout,
                                    const std::vector<std::uint64_t>& args, bool async) {
    AmHeader h;
    h.cls = AmClass::Long;
    h.flags.fifo = true;
    h.flags.async = async;
    h.flags.strided = true;
    h.dst = dst;
    h.handler = handler;
    h.args = args;
    h.payload_len = static_cast<std::uint32_t>(payload.size());
    h.dest_offset = dest_offset;
    h.layout = layout;
    state_->send_request(h, payload);
}

void KernelContext::am_long_vectored(KernelId dst, HandlerId handler,
                                     std::span<const std::byte> payload,
                                     const VectoredSpec& layout,
                                     const std::vector<std::uint64_t>& args, bool async) {
    AmHeader h;
    h.cls = AmClass::Long;
    h.flags.fifo = true;
    h.flags.async = async;
    h.flags.vectored = true;
    h.dst = dst;
    h.handler = handler;
    h.args = args;
    h.payload_len = static_cast<std::uint32_t>(payload.size());
    h.layout = layout;
    state_->send_request(h, payload);
}

Token KernelContext::get_medium(KernelId src_kernel, std::uint64_t src_offset, std::uint32_t len,
                                HandlerId handler, const std::vector<std::uint64_t>& args) {
    AmHeader h;
    h.cls = AmClass::Medium;
    h.flags.get = true;
    h.flags.async = true;
    h.dst = src_kernel;
    h.handler = handler;
    h.args = args;
    h.payload_len = len;
    h.dest_offset = src_offset;
    return state_->send_get(h, AmClass::Medium);
}

Token KernelContext::get_long(KernelId src_kernel, std::uint64_t src_offset, std::uint32_t len,
                              std::uint64_t local_offset) {
    if (local_offset + len > state_->part.size() || local_offset + len < local_offset) {
        throw ShoalError(ErrorCode::OutOfBounds,
                         "get destination [" + std::to_string(local_offset) + ", " +
                             std::to_string(local_offset + len) + ") exceeds partition of " +
                             std::to_string(state_->part.size()) + " bytes");
    }
    AmHeader h;
    h.cls = AmClass::Long;
    h.flags.get = true;
    h.flags.async = true;
    h.dst = src_kernel;
    h.handler = kReplyHandler;
    h.args = {local_offset};
    h.payload_len = len;
    h.dest_offset = src_offset;
    return state_->send_get(h, AmClass::Long);
}

void KernelContext::wait_replies(std::uint64_t n, std::optional<std::chrono::milliseconds> timeout) {
    state_->wait_replies(n, timeout);
}

std::uint64_t KernelContext::reply_count() const {
    std::lock_guard<std::mutex> lk(state_->state_mu);
    return state_->reply_count;
}

Delivery KernelContext::recv_payload(std::optional<std::chrono::milliseconds> timeout) {
    return state_->recv_payload(timeout);
}

void KernelContext::barrier(std::optional<std::chrono::milliseconds> timeout) {
    state_->barrier(timeout);
}

// -- KernelHandle -----------------------------------------------------------

void KernelHandle::join() {
    if (state_ == nullptr) return;
    if (state_->body_joined.exchange(true)) return;
    if (state_->body_thread.joinable()) state_->body_thread.join();
    if (state_->body_error) std::rethrow_exception(state_->body_error);
}

bool KernelHandle::joinable() const {
    return state_ != nullptr && !state_->body_joined.load() && state_->body_thread.joinable();
}

// -- Node -------------------------------------------------------------------

Node::Node(ClusterMap map, NodeId self)
    : map_(std::move(map)), self_(self), stats_(map_.nodes.size()) {
    validate(map_);
    if (!map_.has_node(self_)) {
        throw ShoalError(ErrorCode::ConfigInvalid,
                         "node " + std::to_string(self_) + " not in cluster map");
    }
    by_kernel_id_.assign(map_.kernel_count(), nullptr);
    for (const KernelSpec& ks : map_.kernels) {
        if (ks.node != self_) continue;
        auto st = std::make_unique<detail::KernelState>(*this, ks);
        st->ctx.reset(new KernelContext(*this, *st));
        by_kernel_id_[ks.id] = st.get();
        kernels_.push_back(std::move(st));
    }
    if (map_.nodes.size() > 1) {
        DriverCallbacks cb;
        cb.on_frame = [this](std::vector<std::byte>&& f, std::optional<NodeId> from) {
            on_wire_frame(std::move(f), from);
        };
        cb.on_error = [this](const std::string& what) { on_wire_error(what); };
        driver_ = make_driver(map_, self_, stats_, std::move(cb));
        driver_->start();
    }
    for (auto& st : kernels_) st->start_engine();
}

Node::~Node() {
    try {
        shutdown();
    } catch (...) {
    }
    for (auto& st : kernels_) {
        if (st->body_thread.joinable()) st->body_thread.join();
    }
}

void Node::connect_peers(std::chrono::milliseconds timeout) {
    if (driver_) driver_->connect_peers(std::chrono::steady_clock::now() + timeout);
}

KernelHandle Node::spawn_kernel(KernelId id, KernelBody body) {
    if (!body) throw ShoalError(ErrorCode::ValidationError, "kernel body is empty");
    detail::KernelState* st = local_state_or_null(id);
    if (st == nullptr) {
        throw ShoalError(ErrorCode::NotLocal,
                         "kernel " + std::to_string(id) + " does not live on node " +
                             std::to_string(self_));
    }
    if (st->spawned.exchange(true)) {
        throw ShoalError(ErrorCode::DuplicateKernel,
                         "kernel " + std::to_string(id) + " already spawned");
    }
    st->body_thread = std::thread([st, fn = std::move(body)] {
        try {
            fn(*st->ctx);
        } catch (...) {
            st->body_error = std::current_exception();
        }
    });
    return KernelHandle(st);
}

void Node::shutdown() {
    if (stopped_.exchange(true)) return;
    for (auto& st : kernels_) st->signal_stop();
    for (auto& st : kernels_) st->join_engine();
    if (driver_) driver_->stop();
    flush_event_log();
}

Partition& Node::partition(KernelId id) {
    return local_state(id).part;
}

Diagnostics Node::diagnostics() const {
    Diagnostics d;
    d.decode_errors = decode_errors_.load();
    d.dropped_foreign = dropped_foreign_.load();
    std::lock_guard<std::mutex> lk(faults_mu_);
    d.faults = faults_;
    return d;
}

std::vector<EventRecord> Node::events() const {
    std::lock_guard<std::mutex> lk(events_mu_);
    return events_;
}

detail::KernelState& Node::local_state(KernelId id) {
    detail::KernelState* st = local_state_or_null(id);
    if (st == nullptr) {
        throw ShoalError(ErrorCode::NotLocal,
                         "kernel " + std::to_string(id) + " does not live on node " +
                             std::to_string(self_));
    }
    return *st;
}

detail::KernelState* Node::local_state_or_null(KernelId id) {
    if (id >= by_kernel_id_.size()) return nullptr;
    return by_kernel_id_[id];
}

void Node::route_frame(std::vector<std::byte>&& frame) {
    const KernelId dst = peek_dst(frame);
    if (detail::KernelState* st = local_state_or_null(dst)) {
        st->enqueue(std::move(frame));
        return;
    }
    if (!driver_) {
        throw ShoalError(ErrorCode::NotLocal,
                         "kernel " + std::to_string(dst) + " is remote but no transport is up");
    }
    driver_->send_to(map_.node_of(dst), frame);
}

void Node::on_wire_frame(std::vector<std::byte>&& frame, std::optional<NodeId> /*from*/) {
    if (frame.size() < kBaseHeaderBytes) {
        decode_errors_.fetch_add(1, std::memory_order_relaxed);
        return;
    }
    const KernelId dst = peek_dst(frame);
    detail::KernelState* st = local_state_or_null(dst);
    if (st == nullptr) {
        dropped_foreign_.fetch_add(1, std::memory_order_relaxed);
        return;
    }
    st->enqueue(std::move(frame));
}

void Node::on_wire_error(const std::string& what) {
    decode_errors_.fetch_add(1, std::memory_order_relaxed);
    record_fault(0, ErrorCode::IoError, what);
}

void Node::log_event(KernelId kernel, const std::string& event, const std::string& detail) {
    if (!map_.event_log) return;
    std::lock_guard<std::mutex> lk(events_mu_);
    events_.push_back(EventRecord{now_ns(), kernel, event, detail});
}

void Node::record_fault(KernelId kernel, ErrorCode code, const std::string& detail) {
    std::lock_guard<std::mutex> lk(faults_mu_);
    if (faults_.size() < 10000) faults_.push_back(FaultRecord{kernel, code, detail});
}

void Node::flush_event_log() {
    if (!map_.event_log || map_.event_log_path.empty()) return;
    std::ofstream out(map_.event_log_path);
    if (!out) return;
    out << "timestamp_ns,kernel,event,detail\n";
    std::lock_guard<std::mutex> lk(events_mu_);
    for (const EventRecord& e : events_) {
        out << e.timestamp_ns << ',' << e.kernel << ',' << e.event << ',' << e.detail << '\n';
    }
}

}  // namespace shoal
