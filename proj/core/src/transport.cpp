#include "shoal/transport.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <condition_variable>
#include <cstring>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>
#include <utility>

#include "shoal/error.hpp"

namespace shoal {

namespace {

// Control frames ride the same channels as packets but start with 0xFF,
// which can never open an encoded packet (byte 0 there is the version, 1).
constexpr std::byte kControlMarker{0xFF};
constexpr std::uint8_t kCtrlHello = 1;
constexpr std::uint8_t kCtrlHelloAck = 2;
constexpr std::size_t kControlFrameBytes = 7;

std::vector<std::byte> make_control_frame(std::uint8_t type, NodeId node) {
    std::vector<std::byte> f(kControlFrameBytes);
    f[0] = kControlMarker;
    f[1] = std::byte{'S'};
    f[2] = std::byte{'H'};
    f[3] = std::byte{'L'};
    f[4] = std::byte{type};
    f[5] = std::byte{static_cast<std::uint8_t>(node & 0xFF)};
    f[6] = std::byte{static_cast<std::uint8_t>(node >> 8)};
    return f;
}

struct ControlMsg {
    std::uint8_t type;
    NodeId node;
};

std::optional<ControlMsg> parse_control_frame(std::span<const std::byte> f) {
    if (f.size() != kControlFrameBytes || f[0] != kControlMarker) return std::nullopt;
    if (f[1] != std::byte{'S'} || f[2] != std::byte{'H'} || f[3] != std::byte{'L'}) {
        return std::nullopt;
    }
    ControlMsg m;
    m.type = std::to_integer<std::uint8_t>(f[4]);
    m.node = static_cast<NodeId>(std::to_integer<std::uint8_t>(f[5]) |
                                 (std::to_integer<std::uint8_t>(f[6]) << 8));
    return m;
}

sockaddr_in resolve_ipv4(const std::string& host, std::uint16_t port, int socktype) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = socktype;
    addrinfo* res = nullptr;
    int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res);
    if (rc != 0 || res == nullptr) {
        throw ShoalError(ErrorCode::PeerUnreachable,
                         "cannot resolve " + host + ":" + std::to_string(port) + " (" +
                             ::gai_strerror(rc) + ")");
    }
    sockaddr_in addr{};
    std::memcpy(&addr, res->ai_addr, sizeof(addr));
    ::freeaddrinfo(res);
    return addr;
}

std::string errno_text() { return std::strerror(errno); }

bool write_full(int fd, const void* data, std::size_t len) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    while (len > 0) {
        ssize_t n = ::send(fd, p, len, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        p += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

// Returns bytes read; short count means EOF or error mid-way.
std::size_t read_full(int fd, void* data, std::size_t len) {
    auto* p = static_cast<std::uint8_t*>(data);
    std::size_t got = 0;
    while (got < len) {
        ssize_t n = ::recv(fd, p + got, len - got, 0);
        if (n < 0) {
            if (errno == EINTR) continue;
            return got;
        }
        if (n == 0) return got;
        got += static_cast<std::size_t>(n);
    }
    return got;
}

void put_u32_le(std::uint8_t* p, std::uint32_t v) {
    p[0] = static_cast<std::uint8_t>(v);
    p[1] = static_cast<std::uint8_t>(v >> 8);
    p[2] = static_cast<std::uint8_t>(v >> 16);
    p[3] = static_cast<std::uint8_t>(v >> 24);
}

}  // namespace

TransportStats::TransportStats(std::size_t node_count) : per_peer_(node_count) {}

void TransportStats::record_sent(NodeId peer, std::uint64_t frame_bytes) {
    totals_.packets_sent.fetch_add(1, std::memory_order_relaxed);
    totals_.bytes_sent.fetch_add(frame_bytes, std::memory_order_relaxed);
    if (peer < per_peer_.size()) {
        per_peer_[peer].packets_sent.fetch_add(1, std::memory_order_relaxed);
        per_peer_[peer].bytes_sent.fetch_add(frame_bytes, std::memory_order_relaxed);
    }
}

void TransportStats::record_received(std::optional<NodeId> peer, std::uint64_t frame_bytes) {
    totals_.packets_received.fetch_add(1, std::memory_order_relaxed);
    totals_.bytes_received.fetch_add(frame_bytes, std::memory_order_relaxed);
    if (peer && *peer < per_peer_.size()) {
        per_peer_[*peer].packets_received.fetch_add(1, std::memory_order_relaxed);
        per_peer_[*peer].bytes_received.fetch_add(frame_bytes, std::memory_order_relaxed);
    }
}

namespace {

class TcpDriver final : public NetDriver {
  public:
    TcpDriver(const ClusterMap& map, NodeId self, TransportStats& stats, DriverCallbacks cb)
        : map_(map), self_(self), stats_(stats), cb_(std::move(cb)) {
        links_.resize(map_.nodes.size());
        for (auto& l : links_) l = std::make_unique<Link>();
    }

    ~TcpDriver() override { stop(); }

    void start() override {
        const NodeSpec& me = map_.node(self_);
        listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
        if (listen_fd_ < 0) throw ShoalError(ErrorCode::BindFailure, "socket: " + errno_text());
        int one = 1;
        ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_ANY);
        addr.sin_port = htons(me.tcp_port);
        if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            std::string why = errno_text();
            ::close(listen_fd_);
            listen_fd_ = -1;
            throw ShoalError(ErrorCode::BindFailure,
                             "tcp bind port " + std::to_string(me.tcp_port) + ": " + why);
        }
        if (::listen(listen_fd_, 64) != 0) {
            std::string why = errno_text();
            ::close(listen_fd_);
            listen_fd_ = -1;
            throw ShoalError(ErrorCode::BindFailure, "tcp listen: " + why);
        }
        accept_thread_ = std::thread([this] { accept_loop(); });
    }

    void connect_peers(std::chrono::steady_clock::time_point deadline) override {
        for (const NodeSpec& peer : map_.nodes) {
            if (peer.id == self_) continue;
            for (;;) {
                try {
                    std::lock_guard<std::mutex> lk(links_[peer.id]->mu);
                    ensure_connected_locked(*links_[peer.id], peer.id);
                    break;
                } catch (const ShoalError&) {
                    if (std::chrono::steady_clock::now() >= deadline) {
                        throw ShoalError(ErrorCode::PeerUnreachable,
                                         "node " + std::to_string(peer.id) +
                                             " not reachable before deadline");
                    }
                    std::this_thread::sleep_for(std::chrono::milliseconds(50));
                }
            }
        }
    }

    void send_to(NodeId peer, std::span<const std::byte> packet) override {
        Link& link = *links_.at(peer);
        std::lock_guard<std::mutex> lk(link.mu);
        ensure_connected_locked(link, peer);
        if (!write_frame(link.fd, packet)) {
            ::close(link.fd);
            link.fd = -1;
            throw ShoalError(ErrorCode::PeerUnreachable,
                             "send to node " + std::to_string(peer) + ": " + errno_text());
        }
        stats_.record_sent(peer, 4 + packet.size());
    }

    void stop() override {
        bool expected = false;
        if (!stopping_.compare_exchange_strong(expected, true)) return;
        if (listen_fd_ >= 0) {
            ::shutdown(listen_fd_, SHUT_RDWR);
            ::close(listen_fd_);
            listen_fd_ = -1;
        }
        if (accept_thread_.joinable()) accept_thread_.join();
        {
            std::lock_guard<std::mutex> lk(conns_mu_);
            for (auto& c : conns_) ::shutdown(c->fd, SHUT_RDWR);
        }
        for (auto& c : conns_) {
            if (c->reader.joinable()) c->reader.join();
            ::close(c->fd);
        }
        conns_.clear();
        for (auto& l : links_) {
            std::lock_guard<std::mutex> lk(l->mu);
            if (l->fd >= 0) {
                ::close(l->fd);
                l->fd = -1;
            }
        }
    }

  private:
    struct Link {
        std::mutex mu;
        int fd = -1;
    };

    struct Conn {
        int fd = -1;
        std::thread reader;
        std::optional<NodeId> peer;  // set once the hello arrives; reader thread only
    };

    void ensure_connected_locked(Link& link, NodeId peer) {
        if (link.fd >= 0) return;
        const NodeSpec& spec = map_.node(peer);
        sockaddr_in addr = resolve_ipv4(spec.host, spec.tcp_port, SOCK_STREAM);
        int fd = ::socket(AF_INET, SOCK_STREAM, 0);
        if (fd < 0) throw ShoalError(ErrorCode::PeerUnreachable, "socket: " + errno_text());
        if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            std::string why = errno_text();
            ::close(fd);
            throw ShoalError(ErrorCode::PeerUnreachable,
                             "connect to node " + std::to_string(peer) + " (" + spec.host + ":" +
                                 std::to_string(spec.tcp_port) + "): " + why);
        }
        int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
        auto hello = make_control_frame(kCtrlHello, self_);
        if (!write_frame(fd, hello)) {
            ::close(fd);
            throw ShoalError(ErrorCode::PeerUnreachable,
                             "hello to node " + std::to_string(peer) + ": " + errno_text());
        }
        link.fd = fd;
    }

    static bool write_frame(int fd, std::span<const std::byte> body) {
        std::uint8_t prefix[4];
        put_u32_le(prefix, static_cast<std::uint32_t>(body.size()));
        return write_full(fd, prefix, 4) && write_full(fd, body.data(), body.size());
    }

    void accept_loop() {
        for (;;) {
            int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) {
                if (stopping_.load()) return;
                if (errno == EINTR) continue;
                if (cb_.on_error) cb_.on_error("tcp accept: " + errno_text());
                std::this_thread::sleep_for(std::chrono::milliseconds(10));
                continue;
            }
            if (stopping_.load()) {
                ::close(fd);
                return;
            }
            int one = 1;
            ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
            std::lock_guard<std::mutex> lk(conns_mu_);
            auto conn = std::make_unique<Conn>();
            conn->fd = fd;
            Conn* raw = conn.get();
            conn->reader = std::thread([this, raw] { read_loop(raw); });
            conns_.push_back(std::move(conn));
        }
    }

    void read_loop(Conn* conn) {
        for (;;) {
            std::uint8_t prefix[4];
            std::size_t got = read_full(conn->fd, prefix, 4);
            if (got == 0) return;  // orderly close between frames
            if (got < 4) {
                report("tcp frame cut short mid-length");
                return;
            }
            std::uint32_t len = static_cast<std::uint32_t>(prefix[0]) |
                                (static_cast<std::uint32_t>(prefix[1]) << 8) |
                                (static_cast<std::uint32_t>(prefix[2]) << 16) |
                                (static_cast<std::uint32_t>(prefix[3]) << 24);
            if (len == 0 || len > kMaxPacketBytes) {
                report("tcp frame length " + std::to_string(len) + " out of range");
                return;
            }
            std::vector<std::byte> body(len);
            if (read_full(conn->fd, body.data(), len) < len) {
                report("tcp frame cut short mid-body");
                return;
            }
            if (body[0] == kControlMarker) {
                if (auto msg = parse_control_frame(body); msg && msg->type == kCtrlHello) {
                    conn->peer = msg->node;
                } else {
                    report("unrecognized tcp control frame");
                }
                continue;
            }
            stats_.record_received(conn->peer, 4 + static_cast<std::uint64_t>(len));
            if (cb_.on_frame) cb_.on_frame(std::move(body), conn->peer);
        }
    }

    void report(const std::string& what) {
        if (!stopping_.load() && cb_.on_error) cb_.on_error(what);
    }

    ClusterMap map_;
    NodeId self_;
    TransportStats& stats_;
    DriverCallbacks cb_;
    int listen_fd_ = -1;
    std::thread accept_thread_;
    std::atomic<bool> stopping_{false};
    std::mutex conns_mu_;
    std::vector<std::unique_ptr<Conn>> conns_;
    std::vector<std::unique_ptr<Link>> links_;
};

class UdpDriver final : public NetDriver {
  public:
    UdpDriver(const ClusterMap& map, NodeId self, TransportStats& stats, DriverCallbacks cb)
        : map_(map),
          self_(self),
          stats_(stats),
          cb_(std::move(cb)),
          max_bytes_(map.udp_max_bytes),
          seen_(map.nodes.size(), false) {
        if (self < seen_.size()) seen_[self] = true;
    }

    ~UdpDriver() override { stop(); }

    void start() override {
        const NodeSpec& me = map_.node(self_);
        fd_ = ::socket(AF_INET, SOCK_DGRAM, 0);
        if (fd_ < 0) throw ShoalError(ErrorCode::BindFailure, "socket: " + errno_text());
        int one = 1;
        ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
        int rcvbuf = 4 << 20;
        ::setsockopt(fd_, SOL_SOCKET, SO_RCVBUF, &rcvbuf, sizeof(rcvbuf));
        int sndbuf = 1 << 20;
        ::setsockopt(fd_, SOL_SOCKET, SO_SNDBUF, &sndbuf, sizeof(sndbuf));
        sockaddr_in addr{};
        addr.sin_family = AF_INET;
        addr.sin_addr.s_addr = htonl(INADDR_ANY);
        addr.sin_port = htons(me.udp_port);
        if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
            std::string why = errno_text();
            ::close(fd_);
            fd_ = -1;
            throw ShoalError(ErrorCode::BindFailure,
                             "udp bind port " + std::to_string(me.udp_port) + ": " + why);
        }
        peer_addr_.resize(map_.nodes.size());
        for (const NodeSpec& n : map_.nodes) {
            if (n.id == self_) continue;
            peer_addr_[n.id] = resolve_ipv4(n.host, n.udp_port, SOCK_DGRAM);
            addr_to_node_[addr_key(peer_addr_[n.id])] = n.id;
        }
        reader_ = std::thread([this] { read_loop(); });
    }

    void connect_peers(std::chrono::steady_clock::time_point deadline) override {
        // Datagrams carry no connection state, so probe with hellos until
        // every peer has answered.
        auto hello = make_control_frame(kCtrlHello, self_);
        std::unique_lock<std::mutex> lk(seen_mu_);
        for (;;) {
            bool all = true;
            for (const NodeSpec& n : map_.nodes) {
                if (seen_[n.id]) continue;
                all = false;
                ::sendto(fd_, hello.data(), hello.size(), 0,
                         reinterpret_cast<const sockaddr*>(&peer_addr_[n.id]),
                         sizeof(sockaddr_in));
            }
            if (all) return;
            if (seen_cv_.wait_until(lk, std::min(deadline, std::chrono::steady_clock::now() +
                                                               std::chrono::milliseconds(50))) ==
                    std::cv_status::timeout &&
                std::chrono::steady_clock::now() >= deadline) {
                for (const NodeSpec& n : map_.nodes) {
                    if (!seen_[n.id]) {
                        throw ShoalError(ErrorCode::PeerUnreachable,
                                         "node " + std::to_string(n.id) +
                                             " sent no hello before deadline");
                    }
                }
                return;
            }
        }
    }

    void send_to(NodeId peer, std::span<const std::byte> packet) override {
        if (packet.size() > max_bytes_) {
            throw ShoalError(ErrorCode::UdpFragmentLimit,
                             "packet of " + std::to_string(packet.size()) +
                                 " bytes exceeds udp datagram cap of " +
                                 std::to_string(max_bytes_));
        }
        const sockaddr_in& addr = peer_addr_.at(peer);
        ssize_t n = ::sendto(fd_, packet.data(), packet.size(), 0,
                             reinterpret_cast<const sockaddr*>(&addr), sizeof(addr));
        if (n < 0 || static_cast<std::size_t>(n) != packet.size()) {
            throw ShoalError(ErrorCode::PeerUnreachable,
                             "udp send to node " + std::to_string(peer) + ": " + errno_text());
        }
        stats_.record_sent(peer, packet.size());
    }

    void stop() override {
        bool expected = false;
        if (!stopping_.compare_exchange_strong(expected, true)) return;
        if (reader_.joinable()) reader_.join();
        if (fd_ >= 0) {
            ::close(fd_);
            fd_ = -1;
        }
    }

  private:
    static std::pair<std::uint32_t, std::uint16_t> addr_key(const sockaddr_in& a) {
        return {a.sin_addr.s_addr, a.sin_port};
    }

    void read_loop() {
        std::vector<std::byte> buf(65536);
        while (!stopping_.load()) {
            pollfd pfd{fd_, POLLIN, 0};
            int pr = ::poll(&pfd, 1, 100);
            if (pr <= 0) continue;
            sockaddr_in from{};
            socklen_t from_len = sizeof(from);
            ssize_t n = ::recvfrom(fd_, buf.data(), buf.size(), 0,
                                   reinterpret_cast<sockaddr*>(&from), &from_len);
            if (n <= 0) continue;
            std::optional<NodeId> peer;
            if (auto it = addr_to_node_.find(addr_key(from)); it != addr_to_node_.end()) {
                peer = it->second;
            }
            std::span<const std::byte> dgram(buf.data(), static_cast<std::size_t>(n));
            if (dgram[0] == kControlMarker) {
                handle_control(dgram, from);
                continue;
            }
            stats_.record_received(peer, static_cast<std::uint64_t>(n));
            if (cb_.on_frame) {
                cb_.on_frame(std::vector<std::byte>(dgram.begin(), dgram.end()), peer);
            }
        }
    }

    void handle_control(std::span<const std::byte> dgram, const sockaddr_in& from) {
        auto msg = parse_control_frame(dgram);
        if (!msg) {
            if (cb_.on_error) cb_.on_error("unrecognized udp control datagram");
            return;
        }
        {
            std::lock_guard<std::mutex> lk(seen_mu_);
            if (msg->node < seen_.size()) seen_[msg->node] = true;
        }
        seen_cv_.notify_all();
        if (msg->type == kCtrlHello) {
            auto ack = make_control_frame(kCtrlHelloAck, self_);
            ::sendto(fd_, ack.data(), ack.size(), 0, reinterpret_cast<const sockaddr*>(&from),
                     sizeof(from));
        }
    }

    ClusterMap map_;
    NodeId self_;
    TransportStats& stats_;
    DriverCallbacks cb_;
    std::uint32_t max_bytes_;
    int fd_ = -1;
    std::thread reader_;
    std::atomic<bool> stopping_{false};
    std::vector<sockaddr_in> peer_addr_;
    std::map<std::pair<std::uint32_t, std::uint16_t>, NodeId> addr_to_node_;
    std::mutex seen_mu_;
    std::condition_variable seen_cv_;
    std::vector<bool> seen_;
};

}  // namespace

std::unique_ptr<NetDriver> make_tcp_driver(const ClusterMap& map, NodeId self,
                                           TransportStats& stats, DriverCallbacks callbacks) {
    return std::make_unique<TcpDriver>(map, self, stats, std::move(callbacks));
}

std::unique_ptr<NetDriver> make_udp_driver(const ClusterMap& map, NodeId self,
                                           TransportStats& stats, DriverCallbacks callbacks) {
    return std::make_unique<UdpDriver>(map, self, stats, std::move(callbacks));
}

std::unique_ptr<NetDriver> make_driver(const ClusterMap& map, NodeId self, TransportStats& stats,
                                       DriverCallbacks callbacks) {
    if (map.transport == TransportKind::Udp) {
        return make_udp_driver(map, self, stats, std::move(callbacks));
    }
    return make_tcp_driver(map, self, stats, std::move(callbacks));
}

}  // namespace shoal
