#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "shoal/protocol.hpp"

namespace shoal {

enum class TransportKind { Tcp, Udp };

const char* to_string(TransportKind kind);
std::optional<TransportKind> transport_from_string(const std::string& name);

struct NodeSpec {
    NodeId id = 0;
    std::string host = "127.0.0.1";
    std::uint16_t tcp_port = 0;
    std::uint16_t udp_port = 0;
};

struct KernelSpec {
    KernelId id = 0;
    NodeId node = 0;
    std::uint64_t partition_bytes = 16ull << 20;  // 16 MiB default
};

// Topology of a cluster: which kernels live on which nodes and how the
// nodes reach each other. Loaded from a JSON file, see docs/cluster-map.md.
struct ClusterMap {
    std::vector<NodeSpec> nodes;
    std::vector<KernelSpec> kernels;  // ids dense 0..K-1 after validation
    TransportKind transport = TransportKind::Tcp;
    std::uint32_t udp_max_bytes = 8972;  // 9000 minus IP + UDP headers
    bool event_log = false;
    std::string event_log_path;  // optional; empty keeps the log in memory

    std::size_t kernel_count() const noexcept { return kernels.size(); }

    const NodeSpec& node(NodeId id) const;
    const KernelSpec& kernel(KernelId id) const;
    NodeId node_of(KernelId id) const;
    bool has_node(NodeId id) const noexcept;
    std::vector<KernelId> kernels_on(NodeId id) const;
};

// Checks id density, node references, duplicate ids and port sanity.
// Throws ValidationError naming the offending field.
void validate(const ClusterMap& map);

// Parses and validates a cluster map file. Throws ParseError on malformed
// JSON, ValidationError on semantic problems.
ClusterMap load_cluster_map(const std::string& path);
ClusterMap parse_cluster_map(const std::string& json_text);

}  // namespace shoal
