#include "shoal/cluster.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include "json.hpp"

namespace shoal {

using nlohmann::json;

const char* to_string(TransportKind kind) {
    return kind == TransportKind::Tcp ? "tcp" : "udp";
}

std::optional<TransportKind> transport_from_string(const std::string& name) {
    if (name == "tcp") return TransportKind::Tcp;
    if (name == "udp") return TransportKind::Udp;
    return std::nullopt;
}

const NodeSpec& ClusterMap::node(NodeId id) const {
    for (const auto& n : nodes) {
        if (n.id == id) return n;
    }
    throw ShoalError(ErrorCode::ConfigInvalid, "node " + std::to_string(id) + " not in cluster map");
}

const KernelSpec& ClusterMap::kernel(KernelId id) const {
    if (id >= kernels.size()) {
        throw ShoalError(ErrorCode::ConfigInvalid, "kernel " + std::to_string(id) + " not in cluster map");
    }
    return kernels[id];
}

NodeId ClusterMap::node_of(KernelId id) const { return kernel(id).node; }

bool ClusterMap::has_node(NodeId id) const noexcept {
    return std::any_of(nodes.begin(), nodes.end(), [&](const NodeSpec& n) { return n.id == id; });
}

std::vector<KernelId> ClusterMap::kernels_on(NodeId id) const {
    std::vector<KernelId> out;
    for (const auto& k : kernels) {
        if (k.node == id) out.push_back(k.id);
    }
    return out;
}

namespace {

[[noreturn]] void bad_field(const std::string& path, const std::string& why) {
    throw ShoalError(ErrorCode::ValidationError, path + ": " + why);
}

}  // namespace

void validate(const ClusterMap& map) {
    if (map.nodes.empty()) bad_field("nodes", "at least one node required");
    if (map.kernels.empty()) bad_field("kernels", "at least one kernel required");

    std::unordered_set<NodeId> node_ids;
    for (std::size_t i = 0; i < map.nodes.size(); ++i) {
        if (!node_ids.insert(map.nodes[i].id).second) {
            bad_field("nodes[" + std::to_string(i) + "].id", "duplicate node id");
        }
    }
    for (std::size_t i = 0; i < map.nodes.size(); ++i) {
        const auto& n = map.nodes[i];
        if (n.host.empty()) bad_field("nodes[" + std::to_string(i) + "].host", "empty host");
        if (map.nodes.size() > 1) {
            if (map.transport == TransportKind::Tcp && n.tcp_port == 0) {
                bad_field("nodes[" + std::to_string(i) + "].tcp_port", "required for multi-node tcp");
            }
            if (map.transport == TransportKind::Udp && n.udp_port == 0) {
                bad_field("nodes[" + std::to_string(i) + "].udp_port", "required for multi-node udp");
            }
        }
    }

    // Kernel ids must be dense 0..K-1; the vector is sorted by id after parse.
    std::unordered_set<KernelId> kernel_ids;
    for (std::size_t i = 0; i < map.kernels.size(); ++i) {
        const auto& k = map.kernels[i];
        if (!kernel_ids.insert(k.id).second) {
            bad_field("kernels[" + std::to_string(i) + "].id", "duplicate kernel id");
        }
        if (k.id >= map.kernels.size()) {
            bad_field("kernels[" + std::to_string(i) + "].id",
                      "ids must be dense 0.." + std::to_string(map.kernels.size() - 1));
        }
        if (!node_ids.count(k.node)) {
            bad_field("kernels[" + std::to_string(i) + "].node",
                      "references undeclared node " + std::to_string(k.node));
        }
        if (k.partition_bytes == 0) {
            bad_field("kernels[" + std::to_string(i) + "].partition_bytes", "must be > 0");
        }
    }
    if (map.udp_max_bytes == 0) bad_field("udp_max_bytes", "must be > 0");
}

namespace {

ClusterMap from_json(const json& j) {
    ClusterMap map;
    if (!j.is_object()) bad_field("$", "top level must be an object");

    if (j.contains("transport")) {
        const auto name = j.at("transport").get<std::string>();
        auto kind = transport_from_string(name);
        if (!kind) bad_field("transport", "expected \"tcp\" or \"udp\", got \"" + name + "\"");
        map.transport = *kind;
    }
    if (j.contains("udp_max_bytes")) map.udp_max_bytes = j.at("udp_max_bytes").get<std::uint32_t>();
    if (j.contains("event_log")) map.event_log = j.at("event_log").get<bool>();
    if (j.contains("event_log_path")) {
        map.event_log_path = j.at("event_log_path").get<std::string>();
        if (!map.event_log_path.empty()) map.event_log = true;
    }

    if (!j.contains("nodes")) bad_field("nodes", "missing");
    for (const auto& jn : j.at("nodes")) {
        NodeSpec n;
        n.id = jn.at("id").get<NodeId>();
        if (jn.contains("host")) n.host = jn.at("host").get<std::string>();
        if (jn.contains("tcp_port")) n.tcp_port = jn.at("tcp_port").get<std::uint16_t>();
        if (jn.contains("udp_port")) n.udp_port = jn.at("udp_port").get<std::uint16_t>();
        map.nodes.push_back(std::move(n));
    }

    if (!j.contains("kernels")) bad_field("kernels", "missing");
    for (const auto& jk : j.at("kernels")) {
        KernelSpec k;
        k.id = jk.at("id").get<KernelId>();
        k.node = jk.at("node").get<NodeId>();
        if (jk.contains("partition_bytes")) k.partition_bytes = jk.at("partition_bytes").get<std::uint64_t>();
        map.kernels.push_back(k);
    }

    validate(map);
    std::sort(map.kernels.begin(), map.kernels.end(),
              [](const KernelSpec& a, const KernelSpec& b) { return a.id < b.id; });
    return map;
}

}  // namespace

ClusterMap parse_cluster_map(const std::string& json_text) {
    json j;
    try {
        j = json::parse(json_text);
    } catch (const json::exception& e) {
        throw ShoalError(ErrorCode::ParseError, e.what());
    }
    try {
        return from_json(j);
    } catch (const json::exception& e) {
        throw ShoalError(ErrorCode::ValidationError, e.what());
    }
}

ClusterMap load_cluster_map(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ShoalError(ErrorCode::IoError, "cannot open cluster map " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_cluster_map(buf.str());
}

}  // namespace shoal
