#pragma once

#include <string>
#include <vector>

#include "sage/topology.hpp"

namespace sage {

enum class NodeKind {
    MetricServer,   // X^s, owned by a service
    MetricNetwork,  // X^net, owned by a channel
    LatentServer,   // Z^s, owned by a service
    LatentNetwork,  // Z^net, owned by a channel
    LatClient,      // Y^c, owned by an rpc
    LatServer,      // Y^s, owned by an rpc
    LatReq,         // Y^req, owned by a channel (keyed by rpc)
    LatResp,        // Y^resp
};

const char* node_kind_name(NodeKind k);
bool is_metric_kind(NodeKind k);
bool is_latent_kind(NodeKind k);
bool is_latency_kind(NodeKind k);

struct CbnNode {
    int id = -1;
    NodeKind kind;
    std::string owner;  // service, channel, or rpc name per kind
};

// The causal Bayesian network over metric (X), latency (Y) and latent (Z)
// nodes. Edges point from cause to effect; latency flows backend-to-frontend,
// opposite to RPC call direction. Immutable after build_cbn.
class CausalGraph {
public:
    const std::vector<CbnNode>& nodes() const { return nodes_; }
    const std::vector<std::pair<int, int>>& edges() const { return edges_; }
    const CbnNode& node(int id) const { return nodes_.at(id); }

    int find(NodeKind kind, const std::string& owner) const;  // -1 if absent
    int require(NodeKind kind, const std::string& owner) const;

    const std::vector<int>& parents(int id) const { return parents_.at(id); }
    const std::vector<int>& children(int id) const { return children_.at(id); }

    // Cached topological order over latency nodes (causes first).
    const std::vector<int>& latency_topo_order() const { return lat_topo_; }
    // Longest path length over latency nodes, in nodes.
    int depth() const { return depth_; }

    std::vector<int> metric_node_ids() const;
    std::vector<int> latency_node_ids() const;
    std::vector<int> latent_node_ids() const;

    // All nodes reachable from `sources` via directed edges (excludes sources
    // unless reachable from another source).
    std::vector<bool> descendants(const std::vector<int>& sources) const;

    // Parents, children and children's parents of one node.
    std::vector<int> markov_blanket(int id) const;

    bool acyclic() const;
    std::string to_dot() const;
    uint64_t hash() const;

    friend CausalGraph build_cbn(const RpcTopology& topology);

private:
    int add_node(NodeKind kind, const std::string& owner);
    void add_edge(int from, int to);
    void finalize();

    std::vector<CbnNode> nodes_;
    std::vector<std::pair<int, int>> edges_;
    std::vector<std::vector<int>> parents_;
    std::vector<std::vector<int>> children_;
    std::vector<int> lat_topo_;
    int depth_ = 0;
};

// Builds the CBN from a merged (acyclic) topology:
//   - every metric node is exogenous (in-degree 0), X feeds its Z;
//   - an rpc's server latency is caused by the serving tier's X/Z and the
//     client latency of each child rpc;
//   - an rpc's client latency is caused by its server latency, the request/
//     response network delays, and the invoking tier's X/Z;
//   - request/response delays are caused by the channel's X/Z.
CausalGraph build_cbn(const RpcTopology& topology);

}  // namespace sage
