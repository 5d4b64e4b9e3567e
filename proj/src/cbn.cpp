#include "sage/cbn.hpp"

#include <algorithm>
#include <deque>
#include <sstream>

namespace sage {

const char* node_kind_name(NodeKind k) {
    switch (k) {
        case NodeKind::MetricServer: return "Xs";
        case NodeKind::MetricNetwork: return "Xnet";
        case NodeKind::LatentServer: return "Zs";
        case NodeKind::LatentNetwork: return "Znet";
        case NodeKind::LatClient: return "Yc";
        case NodeKind::LatServer: return "Ys";
        case NodeKind::LatReq: return "Yreq";
        case NodeKind::LatResp: return "Yresp";
    }
    return "?";
}

bool is_metric_kind(NodeKind k) {
    return k == NodeKind::MetricServer || k == NodeKind::MetricNetwork;
}
bool is_latent_kind(NodeKind k) {
    return k == NodeKind::LatentServer || k == NodeKind::LatentNetwork;
}
bool is_latency_kind(NodeKind k) {
    return k == NodeKind::LatClient || k == NodeKind::LatServer ||
           k == NodeKind::LatReq || k == NodeKind::LatResp;
}

int CausalGraph::find(NodeKind kind, const std::string& owner) const {
    for (const auto& n : nodes_)
        if (n.kind == kind && n.owner == owner) return n.id;
    return -1;
}

int CausalGraph::require(NodeKind kind, const std::string& owner) const {
    int id = find(kind, owner);
    check(id >= 0, std::string("no CBN node ") + node_kind_name(kind) + "(" + owner + ")");
    return id;
}

int CausalGraph::add_node(NodeKind kind, const std::string& owner) {
    CbnNode n;
    n.id = static_cast<int>(nodes_.size());
    n.kind = kind;
    n.owner = owner;
    nodes_.push_back(std::move(n));
    return nodes_.back().id;
}

void CausalGraph::add_edge(int from, int to) { edges_.emplace_back(from, to); }

std::vector<int> CausalGraph::metric_node_ids() const {
    std::vector<int> out;
    for (const auto& n : nodes_)
        if (is_metric_kind(n.kind)) out.push_back(n.id);
    return out;
}

std::vector<int> CausalGraph::latency_node_ids() const {
    std::vector<int> out;
    for (const auto& n : nodes_)
        if (is_latency_kind(n.kind)) out.push_back(n.id);
    return out;
}

std::vector<int> CausalGraph::latent_node_ids() const {
    std::vector<int> out;
    for (const auto& n : nodes_)
        if (is_latent_kind(n.kind)) out.push_back(n.id);
    return out;
}

void CausalGraph::finalize() {
    parents_.assign(nodes_.size(), {});
    children_.assign(nodes_.size(), {});
    for (const auto& [from, to] : edges_) {
        children_[from].push_back(to);
        parents_[to].push_back(from);
    }
    check(acyclic(), "CBN construction produced a cycle");

    // Kahn over latency nodes only, with longest-path depth.
    std::vector<int> indeg(nodes_.size(), 0), level(nodes_.size(), 1);
    for (const auto& n : nodes_) {
        if (!is_latency_kind(n.kind)) continue;
        for (int p : parents_[n.id])
            if (is_latency_kind(nodes_[p].kind)) indeg[n.id]++;
    }
    std::deque<int> q;
    for (const auto& n : nodes_)
        if (is_latency_kind(n.kind) && indeg[n.id] == 0) q.push_back(n.id);
    lat_topo_.clear();
    while (!q.empty()) {
        int id = q.front();
        q.pop_front();
        lat_topo_.push_back(id);
        depth_ = std::max(depth_, level[id]);
        for (int c : children_[id]) {
            if (!is_latency_kind(nodes_[c].kind)) continue;
            level[c] = std::max(level[c], level[id] + 1);
            if (--indeg[c] == 0) q.push_back(c);
        }
    }
}

bool CausalGraph::acyclic() const {
    std::vector<int> indeg(nodes_.size(), 0);
    std::vector<std::vector<int>> kids(nodes_.size());
    for (const auto& [from, to] : edges_) {
        indeg[to]++;
        kids[from].push_back(to);
    }
    std::deque<int> q;
    for (size_t i = 0; i < nodes_.size(); ++i)
        if (indeg[i] == 0) q.push_back(static_cast<int>(i));
    size_t seen = 0;
    while (!q.empty()) {
        int id = q.front();
        q.pop_front();
        ++seen;
        for (int c : kids[id])
            if (--indeg[c] == 0) q.push_back(c);
    }
    return seen == nodes_.size();
}

std::vector<bool> CausalGraph::descendants(const std::vector<int>& sources) const {
    std::vector<bool> mark(nodes_.size(), false);
    std::deque<int> q;
    for (int s : sources) {
        for (int c : children_.at(s)) {
            if (!mark[c]) {
                mark[c] = true;
                q.push_back(c);
            }
        }
    }
    while (!q.empty()) {
        int id = q.front();
        q.pop_front();
        for (int c : children_[id]) {
            if (!mark[c]) {
                mark[c] = true;
                q.push_back(c);
            }
        }
    }
    return mark;
}

std::vector<int> CausalGraph::markov_blanket(int id) const {
    check(id >= 0 && id < static_cast<int>(nodes_.size()), "unknown node id");
    std::vector<bool> in(nodes_.size(), false);
    for (int p : parents_[id]) in[p] = true;
    for (int c : children_[id]) {
        in[c] = true;
        for (int cp : parents_[c])
            if (cp != id) in[cp] = true;
    }
    std::vector<int> out;
    for (size_t i = 0; i < in.size(); ++i)
        if (in[i]) out.push_back(static_cast<int>(i));
    return out;
}

std::string CausalGraph::to_dot() const {
    std::ostringstream os;
    os << "digraph cbn {\n  rankdir=BT;\n";
    for (const auto& n : nodes_) {
        const char* shape = is_latent_kind(n.kind) ? "ellipse, style=dashed"
                            : is_metric_kind(n.kind) ? "box" : "ellipse";
        os << "  n" << n.id << " [label=\"" << node_kind_name(n.kind) << "("
           << n.owner << ")\", shape=" << shape << "];\n";
    }
    for (const auto& [from, to] : edges_)
        os << "  n" << from << " -> n" << to << ";\n";
    os << "}\n";
    return os.str();
}

uint64_t CausalGraph::hash() const {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& n : nodes_) {
        h = fnv1a(node_kind_name(n.kind), h);
        h = fnv1a(n.owner, h);
        h = fnv1a("|", h);
    }
    for (const auto& [from, to] : edges_) {
        h = fnv1a(&from, sizeof(from), h);
        h = fnv1a(&to, sizeof(to), h);
    }
    return h;
}

CausalGraph build_cbn(const RpcTopology& topology) {
    try {
        topology.validate();
    } catch (const Error& e) {
        throw Error(std::string(e.what()) +
                    " (build_cbn requires a merged, acyclic topology)");
    }

    CausalGraph g;
    // Node creation order is fixed by topology declaration order so that
    // graphs, hashes and downstream tensor layouts are deterministic.
    for (const auto& s : topology.services) {
        int x = g.add_node(NodeKind::MetricServer, s.name);
        int z = g.add_node(NodeKind::LatentServer, s.name);
        g.add_edge(x, z);
    }
    for (const auto& r : topology.rpcs) {
        std::string ch = RpcTopology::channel_name(r.name);
        int xn = g.add_node(NodeKind::MetricNetwork, ch);
        int zn = g.add_node(NodeKind::LatentNetwork, ch);
        g.add_edge(xn, zn);
        // Request/response delay nodes belong to the channel, like X^net/Z^net.
        int yreq = g.add_node(NodeKind::LatReq, ch);
        int yresp = g.add_node(NodeKind::LatResp, ch);
        int ys = g.add_node(NodeKind::LatServer, r.name);
        int yc = g.add_node(NodeKind::LatClient, r.name);
        g.add_edge(xn, yreq);
        g.add_edge(zn, yreq);
        g.add_edge(xn, yresp);
        g.add_edge(zn, yresp);
        g.add_edge(ys, yc);
        g.add_edge(yreq, yc);
        g.add_edge(yresp, yc);
    }
    for (const auto& r : topology.rpcs) {
        int ys = g.require(NodeKind::LatServer, r.name);
        int yc = g.require(NodeKind::LatClient, r.name);
        g.add_edge(g.require(NodeKind::MetricServer, r.server_service), ys);
        g.add_edge(g.require(NodeKind::LatentServer, r.server_service), ys);
        for (const auto& c : r.children)
            g.add_edge(g.require(NodeKind::LatClient, c), ys);
        if (!topology.is_external_client(r)) {
            g.add_edge(g.require(NodeKind::MetricServer, r.client_service), yc);
            g.add_edge(g.require(NodeKind::LatentServer, r.client_service), yc);
        }
    }
    g.finalize();
    return g;
}

}  // namespace sage
