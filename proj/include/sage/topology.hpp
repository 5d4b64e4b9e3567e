#pragma once

#include <string>
#include <vector>

#include "sage/common.hpp"

namespace sage {

struct ServiceDef {
    std::string name;
    bool stateful = false;  // stateful tiers are never migrated/scaled out
};

struct RpcDef {
    std::string name;
    std::string client_service;  // may be external (not in services) for the frontend rpc
    std::string server_service;
    std::vector<std::string> children;  // ordered child rpc names
    bool parallel_children = false;
    std::vector<std::string> aliases;  // span rpc_names folded into this rpc (metanodes)
};

// The RPC call graph. After metanode merging the parent/child relation over
// rpcs is a tree rooted at frontend_rpc. The frontend rpc's client may be an
// external entity (the load generator); external clients contribute no
// metric nodes to the CBN.
struct RpcTopology {
    std::vector<ServiceDef> services;
    std::vector<RpcDef> rpcs;
    std::string frontend_rpc;

    bool has_service(const std::string& name) const;
    bool is_external_client(const RpcDef& r) const;
    const RpcDef& rpc(const std::string& name) const;
    const RpcDef* find_rpc(const std::string& name) const;
    // Resolves a span rpc_name through metanode aliases; nullptr if unknown.
    const RpcDef* resolve_rpc(const std::string& span_rpc_name) const;
    // Name of the network channel carrying rpc r.
    static std::string channel_name(const std::string& rpc_name) { return "net:" + rpc_name; }

    // Tree/consistency validation. With allow_bidirectional, a two-rpc cycle
    // (u in children(v) and v in children(u)) is tolerated so the topology can
    // be fed to merge_bidirectional.
    void validate(bool allow_bidirectional = false) const;

    std::string to_json_string() const;
    static RpcTopology from_json_string(const std::string& text);
    static RpcTopology load(const std::string& path);
    void save(const std::string& path) const;
};

// Collapses a bidirectional streaming pair (u: A->B, v: B->A, each listed as
// the other's child) into one metanode rpc that keeps both directions' edges.
// The metanode's samples pool both directions' spans via the alias list; the
// declared-first direction supplies the client/server orientation. Cycles of
// length > 2 are outside the model and raise an error. Idempotent.
RpcTopology merge_bidirectional(const RpcTopology& topology);

}  // namespace sage
