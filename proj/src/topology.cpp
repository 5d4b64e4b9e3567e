#include "sage/topology.hpp"

#include <algorithm>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include <json.hpp>

namespace sage {

using nlohmann::json;

bool RpcTopology::has_service(const std::string& name) const {
    return std::any_of(services.begin(), services.end(),
                       [&](const ServiceDef& s) { return s.name == name; });
}

bool RpcTopology::is_external_client(const RpcDef& r) const {
    return !has_service(r.client_service);
}

const RpcDef* RpcTopology::find_rpc(const std::string& name) const {
    for (const auto& r : rpcs)
        if (r.name == name) return &r;
    return nullptr;
}

const RpcDef& RpcTopology::rpc(const std::string& name) const {
    const RpcDef* r = find_rpc(name);
    check(r != nullptr, "unknown rpc '" + name + "'");
    return *r;
}

const RpcDef* RpcTopology::resolve_rpc(const std::string& span_rpc_name) const {
    for (const auto& r : rpcs) {
        if (r.name == span_rpc_name) return &r;
        for (const auto& a : r.aliases)
            if (a == span_rpc_name) return &r;
    }
    return nullptr;
}

void RpcTopology::validate(bool allow_bidirectional) const {
    check(!services.empty(), "topology has no services");
    std::set<std::string> svc_names;
    for (const auto& s : services)
        check(svc_names.insert(s.name).second, "duplicate service '" + s.name + "'");

    std::set<std::string> rpc_names;
    for (const auto& r : rpcs)
        check(rpc_names.insert(r.name).second, "duplicate rpc '" + r.name + "'");

    check(find_rpc(frontend_rpc) != nullptr, "frontend_rpc '" + frontend_rpc +
                                                 "' not in rpc list");

    std::map<std::string, int> parent_count;
    for (const auto& r : rpcs) {
        check(has_service(r.server_service),
              "rpc '" + r.name + "' server '" + r.server_service + "' is not a service");
        if (!has_service(r.client_service))
            check(r.name == frontend_rpc, "rpc '" + r.name +
                                              "' has external client '" + r.client_service +
                                              "'; only the frontend rpc may");
        for (const auto& c : r.children) {
            const RpcDef* child = find_rpc(c);
            check(child != nullptr, "rpc '" + r.name + "' lists unknown child '" + c + "'");
            check(child->client_service == r.server_service,
                  "child rpc '" + c + "' must be invoked by '" + r.server_service +
                      "' (the server of '" + r.name + "')");
            parent_count[c]++;
        }
    }

    // Tree shape holds only after metanode merging; with allow_bidirectional
    // the structural checks are deferred to merge_bidirectional.
    if (allow_bidirectional) return;

    check(parent_count.count(frontend_rpc) == 0, "frontend rpc may not be a child");
    for (const auto& [name, cnt] : parent_count)
        check(cnt == 1, "rpc '" + name + "' has multiple parents");
    for (const auto& r : rpcs) {
        if (r.name == frontend_rpc) continue;
        check(parent_count.count(r.name) == 1,
              "rpc '" + r.name + "' is unreachable from the frontend rpc");
    }

    // No rpc is its own ancestor.
    for (const auto& r : rpcs) {
        std::vector<const RpcDef*> stack{&r};
        std::set<std::string> seen;
        while (!stack.empty()) {
            const RpcDef* cur = stack.back();
            stack.pop_back();
            for (const auto& c : cur->children) {
                check(c != r.name,
                      "rpc '" + r.name + "' is its own ancestor; run merge_bidirectional "
                      "first if this is a streaming pair");
                if (seen.insert(c).second) stack.push_back(&rpc(c));
            }
        }
    }
}

std::string RpcTopology::to_json_string() const {
    json j;
    j["frontend_rpc"] = frontend_rpc;
    j["services"] = json::array();
    for (const auto& s : services)
        j["services"].push_back({{"name", s.name}, {"stateful", s.stateful}});
    j["rpcs"] = json::array();
    for (const auto& r : rpcs) {
        json e{{"name", r.name},
               {"client", r.client_service},
               {"server", r.server_service},
               {"children", r.children},
               {"parallel", r.parallel_children}};
        if (!r.aliases.empty()) e["aliases"] = r.aliases;
        j["rpcs"].push_back(e);
    }
    return j.dump(2);
}

RpcTopology RpcTopology::from_json_string(const std::string& text) {
    json j = json::parse(text, nullptr, false);
    check(!j.is_discarded(), "topology config is not valid JSON");
    RpcTopology t;
    t.frontend_rpc = j.at("frontend_rpc").get<std::string>();
    for (const auto& s : j.at("services")) {
        ServiceDef d;
        if (s.is_string()) {
            d.name = s.get<std::string>();
        } else {
            d.name = s.at("name").get<std::string>();
            d.stateful = s.value("stateful", false);
        }
        t.services.push_back(std::move(d));
    }
    for (const auto& r : j.at("rpcs")) {
        RpcDef d;
        d.name = r.at("name").get<std::string>();
        d.client_service = r.at("client").get<std::string>();
        d.server_service = r.at("server").get<std::string>();
        if (r.contains("children")) d.children = r["children"].get<std::vector<std::string>>();
        d.parallel_children = r.value("parallel", false);
        if (r.contains("aliases")) d.aliases = r["aliases"].get<std::vector<std::string>>();
        t.rpcs.push_back(std::move(d));
    }
    return t;
}

RpcTopology RpcTopology::load(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open topology file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return from_json_string(ss.str());
}

void RpcTopology::save(const std::string& path) const {
    std::ofstream out(path);
    check(out.good(), "cannot open " + path + " for writing");
    out << to_json_string() << "\n";
}

RpcTopology merge_bidirectional(const RpcTopology& topology) {
    topology.validate(/*allow_bidirectional=*/true);

    // Find two-cycles in the child relation.
    std::vector<std::pair<std::string, std::string>> pairs;
    std::set<std::string> in_pair;
    for (const auto& u : topology.rpcs) {
        for (const auto& cname : u.children) {
            const RpcDef& v = topology.rpc(cname);
            bool back = std::find(v.children.begin(), v.children.end(), u.name) !=
                        v.children.end();
            if (back && !in_pair.count(u.name) && !in_pair.count(v.name)) {
                pairs.emplace_back(u.name, v.name);
                in_pair.insert(u.name);
                in_pair.insert(v.name);
            }
        }
    }

    // Longer cycles in the child relation are outside the model; detect them
    // by DFS ignoring two-cycles.
    {
        std::map<std::string, int> color;
        std::function<void(const RpcDef&, const RpcDef*)> dfs = [&](const RpcDef& r,
                                                                    const RpcDef* from) {
            color[r.name] = 1;
            for (const auto& c : r.children) {
                if (from && c == from->name) continue;  // the back edge of a 2-cycle
                const RpcDef& child = topology.rpc(c);
                if (color[c] == 1)
                    throw Error("cycle of length > 2 through rpc '" + c +
                                "'; only bidirectional (2-cycle) streaming pairs are supported");
                if (color[c] == 0) dfs(child, &r);
            }
            color[r.name] = 2;
        };
        for (const auto& r : topology.rpcs)
            if (color[r.name] == 0) dfs(r, nullptr);
    }

    if (pairs.empty()) return topology;

    RpcTopology out;
    out.services = topology.services;
    out.frontend_rpc = topology.frontend_rpc;

    std::map<std::string, std::string> replaced;  // old rpc -> metanode name
    std::map<std::string, RpcDef> metanodes;
    for (const auto& [uname, vname] : pairs) {
        const RpcDef& u = topology.rpc(uname);
        const RpcDef& v = topology.rpc(vname);
        RpcDef m;
        m.name = uname + "+" + vname;
        // Declared-first direction supplies the orientation.
        m.client_service = u.client_service;
        m.server_service = u.server_service;
        m.parallel_children = u.parallel_children || v.parallel_children;
        m.aliases = {uname, vname};
        for (const auto& a : u.aliases) m.aliases.push_back(a);
        for (const auto& a : v.aliases) m.aliases.push_back(a);
        for (const auto& c : u.children)
            if (c != vname) m.children.push_back(c);
        for (const auto& c : v.children)
            if (c != uname) m.children.push_back(c);
        replaced[uname] = m.name;
        replaced[vname] = m.name;
        metanodes[m.name] = std::move(m);
    }

    for (const auto& r : topology.rpcs) {
        if (replaced.count(r.name)) {
            auto it = metanodes.find(replaced[r.name]);
            if (it != metanodes.end()) {
                out.rpcs.push_back(it->second);
                metanodes.erase(it);  // emit each metanode once, at first member
            }
            continue;
        }
        RpcDef d = r;
        std::vector<std::string> kids;
        for (const auto& c : d.children) {
            std::string mapped = replaced.count(c) ? replaced[c] : c;
            if (std::find(kids.begin(), kids.end(), mapped) == kids.end())
                kids.push_back(mapped);
        }
        d.children = std::move(kids);
        out.rpcs.push_back(std::move(d));
    }
    if (replaced.count(out.frontend_rpc)) out.frontend_rpc = replaced[out.frontend_rpc];

    out.validate();
    return out;
}

}  // namespace sage
