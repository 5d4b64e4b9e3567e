#include "sage/trace_model.hpp"

#include <algorithm>
#include <unordered_map>

#include "sage/percentile.hpp"

namespace sage {

RpcLatencySample decompose_latency(const Span& client_span, const Span& server_span,
                                   const NetBaseline& baseline) {
    check(client_span.kind == SpanKind::Client && server_span.kind == SpanKind::Server,
          "decompose_latency wants a (client, server) pair");
    check(client_span.rpc_name == server_span.rpc_name ||
              client_span.trace_id == server_span.trace_id,
          "span pair mismatch");
    double y_client = static_cast<double>(client_span.duration_us);
    double y_server = static_cast<double>(server_span.duration_us);
    if (y_server > y_client)
        throw Error("malformed span pair for rpc '" + client_span.rpc_name +
                    "': server duration exceeds client duration");

    RpcLatencySample s;
    s.rpc_name = client_span.rpc_name;
    s.y_client = y_client;
    s.y_server = y_server;
    s.y_req = baseline.y_req;
    s.y_resp = baseline.y_resp;
    double slack = y_client - y_server;
    double net = s.y_req + s.y_resp;
    if (net > slack && net > 0.0) {
        // Baseline exceeds the observed slack: scale both sides down so the
        // sample invariant holds with zero queueing slack.
        double f = slack / net;
        s.y_req *= f;
        s.y_resp *= f;
    }
    return s;
}

namespace {

struct PairKey {
    // Client span identity for matching server spans via parent_span_id.
    std::string trace_id;
    std::string span_id;
};

}  // namespace

std::vector<TraceWindow> ingest_traces(const std::vector<Span>& spans,
                                       const RpcTopology& topology,
                                       const IngestConfig& config,
                                       const BaselineMap& baselines,
                                       IngestStats* stats_out) {
    check(config.window_len_us > 0, "window length must be positive");
    IngestStats stats;

    // Index client spans by (trace, span_id); match server spans to them.
    std::unordered_map<std::string, size_t> client_by_key;
    client_by_key.reserve(spans.size());
    for (size_t i = 0; i < spans.size(); ++i) {
        const Span& s = spans[i];
        if (topology.resolve_rpc(s.rpc_name) == nullptr)
            throw Error("span rpc '" + s.rpc_name + "' is not in the topology");
        if (s.kind == SpanKind::Client)
            client_by_key[s.trace_id + "/" + s.span_id] = i;
    }

    struct Pair {
        const Span* client;
        const Span* server;
    };
    std::vector<Pair> pairs;
    std::vector<bool> client_matched(spans.size(), false);
    for (const Span& s : spans) {
        if (s.kind != SpanKind::Server) continue;
        auto it = client_by_key.find(s.trace_id + "/" + s.parent_span_id);
        if (it == client_by_key.end()) {
            stats.orphan_server_spans++;
            continue;
        }
        const Span& c = spans[it->second];
        pairs.push_back({&c, &s});
        client_matched[it->second] = true;
    }
    for (size_t i = 0; i < spans.size(); ++i)
        if (spans[i].kind == SpanKind::Client && !client_matched[i])
            stats.orphan_client_spans++;
    if (stats.orphan_server_spans > 0)
        warn("%zu orphan server span(s) dropped during ingestion",
             stats.orphan_server_spans);

    // Window range from client span starts.
    int64_t min_id = 0, max_id = -1;
    bool first = true;
    for (const auto& p : pairs) {
        int64_t id = (p.client->start_us - config.epoch_us) / config.window_len_us;
        if (first) {
            min_id = max_id = id;
            first = false;
        } else {
            min_id = std::min(min_id, id);
            max_id = std::max(max_id, id);
        }
    }

    std::vector<TraceWindow> windows;
    for (int64_t id = min_id; id <= max_id; ++id) {
        TraceWindow w;
        w.window_id = id;
        w.start_us = config.epoch_us + id * config.window_len_us;
        w.end_us = w.start_us + config.window_len_us;
        // Every topology rpc appears, possibly with an empty sample list.
        for (const auto& r : topology.rpcs) w.samples[r.name];
        windows.push_back(std::move(w));
    }

    NetBaseline zero;
    for (const auto& p : pairs) {
        const RpcDef* rpc = topology.resolve_rpc(p.client->rpc_name);
        Span server = *p.server;

        // Clock-skew repair: shrink the server span into the client interval
        // when the violation is within tolerance, otherwise reject the pair.
        int64_t lead = p.client->start_us - server.start_us;
        int64_t tail = server.end_us() - p.client->end_us();
        if (lead > 0 || tail > 0) {
            if (std::max<int64_t>(lead, 0) + std::max<int64_t>(tail, 0) >
                config.skew_tolerance_us) {
                stats.rejected_pairs++;
                continue;
            }
            int64_t new_start = std::max(server.start_us, p.client->start_us);
            int64_t new_end = std::min(server.end_us(), p.client->end_us());
            server.start_us = new_start;
            server.duration_us = std::max<int64_t>(new_end - new_start, 0);
            stats.repaired_pairs++;
        }
        if (server.duration_us > p.client->duration_us) {
            stats.rejected_pairs++;
            continue;
        }

        auto bit = baselines.find(rpc->name);
        const NetBaseline& base = bit != baselines.end() ? bit->second : zero;
        RpcLatencySample sample = decompose_latency(*p.client, server, base);
        sample.rpc_name = rpc->name;  // canonical name (metanode aliases fold here)
        sample.window_id = (p.client->start_us - config.epoch_us) / config.window_len_us;
        windows[sample.window_id - min_id].samples[rpc->name].push_back(sample);
        stats.accepted_pairs++;
    }

    // Deterministic sample order inside each window.
    for (auto& w : windows) {
        for (auto& [rpc, v] : w.samples) {
            std::stable_sort(v.begin(), v.end(),
                             [](const RpcLatencySample& a, const RpcLatencySample& b) {
                                 return a.y_client < b.y_client;
                             });
        }
    }

    // QoS labeling from the frontend rpc's tail latency.
    for (auto& w : windows) {
        const auto& fe = w.samples.at(topology.frontend_rpc);
        if (!fe.empty()) {
            std::vector<double> lat;
            lat.reserve(fe.size());
            for (const auto& s : fe) lat.push_back(s.y_client);
            w.frontend_tail_us = percentile(std::move(lat), config.qos_percentile);
            w.frontend_observed = true;
            w.qos_met = config.qos_target_us <= 0 || w.frontend_tail_us <= config.qos_target_us;
        }
    }

    if (stats_out) *stats_out = stats;
    return windows;
}

void attach_metrics(std::vector<TraceWindow>& windows,
                    const std::vector<MetricRecord>& records, const IngestConfig& config) {
    if (windows.empty()) return;
    int64_t min_id = windows.front().window_id;
    int64_t max_id = windows.back().window_id;
    for (const auto& r : records) {
        // Metric timestamps mark the end of the scrape interval; records at a
        // window boundary describe the window that just closed.
        int64_t id = (r.timestamp_us - config.epoch_us - 1) / config.window_len_us;
        if (id < min_id || id > max_id) continue;
        windows[id - min_id].metrics[r.owner].push_back(r);
    }
}

BaselineMap estimate_zero_load_delay(const std::vector<RpcLatencySample>& probe_samples,
                                     size_t min_probes) {
    std::map<std::string, std::vector<double>> slack_by_rpc;
    for (const auto& s : probe_samples)
        slack_by_rpc[s.rpc_name].push_back(s.y_client - s.y_server);

    BaselineMap out;
    for (auto& [rpc, slacks] : slack_by_rpc) {
        if (slacks.size() < min_probes)
            throw Error("zero-load estimation for rpc '" + rpc + "' needs at least " +
                        std::to_string(min_probes) + " probes, got " +
                        std::to_string(slacks.size()));
        double p10 = percentile(std::move(slacks), 10.0);
        p10 = std::max(p10, 0.0);
        out[rpc] = NetBaseline{p10 / 2.0, p10 / 2.0};
    }
    check(!out.empty(), "no probe samples given to estimate_zero_load_delay");
    return out;
}

BaselineMap estimate_zero_load_delay_from_spans(const std::vector<Span>& spans,
                                                const RpcTopology& topology,
                                                size_t min_probes) {
    IngestConfig cfg;
    cfg.window_len_us = INT64_MAX / 4;  // single window
    auto windows = ingest_traces(spans, topology, cfg, {});
    std::vector<RpcLatencySample> samples;
    for (const auto& w : windows)
        for (const auto& [rpc, v] : w.samples)
            samples.insert(samples.end(), v.begin(), v.end());
    return estimate_zero_load_delay(samples, min_probes);
}

std::vector<std::vector<double>> per_trace_server_latencies(
    const std::vector<Span>& spans, const RpcTopology& topology,
    const std::vector<std::string>& rpc_names) {
    std::unordered_map<std::string, std::vector<double>> rows;
    std::unordered_map<std::string, int> filled;
    std::vector<std::string> trace_order;
    for (const Span& s : spans) {
        if (s.kind != SpanKind::Server) continue;
        const RpcDef* rpc = topology.resolve_rpc(s.rpc_name);
        if (!rpc) continue;
        auto it = std::find(rpc_names.begin(), rpc_names.end(), rpc->name);
        if (it == rpc_names.end()) continue;
        size_t col = static_cast<size_t>(it - rpc_names.begin());
        auto [row, inserted] = rows.try_emplace(s.trace_id);
        if (inserted) {
            row->second.assign(rpc_names.size(), -1.0);
            trace_order.push_back(s.trace_id);
        }
        if (row->second[col] < 0) {
            row->second[col] = static_cast<double>(s.duration_us);
            filled[s.trace_id]++;
        }
    }
    std::vector<std::vector<double>> out;
    for (const auto& tid : trace_order)
        if (filled[tid] == static_cast<int>(rpc_names.size()))
            out.push_back(rows[tid]);
    return out;
}

}  // namespace sage
