#pragma once

#include <map>
#include <string>
#include <vector>

#include "sage/span.hpp"
#include "sage/topology.hpp"

namespace sage {

// Zero-load request/response delay baseline for one rpc, microseconds.
struct NetBaseline {
    double y_req = 0;
    double y_resp = 0;
};

using BaselineMap = std::map<std::string, NetBaseline>;

struct IngestConfig {
    int64_t window_len_us = 30'000'000;  // 30 s sampling interval
    int64_t epoch_us = 0;                // window 0 starts here
    double qos_target_us = 0;            // 0 = no QoS labeling, all windows met
    double qos_percentile = 99.0;        // frontend tail percentile
    int64_t skew_tolerance_us = 100;     // nesting repair limit for real traces
};

struct IngestStats {
    size_t accepted_pairs = 0;
    size_t orphan_server_spans = 0;  // no matching client span
    size_t orphan_client_spans = 0;  // no matching server span
    size_t rejected_pairs = 0;       // malformed beyond skew tolerance
    size_t repaired_pairs = 0;       // nesting fixed within tolerance
};

// Splits a client-observed latency into server latency, network delays and
// nonnegative queueing slack. The baseline is clamped proportionally when it
// exceeds the observed slack, which preserves y_client >= y_server + y_req +
// y_resp under clock jitter. Throws on a malformed pair (y_server > y_client).
RpcLatencySample decompose_latency(const Span& client_span, const Span& server_span,
                                   const NetBaseline& baseline);

// Groups spans into fixed-length windows by client-span start time, pairs
// client/server spans per trace, and decomposes latencies. Orphan server
// spans are counted and dropped with a warning; an rpc name missing from the
// topology is a hard error. Deterministic: re-ingesting the same input yields
// identical windows.
std::vector<TraceWindow> ingest_traces(const std::vector<Span>& spans,
                                       const RpcTopology& topology,
                                       const IngestConfig& config,
                                       const BaselineMap& baselines,
                                       IngestStats* stats = nullptr);

// Attaches raw metric records to the matching windows (by timestamp).
void attach_metrics(std::vector<TraceWindow>& windows,
                    const std::vector<MetricRecord>& records, const IngestConfig& config);

// Estimates the per-rpc zero-load network delay from probe samples taken at
// near-zero offered load: the 10th percentile of (y_client - y_server),
// split evenly between request and response. Requires at least `min_probes`
// samples per rpc.
BaselineMap estimate_zero_load_delay(const std::vector<RpcLatencySample>& probe_samples,
                                     size_t min_probes = 20);

// Convenience: pair spans of a zero-load calibration run and estimate the
// baseline directly (samples are decomposed with a zero baseline first).
BaselineMap estimate_zero_load_delay_from_spans(const std::vector<Span>& spans,
                                                const RpcTopology& topology,
                                                size_t min_probes = 20);

// Per-request server-side latencies for the given rpcs: one row per trace
// that contains a complete set. Used by the Markov-property validation.
std::vector<std::vector<double>> per_trace_server_latencies(
    const std::vector<Span>& spans, const RpcTopology& topology,
    const std::vector<std::string>& rpc_names);

}  // namespace sage
