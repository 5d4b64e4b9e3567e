#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace sage {

enum class SpanKind { Client, Server };

// One side of an RPC. Timestamps are microseconds since the capture epoch.
struct Span {
    std::string trace_id;
    std::string span_id;
    std::string parent_span_id;  // empty = root
    std::string rpc_name;
    std::string service;
    SpanKind kind = SpanKind::Client;
    int64_t start_us = 0;
    int64_t duration_us = 0;

    int64_t end_us() const { return start_us + duration_us; }
};

// Client/server/network decomposition of one sampled RPC.
struct RpcLatencySample {
    std::string rpc_name;
    double y_client = 0;  // full client-observed latency
    double y_server = 0;  // server handler latency
    double y_req = 0;     // request network delay
    double y_resp = 0;    // response network delay
    int64_t window_id = 0;

    double slack() const { return y_client - y_server - y_req - y_resp; }
};

// Raw resource-metric scrape for one replica of a service, or one probe of a
// channel. Percentile aggregation across replicas happens downstream.
struct MetricRecord {
    int64_t timestamp_us = 0;
    std::string owner;        // service or channel name
    std::string metric_name;  // cpu_util, rtt, ...
    int32_t replica_id = 0;
    double value = 0;
};

// Percentile vector of one metric across an owner's replicas in a window.
struct MetricVector {
    std::string owner;
    std::string metric_name;
    std::vector<std::pair<double, double>> percentiles;  // (percentile, value)
    int64_t window_id = 0;
};

// Everything observed in one fixed-length wall-clock window.
struct TraceWindow {
    int64_t window_id = 0;
    int64_t start_us = 0;
    int64_t end_us = 0;
    std::map<std::string, std::vector<RpcLatencySample>> samples;  // rpc -> samples
    std::map<std::string, std::vector<MetricRecord>> metrics;      // owner -> raw records
    bool qos_met = true;
    bool frontend_observed = false;
    double frontend_tail_us = 0;  // frontend y_client at the QoS percentile
};

// --- newline-delimited file formats -----------------------------------------
// First line is a versioned header record; each following line is one JSON
// record. docs/span_schema.json and docs/metric_schema.json carry the schema.

void write_span_file(const std::string& path, const std::vector<Span>& spans);
std::vector<Span> read_span_file(const std::string& path);
void for_each_span(const std::string& path, const std::function<void(const Span&)>& fn);

void write_metric_file(const std::string& path, const std::vector<MetricRecord>& records);
std::vector<MetricRecord> read_metric_file(const std::string& path);

// Appending writers used by the simulator so long runs stream to disk.
class SpanFileWriter {
public:
    explicit SpanFileWriter(const std::string& path);
    ~SpanFileWriter();
    void write(const Span& s);
    void flush();

private:
    std::FILE* f_;
};

class MetricFileWriter {
public:
    explicit MetricFileWriter(const std::string& path);
    ~MetricFileWriter();
    void write(const MetricRecord& r);
    void flush();

private:
    std::FILE* f_;
};

std::string span_to_json(const Span& s);
std::string metric_to_json(const MetricRecord& r);

}  // namespace sage
