#include "sage/span.hpp"

#include <cinttypes>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "sage/common.hpp"

namespace sage {

using nlohmann::json;

std::string span_to_json(const Span& s) {
    char buf[512];
    int n;
    if (s.parent_span_id.empty()) {
        n = std::snprintf(buf, sizeof(buf),
                          "{\"trace_id\":\"%s\",\"span_id\":\"%s\",\"rpc_name\":\"%s\","
                          "\"service\":\"%s\",\"kind\":\"%s\",\"start\":%" PRId64
                          ",\"duration\":%" PRId64 "}",
                          s.trace_id.c_str(), s.span_id.c_str(), s.rpc_name.c_str(),
                          s.service.c_str(), s.kind == SpanKind::Client ? "client" : "server",
                          s.start_us, s.duration_us);
    } else {
        n = std::snprintf(buf, sizeof(buf),
                          "{\"trace_id\":\"%s\",\"span_id\":\"%s\",\"parent_span_id\":\"%s\","
                          "\"rpc_name\":\"%s\",\"service\":\"%s\",\"kind\":\"%s\","
                          "\"start\":%" PRId64 ",\"duration\":%" PRId64 "}",
                          s.trace_id.c_str(), s.span_id.c_str(), s.parent_span_id.c_str(),
                          s.rpc_name.c_str(), s.service.c_str(),
                          s.kind == SpanKind::Client ? "client" : "server", s.start_us,
                          s.duration_us);
    }
    check(n > 0 && n < static_cast<int>(sizeof(buf)), "span record too long");
    return std::string(buf, n);
}

std::string metric_to_json(const MetricRecord& r) {
    char buf[384];
    int n = std::snprintf(buf, sizeof(buf),
                          "{\"timestamp\":%" PRId64
                          ",\"owner\":\"%s\",\"metric_name\":\"%s\",\"replica_id\":%d,"
                          "\"value\":%.17g}",
                          r.timestamp_us, r.owner.c_str(), r.metric_name.c_str(),
                          r.replica_id, r.value);
    check(n > 0 && n < static_cast<int>(sizeof(buf)), "metric record too long");
    return std::string(buf, n);
}

namespace {

std::string header_line(const char* format) {
    json h;
    h["format"] = format;
    h["version"] = kFormatVersion;
    return h.dump();
}

void check_header(const std::string& line, const char* format, const std::string& path) {
    json h = json::parse(line, nullptr, false);
    check(!h.is_discarded() && h.value("format", "") == format &&
              h.value("version", -1) == kFormatVersion,
          "bad or missing header line in " + path + " (expected format '" +
              format + "' version " + std::to_string(kFormatVersion) + ")");
}

Span parse_span(const json& j) {
    Span s;
    s.trace_id = j.at("trace_id").get<std::string>();
    s.span_id = j.at("span_id").get<std::string>();
    if (j.contains("parent_span_id")) s.parent_span_id = j["parent_span_id"].get<std::string>();
    s.rpc_name = j.at("rpc_name").get<std::string>();
    s.service = j.at("service").get<std::string>();
    std::string kind = j.at("kind").get<std::string>();
    check(kind == "client" || kind == "server", "span kind must be client|server");
    s.kind = kind == "client" ? SpanKind::Client : SpanKind::Server;
    s.start_us = j.at("start").get<int64_t>();
    s.duration_us = j.at("duration").get<int64_t>();
    check(s.duration_us >= 0, "span duration negative");
    return s;
}

}  // namespace

void for_each_span(const std::string& path, const std::function<void(const Span&)>& fn) {
    std::ifstream in(path);
    check(in.good(), "cannot open span file " + path);
    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "empty span file " + path);
    check_header(line, kSpanFormatHeader, path);
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        check(!j.is_discarded(), path + ":" + std::to_string(lineno) + ": bad JSON");
        fn(parse_span(j));
    }
}

std::vector<Span> read_span_file(const std::string& path) {
    std::vector<Span> out;
    for_each_span(path, [&](const Span& s) { out.push_back(s); });
    return out;
}

void write_span_file(const std::string& path, const std::vector<Span>& spans) {
    SpanFileWriter w(path);
    for (const auto& s : spans) w.write(s);
}

std::vector<MetricRecord> read_metric_file(const std::string& path) {
    std::ifstream in(path);
    check(in.good(), "cannot open metric file " + path);
    std::string line;
    check(static_cast<bool>(std::getline(in, line)), "empty metric file " + path);
    check_header(line, kMetricFormatHeader, path);
    std::vector<MetricRecord> out;
    size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        json j = json::parse(line, nullptr, false);
        check(!j.is_discarded(), path + ":" + std::to_string(lineno) + ": bad JSON");
        MetricRecord r;
        r.timestamp_us = j.at("timestamp").get<int64_t>();
        r.owner = j.at("owner").get<std::string>();
        r.metric_name = j.at("metric_name").get<std::string>();
        r.replica_id = j.at("replica_id").get<int32_t>();
        r.value = j.at("value").get<double>();
        out.push_back(std::move(r));
    }
    return out;
}

void write_metric_file(const std::string& path, const std::vector<MetricRecord>& records) {
    MetricFileWriter w(path);
    for (const auto& r : records) w.write(r);
}

SpanFileWriter::SpanFileWriter(const std::string& path) : f_(std::fopen(path.c_str(), "w")) {
    check(f_ != nullptr, "cannot open " + path + " for writing");
    std::string h = header_line(kSpanFormatHeader);
    std::fprintf(f_, "%s\n", h.c_str());
}

SpanFileWriter::~SpanFileWriter() {
    if (f_) std::fclose(f_);
}

void SpanFileWriter::write(const Span& s) {
    std::string line = span_to_json(s);
    std::fprintf(f_, "%s\n", line.c_str());
}

void SpanFileWriter::flush() { std::fflush(f_); }

MetricFileWriter::MetricFileWriter(const std::string& path)
    : f_(std::fopen(path.c_str(), "w")) {
    check(f_ != nullptr, "cannot open " + path + " for writing");
    std::string h = header_line(kMetricFormatHeader);
    std::fprintf(f_, "%s\n", h.c_str());
}

MetricFileWriter::~MetricFileWriter() {
    if (f_) std::fclose(f_);
}

void MetricFileWriter::write(const MetricRecord& r) {
    std::string line = metric_to_json(r);
    std::fprintf(f_, "%s\n", line.c_str());
}

void MetricFileWriter::flush() { std::fflush(f_); }

}  // namespace sage
