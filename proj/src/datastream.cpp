#include "sage/datastream.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

namespace sage {

std::vector<double> to_percentile_vector(const std::vector<double>& samples,
                                         const std::vector<double>& grid) {
    check(!samples.empty(), "to_percentile_vector: empty sample vector");
    return percentile_vector(samples, grid);
}

TensorLayout TensorLayout::build(const CausalGraph& graph, const PercentileGrid& grids,
                                 const MetricSchema& schema, double qos_percentile) {
    grids.validate();
    TensorLayout l;
    l.grids = grids;
    l.schema = schema;
    l.offset.assign(graph.nodes().size(), -1);
    l.length.assign(graph.nodes().size(), 0);
    int off = 0;
    int lat_points = static_cast<int>(grids.latency_grid.size());
    int met_points = static_cast<int>(grids.metric_grid.size());
    for (const auto& n : graph.nodes()) {
        int len = 0;
        switch (n.kind) {
            case NodeKind::MetricServer:
                len = met_points * static_cast<int>(schema.server_metrics.size());
                break;
            case NodeKind::MetricNetwork:
                len = met_points * static_cast<int>(schema.network_metrics.size());
                break;
            case NodeKind::LatClient:
            case NodeKind::LatServer:
            case NodeKind::LatReq:
            case NodeKind::LatResp:
                len = lat_points;
                break;
            default:
                len = 0;  // latent nodes carry no observed data
        }
        l.offset[n.id] = off;
        l.length[n.id] = len;
        off += len;
    }
    l.total = off;

    // Index of the QoS percentile in a latency vector.
    auto it = std::find(grids.latency_grid.begin(), grids.latency_grid.end(),
                        qos_percentile);
    check(it != grids.latency_grid.end(),
          "QoS percentile must be a latency grid point");
    l.qos_index = static_cast<int>(it - grids.latency_grid.begin());
    return l;
}

void Normalizer::fit(const std::vector<SampleTensor>& tensors) {
    check(!tensors.empty(), "Normalizer::fit on empty tensor set");
    size_t n_feat = tensors[0].values.size();
    center_.assign(n_feat, 0.0);
    scale_.assign(n_feat, 1.0);
    std::vector<double> column;
    column.reserve(tensors.size());
    for (size_t f = 0; f < n_feat; ++f) {
        column.clear();
        for (const auto& t : tensors) column.push_back(t.values[f]);
        std::sort(column.begin(), column.end());
        double med = percentile_sorted(column, 50.0);
        double iqr = percentile_sorted(column, 75.0) - percentile_sorted(column, 25.0);
        center_[f] = med;
        scale_[f] = iqr > 1e-12 ? iqr : 1.0;  // constant features pass through centered
    }
}

void Normalizer::set(std::vector<double> center, std::vector<double> scale) {
    check(center.size() == scale.size(), "normalizer center/scale size mismatch");
    for (double s : scale) check(s > 0, "normalizer scale must be positive");
    center_ = std::move(center);
    scale_ = std::move(scale);
}

void Normalizer::apply(SampleTensor& t) const {
    check(t.values.size() == center_.size(), "tensor/normalizer size mismatch");
    for (size_t f = 0; f < t.values.size(); ++f)
        t.values[f] = (t.values[f] - center_[f]) / scale_[f];
}

void Normalizer::invert(SampleTensor& t) const {
    check(t.values.size() == center_.size(), "tensor/normalizer size mismatch");
    for (size_t f = 0; f < t.values.size(); ++f)
        t.values[f] = t.values[f] * scale_[f] + center_[f];
}

double Normalizer::apply_one(int feature, double v) const {
    return (v - center_.at(feature)) / scale_.at(feature);
}

double Normalizer::invert_one(int feature, double v) const {
    return v * scale_.at(feature) + center_.at(feature);
}

namespace {

// Collects the values of one metric for one owner within a window.
std::vector<double> metric_values(const TraceWindow& w, const std::string& owner,
                                  const std::string& metric_name) {
    std::vector<double> out;
    auto it = w.metrics.find(owner);
    if (it == w.metrics.end()) return out;
    for (const auto& r : it->second)
        if (r.metric_name == metric_name) out.push_back(r.value);
    return out;
}

}  // namespace

std::vector<SampleTensor> assemble(const std::vector<TraceWindow>& windows,
                                   const CausalGraph& graph, const TensorLayout& layout) {
    std::vector<SampleTensor> out;
    out.reserve(windows.size());

    std::vector<double> prev_values(layout.total, 0.0);
    std::vector<bool> prev_valid(graph.nodes().size(), false);
    size_t carried_total = 0;

    for (const auto& w : windows) {
        SampleTensor t;
        t.window_id = w.window_id;
        t.qos_met = w.qos_met;
        t.values.assign(layout.total, 0.0);
        t.valid.assign(graph.nodes().size(), true);

        for (const auto& n : graph.nodes()) {
            int off = layout.offset[n.id];
            int len = layout.length[n.id];
            if (len == 0) continue;

            std::vector<double> vec;
            switch (n.kind) {
                case NodeKind::LatClient:
                case NodeKind::LatServer: {
                    auto it = w.samples.find(n.owner);
                    check(it != w.samples.end(),
                          "window has no sample slot for rpc '" + n.owner +
                              "' (topology mismatch)");
                    if (!it->second.empty()) {
                        std::vector<double> vals;
                        vals.reserve(it->second.size());
                        for (const auto& s : it->second)
                            vals.push_back(n.kind == NodeKind::LatClient ? s.y_client
                                                                         : s.y_server);
                        vec = to_percentile_vector(vals, layout.grids.latency_grid);
                    }
                    break;
                }
                case NodeKind::LatReq:
                case NodeKind::LatResp: {
                    // Channel probes give the live one-way delay distribution;
                    // fall back to the baseline-filled sample fields when the
                    // window has no probes.
                    std::vector<double> rtt = metric_values(w, n.owner, "rtt");
                    if (!rtt.empty()) {
                        for (double& v : rtt) v *= 0.5;
                        vec = to_percentile_vector(rtt, layout.grids.latency_grid);
                    } else {
                        std::string rpc = n.owner.substr(4);  // strip "net:"
                        auto it = w.samples.find(rpc);
                        if (it != w.samples.end() && !it->second.empty()) {
                            std::vector<double> vals;
                            for (const auto& s : it->second)
                                vals.push_back(n.kind == NodeKind::LatReq ? s.y_req
                                                                          : s.y_resp);
                            vec = to_percentile_vector(vals, layout.grids.latency_grid);
                        }
                    }
                    break;
                }
                case NodeKind::MetricServer:
                case NodeKind::MetricNetwork: {
                    const auto& names = n.kind == NodeKind::MetricServer
                                            ? layout.schema.server_metrics
                                            : layout.schema.network_metrics;
                    vec.reserve(len);
                    bool any = false;
                    for (const auto& m : names) {
                        std::vector<double> vals = metric_values(w, n.owner, m);
                        if (vals.empty()) {
                            for (size_t k = 0; k < layout.grids.metric_grid.size(); ++k)
                                vec.push_back(0.0);
                        } else {
                            any = true;
                            auto pv = to_percentile_vector(vals, layout.grids.metric_grid);
                            vec.insert(vec.end(), pv.begin(), pv.end());
                        }
                    }
                    if (!any) vec.clear();
                    break;
                }
                default:
                    break;
            }

            if (vec.empty()) {
                // Carry the previous window's vector forward, flagged stale.
                if (prev_valid[n.id]) {
                    std::copy(prev_values.begin() + off, prev_values.begin() + off + len,
                              t.values.begin() + off);
                    t.stale = true;
                    carried_total++;
                } else {
                    t.valid[n.id] = false;
                }
            } else {
                check(static_cast<int>(vec.size()) == len,
                      "assembled vector length mismatch for node " +
                          std::string(node_kind_name(n.kind)) + "(" + n.owner + ")");
                for (double v : vec)
                    check(std::isfinite(v), "non-finite value assembled for node " +
                                                std::string(node_kind_name(n.kind)) + "(" +
                                                n.owner + ")");
                std::copy(vec.begin(), vec.end(), t.values.begin() + off);
            }
        }

        for (const auto& n : graph.nodes()) {
            if (layout.length[n.id] == 0) continue;
            if (t.valid[n.id]) {
                int off = layout.offset[n.id];
                std::copy(t.values.begin() + off,
                          t.values.begin() + off + layout.length[n.id],
                          prev_values.begin() + off);
                prev_valid[n.id] = true;
            }
        }
        out.push_back(std::move(t));
    }

    if (carried_total > 0)
        warn("%zu node vector(s) carried forward from previous windows", carried_total);
    return out;
}

std::vector<SampleTensor> oversample(const std::vector<SampleTensor>& tensors,
                                     double target_ratio, const Rng& rng) {
    size_t met = 0, violated = 0;
    for (const auto& t : tensors) (t.qos_met ? met : violated)++;
    size_t minority = std::min(met, violated);
    size_t majority = std::max(met, violated);
    std::vector<SampleTensor> out = tensors;
    if (minority == 0) {
        warn("oversample: no minority-class windows; dataset unchanged");
        return out;
    }
    size_t target = static_cast<size_t>(
        std::ceil(static_cast<double>(majority) * target_ratio));
    if (minority >= target) return out;

    bool minority_is_met = met < violated;
    std::vector<size_t> pool;
    for (size_t i = 0; i < tensors.size(); ++i)
        if (tensors[i].qos_met == minority_is_met) pool.push_back(i);

    Rng r = rng.child("oversample");
    for (size_t k = minority; k < target; ++k)
        out.push_back(tensors[pool[r.below(pool.size())]]);
    return out;
}

std::vector<Batch> interleave_batches(const std::vector<SampleTensor>& old_pool,
                                      const std::vector<SampleTensor>& new_pool,
                                      int batch_size, double mix_ratio, const Rng& rng) {
    check(batch_size > 0, "batch_size must be positive");
    check(mix_ratio >= 0.0 && mix_ratio < 1.0, "mix_ratio must be in [0,1)");
    check(!new_pool.empty(), "interleave_batches: new pool is empty");

    int n_old = old_pool.empty()
                    ? 0
                    : static_cast<int>(std::ceil(mix_ratio * batch_size));
    int n_new = batch_size - n_old;
    check(n_new > 0, "mix_ratio leaves no room for new samples in a batch");

    Rng r = rng.child("interleave");
    std::vector<size_t> new_idx(new_pool.size());
    for (size_t i = 0; i < new_idx.size(); ++i) new_idx[i] = i;
    r.shuffle(new_idx);

    std::vector<size_t> old_idx(old_pool.size());
    for (size_t i = 0; i < old_idx.size(); ++i) old_idx[i] = i;
    r.shuffle(old_idx);
    size_t old_cursor = 0;

    std::vector<Batch> batches;
    size_t consumed = 0;
    while (consumed < new_idx.size()) {
        Batch b;
        for (int k = 0; k < n_new && consumed < new_idx.size(); ++k, ++consumed)
            b.samples.push_back(&new_pool[new_idx[consumed]]);
        for (int k = 0; k < n_old; ++k) {
            if (old_cursor == old_idx.size()) {
                r.shuffle(old_idx);
                old_cursor = 0;
            }
            b.samples.push_back(&old_pool[old_idx[old_cursor++]]);
        }
        batches.push_back(std::move(b));
    }
    return batches;
}

namespace {
constexpr char kTensorMagic[9] = "SAGETNS1";
}

void save_tensors(const std::string& path, const std::vector<SampleTensor>& tensors,
                  const TensorLayout& layout) {
    std::FILE* f = std::fopen(path.c_str(), "wb");
    check(f != nullptr, "cannot open " + path + " for writing");
    std::fwrite(kTensorMagic, 1, 8, f);
    int64_t total = layout.total;
    int64_t count = static_cast<int64_t>(tensors.size());
    int64_t n_nodes = tensors.empty() ? 0 : static_cast<int64_t>(tensors[0].valid.size());
    std::fwrite(&total, sizeof(total), 1, f);
    std::fwrite(&count, sizeof(count), 1, f);
    std::fwrite(&n_nodes, sizeof(n_nodes), 1, f);
    for (const auto& t : tensors) {
        std::fwrite(&t.window_id, sizeof(t.window_id), 1, f);
        uint8_t flags = (t.qos_met ? 1 : 0) | (t.stale ? 2 : 0);
        std::fwrite(&flags, 1, 1, f);
        std::fwrite(t.values.data(), sizeof(double), t.values.size(), f);
        for (size_t i = 0; i < t.valid.size(); ++i) {
            uint8_t v = t.valid[i] ? 1 : 0;
            std::fwrite(&v, 1, 1, f);
        }
    }
    std::fclose(f);
}

std::vector<SampleTensor> load_tensors(const std::string& path,
                                       const TensorLayout& layout) {
    std::FILE* f = std::fopen(path.c_str(), "rb");
    check(f != nullptr, "cannot open tensor file " + path);
    char magic[8];
    check(std::fread(magic, 1, 8, f) == 8 && std::memcmp(magic, kTensorMagic, 8) == 0,
          "bad tensor file magic in " + path);
    int64_t total = 0, count = 0, n_nodes = 0;
    check(std::fread(&total, sizeof(total), 1, f) == 1, "truncated tensor file");
    check(std::fread(&count, sizeof(count), 1, f) == 1, "truncated tensor file");
    check(std::fread(&n_nodes, sizeof(n_nodes), 1, f) == 1, "truncated tensor file");
    check(total == layout.total, "tensor file layout mismatch");
    std::vector<SampleTensor> out;
    out.reserve(count);
    for (int64_t i = 0; i < count; ++i) {
        SampleTensor t;
        uint8_t flags = 0;
        check(std::fread(&t.window_id, sizeof(t.window_id), 1, f) == 1, "truncated");
        check(std::fread(&flags, 1, 1, f) == 1, "truncated tensor file");
        t.qos_met = flags & 1;
        t.stale = flags & 2;
        t.values.resize(total);
        check(std::fread(t.values.data(), sizeof(double), total, f) ==
                  static_cast<size_t>(total),
              "truncated tensor file");
        t.valid.resize(n_nodes);
        for (int64_t k = 0; k < n_nodes; ++k) {
            uint8_t v = 0;
            check(std::fread(&v, 1, 1, f) == 1, "truncated tensor file");
            t.valid[k] = v != 0;
        }
        out.push_back(std::move(t));
    }
    std::fclose(f);
    return out;
}

}  // namespace sage
