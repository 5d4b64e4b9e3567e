#pragma once

#include <map>
#include <string>
#include <vector>

#include "sage/cbn.hpp"
#include "sage/percentile.hpp"
#include "sage/rng.hpp"
#include "sage/span.hpp"

namespace sage {

// Which raw metrics feed each metric-node kind. The set is configuration,
// not learned; defaults match the simulator's emissions.
struct MetricSchema {
    std::vector<std::string> server_metrics{"cpu_util", "mem_util", "ctx_switches"};
    std::vector<std::string> network_metrics{"rtt", "pkt_loss", "net_bw"};
};

// Fixed flattening of all graph nodes into one feature vector. Latency nodes
// take latency_grid.size() slots; metric nodes take grid * metric-count.
struct TensorLayout {
    PercentileGrid grids;
    MetricSchema schema;
    std::vector<int> offset;  // per node id
    std::vector<int> length;  // per node id
    int total = 0;
    int qos_index = -1;  // index of the frontend tail inside the frontend Yc vector

    static TensorLayout build(const CausalGraph& graph, const PercentileGrid& grids,
                              const MetricSchema& schema, double qos_percentile);

    int node_offset(int id) const { return offset.at(id); }
    int node_length(int id) const { return length.at(id); }
};

// One window, flattened per the layout. `valid` is per node; a node can be
// marked stale when its vector was carried forward from the prior window.
struct SampleTensor {
    int64_t window_id = 0;
    bool qos_met = true;
    bool stale = false;
    std::vector<double> values;
    std::vector<bool> valid;
};

// Per-feature robust affine normalization (median center, IQR scale).
class Normalizer {
public:
    void fit(const std::vector<SampleTensor>& tensors);
    void apply(SampleTensor& t) const;
    void invert(SampleTensor& t) const;
    double apply_one(int feature, double v) const;
    double invert_one(int feature, double v) const;
    bool fitted() const { return !center_.empty(); }
    size_t size() const { return center_.size(); }

    const std::vector<double>& center() const { return center_; }
    const std::vector<double>& scale() const { return scale_; }
    void set(std::vector<double> center, std::vector<double> scale);

private:
    std::vector<double> center_;
    std::vector<double> scale_;
};

// Linear-interpolation percentile vector of `samples` at grid points.
std::vector<double> to_percentile_vector(const std::vector<double>& samples,
                                         const std::vector<double>& grid);

// Maps every graph node to its data source in the window stream and emits one
// raw (un-normalized) tensor per window. Latency nodes read the window's rpc
// samples; request/response nodes read the channel's rtt probes (one-way =
// rtt/2), falling back to the per-sample baseline fill when no probes exist;
// metric nodes read the owner's raw records. Empty windows carry the previous
// window's vector forward and are flagged stale; leading windows with no data
// for some node are marked invalid for that node.
std::vector<SampleTensor> assemble(const std::vector<TraceWindow>& windows,
                                   const CausalGraph& graph, const TensorLayout& layout);

// Duplicates the minority QoS class (seeded, with replacement) until
// minority:majority >= target_ratio. Never removes samples.
std::vector<SampleTensor> oversample(const std::vector<SampleTensor>& tensors,
                                     double target_ratio, const Rng& rng);

struct Batch {
    std::vector<const SampleTensor*> samples;
};

// Interleaves old- and new-pool samples: every batch carries
// ceil(mix_ratio*batch_size) old samples, the rest new, seeded shuffles.
// Old pool may be empty on first training.
std::vector<Batch> interleave_batches(const std::vector<SampleTensor>& old_pool,
                                      const std::vector<SampleTensor>& new_pool,
                                      int batch_size, double mix_ratio, const Rng& rng);

// Versioned binary tensor dump for training reproducibility.
void save_tensors(const std::string& path, const std::vector<SampleTensor>& tensors,
                  const TensorLayout& layout);
std::vector<SampleTensor> load_tensors(const std::string& path,
                                       const TensorLayout& layout);

}  // namespace sage
