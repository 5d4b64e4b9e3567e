#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sage/cbn.hpp"
#include "sage/datastream.hpp"
#include "sage/nn/mlp.hpp"
#include "sage/rng.hpp"
#include "sage/topology.hpp"

namespace sage {

struct TrainConfig {
    double alpha = 0.5;  // CVAE weight in the hybrid loss; GSNN gets 1-alpha
    double beta = 1.0;   // KL regularization weight
    double learning_rate = 1e-3;
    int batch_size = 64;
    int epochs = 50;
    double dropout = 0.1;
    uint64_t seed = 1;
    int latent_dim = 8;
    int hidden_width = 64;
    bool teacher_forcing = false;  // decoder inputs from observed child outputs
    double oversample_ratio = 1.0 / 3.0;
    double mix_ratio = 0.25;  // old-pool share per batch
    double adam_beta1 = 0.9, adam_beta2 = 0.999, adam_eps = 1e-8;

    void validate() const {
        check(alpha >= 0.0 && alpha <= 1.0, "alpha must be in [0,1]");
        check(beta > 0.0, "beta must be positive");
        check(batch_size > 0 && epochs >= 0 && latent_dim > 0, "bad train config");
    }
};

// One conditional VAE unit: a service (owning the Y^s of rpcs it serves and
// the Y^c of rpcs it invokes) or a channel (owning Y^req/Y^resp, plus the
// frontend Y^c when the frontend client is external). The decoder consumes
// the unit's own metrics, its latent draw, and the outputs of the units it
// causally depends on.
struct UnitSpec {
    std::string owner;
    bool is_channel = false;
    std::vector<int> y_nodes;      // owned latency nodes, fixed order
    int x_node = -1;               // owning X^s or X^net
    int z_node = -1;               // owning Z^s or Z^net
    std::vector<int> input_nodes;  // external latency parents, fixed order
    int x_dim = 0, y_dim = 0, input_dim = 0, latent_dim = 0;
};

struct ServiceCvae {
    UnitSpec spec;
    nn::Mlp encoder;  // (x, y) -> (mu_q, logvar_q)
    nn::Mlp prior;    // x -> (mu_p, logvar_p)
    nn::Mlp decoder;  // (x, z, inputs) -> (mu_y, logvar_y)
    bool trainable = true;

    int param_count() const {
        return encoder.param_count() + prior.param_count() + decoder.param_count();
    }
    uint64_t param_hash() const;
};

struct GvaeModel {
    RpcTopology topology;
    CausalGraph graph;
    TensorLayout layout;
    Normalizer normalizer;
    TrainConfig config;
    double qos_target_us = 0;
    double qos_percentile = 99.0;

    std::vector<ServiceCvae> units;
    std::vector<int> decoder_order;            // unit indices, causes first
    std::vector<std::vector<int>> unit_levels; // decoder_order grouped by level
    std::vector<int> unit_of_node;             // node id -> owning unit or -1
    int frontend_yc_node = -1;

    int unit_index(const std::string& owner) const;
    int serial_decoder_depth() const { return static_cast<int>(unit_levels.size()); }
    uint64_t graph_hash() const { return graph.hash(); }

    // QoS tail (denormalized, microseconds) of one generated full-layout row.
    double frontend_tail_of(const std::vector<double>& row_denormalized) const;
};

// Builds the per-unit CVAEs and the decoder cascade for a merged topology.
// Hidden depth: 3 layers for nets with <= 32 inputs, 5 for wider ones.
GvaeModel build_gvae(const RpcTopology& topology, const PercentileGrid& grids,
                     const MetricSchema& schema, const TrainConfig& config,
                     double qos_target_us, double qos_percentile);

// Fixed noise for one loss evaluation; drawing it up front makes a loss
// evaluation a pure function of the parameters (finite-difference checks
// replay it exactly).
struct NoiseDraws {
    std::vector<std::vector<double>> eps_cvae, eps_gsnn;  // per unit [n, latent]
    std::vector<std::vector<double>> mask_enc, mask_prior, mask_dec_cvae, mask_dec_gsnn;
    static NoiseDraws draw(const GvaeModel& model, const std::vector<int>& unit_rows,
                           const Rng& rng);
};

struct BatchLossResult {
    double total = 0;
    double nll_cvae = 0, kl = 0, nll_gsnn = 0;
    int serial_levels = 0;  // decoder levels executed (cascade depth)
};

// Forward (and optionally backward) pass of the hybrid loss over one batch.
// Gradients accumulate into each trainable unit's MLPs. Rows not usable by a
// unit (invalid nodes after a topology change) are excluded from that unit's
// loss; exclusion is transitive through the decoder cascade.
BatchLossResult gvae_batch_loss(GvaeModel& model, const Batch& batch,
                                const NoiseDraws& noise, bool compute_grads);

// Deterministic validation loss: z at the posterior/prior means, eval-mode
// batch norm, no dropout.
double gvae_eval_loss(GvaeModel& model, const std::vector<SampleTensor>& tensors);

struct LossTrace {
    std::vector<double> epoch_total, epoch_nll_cvae, epoch_kl, epoch_nll_gsnn;
    std::vector<double> val_loss;  // empty when no validation set given
    int optimizer_steps = 0;
};

struct TrainHooks {
    // Called after every optimizer step.
    std::function<void(int step, GvaeModel& model)> after_step;
};

// Trains on interleaved old/new pools per the config. Aborts with an error
// when the loss diverges (> 10x the initial epoch loss for 3 epochs).
LossTrace train_gvae(GvaeModel& model, const std::vector<SampleTensor>& new_pool,
                     const std::vector<SampleTensor>& old_pool,
                     const std::vector<SampleTensor>* validation,
                     TrainHooks* hooks = nullptr);

// Convenience wrapper: oversamples, interleaves and trains.
LossTrace train_gvae_simple(GvaeModel& model, const std::vector<SampleTensor>& tensors,
                            const std::vector<SampleTensor>* validation = nullptr);

struct GenerateOptions {
    int n_draws = 100;
    // Full-layout (normalized) vector supplying every metric node, and the
    // clamp source for non-regenerated latency nodes.
    const std::vector<double>* values = nullptr;
    // Per-node: true = regenerate through the decoder cascade, false = clamp
    // to the observed value. Empty = regenerate everything.
    std::vector<bool> regenerate;
    // Per-unit: draw z from the posterior given the observed (x, y) instead
    // of the prior. Used for abduction on non-intervened units.
    std::vector<bool> abduct;
};

// Returns n_draws full-layout rows (normalized): metric slots copied from
// the input, latency slots generated or clamped. Deterministic given rng.
std::vector<std::vector<double>> gvae_generate(GvaeModel& model,
                                               const GenerateOptions& opts,
                                               const Rng& rng);

struct FitReport {
    double r2 = 0;
    double rmse_us = 0;
    size_t n_windows = 0;
};

// Goodness of fit of generated frontend latency vectors on held-out windows.
// R^2 pools per-grid-point sums of squares about the test means, so a
// predict-the-mean baseline scores exactly 0.
FitReport reconstruct_metrics(GvaeModel& model, const std::vector<SampleTensor>& test,
                              int n_draws, const Rng& rng);

// Closed-form diagonal-Gaussian KL, exposed for tests.
double kl_diag_gaussians(const std::vector<double>& mu_q,
                         const std::vector<double>& logvar_q,
                         const std::vector<double>& mu_p,
                         const std::vector<double>& logvar_p);

// --- checkpoint container ---------------------------------------------------
void save_checkpoint(const std::string& path, const GvaeModel& model,
                     uint64_t run_config_hash, uint64_t seed);
GvaeModel load_checkpoint(const std::string& path, uint64_t* run_config_hash = nullptr,
                          uint64_t* seed = nullptr);

}  // namespace sage
