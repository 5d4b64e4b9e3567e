#pragma once

#include <vector>

#include "sage/common.hpp"
#include "sage/rng.hpp"

namespace sage::nn {

struct MlpConfig {
    int in_dim = 0;
    int out_dim = 0;
    int hidden = 64;
    int layers = 3;  // hidden layers; picked by input width at unit build time
    double dropout = 0.1;
    bool batchnorm = true;
};

// Plain fully-connected net: linear+tanh hidden stack, batch normalization
// between every two hidden layers, one dropout after the last hidden layer,
// linear output head. Parameters live in one flat vector (optimizer- and
// checkpoint-friendly); gradients accumulate into a parallel flat vector.
class Mlp {
public:
    Mlp() = default;
    explicit Mlp(const MlpConfig& cfg);

    void init_params(Rng& rng);

    const MlpConfig& config() const { return cfg_; }
    int param_count() const { return static_cast<int>(params_.size()); }
    std::vector<double>& params() { return params_; }
    const std::vector<double>& params() const { return params_; }
    std::vector<double>& grads() { return grads_; }
    void zero_grads();

    std::vector<double>& running_mean() { return run_mean_; }
    std::vector<double>& running_var() { return run_var_; }
    const std::vector<double>& running_mean() const { return run_mean_; }
    const std::vector<double>& running_var() const { return run_var_; }

    int bn_layers() const { return n_bn_; }

    struct Cache {
        int batch = 0;
        bool training = false;
        bool used_dropout = false;
        std::vector<double> input;                  // copy of X
        std::vector<std::vector<double>> lin_in;    // input to each linear
        std::vector<std::vector<double>> act;       // tanh output per hidden
        std::vector<std::vector<double>> bn_xhat;   // per BN layer
        std::vector<std::vector<double>> bn_mean;
        std::vector<std::vector<double>> bn_invstd;
        std::vector<double> dropout_mask;
    };

    // Y must hold batch*out_dim. Training mode uses batch statistics and
    // updates running stats; eval mode uses running stats and skips dropout.
    // dropout_mask (batch*hidden 0/1 values) is drawn by the caller so a
    // loss evaluation can be replayed exactly (finite-difference checks).
    void forward(const double* X, int batch, bool training, const double* dropout_mask,
                 Cache* cache, double* Y);

    // Eval-mode forward without cache.
    void forward_eval(const double* X, int batch, double* Y);

    // Accumulates parameter gradients; writes input gradient to dX (may be
    // null). update_stats was applied in forward; backward is read-only on
    // running stats.
    void backward(const Cache& cache, const double* dY, double* dX);

    // Enable/disable running-stat updates during training-mode forward
    // (disabled for frozen units during partial retraining).
    void set_update_running_stats(bool on) { update_running_ = on; }

private:
    int lin_in_dim(int i) const;
    int lin_out_dim(int i) const;
    // offsets into params_ for linear i and bn j
    int w_off(int i) const { return w_off_[i]; }
    int b_off(int i) const { return b_off_[i]; }
    int gamma_off(int j) const { return gamma_off_[j]; }
    int beta_off(int j) const { return beta_off_[j]; }

    MlpConfig cfg_;
    int n_lin_ = 0;
    int n_bn_ = 0;
    std::vector<int> w_off_, b_off_, gamma_off_, beta_off_;
    std::vector<double> params_, grads_;
    std::vector<double> run_mean_, run_var_;
    bool update_running_ = true;
    static constexpr double kBnEps = 1e-5;
    static constexpr double kBnMomentum = 0.9;
};

// Adam with bias correction; one instance per parameter vector.
struct AdamState {
    std::vector<double> m, v;
    int64_t t = 0;
    double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

    void init(size_t n) {
        m.assign(n, 0.0);
        v.assign(n, 0.0);
        t = 0;
    }
    void step(std::vector<double>& params, const std::vector<double>& grads, double lr);
};

}  // namespace sage::nn
