#include "sage/nn/mlp.hpp"

#include <cmath>

#include "sage/nn/kernels.hpp"

namespace sage::nn {

Mlp::Mlp(const MlpConfig& cfg) : cfg_(cfg) {
    check(cfg.in_dim >= 0 && cfg.out_dim > 0, "bad MLP dims");
    check(cfg.layers >= 1, "MLP needs at least one hidden layer");
    n_lin_ = cfg.layers + 1;
    n_bn_ = cfg.batchnorm ? cfg.layers - 1 : 0;

    int off = 0;
    for (int i = 0; i < n_lin_; ++i) {
        w_off_.push_back(off);
        off += lin_out_dim(i) * lin_in_dim(i);
        b_off_.push_back(off);
        off += lin_out_dim(i);
    }
    for (int j = 0; j < n_bn_; ++j) {
        gamma_off_.push_back(off);
        off += cfg.hidden;
        beta_off_.push_back(off);
        off += cfg.hidden;
    }
    params_.assign(off, 0.0);
    grads_.assign(off, 0.0);
    run_mean_.assign(static_cast<size_t>(n_bn_) * cfg.hidden, 0.0);
    run_var_.assign(static_cast<size_t>(n_bn_) * cfg.hidden, 1.0);
}

int Mlp::lin_in_dim(int i) const { return i == 0 ? cfg_.in_dim : cfg_.hidden; }
int Mlp::lin_out_dim(int i) const { return i == n_lin_ - 1 ? cfg_.out_dim : cfg_.hidden; }

void Mlp::init_params(Rng& rng) {
    for (int i = 0; i < n_lin_; ++i) {
        int in = lin_in_dim(i), out = lin_out_dim(i);
        double std = 1.0 / std::sqrt(std::max(in, 1));
        for (int k = 0; k < out * in; ++k) params_[w_off(i) + k] = rng.normal(0.0, std);
        for (int k = 0; k < out; ++k) params_[b_off(i) + k] = 0.0;
    }
    for (int j = 0; j < n_bn_; ++j) {
        for (int k = 0; k < cfg_.hidden; ++k) {
            params_[gamma_off(j) + k] = 1.0;
            params_[beta_off(j) + k] = 0.0;
        }
    }
    std::fill(run_mean_.begin(), run_mean_.end(), 0.0);
    std::fill(run_var_.begin(), run_var_.end(), 1.0);
}

void Mlp::zero_grads() { std::fill(grads_.begin(), grads_.end(), 0.0); }

void Mlp::forward(const double* X, int batch, bool training, const double* dropout_mask,
                  Cache* cache, double* Y) {
    check(batch > 0, "MLP forward with empty batch");
    int H = cfg_.layers, hid = cfg_.hidden;
    Cache local;
    Cache& c = cache ? *cache : local;
    c.batch = batch;
    c.training = training;
    c.used_dropout = false;
    c.input.assign(X, X + static_cast<size_t>(batch) * cfg_.in_dim);
    c.lin_in.assign(n_lin_, {});
    c.act.assign(H, {});
    c.bn_xhat.assign(n_bn_, {});
    c.bn_mean.assign(n_bn_, {});
    c.bn_invstd.assign(n_bn_, {});

    std::vector<double> cur(c.input);
    for (int i = 0; i < H; ++i) {
        c.lin_in[i] = cur;
        std::vector<double> t(static_cast<size_t>(batch) * hid);
        kern::linear_forward(cur.data(), &params_[w_off(i)], &params_[b_off(i)], t.data(),
                             batch, lin_in_dim(i), hid);
        c.act[i].resize(t.size());
        kern::tanh_forward(t.data(), c.act[i].data(), t.size());
        cur = c.act[i];
        if (i < n_bn_) {
            std::vector<double> bn_out(cur.size());
            c.bn_xhat[i].resize(cur.size());
            c.bn_mean[i].resize(hid);
            c.bn_invstd[i].resize(hid);
            if (training) {
                kern::batchnorm_forward_train(cur.data(), &params_[gamma_off(i)],
                                              &params_[beta_off(i)], bn_out.data(),
                                              c.bn_mean[i].data(), c.bn_invstd[i].data(),
                                              c.bn_xhat[i].data(), batch, hid, kBnEps);
                if (update_running_) {
                    for (int k = 0; k < hid; ++k) {
                        double var = 1.0 / (c.bn_invstd[i][k] * c.bn_invstd[i][k]) - kBnEps;
                        run_mean_[static_cast<size_t>(i) * hid + k] =
                            kBnMomentum * run_mean_[static_cast<size_t>(i) * hid + k] +
                            (1.0 - kBnMomentum) * c.bn_mean[i][k];
                        run_var_[static_cast<size_t>(i) * hid + k] =
                            kBnMomentum * run_var_[static_cast<size_t>(i) * hid + k] +
                            (1.0 - kBnMomentum) * var;
                    }
                }
            } else {
                kern::batchnorm_forward_eval(cur.data(), &params_[gamma_off(i)],
                                             &params_[beta_off(i)],
                                             &run_mean_[static_cast<size_t>(i) * hid],
                                             &run_var_[static_cast<size_t>(i) * hid],
                                             bn_out.data(), batch, hid, kBnEps);
            }
            cur = std::move(bn_out);
        }
    }

    if (training && cfg_.dropout > 0.0 && dropout_mask != nullptr) {
        c.used_dropout = true;
        c.dropout_mask.assign(dropout_mask,
                              dropout_mask + static_cast<size_t>(batch) * hid);
        std::vector<double> dropped(cur.size());
        kern::dropout_forward(cur.data(), c.dropout_mask.data(), dropped.data(),
                              cur.size(), cfg_.dropout);
        cur = std::move(dropped);
    }

    c.lin_in[n_lin_ - 1] = cur;
    kern::linear_forward(cur.data(), &params_[w_off(n_lin_ - 1)],
                         &params_[b_off(n_lin_ - 1)], Y, batch, hid, cfg_.out_dim);
}

void Mlp::forward_eval(const double* X, int batch, double* Y) {
    forward(X, batch, /*training=*/false, nullptr, nullptr, Y);
}

void Mlp::backward(const Cache& c, const double* dY, double* dX) {
    int H = cfg_.layers, hid = cfg_.hidden, batch = c.batch;

    std::vector<double> dW, db;
    auto accumulate_linear = [&](int i, const double* dOut, const std::vector<double>& in,
                                 double* dIn) {
        int id = lin_in_dim(i), od = lin_out_dim(i);
        dW.assign(static_cast<size_t>(od) * id, 0.0);
        db.assign(od, 0.0);
        kern::linear_backward_params(dOut, in.data(), dW.data(), db.data(), batch, id, od);
        for (size_t k = 0; k < dW.size(); ++k) grads_[w_off(i) + k] += dW[k];
        for (int k = 0; k < od; ++k) grads_[b_off(i) + k] += db[k];
        if (dIn) kern::linear_backward_input(dOut, &params_[w_off(i)], dIn, batch, id, od);
    };

    // Output head.
    std::vector<double> d_cur(static_cast<size_t>(batch) * hid);
    accumulate_linear(n_lin_ - 1, dY, c.lin_in[n_lin_ - 1], d_cur.data());

    if (c.used_dropout) {
        std::vector<double> d(static_cast<size_t>(batch) * hid);
        kern::dropout_backward(d_cur.data(), c.dropout_mask.data(), d.data(), d.size(),
                               cfg_.dropout);
        d_cur = std::move(d);
    }

    for (int i = H - 1; i >= 0; --i) {
        if (i < n_bn_) {
            check(c.training, "batchnorm backward requires a training-mode cache");
            std::vector<double> d_act(static_cast<size_t>(batch) * hid);
            std::vector<double> dgamma(hid, 0.0), dbeta(hid, 0.0);
            kern::batchnorm_backward(d_cur.data(), c.bn_xhat[i].data(),
                                     &params_[gamma_off(i)], c.bn_invstd[i].data(),
                                     d_act.data(), dgamma.data(), dbeta.data(), batch, hid);
            for (int k = 0; k < hid; ++k) {
                grads_[gamma_off(i) + k] += dgamma[k];
                grads_[beta_off(i) + k] += dbeta[k];
            }
            d_cur = std::move(d_act);
        }
        std::vector<double> d_pre(static_cast<size_t>(batch) * hid);
        kern::tanh_backward(d_cur.data(), c.act[i].data(), d_pre.data(), d_pre.size());

        if (i == 0) {
            accumulate_linear(0, d_pre.data(), c.lin_in[0], dX);
        } else {
            std::vector<double> d_prev(static_cast<size_t>(batch) * hid);
            accumulate_linear(i, d_pre.data(), c.lin_in[i], d_prev.data());
            d_cur = std::move(d_prev);
        }
    }
}

void AdamState::step(std::vector<double>& params, const std::vector<double>& grads,
                     double lr) {
    check(m.size() == params.size() && grads.size() == params.size(),
          "Adam state size mismatch");
    ++t;
    double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (size_t i = 0; i < params.size(); ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
        v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
        double mhat = m[i] / bc1;
        double vhat = v[i] / bc2;
        params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

}  // namespace sage::nn
