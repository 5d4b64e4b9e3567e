#include "sage/nn/kernels.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace sage::kern {

namespace {
std::atomic<bool> g_parallel{
#ifdef _OPENMP
    true
#else
    false
#endif
};
bool env_forced_serial() {
    static bool forced = std::getenv("SAGE_SERIAL_KERNELS") != nullptr;
    return forced;
}
constexpr double kLog2Pi = 1.8378770664093453;  // log(2*pi)
}  // namespace

bool parallel_enabled() { return g_parallel.load() && !env_forced_serial(); }
void set_parallel(bool on) { g_parallel.store(on); }

int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

double ordered_sum(const double* v, size_t n) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) s += v[i];
    return s;
}

// ---------------------------------------------------------------------------
// Serial reference implementations.
// ---------------------------------------------------------------------------
namespace serial {

void linear_forward(const double* X, const double* W, const double* b, double* Y,
                    int batch, int in, int out) {
    for (int r = 0; r < batch; ++r) {
        for (int o = 0; o < out; ++o) {
            double acc = b[o];
            const double* x = X + static_cast<size_t>(r) * in;
            const double* w = W + static_cast<size_t>(o) * in;
            for (int i = 0; i < in; ++i) acc += w[i] * x[i];
            Y[static_cast<size_t>(r) * out + o] = acc;
        }
    }
}

void linear_backward_input(const double* dY, const double* W, double* dX, int batch,
                           int in, int out) {
    for (int r = 0; r < batch; ++r) {
        for (int i = 0; i < in; ++i) {
            double acc = 0.0;
            const double* dy = dY + static_cast<size_t>(r) * out;
            for (int o = 0; o < out; ++o) acc += dy[o] * W[static_cast<size_t>(o) * in + i];
            dX[static_cast<size_t>(r) * in + i] = acc;
        }
    }
}

void linear_backward_params(const double* dY, const double* X, double* dW, double* db,
                            int batch, int in, int out) {
    for (int o = 0; o < out; ++o) {
        double acc_b = 0.0;
        for (int r = 0; r < batch; ++r) acc_b += dY[static_cast<size_t>(r) * out + o];
        db[o] = acc_b;
        for (int i = 0; i < in; ++i) {
            double acc = 0.0;
            for (int r = 0; r < batch; ++r)
                acc += dY[static_cast<size_t>(r) * out + o] * X[static_cast<size_t>(r) * in + i];
            dW[static_cast<size_t>(o) * in + i] = acc;
        }
    }
}

void tanh_forward(const double* X, double* Y, size_t n) {
    for (size_t i = 0; i < n; ++i) Y[i] = std::tanh(X[i]);
}

void tanh_backward(const double* dY, const double* Y, double* dX, size_t n) {
    for (size_t i = 0; i < n; ++i) dX[i] = dY[i] * (1.0 - Y[i] * Y[i]);
}

void batchnorm_forward_train(const double* X, const double* gamma, const double* beta,
                             double* Y, double* mean, double* invstd, double* xhat,
                             int batch, int features, double eps) {
    for (int j = 0; j < features; ++j) {
        double m = 0.0;
        for (int r = 0; r < batch; ++r) m += X[static_cast<size_t>(r) * features + j];
        m /= batch;
        double v = 0.0;
        for (int r = 0; r < batch; ++r) {
            double d = X[static_cast<size_t>(r) * features + j] - m;
            v += d * d;
        }
        v /= batch;
        double is = 1.0 / std::sqrt(v + eps);
        mean[j] = m;
        invstd[j] = is;
        for (int r = 0; r < batch; ++r) {
            size_t idx = static_cast<size_t>(r) * features + j;
            double xh = (X[idx] - m) * is;
            xhat[idx] = xh;
            Y[idx] = gamma[j] * xh + beta[j];
        }
    }
}

void batchnorm_forward_eval(const double* X, const double* gamma, const double* beta,
                            const double* run_mean, const double* run_var, double* Y,
                            int batch, int features, double eps) {
    for (int j = 0; j < features; ++j) {
        double is = 1.0 / std::sqrt(run_var[j] + eps);
        for (int r = 0; r < batch; ++r) {
            size_t idx = static_cast<size_t>(r) * features + j;
            Y[idx] = gamma[j] * (X[idx] - run_mean[j]) * is + beta[j];
        }
    }
}

void batchnorm_backward(const double* dY, const double* xhat, const double* gamma,
                        const double* invstd, double* dX, double* dgamma, double* dbeta,
                        int batch, int features) {
    for (int j = 0; j < features; ++j) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int r = 0; r < batch; ++r) {
            size_t idx = static_cast<size_t>(r) * features + j;
            sum_dy += dY[idx];
            sum_dy_xhat += dY[idx] * xhat[idx];
        }
        dbeta[j] = sum_dy;
        dgamma[j] = sum_dy_xhat;
        double scale = gamma[j] * invstd[j] / batch;
        for (int r = 0; r < batch; ++r) {
            size_t idx = static_cast<size_t>(r) * features + j;
            dX[idx] = scale * (batch * dY[idx] - sum_dy - xhat[idx] * sum_dy_xhat);
        }
    }
}

void dropout_forward(const double* X, const double* mask, double* Y, size_t n,
                     double rate) {
    double keep = 1.0 - rate;
    for (size_t i = 0; i < n; ++i) Y[i] = X[i] * mask[i] / keep;
}

void dropout_backward(const double* dY, const double* mask, double* dX, size_t n,
                      double rate) {
    double keep = 1.0 - rate;
    for (size_t i = 0; i < n; ++i) dX[i] = dY[i] * mask[i] / keep;
}

void gaussian_nll_forward(const double* y, const double* mu, const double* logvar,
                          double* row_nll, int batch, int dim) {
    for (int r = 0; r < batch; ++r) {
        double acc = 0.0;
        for (int d = 0; d < dim; ++d) {
            size_t idx = static_cast<size_t>(r) * dim + d;
            double diff = y[idx] - mu[idx];
            acc += 0.5 * (kLog2Pi + logvar[idx] + diff * diff * std::exp(-logvar[idx]));
        }
        row_nll[r] = acc;
    }
}

void gaussian_nll_backward(const double* y, const double* mu, const double* logvar,
                           const double* row_grad, double* dmu, double* dlogvar,
                           int batch, int dim) {
    for (int r = 0; r < batch; ++r) {
        double g = row_grad[r];
        for (int d = 0; d < dim; ++d) {
            size_t idx = static_cast<size_t>(r) * dim + d;
            double inv_var = std::exp(-logvar[idx]);
            double diff = mu[idx] - y[idx];
            dmu[idx] = g * diff * inv_var;
            dlogvar[idx] = g * 0.5 * (1.0 - diff * diff * inv_var);
        }
    }
}

void kl_diag_forward(const double* mu_q, const double* logvar_q, const double* mu_p,
                     const double* logvar_p, double* row_kl, int batch, int dim) {
    for (int r = 0; r < batch; ++r) {
        double acc = 0.0;
        for (int d = 0; d < dim; ++d) {
            size_t idx = static_cast<size_t>(r) * dim + d;
            double dmu = mu_q[idx] - mu_p[idx];
            acc += 0.5 * (logvar_p[idx] - logvar_q[idx] +
                          std::exp(logvar_q[idx] - logvar_p[idx]) +
                          dmu * dmu * std::exp(-logvar_p[idx]) - 1.0);
        }
        row_kl[r] = acc;
    }
}

void kl_diag_backward(const double* mu_q, const double* logvar_q, const double* mu_p,
                      const double* logvar_p, const double* row_grad, double* dmu_q,
                      double* dlogvar_q, double* dmu_p, double* dlogvar_p, int batch,
                      int dim) {
    for (int r = 0; r < batch; ++r) {
        double g = row_grad[r];
        for (int d = 0; d < dim; ++d) {
            size_t idx = static_cast<size_t>(r) * dim + d;
            double dmu = mu_q[idx] - mu_p[idx];
            double inv_var_p = std::exp(-logvar_p[idx]);
            double ratio = std::exp(logvar_q[idx] - logvar_p[idx]);
            dmu_q[idx] = g * dmu * inv_var_p;
            dmu_p[idx] = -g * dmu * inv_var_p;
            dlogvar_q[idx] = g * 0.5 * (ratio - 1.0);
            dlogvar_p[idx] = g * 0.5 * (1.0 - ratio - dmu * dmu * inv_var_p);
        }
    }
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP implementations. Parallel loops run only over independent output
// elements; reductions stay serial inside one iteration, so results are
// bit-identical to the serial reference for any thread count.
// ---------------------------------------------------------------------------
namespace omp {

void linear_forward(const double* X, const double* W, const double* b, double* Y,
                    int batch, int in, int out) {
#pragma omp parallel for collapse(2) if (static_cast<long>(batch) * out * in > 8192)
    for (int r = 0; r < batch; ++r) {
        for (int o = 0; o < out; ++o) {
            double acc = b[o];
            const double* x = X + static_cast<size_t>(r) * in;
            const double* w = W + static_cast<size_t>(o) * in;
            for (int i = 0; i < in; ++i) acc += w[i] * x[i];
            Y[static_cast<size_t>(r) * out + o] = acc;
        }
    }
}

void linear_backward_input(const double* dY, const double* W, double* dX, int batch,
                           int in, int out) {
#pragma omp parallel for collapse(2) if (static_cast<long>(batch) * out * in > 8192)
    for (int r = 0; r < batch; ++r) {
        for (int i = 0; i < in; ++i) {
            double acc = 0.0;
            const double* dy = dY + static_cast<size_t>(r) * out;
            for (int o = 0; o < out; ++o) acc += dy[o] * W[static_cast<size_t>(o) * in + i];
            dX[static_cast<size_t>(r) * in + i] = acc;
        }
    }
}

void linear_backward_params(const double* dY, const double* X, double* dW, double* db,
                            int batch, int in, int out) {
#pragma omp parallel for if (static_cast<long>(batch) * out * in > 8192)
    for (int o = 0; o < out; ++o) {
        double acc_b = 0.0;
        for (int r = 0; r < batch; ++r) acc_b += dY[static_cast<size_t>(r) * out + o];
        db[o] = acc_b;
        for (int i = 0; i < in; ++i) {
            double acc = 0.0;
            for (int r = 0; r < batch; ++r)
                acc += dY[static_cast<size_t>(r) * out + o] * X[static_cast<size_t>(r) * in + i];
            dW[static_cast<size_t>(o) * in + i] = acc;
        }
    }
}

void tanh_forward(const double* X, double* Y, size_t n) {
#pragma omp parallel for if (n > 4096)
    for (long i = 0; i < static_cast<long>(n); ++i) Y[i] = std::tanh(X[i]);
}

void tanh_backward(const double* dY, const double* Y, double* dX, size_t n) {
#pragma omp parallel for if (n > 8192)
    for (long i = 0; i < static_cast<long>(n); ++i) dX[i] = dY[i] * (1.0 - Y[i] * Y[i]);
}

void batchnorm_forward_train(const double* X, const double* gamma, const double* beta,
                             double* Y, double* mean, double* invstd, double* xhat,
                             int batch, int features, double eps) {
#pragma omp parallel for if (static_cast<long>(batch) * features > 4096)
    for (int j = 0; j < features; ++j) {
        double m = 0.0;
        for (int r = 0; r < batch; ++r) m += X[static_cast<size_t>(r) * features + j];
        m /= batch;
        double v = 0.0;
        for (int r = 0; r < batch; ++r) {
            double d = X[static_cast<size_t>(r) * features + j] - m;
            v += d * d;
        }
        v /= batch;
        double is = 1.0 / std::sqrt(v + eps);
        mean[j] = m;
        invstd[j] = is;
        for (int r = 0; r < batch; ++r) {
            size_t idx = static_cast<size_t>(r) * features + j;
            double xh = (X[idx] - m) * is;
            xhat[idx] = xh;
            Y[idx] = gamma[j] * xh + beta[j];
        }
    }
}

void batchnorm_forward_eval(const double* X, const double* gamma, const double* beta,
                            const double* run_mean, const double* run_var, double* Y,
                            int batch, int features, double eps) {
#pragma omp parallel for if (static_cast<long>(batch) * features > 8192)
    for (int j = 0; j < features; ++j) {
        double is = 1.0 / std::sqrt(run_var[j] + eps);
        for (int r = 0; r < batch; ++r) {
            size_t idx = static_cast<size_t>(r) * features + j;
            Y[idx] = gamma[j] * (X[idx] - run_mean[j]) * is + beta[j];
        }
    }
}

void batchnorm_backward(const double* dY, const double* xhat, const double* gamma,
                        const double* invstd, double* dX, double* dgamma, double* dbeta,
                        int batch, int features) {
#pragma omp parallel for if (static_cast<long>(batch) * features > 4096)
    for (int j = 0; j < features; ++j) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int r = 0; r < batch; ++r) {
            size_t idx = static_cast<size_t>(r) * features + j;
            sum_dy += dY[idx];
            sum_dy_xhat += dY[idx] * xhat[idx];
        }
        dbeta[j] = sum_dy;
        dgamma[j] = sum_dy_xhat;
        double scale = gamma[j] * invstd[j] / batch;
        for (int r = 0; r < batch; ++r) {
            size_t idx = static_cast<size_t>(r) * features + j;
            dX[idx] = scale * (batch * dY[idx] - sum_dy - xhat[idx] * sum_dy_xhat);
        }
    }
}

void dropout_forward(const double* X, const double* mask, double* Y, size_t n,
                     double rate) {
    double keep = 1.0 - rate;
#pragma omp parallel for if (n > 8192)
    for (long i = 0; i < static_cast<long>(n); ++i) Y[i] = X[i] * mask[i] / keep;
}

void dropout_backward(const double* dY, const double* mask, double* dX, size_t n,
                      double rate) {
    double keep = 1.0 - rate;
#pragma omp parallel for if (n > 8192)
    for (long i = 0; i < static_cast<long>(n); ++i) dX[i] = dY[i] * mask[i] / keep;
}

void gaussian_nll_forward(const double* y, const double* mu, const double* logvar,
                          double* row_nll, int batch, int dim) {
#pragma omp parallel for if (static_cast<long>(batch) * dim > 4096)
    for (int r = 0; r < batch; ++r) {
        double acc = 0.0;
        for (int d = 0; d < dim; ++d) {
            size_t idx = static_cast<size_t>(r) * dim + d;
            double diff = y[idx] - mu[idx];
            acc += 0.5 * (kLog2Pi + logvar[idx] + diff * diff * std::exp(-logvar[idx]));
        }
        row_nll[r] = acc;
    }
}

void gaussian_nll_backward(const double* y, const double* mu, const double* logvar,
                           const double* row_grad, double* dmu, double* dlogvar,
                           int batch, int dim) {
#pragma omp parallel for if (static_cast<long>(batch) * dim > 4096)
    for (int r = 0; r < batch; ++r) {
        double g = row_grad[r];
        for (int d = 0; d < dim; ++d) {
            size_t idx = static_cast<size_t>(r) * dim + d;
            double inv_var = std::exp(-logvar[idx]);
            double diff = mu[idx] - y[idx];
            dmu[idx] = g * diff * inv_var;
            dlogvar[idx] = g * 0.5 * (1.0 - diff * diff * inv_var);
        }
    }
}

void kl_diag_forward(const double* mu_q, const double* logvar_q, const double* mu_p,
                     const double* logvar_p, double* row_kl, int batch, int dim) {
#pragma omp parallel for if (static_cast<long>(batch) * dim > 4096)
    for (int r = 0; r < batch; ++r) {
        double acc = 0.0;
        for (int d = 0; d < dim; ++d) {
            size_t idx = static_cast<size_t>(r) * dim + d;
            double dmu = mu_q[idx] - mu_p[idx];
            acc += 0.5 * (logvar_p[idx] - logvar_q[idx] +
                          std::exp(logvar_q[idx] - logvar_p[idx]) +
                          dmu * dmu * std::exp(-logvar_p[idx]) - 1.0);
        }
        row_kl[r] = acc;
    }
}

void kl_diag_backward(const double* mu_q, const double* logvar_q, const double* mu_p,
                      const double* logvar_p, const double* row_grad, double* dmu_q,
                      double* dlogvar_q, double* dmu_p, double* dlogvar_p, int batch,
                      int dim) {
#pragma omp parallel for if (static_cast<long>(batch) * dim > 4096)
    for (int r = 0; r < batch; ++r) {
        double g = row_grad[r];
        for (int d = 0; d < dim; ++d) {
            size_t idx = static_cast<size_t>(r) * dim + d;
            double dmu = mu_q[idx] - mu_p[idx];
            double inv_var_p = std::exp(-logvar_p[idx]);
            double ratio = std::exp(logvar_q[idx] - logvar_p[idx]);
            dmu_q[idx] = g * dmu * inv_var_p;
            dmu_p[idx] = -g * dmu * inv_var_p;
            dlogvar_q[idx] = g * 0.5 * (ratio - 1.0);
            dlogvar_p[idx] = g * 0.5 * (1.0 - ratio - dmu * dmu * inv_var_p);
        }
    }
}

}  // namespace omp

// ---------------------------------------------------------------------------
// Dispatch.
// ---------------------------------------------------------------------------
#define SAGE_DISPATCH(fn, ...)            \
    do {                                  \
        if (parallel_enabled())           \
            omp::fn(__VA_ARGS__);         \
        else                              \
            serial::fn(__VA_ARGS__);      \
    } while (0)

void linear_forward(const double* X, const double* W, const double* b, double* Y,
                    int batch, int in, int out) {
    SAGE_DISPATCH(linear_forward, X, W, b, Y, batch, in, out);
}
void linear_backward_input(const double* dY, const double* W, double* dX, int batch,
                           int in, int out) {
    SAGE_DISPATCH(linear_backward_input, dY, W, dX, batch, in, out);
}
void linear_backward_params(const double* dY, const double* X, double* dW, double* db,
                            int batch, int in, int out) {
    SAGE_DISPATCH(linear_backward_params, dY, X, dW, db, batch, in, out);
}
void tanh_forward(const double* X, double* Y, size_t n) {
    SAGE_DISPATCH(tanh_forward, X, Y, n);
}
void tanh_backward(const double* dY, const double* Y, double* dX, size_t n) {
    SAGE_DISPATCH(tanh_backward, dY, Y, dX, n);
}
void batchnorm_forward_train(const double* X, const double* gamma, const double* beta,
                             double* Y, double* mean, double* invstd, double* xhat,
                             int batch, int features, double eps) {
    SAGE_DISPATCH(batchnorm_forward_train, X, gamma, beta, Y, mean, invstd, xhat, batch,
                  features, eps);
}
void batchnorm_forward_eval(const double* X, const double* gamma, const double* beta,
                            const double* run_mean, const double* run_var, double* Y,
                            int batch, int features, double eps) {
    SAGE_DISPATCH(batchnorm_forward_eval, X, gamma, beta, run_mean, run_var, Y, batch,
                  features, eps);
}
void batchnorm_backward(const double* dY, const double* xhat, const double* gamma,
                        const double* invstd, double* dX, double* dgamma, double* dbeta,
                        int batch, int features) {
    SAGE_DISPATCH(batchnorm_backward, dY, xhat, gamma, invstd, dX, dgamma, dbeta, batch,
                  features);
}
void dropout_forward(const double* X, const double* mask, double* Y, size_t n,
                     double rate) {
    SAGE_DISPATCH(dropout_forward, X, mask, Y, n, rate);
}
void dropout_backward(const double* dY, const double* mask, double* dX, size_t n,
                      double rate) {
    SAGE_DISPATCH(dropout_backward, dY, mask, dX, n, rate);
}
void gaussian_nll_forward(const double* y, const double* mu, const double* logvar,
                          double* row_nll, int batch, int dim) {
    SAGE_DISPATCH(gaussian_nll_forward, y, mu, logvar, row_nll, batch, dim);
}
void gaussian_nll_backward(const double* y, const double* mu, const double* logvar,
                           const double* row_grad, double* dmu, double* dlogvar,
                           int batch, int dim) {
    SAGE_DISPATCH(gaussian_nll_backward, y, mu, logvar, row_grad, dmu, dlogvar, batch, dim);
}
void kl_diag_forward(const double* mu_q, const double* logvar_q, const double* mu_p,
                     const double* logvar_p, double* row_kl, int batch, int dim) {
    SAGE_DISPATCH(kl_diag_forward, mu_q, logvar_q, mu_p, logvar_p, row_kl, batch, dim);
}
void kl_diag_backward(const double* mu_q, const double* logvar_q, const double* mu_p,
                      const double* logvar_p, const double* row_grad, double* dmu_q,
                      double* dlogvar_q, double* dmu_p, double* dlogvar_p, int batch,
                      int dim) {
    SAGE_DISPATCH(kl_diag_backward, mu_q, logvar_q, mu_p, logvar_p, row_grad, dmu_q,
                  dlogvar_q, dmu_p, dlogvar_p, batch, dim);
}

#undef SAGE_DISPATCH

}  // namespace sage::kern
