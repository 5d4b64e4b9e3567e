#pragma once

#include <cstddef>

// Dense kernels used by the model stack. Every kernel comes in two builds:
// a plain serial reference (kern::serial) and an OpenMP version (kern::omp).
// The OpenMP loops only ever parallelize over independent output elements --
// any reduction (over batch or input dimension) stays inside a single
// iteration in fixed order -- so both versions produce bit-identical results
// for any thread count. Tests assert exact equality; bench/kernel_bench.cpp
// compares their throughput.
//
// Shapes are row-major: X is [batch, in], W is [out, in], Y is [batch, out].

namespace sage::kern {

bool parallel_enabled();
void set_parallel(bool on);
int max_threads();

#define SAGE_KERNEL_DECLS                                                          \
    void linear_forward(const double* X, const double* W, const double* b,         \
                        double* Y, int batch, int in, int out);                    \
    void linear_backward_input(const double* dY, const double* W, double* dX,      \
                               int batch, int in, int out);                        \
    void linear_backward_params(const double* dY, const double* X, double* dW,     \
                                double* db, int batch, int in, int out);           \
    void tanh_forward(const double* X, double* Y, size_t n);                       \
    void tanh_backward(const double* dY, const double* Y, double* dX, size_t n);   \
    /* Train-mode batch norm; saves per-feature mean/invstd and xhat. */           \
    void batchnorm_forward_train(const double* X, const double* gamma,             \
                                 const double* beta, double* Y, double* mean,      \
                                 double* invstd, double* xhat, int batch,          \
                                 int features, double eps);                        \
    void batchnorm_forward_eval(const double* X, const double* gamma,              \
                                const double* beta, const double* run_mean,        \
                                const double* run_var, double* Y, int batch,       \
                                int features, double eps);                         \
    void batchnorm_backward(const double* dY, const double* xhat,                  \
                            const double* gamma, const double* invstd,             \
                            double* dX, double* dgamma, double* dbeta, int batch,  \
                            int features);                                         \
    /* Inverted dropout with a pre-drawn 0/1 mask. */                              \
    void dropout_forward(const double* X, const double* mask, double* Y,           \
                         size_t n, double rate);                                   \
    void dropout_backward(const double* dY, const double* mask, double* dX,        \
                          size_t n, double rate);                                  \
    /* Diagonal-Gaussian negative log likelihood, summed over dims per row. */     \
    void gaussian_nll_forward(const double* y, const double* mu,                   \
                              const double* logvar, double* row_nll, int batch,    \
                              int dim);                                            \
    void gaussian_nll_backward(const double* y, const double* mu,                  \
                               const double* logvar, const double* row_grad,       \
                               double* dmu, double* dlogvar, int batch, int dim);  \
    /* KL(N(mu_q, var_q) || N(mu_p, var_p)), summed over dims per row. */          \
    void kl_diag_forward(const double* mu_q, const double* logvar_q,               \
                         const double* mu_p, const double* logvar_p,               \
                         double* row_kl, int batch, int dim);                      \
    void kl_diag_backward(const double* mu_q, const double* logvar_q,              \
                          const double* mu_p, const double* logvar_p,              \
                          const double* row_grad, double* dmu_q,                   \
                          double* dlogvar_q, double* dmu_p, double* dlogvar_p,     \
                          int batch, int dim);

namespace serial {
SAGE_KERNEL_DECLS
}
namespace omp {
SAGE_KERNEL_DECLS
}

// Dispatch per the global policy (set_parallel / SAGE_SERIAL_KERNELS env).
SAGE_KERNEL_DECLS

#undef SAGE_KERNEL_DECLS

// Fixed-order sum, shared by loss reductions.
double ordered_sum(const double* v, size_t n);

}  // namespace sage::kern
