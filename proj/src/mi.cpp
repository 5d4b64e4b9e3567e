#include "sage/mi.hpp"

#include <algorithm>
#include <cmath>

#include "sage/common.hpp"
#include "sage/percentile.hpp"

namespace sage {

namespace {
constexpr size_t kMinSamples = 200;

void check_inputs(const std::vector<double>& x, const std::vector<double>& y) {
    check(x.size() == y.size(), "MI inputs must have equal length");
    check(x.size() >= kMinSamples, "MI needs at least 200 samples");
}

bool is_constant(const std::vector<double>& v) {
    auto [lo, hi] = std::minmax_element(v.begin(), v.end());
    return *lo == *hi;
}

// MI from pre-binned columns.
double binned_mi(const std::vector<int>& bx, const std::vector<int>& by, int nbx,
                 int nby) {
    size_t n = bx.size();
    std::vector<double> joint(static_cast<size_t>(nbx) * nby, 0.0);
    std::vector<double> px(nbx, 0.0), py(nby, 0.0);
    double w = 1.0 / static_cast<double>(n);
    for (size_t i = 0; i < n; ++i) {
        joint[static_cast<size_t>(bx[i]) * nby + by[i]] += w;
        px[bx[i]] += w;
        py[by[i]] += w;
    }
    double mi = 0.0;
    for (int a = 0; a < nbx; ++a) {
        for (int b = 0; b < nby; ++b) {
            double p = joint[static_cast<size_t>(a) * nby + b];
            if (p > 0.0) mi += p * std::log(p / (px[a] * py[b]));
        }
    }
    return std::max(mi, 0.0);
}

double binned_cmi(const std::vector<int>& bx, const std::vector<int>& by,
                  const std::vector<int>& bz, int nbx, int nby, int nbz) {
    size_t n = bx.size();
    // CMI = sum_z p(z) * MI(x, y | z)
    double cmi = 0.0;
    for (int zb = 0; zb < nbz; ++zb) {
        std::vector<int> sx, sy;
        for (size_t i = 0; i < n; ++i) {
            if (bz[i] == zb) {
                sx.push_back(bx[i]);
                sy.push_back(by[i]);
            }
        }
        if (sx.size() < 2) continue;
        cmi += (static_cast<double>(sx.size()) / static_cast<double>(n)) *
               binned_mi(sx, sy, nbx, nby);
    }
    return cmi;
}
}  // namespace

int mi_bin_count(size_t n) {
    return static_cast<int>(std::ceil(std::cbrt(static_cast<double>(n))));
}

std::vector<int> equal_frequency_bins(const std::vector<double>& v, int bins,
                                      int* effective_bins) {
    std::vector<double> sorted(v);
    std::sort(sorted.begin(), sorted.end());
    // Bin edges at equal-count quantile positions, deduplicated so tied
    // values always share a bin.
    std::vector<double> edges;
    size_t n = sorted.size();
    for (int b = 1; b < bins; ++b) {
        double e = sorted[(n * static_cast<size_t>(b)) / bins];
        if (edges.empty() || e > edges.back()) edges.push_back(e);
    }
    // bin(v) = number of edges <= v, so every edge value starts a new bin and
    // tied values always land together.
    std::vector<int> out(n);
    for (size_t i = 0; i < n; ++i) {
        out[i] = static_cast<int>(
            std::upper_bound(edges.begin(), edges.end(), v[i]) - edges.begin());
    }
    if (effective_bins) *effective_bins = static_cast<int>(edges.size()) + 1;
    return out;
}

double mutual_information(const std::vector<double>& x, const std::vector<double>& y) {
    check_inputs(x, y);
    if (is_constant(x) || is_constant(y)) return 0.0;
    int bins = mi_bin_count(x.size());
    int nbx = 0, nby = 0;
    auto bx = equal_frequency_bins(x, bins, &nbx);
    auto by = equal_frequency_bins(y, bins, &nby);
    return binned_mi(bx, by, nbx, nby);
}

double conditional_mi(const std::vector<double>& x, const std::vector<double>& y,
                      const std::vector<double>& z) {
    check_inputs(x, y);
    check(x.size() == z.size(), "MI inputs must have equal length");
    if (is_constant(x) || is_constant(y)) return 0.0;
    int bins = mi_bin_count(x.size());
    int nbx = 0, nby = 0, nbz = 0;
    auto bx = equal_frequency_bins(x, bins, &nbx);
    auto by = equal_frequency_bins(y, bins, &nby);
    auto bz = is_constant(z) ? std::vector<int>(z.size(), 0)
                             : equal_frequency_bins(z, bins, &nbz);
    if (nbz == 0) nbz = 1;
    return binned_cmi(bx, by, bz, nbx, nby, nbz);
}

namespace {

SignificanceResult significance_common(
    const std::vector<int>& bx, const std::vector<int>& by, const std::vector<int>& bz,
    int nbx, int nby, int nbz, bool conditional, double stat, int n_permutations,
    const Rng& rng) {
    SignificanceResult res;
    res.stat = stat;
    res.null_stats.assign(n_permutations, 0.0);

    // Group indices by z-bin once; unconditional permutation uses one group.
    std::vector<std::vector<int>> groups(conditional ? nbz : 1);
    for (size_t i = 0; i < bx.size(); ++i)
        groups[conditional ? bz[i] : 0].push_back(static_cast<int>(i));

#pragma omp parallel for schedule(static)
    for (int p = 0; p < n_permutations; ++p) {
        Rng prng = rng.child("permutation", static_cast<uint64_t>(p));
        std::vector<int> perm_by(by.size());
        for (const auto& g : groups) {
            std::vector<int> shuffled(g);
            prng.shuffle(shuffled);
            for (size_t k = 0; k < g.size(); ++k) perm_by[g[k]] = by[shuffled[k]];
        }
        res.null_stats[p] = conditional ? binned_cmi(bx, perm_by, bz, nbx, nby, nbz)
                                        : binned_mi(bx, perm_by, nbx, nby);
    }
    res.threshold95 = percentile(res.null_stats, 95.0);
    res.significant = res.stat > res.threshold95;
    return res;
}

}  // namespace

SignificanceResult mi_significance(const std::vector<double>& x,
                                   const std::vector<double>& y, int n_permutations,
                                   const Rng& rng) {
    check_inputs(x, y);
    check(n_permutations >= 20, "need at least 20 permutations");
    if (is_constant(x) || is_constant(y)) {
        SignificanceResult r;
        r.null_stats.assign(n_permutations, 0.0);
        return r;
    }
    int bins = mi_bin_count(x.size());
    int nbx = 0, nby = 0;
    auto bx = equal_frequency_bins(x, bins, &nbx);
    auto by = equal_frequency_bins(y, bins, &nby);
    double stat = binned_mi(bx, by, nbx, nby);
    return significance_common(bx, by, {}, nbx, nby, 1, false, stat, n_permutations, rng);
}

SignificanceResult cmi_significance(const std::vector<double>& x,
                                    const std::vector<double>& y,
                                    const std::vector<double>& z, int n_permutations,
                                    const Rng& rng) {
    check_inputs(x, y);
    check(x.size() == z.size(), "MI inputs must have equal length");
    check(n_permutations >= 20, "need at least 20 permutations");
    if (is_constant(x) || is_constant(y)) {
        SignificanceResult r;
        r.null_stats.assign(n_permutations, 0.0);
        return r;
    }
    int bins = mi_bin_count(x.size());
    int nbx = 0, nby = 0, nbz = 0;
    auto bx = equal_frequency_bins(x, bins, &nbx);
    auto by = equal_frequency_bins(y, bins, &nby);
    auto bz = is_constant(z) ? std::vector<int>(z.size(), 0)
                             : equal_frequency_bins(z, bins, &nbz);
    if (nbz == 0) nbz = 1;
    double stat = binned_cmi(bx, by, bz, nbx, nby, nbz);
    return significance_common(bx, by, bz, nbx, nby, nbz, true, stat, n_permutations, rng);
}

}  // namespace sage
