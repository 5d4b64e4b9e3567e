#pragma once

#include <vector>

#include "sage/rng.hpp"

namespace sage {

// Mutual information estimators over equal-frequency bins with ceil(n^(1/3))
// bins per variable, in nats. Minimum sample length 200. A constant input
// vector has MI 0 by definition.
double mutual_information(const std::vector<double>& x, const std::vector<double>& y);
double conditional_mi(const std::vector<double>& x, const std::vector<double>& y,
                      const std::vector<double>& z);

int mi_bin_count(size_t n);

// Equal-frequency bin assignment; ties share a bin, so the effective bin
// count can be smaller than requested.
std::vector<int> equal_frequency_bins(const std::vector<double>& v, int bins,
                                      int* effective_bins = nullptr);

struct SignificanceResult {
    double stat = 0;         // MI or CMI estimate, nats
    double threshold95 = 0;  // 95th percentile of the permutation null
    bool significant = false;
    std::vector<double> null_stats;
};

// Permutation null for MI: y permuted wholesale. Deterministic given rng;
// permutations run in parallel on independent child streams.
SignificanceResult mi_significance(const std::vector<double>& x,
                                   const std::vector<double>& y, int n_permutations,
                                   const Rng& rng);

// Permutation null for CMI: y permuted within each z-bin, preserving the
// conditional structure under the null.
SignificanceResult cmi_significance(const std::vector<double>& x,
                                    const std::vector<double>& y,
                                    const std::vector<double>& z, int n_permutations,
                                    const Rng& rng);

}  // namespace sage
