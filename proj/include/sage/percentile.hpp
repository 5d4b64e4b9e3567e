#pragma once

#include <algorithm>
#include <vector>

#include "sage/common.hpp"

namespace sage {

// Linear-interpolation empirical quantile at percentile p in [0, 100].
// Samples are sorted internally; for repeated grids use percentile_vector.
double percentile(std::vector<double> samples, double p);

// Quantile on an already-sorted sample vector.
double percentile_sorted(const std::vector<double>& sorted, double p);

// Evaluate a whole percentile grid against one sample set (one sort).
std::vector<double> percentile_vector(std::vector<double> samples,
                                      const std::vector<double>& grid);

struct PercentileGrid {
    std::vector<double> latency_grid;  // percent units, strictly increasing, ends at 100
    std::vector<double> metric_grid;

    // Tail percentiles are sampled more finely on the latency side; the
    // metric grid is the even decile ladder.
    static PercentileGrid defaults() {
        return PercentileGrid{
            {10, 25, 50, 75, 90, 95, 98, 99, 99.5, 100},
            {10, 20, 30, 40, 50, 60, 70, 80, 90, 100},
        };
    }

    void validate() const;
};

}  // namespace sage
