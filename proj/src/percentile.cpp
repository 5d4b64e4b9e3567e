#include "sage/percentile.hpp"

#include <cmath>

namespace sage {

double percentile_sorted(const std::vector<double>& sorted, double p) {
    check(!sorted.empty(), "percentile of empty sample vector");
    check(p >= 0.0 && p <= 100.0, "percentile out of [0,100]");
    if (sorted.size() == 1) return sorted[0];
    double rank = p / 100.0 * static_cast<double>(sorted.size() - 1);
    size_t lo = static_cast<size_t>(std::floor(rank));
    size_t hi = static_cast<size_t>(std::ceil(rank));
    if (lo == hi) return sorted[lo];
    double w = rank - static_cast<double>(lo);
    return sorted[lo] * (1.0 - w) + sorted[hi] * w;
}

double percentile(std::vector<double> samples, double p) {
    std::sort(samples.begin(), samples.end());
    return percentile_sorted(samples, p);
}

std::vector<double> percentile_vector(std::vector<double> samples,
                                      const std::vector<double>& grid) {
    std::sort(samples.begin(), samples.end());
    std::vector<double> out;
    out.reserve(grid.size());
    for (double p : grid) out.push_back(percentile_sorted(samples, p));
    return out;
}

void PercentileGrid::validate() const {
    auto check_grid = [](const std::vector<double>& g, const char* name) {
        check(!g.empty(), std::string(name) + " grid empty");
        for (size_t i = 1; i < g.size(); ++i)
            check(g[i] > g[i - 1], std::string(name) + " grid not strictly increasing");
        check(g.front() >= 0.0 && g.back() == 100.0,
              std::string(name) + " grid must end at 100");
    };
    check_grid(latency_grid, "latency");
    check_grid(metric_grid, "metric");
}

}  // namespace sage
