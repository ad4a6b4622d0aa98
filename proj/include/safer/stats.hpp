#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

#include "safer/errors.hpp"

namespace safer {

// Ranks with ties assigned the midrank.
inline std::vector<double> midranks(const std::vector<double>& values) {
    const std::size_t n = values.size();
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
    std::vector<double> ranks(n, 0.0);
    std::size_t i = 0;
    while (i < n) {
        std::size_t j = i;
        while (j + 1 < n && values[order[j + 1]] == values[order[i]]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = rank;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw ContractError("pearson: need two equal-length series");
    const double n = static_cast<double>(a.size());
    double ma = 0, mb = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double num = 0, da = 0, db = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        num += (a[i] - ma) * (b[i] - mb);
        da += (a[i] - ma) * (a[i] - ma);
        db += (b[i] - mb) * (b[i] - mb);
    }
    if (da == 0.0 || db == 0.0) return 0.0;
    return num / std::sqrt(da * db);
}

inline double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    return pearson(midranks(a), midranks(b));
}

inline double mean_of(const std::vector<double>& v) {
    if (v.empty()) throw ContractError("mean_of: empty");
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

inline double median_of(std::vector<double> v) {
    if (v.empty()) throw ContractError("median_of: empty");
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Least-squares slope of y against 0..n-1.
inline double trend_slope(const std::vector<double>& y) {
    if (y.size() < 2) throw ContractError("trend_slope: need at least two points");
    const double n = static_cast<double>(y.size());
    const double mx = (n - 1.0) / 2.0;
    double my = 0;
    for (const double v : y) my += v;
    my /= n;
    double num = 0, den = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
        const double dx = static_cast<double>(i) - mx;
        num += dx * (y[i] - my);
        den += dx * dx;
    }
    return num / den;
}

}  // namespace safer
