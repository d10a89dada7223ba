#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "voxgene/error.hpp"
#include "voxgene/rng.hpp"

namespace voxgene {

// Two-pass Pearson correlation, clamped to [-1, 1] against rounding.
inline double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size())
        throw dimension_error("pearson requires equal-length samples");
    const std::size_t n = x.size();
    if (n < 2) throw input_error("pearson requires at least 2 samples");
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double dx = x[i] - mx;
        const double dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if (!(sxx > 0.0) || !(syy > 0.0))
        throw numeric_error("zero variance makes the correlation undefined");
    const double r = sxy / std::sqrt(sxx * syy);
    return std::clamp(r, -1.0, 1.0);
}

namespace detail {

inline double log_beta(double a, double b) {
    return std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
}

// Continued fraction for the incomplete beta (modified Lentz).
inline double beta_cf(double a, double b, double x) {
    const double tiny = 1e-300;
    const double eps = 1e-15;
    const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
    double c = 1.0;
    double d = 1.0 - qab * x / qap;
    if (std::abs(d) < tiny) d = tiny;
    d = 1.0 / d;
    double h = d;
    for (int m = 1; m <= 300; ++m) {
        const double m2 = 2.0 * m;
        double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        h *= d * c;
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if (std::abs(d) < tiny) d = tiny;
        c = 1.0 + aa / c;
        if (std::abs(c) < tiny) c = tiny;
        d = 1.0 / d;
        const double del = d * c;
        h *= del;
        if (std::abs(del - 1.0) < eps) return h;
    }
    throw numeric_error("incomplete beta continued fraction did not converge");
}

// Regularized incomplete beta I_x(a, b).
inline double reg_incomplete_beta(double a, double b, double x) {
    if (!(a > 0.0) || !(b > 0.0)) throw numeric_error("incomplete beta needs a, b > 0");
    if (x <= 0.0) return 0.0;
    if (x >= 1.0) return 1.0;
    const double front = std::exp(a * std::log(x) + b * std::log1p(-x) - log_beta(a, b));
    if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_cf(a, b, x) / a;
    return 1.0 - front * beta_cf(b, a, 1.0 - x) / b;
}

}  // namespace detail

// Two-sided p-value for a Pearson coefficient via the t transform:
// t = r*sqrt((n-2)/(1-r^2)) with n-2 degrees of freedom, so
// p = I_{df/(df+t^2)}(df/2, 1/2). |r| = 1 maps to p = 0 by convention.
inline double pearson_pvalue(double r, std::size_t n) {
    if (n < 3) throw input_error("pearson_pvalue requires n >= 3");
    if (!(r >= -1.0 && r <= 1.0)) throw numeric_error("correlation outside [-1,1]");
    if (r == 0.0) return 1.0;
    const double df = static_cast<double>(n - 2);
    const double r2 = r * r;
    if (r2 >= 1.0) return 0.0;
    const double t2 = r2 * df / (1.0 - r2);
    const double p = detail::reg_incomplete_beta(0.5 * df, 0.5, df / (df + t2));
    return std::clamp(p, 0.0, 1.0);
}

// Seeded two-sided permutation test on |r|, with the add-one estimate
// (1 + #{|r_perm| >= |r_obs|}) / (1 + permutations).
inline double permutation_pvalue(std::span<const double> x, std::span<const double> y,
                                 std::size_t permutations, Rng rng) {
    if (permutations < 1) throw config_error("permutation count must be >= 1");
    const double observed = std::abs(pearson(x, y));
    std::vector<double> perm(y.begin(), y.end());
    std::size_t hits = 0;
    for (std::size_t k = 0; k < permutations; ++k) {
        rng.shuffle(perm);
        // the tiny slack keeps ties (e.g. the identity permutation) counted
        // despite summation-order rounding
        if (std::abs(pearson(x, perm)) >= observed - 1e-14) ++hits;
    }
    return static_cast<double>(1 + hits) / static_cast<double>(1 + permutations);
}

// Holm-Sidak step-down: sort ascending, threshold for rank i (1-based) is
// 1-(1-alpha)^(1/(m-i+1)); reject until the first failure. Flags come back in
// the original order.
inline std::vector<bool> holm_sidak(std::span<const double> pvalues, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0))
        throw config_error("alpha must be in (0,1), got " + std::to_string(alpha));
    const std::size_t m = pvalues.size();
    for (double p : pvalues)
        if (!(p >= 0.0 && p <= 1.0)) throw numeric_error("p-value outside [0,1]");
    std::vector<std::size_t> order(m);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return pvalues[a] < pvalues[b]; });
    std::vector<bool> reject(m, false);
    for (std::size_t i = 0; i < m; ++i) {
        const double threshold =
            1.0 - std::pow(1.0 - alpha, 1.0 / static_cast<double>(m - i));
        if (pvalues[order[i]] <= threshold)
            reject[order[i]] = true;
        else
            break;
    }
    return reject;
}

}  // namespace voxgene
