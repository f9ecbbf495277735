#pragma once

// Descriptive statistics and Student t-tests.

#include <boost/math/distributions/students_t.hpp>

#include <cmath>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "metaplastic/error.hpp"

namespace metaplastic::stats {

inline double mean(std::span<const double> x) {
    if (x.empty()) return std::numeric_limits<double>::quiet_NaN();
    return std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
}

// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
inline double sd(std::span<const double> x) {
    if (x.size() < 2) return 0.0;
    const double m = mean(x);
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

struct TTest {
    double t = 0.0;
    double df = 0.0;
    double p = 1.0;
};

// Upper-tail probability P(T >= t) with `df` degrees of freedom.
inline double t_upper_tail(double t, double df) {
    if (std::isnan(t)) return std::numeric_limits<double>::quiet_NaN();
    if (t == std::numeric_limits<double>::infinity()) return 0.0;
    if (t == -std::numeric_limits<double>::infinity()) return 1.0;
    boost::math::students_t dist(df);
    return boost::math::cdf(boost::math::complement(dist, t));
}

// One-sided test of H1: mean(x) > mu.
inline TTest one_sample_greater(std::span<const double> x, double mu) {
    if (x.size() < 2) throw ConfigError("one-sample t-test needs at least two values");
    TTest r;
    r.df = static_cast<double>(x.size() - 1);
    const double m = mean(x);
    const double se = sd(x) / std::sqrt(static_cast<double>(x.size()));
    if (se == 0.0) {
        r.t = m > mu ? std::numeric_limits<double>::infinity() : (m < mu ? -std::numeric_limits<double>::infinity() : 0.0);
        r.p = m > mu ? 0.0 : 1.0;
        return r;
    }
    r.t = (m - mu) / se;
    r.p = t_upper_tail(r.t, r.df);
    return r;
}

// Two-sample Student t-test with pooled variance, two-sided p-value.
// t > 0 when mean(a) > mean(b).
inline TTest two_sample(std::span<const double> a, std::span<const double> b) {
    if (a.size() < 2 || b.size() < 2) throw ConfigError("two-sample t-test needs at least two values per group");
    TTest r;
    const double na = static_cast<double>(a.size());
    const double nb = static_cast<double>(b.size());
    r.df = na + nb - 2.0;
    const double diff = mean(a) - mean(b);
    const double sa = sd(a);
    const double sb = sd(b);
    const double pooled = ((na - 1.0) * sa * sa + (nb - 1.0) * sb * sb) / r.df;
    const double se = std::sqrt(pooled * (1.0 / na + 1.0 / nb));
    if (se == 0.0) {
        if (diff == 0.0) return {0.0, r.df, 1.0};
        r.t = diff > 0 ? std::numeric_limits<double>::infinity() : -std::numeric_limits<double>::infinity();
        r.p = 0.0;
        return r;
    }
    r.t = diff / se;
    r.p = std::min(1.0, 2.0 * t_upper_tail(std::abs(r.t), r.df));
    return r;
}

}  // namespace metaplastic::stats
