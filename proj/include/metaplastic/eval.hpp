#pragma once

// Memory measurements: per-item accuracy, the label-shuffle memorization test,
// aggregate reports, rank correlations and repetition metrics.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <vector>

#include "metaplastic/curriculum.hpp"
#include "metaplastic/error.hpp"
#include "metaplastic/netcore.hpp"
#include "metaplastic/rng.hpp"
#include "metaplastic/stats.hpp"

namespace metaplastic {

// Fraction of `test_features` columns classified as `readout`.
inline double item_accuracy(const ClassifierNet& net, const Matrix& test_features, int readout) {
    if (test_features.cols() == 0) throw ConfigError("item_accuracy on an empty test set");
    const auto pred = predict(net, test_features);
    return static_cast<double>(std::count(pred.begin(), pred.end(), readout)) / static_cast<double>(pred.size());
}

// Predictions and true readouts over the pooled test images of all items.
struct PooledPredictions {
    std::vector<int> predictions;
    std::vector<int> labels;
    int n_items = 0;
};

inline PooledPredictions pool_predictions(const ClassifierNet& net, const Curriculum& curriculum,
                                          const FeatureBank& bank) {
    PooledPredictions out;
    out.n_items = static_cast<int>(curriculum.items.size());
    for (std::size_t i = 0; i < curriculum.items.size(); ++i) {
        const int k = bank.find(curriculum.items[i]);
        if (k < 0) throw ConfigError("item " + curriculum.items[i].label() + " missing from dataset");
        const auto pred = predict(net, bank.test[static_cast<std::size_t>(k)], curriculum.n_readouts);
        out.predictions.insert(out.predictions.end(), pred.begin(), pred.end());
        out.labels.insert(out.labels.end(), pred.size(), static_cast<int>(i));
    }
    return out;
}

inline std::vector<double> per_item_accuracy(const std::vector<int>& predictions, const std::vector<int>& labels,
                                             int n_items) {
    std::vector<double> hits(static_cast<std::size_t>(n_items), 0.0);
    std::vector<double> counts(static_cast<std::size_t>(n_items), 0.0);
    for (std::size_t j = 0; j < labels.size(); ++j) {
        const auto l = static_cast<std::size_t>(labels[j]);
        counts[l] += 1.0;
        if (predictions[j] == labels[j]) hits[l] += 1.0;
    }
    for (std::size_t i = 0; i < hits.size(); ++i) hits[i] = counts[i] > 0 ? hits[i] / counts[i] : 0.0;
    return hits;
}

struct MemorizationOptions {
    int n_shuffles = 1000;
    int criterion = 950;
    std::uint64_t seed = 0;

    void validate() const {
        if (n_shuffles < 1) throw ConfigError("n_shuffles must be at least 1");
        if (criterion < 1 || criterion > n_shuffles) throw ConfigError("criterion must lie in [1, n_shuffles]");
    }
};

// For every item, counts the label permutations of the pooled test set under
// which the item's original accuracy strictly exceeds its shuffled-label
// accuracy. Shuffle s uses the stream derive_seed(seed, {shuffle, s}).
inline std::vector<int> shuffle_wins(const PooledPredictions& pooled, const MemorizationOptions& options) {
    options.validate();
    if (pooled.labels.empty()) throw ConfigError("memorization test on an empty test set");
    const auto original = per_item_accuracy(pooled.predictions, pooled.labels, pooled.n_items);
    std::vector<int> wins(static_cast<std::size_t>(pooled.n_items), 0);
    std::vector<int> permuted = pooled.labels;
    for (int s = 0; s < options.n_shuffles; ++s) {
        Rng rng(derive_seed(options.seed, {stream::shuffle, static_cast<std::uint64_t>(s)}));
        permuted = pooled.labels;
        std::shuffle(permuted.begin(), permuted.end(), rng);
        const auto control = per_item_accuracy(pooled.predictions, permuted, pooled.n_items);
        for (std::size_t i = 0; i < wins.size(); ++i)
            if (original[i] > control[i]) ++wins[i];
    }
    return wins;
}

inline std::vector<bool> memorized_items(const PooledPredictions& pooled, const MemorizationOptions& options = {}) {
    const auto wins = shuffle_wins(pooled, options);
    std::vector<bool> out(wins.size());
    for (std::size_t i = 0; i < wins.size(); ++i) out[i] = wins[i] >= options.criterion;
    return out;
}

inline bool memorized_test(const PooledPredictions& pooled, int item, const MemorizationOptions& options = {}) {
    if (item < 0 || item >= pooled.n_items) throw ConfigError("item index out of range");
    if (std::count(pooled.labels.begin(), pooled.labels.end(), item) == 0) {
        throw ConfigError("memorization test on an empty test set");
    }
    return memorized_items(pooled, options)[static_cast<std::size_t>(item)];
}

inline bool memorized_test(const ClassifierNet& net, const Curriculum& curriculum, const FeatureBank& bank, int item,
                           const MemorizationOptions& options = {}) {
    return memorized_test(pool_predictions(net, curriculum, bank), item, options);
}

struct MemoryReport {
    std::vector<double> per_item_accuracy;
    std::vector<bool> memorized;
    int n_memorized = 0;
    double mean_accuracy = 0.0;
    double gross_memory = 0.0;
    double chance_level = 0.0;
};

inline MemoryReport report(std::vector<double> accuracy, std::vector<bool> memorized, int n_readouts) {
    if (accuracy.size() != memorized.size()) throw ShapeError("accuracy and memorized flags differ in length");
    if (n_readouts <= 0) throw ConfigError("n_readouts must be positive");
    MemoryReport r;
    r.chance_level = 1.0 / static_cast<double>(n_readouts);
    r.gross_memory = std::accumulate(accuracy.begin(), accuracy.end(), 0.0);
    r.mean_accuracy = accuracy.empty() ? 0.0 : r.gross_memory / static_cast<double>(accuracy.size());
    r.n_memorized = static_cast<int>(std::count(memorized.begin(), memorized.end(), true));
    r.per_item_accuracy = std::move(accuracy);
    r.memorized = std::move(memorized);
    return r;
}

// Final-phase report of a finished run.
inline MemoryReport report(const RunResult& run, const PooledPredictions& pooled, int n_readouts,
                           const MemorizationOptions& options = {}) {
    auto acc = run.checkpoints.empty() ? per_item_accuracy(pooled.predictions, pooled.labels, pooled.n_items)
                                       : run.checkpoints.back();
    return report(std::move(acc), memorized_items(pooled, options), n_readouts);
}

// Midranks (1-based); tied values share the mean of their ranks.
inline std::vector<double> midranks(std::span<const double> x) {
    std::vector<std::size_t> order(x.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
    std::vector<double> ranks(x.size());
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
        const double r = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) ranks[order[k]] = r;
        i = j + 1;
    }
    return ranks;
}

inline double pearson(std::span<const double> x, std::span<const double> y) {
    const double mx = stats::mean(x);
    const double my = stats::mean(y);
    double sxy = 0.0, sxx = 0.0, syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) return std::numeric_limits<double>::quiet_NaN();
    return sxy / std::sqrt(sxx * syy);
}

struct SpearmanResult {
    double rho = std::numeric_limits<double>::quiet_NaN();
    double p = std::numeric_limits<double>::quiet_NaN();
    // False when either input is constant and rho is undefined.
    bool defined = false;
};

inline constexpr std::size_t spearman_exact_limit = 8;

// Spearman rank correlation with midrank ties. Two-sided p-value from the exact
// permutation distribution when n <= 8, otherwise from the t approximation
// t = rho * sqrt((n - 2) / (1 - rho^2)) with n - 2 degrees of freedom.
inline SpearmanResult spearman(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) throw ShapeError("spearman inputs differ in length");
    if (x.size() < 3) throw ConfigError("spearman needs at least three points");
    const auto rx = midranks(x);
    const auto ry = midranks(y);
    SpearmanResult out;
    out.rho = pearson(rx, ry);
    if (std::isnan(out.rho)) return out;
    out.defined = true;
    const std::size_t n = x.size();
    if (n <= spearman_exact_limit) {
        std::vector<double> perm = ry;
        std::sort(perm.begin(), perm.end());
        std::size_t extreme = 0, total = 0;
        const double observed = std::abs(out.rho) - 1e-12;
        do {
            ++total;
            if (std::abs(pearson(rx, perm)) >= observed) ++extreme;
        } while (std::next_permutation(perm.begin(), perm.end()));
        out.p = static_cast<double>(extreme) / static_cast<double>(total);
    } else {
        const double r2 = out.rho * out.rho;
        if (r2 >= 1.0) {
            out.p = 0.0;
        } else {
            const double df = static_cast<double>(n - 2);
            const double t = out.rho * std::sqrt(df / (1.0 - r2));
            out.p = std::min(1.0, 2.0 * stats::t_upper_tail(std::abs(t), df));
        }
    }
    return out;
}

struct CorrelationReport {
    SpearmanResult order;
    SpearmanResult frequency;
};

// Correlates final item accuracy with item position (1-based) and with
// presentation frequency.
inline CorrelationReport correlate(std::span<const double> accuracy, std::span<const double> frequency) {
    std::vector<double> order(accuracy.size());
    std::iota(order.begin(), order.end(), 1.0);
    return {spearman(order, accuracy), spearman(frequency, accuracy)};
}

struct RepetitionMetrics {
    std::vector<double> min_trace;  // lowest item accuracy after each repetition
    double delta_performance = 0.0;  // max - min at the final repetition
};

// `per_repetition[r]` holds item accuracies after repetition r.
inline RepetitionMetrics repetition_metrics(const std::vector<std::vector<double>>& per_repetition) {
    if (per_repetition.empty()) throw ConfigError("repetition metrics need at least one repetition");
    RepetitionMetrics m;
    for (const auto& acc : per_repetition) {
        if (acc.empty()) throw ConfigError("repetition checkpoint without items");
        m.min_trace.push_back(*std::min_element(acc.begin(), acc.end()));
    }
    const auto& last = per_repetition.back();
    m.delta_performance = *std::max_element(last.begin(), last.end()) - *std::min_element(last.begin(), last.end());
    return m;
}

// Picks the checkpoints at the end of each pass over the sequence.
inline std::vector<std::vector<double>> repetition_checkpoints(const RunResult& run, std::size_t sequence_length) {
    std::vector<std::vector<double>> out;
    if (sequence_length == 0) return out;
    for (std::size_t p = sequence_length; p <= run.checkpoints.size(); p += sequence_length)
        out.push_back(run.checkpoints[p - 1]);
    return out;
}

}  // namespace metaplastic
