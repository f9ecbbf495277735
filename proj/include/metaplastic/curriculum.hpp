#pragma once

// Continual-learning schedules and their execution.
//
// A curriculum is an ordered list of item phases. Each phase trains the
// network to map its item's images to the item's readout, with negatives
// (images from other classes) targeting the remaining readouts, either as a
// uniform distribution or as one readout drawn from it. After every phase
// all items of the curriculum are evaluated on their test images.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <numeric>
#include <string>
#include <vector>

#include "metaplastic/dataset.hpp"
#include "metaplastic/error.hpp"
#include "metaplastic/netcore.hpp"
#include "metaplastic/rng.hpp"

namespace metaplastic {

struct ItemTask {
    TwoDigitClass item_class;
    int readout_index = 0;
    bool poisoned = false;

    friend bool operator==(const ItemTask&, const ItemTask&) = default;
};

// Training target for images that are not the current phase's item.
enum class NegativeTarget {
    // Uniform distribution over every readout except the current item's.
    uniform_others,
    // One-hot on a readout drawn uniformly from every readout except the
    // current item's; the same distribution as uniform_others, sampled.
    sampled_others,
    // One-hot on an extra "none" output appended after the item readouts.
    none_readout
};

struct Curriculum {
    std::vector<ItemTask> phases;
    // Distinct items; items[i] owns readout i.
    std::vector<TwoDigitClass> items;
    int n_readouts = 0;
    double negatives_per_positive = 1.0;
    NegativeTarget negative_target = NegativeTarget::uniform_others;

    // Width of the network output layer.
    int output_count() const { return n_readouts + (negative_target == NegativeTarget::none_readout ? 1 : 0); }

    std::size_t frequency(std::size_t item) const {
        return static_cast<std::size_t>(std::count_if(phases.begin(), phases.end(), [&](const ItemTask& t) {
            return t.readout_index == static_cast<int>(item);
        }));
    }

    void validate() const {
        if (n_readouts <= 0) throw ConfigError("n_readouts must be positive");
        if (items.size() > static_cast<std::size_t>(n_readouts)) {
            throw ConfigError(std::to_string(items.size()) + " items exceed " + std::to_string(n_readouts) +
                              " readouts");
        }
        if (!(negatives_per_positive >= 0.0) || !std::isfinite(negatives_per_positive)) {
            throw ConfigError("negatives_per_positive must be non-negative");
        }
        for (const auto& p : phases) {
            if (p.readout_index < 0 || p.readout_index >= static_cast<int>(items.size()) ||
                items[static_cast<std::size_t>(p.readout_index)] != p.item_class) {
                throw ConfigError("phase references item " + p.item_class.label() + " with inconsistent readout");
            }
        }
    }
};

namespace detail {

inline void check_items(const std::vector<TwoDigitClass>& items, int n_readouts) {
    if (n_readouts <= 0) throw ConfigError("n_readouts must be positive");
    if (items.size() > static_cast<std::size_t>(n_readouts)) {
        throw ConfigError(std::to_string(items.size()) + " items exceed " + std::to_string(n_readouts) + " readouts");
    }
    for (std::size_t i = 0; i < items.size(); ++i)
        for (std::size_t j = i + 1; j < items.size(); ++j)
            if (items[i] == items[j]) throw ConfigError("duplicate item " + items[i].label());
}

}  // namespace detail

inline Curriculum build_sequence(const std::vector<TwoDigitClass>& items, int n_readouts) {
    detail::check_items(items, n_readouts);
    Curriculum c;
    c.items = items;
    c.n_readouts = n_readouts;
    for (std::size_t i = 0; i < items.size(); ++i) c.phases.push_back({items[i], static_cast<int>(i), false});
    return c;
}

// The whole sequence `repeats` times; with poison_last the final pass trains
// on shuffled targets.
inline Curriculum build_repetition(const std::vector<TwoDigitClass>& items, int n_readouts, int repeats,
                                   bool poison_last) {
    if (repeats < 1) throw ConfigError("repeats must be at least 1");
    Curriculum one = build_sequence(items, n_readouts);
    Curriculum c = one;
    c.phases.clear();
    for (int r = 0; r < repeats; ++r) {
        for (auto task : one.phases) {
            task.poisoned = poison_last && r == repeats - 1;
            c.phases.push_back(task);
        }
    }
    return c;
}

enum class FrequencyOrder {
    blocks,   // item i trained frequencies[i] consecutive phases, items in sequence order
    shuffled  // all phases interleaved in a seeded random order
};

inline Curriculum build_frequency(const std::vector<TwoDigitClass>& items, int n_readouts,
                                  const std::vector<int>& frequencies, std::uint64_t seed,
                                  FrequencyOrder order = FrequencyOrder::blocks) {
    if (frequencies.size() != items.size()) {
        throw ConfigError("frequencies has " + std::to_string(frequencies.size()) + " entries for " +
                          std::to_string(items.size()) + " items");
    }
    for (int f : frequencies) {
        if (f < 1) throw ConfigError("frequencies must be at least 1");
    }
    Curriculum c = build_sequence(items, n_readouts);
    c.phases.clear();
    for (std::size_t i = 0; i < items.size(); ++i)
        for (int k = 0; k < frequencies[i]; ++k) c.phases.push_back({items[i], static_cast<int>(i), false});
    if (order == FrequencyOrder::shuffled) {
        Rng rng(derive_seed(seed, {stream::schedule}));
        std::shuffle(c.phases.begin(), c.phases.end(), rng);
    }
    return c;
}

// Frozen features for every class of a dataset, split by train/test.
// Columns are images.
struct FeatureBank {
    std::vector<TwoDigitClass> classes;
    std::vector<Matrix> train;
    std::vector<Matrix> test;

    int find(const TwoDigitClass& c) const {
        auto it = std::find(classes.begin(), classes.end(), c);
        return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
    }
    Eigen::Index feature_dim() const { return train.empty() ? 0 : train.front().rows(); }
};

// Pixels of one class as a (1568 x n) matrix normalized to [0, 1].
inline Matrix normalized_pixels(const ClassImages& images) {
    const auto n = static_cast<Eigen::Index>(images.size());
    Matrix out(pair_pixels, n);
    for (Eigen::Index j = 0; j < n; ++j) {
        const auto img = images.image(static_cast<std::size_t>(j));
        for (Eigen::Index p = 0; p < pair_pixels; ++p) out(p, j) = img[static_cast<std::size_t>(p)] / 255.0;
    }
    return out;
}

inline FeatureBank build_feature_bank(const TwoDigitDataset& ds, const FeatureExtractor& extractor) {
    FeatureBank bank;
    bank.classes = ds.classes;
    for (std::size_t k = 0; k < ds.classes.size(); ++k) {
        bank.train.push_back(extractor.extract(normalized_pixels(ds.train[k])));
        bank.test.push_back(extractor.extract(normalized_pixels(ds.test[k])));
    }
    return bank;
}

// Precomputed features, one image per line: class label, split, then the
// feature values, e.g. "38,train,0.12,0.0,...". Blank lines and lines
// starting with '#' are skipped. Every class needs train and test rows.
inline FeatureBank load_feature_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot open feature file " + path.string());
    std::map<TwoDigitClass, std::vector<std::vector<double>>> train, test;
    std::size_t dim = 0;
    std::string line;
    for (std::size_t line_no = 1; std::getline(in, line); ++line_no) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        const auto where = path.string() + ":" + std::to_string(line_no) + ": ";
        std::stringstream row(line);
        std::string label, split, cell;
        std::getline(row, label, ',');
        std::getline(row, split, ',');
        TwoDigitClass cls;
        try {
            cls = TwoDigitClass::parse(label);
        } catch (const ConfigError& e) {
            throw IngestError(where + e.what());
        }
        if (split != "train" && split != "test") throw IngestError(where + "split must be train or test, got '" + split + "'");
        std::vector<double> values;
        while (std::getline(row, cell, ',')) {
            std::size_t used = 0;
            double v = 0.0;
            try {
                v = std::stod(cell, &used);
            } catch (const std::exception&) {
                used = 0;
            }
            if (used == 0 || !std::isfinite(v)) throw IngestError(where + "bad feature value '" + cell + "'");
            values.push_back(v);
        }
        if (values.empty()) throw IngestError(where + "no feature values");
        if (dim == 0) dim = values.size();
        if (values.size() != dim)
            throw IngestError(where + std::to_string(values.size()) + " features, expected " + std::to_string(dim));
        (split == "train" ? train : test)[cls].push_back(std::move(values));
    }
    if (train.empty()) throw IngestError(path.string() + ": no feature rows");
    FeatureBank bank;
    auto to_matrix = [dim](const std::vector<std::vector<double>>& rows) {
        Matrix m(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(rows.size()));
        for (std::size_t j = 0; j < rows.size(); ++j)
            for (std::size_t r = 0; r < dim; ++r) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(j)) = rows[j][r];
        return m;
    };
    for (const auto& [cls, rows] : train) {
        auto t = test.find(cls);
        if (t == test.end()) throw IngestError(path.string() + ": class " + cls.label() + " has no test rows");
        bank.classes.push_back(cls);
        bank.train.push_back(to_matrix(rows));
        bank.test.push_back(to_matrix(t->second));
    }
    for (const auto& [cls, rows] : test)
        if (!train.count(cls)) throw IngestError(path.string() + ": class " + cls.label() + " has no train rows");
    return bank;
}

struct RunOptions {
    TrainOptions train;  // shuffle_seed is derived per phase
    // Positives per phase; 0 uses every train image of the item.
    std::size_t positives_per_phase = 0;
};

struct RunResult {
    // checkpoints[p][i]: test accuracy of item i after phase p.
    std::vector<std::vector<double>> checkpoints;
    std::vector<PhaseTrace> traces;
};

// Assembles the training samples of one phase.
inline TrainingSet assemble_phase(const Curriculum& curriculum, std::size_t phase_index, const FeatureBank& bank,
                                  const RunOptions& options, Rng& rng) {
    const auto& task = curriculum.phases.at(phase_index);
    const int item = bank.find(task.item_class);
    if (item < 0) throw ConfigError("item " + task.item_class.label() + " missing from dataset");
    const Matrix& pos = bank.train[static_cast<std::size_t>(item)];
    if (pos.cols() == 0) throw ConfigError("item " + task.item_class.label() + " has no train images");

    std::vector<Eigen::Index> pos_idx(static_cast<std::size_t>(pos.cols()));
    std::iota(pos_idx.begin(), pos_idx.end(), Eigen::Index{0});
    if (options.positives_per_phase > 0 && options.positives_per_phase < pos_idx.size()) {
        std::shuffle(pos_idx.begin(), pos_idx.end(), rng);
        pos_idx.resize(options.positives_per_phase);
    }
    const auto n_pos = static_cast<Eigen::Index>(pos_idx.size());
    const auto n_neg = static_cast<Eigen::Index>(std::llround(curriculum.negatives_per_positive * n_pos));

    std::vector<std::size_t> negative_classes;
    for (std::size_t k = 0; k < bank.classes.size(); ++k)
        if (static_cast<int>(k) != item && bank.train[k].cols() > 0) negative_classes.push_back(k);
    if (n_neg > 0 && negative_classes.empty()) throw ConfigError("no negative classes available");

    const auto readouts = static_cast<Eigen::Index>(curriculum.n_readouts);
    const auto outputs = static_cast<Eigen::Index>(curriculum.output_count());
    TrainingSet set;
    set.features.resize(bank.feature_dim(), n_pos + n_neg);
    set.targets = Matrix::Zero(outputs, n_pos + n_neg);
    for (Eigen::Index j = 0; j < n_pos; ++j) {
        set.features.col(j) = pos.col(pos_idx[static_cast<std::size_t>(j)]);
        set.targets(task.readout_index, j) = 1.0;
    }
    if (n_neg > 0) {
        std::uniform_int_distribution<std::size_t> pick_class(0, negative_classes.size() - 1);
        const double other = readouts > 1 ? 1.0 / static_cast<double>(readouts - 1) : 0.0;
        std::uniform_int_distribution<Eigen::Index> pick_other(0, std::max<Eigen::Index>(readouts - 2, 0));
        for (Eigen::Index j = n_pos; j < n_pos + n_neg; ++j) {
            const Matrix& src = bank.train[negative_classes[pick_class(rng)]];
            std::uniform_int_distribution<Eigen::Index> pick_image(0, src.cols() - 1);
            set.features.col(j) = src.col(pick_image(rng));
            if (curriculum.negative_target == NegativeTarget::none_readout) {
                set.targets(readouts, j) = 1.0;
            } else if (curriculum.negative_target == NegativeTarget::sampled_others && readouts > 1) {
                const Eigen::Index r = pick_other(rng);
                set.targets(r >= task.readout_index ? r + 1 : r, j) = 1.0;
            } else {
                set.targets.col(j).setConstant(other);
                set.targets(task.readout_index, j) = 0.0;
            }
        }
    }
    if (task.poisoned) {
        std::vector<Eigen::Index> perm(static_cast<std::size_t>(set.targets.cols()));
        std::iota(perm.begin(), perm.end(), Eigen::Index{0});
        std::shuffle(perm.begin(), perm.end(), rng);
        Matrix shuffled(set.targets.rows(), set.targets.cols());
        for (Eigen::Index j = 0; j < shuffled.cols(); ++j) shuffled.col(j) = set.targets.col(perm[static_cast<std::size_t>(j)]);
        set.targets = std::move(shuffled);
    }
    return set;
}

// Test accuracy of every curriculum item: fraction of its test images whose
// argmax readout equals the item's readout.
inline std::vector<double> evaluate_items(const ClassifierNet& net, const Curriculum& curriculum,
                                          const FeatureBank& bank) {
    std::vector<double> out;
    out.reserve(curriculum.items.size());
    for (std::size_t i = 0; i < curriculum.items.size(); ++i) {
        const int k = bank.find(curriculum.items[i]);
        if (k < 0) throw ConfigError("item " + curriculum.items[i].label() + " missing from dataset");
        const Matrix& x = bank.test[static_cast<std::size_t>(k)];
        if (x.cols() == 0) throw ConfigError("item " + curriculum.items[i].label() + " has no test images");
        const auto pred = predict(net, x, curriculum.n_readouts);
        const auto hits = std::count(pred.begin(), pred.end(), static_cast<int>(i));
        out.push_back(static_cast<double>(hits) / static_cast<double>(pred.size()));
    }
    return out;
}

// Runs every phase in order. Each phase refreshes the Δw reference of every
// parameter, trains on freshly assembled data, then records per-item test
// accuracy. Phase randomness is derived from (seed, phase index) only, so a
// curriculum that extends another reproduces its prefix exactly.
template <class Update = MetaplasticUpdate>
RunResult run(const Curriculum& curriculum, ClassifierNet& net, const FeatureBank& bank, const RuleConfig& config,
              const RunOptions& options, std::uint64_t seed) {
    curriculum.validate();
    config.validate();
    if (net.n_readouts() != curriculum.output_count()) {
        throw ShapeError("net has " + std::to_string(net.n_readouts()) + " outputs, curriculum needs " +
                         std::to_string(curriculum.output_count()));
    }
    if (net.input_dim() != bank.feature_dim()) throw ShapeError("net input dim differs from feature dim");
    for (const auto& item : curriculum.items) {
        if (bank.find(item) < 0) throw ConfigError("item " + item.label() + " missing from dataset");
    }

    RunResult result;
    for (std::size_t p = 0; p < curriculum.phases.size(); ++p) {
        net.refresh_reference();
        Rng rng(derive_seed(seed, {stream::phase, p}));
        TrainingSet data = assemble_phase(curriculum, p, bank, options, rng);
        TrainOptions train = options.train;
        train.shuffle_seed = derive_seed(seed, {stream::phase, p, 1});
        result.traces.push_back(train_phase<Update>(net, data, config, train));
        result.checkpoints.push_back(evaluate_items(net, curriculum, bank));
    }
    return result;
}

}  // namespace metaplastic
