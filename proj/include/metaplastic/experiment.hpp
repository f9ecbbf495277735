#pragma once

// Experiment configuration, multi-trial orchestration and result files.
//
// A run expands one ExperimentConfig into conditions (profile x schedule
// variant). Every condition runs n_trials trials; trial i uses seed
// master_seed + i for item choice, weight init, flexibility sampling and data
// order, so conditions compare on matched seeds.
//
// Output layout under output_dir:
//   manifest.json                         resolved config, conditions, dataset hash
//   <condition>/trials.csv                one summary row per trial
//   <condition>/trial_items.csv           final accuracy and memorized flag per trial and item
//   <condition>/aggregate_items.csv       mean and SD of final accuracy per item
//   <condition>/aggregate_phases.csv      mean and SD of accuracy per phase and item
//   <condition>/trial_<i>/checkpoints.csv phase_index,item_index,accuracy
//   <condition>/trial_<i>/items.csv       item_index,item_class,frequency,accuracy,memorized
//   <condition>/trial_<i>/report.json     memory report, correlations, repetition metrics

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "metaplastic/curriculum.hpp"
#include "metaplastic/dataset.hpp"
#include "metaplastic/error.hpp"
#include "metaplastic/eval.hpp"
#include "metaplastic/netcore.hpp"
#include "metaplastic/rng.hpp"
#include "metaplastic/stats.hpp"
#include "metaplastic/synapse.hpp"

namespace metaplastic {

using Json = nlohmann::ordered_json;

enum class Experiment { serial_position, capacity_sweep, repetition, poisoning, frequency, single_value_profile, biased_profile };

inline const std::vector<std::pair<Experiment, std::string>>& experiment_names() {
    static const std::vector<std::pair<Experiment, std::string>> names = {
        {Experiment::serial_position, "serial_position"},
        {Experiment::capacity_sweep, "capacity_sweep"},
        {Experiment::repetition, "repetition"},
        {Experiment::poisoning, "poisoning"},
        {Experiment::frequency, "frequency"},
        {Experiment::single_value_profile, "single_value_profile"},
        {Experiment::biased_profile, "biased_profile"}};
    return names;
}

inline std::string to_string(Experiment e) {
    for (const auto& [k, v] : experiment_names())
        if (k == e) return v;
    return "?";
}

inline Experiment parse_experiment(const std::string& text) {
    for (const auto& [k, v] : experiment_names())
        if (v == text) return k;
    throw ConfigError("experiment: unknown value '" + text + "'");
}

struct DatasetConfig {
    std::string corpus_dir = "data/mnist-subset";
    std::string cache = "dataset/two_digit.mpd";
    std::size_t per_class_train = 300;
    std::size_t per_class_test = 200;
    std::uint64_t seed = 7;
    bool require_standard_counts = false;
    // Precomputed feature CSV; when set it replaces the composed dataset and
    // the random-projection extractor.
    std::string features_file;

    std::filesystem::path manifest_path() const { return std::filesystem::path(cache).replace_extension(".json"); }
};

struct ExperimentConfig {
    Experiment experiment = Experiment::serial_position;
    std::vector<std::string> profiles = {"conventional", "stable", "hybrid"};
    RuleConfig rule{1000.0, 0.5, 1e-12};
    int epochs = 15;
    int batch_size = 32;
    double negatives_per_positive = 1.0;
    NegativeTarget negative_target = NegativeTarget::sampled_others;
    std::size_t positives_per_phase = 0;

    Eigen::Index feature_dim = 512;
    std::vector<Eigen::Index> hidden = {256, 64};
    std::uint64_t extractor_seed = 11;

    int n_items = 10;
    // 0: one readout per item of the condition.
    int n_readouts = 0;
    // Explicit item labels such as "38"; empty draws items per trial.
    std::vector<std::string> items;
    std::vector<int> lengths = {10, 20, 30};
    int repeats = 9;
    std::vector<int> frequencies = {1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
    FrequencyOrder frequency_order = FrequencyOrder::blocks;
    // Constant values for single_value_profile, shape exponents for biased_profile.
    std::vector<double> values;

    MemorizationOptions memorization{};
    DatasetConfig dataset{};

    int n_trials = 20;
    std::uint64_t master_seed = 1;
    int parallel = 1;
    std::string output_dir = "results";

    std::vector<double> resolved_values() const {
        if (!values.empty()) return values;
        if (experiment == Experiment::single_value_profile) return {0.3, 0.8, 1.0};
        if (experiment == Experiment::biased_profile) return {0.5, 1.0, 2.0};
        return {};
    }

    void validate() const {
        rule.validate();
        if (epochs < 1) throw ConfigError("training.epochs must be at least 1");
        if (batch_size < 1) throw ConfigError("training.batch_size must be at least 1");
        if (!(negatives_per_positive >= 0.0) || !std::isfinite(negatives_per_positive))
            throw ConfigError("training.negatives_per_positive must be non-negative");
        if (feature_dim < 1) throw ConfigError("network.feature_dim must be positive");
        for (auto h : hidden)
            if (h < 1) throw ConfigError("network.hidden entries must be positive");
        if (n_trials < 1) throw ConfigError("n_trials must be at least 1");
        if (parallel < 1) throw ConfigError("parallel must be at least 1");
        if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
        if (dataset.per_class_train < 1) throw ConfigError("dataset.per_class_train must be at least 1");
        if (dataset.per_class_test < 1) throw ConfigError("dataset.per_class_test must be at least 1");
        memorization.validate();

        const bool uses_profiles =
            experiment != Experiment::single_value_profile && experiment != Experiment::biased_profile;
        if (uses_profiles) {
            if (profiles.empty()) throw ConfigError("profiles must not be empty");
            for (const auto& p : profiles) {
                try {
                    FlexibilityProfile::parse(p);
                } catch (const ConfigError& e) {
                    throw ConfigError(std::string("profiles: ") + e.what());
                }
            }
        }
        for (double v : resolved_values()) {
            if (experiment == Experiment::single_value_profile && !(v >= 0.0 && v <= 1.0))
                throw ConfigError("values: constant flexibility outside [0, 1]");
            if (experiment == Experiment::biased_profile && !(v > 0.0 && std::isfinite(v)))
                throw ConfigError("values: biased shape must be positive");
        }

        std::vector<int> counts;
        if (experiment == Experiment::capacity_sweep) {
            if (lengths.empty()) throw ConfigError("lengths must not be empty");
            counts = lengths;
        } else {
            counts = {n_items};
        }
        for (int n : counts) {
            if (n < 1) throw ConfigError("item counts must be at least 1");
            if (n > class_universe_size)
                throw ConfigError("item count " + std::to_string(n) + " exceeds the 45 available classes");
            if (n_readouts > 0 && n > n_readouts)
                throw ConfigError(std::to_string(n) + " items exceed n_readouts " + std::to_string(n_readouts));
        }
        if (n_readouts < 0) throw ConfigError("n_readouts must be non-negative");
        if (!items.empty()) {
            const int need = *std::max_element(counts.begin(), counts.end());
            if (static_cast<int>(items.size()) < need)
                throw ConfigError("items lists " + std::to_string(items.size()) + " classes, " + std::to_string(need) +
                                  " needed");
            std::vector<TwoDigitClass> parsed;
            for (const auto& s : items) {
                try {
                    parsed.push_back(TwoDigitClass::parse(s));
                } catch (const ConfigError& e) {
                    throw ConfigError(std::string("items: ") + e.what());
                }
            }
            for (std::size_t i = 0; i < parsed.size(); ++i)
                for (std::size_t j = i + 1; j < parsed.size(); ++j)
                    if (parsed[i] == parsed[j]) throw ConfigError("items: duplicate class " + parsed[i].label());
        }
        if (experiment == Experiment::repetition || experiment == Experiment::poisoning) {
            if (repeats < 1) throw ConfigError("repeats must be at least 1");
        }
        if (experiment == Experiment::frequency) {
            if (static_cast<int>(frequencies.size()) != n_items)
                throw ConfigError("frequencies has " + std::to_string(frequencies.size()) + " entries for " +
                                  std::to_string(n_items) + " items");
            for (int f : frequencies)
                if (f < 1) throw ConfigError("frequencies entries must be at least 1");
        }
    }
};

// ---- JSON ----------------------------------------------------------------

namespace detail {

template <class T>
void read_field(const Json& j, const char* key, T& out, const std::string& prefix = "") {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(prefix + key + ": wrong type");
    }
}

inline void reject_unknown(const Json& j, std::initializer_list<const char*> known, const std::string& prefix) {
    if (!j.is_object()) throw ConfigError((prefix.empty() ? std::string("config") : prefix) + " must be an object");
    for (const auto& [key, value] : j.items()) {
        if (std::none_of(known.begin(), known.end(), [&](const char* k) { return key == k; }))
            throw ConfigError(prefix + key + ": unknown field");
    }
}

}  // namespace detail

inline ExperimentConfig config_from_json(const Json& j) {
    using detail::read_field;
    ExperimentConfig c;
    detail::reject_unknown(j,
                           {"experiment", "profiles", "rule", "training", "network", "n_items", "n_readouts", "items",
                            "lengths", "repeats", "frequencies", "frequency_order", "values", "memorization",
                            "dataset", "n_trials", "master_seed", "parallel", "output_dir"},
                           "");
    if (j.contains("experiment")) {
        std::string e;
        read_field(j, "experiment", e);
        c.experiment = parse_experiment(e);
    }
    read_field(j, "profiles", c.profiles);
    if (j.contains("rule")) {
        const auto& r = j.at("rule");
        detail::reject_unknown(r, {"alpha", "eta", "flexibility_floor"}, "rule.");
        read_field(r, "alpha", c.rule.alpha, "rule.");
        read_field(r, "eta", c.rule.eta, "rule.");
        read_field(r, "flexibility_floor", c.rule.flexibility_floor, "rule.");
    }
    if (j.contains("training")) {
        const auto& t = j.at("training");
        detail::reject_unknown(
            t, {"epochs", "batch_size", "negatives_per_positive", "negative_target", "positives_per_phase"},
            "training.");
        read_field(t, "epochs", c.epochs, "training.");
        read_field(t, "batch_size", c.batch_size, "training.");
        read_field(t, "negatives_per_positive", c.negatives_per_positive, "training.");
        read_field(t, "positives_per_phase", c.positives_per_phase, "training.");
        if (t.contains("negative_target")) {
            std::string s;
            read_field(t, "negative_target", s, "training.");
            if (s == "uniform_others") c.negative_target = NegativeTarget::uniform_others;
            else if (s == "sampled_others") c.negative_target = NegativeTarget::sampled_others;
            else if (s == "none_readout") c.negative_target = NegativeTarget::none_readout;
            else throw ConfigError("training.negative_target: unknown value '" + s + "'");
        }
    }
    if (j.contains("network")) {
        const auto& n = j.at("network");
        detail::reject_unknown(n, {"feature_dim", "hidden", "extractor_seed"}, "network.");
        read_field(n, "feature_dim", c.feature_dim, "network.");
        read_field(n, "hidden", c.hidden, "network.");
        read_field(n, "extractor_seed", c.extractor_seed, "network.");
    }
    read_field(j, "n_items", c.n_items);
    read_field(j, "n_readouts", c.n_readouts);
    read_field(j, "items", c.items);
    read_field(j, "lengths", c.lengths);
    read_field(j, "repeats", c.repeats);
    read_field(j, "frequencies", c.frequencies);
    if (j.contains("frequency_order")) {
        std::string s;
        read_field(j, "frequency_order", s);
        if (s == "blocks") c.frequency_order = FrequencyOrder::blocks;
        else if (s == "shuffled") c.frequency_order = FrequencyOrder::shuffled;
        else throw ConfigError("frequency_order: unknown value '" + s + "'");
    }
    read_field(j, "values", c.values);
    if (j.contains("memorization")) {
        const auto& m = j.at("memorization");
        detail::reject_unknown(m, {"n_shuffles", "criterion", "seed"}, "memorization.");
        read_field(m, "n_shuffles", c.memorization.n_shuffles, "memorization.");
        read_field(m, "criterion", c.memorization.criterion, "memorization.");
        read_field(m, "seed", c.memorization.seed, "memorization.");
    }
    if (j.contains("dataset")) {
        const auto& d = j.at("dataset");
        detail::reject_unknown(
            d,
            {"corpus_dir", "cache", "per_class_train", "per_class_test", "seed", "require_standard_counts",
             "features_file"},
            "dataset.");
        read_field(d, "corpus_dir", c.dataset.corpus_dir, "dataset.");
        read_field(d, "cache", c.dataset.cache, "dataset.");
        read_field(d, "per_class_train", c.dataset.per_class_train, "dataset.");
        read_field(d, "per_class_test", c.dataset.per_class_test, "dataset.");
        read_field(d, "seed", c.dataset.seed, "dataset.");
        read_field(d, "require_standard_counts", c.dataset.require_standard_counts, "dataset.");
        read_field(d, "features_file", c.dataset.features_file, "dataset.");
    }
    read_field(j, "n_trials", c.n_trials);
    read_field(j, "master_seed", c.master_seed);
    read_field(j, "parallel", c.parallel);
    read_field(j, "output_dir", c.output_dir);
    return c;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config " + path.string());
    Json j;
    try {
        j = Json::parse(in, nullptr, true, true);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
    return config_from_json(j);
}

// Fully resolved config; every defaulted value is spelled out.
inline std::string to_string(NegativeTarget t) {
    switch (t) {
    case NegativeTarget::uniform_others: return "uniform_others";
    case NegativeTarget::sampled_others: return "sampled_others";
    case NegativeTarget::none_readout: return "none_readout";
    }
    return "uniform_others";
}

inline Json to_json(const ExperimentConfig& c) {
    Json j;
    j["experiment"] = to_string(c.experiment);
    j["profiles"] = c.profiles;
    j["rule"] = {{"alpha", c.rule.alpha}, {"eta", c.rule.eta}, {"flexibility_floor", c.rule.flexibility_floor}};
    j["training"] = {{"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"negatives_per_positive", c.negatives_per_positive},
                     {"negative_target", to_string(c.negative_target)},
                     {"positives_per_phase", c.positives_per_phase}};
    j["network"] = {{"feature_dim", c.feature_dim}, {"hidden", c.hidden}, {"extractor_seed", c.extractor_seed}};
    j["n_items"] = c.n_items;
    j["n_readouts"] = c.n_readouts;
    j["items"] = c.items;
    j["lengths"] = c.lengths;
    j["repeats"] = c.repeats;
    j["frequencies"] = c.frequencies;
    j["frequency_order"] = c.frequency_order == FrequencyOrder::blocks ? "blocks" : "shuffled";
    j["values"] = c.resolved_values();
    j["memorization"] = {{"n_shuffles", c.memorization.n_shuffles},
                         {"criterion", c.memorization.criterion},
                         {"seed", c.memorization.seed}};
    j["dataset"] = {{"corpus_dir", c.dataset.corpus_dir},
                    {"cache", c.dataset.cache},
                    {"per_class_train", c.dataset.per_class_train},
                    {"per_class_test", c.dataset.per_class_test},
                    {"seed", c.dataset.seed},
                    {"require_standard_counts", c.dataset.require_standard_counts},
                    {"features_file", c.dataset.features_file}};
    j["n_trials"] = c.n_trials;
    j["master_seed"] = c.master_seed;
    j["parallel"] = c.parallel;
    j["output_dir"] = c.output_dir;
    return j;
}

// ---- conditions and trials --------------------------------------------------

enum class Schedule { sequence, repetition, poisoning, frequency };

struct Condition {
    std::string name;
    FlexibilityProfile profile;
    Schedule schedule = Schedule::sequence;
    int n_items = 10;
    int n_readouts = 10;
};

inline std::vector<Condition> expand_conditions(const ExperimentConfig& c) {
    std::vector<Condition> out;
    auto readouts = [&](int n) { return c.n_readouts > 0 ? c.n_readouts : n; };
    auto add = [&](const std::string& name, FlexibilityProfile p, Schedule s, int n) {
        out.push_back({name, p, s, n, readouts(n)});
    };
    switch (c.experiment) {
        case Experiment::serial_position:
            for (const auto& p : c.profiles) add(p, FlexibilityProfile::parse(p), Schedule::sequence, c.n_items);
            break;
        case Experiment::capacity_sweep:
            for (const auto& p : c.profiles)
                for (int n : c.lengths)
                    add(p + "_len" + std::to_string(n), FlexibilityProfile::parse(p), Schedule::sequence, n);
            break;
        case Experiment::repetition:
            for (const auto& p : c.profiles) add(p, FlexibilityProfile::parse(p), Schedule::repetition, c.n_items);
            break;
        case Experiment::poisoning:
            for (const auto& p : c.profiles) add(p, FlexibilityProfile::parse(p), Schedule::poisoning, c.n_items);
            break;
        case Experiment::frequency:
            for (const auto& p : c.profiles) add(p, FlexibilityProfile::parse(p), Schedule::frequency, c.n_items);
            break;
        case Experiment::single_value_profile:
            for (double v : c.resolved_values()) {
                auto p = FlexibilityProfile::constant(v);
                add("constant:" + Json(v).dump(), p, Schedule::sequence, c.n_items);
            }
            break;
        case Experiment::biased_profile:
            for (double v : c.resolved_values()) {
                auto p = FlexibilityProfile::biased(v);
                add("biased:" + Json(v).dump(), p, Schedule::sequence, c.n_items);
            }
            break;
    }
    return out;
}

// Condition names double as directory names.
inline std::string condition_dir(const std::string& name) {
    std::string s = name;
    for (char& ch : s)
        if (ch == ':' || ch == '/' || ch == ' ') ch = '_';
    return s;
}

inline std::uint64_t trial_seed(const ExperimentConfig& c, int trial) {
    return c.master_seed + static_cast<std::uint64_t>(trial);
}

// The first `n` items of a trial. Item lists of different lengths under one
// seed are prefixes of each other.
inline std::vector<TwoDigitClass> trial_items(const ExperimentConfig& c, std::uint64_t seed, int n) {
    std::vector<TwoDigitClass> all;
    if (!c.items.empty()) {
        for (const auto& s : c.items) all.push_back(TwoDigitClass::parse(s));
    } else {
        all = enumerate_classes();
        Rng rng(derive_seed(seed, {stream::items}));
        std::shuffle(all.begin(), all.end(), rng);
    }
    all.resize(static_cast<std::size_t>(n));
    return all;
}

// Frequencies of a trial's items: the configured multiset assigned to items
// in a seeded random order, so frequency and position are decoupled.
inline std::vector<int> trial_frequencies(const ExperimentConfig& c, std::uint64_t seed) {
    std::vector<int> f = c.frequencies;
    Rng rng(derive_seed(seed, {stream::schedule, 1}));
    std::shuffle(f.begin(), f.end(), rng);
    return f;
}

inline Curriculum make_curriculum(const ExperimentConfig& c, const Condition& cond,
                                  const std::vector<TwoDigitClass>& items, const std::vector<int>& frequencies,
                                  std::uint64_t seed) {
    Curriculum cur;
    switch (cond.schedule) {
        case Schedule::sequence: cur = build_sequence(items, cond.n_readouts); break;
        case Schedule::repetition: cur = build_repetition(items, cond.n_readouts, c.repeats, false); break;
        case Schedule::poisoning: cur = build_repetition(items, cond.n_readouts, c.repeats + 1, true); break;
        case Schedule::frequency:
            cur = build_frequency(items, cond.n_readouts, frequencies, seed, c.frequency_order);
            break;
    }
    cur.negatives_per_positive = c.negatives_per_positive;
    cur.negative_target = c.negative_target;
    return cur;
}

inline std::vector<Eigen::Index> net_dims(const ExperimentConfig& c, const Curriculum& cur) {
    std::vector<Eigen::Index> dims{c.feature_dim};
    dims.insert(dims.end(), c.hidden.begin(), c.hidden.end());
    dims.push_back(cur.output_count());
    return dims;
}

struct TrialResult {
    int trial = 0;
    std::uint64_t seed = 0;
    std::vector<TwoDigitClass> items;
    std::vector<double> frequency;  // phases per item
    std::size_t n_phases = 0;
    RunResult run;
    MemoryReport report;
    CorrelationReport correlation;
    RepetitionMetrics repetition;
    std::string error;

    bool ok() const { return error.empty(); }
};

template <class Update = MetaplasticUpdate>
TrialResult run_trial(const ExperimentConfig& c, const Condition& cond, const FeatureBank& bank, int trial) {
    TrialResult r;
    r.trial = trial;
    r.seed = trial_seed(c, trial);
    r.items = trial_items(c, r.seed, cond.n_items);
    std::vector<int> freqs;
    if (cond.schedule == Schedule::frequency) freqs = trial_frequencies(c, r.seed);
    const Curriculum cur = make_curriculum(c, cond, r.items, freqs, r.seed);
    r.n_phases = cur.phases.size();
    for (std::size_t i = 0; i < r.items.size(); ++i) r.frequency.push_back(static_cast<double>(cur.frequency(i)));

    FlexibilityProfile profile = cond.profile;
    profile.seed = r.seed;
    ClassifierNet net = init_classifier(net_dims(c, cur), profile, r.seed);
    RunOptions options;
    options.train.epochs = c.epochs;
    options.train.batch_size = c.batch_size;
    options.positives_per_phase = c.positives_per_phase;
    r.run = run<Update>(cur, net, bank, c.rule, options, r.seed);

    MemorizationOptions mem = c.memorization;
    mem.seed = derive_seed(c.memorization.seed, {r.seed});
    r.report = report(r.run, pool_predictions(net, cur, bank), cur.n_readouts, mem);
    if (r.items.size() >= 3) r.correlation = correlate(r.report.per_item_accuracy, r.frequency);
    r.repetition = repetition_metrics(cond.schedule == Schedule::frequency
                                          ? std::vector<std::vector<double>>{r.run.checkpoints.back()}
                                          : repetition_checkpoints(r.run, r.items.size()));
    return r;
}

// Runs all trials of one condition, up to `parallel` at a time. Results are
// ordered by trial index; a failing trial records its error and the rest
// continue.
template <class Update = MetaplasticUpdate>
std::vector<TrialResult> run_condition(const ExperimentConfig& c, const Condition& cond, const FeatureBank& bank) {
    std::vector<TrialResult> results(static_cast<std::size_t>(c.n_trials));
    std::atomic<int> next{0};
    auto worker = [&] {
        for (int t = next++; t < c.n_trials; t = next++) {
            try {
                results[static_cast<std::size_t>(t)] = run_trial<Update>(c, cond, bank, t);
            } catch (const std::exception& e) {
                auto& r = results[static_cast<std::size_t>(t)];
                r.trial = t;
                r.seed = trial_seed(c, t);
                r.error = e.what();
            }
        }
    };
    const int width = std::min(c.parallel, c.n_trials);
    if (width <= 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < width; ++i) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
    }
    return results;
}

// ---- dataset preparation ------------------------------------------------------

inline Json dataset_manifest(const DatasetConfig& d, const TwoDigitDataset& ds) {
    Json j;
    j["corpus_dir"] = d.corpus_dir;
    j["cache"] = d.cache;
    j["seed"] = d.seed;
    j["per_class_train"] = d.per_class_train;
    j["per_class_test"] = d.per_class_test;
    j["class_count"] = ds.classes.size();
    std::vector<std::string> labels;
    for (const auto& k : ds.classes) labels.push_back(k.label());
    j["classes"] = labels;
    char hash[19];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(ds.content_hash()));
    j["content_hash"] = std::string(hash);
    j["image_rows"] = pair_rows;
    j["image_cols"] = pair_cols;
    return j;
}

struct BuildOutcome {
    bool up_to_date = false;
    Json manifest;
};

// Composes all 45 classes and writes the cache plus its JSON manifest. An
// existing cache whose manifest matches the config and whose content hash
// still checks out is left untouched.
inline BuildOutcome build_dataset(const DatasetConfig& d) {
    const std::filesystem::path cache_path = d.cache;
    const auto manifest_path = d.manifest_path();
    if (std::filesystem::exists(cache_path) && std::filesystem::exists(manifest_path)) {
        try {
            std::ifstream in(manifest_path);
            const Json old = Json::parse(in);
            const bool same = old.value("corpus_dir", "") == d.corpus_dir && old.value("seed", 0ULL) == d.seed &&
                              old.value("per_class_train", 0ULL) == d.per_class_train &&
                              old.value("per_class_test", 0ULL) == d.per_class_test;
            if (same) {
                const auto ds = cache::read(cache_path, d.seed);
                const Json now = dataset_manifest(d, ds);
                if (now["content_hash"] == old["content_hash"]) return {true, old};
            }
        } catch (const std::exception&) {
            // unreadable leftovers are rebuilt
        }
    }
    const auto corpus = load_corpus(d.corpus_dir, {d.require_standard_counts});
    const auto ds = compose(corpus, enumerate_classes(), d.per_class_train, d.per_class_test, d.seed);
    if (cache_path.has_parent_path()) std::filesystem::create_directories(cache_path.parent_path());
    cache::write(ds, cache_path);
    BuildOutcome out{false, dataset_manifest(d, ds)};
    std::ofstream(manifest_path) << out.manifest.dump(2) << "\n";
    return out;
}

inline TwoDigitDataset load_dataset(const DatasetConfig& d) {
    if (!std::filesystem::exists(d.cache))
        throw IngestError("dataset cache " + d.cache + " not found; run build-dataset first");
    auto ds = cache::read(d.cache, d.seed);
    if (ds.per_class_train != d.per_class_train || ds.per_class_test != d.per_class_test)
        throw IngestError("dataset cache " + d.cache + " holds " + std::to_string(ds.per_class_train) + "/" +
                          std::to_string(ds.per_class_test) + " images per class, config asks for " +
                          std::to_string(d.per_class_train) + "/" + std::to_string(d.per_class_test) +
                          "; rerun build-dataset");
    return ds;
}

inline FeatureBank feature_bank(const ExperimentConfig& c, const TwoDigitDataset& ds) {
    return build_feature_bank(ds, FeatureExtractor(pair_pixels, c.feature_dim, c.extractor_seed));
}

// ---- result files -------------------------------------------------------------

inline std::string fmt(double v) {
    if (std::isnan(v)) return "nan";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    return buf;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IngestError("cannot write " + path.string());
    out << text;
}

inline double min_gain(const RepetitionMetrics& m) {
    return m.min_trace.empty() ? std::nan("") : m.min_trace.back() - m.min_trace.front();
}

struct TrialSummary {
    double n_memorized, mean_accuracy, gross_memory, first_item, last_item;
    double rho_order, p_order, rho_frequency, p_frequency, min_gain, delta_performance;
};

inline TrialSummary summarize(const TrialResult& r) {
    const auto& acc = r.report.per_item_accuracy;
    return {static_cast<double>(r.report.n_memorized),
            r.report.mean_accuracy,
            r.report.gross_memory,
            acc.front(),
            acc.back(),
            r.correlation.order.rho,
            r.correlation.order.p,
            r.correlation.frequency.rho,
            r.correlation.frequency.p,
            min_gain(r.repetition),
            r.repetition.delta_performance};
}

inline const std::vector<std::string>& summary_columns() {
    static const std::vector<std::string> cols = {
        "n_memorized",   "mean_accuracy", "gross_memory",  "first_item_accuracy", "last_item_accuracy", "rho_order",
        "p_order",       "rho_frequency", "p_frequency",   "min_gain",            "delta_performance"};
    return cols;
}

inline std::vector<double> summary_values(const TrialSummary& s) {
    return {s.n_memorized,    s.mean_accuracy, s.gross_memory, s.first_item, s.last_item,        s.rho_order,
            s.p_order,        s.rho_frequency, s.p_frequency,  s.min_gain,   s.delta_performance};
}

inline Json spearman_json(const SpearmanResult& s) {
    Json j;
    j["defined"] = s.defined;
    j["rho"] = s.defined ? Json(s.rho) : Json(nullptr);
    j["p"] = s.defined ? Json(s.p) : Json(nullptr);
    return j;
}

inline Json trial_json(const TrialResult& r, const Condition& cond) {
    Json j;
    j["condition"] = cond.name;
    j["profile"] = cond.profile.name();
    j["trial"] = r.trial;
    j["seed"] = r.seed;
    if (!r.ok()) {
        j["error"] = r.error;
        return j;
    }
    std::vector<std::string> labels;
    for (const auto& k : r.items) labels.push_back(k.label());
    j["items"] = labels;
    j["n_phases"] = r.n_phases;
    j["n_readouts"] = cond.n_readouts;
    Json rep;
    rep["per_item_accuracy"] = r.report.per_item_accuracy;
    rep["memorized"] = r.report.memorized;
    rep["n_memorized"] = r.report.n_memorized;
    rep["mean_accuracy"] = r.report.mean_accuracy;
    rep["gross_memory"] = r.report.gross_memory;
    rep["chance_level"] = r.report.chance_level;
    j["memory_report"] = rep;
    j["correlation_report"] = {{"order", spearman_json(r.correlation.order)},
                               {"frequency", spearman_json(r.correlation.frequency)}};
    j["repetition"] = {{"min_trace", r.repetition.min_trace},
                       {"delta_performance", r.repetition.delta_performance}};
    return j;
}

inline void write_trial(const std::filesystem::path& dir, const TrialResult& r, const Condition& cond) {
    std::filesystem::create_directories(dir);
    write_text(dir / "report.json", trial_json(r, cond).dump(2) + "\n");
    if (!r.ok()) return;
    std::ostringstream cp;
    cp << "phase_index,item_index,accuracy\n";
    for (std::size_t p = 0; p < r.run.checkpoints.size(); ++p)
        for (std::size_t i = 0; i < r.run.checkpoints[p].size(); ++i)
            cp << p << ',' << i << ',' << fmt(r.run.checkpoints[p][i]) << '\n';
    write_text(dir / "checkpoints.csv", cp.str());
    std::ostringstream it;
    it << "item_index,item_class,frequency,accuracy,memorized\n";
    for (std::size_t i = 0; i < r.items.size(); ++i)
        it << i << ',' << r.items[i].label() << ',' << r.frequency[i] << ',' << fmt(r.report.per_item_accuracy[i])
           << ',' << (r.report.memorized[i] ? 1 : 0) << '\n';
    write_text(dir / "items.csv", it.str());
}

// Writes the per-condition files; returns the number of failed trials.
inline int write_condition(const std::filesystem::path& dir, const Condition& cond,
                           const std::vector<TrialResult>& results) {
    std::filesystem::create_directories(dir);
    int failed = 0;
    std::ostringstream trials, items;
    trials << "trial,seed,status";
    for (const auto& c : summary_columns()) trials << ',' << c;
    trials << '\n';
    items << "trial,item_index,accuracy,memorized\n";
    std::vector<const TrialResult*> ok;
    for (const auto& r : results) {
        write_trial(dir / ("trial_" + std::to_string(r.trial)), r, cond);
        trials << r.trial << ',' << r.seed << ',' << (r.ok() ? "ok" : "failed");
        if (!r.ok()) {
            ++failed;
            for (std::size_t k = 0; k < summary_columns().size(); ++k) trials << ",nan";
            trials << '\n';
            continue;
        }
        ok.push_back(&r);
        for (double v : summary_values(summarize(r))) trials << ',' << fmt(v);
        trials << '\n';
        for (std::size_t i = 0; i < r.report.per_item_accuracy.size(); ++i)
            items << r.trial << ',' << i << ',' << fmt(r.report.per_item_accuracy[i]) << ','
                  << (r.report.memorized[i] ? 1 : 0) << '\n';
    }
    write_text(dir / "trials.csv", trials.str());
    write_text(dir / "trial_items.csv", items.str());

    std::ostringstream agg_items, agg_phases;
    agg_items << "item_index,mean,sd,n\n";
    agg_phases << "phase_index,item_index,mean,sd,n\n";
    if (!ok.empty()) {
        const std::size_t n_items = ok.front()->report.per_item_accuracy.size();
        const std::size_t n_phases = ok.front()->run.checkpoints.size();
        for (std::size_t i = 0; i < n_items; ++i) {
            std::vector<double> v;
            for (const auto* r : ok) v.push_back(r->report.per_item_accuracy[i]);
            agg_items << i << ',' << fmt(stats::mean(v)) << ',' << fmt(stats::sd(v)) << ',' << v.size() << '\n';
        }
        for (std::size_t p = 0; p < n_phases; ++p)
            for (std::size_t i = 0; i < n_items; ++i) {
                std::vector<double> v;
                for (const auto* r : ok) v.push_back(r->run.checkpoints[p][i]);
                agg_phases << p << ',' << i << ',' << fmt(stats::mean(v)) << ',' << fmt(stats::sd(v)) << ','
                           << v.size() << '\n';
            }
    }
    write_text(dir / "aggregate_items.csv", agg_items.str());
    write_text(dir / "aggregate_phases.csv", agg_phases.str());
    return failed;
}

inline Json run_manifest(const ExperimentConfig& c, const std::vector<Condition>& conditions, const Json& dataset) {
    Json j;
    j["config"] = to_json(c);
    Json conds = Json::array();
    for (const auto& cond : conditions) {
        conds.push_back({{"name", cond.name},
                         {"directory", condition_dir(cond.name)},
                         {"profile", cond.profile.name()},
                         {"n_items", cond.n_items},
                         {"n_readouts", cond.n_readouts},
                         {"chance_level", 1.0 / cond.n_readouts}});
    }
    j["conditions"] = conds;
    j["dataset"] = dataset;
    j["trial_seeds"] = "master_seed + trial index";
    return j;
}

struct RunSummary {
    std::vector<Condition> conditions;
    std::vector<std::vector<TrialResult>> results;
    int failed_trials = 0;
};

// Loads the dataset cache, runs every condition and writes all result files.
template <class Update = MetaplasticUpdate>
RunSummary run_experiment(const ExperimentConfig& c, std::ostream* log = nullptr) {
    c.validate();
    FeatureBank bank;
    Json dataset;
    if (c.dataset.features_file.empty()) {
        const auto ds = load_dataset(c.dataset);
        bank = feature_bank(c, ds);
        dataset = dataset_manifest(c.dataset, ds);
    } else {
        bank = load_feature_csv(c.dataset.features_file);
        dataset = {{"features_file", c.dataset.features_file},
                   {"classes", bank.classes.size()},
                   {"feature_dim", bank.feature_dim()}};
    }
    // The net input follows the bank, which matters for feature files.
    ExperimentConfig resolved = c;
    resolved.feature_dim = bank.feature_dim();
    resolved.validate();
    RunSummary s;
    s.conditions = expand_conditions(resolved);
    const std::filesystem::path out = resolved.output_dir;
    std::filesystem::create_directories(out);
    write_text(out / "manifest.json", run_manifest(resolved, s.conditions, dataset).dump(2) + "\n");
    for (const auto& cond : s.conditions) {
        if (log) *log << "condition " << cond.name << ": " << c.n_trials << " trials\n" << std::flush;
        s.results.push_back(run_condition<Update>(resolved, cond, bank));
        s.failed_trials += write_condition(out / condition_dir(cond.name), cond, s.results.back());
        for (const auto& r : s.results.back())
            if (!r.ok() && log) *log << "  trial " << r.trial << " failed: " << r.error << "\n";
    }
    return s;
}

// ---- aggregation --------------------------------------------------------------

struct ConditionData {
    std::string name;
    int n_items = 0;
    double chance = 0.0;
    std::map<std::string, std::vector<double>> metrics;  // column -> values over trials
    std::vector<std::vector<double>> item_accuracy;      // [item][trial]
};

namespace detail {

inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream in(line);
    while (std::getline(in, cell, ',')) out.push_back(cell);
    return out;
}

inline double parse_cell(const std::string& s) { return s == "nan" ? std::nan("") : std::stod(s); }

inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IngestError("cannot read " + path.string());
    std::vector<std::vector<std::string>> rows;
    std::string line;
    while (std::getline(in, line))
        if (!line.empty()) rows.push_back(split_csv(line));
    if (rows.empty()) throw IngestError(path.string() + ": empty file");
    return rows;
}

inline std::vector<double> finite(const std::vector<double>& v) {
    std::vector<double> out;
    for (double x : v)
        if (std::isfinite(x)) out.push_back(x);
    return out;
}

}  // namespace detail

// Reads every condition of the given run directories. Conditions with the
// same name in several directories are pooled; their shapes must agree.
inline std::vector<ConditionData> load_runs(const std::vector<std::filesystem::path>& dirs) {
    if (dirs.empty()) throw ConfigError("aggregate needs at least one run directory");
    std::vector<ConditionData> out;
    for (const auto& dir : dirs) {
        std::ifstream in(dir / "manifest.json");
        if (!in) throw IngestError("no manifest.json in " + dir.string());
        const Json manifest = Json::parse(in);
        for (const auto& cj : manifest.at("conditions")) {
            ConditionData cd;
            cd.name = cj.at("name").get<std::string>();
            cd.n_items = cj.at("n_items").get<int>();
            cd.chance = cj.at("chance_level").get<double>();
            const auto cdir = dir / cj.at("directory").get<std::string>();
            const auto trials = detail::read_csv(cdir / "trials.csv");
            const auto& header = trials.front();
            std::vector<std::string> live;
            for (std::size_t r = 1; r < trials.size(); ++r) {
                if (trials[r].size() != header.size()) throw IngestError(cdir.string() + "/trials.csv: ragged row");
                if (trials[r][2] != "ok") continue;
                live.push_back(trials[r][0]);
                for (std::size_t k = 3; k < header.size(); ++k)
                    cd.metrics[header[k]].push_back(detail::parse_cell(trials[r][k]));
            }
            cd.item_accuracy.assign(static_cast<std::size_t>(cd.n_items), {});
            const auto items = detail::read_csv(cdir / "trial_items.csv");
            for (std::size_t r = 1; r < items.size(); ++r) {
                const auto i = std::stoul(items[r][1]);
                if (i >= cd.item_accuracy.size())
                    throw IngestError(cdir.string() + "/trial_items.csv: item index " + items[r][1] +
                                      " outside the condition's " + std::to_string(cd.n_items) + " items");
                cd.item_accuracy[i].push_back(detail::parse_cell(items[r][2]));
            }
            auto existing = std::find_if(out.begin(), out.end(), [&](const ConditionData& o) { return o.name == cd.name; });
            if (existing == out.end()) {
                out.push_back(std::move(cd));
                continue;
            }
            if (existing->n_items != cd.n_items || existing->chance != cd.chance)
                throw ShapeError("mismatched run shapes for condition " + cd.name + ": " +
                                 std::to_string(existing->n_items) + " vs " + std::to_string(cd.n_items) + " items");
            for (auto& [k, v] : cd.metrics) existing->metrics[k].insert(existing->metrics[k].end(), v.begin(), v.end());
            for (std::size_t i = 0; i < cd.item_accuracy.size(); ++i)
                existing->item_accuracy[i].insert(existing->item_accuracy[i].end(), cd.item_accuracy[i].begin(),
                                                  cd.item_accuracy[i].end());
        }
    }
    return out;
}

// One-sided t-tests of each item's accuracy against chance, and two-sample
// t-tests between every pair of conditions for every summary metric (and per
// item when the item counts agree).
inline void write_aggregate(const std::vector<ConditionData>& conditions, const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    std::ostringstream chance;
    chance << "condition,item_index,n,mean,sd,chance,t,df,p\n";
    for (const auto& c : conditions) {
        for (std::size_t i = 0; i < c.item_accuracy.size(); ++i) {
            const auto& v = c.item_accuracy[i];
            chance << c.name << ',' << i << ',' << v.size() << ',' << fmt(stats::mean(v)) << ',' << fmt(stats::sd(v))
                   << ',' << fmt(c.chance);
            if (v.size() < 2) {
                chance << ",nan,nan,nan\n";
                continue;
            }
            const auto t = stats::one_sample_greater(v, c.chance);
            chance << ',' << fmt(t.t) << ',' << fmt(t.df) << ',' << fmt(t.p) << '\n';
        }
    }
    write_text(out / "tests_vs_chance.csv", chance.str());

    std::ostringstream cmp;
    cmp << "metric,condition_a,condition_b,n_a,n_b,mean_a,mean_b,t,df,p\n";
    auto row = [&](const std::string& metric, const ConditionData& a, const ConditionData& b,
                   const std::vector<double>& va, const std::vector<double>& vb) {
        const auto fa = detail::finite(va);
        const auto fb = detail::finite(vb);
        cmp << metric << ',' << a.name << ',' << b.name << ',' << fa.size() << ',' << fb.size() << ','
            << fmt(stats::mean(fa)) << ',' << fmt(stats::mean(fb));
        if (fa.size() < 2 || fb.size() < 2) {
            cmp << ",nan,nan,nan\n";
            return;
        }
        const auto t = stats::two_sample(fa, fb);
        cmp << ',' << fmt(t.t) << ',' << fmt(t.df) << ',' << fmt(t.p) << '\n';
    };
    for (std::size_t a = 0; a < conditions.size(); ++a) {
        for (std::size_t b = a + 1; b < conditions.size(); ++b) {
            const auto& ca = conditions[a];
            const auto& cb = conditions[b];
            for (const auto& m : summary_columns()) {
                if (m.rfind("p_", 0) == 0) continue;
                auto ia = ca.metrics.find(m);
                auto ib = cb.metrics.find(m);
                if (ia == ca.metrics.end() || ib == cb.metrics.end()) continue;
                row(m, ca, cb, ia->second, ib->second);
            }
            if (ca.n_items == cb.n_items)
                for (std::size_t i = 0; i < ca.item_accuracy.size(); ++i)
                    row("item_" + std::to_string(i), ca, cb, ca.item_accuracy[i], cb.item_accuracy[i]);
        }
    }
    write_text(out / "comparisons.csv", cmp.str());
}

}  // namespace metaplastic
