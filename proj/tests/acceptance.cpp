// End-to-end acceptance run. One PASS/FAIL line per criterion; exit status 1
// if any criterion fails. Experiment results are left under ./acceptance_runs.

#include <boost/multiprecision/cpp_dec_float.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <set>
#include <sstream>
#include <thread>

#include "metaplastic/experiment.hpp"
#include "metaplastic/selfcheck.hpp"

using namespace metaplastic;
namespace fs = std::filesystem;

namespace {

constexpr int acceptance_trials = 20;
constexpr double alpha_level = 0.01;

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string num(double v, int digits = 3) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

std::string pval(double p) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.2g", p);
    return buf;
}

const fs::path run_root = "acceptance_runs";

ExperimentConfig base_config(Experiment e) {
    ExperimentConfig c;
    c.experiment = e;
    c.n_trials = acceptance_trials;
    c.parallel = static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
    c.dataset.corpus_dir = METAPLASTIC_CORPUS_DIR;
    c.dataset.cache = (run_root / "dataset" / "two_digit.mpd").string();
    c.output_dir = (run_root / to_string(e)).string();
    return c;
}

std::vector<TrialSummary> summaries(const RunSummary& s, const std::string& condition) {
    for (std::size_t k = 0; k < s.conditions.size(); ++k) {
        if (s.conditions[k].name != condition) continue;
        std::vector<TrialSummary> out;
        for (const auto& r : s.results[k]) {
            if (!r.ok()) throw NumericalFault(condition + " trial " + std::to_string(r.trial) + " failed: " + r.error);
            out.push_back(summarize(r));
        }
        return out;
    }
    throw ConfigError("no condition " + condition);
}

const std::vector<TrialResult>& results_of(const RunSummary& s, const std::string& condition) {
    for (std::size_t k = 0; k < s.conditions.size(); ++k)
        if (s.conditions[k].name == condition) return s.results[k];
    throw ConfigError("no condition " + condition);
}

template <class F>
std::vector<double> column(const std::vector<TrialSummary>& v, F f) {
    std::vector<double> out;
    for (const auto& s : v) {
        const double x = f(s);
        if (std::isfinite(x)) out.push_back(x);
    }
    return out;
}

// Accept only "a greater than b" at the acceptance level.
bool greater(const std::vector<double>& a, const std::vector<double>& b, stats::TTest* out = nullptr) {
    const auto t = stats::two_sample(a, b);
    if (out) *out = t;
    return t.t > 0 && t.p < alpha_level;
}

RunSummary run_logged(const ExperimentConfig& c) {
    std::ostringstream sink;
    return run_experiment(c, &sink);
}

// ---- 1 -------------------------------------------------------------------------

double big_scale(const char* f, const char* dw, const char* alpha) {
    using Big = boost::multiprecision::cpp_dec_float_50;
    const Big bf(f), bdw(dw), ba(alpha);
    const Big t = boost::multiprecision::tanh(ba * (Big(1) - bf) / bf * bdw);
    return static_cast<double>(Big(1) - t * t);
}

Outcome criterion_scale() {
    int bad = 0;
    for (double f = 0.0; f <= 1.0; f += 0.05)
        for (double dw = -3.0; dw <= 3.0; dw += 0.1)
            for (double a : {0.5, 1.0, 10.0}) {
                const double s = scale(f, dw, a);
                if (s != scale(f, -dw, a) || s < 0.0 || s > 1.0) ++bad;
                if (scale(1.0, dw, a) != 1.0 || scale(f, 0.0, a) != 1.0) ++bad;
                if (dw >= 0 && scale(f, dw + 0.1, a) > s) ++bad;
                if (f + 0.05 <= 1.0 && dw != 0.0 && scale(f + 0.05, dw, a) < s) ++bad;
            }
    const double p1 = scale(1.0, 5.3, 1.0);
    const double p2 = scale(0.5, 0.0, 2.0);
    const double p3 = scale(0.5, 1.0, 1.0);
    const double o3 = big_scale("0.5", "1", "1");
    const bool points = p1 == 1.0 && p2 == 1.0 && std::abs(p3 - o3) < 1e-6 && std::abs(p3 - 0.419974) < 1e-6;
    return {bad == 0 && points, std::to_string(bad) + " property violations; S(0.5,1,1)=" + num(p3, 7) +
                                    " vs oracle " + num(o3, 7)};
}

// ---- 2 -------------------------------------------------------------------------

Outcome criterion_equivalence(const FeatureBank& bank) {
    const auto items = trial_items(ExperimentConfig{}, 3, 10);
    const auto cur = build_sequence(items, 10);
    ExperimentConfig c;
    auto a = init_classifier(net_dims(c, cur), FlexibilityProfile::conventional(), 3);
    auto b = a;
    RunOptions opt;
    opt.train.epochs = c.epochs;
    opt.train.batch_size = c.batch_size;
    const auto ra = run<MetaplasticUpdate>(cur, a, bank, c.rule, opt, 3);
    const auto rb = run<PlainSgdUpdate>(cur, b, bank, c.rule, opt, 3);
    const bool same = ra.checkpoints == rb.checkpoints && a == b;
    return {same, same ? "10 phases, checkpoints and weights bitwise equal" : "outputs differ"};
}

// ---- 3 -------------------------------------------------------------------------

Outcome criterion_gradients() {
    double worst = 0.0;
    std::size_t probes = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        auto net = init_classifier({8, 6, 4}, FlexibilityProfile::hybrid(), seed);
        Rng rng(seed);
        std::normal_distribution<double> g(0.0, 0.1);
        for (auto& l : net.layers())
            for (Eigen::Index i = 0; i < l.biases().size(); ++i) l.biases()(i) = g(rng);
        worst = std::max(worst, detail::gradient_check_error(net, detail::random_set(8, 4, 6, seed + 50)));
        probes += net.parameter_count();
    }
    return {worst < 1e-4 && probes >= 100,
            std::to_string(probes) + " probes, worst relative error " + pval(worst)};
}

// ---- 4 -------------------------------------------------------------------------

Outcome criterion_dataset(const DatasetConfig& d) {
    const auto classes = enumerate_classes();
    bool ok = classes.size() == 45;
    const std::set<TwoDigitClass> set(classes.begin(), classes.end());
    ok = ok && set.count(TwoDigitClass(0, 1)) == 1;
    bool rejected = true;
    for (auto [a, b] : {std::pair{1, 0}, std::pair{0, 0}}) {
        try {
            TwoDigitClass bad(a, b);
            rejected = false;
        } catch (const ConfigError&) {
        }
    }
    ok = ok && rejected;

    const auto corpus = load_corpus(d.corpus_dir);
    const auto ds = compose(corpus, classes, d.per_class_train, d.per_class_test, d.seed);
    for (std::size_t k = 0; k < ds.classes.size(); ++k)
        ok = ok && ds.train[k].size() == d.per_class_train && ds.test[k].size() == d.per_class_test;

    // Leakage: no digit image used on the test side also appears on the train side.
    std::set<std::vector<std::uint8_t>> train_digits;
    for (const auto& cls : ds.train)
        for (auto [l, r] : cls.sources)
            for (auto i : {l, r}) {
                const auto img = corpus.train.image(i);
                train_digits.emplace(img.begin(), img.end());
            }
    std::size_t leaks = 0;
    for (const auto& cls : ds.test)
        for (auto [l, r] : cls.sources)
            for (auto i : {l, r}) {
                const auto img = corpus.test.image(i);
                leaks += train_digits.count(std::vector<std::uint8_t>(img.begin(), img.end()));
            }
    const auto again = compose(corpus, classes, d.per_class_train, d.per_class_test, d.seed);
    const bool deterministic = again.content_hash() == ds.content_hash();
    return {ok && leaks == 0 && deterministic,
            "45 classes, " + std::to_string(d.per_class_train) + "/" + std::to_string(d.per_class_test) +
                " per class, " + std::to_string(leaks) + " shared digit images, deterministic=" +
                (deterministic ? "yes" : "no")};
}

// ---- 5 -------------------------------------------------------------------------

Outcome criterion_serial_position() {
    const auto s = run_logged(base_config(Experiment::serial_position));
    const double chance = 0.1;
    const auto conv = summaries(s, "conventional");
    const auto stab = summaries(s, "stable");
    const auto hyb = summaries(s, "hybrid");
    auto first = [](const TrialSummary& t) { return t.first_item; };
    auto last = [](const TrialSummary& t) { return t.last_item; };

    const double conv_first = stats::mean(column(conv, first));
    const auto conv_last = stats::one_sample_greater(column(conv, last), chance);
    const bool conv_ok = std::abs(conv_first - chance) <= 0.05 && conv_last.p < alpha_level;

    const auto stab_first = stats::one_sample_greater(column(stab, first), chance);
    const auto stab_last = stats::one_sample_greater(column(stab, last), chance);
    const bool stab_ok = stab_first.p < alpha_level && !(stab_last.p < alpha_level);

    const auto n_mem = column(hyb, [](const TrialSummary& t) { return t.n_memorized; });
    const double frac = static_cast<double>(std::count_if(n_mem.begin(), n_mem.end(), [](double n) { return n >= 9; })) /
                        static_cast<double>(n_mem.size());
    const bool hyb_ok = frac >= 0.8;

    std::string d = "conventional first " + num(conv_first) + " last p=" + pval(conv_last.p) + (conv_ok ? " ok" : " FAIL") +
                    "; stable first p=" + pval(stab_first.p) + " last p=" + pval(stab_last.p) +
                    (stab_ok ? " ok" : " FAIL") + "; hybrid >=9 memorized in " + num(100 * frac, 0) + "% of trials" +
                    (hyb_ok ? " ok" : " FAIL");
    return {conv_ok && stab_ok && hyb_ok, d};
}

// ---- 6 -------------------------------------------------------------------------

Outcome criterion_capacity() {
    auto c = base_config(Experiment::capacity_sweep);
    c.profiles = {"hybrid", "conventional"};
    const auto s = run_logged(c);
    const auto h30 = summaries(s, "hybrid_len30");
    const auto c30 = summaries(s, "conventional_len30");
    stats::TTest tn, tg;
    const bool n_ok = greater(column(h30, [](auto& t) { return t.n_memorized; }),
                              column(c30, [](auto& t) { return t.n_memorized; }), &tn);
    const bool g_ok = greater(column(h30, [](auto& t) { return t.gross_memory; }),
                              column(c30, [](auto& t) { return t.gross_memory; }), &tg);
    std::vector<double> lengths, means;
    for (int n : c.lengths) {
        lengths.push_back(n);
        means.push_back(stats::mean(column(summaries(s, "hybrid_len" + std::to_string(n)),
                                           [](auto& t) { return t.mean_accuracy; })));
    }
    const auto rho = spearman(lengths, means);
    const bool trade_ok = rho.defined && rho.rho < 0;
    std::string d = "30 items: n_memorized " + num(stats::mean(column(h30, [](auto& t) { return t.n_memorized; })), 2) +
                    " vs " + num(stats::mean(column(c30, [](auto& t) { return t.n_memorized; })), 2) + " (t=" +
                    num(tn.t, 2) + ", p=" + pval(tn.p) + "), gross " +
                    num(stats::mean(column(h30, [](auto& t) { return t.gross_memory; })), 2) + " vs " +
                    num(stats::mean(column(c30, [](auto& t) { return t.gross_memory; })), 2) + " (p=" + pval(tg.p) +
                    "); hybrid mean accuracy by length " + num(means[0]) + "/" + num(means[1]) + "/" + num(means[2]) +
                    " rho=" + num(rho.rho, 2);
    return {n_ok && g_ok && trade_ok, d};
}

// ---- 7 -------------------------------------------------------------------------

Outcome criterion_repetition() {
    auto c = base_config(Experiment::repetition);
    c.profiles = {"hybrid", "conventional"};
    const auto s = run_logged(c);
    int monotone = 0, total = 0;
    for (const auto& r : results_of(s, "hybrid")) {
        if (!r.ok()) throw NumericalFault("hybrid trial failed: " + r.error);
        const auto& m = r.repetition.min_trace;
        ++total;
        if (std::is_sorted(m.begin(), m.end())) ++monotone;
    }
    const double frac = static_cast<double>(monotone) / total;
    const auto h = summaries(s, "hybrid");
    const auto k = summaries(s, "conventional");
    stats::TTest tg, td;
    const bool gain_ok = greater(column(h, [](auto& t) { return t.min_gain; }),
                                 column(k, [](auto& t) { return t.min_gain; }), &tg);
    const bool delta_ok = greater(column(k, [](auto& t) { return t.delta_performance; }),
                                  column(h, [](auto& t) { return t.delta_performance; }), &td);
    std::string d = "hybrid min accuracy non-decreasing in " + num(100 * frac, 0) + "% of trials; gain " +
                    num(stats::mean(column(h, [](auto& t) { return t.min_gain; }))) + " vs " +
                    num(stats::mean(column(k, [](auto& t) { return t.min_gain; }))) + " (p=" + pval(tg.p) +
                    "); final max-min " + num(stats::mean(column(h, [](auto& t) { return t.delta_performance; }))) +
                    " vs " + num(stats::mean(column(k, [](auto& t) { return t.delta_performance; }))) +
                    " (p=" + pval(td.p) + ")";
    return {frac >= 0.8 && gain_ok && delta_ok, d};
}

// ---- 8 -------------------------------------------------------------------------

Outcome criterion_poisoning() {
    auto c = base_config(Experiment::poisoning);
    c.profiles = {"hybrid", "conventional"};
    const auto s = run_logged(c);
    const auto h = summaries(s, "hybrid");
    const auto k = summaries(s, "conventional");
    stats::TTest tn, ta;
    const bool n_ok = greater(column(h, [](auto& t) { return t.n_memorized; }),
                              column(k, [](auto& t) { return t.n_memorized; }), &tn);
    const bool a_ok = greater(column(h, [](auto& t) { return t.mean_accuracy; }),
                              column(k, [](auto& t) { return t.mean_accuracy; }), &ta);
    std::string d = "n_memorized " + num(stats::mean(column(h, [](auto& t) { return t.n_memorized; })), 2) + " vs " +
                    num(stats::mean(column(k, [](auto& t) { return t.n_memorized; })), 2) + " (p=" + pval(tn.p) +
                    "); mean accuracy " + num(stats::mean(column(h, [](auto& t) { return t.mean_accuracy; }))) +
                    " vs " + num(stats::mean(column(k, [](auto& t) { return t.mean_accuracy; }))) + " (p=" +
                    pval(ta.p) + ")";
    return {n_ok && a_ok, d};
}

// ---- 9 -------------------------------------------------------------------------

Outcome criterion_frequency() {
    auto c = base_config(Experiment::frequency);
    c.profiles = {"hybrid", "conventional"};
    const auto s = run_logged(c);
    const auto h = summaries(s, "hybrid");
    const auto k = summaries(s, "conventional");
    auto rf = [](auto& t) { return t.rho_frequency; };
    auto ro = [](auto& t) { return t.rho_order; };
    stats::TTest tf, to;
    const bool f_ok = greater(column(h, rf), column(k, rf), &tf);
    const bool o_ok = greater(column(k, ro), column(h, ro), &to);
    std::string d = "rho(frequency) " + num(stats::mean(column(h, rf))) + " vs " + num(stats::mean(column(k, rf))) +
                    " (p=" + pval(tf.p) + "); rho(order) " + num(stats::mean(column(h, ro))) + " vs " +
                    num(stats::mean(column(k, ro))) + " (p=" + pval(to.p) + ")";
    return {f_ok && o_ok, d};
}

// ---- 10 ------------------------------------------------------------------------

// Untrained nets on pooled test images whose item labels are assigned at
// random, so predictions carry no information about the labels.
Outcome criterion_calibration(const FeatureBank& bank) {
    constexpr int runs = 200;
    constexpr int n_items = 10;
    constexpr int per_item = 100;
    int fired = 0, tests = 0;
    for (int run_index = 0; run_index < runs; ++run_index) {
        const auto seed = static_cast<std::uint64_t>(run_index);
        const auto net = init_classifier({bank.feature_dim(), 64, n_items}, FlexibilityProfile::hybrid(), seed);
        Rng rng(derive_seed(seed, {42}));
        std::uniform_int_distribution<std::size_t> pick_class(0, bank.classes.size() - 1);
        Matrix x(bank.feature_dim(), n_items * per_item);
        for (Eigen::Index j = 0; j < x.cols(); ++j) {
            const Matrix& src = bank.test[pick_class(rng)];
            std::uniform_int_distribution<Eigen::Index> pick_image(0, src.cols() - 1);
            x.col(j) = src.col(pick_image(rng));
        }
        PooledPredictions pooled;
        pooled.n_items = n_items;
        pooled.predictions = predict(net, x);
        for (int i = 0; i < n_items; ++i) pooled.labels.insert(pooled.labels.end(), per_item, i);
        std::shuffle(pooled.labels.begin(), pooled.labels.end(), rng);
        MemorizationOptions opt;
        opt.seed = seed;
        for (bool f : memorized_items(pooled, opt)) {
            fired += f ? 1 : 0;
            ++tests;
        }
    }
    const double rate = static_cast<double>(fired) / tests;
    return {rate <= 0.07, std::to_string(runs) + " nets, " + std::to_string(tests) + " tests, rate " + num(rate, 4)};
}

// ---- 11 ------------------------------------------------------------------------

Outcome criterion_profiles() {
    const auto sv = run_logged(base_config(Experiment::single_value_profile));
    std::vector<double> diff, firsts, lasts;
    for (const auto& cond : sv.conditions) {
        const auto t = summaries(sv, cond.name);
        const double f = stats::mean(column(t, [](auto& x) { return x.first_item; }));
        const double l = stats::mean(column(t, [](auto& x) { return x.last_item; }));
        firsts.push_back(f);
        lasts.push_back(l);
        diff.push_back(f - l);
    }
    const bool single_ok = diff[0] > 0 && diff[2] < 0 && diff[0] > diff[1] && diff[1] > diff[2];

    const auto bp = run_logged(base_config(Experiment::biased_profile));
    std::vector<double> bf, bl;
    for (const auto& cond : bp.conditions) {
        const auto t = summaries(bp, cond.name);
        bf.push_back(stats::mean(column(t, [](auto& x) { return x.first_item; })));
        bl.push_back(stats::mean(column(t, [](auto& x) { return x.last_item; })));
    }
    // values are {0.5, 1, 2}: shape 2 leans stable, 0.5 leans unstable.
    const bool biased_ok = bf[2] > bf[1] && bl[0] > bl[1];
    std::string d = "first-last at f=0.3/0.8/1.0: " + num(diff[0]) + "/" + num(diff[1]) + "/" + num(diff[2]) +
                    "; biased first item k=2 " + num(bf[2]) + " vs k=1 " + num(bf[1]) + ", last item k=0.5 " +
                    num(bl[0]) + " vs k=1 " + num(bl[1]);
    return {single_ok && biased_ok, d};
}

// ---- 12 ------------------------------------------------------------------------

std::string read_all(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

Outcome criterion_determinism() {
    auto c = base_config(Experiment::repetition);
    c.n_trials = 3;
    c.repeats = 2;
    c.output_dir = (run_root / "determinism_a").string();
    c.parallel = 1;
    run_logged(c);
    c.output_dir = (run_root / "determinism_b").string();
    c.parallel = 3;
    run_logged(c);
    int files = 0, differ = 0;
    for (const auto& e : fs::recursive_directory_iterator(run_root / "determinism_a")) {
        if (!e.is_regular_file() || e.path().extension() != ".csv") continue;
        ++files;
        const auto rel = fs::relative(e.path(), run_root / "determinism_a");
        if (read_all(e.path()) != read_all(run_root / "determinism_b" / rel)) ++differ;
    }
    return {files > 0 && differ == 0, std::to_string(files) + " CSV files compared, " + std::to_string(differ) + " differ"};
}

}  // namespace

int main() {
    fs::create_directories(run_root);
    const auto cfg = base_config(Experiment::serial_position);
    std::cout << "building dataset cache from " << cfg.dataset.corpus_dir << "\n" << std::flush;
    build_dataset(cfg.dataset);
    const auto ds = load_dataset(cfg.dataset);
    const auto bank = feature_bank(cfg, ds);

    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"1 scaling function", criterion_scale},
        {"2 conventional equivalence", [&] { return criterion_equivalence(bank); }},
        {"3 gradient check", criterion_gradients},
        {"4 dataset", [&] { return criterion_dataset(cfg.dataset); }},
        {"5 serial position", criterion_serial_position},
        {"6 capacity sweep", criterion_capacity},
        {"7 repetition", criterion_repetition},
        {"8 poisoning", criterion_poisoning},
        {"9 frequency", criterion_frequency},
        {"10 memorization calibration", [&] { return criterion_calibration(bank); }},
        {"11 profile variants", criterion_profiles},
        {"12 determinism", criterion_determinism},
    };
    int failed = 0;
    for (const auto& [name, body] : criteria) {
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = body();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cout << (o.pass ? "PASS " : "FAIL ") << name << " [" << num(secs, 1) << " s]: " << o.detail << "\n"
                  << std::flush;
        if (!o.pass) ++failed;
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size()
              << " criteria passed\n";
    return failed == 0 ? 0 : 1;
}
