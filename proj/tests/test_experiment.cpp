#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <sstream>

#include "metaplastic/experiment.hpp"

using namespace metaplastic;
namespace fs = std::filesystem;

namespace {

fs::path scratch_dir(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("mp_experiment_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

int cli(const std::string& args, const fs::path& log) {
    const std::string cmd = std::string(METAPLASTIC_CLI) + " " + args + " > " + log.string() + " 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

ExperimentConfig tiny_config(const fs::path& dir) {
    ExperimentConfig c;
    c.experiment = Experiment::serial_position;
    c.profiles = {"conventional", "hybrid"};
    c.rule = RuleConfig{100.0, 0.3, 1e-12};
    c.epochs = 2;
    c.feature_dim = 16;
    c.hidden = {8};
    c.n_items = 3;
    c.n_trials = 2;
    c.memorization = MemorizationOptions{50, 45, 0};
    c.dataset.corpus_dir = METAPLASTIC_CORPUS_DIR;
    c.dataset.cache = (dir / "ds" / "two.mpd").string();
    c.dataset.per_class_train = 20;
    c.dataset.per_class_test = 10;
    c.output_dir = (dir / "out").string();
    return c;
}

// Shared tiny dataset cache, built once per test binary.
const fs::path& shared_dir() {
    static const fs::path dir = [] {
        auto d = scratch_dir("shared");
        build_dataset(tiny_config(d).dataset);
        return d;
    }();
    return dir;
}

void write_json(const fs::path& p, const Json& j) { std::ofstream(p) << j.dump(2); }

}  // namespace

TEST(Config, DefaultsValidate) {
    EXPECT_NO_THROW(ExperimentConfig{}.validate());
}

TEST(Config, FieldErrorsNamed) {
    auto expect_field = [](const Json& j, const std::string& field) {
        try {
            config_from_json(j).validate();
            ADD_FAILURE() << "accepted " << j.dump();
        } catch (const ConfigError& e) {
            EXPECT_NE(std::string(e.what()).find(field), std::string::npos) << e.what();
        }
    };
    expect_field({{"bogus", 1}}, "bogus");
    expect_field({{"rule", {{"alpha", -1.0}}}}, "alpha");
    expect_field({{"rule", {{"gamma", 1.0}}}}, "rule.gamma");
    expect_field({{"training", {{"epochs", "ten"}}}}, "training.epochs");
    expect_field({{"training", {{"negative_target", "nobody"}}}}, "negative_target");
    expect_field({{"profiles", {"hybrid", "wobbly"}}}, "profiles");
    expect_field({{"n_items", 46}}, "45");
    expect_field({{"items", {"01", "10"}}, {"n_items", 2}}, "items");
    expect_field({{"experiment", "frequency"}, {"frequencies", {1, 2}}}, "frequencies");
    expect_field({{"experiment", "single_value_profile"}, {"values", {1.5}}}, "values");
    expect_field({{"memorization", {{"criterion", 2000}}}}, "criterion");
    expect_field({{"experiment", "nonsense"}}, "nonsense");
}

TEST(Config, JsonRoundTrip) {
    auto c = tiny_config("/tmp/x");
    c.experiment = Experiment::capacity_sweep;
    c.lengths = {3, 5};
    c.negative_target = NegativeTarget::none_readout;
    const auto back = config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, CommentsAllowedInFiles) {
    const auto dir = scratch_dir("comments");
    std::ofstream(dir / "c.json") << "{\n  // ten items\n  \"n_items\": 7\n}\n";
    EXPECT_EQ(load_config(dir / "c.json").n_items, 7);
}

TEST(Conditions, NamesAndReadouts) {
    ExperimentConfig c;
    c.experiment = Experiment::capacity_sweep;
    c.profiles = {"hybrid", "conventional"};
    const auto conds = expand_conditions(c);
    ASSERT_EQ(conds.size(), 6u);
    EXPECT_EQ(conds[0].name, "hybrid_len10");
    EXPECT_EQ(conds[5].n_readouts, 30);
    c.experiment = Experiment::single_value_profile;
    const auto sv = expand_conditions(c);
    ASSERT_EQ(sv.size(), 3u);
    EXPECT_EQ(sv[0].name, "constant:0.3");
    EXPECT_EQ(condition_dir(sv[0].name), "constant_0.3");
    c.experiment = Experiment::biased_profile;
    EXPECT_EQ(expand_conditions(c)[2].name, "biased:2.0");
}

TEST(Conditions, TrialItemsArePrefixes) {
    ExperimentConfig c;
    const auto ten = trial_items(c, 5, 10);
    const auto thirty = trial_items(c, 5, 30);
    EXPECT_TRUE(std::equal(ten.begin(), ten.end(), thirty.begin()));
    EXPECT_NE(trial_items(c, 6, 10), ten);
    c.items = {"38", "12", "09"};
    EXPECT_EQ(trial_items(c, 5, 2), (std::vector<TwoDigitClass>{{3, 8}, {1, 2}}));
}

TEST(Conditions, FrequencyMultisetPreserved) {
    ExperimentConfig c;
    auto f = trial_frequencies(c, 3);
    std::sort(f.begin(), f.end());
    EXPECT_EQ(f, c.frequencies);
}

TEST(Dataset, BuildIsIdempotentAndListsAllClasses) {
    const auto dir = scratch_dir("build");
    const auto d = tiny_config(dir).dataset;
    const auto first = build_dataset(d);
    EXPECT_FALSE(first.up_to_date);
    EXPECT_EQ(first.manifest["class_count"], 45);
    EXPECT_EQ(first.manifest["classes"].size(), 45u);
    EXPECT_EQ(first.manifest["classes"][0], "01");
    const auto bytes = slurp(d.cache);
    const auto second = build_dataset(d);
    EXPECT_TRUE(second.up_to_date);
    EXPECT_EQ(second.manifest["content_hash"], first.manifest["content_hash"]);
    EXPECT_EQ(slurp(d.cache), bytes);
}

TEST(Dataset, CorruptCacheRebuilt) {
    const auto dir = scratch_dir("rebuild");
    const auto d = tiny_config(dir).dataset;
    build_dataset(d);
    const auto bytes = slurp(d.cache);
    fs::resize_file(d.cache, 100);
    EXPECT_FALSE(build_dataset(d).up_to_date);
    EXPECT_EQ(slurp(d.cache), bytes);
}

TEST(Dataset, LoadChecksCounts) {
    auto c = tiny_config(shared_dir());
    EXPECT_NO_THROW(load_dataset(c.dataset));
    c.dataset.per_class_test = 11;
    EXPECT_THROW(load_dataset(c.dataset), IngestError);
    c.dataset.cache = "/nonexistent/x.mpd";
    EXPECT_THROW(load_dataset(c.dataset), IngestError);
}

TEST(Run, SingleTrialAggregateEqualsTrial) {
    auto c = tiny_config(shared_dir());
    c.n_trials = 1;
    c.profiles = {"hybrid"};
    c.output_dir = (scratch_dir("single") / "out").string();
    const auto s = run_experiment(c);
    ASSERT_EQ(s.failed_trials, 0);
    const auto& r = s.results[0][0];
    const auto agg = slurp(fs::path(c.output_dir) / "hybrid" / "aggregate_items.csv");
    std::istringstream in(agg);
    std::string line;
    std::getline(in, line);
    for (std::size_t i = 0; i < r.report.per_item_accuracy.size(); ++i) {
        std::getline(in, line);
        EXPECT_EQ(line, std::to_string(i) + "," + fmt(r.report.per_item_accuracy[i]) + ",0.000000,1");
    }
    EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "hybrid" / "trial_0" / "checkpoints.csv"));
    EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "manifest.json"));
}

TEST(Run, ParallelMatchesSerial) {
    auto c = tiny_config(shared_dir());
    c.n_trials = 3;
    c.profiles = {"hybrid"};
    const auto serial = scratch_dir("serial");
    const auto par = scratch_dir("parallel");
    c.output_dir = (serial / "out").string();
    run_experiment(c);
    c.output_dir = (par / "out").string();
    c.parallel = 3;
    run_experiment(c);
    EXPECT_EQ(slurp(serial / "out" / "hybrid" / "trials.csv"), slurp(par / "out" / "hybrid" / "trials.csv"));
    EXPECT_EQ(slurp(serial / "out" / "hybrid" / "aggregate_phases.csv"),
              slurp(par / "out" / "hybrid" / "aggregate_phases.csv"));
}

TEST(Run, SequenceItemsRecorded) {
    auto c = tiny_config(shared_dir());
    c.n_trials = 1;
    c.profiles = {"conventional"};
    c.items = {"38", "12", "09"};
    c.output_dir = (scratch_dir("items") / "out").string();
    run_experiment(c);
    const auto items = slurp(fs::path(c.output_dir) / "conventional" / "trial_0" / "items.csv");
    EXPECT_NE(items.find("0,38,1,"), std::string::npos) << items;
    EXPECT_NE(items.find("2,09,1,"), std::string::npos) << items;
}

TEST(Run, FeatureFileMatchesComposedDataset) {
    auto c = tiny_config(shared_dir());
    c.n_trials = 2;
    c.profiles = {"hybrid"};
    const auto dir = scratch_dir("features");
    c.output_dir = (dir / "composed").string();
    run_experiment(c);

    const auto bank = feature_bank(c, load_dataset(c.dataset));
    {
        std::ofstream f(dir / "features.csv");
        f << "# class,split,features\n";
        char buf[32];
        for (std::size_t k = 0; k < bank.classes.size(); ++k) {
            for (const auto* split : {&bank.train[k], &bank.test[k]}) {
                for (Eigen::Index j = 0; j < split->cols(); ++j) {
                    f << bank.classes[k].label() << (split == &bank.train[k] ? ",train" : ",test");
                    for (Eigen::Index r = 0; r < split->rows(); ++r) {
                        std::snprintf(buf, sizeof buf, ",%.17g", (*split)(r, j));
                        f << buf;
                    }
                    f << "\n";
                }
            }
        }
    }
    c.dataset.features_file = (dir / "features.csv").string();
    c.dataset.cache = (dir / "absent.mpd").string();
    c.feature_dim = 3;  // overridden by the file
    c.output_dir = (dir / "from_file").string();
    run_experiment(c);
    EXPECT_EQ(slurp(dir / "composed" / "hybrid" / "trials.csv"), slurp(dir / "from_file" / "hybrid" / "trials.csv"));
    const auto manifest = Json::parse(slurp(dir / "from_file" / "manifest.json"));
    EXPECT_EQ(manifest["config"]["network"]["feature_dim"], 16);
    EXPECT_EQ(manifest["dataset"]["classes"], 45);
}

TEST(Aggregate, PoolsAndRejectsMismatchedShapes) {
    auto c = tiny_config(shared_dir());
    const auto base = scratch_dir("aggregate");
    c.output_dir = (base / "a").string();
    run_experiment(c);
    c.master_seed = 100;
    c.output_dir = (base / "b").string();
    run_experiment(c);
    const auto pooled = load_runs({base / "a", base / "b"});
    ASSERT_EQ(pooled.size(), 2u);
    EXPECT_EQ(pooled[0].metrics.at("n_memorized").size(), 4u);
    write_aggregate(pooled, base / "agg");
    const auto cmp = slurp(base / "agg" / "comparisons.csv");
    EXPECT_NE(cmp.find("n_memorized,conventional,hybrid,4,4,"), std::string::npos) << cmp;
    EXPECT_EQ(cmp.find("p_order"), std::string::npos);

    c.n_items = 4;
    c.output_dir = (base / "c").string();
    run_experiment(c);
    EXPECT_THROW(load_runs({base / "a", base / "c"}), ShapeError);
}

TEST(Cli, ExitCodes) {
    const auto dir = scratch_dir("cli");
    const auto log = dir / "log.txt";
    EXPECT_EQ(cli("selfcheck", log), 0) << slurp(log);
    EXPECT_NE(slurp(log).find("selfcheck passed"), std::string::npos);
    EXPECT_EQ(cli("", log), 1);
    EXPECT_EQ(cli("frobnicate", log), 1);
    EXPECT_EQ(cli("run --profile wobbly", log), 1);
    EXPECT_NE(slurp(log).find("wobbly"), std::string::npos);
    EXPECT_EQ(cli("run --trials 0", log), 1);
    EXPECT_EQ(cli("run --experiment nonsense", log), 1);
    EXPECT_EQ(cli("run --config " + (dir / "missing.json").string(), log), 1);
    std::ofstream(dir / "bad.json") << "{\"n_items\": ";
    EXPECT_EQ(cli("run --config " + (dir / "bad.json").string(), log), 1);
}

TEST(Cli, BuildDatasetThenRunThenAggregate) {
    const auto dir = scratch_dir("cli_flow");
    const auto log = dir / "log.txt";
    auto c = tiny_config(dir);
    write_json(dir / "c.json", to_json(c));
    const std::string cfg = "--config " + (dir / "c.json").string();

    // Running before the cache exists is a runtime failure naming the fix.
    EXPECT_EQ(cli("run " + cfg, log), 2);
    EXPECT_NE(slurp(log).find("build-dataset"), std::string::npos) << slurp(log);

    EXPECT_EQ(cli("build-dataset " + cfg, log), 0) << slurp(log);
    EXPECT_NE(slurp(log).find("45 classes"), std::string::npos);
    EXPECT_EQ(cli("build-dataset " + cfg, log), 0);
    EXPECT_NE(slurp(log).find("up to date"), std::string::npos) << slurp(log);

    const auto out = dir / "run1";
    EXPECT_EQ(cli("run " + cfg + " --trials 2 --seed 9 --profile hybrid --out " + out.string(), log), 0)
        << slurp(log);
    EXPECT_TRUE(fs::exists(out / "hybrid" / "trials.csv"));
    EXPECT_FALSE(fs::exists(out / "conventional"));
    EXPECT_EQ(cli("aggregate " + out.string(), log), 0) << slurp(log);
    EXPECT_TRUE(fs::exists(out / "aggregate" / "tests_vs_chance.csv"));
    EXPECT_EQ(cli("aggregate " + (dir / "nowhere").string(), log), 2);
}

TEST(Cli, MissingCorpusNamesFile) {
    const auto dir = scratch_dir("cli_missing");
    const auto log = dir / "log.txt";
    fs::create_directories(dir / "corpus");
    for (const char* f : {"train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte.gz", "t10k-images-idx3-ubyte.gz"})
        fs::copy_file(fs::path(METAPLASTIC_CORPUS_DIR) / f, dir / "corpus" / f);
    auto c = tiny_config(dir);
    c.dataset.corpus_dir = (dir / "corpus").string();
    write_json(dir / "c.json", to_json(c));
    EXPECT_EQ(cli("build-dataset --config " + (dir / "c.json").string(), log), 2);
    EXPECT_NE(slurp(log).find("t10k-labels-idx1-ubyte"), std::string::npos) << slurp(log);
}

TEST(Cli, RunIsByteDeterministic) {
    const auto dir = scratch_dir("cli_det");
    const auto log = dir / "log.txt";
    auto c = tiny_config(shared_dir());
    c.experiment = Experiment::repetition;
    c.repeats = 2;
    write_json(dir / "c.json", to_json(c));
    const std::string cfg = "run --config " + (dir / "c.json").string();
    ASSERT_EQ(cli(cfg + " --out " + (dir / "a").string(), log), 0) << slurp(log);
    ASSERT_EQ(cli(cfg + " --out " + (dir / "b").string() + " --parallel 2", log), 0) << slurp(log);
    for (const auto& entry : fs::recursive_directory_iterator(dir / "a")) {
        if (!entry.is_regular_file() || entry.path().extension() != ".csv") continue;
        const auto rel = fs::relative(entry.path(), dir / "a");
        EXPECT_EQ(slurp(entry.path()), slurp(dir / "b" / rel)) << rel;
    }
}

TEST(Config, ShippedExamplesValidate) {
    int seen = 0;
    for (const auto& e : fs::directory_iterator(METAPLASTIC_CONFIG_DIR)) {
        if (e.path().extension() != ".json") continue;
        ++seen;
        EXPECT_NO_THROW(load_config(e.path()).validate()) << e.path();
    }
    EXPECT_GE(seen, 7);
}

TEST(Config, FullDefaultsFileMatchesBuiltInDefaults) {
    auto file = to_json(load_config(fs::path(METAPLASTIC_CONFIG_DIR) / "full_defaults.json"));
    auto builtin = to_json(ExperimentConfig{});
    builtin["output_dir"] = "results/serial_position";
    EXPECT_EQ(file, builtin);
}
