// Command-line front end: build-dataset, run, aggregate, selfcheck.
//
// Exit status: 0 success, 1 validation error, 2 runtime failure.

#include <CLI11.hpp>

#include <cmath>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "metaplastic/experiment.hpp"
#include "metaplastic/selfcheck.hpp"

namespace mp = metaplastic;

namespace {

constexpr int exit_ok = 0;
constexpr int exit_validation = 1;
constexpr int exit_runtime = 2;

struct Overrides {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<int> trials;
    std::optional<std::string> out;
    std::optional<int> parallel;
    std::optional<std::string> experiment;
    std::optional<std::string> profile;
};

mp::ExperimentConfig resolve(const Overrides& o) {
    mp::ExperimentConfig c = o.config.empty() ? mp::ExperimentConfig{} : mp::load_config(o.config);
    if (o.seed) c.master_seed = *o.seed;
    if (o.trials) c.n_trials = *o.trials;
    if (o.out) c.output_dir = *o.out;
    if (o.parallel) c.parallel = *o.parallel;
    if (o.experiment) c.experiment = mp::parse_experiment(*o.experiment);
    if (o.profile) c.profiles = {*o.profile};
    c.validate();
    return c;
}

int cmd_build_dataset(const Overrides& o) {
    const auto c = resolve(o);
    const auto outcome = mp::build_dataset(c.dataset);
    const auto& m = outcome.manifest;
    std::cout << (outcome.up_to_date ? "up to date: " : "wrote ") << c.dataset.cache << " ("
              << m["class_count"].get<int>() << " classes, " << c.dataset.per_class_train << "/"
              << c.dataset.per_class_test << " images per class, hash " << m["content_hash"].get<std::string>()
              << ")\n";
    return exit_ok;
}

int cmd_run(const Overrides& o) {
    const auto c = resolve(o);
    const auto summary = mp::run_experiment(c, &std::cerr);
    for (std::size_t k = 0; k < summary.conditions.size(); ++k) {
        std::vector<double> n_mem, mean_acc;
        for (const auto& r : summary.results[k]) {
            if (!r.ok()) continue;
            n_mem.push_back(r.report.n_memorized);
            mean_acc.push_back(r.report.mean_accuracy);
        }
        std::printf("%-24s trials %zu  n_memorized %.2f  mean_accuracy %.3f\n", summary.conditions[k].name.c_str(),
                    n_mem.size(), n_mem.empty() ? std::nan("") : mp::stats::mean(n_mem),
                    mean_acc.empty() ? std::nan("") : mp::stats::mean(mean_acc));
    }
    std::cout << "results in " << c.output_dir << "\n";
    if (summary.failed_trials > 0) {
        std::cerr << summary.failed_trials << " trial(s) failed\n";
        return exit_runtime;
    }
    return exit_ok;
}

int cmd_aggregate(const std::vector<std::string>& dirs, const std::optional<std::string>& out) {
    std::vector<std::filesystem::path> paths(dirs.begin(), dirs.end());
    const auto data = mp::load_runs(paths);
    const std::filesystem::path dest = out ? std::filesystem::path(*out) : paths.front() / "aggregate";
    mp::write_aggregate(data, dest);
    std::cout << "wrote " << (dest / "tests_vs_chance.csv").string() << " and " << (dest / "comparisons.csv").string()
              << "\n";
    return exit_ok;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Metaplastic continual-learning experiments"};
    app.require_subcommand(1);
    Overrides o;
    std::uint64_t seed = 0;
    int trials = 0, parallel = 0;
    std::string out, experiment, profile;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "JSON config file");
        sub->add_option("--seed", seed, "master seed");
        sub->add_option("--trials", trials, "number of trials");
        sub->add_option("--out", out, "output directory");
        sub->add_option("--parallel", parallel, "trials run concurrently");
        sub->add_option("--experiment", experiment,
                        "serial_position|capacity_sweep|repetition|poisoning|frequency|single_value_profile|"
                        "biased_profile");
        sub->add_option("--profile", profile, "conventional|stable|hybrid|constant:<c>|biased:<k>");
    };
    auto* build = app.add_subcommand("build-dataset", "compose the two-digit dataset cache");
    add_common(build);
    auto* run = app.add_subcommand("run", "run an experiment");
    add_common(run);
    std::vector<std::string> run_dirs;
    auto* aggregate = app.add_subcommand("aggregate", "t-tests over finished runs");
    aggregate->add_option("runs", run_dirs, "run directories")->required();
    aggregate->add_option("--out", out, "output directory (default <first run>/aggregate)");
    auto* selfcheck = app.add_subcommand("selfcheck", "invariant suite on tiny nets");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? exit_ok : exit_validation;
    }

    auto given = [](CLI::App* sub, const char* name) { return sub->count(name) > 0; };
    CLI::App* active = app.get_subcommands().front();
    if (active != aggregate && active != selfcheck) {
        if (given(active, "--seed")) o.seed = seed;
        if (given(active, "--trials")) o.trials = trials;
        if (given(active, "--out")) o.out = out;
        if (given(active, "--parallel")) o.parallel = parallel;
        if (given(active, "--experiment")) o.experiment = experiment;
        if (given(active, "--profile")) o.profile = profile;
    }

    try {
        if (active == build) return cmd_build_dataset(o);
        if (active == run) return cmd_run(o);
        if (active == aggregate) return cmd_aggregate(run_dirs, given(aggregate, "--out") ? std::optional(out) : std::nullopt);
        return mp::selfcheck(std::cout) ? exit_ok : exit_runtime;
    } catch (const mp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return exit_validation;
    } catch (const mp::ShapeError& e) {
        std::cerr << "shape error: " << e.what() << "\n";
        return exit_validation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_runtime;
    }
}
