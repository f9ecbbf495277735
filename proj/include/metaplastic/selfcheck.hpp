#pragma once

// Quick invariant suite on tiny nets, used by `metaplastic selfcheck`.

#include <cmath>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "metaplastic/curriculum.hpp"
#include "metaplastic/dataset.hpp"
#include "metaplastic/eval.hpp"
#include "metaplastic/netcore.hpp"
#include "metaplastic/synapse.hpp"

namespace metaplastic {

namespace detail {

inline TrainingSet random_set(Eigen::Index in, Eigen::Index out, Eigen::Index n, std::uint64_t seed) {
    Rng rng(seed);
    std::normal_distribution<double> g(0.0, 1.0);
    std::uniform_int_distribution<Eigen::Index> label(0, out - 1);
    TrainingSet s{Matrix(in, n), Matrix::Zero(out, n)};
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index i = 0; i < in; ++i) s.features(i, j) = g(rng);
        s.targets(label(rng), j) = 1.0;
    }
    return s;
}

// Worst relative error between analytic and central-difference gradients.
inline double gradient_check_error(ClassifierNet net, const TrainingSet& s, double h = 1e-6) {
    const Gradients g = compute_gradients(net, s.features, s.targets);
    double worst = 0.0;
    auto probe = [&](double& param, double analytic) {
        const double keep = param;
        param = keep + h;
        const double up = loss(net, s.features, s.targets);
        param = keep - h;
        const double down = loss(net, s.features, s.targets);
        param = keep;
        const double numeric = (up - down) / (2 * h);
        const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-7});
        worst = std::max(worst, std::abs(analytic - numeric) / denom);
    };
    for (std::size_t k = 0; k < net.layers().size(); ++k) {
        auto& layer = net.layers()[k];
        for (Eigen::Index i = 0; i < layer.weights().size(); ++i) probe(layer.weights().data()[i], g.weights[k].data()[i]);
        for (Eigen::Index i = 0; i < layer.biases().size(); ++i) probe(layer.biases().data()[i], g.biases[k].data()[i]);
    }
    return worst;
}

}  // namespace detail

inline bool selfcheck(std::ostream& out) {
    int failures = 0;
    auto check = [&](const std::string& name, const std::function<bool()>& body) {
        bool ok = false;
        try {
            ok = body();
        } catch (const std::exception& e) {
            out << "  exception: " << e.what() << "\n";
        }
        out << (ok ? "ok   " : "FAIL ") << name << "\n";
        if (!ok) ++failures;
    };

    check("scale is even in dw and 1 at f=1 or dw=0", [] {
        for (double f : {0.0, 0.1, 0.5, 0.9, 1.0})
            for (double dw : {0.0, 1e-3, 0.2, 3.0})
                for (double a : {0.5, 1.0, 100.0}) {
                    if (scale(f, dw, a) != scale(f, -dw, a)) return false;
                    if ((f == 1.0 || dw == 0.0) && scale(f, dw, a) != 1.0) return false;
                }
        return true;
    });
    check("scale is monotone in |dw| and in f", [] {
        for (double f = 0.05; f < 1.0; f += 0.05)
            for (double dw = 0.0; dw < 2.0; dw += 0.05)
                if (scale(f, dw + 0.05, 1.0) > scale(f, dw, 1.0) || scale(f + 0.05, dw, 1.0) < scale(f, dw, 1.0))
                    return false;
        return true;
    });
    check("constant:1 training equals plain SGD", [] {
        auto a = init_classifier({8, 6, 4}, FlexibilityProfile::conventional(), 5);
        auto b = a;
        const auto s = detail::random_set(8, 4, 40, 9);
        const RuleConfig cfg{1.0, 0.05, 1e-12};
        TrainOptions opt{3, 7, 11};
        for (int phase = 0; phase < 3; ++phase) {
            a.refresh_reference();
            b.refresh_reference();
            train_phase<MetaplasticUpdate>(a, s, cfg, opt);
            train_phase<PlainSgdUpdate>(b, s, cfg, opt);
        }
        return a == b;
    });
    check("analytic gradients match finite differences", [] {
        for (std::uint64_t seed = 0; seed < 3; ++seed) {
            auto net = init_classifier({8, 6, 4}, FlexibilityProfile::hybrid(), seed);
            for (auto& l : net.layers()) l.biases().setConstant(0.05);
            if (detail::gradient_check_error(net, detail::random_set(8, 4, 5, seed + 100)) > 1e-4) return false;
        }
        return true;
    });
    check("softmax outputs sum to one", [] {
        auto net = init_classifier({8, 6, 4}, FlexibilityProfile::hybrid(), 3);
        const Matrix p = forward_batch(net, detail::random_set(8, 4, 20, 4).features);
        for (Eigen::Index j = 0; j < p.cols(); ++j)
            if (std::abs(p.col(j).sum() - 1.0) > 1e-9) return false;
        return true;
    });
    check("training leaves flexibility untouched", [] {
        auto net = init_classifier({8, 6, 4}, FlexibilityProfile::hybrid(), 3);
        const auto before = net.layers()[0].weight_flexibility();
        net.refresh_reference();
        train_phase(net, detail::random_set(8, 4, 30, 2), RuleConfig{10.0, 0.1, 1e-12}, TrainOptions{2, 8, 1});
        return net.layers()[0].weight_flexibility() == before;
    });
    check("class universe has 45 ordered pairs", [] {
        const auto all = enumerate_classes();
        return all.size() == 45 && all.front() == TwoDigitClass(0, 1) && all.back() == TwoDigitClass(8, 9);
    });
    check("spearman on hand-ranked example", [] {
        const std::vector<double> x{1, 2, 3, 4}, y{2, 1, 4, 3};
        return std::abs(spearman(x, y).rho - 0.6) < 1e-12;
    });

    out << (failures == 0 ? "selfcheck passed\n" : std::to_string(failures) + " check(s) failed\n");
    return failures == 0;
}

}  // namespace metaplastic
