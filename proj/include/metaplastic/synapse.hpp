#pragma once

// Metaplastic synapse rule.
//
// Every trainable parameter carries a flexibility f in [0, 1]. Its gradient
// step is scaled by
//
//     S(f, dw) = 1 - tanh^2(alpha * (1 - f) / f * dw)
//
// where dw is the deviation of the weight from its initial value, measured at
// the end of the previous item phase and held fixed for the current phase.
// f = 1 gives plain gradient descent; small f freezes a weight once it has
// drifted from its initial value.

#include <cmath>
#include <cstdint>
#include <span>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "metaplastic/error.hpp"
#include "metaplastic/rng.hpp"

namespace metaplastic {

class Flexibility {
public:
    constexpr Flexibility() = default;
    explicit Flexibility(double value) : value_(value) {
        if (!(value >= 0.0 && value <= 1.0)) {
            throw ConfigError("flexibility must lie in [0, 1], got " + std::to_string(value));
        }
    }
    constexpr double value() const noexcept { return value_; }
    friend constexpr bool operator==(Flexibility, Flexibility) = default;

private:
    double value_ = 1.0;
};

struct RuleConfig {
    double alpha = 1.0;
    double eta = 0.01;
    double flexibility_floor = 1e-12;

    void validate() const {
        if (!(alpha > 0.0) || !std::isfinite(alpha)) throw ConfigError("rule.alpha must be positive");
        if (!(eta > 0.0) || !std::isfinite(eta)) throw ConfigError("rule.eta must be positive");
        if (!(flexibility_floor > 0.0 && flexibility_floor < 1e-3)) {
            throw ConfigError("rule.flexibility_floor must lie in (0, 1e-3)");
        }
    }
};

// The step-size multiplier S. Total for any f in [0, 1].
inline double scale(double flexibility, double delta_w, double alpha, double flexibility_floor = 1e-12) {
    if (delta_w == 0.0) return 1.0;
    if (flexibility >= 1.0) return 1.0;
    if (flexibility <= 0.0) return 0.0;
    const double ratio = (1.0 - flexibility) / std::max(flexibility, flexibility_floor);
    const double t = std::tanh(alpha * ratio * delta_w);
    return 1.0 - t * t;
}

inline double scale(Flexibility flexibility, double delta_w, const RuleConfig& config) {
    return scale(flexibility.value(), delta_w, config.alpha, config.flexibility_floor);
}

// One scalar synapse. Layers store the same quantities as dense matrices; this
// type is the reference form of the rule.
struct SynapseState {
    double weight = 0.0;
    double initial_weight = 0.0;
    // Weight snapshot taken at the start of the current item phase.
    double reference_weight = 0.0;
    Flexibility flexibility{};

    static SynapseState fresh(double w, Flexibility f) { return {w, w, w, f}; }

    // Deviation fed to S during the current phase.
    double phase_delta() const noexcept { return reference_weight - initial_weight; }
};

inline SynapseState metaplastic_step(SynapseState state, double gradient, const RuleConfig& config) {
    if (!std::isfinite(gradient)) throw NumericalFault("non-finite gradient in metaplastic step");
    const double step = scale(state.flexibility, state.phase_delta(), config) * config.eta;
    state.weight -= step * gradient;
    return state;
}

// Phase boundary: the deviation used for the upcoming phase becomes
// (current weight - initial weight).
inline SynapseState refresh_reference(SynapseState state) {
    state.reference_weight = state.weight;
    return state;
}

inline SynapseState refresh_reference(SynapseState state, double initial_weight) {
    state.initial_weight = initial_weight;
    return refresh_reference(state);
}

struct ConstantProfile {
    double value = 1.0;
};
struct UniformProfile {
    double lo = 0.0;
    double hi = 1.0;
};
// f = u^shape with u ~ U(0, 1). shape > 1 skews toward stable synapses,
// shape < 1 toward flexible ones, shape = 1 is the uniform profile.
struct BiasedProfile {
    double shape = 1.0;
};

struct FlexibilityProfile {
    std::variant<ConstantProfile, UniformProfile, BiasedProfile> kind = ConstantProfile{};
    std::uint64_t seed = 0;

    static FlexibilityProfile constant(double c, std::uint64_t seed = 0) { return {ConstantProfile{c}, seed}; }
    static FlexibilityProfile uniform(double lo, double hi, std::uint64_t seed = 0) {
        return {UniformProfile{lo, hi}, seed};
    }
    static FlexibilityProfile biased(double shape, std::uint64_t seed = 0) { return {BiasedProfile{shape}, seed}; }

    static FlexibilityProfile conventional() { return constant(1.0); }
    static FlexibilityProfile stable() { return constant(0.3); }
    static FlexibilityProfile hybrid() { return uniform(0.0, 1.0); }

    void validate() const {
        std::visit(
            [](const auto& p) {
                using T = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<T, ConstantProfile>) {
                    if (!(p.value >= 0.0 && p.value <= 1.0)) throw ConfigError("constant flexibility outside [0, 1]");
                } else if constexpr (std::is_same_v<T, UniformProfile>) {
                    if (!(p.lo >= 0.0 && p.hi <= 1.0)) throw ConfigError("uniform flexibility bounds outside [0, 1]");
                    if (p.lo > p.hi) throw ConfigError("uniform flexibility requires lo <= hi");
                } else {
                    if (!(p.shape > 0.0) || !std::isfinite(p.shape)) throw ConfigError("biased shape must be positive");
                }
            },
            kind);
    }

    // Canonical textual form, also accepted by parse().
    std::string name() const {
        return std::visit(
            [](const auto& p) -> std::string {
                using T = std::decay_t<decltype(p)>;
                if constexpr (std::is_same_v<T, ConstantProfile>) {
                    if (p.value == 1.0) return "conventional";
                    if (p.value == 0.3) return "stable";
                    return "constant:" + format_real(p.value);
                } else if constexpr (std::is_same_v<T, UniformProfile>) {
                    if (p.lo == 0.0 && p.hi == 1.0) return "hybrid";
                    return "uniform:" + format_real(p.lo) + ":" + format_real(p.hi);
                } else {
                    return "biased:" + format_real(p.shape);
                }
            },
            kind);
    }

    // conventional | stable | hybrid | constant:<c> | uniform:<lo>:<hi> | biased:<k>
    static FlexibilityProfile parse(const std::string& text, std::uint64_t seed = 0) {
        auto number = [&](const std::string& s) {
            try {
                std::size_t used = 0;
                double v = std::stod(s, &used);
                if (used != s.size()) throw std::invalid_argument(s);
                return v;
            } catch (const std::exception&) {
                throw ConfigError("malformed profile '" + text + "'");
            }
        };
        FlexibilityProfile out;
        if (text == "conventional") {
            out = conventional();
        } else if (text == "stable") {
            out = stable();
        } else if (text == "hybrid") {
            out = hybrid();
        } else if (text.rfind("constant:", 0) == 0) {
            out = constant(number(text.substr(9)));
        } else if (text.rfind("biased:", 0) == 0) {
            out = biased(number(text.substr(7)));
        } else if (text.rfind("uniform:", 0) == 0) {
            auto rest = text.substr(8);
            auto colon = rest.find(':');
            if (colon == std::string::npos) throw ConfigError("malformed profile '" + text + "'");
            out = uniform(number(rest.substr(0, colon)), number(rest.substr(colon + 1)));
        } else {
            throw ConfigError("unknown flexibility profile '" + text + "'");
        }
        out.seed = seed;
        out.validate();
        return out;
    }

private:
    static std::string format_real(double v) {
        std::string s = std::to_string(v);
        while (!s.empty() && s.back() == '0') s.pop_back();
        if (!s.empty() && s.back() == '.') s.pop_back();
        return s;
    }
};

// Fills `out` with flexibility values drawn from `profile` using `rng`.
template <class Rng>
void sample_profile_into(const FlexibilityProfile& profile, Rng& rng, std::span<double> out) {
    profile.validate();
    std::visit(
        [&](const auto& p) {
            using T = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<T, ConstantProfile>) {
                std::fill(out.begin(), out.end(), p.value);
            } else if constexpr (std::is_same_v<T, UniformProfile>) {
                std::uniform_real_distribution<double> dist(p.lo, p.hi);
                for (auto& v : out) v = p.lo == p.hi ? p.lo : dist(rng);
            } else {
                std::uniform_real_distribution<double> dist(0.0, 1.0);
                for (auto& v : out) v = std::pow(dist(rng), p.shape);
            }
        },
        profile.kind);
}

inline std::vector<Flexibility> sample_profile(const FlexibilityProfile& profile, std::size_t count) {
    std::vector<double> raw(count);
    Rng rng(profile.seed);
    sample_profile_into(profile, rng, raw);
    std::vector<Flexibility> out;
    out.reserve(count);
    for (double v : raw) out.emplace_back(v);
    return out;
}

}  // namespace metaplastic
