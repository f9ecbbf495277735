#pragma once

// Feedforward classifier with metaplastic dense layers.
//
// Inputs pass through a frozen random-projection feature extractor, then a
// stack of dense layers (ReLU between, softmax at the output) trained by
// minibatch SGD against target distributions. The per-parameter step size is
// supplied by an update policy, so the same training loop runs the
// metaplastic rule and an unmodified SGD baseline.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "metaplastic/error.hpp"
#include "metaplastic/rng.hpp"
#include "metaplastic/synapse.hpp"

namespace metaplastic {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

class FeatureExtractor {
public:
    FeatureExtractor() = default;

    FeatureExtractor(Eigen::Index input_dim, Eigen::Index feature_dim, std::uint64_t seed)
        : projection_(feature_dim, input_dim), seed_(seed) {
        if (input_dim <= 0 || feature_dim <= 0) throw ConfigError("feature extractor dimensions must be positive");
        Rng rng(derive_seed(seed, {stream::extractor}));
        std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(input_dim)));
        for (Eigen::Index c = 0; c < projection_.cols(); ++c)
            for (Eigen::Index r = 0; r < projection_.rows(); ++r) projection_(r, c) = dist(rng);
    }

    Eigen::Index input_dim() const noexcept { return projection_.cols(); }
    Eigen::Index feature_dim() const noexcept { return projection_.rows(); }
    std::uint64_t seed() const noexcept { return seed_; }
    const Matrix& projection() const noexcept { return projection_; }

    // Columns of `images` are flattened images with pixels in [0, 1].
    Matrix extract(const Matrix& images) const {
        if (images.rows() != input_dim()) {
            throw ShapeError("extractor expects input dim " + std::to_string(input_dim()) + ", got " +
                             std::to_string(images.rows()));
        }
        return (projection_ * images).cwiseMax(0.0);
    }

private:
    Matrix projection_;
    std::uint64_t seed_ = 0;
};

inline Vector extract_features(const FeatureExtractor& extractor, std::span<const double> image) {
    if (static_cast<Eigen::Index>(image.size()) != extractor.input_dim()) {
        throw ShapeError("image has " + std::to_string(image.size()) + " pixels, extractor expects " +
                         std::to_string(extractor.input_dim()));
    }
    Eigen::Map<const Vector> x(image.data(), static_cast<Eigen::Index>(image.size()));
    return extractor.extract(Matrix(x));
}

// Raw 8-bit pixels, normalized by 1/255.
inline Vector extract_features(const FeatureExtractor& extractor, std::span<const std::uint8_t> image) {
    std::vector<double> pixels(image.size());
    std::transform(image.begin(), image.end(), pixels.begin(), [](std::uint8_t p) { return p / 255.0; });
    return extract_features(extractor, std::span<const double>(pixels));
}

class MetaplasticLayer {
public:
    MetaplasticLayer() = default;

    MetaplasticLayer(Matrix weights, Vector biases, Matrix weight_flexibility, Vector bias_flexibility)
        : weights_(std::move(weights)),
          biases_(std::move(biases)),
          initial_weights_(weights_),
          initial_biases_(biases_),
          reference_weights_(weights_),
          reference_biases_(biases_),
          weight_flexibility_(std::move(weight_flexibility)),
          bias_flexibility_(std::move(bias_flexibility)) {
        if (biases_.size() != weights_.rows() || weight_flexibility_.rows() != weights_.rows() ||
            weight_flexibility_.cols() != weights_.cols() || bias_flexibility_.size() != biases_.size()) {
            throw ShapeError("inconsistent layer shapes");
        }
    }

    Eigen::Index in_dim() const noexcept { return weights_.cols(); }
    Eigen::Index out_dim() const noexcept { return weights_.rows(); }

    Matrix& weights() noexcept { return weights_; }
    Vector& biases() noexcept { return biases_; }
    const Matrix& weights() const noexcept { return weights_; }
    const Vector& biases() const noexcept { return biases_; }
    const Matrix& initial_weights() const noexcept { return initial_weights_; }
    const Vector& initial_biases() const noexcept { return initial_biases_; }
    const Matrix& reference_weights() const noexcept { return reference_weights_; }
    const Vector& reference_biases() const noexcept { return reference_biases_; }
    const Matrix& weight_flexibility() const noexcept { return weight_flexibility_; }
    const Vector& bias_flexibility() const noexcept { return bias_flexibility_; }

    Matrix weight_phase_delta() const { return reference_weights_ - initial_weights_; }
    Vector bias_phase_delta() const { return reference_biases_ - initial_biases_; }

    // Phase boundary snapshot. Counts invocations so callers can assert one
    // refresh per phase.
    void refresh_reference() {
        reference_weights_ = weights_;
        reference_biases_ = biases_;
        ++refresh_count_;
    }
    std::uint64_t refresh_count() const noexcept { return refresh_count_; }

    std::size_t parameter_count() const noexcept {
        return static_cast<std::size_t>(weights_.size() + biases_.size());
    }

    SynapseState weight_synapse(Eigen::Index row, Eigen::Index col) const {
        return {weights_(row, col), initial_weights_(row, col), reference_weights_(row, col),
                Flexibility(weight_flexibility_(row, col))};
    }
    SynapseState bias_synapse(Eigen::Index row) const {
        return {biases_(row), initial_biases_(row), reference_biases_(row), Flexibility(bias_flexibility_(row))};
    }

private:
    Matrix weights_;
    Vector biases_;
    Matrix initial_weights_;
    Vector initial_biases_;
    Matrix reference_weights_;
    Vector reference_biases_;
    Matrix weight_flexibility_;
    Vector bias_flexibility_;
    std::uint64_t refresh_count_ = 0;
};

class ClassifierNet {
public:
    ClassifierNet() = default;
    explicit ClassifierNet(std::vector<MetaplasticLayer> layers) : layers_(std::move(layers)) {
        if (layers_.empty()) throw ConfigError("classifier needs at least one layer");
        for (std::size_t i = 1; i < layers_.size(); ++i) {
            if (layers_[i].in_dim() != layers_[i - 1].out_dim()) throw ShapeError("layer dimensions do not chain");
        }
    }

    std::vector<MetaplasticLayer>& layers() noexcept { return layers_; }
    const std::vector<MetaplasticLayer>& layers() const noexcept { return layers_; }
    Eigen::Index input_dim() const noexcept { return layers_.front().in_dim(); }
    Eigen::Index n_readouts() const noexcept { return layers_.back().out_dim(); }

    std::vector<Eigen::Index> dims() const {
        std::vector<Eigen::Index> out{input_dim()};
        for (const auto& l : layers_) out.push_back(l.out_dim());
        return out;
    }

    std::size_t parameter_count() const {
        std::size_t n = 0;
        for (const auto& l : layers_) n += l.parameter_count();
        return n;
    }

    void refresh_reference() {
        for (auto& l : layers_) l.refresh_reference();
    }

    bool operator==(const ClassifierNet& other) const {
        if (layers_.size() != other.layers_.size()) return false;
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            const auto& a = layers_[i];
            const auto& b = other.layers_[i];
            if (a.weights().rows() != b.weights().rows() || a.weights().cols() != b.weights().cols()) return false;
            if (a.weights() != b.weights() || a.biases() != b.biases()) return false;
            if (a.weight_flexibility() != b.weight_flexibility() || a.bias_flexibility() != b.bias_flexibility())
                return false;
        }
        return true;
    }

private:
    std::vector<MetaplasticLayer> layers_;
};

// Weights ~ N(0, 1/sqrt(fan_in)), biases 0, flexibility per parameter from
// `profile` (weights first, then biases, layer by layer).
inline ClassifierNet init_classifier(const std::vector<Eigen::Index>& dims, const FlexibilityProfile& profile,
                                     std::uint64_t seed) {
    if (dims.size() < 2) throw ConfigError("layer_dims needs at least two entries");
    for (auto d : dims) {
        if (d <= 0) throw ConfigError("layer_dims entries must be positive");
    }
    profile.validate();
    Rng weight_rng(derive_seed(seed, {stream::weights}));
    Rng flex_rng(derive_seed(seed, {stream::flexibility, profile.seed}));
    std::vector<MetaplasticLayer> layers;
    for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
        const auto fan_in = dims[i];
        const auto fan_out = dims[i + 1];
        std::normal_distribution<double> dist(0.0, 1.0 / std::sqrt(static_cast<double>(fan_in)));
        Matrix w(fan_out, fan_in);
        for (Eigen::Index c = 0; c < fan_in; ++c)
            for (Eigen::Index r = 0; r < fan_out; ++r) w(r, c) = dist(weight_rng);
        Matrix fw(fan_out, fan_in);
        Vector fb(fan_out);
        sample_profile_into(profile, flex_rng, std::span<double>(fw.data(), static_cast<std::size_t>(fw.size())));
        sample_profile_into(profile, flex_rng, std::span<double>(fb.data(), static_cast<std::size_t>(fb.size())));
        layers.emplace_back(std::move(w), Vector::Zero(fan_out), std::move(fw), std::move(fb));
    }
    return ClassifierNet(std::move(layers));
}

namespace detail {

inline Matrix add_bias(Matrix z, const Vector& b) {
    z.colwise() += b;
    return z;
}

// Column-wise log-softmax.
inline Matrix log_softmax(const Matrix& logits) {
    Matrix out(logits.rows(), logits.cols());
    for (Eigen::Index c = 0; c < logits.cols(); ++c) {
        const double m = logits.col(c).maxCoeff();
        const double lse = m + std::log((logits.col(c).array() - m).exp().sum());
        out.col(c) = logits.col(c).array() - lse;
    }
    return out;
}

}  // namespace detail

// Pre-softmax outputs for a batch (columns are samples).
inline Matrix logits(const ClassifierNet& net, const Matrix& features) {
    if (features.rows() != net.input_dim()) {
        throw ShapeError("features have dim " + std::to_string(features.rows()) + ", net expects " +
                         std::to_string(net.input_dim()));
    }
    Matrix a = features;
    const auto& layers = net.layers();
    for (std::size_t i = 0; i < layers.size(); ++i) {
        Matrix z = detail::add_bias(layers[i].weights() * a, layers[i].biases());
        if (i + 1 < layers.size()) z = z.cwiseMax(0.0);
        a = std::move(z);
    }
    return a;
}

inline Matrix forward_batch(const ClassifierNet& net, const Matrix& features) {
    return detail::log_softmax(logits(net, features)).array().exp().matrix();
}

inline Vector forward(const ClassifierNet& net, const Vector& features) {
    return forward_batch(net, Matrix(features)).col(0);
}

// Argmax per column over the first `readouts` outputs (all outputs when
// negative); ties go to the lowest readout index.
inline std::vector<int> predict(const ClassifierNet& net, const Matrix& features, Eigen::Index readouts = -1) {
    const Matrix z = logits(net, features);
    const Eigen::Index rows = readouts < 0 ? z.rows() : std::min(readouts, z.rows());
    std::vector<int> out(static_cast<std::size_t>(z.cols()));
    for (Eigen::Index c = 0; c < z.cols(); ++c) {
        Eigen::Index best = 0;
        for (Eigen::Index r = 1; r < rows; ++r) {
            if (z(r, c) > z(best, c)) best = r;
        }
        out[static_cast<std::size_t>(c)] = static_cast<int>(best);
    }
    return out;
}

// Mean cross-entropy between softmax outputs and target distributions.
inline double loss(const ClassifierNet& net, const Matrix& features, const Matrix& targets) {
    const Matrix lp = detail::log_softmax(logits(net, features));
    if (targets.rows() != lp.rows() || targets.cols() != lp.cols()) throw ShapeError("target shape mismatch");
    return -(targets.array() * lp.array()).sum() / static_cast<double>(features.cols());
}

struct Gradients {
    std::vector<Matrix> weights;
    std::vector<Vector> biases;
    double loss = 0.0;
};

// Backpropagated gradients of the mean cross-entropy loss.
inline Gradients compute_gradients(const ClassifierNet& net, const Matrix& features, const Matrix& targets) {
    const auto& layers = net.layers();
    const auto n_layers = layers.size();
    if (features.rows() != net.input_dim()) throw ShapeError("feature dim mismatch");
    if (targets.rows() != net.n_readouts() || targets.cols() != features.cols()) {
        throw ShapeError("target shape mismatch");
    }
    const double inv_n = 1.0 / static_cast<double>(features.cols());

    std::vector<Matrix> activations;  // inputs to each layer
    std::vector<Matrix> pre;          // pre-activations of each layer
    activations.reserve(n_layers);
    pre.reserve(n_layers);
    activations.push_back(features);
    for (std::size_t i = 0; i < n_layers; ++i) {
        pre.push_back(detail::add_bias(layers[i].weights() * activations.back(), layers[i].biases()));
        if (i + 1 < n_layers) activations.push_back(pre.back().cwiseMax(0.0));
    }

    const Matrix lp = detail::log_softmax(pre.back());
    Gradients g;
    g.loss = -(targets.array() * lp.array()).sum() * inv_n;
    g.weights.resize(n_layers);
    g.biases.resize(n_layers);

    // Targets are distributions, so d(loss)/d(logits) = (p - t) / n.
    Matrix delta = (lp.array().exp().matrix() - targets) * inv_n;
    for (std::size_t k = n_layers; k-- > 0;) {
        g.weights[k] = delta * activations[k].transpose();
        g.biases[k] = delta.rowwise().sum();
        if (k > 0) {
            Matrix back = layers[k].weights().transpose() * delta;
            delta = back.array() * (pre[k - 1].array() > 0.0).cast<double>();
        }
    }
    return g;
}

// Update policies for train_phase. begin_phase() is called once per
// train_phase call; apply() once per layer per minibatch.

// step = S(f, dw_phase) * eta, elementwise.
class MetaplasticUpdate {
public:
    void begin_phase(const ClassifierNet& net, const RuleConfig& config) {
        weight_steps_.clear();
        bias_steps_.clear();
        for (const auto& layer : net.layers()) {
            weight_steps_.push_back(step_matrix(layer.weight_flexibility(), layer.weight_phase_delta(), config));
            bias_steps_.push_back(step_matrix(layer.bias_flexibility(), layer.bias_phase_delta(), config));
        }
    }

    void apply(std::size_t index, MetaplasticLayer& layer, const Matrix& grad_w, const Vector& grad_b) const {
        layer.weights().array() -= weight_steps_[index].array() * grad_w.array();
        layer.biases().array() -= bias_steps_[index].array() * grad_b.array();
    }

    const std::vector<Matrix>& weight_steps() const noexcept { return weight_steps_; }

private:
    static Matrix step_matrix(const Matrix& flex, const Matrix& delta, const RuleConfig& config) {
        Matrix out(flex.rows(), flex.cols());
        for (Eigen::Index i = 0; i < out.size(); ++i) {
            out.data()[i] =
                scale(flex.data()[i], delta.data()[i], config.alpha, config.flexibility_floor) * config.eta;
        }
        return out;
    }

    std::vector<Matrix> weight_steps_;
    std::vector<Matrix> bias_steps_;
};

// Unmodified SGD: ignores flexibility and phase deltas.
class PlainSgdUpdate {
public:
    void begin_phase(const ClassifierNet&, const RuleConfig& config) { eta_ = config.eta; }

    void apply(std::size_t, MetaplasticLayer& layer, const Matrix& grad_w, const Vector& grad_b) const {
        layer.weights().array() -= eta_ * grad_w.array();
        layer.biases().array() -= eta_ * grad_b.array();
    }

private:
    double eta_ = 0.0;
};

// Samples for one phase; column j of `features` pairs with column j of
// `targets` (a probability distribution over readouts).
struct TrainingSet {
    Matrix features;
    Matrix targets;

    Eigen::Index size() const noexcept { return features.cols(); }
};

struct TrainOptions {
    int epochs = 5;
    int batch_size = 32;
    std::uint64_t shuffle_seed = 0;
};

struct PhaseTrace {
    std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

template <class Update = MetaplasticUpdate>
PhaseTrace train_phase(ClassifierNet& net, const TrainingSet& data, const RuleConfig& config,
                       const TrainOptions& options, Update update = {}) {
    config.validate();
    if (options.epochs < 0) throw ConfigError("epochs must be non-negative");
    if (options.batch_size <= 0) throw ConfigError("batch_size must be positive");
    if (data.features.cols() != data.targets.cols()) throw ShapeError("features/targets sample count mismatch");
    if (data.size() > 0 && data.features.rows() != net.input_dim()) throw ShapeError("feature dim mismatch");
    if (data.size() > 0 && data.targets.rows() != net.n_readouts()) throw ShapeError("target dim mismatch");

    PhaseTrace trace;
    if (options.epochs == 0 || data.size() == 0) return trace;

    update.begin_phase(net, config);
    Rng rng(options.shuffle_seed);
    std::vector<Eigen::Index> order(static_cast<std::size_t>(data.size()));
    const auto batch = static_cast<Eigen::Index>(options.batch_size);
    Matrix xb, tb;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), Eigen::Index{0});
        std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        int batches = 0;
        for (Eigen::Index start = 0; start < data.size(); start += batch) {
            const Eigen::Index n = std::min(batch, data.size() - start);
            xb.resize(data.features.rows(), n);
            tb.resize(data.targets.rows(), n);
            for (Eigen::Index j = 0; j < n; ++j) {
                const auto src = order[static_cast<std::size_t>(start + j)];
                xb.col(j) = data.features.col(src);
                tb.col(j) = data.targets.col(src);
            }
            Gradients g = compute_gradients(net, xb, tb);
            if (!std::isfinite(g.loss)) {
                throw NumericalFault("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                     std::to_string(batches));
            }
            auto& layers = net.layers();
            for (std::size_t k = 0; k < layers.size(); ++k) update.apply(k, layers[k], g.weights[k], g.biases[k]);
            total += g.loss;
            ++batches;
        }
        trace.epoch_loss.push_back(total / batches);
    }
    return trace;
}

}  // namespace metaplastic
