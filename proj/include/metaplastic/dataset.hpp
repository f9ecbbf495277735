#pragma once

// Two-digit composed dataset.
//
// A class is an ordered digit pair (a, b) with a < b, rendered as a 28x56
// image: a digit-a instance on the left, a digit-b instance on the right.
// Train images are composed only from the corpus train split and test images
// only from the test split. Within a class and split every image uses a
// distinct (left instance, right instance) pair.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <span>
#include <unordered_set>
#include <utility>
#include <vector>

#include "metaplastic/error.hpp"
#include "metaplastic/idx.hpp"
#include "metaplastic/rng.hpp"

namespace metaplastic {

inline constexpr int digit_rows = 28;
inline constexpr int digit_cols = 28;
inline constexpr int digit_pixels = digit_rows * digit_cols;
inline constexpr int pair_rows = 28;
inline constexpr int pair_cols = 56;
inline constexpr int pair_pixels = pair_rows * pair_cols;

inline constexpr std::size_t standard_train_count = 60000;
inline constexpr std::size_t standard_test_count = 10000;

enum class Split { train, test };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

struct DigitSplit {
    std::vector<std::uint8_t> pixels;  // count * 784, row-major per image
    std::vector<std::uint8_t> labels;

    std::size_t size() const noexcept { return labels.size(); }
    std::span<const std::uint8_t> image(std::size_t i) const {
        return {pixels.data() + i * digit_pixels, digit_pixels};
    }
};

struct DigitCorpus {
    DigitSplit train;
    DigitSplit test;

    const DigitSplit& split(Split s) const { return s == Split::train ? train : test; }
    bool has_standard_counts() const {
        return train.size() == standard_train_count && test.size() == standard_test_count;
    }
};

struct CorpusOptions {
    // Reject corpora whose split sizes differ from 60000/10000.
    bool require_standard_counts = false;
};

namespace detail {

inline std::filesystem::path find_idx(const std::filesystem::path& dir, const std::string& stem) {
    for (const auto& name : {stem, stem + ".gz"}) {
        auto p = dir / name;
        if (std::filesystem::exists(p)) return p;
    }
    throw IngestError("missing IDX file " + (dir / stem).string() + "[.gz]");
}

inline DigitSplit load_split(const std::filesystem::path& dir, const std::string& prefix) {
    const auto image_path = find_idx(dir, prefix + "-images-idx3-ubyte");
    const auto label_path = find_idx(dir, prefix + "-labels-idx1-ubyte");
    auto images = idx::read_images(image_path);
    auto labels = idx::read_labels(label_path);
    if (images.rows != digit_rows || images.cols != digit_cols) {
        throw IngestError(image_path.string() + ": expected 28x28 images, found " + std::to_string(images.rows) + "x" +
                          std::to_string(images.cols));
    }
    if (images.count != labels.size()) {
        throw IngestError("count mismatch: " + image_path.string() + " has " + std::to_string(images.count) +
                          " images but " + label_path.string() + " has " + std::to_string(labels.size()) + " labels");
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] > 9) {
            throw IngestError(label_path.string() + ": label " + std::to_string(labels[i]) + " out of range at index " +
                              std::to_string(i));
        }
    }
    return {std::move(images.pixels), std::move(labels)};
}

}  // namespace detail

// Reads train-{images,labels} and t10k-{images,labels} IDX files from `dir`.
inline DigitCorpus load_corpus(const std::filesystem::path& dir, const CorpusOptions& options = {}) {
    DigitCorpus corpus{detail::load_split(dir, "train"), detail::load_split(dir, "t10k")};
    if (options.require_standard_counts && !corpus.has_standard_counts()) {
        throw IngestError("corpus in " + dir.string() + " has " + std::to_string(corpus.train.size()) + "/" +
                          std::to_string(corpus.test.size()) + " train/test images, expected 60000/10000");
    }
    return corpus;
}

struct TwoDigitClass {
    int first = 0;
    int second = 1;

    TwoDigitClass() = default;
    TwoDigitClass(int a, int b) : first(a), second(b) {
        if (a < 0 || b > 9 || a >= b) {
            throw ConfigError("invalid two-digit class " + std::to_string(a) + std::to_string(b) +
                              " (need 0 <= a < b <= 9)");
        }
    }

    std::string label() const { return std::to_string(first) + std::to_string(second); }
    // Position in the 45-class lexicographic universe.
    int universe_index() const { return first * 9 - first * (first - 1) / 2 + (second - first - 1); }

    static TwoDigitClass parse(const std::string& text) {
        if (text.size() != 2 || text[0] < '0' || text[0] > '9' || text[1] < '0' || text[1] > '9') {
            throw ConfigError("malformed class label '" + text + "'");
        }
        return {text[0] - '0', text[1] - '0'};
    }

    friend bool operator==(const TwoDigitClass&, const TwoDigitClass&) = default;
    friend auto operator<=>(const TwoDigitClass&, const TwoDigitClass&) = default;
};

inline constexpr int class_universe_size = 45;

// All 45 pairs (a, b) with a < b, lexicographic.
inline std::vector<TwoDigitClass> enumerate_classes() {
    std::vector<TwoDigitClass> out;
    out.reserve(class_universe_size);
    for (int a = 0; a < 10; ++a)
        for (int b = a + 1; b < 10; ++b) out.emplace_back(a, b);
    return out;
}

using InstancePair = std::pair<std::uint32_t, std::uint32_t>;

struct ClassImages {
    std::vector<std::uint8_t> pixels;  // count * 1568, row-major 28x56 per image
    std::vector<InstancePair> sources;  // corpus split indices (left, right); empty when loaded from cache

    std::size_t size() const noexcept { return pixels.size() / pair_pixels; }
    std::span<const std::uint8_t> image(std::size_t i) const {
        return {pixels.data() + i * pair_pixels, pair_pixels};
    }
};

struct TwoDigitDataset {
    std::vector<TwoDigitClass> classes;
    std::vector<ClassImages> train;  // parallel to classes
    std::vector<ClassImages> test;
    std::size_t per_class_train = 0;
    std::size_t per_class_test = 0;
    std::uint64_t seed = 0;

    const std::vector<ClassImages>& split(Split s) const { return s == Split::train ? train : test; }

    // Index of `c` in `classes`, or -1.
    int find(const TwoDigitClass& c) const {
        auto it = std::find(classes.begin(), classes.end(), c);
        return it == classes.end() ? -1 : static_cast<int>(it - classes.begin());
    }

    std::uint64_t content_hash() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto feed = [&](std::uint8_t b) {
            h ^= b;
            h *= 0x100000001b3ULL;
        };
        for (std::size_t k = 0; k < classes.size(); ++k) {
            feed(static_cast<std::uint8_t>(classes[k].first));
            feed(static_cast<std::uint8_t>(classes[k].second));
            for (auto b : train[k].pixels) feed(b);
            for (auto b : test[k].pixels) feed(b);
        }
        return h;
    }
};

inline void render_pair(std::span<const std::uint8_t> left, std::span<const std::uint8_t> right,
                        std::uint8_t* out) {
    for (int r = 0; r < pair_rows; ++r) {
        std::copy_n(left.data() + r * digit_cols, digit_cols, out + r * pair_cols);
        std::copy_n(right.data() + r * digit_cols, digit_cols, out + r * pair_cols + digit_cols);
    }
}

namespace detail {

inline std::vector<InstancePair> sample_distinct_pairs(std::size_t n_left, std::size_t n_right, std::size_t demand,
                                                       Rng& rng, const std::string& what) {
    const std::size_t total = n_left * n_right;
    if (demand > total) {
        throw CompositionError(what + ": requested " + std::to_string(demand) + " distinct pairs but only " +
                               std::to_string(total) + " exist");
    }
    std::vector<InstancePair> out;
    out.reserve(demand);
    if (demand * 2 > total) {
        std::vector<std::uint64_t> all(total);
        for (std::size_t i = 0; i < total; ++i) all[i] = i;
        // Partial Fisher-Yates.
        for (std::size_t i = 0; i < demand; ++i) {
            std::uniform_int_distribution<std::size_t> pick(i, total - 1);
            std::swap(all[i], all[pick(rng)]);
            out.emplace_back(static_cast<std::uint32_t>(all[i] / n_right), static_cast<std::uint32_t>(all[i] % n_right));
        }
        return out;
    }
    std::unordered_set<std::uint64_t> seen;
    seen.reserve(demand * 2);
    std::uniform_int_distribution<std::size_t> pick_left(0, n_left - 1);
    std::uniform_int_distribution<std::size_t> pick_right(0, n_right - 1);
    while (out.size() < demand) {
        const auto l = pick_left(rng);
        const auto r = pick_right(rng);
        if (seen.insert(std::uint64_t{l} * n_right + r).second) {
            out.emplace_back(static_cast<std::uint32_t>(l), static_cast<std::uint32_t>(r));
        }
    }
    return out;
}

}  // namespace detail

inline TwoDigitDataset compose(const DigitCorpus& corpus, const std::vector<TwoDigitClass>& classes,
                               std::size_t per_class_train, std::size_t per_class_test, std::uint64_t seed) {
    TwoDigitDataset ds;
    ds.classes = classes;
    ds.per_class_train = per_class_train;
    ds.per_class_test = per_class_test;
    ds.seed = seed;
    for (std::size_t i = 0; i < classes.size(); ++i)
        for (std::size_t j = i + 1; j < classes.size(); ++j)
            if (classes[i] == classes[j]) throw ConfigError("duplicate class " + classes[i].label());

    for (Split split : {Split::train, Split::test}) {
        const auto& src = corpus.split(split);
        std::array<std::vector<std::uint32_t>, 10> by_digit;
        for (std::size_t i = 0; i < src.size(); ++i) by_digit[src.labels[i]].push_back(static_cast<std::uint32_t>(i));
        const std::size_t demand = split == Split::train ? per_class_train : per_class_test;
        auto& dest = split == Split::train ? ds.train : ds.test;
        dest.resize(classes.size());
        for (std::size_t k = 0; k < classes.size(); ++k) {
            const auto& left = by_digit[static_cast<std::size_t>(classes[k].first)];
            const auto& right = by_digit[static_cast<std::size_t>(classes[k].second)];
            Rng rng(derive_seed(seed, {stream::compose, static_cast<std::uint64_t>(classes[k].universe_index()),
                                       split == Split::train ? 0u : 1u}));
            auto pairs = detail::sample_distinct_pairs(left.size(), right.size(), demand, rng,
                                                       "class " + classes[k].label() + " (" + split_name(split) + ")");
            auto& out = dest[k];
            out.pixels.resize(demand * pair_pixels);
            out.sources.reserve(demand);
            for (std::size_t n = 0; n < demand; ++n) {
                const InstancePair source{left[pairs[n].first], right[pairs[n].second]};
                out.sources.push_back(source);
                render_pair(src.image(source.first), src.image(source.second), out.pixels.data() + n * pair_pixels);
            }
        }
    }
    return ds;
}

// Cache layout (all integers big-endian u32):
//   "MPD2" magic, version=1, class_count, per_class_train, per_class_test,
//   rows=28, cols=56, then class_count * (first u8, second u8),
//   then for each class: train images, then test images, row-major bytes.
namespace cache {

inline constexpr char magic[4] = {'M', 'P', 'D', '2'};
inline constexpr std::uint32_t version = 1;

inline void write(const TwoDigitDataset& ds, const std::filesystem::path& path) {
    std::vector<std::uint8_t> out(magic, magic + 4);
    for (std::uint32_t v : {version, static_cast<std::uint32_t>(ds.classes.size()),
                            static_cast<std::uint32_t>(ds.per_class_train), static_cast<std::uint32_t>(ds.per_class_test),
                            static_cast<std::uint32_t>(pair_rows), static_cast<std::uint32_t>(pair_cols)}) {
        idx::append_be32(out, v);
    }
    for (const auto& c : ds.classes) {
        out.push_back(static_cast<std::uint8_t>(c.first));
        out.push_back(static_cast<std::uint8_t>(c.second));
    }
    for (std::size_t k = 0; k < ds.classes.size(); ++k) {
        out.insert(out.end(), ds.train[k].pixels.begin(), ds.train[k].pixels.end());
        out.insert(out.end(), ds.test[k].pixels.begin(), ds.test[k].pixels.end());
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IngestError("cannot write " + path.string());
    f.write(reinterpret_cast<const char*>(out.data()), static_cast<std::streamsize>(out.size()));
}

inline TwoDigitDataset read(const std::filesystem::path& path, std::uint64_t seed = 0) {
    const auto bytes = idx::read_file_bytes(path);
    if (bytes.size() < 4 || !std::equal(magic, magic + 4, bytes.begin())) {
        throw IngestError(path.string() + ": not a composed dataset cache");
    }
    if (idx::read_be32(bytes, 4, path) != version) throw IngestError(path.string() + ": unsupported cache version");
    TwoDigitDataset ds;
    const std::size_t n_classes = idx::read_be32(bytes, 8, path);
    ds.per_class_train = idx::read_be32(bytes, 12, path);
    ds.per_class_test = idx::read_be32(bytes, 16, path);
    if (idx::read_be32(bytes, 20, path) != pair_rows || idx::read_be32(bytes, 24, path) != pair_cols) {
        throw IngestError(path.string() + ": unexpected image dimensions");
    }
    ds.seed = seed;
    std::size_t offset = 28;
    const std::size_t need =
        offset + 2 * n_classes + n_classes * (ds.per_class_train + ds.per_class_test) * pair_pixels;
    if (bytes.size() != need) {
        throw IngestError(path.string() + ": size " + std::to_string(bytes.size()) + " does not match header (" +
                          std::to_string(need) + ")");
    }
    for (std::size_t k = 0; k < n_classes; ++k, offset += 2) ds.classes.emplace_back(bytes[offset], bytes[offset + 1]);
    ds.train.resize(n_classes);
    ds.test.resize(n_classes);
    for (std::size_t k = 0; k < n_classes; ++k) {
        const auto n_tr = ds.per_class_train * pair_pixels;
        const auto n_te = ds.per_class_test * pair_pixels;
        ds.train[k].pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                  bytes.begin() + static_cast<std::ptrdiff_t>(offset + n_tr));
        offset += n_tr;
        ds.test[k].pixels.assign(bytes.begin() + static_cast<std::ptrdiff_t>(offset),
                                 bytes.begin() + static_cast<std::ptrdiff_t>(offset + n_te));
        offset += n_te;
    }
    return ds;
}

}  // namespace cache

}  // namespace metaplastic
