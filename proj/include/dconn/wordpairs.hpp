#pragma once

#include "dconn/checkpoint.hpp"
#include "dconn/corpus.hpp"
#include "dconn/error.hpp"
#include "dconn/rng.hpp"
#include "dconn/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <set>
#include <span>
#include <string>
#include <thread>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dconn {

struct WordPairsConfig {
    std::size_t min_support = 5;
    bool arg1_singles = false; // single-word features for Arg1 too
    bool hashed = false;       // hash features into buckets instead of a dictionary
    std::size_t hash_buckets = std::size_t{1} << 22;
    double learning_rate = 0.5;
    double l2 = 1e-5;
    std::size_t epochs = 20;
    std::size_t batch_size = 64;
    std::uint64_t seed = 0;
    unsigned threads = 1;

    nlohmann::json to_json() const {
        return {{"min_support", min_support}, {"arg1_singles", arg1_singles}, {"hashed", hashed},
                {"hash_buckets", hash_buckets}, {"learning_rate", learning_rate}, {"l2", l2},
                {"epochs", epochs}, {"batch_size", batch_size}, {"seed", seed}};
    }

    static WordPairsConfig from_json(const nlohmann::json &j) {
        WordPairsConfig c;
        c.min_support = j.value("min_support", c.min_support);
        c.arg1_singles = j.value("arg1_singles", c.arg1_singles);
        c.hashed = j.value("hashed", c.hashed);
        c.hash_buckets = j.value("hash_buckets", c.hash_buckets);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.l2 = j.value("l2", c.l2);
        c.epochs = j.value("epochs", c.epochs);
        c.batch_size = j.value("batch_size", c.batch_size);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

/// Sorted, unique, binary feature indices.
struct SparseFeatureVector {
    std::vector<std::uint32_t> indices;
};

/// Raw feature keys of one example: `pair\t<w1>\t<w2>` for every Arg1 x Arg2
/// word combination, `arg2\t<w>` for Arg2 words and optionally `arg1\t<w>`.
/// Words are lowercased; each key appears once.
inline std::vector<std::string> feature_keys(const Sentence &arg1, const Sentence &arg2, bool arg1_singles) {
    std::set<std::string> w1;
    std::set<std::string> w2;
    for (const auto &t : arg1.tokens) w1.insert(to_lower(t));
    for (const auto &t : arg2.tokens) w2.insert(to_lower(t));
    std::vector<std::string> keys;
    keys.reserve(w1.size() * w2.size() + w2.size() + (arg1_singles ? w1.size() : 0));
    for (const auto &a : w1) {
        for (const auto &b : w2) {
            keys.push_back("pair\t" + a + "\t" + b);
        }
    }
    for (const auto &b : w2) keys.push_back("arg2\t" + b);
    if (arg1_singles) {
        for (const auto &a : w1) keys.push_back("arg1\t" + a);
    }
    return keys;
}

/// Maps feature keys to dense indices. Only keys present in at least
/// min_support training samples are kept; indices follow lexicographic key
/// order. In hashed mode there is no dictionary and keys map to
/// fnv1a64(key) % hash_buckets.
class FeatureDict {
  public:
    FeatureDict() = default;

    static FeatureDict build(std::span<const LabeledExample> train, const WordPairsConfig &config) {
        if (train.empty()) {
            throw Error("build_feature_dict: empty training set");
        }
        FeatureDict d;
        d.arg1_singles_ = config.arg1_singles;
        d.hashed_ = config.hashed;
        d.buckets_ = config.hash_buckets;
        if (d.hashed_) {
            return d;
        }
        std::unordered_map<std::string, std::size_t> support;
        for (const auto &e : train) {
            for (auto &k : feature_keys(e.arg1, e.arg2, config.arg1_singles)) {
                ++support[k];
            }
        }
        std::vector<std::pair<std::string, std::size_t>> kept;
        for (auto &[k, n] : support) {
            if (n >= config.min_support) {
                kept.emplace_back(k, n);
            }
        }
        std::sort(kept.begin(), kept.end());
        for (auto &[k, n] : kept) {
            d.index_.emplace(k, static_cast<std::uint32_t>(d.keys_.size()));
            d.keys_.push_back(k);
            d.support_.push_back(n);
        }
        return d;
    }

    /// Rebuilds a dictionary from stored keys (model files).
    static FeatureDict from_keys(std::vector<std::string> keys, std::vector<std::size_t> support, bool arg1_singles) {
        FeatureDict d;
        d.arg1_singles_ = arg1_singles;
        for (std::size_t i = 0; i < keys.size(); ++i) {
            d.index_.emplace(keys[i], static_cast<std::uint32_t>(i));
        }
        d.keys_ = std::move(keys);
        d.support_ = std::move(support);
        d.support_.resize(d.keys_.size(), 0);
        return d;
    }

    static FeatureDict hashed(std::size_t buckets, bool arg1_singles) {
        FeatureDict d;
        d.hashed_ = true;
        d.buckets_ = buckets;
        d.arg1_singles_ = arg1_singles;
        return d;
    }

    SparseFeatureVector featurize(const Sentence &arg1, const Sentence &arg2) const {
        SparseFeatureVector v;
        for (const auto &k : feature_keys(arg1, arg2, arg1_singles_)) {
            if (hashed_) {
                v.indices.push_back(static_cast<std::uint32_t>(fnv1a64(k) % buckets_));
            } else if (const auto it = index_.find(k); it != index_.end()) {
                v.indices.push_back(it->second);
            }
        }
        std::sort(v.indices.begin(), v.indices.end());
        v.indices.erase(std::unique(v.indices.begin(), v.indices.end()), v.indices.end());
        return v;
    }

    SparseFeatureVector featurize(const LabeledExample &e) const { return featurize(e.arg1, e.arg2); }

    std::size_t size() const { return hashed_ ? buckets_ : keys_.size(); }
    bool is_hashed() const { return hashed_; }
    bool arg1_singles() const { return arg1_singles_; }
    const std::vector<std::string> &keys() const { return keys_; }
    const std::vector<std::size_t> &support() const { return support_; }

    std::optional<std::uint32_t> index(const std::string &key) const {
        const auto it = index_.find(key);
        if (it == index_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

    /// `index<TAB>kind<TAB>word(s)...<TAB>support` per feature.
    void write_tsv(std::ostream &out) const {
        for (std::size_t i = 0; i < keys_.size(); ++i) {
            out << i << '\t' << keys_[i] << '\t' << support_[i] << '\n';
        }
    }

  private:
    bool arg1_singles_ = false;
    bool hashed_ = false;
    std::size_t buckets_ = 0;
    std::vector<std::string> keys_;
    std::vector<std::size_t> support_;
    std::unordered_map<std::string, std::uint32_t> index_;
};

/// One binary logistic regressor per class over the feature space.
struct OvrModel {
    std::vector<std::vector<double>> weights; // K x num_features
    std::vector<double> biases;               // K
    double l2 = 0.0;

    std::size_t num_classes() const { return biases.size(); }
    std::size_t num_features() const { return weights.empty() ? 0 : weights.front().size(); }

    double score(std::size_t k, const SparseFeatureVector &x) const {
        double z = biases[k];
        for (auto f : x.indices) {
            if (f < weights[k].size()) {
                z += weights[k][f];
            }
        }
        return z;
    }
};

inline double sigmoid(double z) {
    if (z >= 0.0) {
        return 1.0 / (1.0 + std::exp(-z));
    }
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// log(1 + exp(z)) without overflow.
inline double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

struct LogisticGradient {
    double loss = 0.0;
    std::vector<double> weights; // dense, data term + L2
    double bias = 0.0;
};

/// Mean binary logistic loss of (w, b) over `xs` with 0/1 `targets`, plus
/// (l2 / 2) * |w|^2, and its gradient.
inline LogisticGradient logistic_objective(std::span<const double> w, double b,
                                           std::span<const SparseFeatureVector> xs, std::span<const int> targets,
                                           double l2) {
    LogisticGradient g;
    g.weights.assign(w.size(), 0.0);
    const double inv = xs.empty() ? 0.0 : 1.0 / static_cast<double>(xs.size());
    for (std::size_t i = 0; i < xs.size(); ++i) {
        double z = b;
        for (auto f : xs[i].indices) z += w[f];
        const double t = targets[i];
        g.loss += inv * (softplus(z) - t * z);
        const double r = inv * (sigmoid(z) - t);
        for (auto f : xs[i].indices) g.weights[f] += r;
        g.bias += r;
    }
    for (std::size_t f = 0; f < w.size(); ++f) {
        g.loss += 0.5 * l2 * w[f] * w[f];
        g.weights[f] += l2 * w[f];
    }
    return g;
}

namespace detail {

/// Seeded minibatch SGD for one binary problem. Weights are stored as
/// scale * u so that the L2 shrinkage of every step costs O(1).
inline void train_binary(std::vector<double> &w, double &b, std::span<const SparseFeatureVector> xs,
                         std::span<const int> targets, const std::vector<std::vector<std::size_t>> &epoch_orders,
                         const WordPairsConfig &config) {
    std::vector<double> u(w.size(), 0.0);
    double scale = 1.0;
    const double lr = config.learning_rate;
    std::unordered_map<std::uint32_t, double> grad;
    for (const auto &order : epoch_orders) {
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            const double inv = 1.0 / static_cast<double>(end - start);
            grad.clear();
            double gb = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const auto &x = xs[order[k]];
                double z = b;
                for (auto f : x.indices) z += scale * u[f];
                const double r = inv * (sigmoid(z) - targets[order[k]]);
                if (!std::isfinite(r)) {
                    throw NumericError("wordpairs: non-finite loss during training");
                }
                for (auto f : x.indices) grad[f] += r;
                gb += r;
            }
            scale *= 1.0 - lr * config.l2;
            for (const auto &[f, g] : grad) {
                u[f] -= lr * g / scale;
            }
            b -= lr * gb;
            if (scale < 1e-9) {
                for (auto &v : u) v *= scale;
                scale = 1.0;
            }
        }
    }
    for (std::size_t f = 0; f < w.size(); ++f) {
        w[f] = scale * u[f];
    }
}

} // namespace detail

/// K independent target-vs-rest regressors trained with seeded minibatch SGD
/// and L2 shrinkage. All classes see the same per-epoch example order, so the
/// result does not depend on `threads`.
inline OvrModel train_ovr(std::span<const SparseFeatureVector> xs, std::span<const int> labels, int num_classes,
                          std::size_t num_features, const WordPairsConfig &config) {
    if (xs.size() != labels.size()) {
        throw Error("train_ovr: vectors and labels differ in length");
    }
    if (config.batch_size == 0) {
        throw Error("train_ovr: batch_size must be positive");
    }
    for (const auto &x : xs) {
        if (!x.indices.empty() && x.indices.back() >= num_features) {
            throw Error("train_ovr: feature index outside the feature space");
        }
    }
    OvrModel m;
    m.l2 = config.l2;
    m.weights.assign(static_cast<std::size_t>(num_classes), std::vector<double>(num_features, 0.0));
    m.biases.assign(static_cast<std::size_t>(num_classes), 0.0);

    Rng rng(config.seed);
    std::vector<std::vector<std::size_t>> orders;
    std::vector<std::size_t> order(xs.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t e = 0; e < config.epochs; ++e) {
        rng.shuffle(order);
        orders.push_back(order);
    }

    auto train_class = [&](std::size_t k) {
        std::vector<int> targets(labels.size());
        for (std::size_t i = 0; i < labels.size(); ++i) {
            targets[i] = labels[i] == static_cast<int>(k) ? 1 : 0;
        }
        detail::train_binary(m.weights[k], m.biases[k], xs, targets, orders, config);
    };
    const unsigned threads = std::max(1u, config.threads);
    if (threads == 1) {
        for (std::size_t k = 0; k < m.biases.size(); ++k) train_class(k);
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t) {
            pool.emplace_back([&, t] {
                for (std::size_t k = t; k < m.biases.size(); k += threads) train_class(k);
            });
        }
        for (auto &th : pool) th.join();
    }
    return m;
}

/// (label, probability) by descending probability; ties go to the smaller
/// label id.
inline std::vector<std::pair<int, double>> predict_ovr(const OvrModel &m, const SparseFeatureVector &x) {
    std::vector<std::pair<int, double>> out;
    for (std::size_t k = 0; k < m.num_classes(); ++k) {
        out.emplace_back(static_cast<int>(k), sigmoid(m.score(k, x)));
    }
    std::stable_sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.second > b.second; });
    return out;
}

struct WordPairsModel {
    WordPairsConfig config;
    std::vector<std::string> labels;
    FeatureDict dict;
    OvrModel ovr;
};

inline WordPairsModel train_wordpairs(std::span<const LabeledExample> train, const std::vector<std::string> &labels,
                                      const WordPairsConfig &config) {
    WordPairsModel m;
    m.config = config;
    m.labels = labels;
    m.dict = FeatureDict::build(train, config);
    std::vector<SparseFeatureVector> xs;
    std::vector<int> ys;
    for (const auto &e : train) {
        xs.push_back(m.dict.featurize(e));
        ys.push_back(e.label_id);
    }
    m.ovr = train_ovr(xs, ys, static_cast<int>(labels.size()), m.dict.size(), config);
    return m;
}

inline std::vector<int> predict_labels(const WordPairsModel &m, std::span<const LabeledExample> examples) {
    std::vector<int> out;
    for (const auto &e : examples) {
        out.push_back(predict_ovr(m.ovr, m.dict.featurize(e)).front().first);
    }
    return out;
}

inline constexpr std::string_view kWordPairsMagic = "WPOVR";

inline void save_wordpairs(const std::filesystem::path &path, const WordPairsModel &m) {
    BinaryModel bin;
    bin.header["format"] = "WPOVR";
    bin.header["version"] = 1;
    bin.header["config"] = m.config.to_json();
    bin.header["labels"] = m.labels;
    bin.header["features"] = m.dict.keys();
    bin.header["support"] = m.dict.support();
    Matrix<float> w(m.ovr.num_classes(), m.ovr.num_features());
    Matrix<float> b(1, m.ovr.num_classes());
    for (std::size_t k = 0; k < m.ovr.num_classes(); ++k) {
        for (std::size_t f = 0; f < m.ovr.num_features(); ++f) {
            w(k, f) = static_cast<float>(m.ovr.weights[k][f]);
        }
        b[k] = static_cast<float>(m.ovr.biases[k]);
    }
    bin.tensors.emplace_back("weights", std::move(w));
    bin.tensors.emplace_back("biases", std::move(b));
    save_binary_model(path, kWordPairsMagic, bin);
}

inline WordPairsModel load_wordpairs(const std::filesystem::path &path) {
    const auto bin = load_binary_model(path, kWordPairsMagic);
    WordPairsModel m;
    try {
        m.config = WordPairsConfig::from_json(bin.header.at("config"));
        m.labels = bin.header.at("labels").get<std::vector<std::string>>();
        m.dict = m.config.hashed
                     ? FeatureDict::hashed(m.config.hash_buckets, m.config.arg1_singles)
                     : FeatureDict::from_keys(bin.header.at("features").get<std::vector<std::string>>(),
                                              bin.header.at("support").get<std::vector<std::size_t>>(),
                                              m.config.arg1_singles);
    } catch (const nlohmann::json::exception &e) {
        throw DataError(path.string() + ": malformed model header: " + e.what());
    }
    const auto &w = bin.tensor("weights");
    const auto &b = bin.tensor("biases");
    if (w.rows() != m.labels.size() || b.cols() != m.labels.size() || w.cols() != m.dict.size()) {
        throw DataError(path.string() + ": weight shapes do not match header");
    }
    m.ovr.l2 = m.config.l2;
    m.ovr.weights.assign(w.rows(), std::vector<double>(w.cols()));
    m.ovr.biases.assign(w.rows(), 0.0);
    for (std::size_t k = 0; k < w.rows(); ++k) {
        for (std::size_t f = 0; f < w.cols(); ++f) m.ovr.weights[k][f] = w(k, f);
        m.ovr.biases[k] = b[k];
    }
    return m;
}

} // namespace dconn
