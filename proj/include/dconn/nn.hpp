#pragma once

#include "dconn/error.hpp"
#include "dconn/rng.hpp"
#include "dconn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dconn {

inline constexpr double kLayerNormEpsilon = 1e-6;

template <typename T>
struct NamedParam {
    std::string name;
    Matrix<T> *value;
};

// ---------------------------------------------------------------------------
// Layer normalization

template <typename T>
struct LayerNormCache {
    Matrix<T> normalized; // (x - mean) / sqrt(var + eps), per row
    std::vector<T> inv_std;
};

/// Normalizes every row of `x`; `gain` and `shift` are 1 x cols.
template <typename T>
std::pair<Matrix<T>, LayerNormCache<T>> layer_norm_forward(const Matrix<T> &x, const Matrix<T> &gain,
                                                           const Matrix<T> &shift) {
    const std::size_t n = x.cols();
    if (n < 2) {
        throw DimensionError("layer_norm needs at least 2 features");
    }
    detail::require(gain.cols() == n && shift.cols() == n, "layer_norm", gain.cols(), n);
    LayerNormCache<T> cache{Matrix<T>(x.rows(), n), std::vector<T>(x.rows())};
    Matrix<T> y(x.rows(), n);
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const auto xr = x.row(r);
        T mean = T(0);
        for (T v : xr) {
            mean += v;
        }
        mean /= static_cast<T>(n);
        T var = T(0);
        for (T v : xr) {
            var += (v - mean) * (v - mean);
        }
        var /= static_cast<T>(n);
        const T inv = T(1) / std::sqrt(var + static_cast<T>(kLayerNormEpsilon));
        cache.inv_std[r] = inv;
        for (std::size_t c = 0; c < n; ++c) {
            const T h = (xr[c] - mean) * inv;
            cache.normalized(r, c) = h;
            y(r, c) = gain[c] * h + shift[c];
        }
    }
    return {std::move(y), std::move(cache)};
}

/// Returns dx and accumulates into dgain / dshift.
template <typename T>
Matrix<T> layer_norm_backward(const LayerNormCache<T> &cache, const Matrix<T> &gain, const Matrix<T> &dy,
                              Matrix<T> &dgain, Matrix<T> &dshift) {
    const std::size_t n = dy.cols();
    Matrix<T> dx(dy.rows(), n);
    std::vector<T> dh(n);
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        T mean_dh = T(0);
        T mean_dh_h = T(0);
        for (std::size_t c = 0; c < n; ++c) {
            const T h = cache.normalized(r, c);
            dgain[c] += dy(r, c) * h;
            dshift[c] += dy(r, c);
            dh[c] = dy(r, c) * gain[c];
            mean_dh += dh[c];
            mean_dh_h += dh[c] * h;
        }
        mean_dh /= static_cast<T>(n);
        mean_dh_h /= static_cast<T>(n);
        for (std::size_t c = 0; c < n; ++c) {
            dx(r, c) = cache.inv_std[r] * (dh[c] - mean_dh - cache.normalized(r, c) * mean_dh_h);
        }
    }
    return dx;
}

// ---------------------------------------------------------------------------
// Feed-forward network

/// Affine layers with a rectifier after every hidden layer and identity on
/// the output. With layer_norm set, each hidden affine output is normalized
/// before the rectifier. Inverted dropout is applied to the network input in
/// training mode.
template <typename T>
struct FeedForward {
    std::vector<Matrix<T>> weights; // in x out
    std::vector<Matrix<T>> biases;  // 1 x out
    std::vector<Matrix<T>> ln_gain; // 1 x out, hidden layers only
    std::vector<Matrix<T>> ln_shift;
    double dropout = 0.0;
    bool layer_norm = false;

    FeedForward() = default;

    /// dims = {input, hidden..., output}
    FeedForward(const std::vector<std::size_t> &dims, double dropout_rate, bool use_layer_norm)
        : dropout(dropout_rate), layer_norm(use_layer_norm) {
        if (dims.size() < 2) {
            throw DimensionError("feed-forward network needs at least input and output dims");
        }
        if (!(dropout_rate >= 0.0 && dropout_rate < 1.0)) {
            throw Error("dropout rate must be in [0, 1)");
        }
        for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
            weights.emplace_back(dims[l], dims[l + 1]);
            biases.emplace_back(1, dims[l + 1]);
            if (layer_norm && l + 2 < dims.size()) {
                ln_gain.emplace_back(1, dims[l + 1], T(1));
                ln_shift.emplace_back(1, dims[l + 1]);
            }
        }
    }

    std::size_t num_layers() const { return weights.size(); }
    std::size_t input_dim() const { return weights.front().rows(); }
    std::size_t output_dim() const { return weights.back().cols(); }

    /// Glorot-uniform weights, zero biases, unit gains. With zero_output the
    /// final layer's weights start at zero.
    void init_glorot(Rng &rng, bool zero_output = false) {
        for (std::size_t l = 0; l < weights.size(); ++l) {
            auto &w = weights[l];
            const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
            for (auto &v : w.values()) {
                v = (zero_output && l + 1 == weights.size()) ? T(0) : static_cast<T>(rng.uniform(-bound, bound));
            }
            biases[l].fill(T(0));
        }
        for (auto &g : ln_gain) {
            g.fill(T(1));
        }
        for (auto &s : ln_shift) {
            s.fill(T(0));
        }
    }

    std::vector<NamedParam<T>> params(const std::string &prefix) {
        std::vector<NamedParam<T>> out;
        for (std::size_t l = 0; l < weights.size(); ++l) {
            const std::string p = prefix + "." + std::to_string(l);
            out.push_back({p + ".weight", &weights[l]});
            out.push_back({p + ".bias", &biases[l]});
            if (l < ln_gain.size()) {
                out.push_back({p + ".ln_gain", &ln_gain[l]});
                out.push_back({p + ".ln_shift", &ln_shift[l]});
            }
        }
        return out;
    }

    /// Same shapes, all entries zero. Used as the gradient container.
    FeedForward zeros_like() const {
        FeedForward z = *this;
        for (auto *group : {&z.weights, &z.biases, &z.ln_gain, &z.ln_shift}) {
            for (auto &m : *group) {
                m.fill(T(0));
            }
        }
        return z;
    }

    template <typename U>
    FeedForward<U> cast() const {
        FeedForward<U> out;
        out.dropout = dropout;
        out.layer_norm = layer_norm;
        for (const auto &m : weights) out.weights.push_back(m.template cast<U>());
        for (const auto &m : biases) out.biases.push_back(m.template cast<U>());
        for (const auto &m : ln_gain) out.ln_gain.push_back(m.template cast<U>());
        for (const auto &m : ln_shift) out.ln_shift.push_back(m.template cast<U>());
        return out;
    }
};

/// Moves `src` into `dst` entry by entry so that pointers to the matrices of
/// `dst` (as held by an optimizer) stay valid. Shapes must agree.
template <typename T>
void assign_in_place(FeedForward<T> &dst, FeedForward<T> &&src) {
    if (dst.weights.size() != src.weights.size() || dst.ln_gain.size() != src.ln_gain.size()) {
        dst = std::move(src);
        return;
    }
    for (std::size_t l = 0; l < dst.weights.size(); ++l) {
        dst.weights[l] = std::move(src.weights[l]);
        dst.biases[l] = std::move(src.biases[l]);
    }
    for (std::size_t l = 0; l < dst.ln_gain.size(); ++l) {
        dst.ln_gain[l] = std::move(src.ln_gain[l]);
        dst.ln_shift[l] = std::move(src.ln_shift[l]);
    }
}

template <typename T>
struct FeedForwardCache {
    const FeedForward<T> *owner = nullptr;
    bool consumed = false;
    Matrix<T> dropout_scale;               // empty when no dropout was applied
    std::vector<Matrix<T>> layer_inputs;   // input to each affine layer
    std::vector<LayerNormCache<T>> ln;     // hidden layers, when layer_norm
    std::vector<Matrix<T>> relu_inputs;    // hidden layers
};

/// Inverted dropout: zeroes each entry with probability `rate` and scales
/// survivors by 1 / (1 - rate). Returns the per-entry scale.
template <typename T>
Matrix<T> dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng &rng) {
    Matrix<T> mask(rows, cols);
    const T keep = static_cast<T>(1.0 / (1.0 - rate));
    for (auto &v : mask.values()) {
        v = rng.uniform() < rate ? T(0) : keep;
    }
    return mask;
}

template <typename T>
std::pair<Matrix<T>, FeedForwardCache<T>> ff_forward(const FeedForward<T> &net, const Matrix<T> &x, bool train_mode,
                                                     Rng *rng) {
    detail::require(x.cols() == net.input_dim(), "ff_forward", x.cols(), net.input_dim());
    FeedForwardCache<T> cache;
    cache.owner = &net;
    Matrix<T> h = x;
    if (train_mode && net.dropout > 0.0) {
        if (rng == nullptr) {
            throw Error("ff_forward: dropout in training mode needs an rng");
        }
        cache.dropout_scale = dropout_mask<T>(x.rows(), x.cols(), net.dropout, *rng);
        for (std::size_t i = 0; i < h.size(); ++i) {
            h[i] *= cache.dropout_scale[i];
        }
    }
    for (std::size_t l = 0; l < net.num_layers(); ++l) {
        Matrix<T> z = matmul(h, net.weights[l]);
        const auto &b = net.biases[l];
        for (std::size_t r = 0; r < z.rows(); ++r) {
            auto zr = z.row(r);
            for (std::size_t c = 0; c < zr.size(); ++c) {
                zr[c] += b[c];
            }
        }
        cache.layer_inputs.push_back(std::move(h));
        if (l + 1 == net.num_layers()) {
            h = std::move(z);
            break;
        }
        if (net.layer_norm) {
            auto [y, lc] = layer_norm_forward(z, net.ln_gain[l], net.ln_shift[l]);
            z = std::move(y);
            cache.ln.push_back(std::move(lc));
        }
        h = z;
        for (auto &v : h.values()) {
            v = v > T(0) ? v : T(0);
        }
        cache.relu_inputs.push_back(std::move(z));
    }
    return {std::move(h), std::move(cache)};
}

/// Gradients of ff_forward. Returns (dx, dparams); dparams has the shape of
/// `net`. A cache may be consumed only once and only by the net that made it.
template <typename T>
std::pair<Matrix<T>, FeedForward<T>> ff_backward(const FeedForward<T> &net, FeedForwardCache<T> &cache,
                                                 const Matrix<T> &dy) {
    if (cache.owner != &net) {
        throw Error("ff_backward: cache was produced by a different network");
    }
    if (cache.consumed) {
        throw Error("ff_backward: stale cache (already consumed)");
    }
    cache.consumed = true;
    FeedForward<T> grads = net.zeros_like();
    Matrix<T> d = dy;
    for (std::size_t l = net.num_layers(); l-- > 0;) {
        if (l + 1 < net.num_layers()) {
            const auto &pre = cache.relu_inputs[l];
            for (std::size_t i = 0; i < d.size(); ++i) {
                if (!(pre[i] > T(0))) {
                    d[i] = T(0);
                }
            }
            if (net.layer_norm) {
                d = layer_norm_backward(cache.ln[l], net.ln_gain[l], d, grads.ln_gain[l], grads.ln_shift[l]);
            }
        }
        const auto &x = cache.layer_inputs[l];
        detail::require(d.rows() == x.rows(), "ff_backward", d.rows(), x.rows());
        grads.weights[l] = matmul_tn(x, d);
        auto &db = grads.biases[l];
        for (std::size_t r = 0; r < d.rows(); ++r) {
            for (std::size_t c = 0; c < d.cols(); ++c) {
                db[c] += d(r, c);
            }
        }
        d = matmul_nt(d, net.weights[l]);
    }
    if (!cache.dropout_scale.empty()) {
        for (std::size_t i = 0; i < d.size(); ++i) {
            d[i] *= cache.dropout_scale[i];
        }
    }
    return {std::move(d), std::move(grads)};
}

// ---------------------------------------------------------------------------
// Loss

template <typename T>
struct LossResult {
    T loss;
    Matrix<T> dlogits;
};

/// Mean softmax cross-entropy over the rows of `logits`.
template <typename T>
LossResult<T> softmax_xent(const Matrix<T> &logits, std::span<const int> labels) {
    detail::require(labels.size() == logits.rows(), "softmax_xent", labels.size(), logits.rows());
    Matrix<T> p = softmax_rows(logits);
    const T inv_batch = T(1) / static_cast<T>(std::max<std::size_t>(1, logits.rows()));
    T loss = T(0);
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const int y = labels[r];
        if (y < 0 || static_cast<std::size_t>(y) >= logits.cols()) {
            throw Error("softmax_xent: label out of range: " + std::to_string(y));
        }
        const auto row = logits.row(r);
        const T mx = *std::max_element(row.begin(), row.end());
        T sum = T(0);
        for (T v : row) {
            sum += std::exp(v - mx);
        }
        loss += std::log(sum) + mx - row[static_cast<std::size_t>(y)];
        p(r, static_cast<std::size_t>(y)) -= T(1);
    }
    p *= inv_batch;
    return {loss * inv_batch, std::move(p)};
}

// ---------------------------------------------------------------------------
// Optimizer

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::adam;
    double learning_rate = 0.0018;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

/// Adam with bias correction, or plain SGD.
template <typename T>
class Optimizer {
  public:
    explicit Optimizer(OptimizerConfig config = {}) : config_(config) {}

    const OptimizerConfig &config() const { return config_; }
    long steps() const { return t_; }

    void step(std::span<const NamedParam<T>> params, std::span<const Matrix<T> *const> grads) {
        detail::require(params.size() == grads.size(), "optimizer_step", params.size(), grads.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params[i].value->same_shape(*grads[i])) {
                throw DimensionError("optimizer_step: gradient shape mismatch for " + params[i].name);
            }
            for (T g : grads[i]->values()) {
                if (!std::isfinite(g)) {
                    throw NumericError("non-finite gradient for parameter " + params[i].name);
                }
            }
        }
        ++t_;
        const T lr = static_cast<T>(config_.learning_rate);
        if (config_.kind == OptimizerKind::sgd) {
            for (std::size_t i = 0; i < params.size(); ++i) {
                auto w = params[i].value->values();
                auto g = grads[i]->values();
                for (std::size_t k = 0; k < w.size(); ++k) {
                    w[k] -= lr * g[k];
                }
            }
            return;
        }
        if (m_.empty()) {
            for (const auto &p : params) {
                m_.emplace_back(p.value->rows(), p.value->cols());
                v_.emplace_back(p.value->rows(), p.value->cols());
            }
        }
        detail::require(m_.size() == params.size(), "optimizer_step", m_.size(), params.size());
        const T b1 = static_cast<T>(config_.beta1);
        const T b2 = static_cast<T>(config_.beta2);
        const T eps = static_cast<T>(config_.epsilon);
        const T corr1 = T(1) - static_cast<T>(std::pow(config_.beta1, static_cast<double>(t_)));
        const T corr2 = T(1) - static_cast<T>(std::pow(config_.beta2, static_cast<double>(t_)));
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto w = params[i].value->values();
            auto g = grads[i]->values();
            auto m = m_[i].values();
            auto v = v_[i].values();
            for (std::size_t k = 0; k < w.size(); ++k) {
                m[k] = b1 * m[k] + (T(1) - b1) * g[k];
                v[k] = b2 * v[k] + (T(1) - b2) * g[k] * g[k];
                const T mhat = m[k] / corr1;
                const T vhat = v[k] / corr2;
                w[k] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

  private:
    OptimizerConfig config_;
    long t_ = 0;
    std::vector<Matrix<T>> m_;
    std::vector<Matrix<T>> v_;
};

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t worst_index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
};

struct GradCheckReport {
    double tolerance = 0.0;
    std::vector<GradCheckEntry> entries;

    double max_rel_error() const {
        double m = 0.0;
        for (const auto &e : entries) {
            m = std::max(m, e.max_rel_error);
        }
        return m;
    }
    bool passed() const { return max_rel_error() < tolerance; }
    std::vector<std::string> failures() const {
        std::vector<std::string> out;
        for (const auto &e : entries) {
            if (!(e.max_rel_error < tolerance)) {
                out.push_back(e.name + "[" + std::to_string(e.worst_index) + "]: analytic " +
                              std::to_string(e.analytic) + " numeric " + std::to_string(e.numeric));
            }
        }
        return out;
    }
};

/// Relative error |a - n| / max(|a|, |n|, floor). The floor keeps entries
/// whose true gradient is ~0 from being judged on the O(step^2) truncation
/// error of the central difference alone.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares `analytic[i]` with central differences of `loss` w.r.t. every
/// entry of `params[i]`. `loss` must be deterministic (fixed dropout masks).
inline GradCheckReport grad_check(const std::function<double()> &loss, std::span<const NamedParam<double>> params,
                                  std::span<const Matrix<double>> analytic, double tolerance = 1e-4,
                                  double step = 1e-5) {
    detail::require(params.size() == analytic.size(), "grad_check", params.size(), analytic.size());
    GradCheckReport report;
    report.tolerance = tolerance;
    for (std::size_t p = 0; p < params.size(); ++p) {
        auto &w = *params[p].value;
        if (!w.same_shape(analytic[p])) {
            throw DimensionError("grad_check: gradient shape mismatch for " + params[p].name);
        }
        GradCheckEntry entry{params[p].name};
        for (std::size_t i = 0; i < w.size(); ++i) {
            const double saved = w[i];
            w[i] = saved + step;
            const double plus = loss();
            w[i] = saved - step;
            const double minus = loss();
            w[i] = saved;
            const double numeric = (plus - minus) / (2.0 * step);
            const double err = relative_error(analytic[p][i], numeric);
            if (err > entry.max_rel_error || i == 0) {
                entry.max_rel_error = err;
                entry.worst_index = i;
                entry.analytic = analytic[p][i];
                entry.numeric = numeric;
            }
        }
        report.entries.push_back(std::move(entry));
    }
    return report;
}

} // namespace dconn
