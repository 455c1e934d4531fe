#pragma once

#include "dconn/checkpoint.hpp"
#include "dconn/corpus.hpp"
#include "dconn/error.hpp"
#include "dconn/eval.hpp"
#include "dconn/nn.hpp"
#include "dconn/rng.hpp"
#include "dconn/tensor.hpp"
#include "dconn/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace dconn {

/// Hyperparameters of the decomposable attention classifier. Defaults are the
/// full-scale configuration: one 200-unit hidden layer per network, batch 64,
/// input dropout 0.68 / 0.14 / 0.44 for the attend / compare / aggregate
/// networks, learning rate 0.0018, 300 000 steps, 100-d embeddings, length 50.
struct DaConfig {
    std::size_t embed_dim = 100;
    std::size_t hidden_dim = 200;
    std::size_t max_len = 50;
    std::size_t num_classes = 20;
    double dropout_attend = 0.68;
    double dropout_compare = 0.14;
    double dropout_aggregate = 0.44;
    double learning_rate = 0.0018;
    OptimizerKind optimizer = OptimizerKind::adam;
    std::size_t batch_size = 64;
    std::size_t max_steps = 300000;
    std::size_t eval_every = 1000;
    std::size_t log_every = 100;
    std::size_t vocab_min_freq = 2;
    bool layer_norm = true;
    double embedding_init_scale = 0.1;
    std::uint64_t seed = 0;

    nlohmann::json to_json() const {
        return {{"embed_dim", embed_dim},
                {"hidden_dim", hidden_dim},
                {"max_len", max_len},
                {"num_classes", num_classes},
                {"dropout_attend", dropout_attend},
                {"dropout_compare", dropout_compare},
                {"dropout_aggregate", dropout_aggregate},
                {"learning_rate", learning_rate},
                {"optimizer", optimizer == OptimizerKind::adam ? "adam" : "sgd"},
                {"batch_size", batch_size},
                {"max_steps", max_steps},
                {"eval_every", eval_every},
                {"log_every", log_every},
                {"vocab_min_freq", vocab_min_freq},
                {"layer_norm", layer_norm},
                {"embedding_init_scale", embedding_init_scale},
                {"seed", seed}};
    }

    static DaConfig from_json(const nlohmann::json &j) {
        DaConfig c;
        c.embed_dim = j.value("embed_dim", c.embed_dim);
        c.hidden_dim = j.value("hidden_dim", c.hidden_dim);
        c.max_len = j.value("max_len", c.max_len);
        c.num_classes = j.value("num_classes", c.num_classes);
        c.dropout_attend = j.value("dropout_attend", c.dropout_attend);
        c.dropout_compare = j.value("dropout_compare", c.dropout_compare);
        c.dropout_aggregate = j.value("dropout_aggregate", c.dropout_aggregate);
        c.learning_rate = j.value("learning_rate", c.learning_rate);
        c.optimizer = j.value("optimizer", std::string("adam")) == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
        c.batch_size = j.value("batch_size", c.batch_size);
        c.max_steps = j.value("max_steps", c.max_steps);
        c.eval_every = j.value("eval_every", c.eval_every);
        c.log_every = j.value("log_every", c.log_every);
        c.vocab_min_freq = j.value("vocab_min_freq", c.vocab_min_freq);
        c.layer_norm = j.value("layer_norm", c.layer_norm);
        c.embedding_init_scale = j.value("embedding_init_scale", c.embedding_init_scale);
        c.seed = j.value("seed", c.seed);
        return c;
    }
};

/// Lowercased token index. Index 0 is the padding token, 1 the unknown token.
class Vocab {
  public:
    static constexpr std::int32_t kNull = 0;
    static constexpr std::int32_t kUnk = 1;
    static constexpr std::string_view kNullToken = "<null>";
    static constexpr std::string_view kUnkToken = "<unk>";

    Vocab() : Vocab(std::vector<std::string>{}) {}

    /// `words` excludes the two special tokens.
    explicit Vocab(const std::vector<std::string> &words) {
        tokens_ = {std::string(kNullToken), std::string(kUnkToken)};
        for (const auto &w : words) {
            if (index_.count(w) != 0 || w == kNullToken || w == kUnkToken) {
                throw DataError("duplicate vocabulary entry '" + w + "'");
            }
            index_.emplace(w, static_cast<std::int32_t>(tokens_.size()));
            tokens_.push_back(w);
        }
    }

    /// Every lowercased token seen at least `min_freq` times, sorted.
    static Vocab build(std::span<const LabeledExample> examples, std::size_t min_freq) {
        std::map<std::string, std::size_t> counts;
        for (const auto &e : examples) {
            for (const auto *s : {&e.arg1, &e.arg2}) {
                for (const auto &t : s->tokens) {
                    ++counts[to_lower(t)];
                }
            }
        }
        std::vector<std::string> words;
        for (const auto &[w, n] : counts) {
            if (n >= min_freq && w != kNullToken && w != kUnkToken) {
                words.push_back(w);
            }
        }
        return Vocab(words);
    }

    std::int32_t index(std::string_view token) const {
        const auto it = index_.find(to_lower(token));
        return it == index_.end() ? kUnk : it->second;
    }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string> &tokens() const { return tokens_; }

    /// Entries after the two special tokens.
    std::vector<std::string> words() const { return {tokens_.begin() + 2, tokens_.end()}; }

  private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, std::int32_t> index_;
};

/// Both sentences as exactly max_len indices, right-padded with the null
/// token. mask_x[i] is 1 for real tokens.
struct EncodedPair {
    std::vector<std::int32_t> a;
    std::vector<std::int32_t> b;
    std::vector<std::uint8_t> mask_a;
    std::vector<std::uint8_t> mask_b;
    std::size_t len_a = 0;
    std::size_t len_b = 0;

    std::size_t max_len() const { return a.size(); }
};

inline EncodedPair encode(const Sentence &arg1, const Sentence &arg2, const Vocab &vocab, std::size_t max_len = 50) {
    EncodedPair e;
    auto fill = [&](const Sentence &s, std::vector<std::int32_t> &ids, std::vector<std::uint8_t> &mask,
                    std::size_t &len) {
        ids.assign(max_len, Vocab::kNull);
        mask.assign(max_len, 0);
        len = std::min(max_len, s.tokens.size());
        for (std::size_t i = 0; i < len; ++i) {
            ids[i] = vocab.index(s.tokens[i]);
            mask[i] = 1;
        }
    };
    fill(arg1, e.a, e.mask_a, e.len_a);
    fill(arg2, e.b, e.mask_b, e.len_b);
    return e;
}

inline EncodedPair encode(const LabeledExample &ex, const Vocab &vocab, std::size_t max_len = 50) {
    return encode(ex.arg1, ex.arg2, vocab, max_len);
}

/// Trainable arrays: the embedding table and the attend (F), compare (G) and
/// aggregate (H) networks.
template <typename T>
struct DaParams {
    Matrix<T> embeddings;
    FeedForward<T> attend_net;
    FeedForward<T> compare_net;
    FeedForward<T> aggregate_net;

    DaParams() = default;

    DaParams(std::size_t vocab_size, const DaConfig &c)
        : embeddings(vocab_size, c.embed_dim),
          attend_net({c.embed_dim, c.hidden_dim, c.hidden_dim}, c.dropout_attend, c.layer_norm),
          compare_net({2 * c.embed_dim, c.hidden_dim, c.hidden_dim}, c.dropout_compare, c.layer_norm),
          aggregate_net({2 * c.hidden_dim, c.hidden_dim, c.num_classes}, c.dropout_aggregate, c.layer_norm) {}

    /// Uniform embeddings in [-scale, scale], Glorot-uniform layers, and a
    /// zero output layer in the aggregate network so that the untrained model
    /// predicts the uniform distribution.
    void init(Rng &rng, double embedding_scale) {
        for (auto &v : embeddings.values()) {
            v = static_cast<T>(rng.uniform(-embedding_scale, embedding_scale));
        }
        attend_net.init_glorot(rng);
        compare_net.init_glorot(rng);
        aggregate_net.init_glorot(rng, /*zero_output=*/true);
    }

    std::size_t embed_dim() const { return embeddings.cols(); }
    std::size_t num_classes() const { return aggregate_net.output_dim(); }

    std::vector<NamedParam<T>> params() {
        std::vector<NamedParam<T>> out{{"embeddings", &embeddings}};
        for (auto &p : attend_net.params("attend")) out.push_back(p);
        for (auto &p : compare_net.params("compare")) out.push_back(p);
        for (auto &p : aggregate_net.params("aggregate")) out.push_back(p);
        return out;
    }

    DaParams zeros_like() const {
        DaParams z;
        z.embeddings = Matrix<T>(embeddings.rows(), embeddings.cols());
        z.attend_net = attend_net.zeros_like();
        z.compare_net = compare_net.zeros_like();
        z.aggregate_net = aggregate_net.zeros_like();
        return z;
    }

    template <typename U>
    DaParams<U> cast() const {
        DaParams<U> out;
        out.embeddings = embeddings.template cast<U>();
        out.attend_net = attend_net.template cast<U>();
        out.compare_net = compare_net.template cast<U>();
        out.aggregate_net = aggregate_net.template cast<U>();
        return out;
    }
};

inline constexpr double kMaskedScore = -1e9;

// ---------------------------------------------------------------------------
// Single-pair forward over the padded length, inference mode. Padded
// positions are excluded with an additive mask before each softmax and from
// the aggregate sums.

template <typename T>
struct Attention {
    Matrix<T> scores;     // L x L, unmasked dot products
    Matrix<T> weights_ab; // row i: distribution over b for a_i
    Matrix<T> weights_ba; // column j: distribution over a for b_j
};

template <typename T>
Matrix<T> gather_embeddings(const Matrix<T> &table, std::span<const std::int32_t> ids) {
    Matrix<T> out(ids.size(), table.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto id = static_cast<std::size_t>(ids[i]);
        if (id >= table.rows()) {
            throw DimensionError("token index " + std::to_string(id) + " outside embedding table");
        }
        std::copy(table.row(id).begin(), table.row(id).end(), out.row(i).begin());
    }
    return out;
}

template <typename T>
Attention<T> attend(const DaParams<T> &p, const EncodedPair &enc) {
    const std::size_t len = enc.max_len();
    if (enc.b.size() != len || enc.mask_a.size() != len || enc.mask_b.size() != len) {
        throw DimensionError("attend: encoded sides differ in length");
    }
    const auto fa = ff_forward(p.attend_net, gather_embeddings(p.embeddings, enc.a), false, nullptr).first;
    const auto fb = ff_forward(p.attend_net, gather_embeddings(p.embeddings, enc.b), false, nullptr).first;
    Attention<T> out;
    out.scores = matmul_nt(fa, fb);
    Matrix<T> masked = out.scores;
    for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < len; ++j) {
            if (!enc.mask_a[i] || !enc.mask_b[j]) {
                masked(i, j) += static_cast<T>(kMaskedScore);
            }
        }
    }
    out.weights_ab = softmax_rows(masked);
    out.weights_ba = transpose(softmax_rows(transpose(masked)));
    // Rows of padded a tokens and columns of padded b tokens carry no
    // alignment; neither does anything when the other side is empty.
    for (std::size_t i = 0; i < len; ++i) {
        for (std::size_t j = 0; j < len; ++j) {
            if (!enc.mask_a[i] || enc.len_b == 0) {
                out.weights_ab(i, j) = T(0);
            }
            if (!enc.mask_b[j] || enc.len_a == 0) {
                out.weights_ba(i, j) = T(0);
            }
        }
    }
    return out;
}

template <typename T>
struct Comparison {
    Matrix<T> v1; // L x hidden
    Matrix<T> v2;
};

template <typename T>
Comparison<T> compare(const DaParams<T> &p, const EncodedPair &enc, const Attention<T> &att) {
    const auto ea = gather_embeddings(p.embeddings, enc.a);
    const auto eb = gather_embeddings(p.embeddings, enc.b);
    const auto beta = matmul(att.weights_ab, eb);     // aligned sub-phrase of b for each a_i
    const auto alpha = matmul_tn(att.weights_ba, ea); // aligned sub-phrase of a for each b_j
    Comparison<T> out;
    out.v1 = ff_forward(p.compare_net, hconcat(ea, beta), false, nullptr).first;
    out.v2 = ff_forward(p.compare_net, hconcat(eb, alpha), false, nullptr).first;
    return out;
}

template <typename T>
std::vector<T> aggregate(const DaParams<T> &p, const Comparison<T> &cmp, const EncodedPair &enc) {
    const std::size_t h = cmp.v1.cols();
    Matrix<T> x(1, 2 * h);
    for (std::size_t i = 0; i < cmp.v1.rows(); ++i) {
        if (enc.mask_a[i]) {
            for (std::size_t c = 0; c < h; ++c) x(0, c) += cmp.v1(i, c);
        }
    }
    for (std::size_t j = 0; j < cmp.v2.rows(); ++j) {
        if (enc.mask_b[j]) {
            for (std::size_t c = 0; c < h; ++c) x(0, h + c) += cmp.v2(j, c);
        }
    }
    const auto y = ff_forward(p.aggregate_net, x, false, nullptr).first;
    return {y.values().begin(), y.values().end()};
}

template <typename T>
std::vector<T> masked_logits(const DaParams<T> &p, const EncodedPair &enc) {
    const auto att = attend(p, enc);
    return aggregate(p, compare(p, enc, att), enc);
}

// ---------------------------------------------------------------------------
// Batched forward/backward over real tokens only. Masked positions receive
// exactly zero attention weight and are excluded from the sums, so dropping
// them computes the same function as the padded path above.

namespace detail {

template <typename T>
struct PairState {
    std::size_t off_a = 0;
    std::size_t off_b = 0;
    std::size_t len_a = 0;
    std::size_t len_b = 0;
    Matrix<T> weights_ab; // len_a x len_b
    Matrix<T> weights_ba; // len_a x len_b, columns sum to 1
};

template <typename T>
struct BatchState {
    std::vector<PairState<T>> pairs;
    std::vector<std::int32_t> token_ids; // row -> embedding index
    Matrix<T> emb;                       // stacked a and b rows, per pair
    Matrix<T> attend_out;
    Matrix<T> compare_out;
    Matrix<T> logits;
    FeedForwardCache<T> attend_cache;
    FeedForwardCache<T> compare_cache;
    FeedForwardCache<T> aggregate_cache;
};

template <typename T>
Matrix<T> column_softmax(const Matrix<T> &s) {
    return transpose(softmax_rows(transpose(s)));
}

template <typename T>
BatchState<T> forward_batch(const DaParams<T> &p, std::span<const EncodedPair> batch, bool train, Rng *rng) {
    BatchState<T> st;
    for (const auto &e : batch) {
        PairState<T> ps;
        ps.len_a = e.len_a;
        ps.len_b = e.len_b;
        ps.off_a = st.token_ids.size();
        st.token_ids.insert(st.token_ids.end(), e.a.begin(), e.a.begin() + static_cast<std::ptrdiff_t>(e.len_a));
        ps.off_b = st.token_ids.size();
        st.token_ids.insert(st.token_ids.end(), e.b.begin(), e.b.begin() + static_cast<std::ptrdiff_t>(e.len_b));
        st.pairs.push_back(std::move(ps));
    }
    const std::size_t d = p.embed_dim();
    st.emb = gather_embeddings(p.embeddings, st.token_ids);
    auto [fo, fcache] = ff_forward(p.attend_net, st.emb, train, rng);
    st.attend_out = std::move(fo);
    st.attend_cache = std::move(fcache);

    Matrix<T> compare_in(st.token_ids.size(), 2 * d);
    for (auto &ps : st.pairs) {
        const auto fa = slice_rows(st.attend_out, ps.off_a, ps.len_a);
        const auto fb = slice_rows(st.attend_out, ps.off_b, ps.len_b);
        const auto ea = slice_rows(st.emb, ps.off_a, ps.len_a);
        const auto eb = slice_rows(st.emb, ps.off_b, ps.len_b);
        const auto scores = matmul_nt(fa, fb);
        ps.weights_ab = softmax_rows(scores);
        ps.weights_ba = column_softmax(scores);
        const auto beta = matmul(ps.weights_ab, eb);
        const auto alpha = matmul_tn(ps.weights_ba, ea);
        for (std::size_t i = 0; i < ps.len_a; ++i) {
            auto row = compare_in.row(ps.off_a + i);
            std::copy(ea.row(i).begin(), ea.row(i).end(), row.begin());
            std::copy(beta.row(i).begin(), beta.row(i).end(), row.begin() + static_cast<std::ptrdiff_t>(d));
        }
        for (std::size_t j = 0; j < ps.len_b; ++j) {
            auto row = compare_in.row(ps.off_b + j);
            std::copy(eb.row(j).begin(), eb.row(j).end(), row.begin());
            std::copy(alpha.row(j).begin(), alpha.row(j).end(), row.begin() + static_cast<std::ptrdiff_t>(d));
        }
    }
    auto [go, gcache] = ff_forward(p.compare_net, compare_in, train, rng);
    st.compare_out = std::move(go);
    st.compare_cache = std::move(gcache);

    const std::size_t h = st.compare_out.cols();
    Matrix<T> agg_in(batch.size(), 2 * h);
    for (std::size_t e = 0; e < st.pairs.size(); ++e) {
        const auto &ps = st.pairs[e];
        auto row = agg_in.row(e);
        for (std::size_t i = 0; i < ps.len_a; ++i) {
            const auto v = st.compare_out.row(ps.off_a + i);
            for (std::size_t c = 0; c < h; ++c) row[c] += v[c];
        }
        for (std::size_t j = 0; j < ps.len_b; ++j) {
            const auto v = st.compare_out.row(ps.off_b + j);
            for (std::size_t c = 0; c < h; ++c) row[h + c] += v[c];
        }
    }
    auto [ho, hcache] = ff_forward(p.aggregate_net, agg_in, train, rng);
    st.logits = std::move(ho);
    st.aggregate_cache = std::move(hcache);
    return st;
}

template <typename T>
void backward_batch(const DaParams<T> &p, BatchState<T> &st, const Matrix<T> &dlogits, DaParams<T> &grads) {
    const std::size_t d = p.embed_dim();
    auto [dagg, gh] = ff_backward(p.aggregate_net, st.aggregate_cache, dlogits);
    assign_in_place(grads.aggregate_net, std::move(gh));

    const std::size_t h = st.compare_out.cols();
    Matrix<T> dcompare_out(st.compare_out.rows(), h);
    for (std::size_t e = 0; e < st.pairs.size(); ++e) {
        const auto &ps = st.pairs[e];
        const auto g = dagg.row(e);
        for (std::size_t i = 0; i < ps.len_a; ++i) {
            auto r = dcompare_out.row(ps.off_a + i);
            std::copy(g.begin(), g.begin() + static_cast<std::ptrdiff_t>(h), r.begin());
        }
        for (std::size_t j = 0; j < ps.len_b; ++j) {
            auto r = dcompare_out.row(ps.off_b + j);
            std::copy(g.begin() + static_cast<std::ptrdiff_t>(h), g.end(), r.begin());
        }
    }
    auto [dcompare_in, gg] = ff_backward(p.compare_net, st.compare_cache, dcompare_out);
    assign_in_place(grads.compare_net, std::move(gg));

    Matrix<T> demb(st.emb.rows(), d);
    Matrix<T> dattend_out(st.attend_out.rows(), st.attend_out.cols());
    for (const auto &ps : st.pairs) {
        const auto ea = slice_rows(st.emb, ps.off_a, ps.len_a);
        const auto eb = slice_rows(st.emb, ps.off_b, ps.len_b);
        Matrix<T> dbeta(ps.len_a, d);
        Matrix<T> dalpha(ps.len_b, d);
        for (std::size_t i = 0; i < ps.len_a; ++i) {
            const auto g = dcompare_in.row(ps.off_a + i);
            for (std::size_t c = 0; c < d; ++c) {
                demb(ps.off_a + i, c) += g[c];
                dbeta(i, c) = g[d + c];
            }
        }
        for (std::size_t j = 0; j < ps.len_b; ++j) {
            const auto g = dcompare_in.row(ps.off_b + j);
            for (std::size_t c = 0; c < d; ++c) {
                demb(ps.off_b + j, c) += g[c];
                dalpha(j, c) = g[d + c];
            }
        }
        // beta = W_ab * E_b ; alpha = W_ba^T * E_a
        const auto dwab = matmul_nt(dbeta, eb);
        const auto deb = matmul_tn(ps.weights_ab, dbeta);
        const auto dwba = matmul_nt(ea, dalpha);
        const auto dea = matmul(ps.weights_ba, dalpha);
        for (std::size_t i = 0; i < ps.len_a; ++i) {
            for (std::size_t c = 0; c < d; ++c) demb(ps.off_a + i, c) += dea(i, c);
        }
        for (std::size_t j = 0; j < ps.len_b; ++j) {
            for (std::size_t c = 0; c < d; ++c) demb(ps.off_b + j, c) += deb(j, c);
        }
        auto dscores = softmax_rows_backward(ps.weights_ab, dwab);
        dscores += transpose(softmax_rows_backward(transpose(ps.weights_ba), transpose(dwba)));
        const auto fa = slice_rows(st.attend_out, ps.off_a, ps.len_a);
        const auto fb = slice_rows(st.attend_out, ps.off_b, ps.len_b);
        const auto dfa = matmul(dscores, fb);
        const auto dfb = matmul_tn(dscores, fa);
        for (std::size_t i = 0; i < ps.len_a; ++i) {
            std::copy(dfa.row(i).begin(), dfa.row(i).end(), dattend_out.row(ps.off_a + i).begin());
        }
        for (std::size_t j = 0; j < ps.len_b; ++j) {
            std::copy(dfb.row(j).begin(), dfb.row(j).end(), dattend_out.row(ps.off_b + j).begin());
        }
    }
    auto [dattend_in, gf] = ff_backward(p.attend_net, st.attend_cache, dattend_out);
    assign_in_place(grads.attend_net, std::move(gf));
    demb += dattend_in;

    grads.embeddings = Matrix<T>(p.embeddings.rows(), d);
    for (std::size_t r = 0; r < st.token_ids.size(); ++r) {
        auto dst = grads.embeddings.row(static_cast<std::size_t>(st.token_ids[r]));
        const auto src = demb.row(r);
        for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
}

} // namespace detail

/// Logits for a batch, inference mode. Row i belongs to batch[i].
template <typename T>
Matrix<T> batch_logits(const DaParams<T> &p, std::span<const EncodedPair> batch) {
    return detail::forward_batch(p, batch, false, nullptr).logits;
}

/// Mean cross-entropy of the batch; fills `grads` when given. In training
/// mode dropout masks are drawn from `rng`.
template <typename T>
T loss_and_grad(const DaParams<T> &p, std::span<const EncodedPair> batch, std::span<const int> labels, bool train,
                Rng *rng, DaParams<T> *grads) {
    auto st = detail::forward_batch(p, batch, train, rng);
    auto loss = softmax_xent(st.logits, labels);
    if (grads != nullptr) {
        detail::backward_batch(p, st, loss.dlogits, *grads);
    }
    return loss.loss;
}

/// (label, probability) pairs sorted by descending probability; ties go to
/// the smaller label id.
using RankedLabels = std::vector<std::pair<int, double>>;

inline RankedLabels rank_softmax(std::span<const float> logits) {
    Matrix<double> m(1, logits.size());
    for (std::size_t i = 0; i < logits.size(); ++i) {
        m[i] = logits[i];
    }
    const auto p = softmax_rows(m);
    RankedLabels out;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out.emplace_back(static_cast<int>(i), p[i]);
    }
    std::stable_sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.second > b.second; });
    return out;
}

// ---------------------------------------------------------------------------
// Model bundle, checkpoint I/O, prediction and alignment export

struct DaModel {
    DaConfig config;
    Vocab vocab;
    std::vector<std::string> labels;
    DaParams<float> params;
};

inline constexpr std::string_view kCheckpointMagic = "DANN1";
inline constexpr int kCheckpointVersion = 1;

inline void save_checkpoint(const std::filesystem::path &path, const DaModel &m) {
    BinaryModel bin;
    bin.header["format"] = "DANN1";
    bin.header["version"] = kCheckpointVersion;
    bin.header["config"] = m.config.to_json();
    bin.header["vocab_size"] = m.vocab.size();
    bin.header["vocab"] = m.vocab.words();
    bin.header["labels"] = m.labels;
    bin.header["init"] = "embeddings uniform(+-embedding_init_scale); layers glorot_uniform; aggregate output layer zero";
    bin.header["layer_norm_placement"] = m.config.layer_norm ? "after hidden affine, before relu" : "none";
    DaParams<float> copy = m.params;
    for (const auto &np : copy.params()) {
        bin.tensors.emplace_back(np.name, *np.value);
    }
    save_binary_model(path, kCheckpointMagic, bin);
}

inline DaModel load_checkpoint(const std::filesystem::path &path) {
    auto bin = load_binary_model(path, kCheckpointMagic);
    DaModel m;
    try {
        m.config = DaConfig::from_json(bin.header.at("config"));
        m.vocab = Vocab(bin.header.at("vocab").get<std::vector<std::string>>());
        m.labels = bin.header.at("labels").get<std::vector<std::string>>();
    } catch (const nlohmann::json::exception &e) {
        throw DataError(path.string() + ": malformed checkpoint header: " + e.what());
    }
    if (m.labels.size() != m.config.num_classes) {
        throw DataError(path.string() + ": label count does not match num_classes");
    }
    m.params = DaParams<float>(m.vocab.size(), m.config);
    for (auto &np : m.params.params()) {
        const auto &t = bin.tensor(np.name);
        if (!t.same_shape(*np.value)) {
            throw DataError(path.string() + ": tensor '" + np.name + "' has unexpected shape");
        }
        *np.value = t;
    }
    return m;
}

inline RankedLabels predict(const DaModel &m, const Sentence &arg1, const Sentence &arg2) {
    const auto enc = encode(arg1, arg2, m.vocab, m.config.max_len);
    const auto logits = batch_logits(m.params, std::span<const EncodedPair>(&enc, 1));
    return rank_softmax(logits.values());
}

inline std::vector<int> predict_labels(const DaModel &m, std::span<const LabeledExample> examples,
                                       std::size_t chunk = 256) {
    std::vector<int> out;
    for (std::size_t i = 0; i < examples.size(); i += chunk) {
        std::vector<EncodedPair> batch;
        for (std::size_t k = i; k < std::min(examples.size(), i + chunk); ++k) {
            batch.push_back(encode(examples[k], m.vocab, m.config.max_len));
        }
        const auto logits = batch_logits(m.params, std::span<const EncodedPair>(batch));
        for (std::size_t r = 0; r < logits.rows(); ++r) {
            const auto row = logits.row(r);
            out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
        }
    }
    return out;
}

/// Soft alignments restricted to real tokens. ab_weights is len_a x len_b
/// (each row sums to 1 over arg2); ba_weights is len_b x len_a (each row sums
/// to 1 over arg1).
struct AlignmentMatrix {
    std::vector<std::string> arg1_tokens;
    std::vector<std::string> arg2_tokens;
    Matrix<double> ab_weights;
    Matrix<double> ba_weights;
    int predicted = 0;
    RankedLabels scores;

    nlohmann::json to_json(const std::vector<std::string> &labels) const {
        auto rows = [](const Matrix<double> &m) {
            nlohmann::json out = nlohmann::json::array();
            for (std::size_t r = 0; r < m.rows(); ++r) {
                out.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
            }
            return out;
        };
        nlohmann::json j;
        j["arg1_tokens"] = arg1_tokens;
        j["arg2_tokens"] = arg2_tokens;
        j["ab_weights"] = rows(ab_weights);
        j["ba_weights"] = rows(ba_weights);
        j["predicted"] = labels.at(static_cast<std::size_t>(predicted));
        j["scores"] = nlohmann::json::object();
        for (const auto &[label, score] : scores) {
            j["scores"][labels.at(static_cast<std::size_t>(label))] = score;
        }
        return j;
    }
};

inline AlignmentMatrix explain(const DaModel &m, const Sentence &arg1, const Sentence &arg2) {
    const auto enc = encode(arg1, arg2, m.vocab, m.config.max_len);
    const auto params = m.params.cast<double>();
    const auto att = attend(params, enc);
    AlignmentMatrix out;
    out.arg1_tokens.assign(arg1.tokens.begin(), arg1.tokens.begin() + static_cast<std::ptrdiff_t>(enc.len_a));
    out.arg2_tokens.assign(arg2.tokens.begin(), arg2.tokens.begin() + static_cast<std::ptrdiff_t>(enc.len_b));
    out.ab_weights = Matrix<double>(enc.len_a, enc.len_b);
    out.ba_weights = Matrix<double>(enc.len_b, enc.len_a);
    for (std::size_t i = 0; i < enc.len_a; ++i) {
        for (std::size_t j = 0; j < enc.len_b; ++j) {
            out.ab_weights(i, j) = att.weights_ab(i, j);
            out.ba_weights(j, i) = att.weights_ba(i, j);
        }
    }
    const auto logits = aggregate(params, compare(params, enc, att), enc);
    std::vector<float> lf(logits.begin(), logits.end());
    out.scores = rank_softmax(lf);
    out.predicted = out.scores.front().first;
    return out;
}

// ---------------------------------------------------------------------------
// Pretrained embeddings

/// Text embeddings, `token v1 ... vD` per line. A leading word2vec-style
/// `count dim` line is skipped. Returns how many vocabulary entries were set.
inline std::size_t load_pretrained_embeddings(std::istream &in, const Vocab &vocab, Matrix<float> &table) {
    std::string line;
    std::size_t line_no = 0;
    std::size_t hits = 0;
    const std::size_t dim = table.cols();
    std::vector<bool> seen(vocab.size(), false);
    while (std::getline(in, line)) {
        ++line_no;
        std::istringstream fields(line);
        std::string token;
        if (!(fields >> token)) {
            continue;
        }
        std::vector<float> values;
        float v;
        while (fields >> v) {
            values.push_back(v);
        }
        if (line_no == 1 && values.size() == 1) {
            continue;
        }
        if (values.size() != dim) {
            throw DataError("embedding for '" + token + "' has " + std::to_string(values.size()) +
                                " values, expected " + std::to_string(dim),
                            line_no);
        }
        const auto id = vocab.index(token);
        if (id == Vocab::kUnk || seen[static_cast<std::size_t>(id)]) {
            continue;
        }
        seen[static_cast<std::size_t>(id)] = true;
        std::copy(values.begin(), values.end(), table.row(static_cast<std::size_t>(id)).begin());
        ++hits;
    }
    return hits;
}

// ---------------------------------------------------------------------------
// Training

struct DaTrainResult {
    DaModel final_model;
    DaModel best_model; // best dev macro-F1; equals final_model without a dev set
    std::size_t best_step = 0;
    double best_dev_macro_f1 = -1.0;
    double initial_loss = 0.0;
    std::vector<std::string> log;
};

namespace detail {

inline std::string format_line(const char *fmt, auto... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, fmt, args...);
    return buf;
}

} // namespace detail

/// Minibatch training with per-epoch seeded shuffling. The dev set, when
/// non-empty, is evaluated every eval_every steps and after the last step;
/// the best-scoring parameters are kept.
inline DaTrainResult train_da(std::span<const LabeledExample> train, std::span<const LabeledExample> dev,
                              const std::vector<std::string> &labels, const DaConfig &config,
                              std::istream *pretrained = nullptr,
                              const std::function<void(const std::string &)> &on_log = {}) {
    if (train.empty()) {
        throw Error("train_da: empty training set");
    }
    if (labels.size() != config.num_classes) {
        throw Error("train_da: num_classes does not match the label set");
    }
    if (config.batch_size == 0) {
        throw Error("train_da: batch_size must be positive");
    }
    DaTrainResult result;
    auto log = [&](std::string line) {
        if (on_log) {
            on_log(line);
        }
        result.log.push_back(std::move(line));
    };

    DaModel model;
    model.config = config;
    model.labels = labels;
    model.vocab = Vocab::build(train, config.vocab_min_freq);
    Rng init_rng(splitmix64(config.seed ^ 0x1111));
    Rng shuffle_rng(splitmix64(config.seed ^ 0x2222));
    Rng dropout_rng(splitmix64(config.seed ^ 0x3333));
    model.params = DaParams<float>(model.vocab.size(), config);
    model.params.init(init_rng, config.embedding_init_scale);
    log("config " + config.to_json().dump());
    log(detail::format_line("vocab size %zu", model.vocab.size()));
    if (pretrained != nullptr) {
        const auto hits = load_pretrained_embeddings(*pretrained, model.vocab, model.params.embeddings);
        log(detail::format_line("pretrained embeddings matched %zu of %zu vocabulary entries", hits,
                                model.vocab.size() - 2));
    }

    std::vector<EncodedPair> encoded;
    std::vector<int> gold;
    for (const auto &e : train) {
        if (e.label_id < 0 || static_cast<std::size_t>(e.label_id) >= config.num_classes) {
            throw Error("train_da: label out of range");
        }
        encoded.push_back(encode(e, model.vocab, config.max_len));
        gold.push_back(e.label_id);
    }
    std::vector<int> dev_gold;
    for (const auto &e : dev) {
        dev_gold.push_back(e.label_id);
    }

    Optimizer<float> opt(OptimizerConfig{config.optimizer, config.learning_rate});
    auto named = model.params.params();
    DaParams<float> grads = model.params.zeros_like();
    auto grad_named = grads.params();
    std::vector<const Matrix<float> *> grad_ptrs;
    for (const auto &g : grad_named) {
        grad_ptrs.push_back(g.value);
    }

    auto evaluate_dev = [&](std::size_t step) {
        if (dev.empty()) {
            return;
        }
        const auto preds = predict_labels(model, dev);
        const auto rep = evaluate(preds, dev_gold, static_cast<int>(config.num_classes));
        log(detail::format_line("eval step %zu dev_accuracy %.2f dev_macro_f1 %.2f", step, round_score(rep.accuracy),
                                round_score(rep.macro_f1)));
        if (rep.macro_f1 > result.best_dev_macro_f1) {
            result.best_dev_macro_f1 = rep.macro_f1;
            result.best_step = step;
            result.best_model = model;
        }
    };

    std::vector<std::size_t> order(encoded.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::size_t cursor = order.size();
    std::size_t epoch = 0;
    double interval_loss = 0.0;
    std::size_t interval_steps = 0;
    std::vector<EncodedPair> batch;
    std::vector<int> batch_labels;
    for (std::size_t step = 1; step <= config.max_steps; ++step) {
        if (cursor >= order.size()) {
            shuffle_rng.shuffle(order);
            cursor = 0;
            ++epoch;
        }
        batch.clear();
        batch_labels.clear();
        for (; cursor < order.size() && batch.size() < config.batch_size; ++cursor) {
            batch.push_back(encoded[order[cursor]]);
            batch_labels.push_back(gold[order[cursor]]);
        }
        const float loss = loss_and_grad(model.params, std::span<const EncodedPair>(batch),
                                         std::span<const int>(batch_labels), true, &dropout_rng, &grads);
        if (!std::isfinite(loss)) {
            throw NumericError(detail::format_line("non-finite loss at step %zu (epoch %zu)", step, epoch));
        }
        if (step == 1) {
            result.initial_loss = loss;
            log(detail::format_line("step 0 loss %.6f", static_cast<double>(loss)));
        }
        opt.step(std::span<const NamedParam<float>>(named), std::span<const Matrix<float> *const>(grad_ptrs));
        interval_loss += loss;
        ++interval_steps;
        if (config.log_every != 0 && step % config.log_every == 0) {
            log(detail::format_line("step %zu epoch %zu loss %.6f", step, epoch, interval_loss / interval_steps));
            interval_loss = 0.0;
            interval_steps = 0;
        }
        if (config.eval_every != 0 && step % config.eval_every == 0) {
            evaluate_dev(step);
        }
    }
    if (config.eval_every == 0 || config.max_steps % config.eval_every != 0) {
        evaluate_dev(config.max_steps);
    }
    if (result.best_dev_macro_f1 < 0.0) {
        result.best_model = model;
        result.best_step = config.max_steps;
    }
    log(detail::format_line("final step %zu", config.max_steps));
    if (!dev.empty()) {
        log(detail::format_line("best step %zu dev_macro_f1 %.2f", result.best_step,
                                round_score(result.best_dev_macro_f1)));
    }
    result.final_model = std::move(model);
    return result;
}

} // namespace dconn
