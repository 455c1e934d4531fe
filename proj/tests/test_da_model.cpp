#include "dconn/da_model.hpp"
#include "support/fixtures.hpp"
#include "support/synthetic.hpp"

#include <gtest/gtest.h>
#include <json.hpp>

#include <cmath>

using namespace dconn;

namespace {

DaConfig tiny_config(std::size_t num_classes = 3) {
    DaConfig c;
    c.embed_dim = 8;
    c.hidden_dim = 6;
    c.max_len = 5;
    c.num_classes = num_classes;
    return c;
}

DaParams<double> random_params(std::size_t vocab_size, const DaConfig &c, std::uint64_t seed) {
    DaParams<double> p(vocab_size, c);
    Rng rng(seed);
    p.init(rng, 0.5);
    // A nonzero output layer and perturbed normalization parameters, so that
    // every parameter influences the loss.
    for (auto &w : p.aggregate_net.weights.back().values()) w = rng.uniform(-0.5, 0.5);
    for (auto *net : {&p.attend_net, &p.compare_net, &p.aggregate_net}) {
        for (auto &g : net->ln_gain) for (auto &v : g.values()) v = rng.uniform(0.7, 1.3);
        for (auto &s : net->ln_shift) for (auto &v : s.values()) v = rng.uniform(-0.3, 0.3);
        for (auto &b : net->biases) for (auto &v : b.values()) v = rng.uniform(-0.3, 0.3);
    }
    return p;
}

Sentence words(std::string_view s) { return tokenize(s); }

EncodedPair encode_ids(std::vector<std::int32_t> a, std::vector<std::int32_t> b, std::size_t len) {
    EncodedPair e;
    e.len_a = a.size();
    e.len_b = b.size();
    e.a = a;
    e.b = b;
    e.a.resize(len, Vocab::kNull);
    e.b.resize(len, Vocab::kNull);
    e.mask_a.assign(len, 0);
    e.mask_b.assign(len, 0);
    std::fill_n(e.mask_a.begin(), a.size(), 1);
    std::fill_n(e.mask_b.begin(), b.size(), 1);
    return e;
}

std::vector<double> batch_row(const DaParams<double> &p, const EncodedPair &e) {
    const auto m = batch_logits(p, std::span<const EncodedPair>(&e, 1));
    return {m.values().begin(), m.values().end()};
}

void expect_vectors_near(const std::vector<double> &a, const std::vector<double> &b, double tol) {
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_NEAR(a[i], b[i], tol) << "index " << i;
}

const Vocab &letters_vocab() {
    static const Vocab v({"a", "b", "c", "d", "e", "f", "g", "h"});
    return v;
}

} // namespace

TEST(Vocab, BuildKeepsFrequentLowercasedTokensSorted) {
    std::vector<LabeledExample> ex(2);
    ex[0].arg1 = words("The cat sat .");
    ex[0].arg2 = words("A dog .");
    ex[1].arg1 = words("the Dog ran");
    ex[1].arg2 = words("THE end");
    const auto v = Vocab::build(ex, 2);
    EXPECT_EQ(v.words(), (std::vector<std::string>{".", "dog", "the"}));
    EXPECT_EQ(v.tokens()[Vocab::kNull], "<null>");
    EXPECT_EQ(v.index("<null>"), Vocab::kUnk); // text never maps to padding
    EXPECT_EQ(v.index("cat"), Vocab::kUnk);
    EXPECT_EQ(v.index("DOG"), 3);
}

TEST(Encode, ShortSentenceIsRightPadded) {
    const auto e = encode(words("b a c"), words("d"), letters_vocab(), 50);
    EXPECT_EQ(e.len_a, 3u);
    EXPECT_EQ(e.a.size(), 50u);
    EXPECT_EQ((std::vector<std::int32_t>(e.a.begin(), e.a.begin() + 4)), (std::vector<std::int32_t>{3, 2, 4, 0}));
    EXPECT_EQ(std::count(e.mask_a.begin(), e.mask_a.end(), 1), 3);
    EXPECT_EQ(e.mask_b[0], 1);
    EXPECT_EQ(e.mask_b[1], 0);
}

TEST(Encode, LongSentenceIsTruncated) {
    std::vector<std::string> toks(60, "a");
    const auto e = encode(sentence_from_tokens(toks), words("b"), letters_vocab(), 50);
    EXPECT_EQ(e.len_a, 50u);
    EXPECT_EQ(std::count(e.mask_a.begin(), e.mask_a.end(), 1), 50);
}

TEST(Encode, UnknownWordsMapToUnk) {
    const auto e = encode(words("a zebra"), words("H"), letters_vocab(), 4);
    EXPECT_EQ(e.a, (std::vector<std::int32_t>{2, Vocab::kUnk, 0, 0}));
    EXPECT_EQ(e.b, (std::vector<std::int32_t>{9, 0, 0, 0}));
}

TEST(Attend, RowsAreDistributionsOverRealTokens) {
    const auto c = tiny_config();
    const auto p = random_params(10, c, 1);
    const auto e = encode_ids({2, 3, 4}, {5, 6}, 5);
    const auto att = attend(p, e);
    for (std::size_t i = 0; i < 5; ++i) {
        double ab = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
            EXPECT_GE(att.weights_ab(i, j), 0.0);
            ab += att.weights_ab(i, j);
            if (j >= 2) {
                EXPECT_EQ(att.weights_ab(i, j), 0.0);
            }
        }
        EXPECT_NEAR(ab, i < 3 ? 1.0 : 0.0, 1e-12);
    }
    for (std::size_t j = 0; j < 5; ++j) {
        double ba = 0.0;
        for (std::size_t i = 0; i < 5; ++i) ba += att.weights_ba(i, j);
        EXPECT_NEAR(ba, j < 2 ? 1.0 : 0.0, 1e-12);
    }
}

TEST(Attend, SwappingArgumentsTransposesScores) {
    const auto p = random_params(10, tiny_config(), 2);
    const auto ab = attend(p, encode_ids({2, 3, 4}, {5, 6, 7, 8}, 5));
    const auto ba = attend(p, encode_ids({5, 6, 7, 8}, {2, 3, 4}, 5));
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 4; ++j) {
            EXPECT_NEAR(ab.scores(i, j), ba.scores(j, i), 1e-12);
            EXPECT_NEAR(ab.weights_ab(i, j), ba.weights_ba(j, i), 1e-12);
        }
}

TEST(Attend, SingleTokenSideReceivesAllWeight) {
    const auto p = random_params(10, tiny_config(), 3);
    const auto att = attend(p, encode_ids({2, 3, 4}, {7}, 5));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(att.weights_ab(i, 0), 1.0, 1e-12);
}

TEST(Compare, OneHotAlignmentCopiesTheAlignedEmbedding) {
    const auto c = tiny_config();
    const auto p = random_params(10, c, 4);
    const auto e = encode_ids({2, 3}, {7}, 5);
    const auto att = attend(p, e);
    const auto cmp = compare(p, e, att);
    // Row i of compare input is [emb(a_i), emb(b_0)].
    Matrix<double> in(1, 2 * c.embed_dim);
    for (std::size_t k = 0; k < c.embed_dim; ++k) {
        in(0, k) = p.embeddings(3, k);
        in(0, c.embed_dim + k) = p.embeddings(7, k);
    }
    const auto expected = ff_forward(p.compare_net, in, false, nullptr).first;
    for (std::size_t k = 0; k < c.hidden_dim; ++k) EXPECT_NEAR(cmp.v1(1, k), expected(0, k), 1e-12);
}

TEST(Compare, UniformAttentionAveragesTheOtherSentence) {
    const auto c = tiny_config();
    auto p = random_params(10, c, 5);
    for (auto &w : p.attend_net.weights.back().values()) w = 0.0;
    for (auto &b : p.attend_net.biases.back().values()) b = 0.0; // F == 0: all scores equal
    const auto e = encode_ids({2}, {5, 6, 7}, 5);
    const auto att = attend(p, e);
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(att.weights_ab(0, j), 1.0 / 3.0, 1e-12);
    const auto cmp = compare(p, e, att);
    Matrix<double> in(1, 2 * c.embed_dim);
    for (std::size_t k = 0; k < c.embed_dim; ++k) {
        in(0, k) = p.embeddings(2, k);
        in(0, c.embed_dim + k) = (p.embeddings(5, k) + p.embeddings(6, k) + p.embeddings(7, k)) / 3.0;
    }
    const auto expected = ff_forward(p.compare_net, in, false, nullptr).first;
    for (std::size_t k = 0; k < c.hidden_dim; ++k) EXPECT_NEAR(cmp.v1(0, k), expected(0, k), 1e-12);
}

TEST(Aggregate, AllMaskedInputGivesOutputAtZero) {
    const auto c = tiny_config();
    const auto p = random_params(10, c, 6);
    const auto e = encode_ids({}, {}, 5);
    const auto logits = masked_logits(p, e);
    const auto h0 = ff_forward(p.aggregate_net, Matrix<double>(1, 2 * c.hidden_dim), false, nullptr).first;
    expect_vectors_near(logits, std::vector<double>(h0.values().begin(), h0.values().end()), 1e-12);
}

TEST(DaModelProperty, LogitsInvariantUnderTokenPermutation) {
    const auto p = random_params(12, tiny_config(), 7);
    Rng rng(8);
    for (int t = 0; t < 50; ++t) {
        std::vector<std::int32_t> a, b;
        for (std::size_t i = 0, n = 1 + rng.below(5); i < n; ++i) a.push_back(static_cast<std::int32_t>(rng.below(12)));
        for (std::size_t i = 0, n = 1 + rng.below(5); i < n; ++i) b.push_back(static_cast<std::int32_t>(rng.below(12)));
        const auto base = batch_row(p, encode_ids(a, b, 5));
        auto a2 = a, b2 = b;
        rng.shuffle(a2);
        rng.shuffle(b2);
        expect_vectors_near(batch_row(p, encode_ids(a2, b2, 5)), base, 1e-12);
        expect_vectors_near(masked_logits(p, encode_ids(a2, b2, 5)), base, 1e-12);
    }
}

TEST(DaModelProperty, BatchedPathEqualsMaskedPaddedPath) {
    const auto p = random_params(12, tiny_config(), 9);
    Rng rng(10);
    std::vector<EncodedPair> batch;
    for (int t = 0; t < 20; ++t) {
        std::vector<std::int32_t> a, b;
        for (std::size_t i = 0, n = 1 + rng.below(5); i < n; ++i) a.push_back(static_cast<std::int32_t>(rng.below(12)));
        for (std::size_t i = 0, n = 1 + rng.below(5); i < n; ++i) b.push_back(static_cast<std::int32_t>(rng.below(12)));
        batch.push_back(encode_ids(a, b, 5));
    }
    const auto logits = batch_logits(p, std::span<const EncodedPair>(batch));
    for (std::size_t r = 0; r < batch.size(); ++r) {
        expect_vectors_near(std::vector<double>(logits.row(r).begin(), logits.row(r).end()),
                            masked_logits(p, batch[r]), 1e-9);
    }
}

TEST(DaModelProperty, LogitsInvariantUnderExtraPadding) {
    const auto p = random_params(12, tiny_config(), 11);
    const auto short_pad = encode_ids({2, 3}, {4, 5, 6}, 5);
    const auto long_pad = encode_ids({2, 3}, {4, 5, 6}, 40);
    expect_vectors_near(masked_logits(p, long_pad), masked_logits(p, short_pad), 1e-9);
    expect_vectors_near(batch_row(p, long_pad), batch_row(p, short_pad), 1e-12);
}

TEST(DaGradient, EndToEndMatchesFiniteDifferences) {
    // L=5, d=8, hidden=6, K=3, dropout on every network with frozen masks.
    auto c = tiny_config(3);
    auto p = random_params(9, c, 12);
    const std::vector<EncodedPair> batch = {encode_ids({2, 3, 4, 5, 6}, {7, 8, 2}, 5),
                                            encode_ids({3}, {4, 4, 5, 6, 1}, 5),
                                            encode_ids({8, 7}, {6, 5}, 5)};
    const std::vector<int> labels = {0, 2, 1};
    const std::uint64_t mask_seed = 77;
    auto loss = [&] {
        Rng masks(mask_seed);
        return loss_and_grad(p, std::span<const EncodedPair>(batch), std::span<const int>(labels), true, &masks,
                             static_cast<DaParams<double> *>(nullptr));
    };
    auto grads = p.zeros_like();
    Rng masks(mask_seed);
    loss_and_grad(p, std::span<const EncodedPair>(batch), std::span<const int>(labels), true, &masks, &grads);
    const auto named = p.params();
    std::vector<Matrix<double>> analytic;
    for (const auto &g : grads.params()) analytic.push_back(*g.value);
    const auto report = grad_check(loss, named, analytic, 1e-4, 1e-5);
    for (const auto &e : report.entries) EXPECT_LT(e.max_rel_error, 1e-4) << e.name;
    EXPECT_EQ(report.entries.size(), named.size());
}

TEST(DaGradient, GradientContainerKeepsAddressesAcrossSteps) {
    const auto c = tiny_config(3);
    auto p = random_params(9, c, 13);
    auto grads = p.zeros_like();
    const auto before = grads.params();
    const std::vector<EncodedPair> batch = {encode_ids({2, 3}, {4}, 5)};
    const std::vector<int> labels = {1};
    loss_and_grad(p, std::span<const EncodedPair>(batch), std::span<const int>(labels), false, nullptr, &grads);
    const auto after = grads.params();
    ASSERT_EQ(before.size(), after.size());
    for (std::size_t i = 0; i < before.size(); ++i) EXPECT_EQ(before[i].value, after[i].value) << before[i].name;
}

namespace {

DaConfig synthetic_config(std::size_t steps) {
    DaConfig c;
    c.embed_dim = 16;
    c.hidden_dim = 24;
    c.batch_size = 16;
    c.max_steps = steps;
    c.eval_every = 50;
    c.log_every = 25;
    c.vocab_min_freq = 1;
    c.seed = 5;
    return c;
}

} // namespace

TEST(TrainDa, InitialLossIsLogOfClassCount) {
    const auto d = support::planted_keyword_data(60, 20);
    const auto r = train_da(d.train, {}, d.labels, synthetic_config(1));
    EXPECT_NEAR(r.initial_loss, std::log(20.0), 1e-5);
}

TEST(TrainDa, SameSeedGivesIdenticalLogAndParameters) {
    const auto d = support::planted_keyword_data(60, 20);
    const auto a = train_da(d.train, d.test, d.labels, synthetic_config(60));
    const auto b = train_da(d.train, d.test, d.labels, synthetic_config(60));
    EXPECT_EQ(a.log, b.log);
    auto pa = a.final_model.params, pb = b.final_model.params;
    const auto na = pa.params(), nb = pb.params();
    for (std::size_t i = 0; i < na.size(); ++i) EXPECT_EQ(*na[i].value, *nb[i].value) << na[i].name;
    auto other = synthetic_config(60);
    other.seed = 6;
    EXPECT_NE(train_da(d.train, d.test, d.labels, other).log, a.log);
}

TEST(TrainDa, LogStartsWithResolvedConfigAndReportsBestStep) {
    const auto d = support::planted_keyword_data(60, 20);
    const auto r = train_da(d.train, d.test, d.labels, synthetic_config(100));
    ASSERT_FALSE(r.log.empty());
    EXPECT_EQ(r.log.front(), "config " + synthetic_config(100).to_json().dump());
    EXPECT_EQ(r.log.back().rfind("best step ", 0), 0u);
    EXPECT_GE(r.best_dev_macro_f1, 0.0);
}

TEST(TrainDa, LearnsPlantedKeywordPairs) {
    // A small filler vocabulary keeps this fast; acceptance runs the full one.
    const auto d = support::planted_keyword_data(200, 100, 7, 40);
    const auto r = train_da(d.train, {}, d.labels, synthetic_config(600));
    const auto preds = predict_labels(r.final_model, d.test);
    std::vector<int> gold;
    for (const auto &e : d.test) gold.push_back(e.label_id);
    EXPECT_GE(evaluate(preds, gold, 20).accuracy, 90.0);
}

TEST(TrainDa, RejectsInconsistentInputs) {
    const auto d = support::planted_keyword_data(20, 20);
    auto labels = d.labels;
    labels.pop_back();
    EXPECT_THROW(train_da(d.train, {}, labels, synthetic_config(1)), Error);
    EXPECT_THROW(train_da({}, {}, d.labels, synthetic_config(1)), Error);
}

TEST(Checkpoint, SaveLoadRoundTripPreservesPredictions) {
    const auto d = support::planted_keyword_data(60, 20);
    const auto r = train_da(d.train, {}, d.labels, synthetic_config(40));
    support::TempDir dir("ckpt");
    save_checkpoint(dir / "m.dann", r.final_model);
    const auto back = load_checkpoint(dir / "m.dann");
    EXPECT_EQ(back.labels, r.final_model.labels);
    EXPECT_EQ(back.vocab.tokens(), r.final_model.vocab.tokens());
    EXPECT_EQ(back.config.to_json(), r.final_model.config.to_json());
    auto pa = back.params;
    auto pb = r.final_model.params;
    const auto na = pa.params(), nb = pb.params();
    for (std::size_t i = 0; i < na.size(); ++i) EXPECT_EQ(*na[i].value, *nb[i].value) << na[i].name;
    EXPECT_EQ(predict_labels(back, d.test), predict_labels(r.final_model, d.test));
}

TEST(Checkpoint, HeaderDocumentsInitAndLayerNormPlacement) {
    const auto d = support::planted_keyword_data(20, 20);
    const auto r = train_da(d.train, {}, d.labels, synthetic_config(1));
    support::TempDir dir("ckpt_hdr");
    save_checkpoint(dir / "m.dann", r.final_model);
    const auto bin = load_binary_model(dir / "m.dann", kCheckpointMagic);
    EXPECT_EQ(bin.header.at("format"), "DANN1");
    EXPECT_TRUE(bin.header.contains("init"));
    EXPECT_TRUE(bin.header.contains("layer_norm_placement"));
    EXPECT_EQ(bin.tensors.front().first, "embeddings");
}

TEST(Checkpoint, WrongMagicOrTruncationIsDataError) {
    support::TempDir dir("ckpt_bad");
    {
        std::ofstream out(dir / "bad.dann", std::ios::binary);
        out << "WPOVR....";
    }
    EXPECT_THROW(load_checkpoint(dir / "bad.dann"), DataError);
    const auto good = support::read_file(support::fixture_path("synthetic_da.dann"));
    {
        std::ofstream out(dir / "short.dann", std::ios::binary);
        out << good.substr(0, good.size() - 10);
    }
    EXPECT_THROW(load_checkpoint(dir / "short.dann"), DataError);
}

TEST(Predict, FrozenCheckpointGivesFrozenRanking) {
    const auto model = load_checkpoint(support::fixture_path("synthetic_da.dann"));
    const auto golden = nlohmann::json::parse(support::read_file(support::fixture_path("synthetic_da_predict.json")));
    for (const auto &q : golden) {
        const auto ranked = predict(model, words(q.at("arg1").get<std::string>()), words(q.at("arg2").get<std::string>()));
        const auto &expected = q.at("ranked");
        ASSERT_EQ(ranked.size(), expected.size());
        for (std::size_t i = 0; i < ranked.size(); ++i) {
            EXPECT_EQ(model.labels[static_cast<std::size_t>(ranked[i].first)], expected[i].at(0).get<std::string>());
            EXPECT_NEAR(ranked[i].second, expected[i].at(1).get<double>(), 1e-6);
        }
    }
}

TEST(Explain, AlignmentsAreRowStochasticAndNonNegative) {
    const auto model = load_checkpoint(support::fixture_path("synthetic_da.dann"));
    const auto a = explain(model, words("w1 alpha w2 w3 ."), words("north w4 ."));
    ASSERT_EQ(a.ab_weights.rows(), 5u);
    ASSERT_EQ(a.ab_weights.cols(), 3u);
    ASSERT_EQ(a.ba_weights.rows(), 3u);
    for (const auto *m : {&a.ab_weights, &a.ba_weights}) {
        for (std::size_t r = 0; r < m->rows(); ++r) {
            double s = 0.0;
            for (double v : m->row(r)) {
                EXPECT_GE(v, 0.0);
                s += v;
            }
            EXPECT_NEAR(s, 1.0, 1e-6);
        }
    }
    EXPECT_EQ(a.predicted, predict(model, words("w1 alpha w2 w3 ."), words("north w4 .")).front().first);
    const auto j = a.to_json(model.labels);
    EXPECT_EQ(j.at("arg1_tokens").size(), 5u);
    EXPECT_EQ(j.at("scores").size(), 20u);
}

TEST(Explain, CopyTaskLearnsDiagonalAlignment) {
    // Label 1: arg2 repeats arg1 in shuffled order; label 0: unrelated words.
    Rng rng(21);
    std::vector<std::string> vocab;
    for (int i = 0; i < 30; ++i) vocab.push_back("t" + std::to_string(i));
    std::vector<LabeledExample> train;
    for (int n = 0; n < 300; ++n) {
        std::vector<std::string> pool = vocab;
        rng.shuffle(pool);
        std::vector<std::string> a(pool.begin(), pool.begin() + 5);
        std::vector<std::string> b;
        const int label = n % 2;
        if (label == 1) {
            b = a;
            rng.shuffle(b);
        } else {
            b.assign(pool.begin() + 5, pool.begin() + 10);
        }
        train.push_back({sentence_from_tokens(a), sentence_from_tokens(b), label, "copy" + std::to_string(n)});
    }
    DaConfig c;
    c.embed_dim = 16;
    c.hidden_dim = 16;
    c.num_classes = 2;
    c.batch_size = 16;
    c.max_steps = 400;
    c.vocab_min_freq = 1;
    c.dropout_attend = c.dropout_compare = c.dropout_aggregate = 0.0;
    const auto r = train_da(train, {}, {"different", "same"}, c);
    std::size_t diagonal = 0, rows = 0;
    for (int n = 0; n < 20; ++n) {
        std::vector<std::string> pool = vocab;
        rng.shuffle(pool);
        const auto s = sentence_from_tokens(std::vector<std::string>(pool.begin(), pool.begin() + 6));
        const auto al = explain(r.final_model, s, s);
        for (std::size_t i = 0; i < al.ab_weights.rows(); ++i, ++rows) {
            const auto row = al.ab_weights.row(i);
            diagonal += static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()) == i ? 1 : 0;
        }
    }
    EXPECT_GE(static_cast<double>(diagonal) / static_cast<double>(rows), 0.9);
}

TEST(PretrainedEmbeddings, CopiesMatchingRowsAndSkipsHeader) {
    const Vocab v({"a", "b"});
    Matrix<float> table(v.size(), 3);
    std::istringstream in("2 3\nb 1 2 3\nzzz 4 5 6\nA 7 8 9\n");
    EXPECT_EQ(load_pretrained_embeddings(in, v, table), 2u);
    EXPECT_EQ(table(3, 1), 2.0f);
    EXPECT_EQ(table(2, 2), 9.0f);
    std::istringstream bad("a 1 2\n");
    EXPECT_THROW(load_pretrained_embeddings(bad, v, table), DataError);
}

TEST(DaConfig, DefaultsAreTheFullScaleConfiguration) {
    const DaConfig c;
    EXPECT_EQ(c.batch_size, 64u);
    EXPECT_EQ(c.max_steps, 300000u);
    EXPECT_DOUBLE_EQ(c.learning_rate, 0.0018);
    EXPECT_DOUBLE_EQ(c.dropout_attend, 0.68);
    EXPECT_DOUBLE_EQ(c.dropout_compare, 0.14);
    EXPECT_DOUBLE_EQ(c.dropout_aggregate, 0.44);
    EXPECT_EQ(c.hidden_dim, 200u);
    EXPECT_EQ(c.embed_dim, 100u);
    EXPECT_EQ(c.max_len, 50u);
    EXPECT_EQ(DaConfig::from_json(c.to_json()).to_json(), c.to_json());
}
