#pragma once

#include "dconn/error.hpp"
#include "dconn/rng.hpp"
#include "dconn/text.hpp"

#include <json.hpp>

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

namespace dconn {

/// One source document: paragraphs of raw sentence strings.
struct Article {
    std::string id;
    std::vector<std::vector<std::string>> paragraphs;
};

struct LabeledExample {
    Sentence arg1;
    Sentence arg2; // connective already stripped
    int label_id = 0;
    std::string article_id;

    friend bool operator==(const LabeledExample &a, const LabeledExample &b) {
        return a.arg1 == b.arg1 && a.arg2 == b.arg2 && a.label_id == b.label_id && a.article_id == b.article_id;
    }
};

struct ArticleReadResult {
    std::vector<Article> articles;
    std::vector<std::string> warnings;
};

/// JSON lines, one `{"id": str, "paragraphs": [[sentence, ...], ...]}` per
/// line. Malformed lines are skipped and reported as warnings.
inline ArticleReadResult read_articles_jsonl(std::istream &in) {
    ArticleReadResult out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) {
            continue;
        }
        auto warn = [&](const std::string &msg) {
            out.warnings.push_back("line " + std::to_string(line_no) + ": " + msg);
        };
        const auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object()) {
            warn("not a JSON object");
            continue;
        }
        if (!j.contains("id") || !j["id"].is_string() || j["id"].get<std::string>().empty()) {
            warn("missing or empty string field 'id'");
            continue;
        }
        if (!j.contains("paragraphs") || !j["paragraphs"].is_array()) {
            warn("missing array field 'paragraphs'");
            continue;
        }
        Article a;
        a.id = j["id"].get<std::string>();
        bool ok = true;
        for (const auto &p : j["paragraphs"]) {
            if (!p.is_array()) {
                ok = false;
                break;
            }
            std::vector<std::string> sentences;
            for (const auto &s : p) {
                if (!s.is_string()) {
                    ok = false;
                    break;
                }
                sentences.push_back(s.get<std::string>());
            }
            a.paragraphs.push_back(std::move(sentences));
        }
        if (!ok) {
            warn("paragraphs must be arrays of strings");
            continue;
        }
        out.articles.push_back(std::move(a));
    }
    return out;
}

/// Plain-text corpus: a line `@article <id>` starts a new article, blank lines
/// separate paragraphs, and sentences are found by split_sentences. Text
/// before the first header belongs to an article named `default_id`.
inline ArticleReadResult read_articles_text(std::istream &in, const std::string &default_id = "doc") {
    ArticleReadResult out;
    Article current{default_id, {}};
    std::string paragraph;
    auto flush_paragraph = [&] {
        if (!detail::trim(paragraph).empty()) {
            std::vector<std::string> sentences;
            for (const auto &s : split_sentences(paragraph)) {
                sentences.push_back(s.raw);
            }
            current.paragraphs.push_back(std::move(sentences));
        }
        paragraph.clear();
    };
    auto flush_article = [&] {
        flush_paragraph();
        if (!current.paragraphs.empty()) {
            out.articles.push_back(std::move(current));
        }
        current = Article{};
    };
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.rfind("@article ", 0) == 0) {
            flush_article();
            current.id = std::string(detail::trim(std::string_view(line).substr(9)));
            continue;
        }
        if (detail::trim(line).empty()) {
            flush_paragraph();
        } else {
            paragraph += line;
            paragraph += ' ';
        }
    }
    flush_article();
    return out;
}

struct ExtractResult {
    std::vector<LabeledExample> examples;
    std::size_t skipped_articles = 0;
    std::size_t skipped_pairs = 0;
    std::vector<std::string> warnings;
};

namespace detail {

inline ExtractResult extract_article(const Article &article, const ConnectiveLexicon &lex) {
    ExtractResult out;
    if (article.id.empty() || article.id.find_first_of("\t\n") != std::string::npos) {
        out.skipped_articles = 1;
        out.warnings.push_back("article with invalid id skipped");
        return out;
    }
    std::vector<std::vector<Sentence>> paragraphs;
    for (const auto &p : article.paragraphs) {
        std::vector<Sentence> sentences;
        for (const auto &raw : p) {
            if (trim(raw).empty()) {
                out.skipped_articles = 1;
                out.warnings.push_back("article '" + article.id + "' skipped: empty sentence");
                return out;
            }
            sentences.push_back(tokenize(raw));
        }
        paragraphs.push_back(std::move(sentences));
    }
    for (const auto &p : paragraphs) {
        for (std::size_t i = 0; i + 1 < p.size(); ++i) {
            LabeledExample ex;
            ex.arg1 = p[i];
            ex.article_id = article.id;
            try {
                if (auto m = match_connective(p[i + 1], lex)) {
                    ex.label_id = m->label_id;
                    ex.arg2 = std::move(m->stripped);
                } else {
                    ex.label_id = lex.no_connective();
                    ex.arg2 = p[i + 1];
                }
            } catch (const DataError &e) {
                ++out.skipped_pairs;
                out.warnings.push_back("article '" + article.id + "': pair skipped: " + e.what());
                continue;
            }
            out.examples.push_back(std::move(ex));
        }
    }
    return out;
}

} // namespace detail

/// Emits one example per adjacent sentence pair inside each paragraph.
/// Output is ordered by article id (stable for repeated ids) regardless of
/// `threads`.
inline ExtractResult extract_pairs(std::span<const Article> articles, const ConnectiveLexicon &lex,
                                   unsigned threads = 1) {
    std::vector<std::size_t> order(articles.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return articles[a].id < articles[b].id; });

    std::vector<ExtractResult> parts(order.size());
    auto work = [&](std::size_t begin, std::size_t step) {
        for (std::size_t i = begin; i < order.size(); i += step) {
            parts[i] = detail::extract_article(articles[order[i]], lex);
        }
    };
    threads = std::max(1u, threads);
    if (threads == 1 || order.size() < 2) {
        work(0, 1);
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < threads; ++t) {
            pool.emplace_back(work, t, threads);
        }
        for (auto &th : pool) {
            th.join();
        }
    }

    ExtractResult out;
    for (auto &p : parts) {
        std::move(p.examples.begin(), p.examples.end(), std::back_inserter(out.examples));
        std::move(p.warnings.begin(), p.warnings.end(), std::back_inserter(out.warnings));
        out.skipped_articles += p.skipped_articles;
        out.skipped_pairs += p.skipped_pairs;
    }
    return out;
}

inline std::vector<std::size_t> class_histogram(std::span<const LabeledExample> examples, int num_labels) {
    std::vector<std::size_t> counts(static_cast<std::size_t>(num_labels), 0);
    for (const auto &e : examples) {
        if (e.label_id < 0 || e.label_id >= num_labels) {
            throw Error("label id out of range: " + std::to_string(e.label_id));
        }
        ++counts[static_cast<std::size_t>(e.label_id)];
    }
    return counts;
}

struct SplitSpec {
    std::size_t dev_per_class = 500;
    std::size_t test_per_class = 500;
    std::size_t train_per_class = 20000;
    std::uint64_t seed = 0;
    /// A warning is reported when train_per_class / available exceeds this.
    double oversample_warn_ratio = 10.0;
};

struct DatasetSplit {
    std::vector<LabeledExample> train;
    std::vector<LabeledExample> dev;
    std::vector<LabeledExample> test;
};

struct SplitResult {
    DatasetSplit split;
    std::vector<std::string> warnings;
};

class InsufficientDataError : public DataError {
  public:
    InsufficientDataError(const std::string &what, int label_id) : DataError(what), label_id_(label_id) {}
    int label_id() const noexcept { return label_id_; }

  private:
    int label_id_;
};

/// Builds class-balanced, article-disjoint train/dev/test splits.
///
/// Articles are visited in seeded-hash order. Classes are served from the
/// one found in the fewest articles upwards: each reserves one article for
/// train, then takes articles into dev and into test until those pools hold
/// enough of its examples. Unclaimed articles go to train. Within
/// each pool, dev and test draw without replacement; train draws without
/// replacement when the pool holds enough examples and otherwise keeps every
/// example and tops up by drawing with replacement.
inline SplitResult build_splits(std::span<const LabeledExample> examples, const SplitSpec &spec,
                                const ConnectiveLexicon &lex) {
    if (spec.dev_per_class == 0 || spec.test_per_class == 0 || spec.train_per_class == 0) {
        throw Error("split counts must be positive");
    }
    const auto num_labels = static_cast<std::size_t>(lex.size());

    // Articles keyed by id, examples kept in input order.
    std::map<std::string, std::vector<std::size_t>> by_article;
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const auto &e = examples[i];
        if (e.label_id < 0 || static_cast<std::size_t>(e.label_id) >= num_labels) {
            throw Error("label id out of range: " + std::to_string(e.label_id));
        }
        by_article[e.article_id].push_back(i);
    }
    struct ArticleInfo {
        std::uint64_t key;
        const std::string *id;
        const std::vector<std::size_t> *rows;
        std::vector<std::size_t> counts;
    };
    std::vector<ArticleInfo> articles;
    for (const auto &[id, rows] : by_article) {
        ArticleInfo info{seeded_hash(id, spec.seed), &id, &rows, std::vector<std::size_t>(num_labels, 0)};
        for (auto r : rows) {
            ++info.counts[static_cast<std::size_t>(examples[r].label_id)];
        }
        articles.push_back(std::move(info));
    }
    std::sort(articles.begin(), articles.end(), [](const ArticleInfo &a, const ArticleInfo &b) {
        return a.key != b.key ? a.key < b.key : *a.id < *b.id;
    });

    enum Pool { kTrain = 0, kDev = 1, kTest = 2, kUnassigned = 3 };
    std::vector<int> pool_of(articles.size(), kUnassigned);
    std::vector<std::vector<std::size_t>> have(3, std::vector<std::size_t>(num_labels, 0));
    auto assign = [&](std::size_t a, int pool) {
        pool_of[a] = pool;
        for (std::size_t c = 0; c < num_labels; ++c) {
            have[static_cast<std::size_t>(pool)][c] += articles[a].counts[c];
        }
    };
    // Rarest classes first: each takes a train article, then dev and test
    // articles until its quotas are met, from the articles still unassigned.
    std::vector<std::size_t> class_order(num_labels);
    std::iota(class_order.begin(), class_order.end(), std::size_t{0});
    std::vector<std::size_t> article_count(num_labels, 0);
    for (const auto &a : articles) {
        for (std::size_t c = 0; c < num_labels; ++c) {
            article_count[c] += a.counts[c] > 0 ? 1 : 0;
        }
    }
    std::stable_sort(class_order.begin(), class_order.end(),
                     [&](std::size_t x, std::size_t y) { return article_count[x] < article_count[y]; });
    auto fill = [&](std::size_t c, int pool, std::size_t quota) {
        for (std::size_t a = 0; a < articles.size() && have[static_cast<std::size_t>(pool)][c] < quota; ++a) {
            if (pool_of[a] == kUnassigned && articles[a].counts[c] > 0) {
                assign(a, pool);
            }
        }
    };
    for (auto c : class_order) {
        fill(c, kTrain, 1);
        fill(c, kDev, spec.dev_per_class);
        fill(c, kTest, spec.test_per_class);
    }
    for (std::size_t a = 0; a < articles.size(); ++a) {
        if (pool_of[a] == kUnassigned) {
            assign(a, kTrain);
        }
    }

    const char *pool_names[] = {"train", "dev", "test"};
    const std::size_t quota[] = {1, spec.dev_per_class, spec.test_per_class};
    for (int p : {kDev, kTest, kTrain}) {
        for (std::size_t c = 0; c < num_labels; ++c) {
            if (have[static_cast<std::size_t>(p)][c] < quota[p]) {
                const int label = static_cast<int>(c);
                throw InsufficientDataError("insufficient data for class '" + lex.label_name(label) + "' in " +
                                                pool_names[p] + " pool: need " + std::to_string(quota[p]) +
                                                ", have " + std::to_string(have[static_cast<std::size_t>(p)][c]),
                                            label);
            }
        }
    }

    // Candidate rows per pool and class, in hash-ordered article order.
    std::vector<std::vector<std::vector<std::size_t>>> rows(3, std::vector<std::vector<std::size_t>>(num_labels));
    for (std::size_t a = 0; a < articles.size(); ++a) {
        for (auto r : *articles[a].rows) {
            rows[static_cast<std::size_t>(pool_of[a])][static_cast<std::size_t>(examples[r].label_id)].push_back(r);
        }
    }

    SplitResult out;
    Rng rng(spec.seed);
    auto sample_exact = [&](std::vector<std::size_t> cand, std::size_t n, std::vector<LabeledExample> &dst) {
        rng.shuffle(cand);
        for (std::size_t i = 0; i < n; ++i) {
            dst.push_back(examples[cand[i]]);
        }
    };
    for (std::size_t c = 0; c < num_labels; ++c) {
        sample_exact(rows[kDev][c], spec.dev_per_class, out.split.dev);
    }
    for (std::size_t c = 0; c < num_labels; ++c) {
        sample_exact(rows[kTest][c], spec.test_per_class, out.split.test);
    }
    for (std::size_t c = 0; c < num_labels; ++c) {
        const auto &cand = rows[kTrain][c];
        if (cand.size() >= spec.train_per_class) {
            sample_exact(cand, spec.train_per_class, out.split.train);
            continue;
        }
        const double ratio = static_cast<double>(spec.train_per_class) / static_cast<double>(cand.size());
        if (ratio > spec.oversample_warn_ratio) {
            std::ostringstream msg;
            msg << "class '" << lex.label_name(static_cast<int>(c)) << "' oversampled " << cand.size() << " -> "
                << spec.train_per_class << " (ratio " << ratio << ")";
            out.warnings.push_back(msg.str());
        }
        for (auto r : cand) {
            out.split.train.push_back(examples[r]);
        }
        for (std::size_t i = cand.size(); i < spec.train_per_class; ++i) {
            out.split.train.push_back(examples[cand[rng.below(cand.size())]]);
        }
    }
    rng.shuffle(out.split.train);
    rng.shuffle(out.split.dev);
    rng.shuffle(out.split.test);
    return out;
}

/// `label<TAB>arg1<TAB>arg2<TAB>article_id`, args as space-joined tokens.
inline void write_examples(std::ostream &out, std::span<const LabeledExample> examples,
                           const ConnectiveLexicon &lex) {
    for (const auto &e : examples) {
        out << lex.label_name(e.label_id) << '\t' << join(e.arg1.tokens) << '\t' << join(e.arg2.tokens) << '\t'
            << e.article_id << '\n';
    }
}

inline std::vector<LabeledExample> read_examples(std::istream &in, const ConnectiveLexicon &lex) {
    std::vector<LabeledExample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        std::vector<std::string> fields;
        std::size_t start = 0;
        while (true) {
            const auto tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
            if (tab == std::string::npos) {
                break;
            }
            start = tab + 1;
        }
        if (fields.size() != 4) {
            throw DataError("expected 4 tab-separated fields, got " + std::to_string(fields.size()), line_no);
        }
        const auto label = lex.label_id(fields[0]);
        if (!label) {
            throw DataError("unknown label '" + fields[0] + "'", line_no);
        }
        auto split_tokens = [&](const std::string &s, const char *which) {
            std::vector<std::string> toks;
            std::istringstream words(s);
            std::string w;
            while (words >> w) {
                toks.push_back(w);
            }
            if (toks.empty()) {
                throw DataError(std::string("empty ") + which, line_no);
            }
            return sentence_from_tokens(std::move(toks));
        };
        if (fields[3].empty()) {
            throw DataError("empty article_id", line_no);
        }
        out.push_back(LabeledExample{split_tokens(fields[1], "arg1"), split_tokens(fields[2], "arg2"), *label,
                                     fields[3]});
    }
    return out;
}

inline void write_examples_file(const std::filesystem::path &path, std::span<const LabeledExample> examples,
                                const ConnectiveLexicon &lex) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot open for writing: " + path.string());
    }
    write_examples(out, examples, lex);
    if (!out) {
        throw Error("write failed: " + path.string());
    }
}

inline std::vector<LabeledExample> read_examples_file(const std::filesystem::path &path,
                                                      const ConnectiveLexicon &lex) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open: " + path.string());
    }
    try {
        return read_examples(in, lex);
    } catch (const DataError &e) {
        throw e.with_context(path.string());
    }
}

/// Writes train.tsv, dev.tsv and test.tsv into `dir`.
inline void write_dataset(const std::filesystem::path &dir, const DatasetSplit &split, const ConnectiveLexicon &lex) {
    std::filesystem::create_directories(dir);
    write_examples_file(dir / "train.tsv", split.train, lex);
    write_examples_file(dir / "dev.tsv", split.dev, lex);
    write_examples_file(dir / "test.tsv", split.test, lex);
}

inline DatasetSplit read_dataset(const std::filesystem::path &dir, const ConnectiveLexicon &lex) {
    return DatasetSplit{read_examples_file(dir / "train.tsv", lex), read_examples_file(dir / "dev.tsv", lex),
                        read_examples_file(dir / "test.tsv", lex)};
}

} // namespace dconn
