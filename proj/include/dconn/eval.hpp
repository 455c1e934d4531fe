#pragma once

#include "dconn/error.hpp"
#include "dconn/text.hpp"

#include <json.hpp>

#include <array>
#include <cfenv>
#include <cmath>
#include <cstddef>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace dconn {

/// K x K counts, rows = gold label, columns = predicted label. Counts are
/// real-valued so that fractional votes (one third per rater) can be pooled.
class ConfusionMatrix {
  public:
    explicit ConfusionMatrix(int num_classes = 0)
        : k_(static_cast<std::size_t>(num_classes)), counts_(k_ * k_, 0.0) {}

    int num_classes() const { return static_cast<int>(k_); }

    void add(int gold, int predicted, double weight = 1.0) {
        check(gold);
        check(predicted);
        counts_[static_cast<std::size_t>(gold) * k_ + static_cast<std::size_t>(predicted)] += weight;
    }

    double operator()(int gold, int predicted) const {
        return counts_[static_cast<std::size_t>(gold) * k_ + static_cast<std::size_t>(predicted)];
    }

    double row_sum(int gold) const {
        double s = 0.0;
        for (std::size_t p = 0; p < k_; ++p) {
            s += counts_[static_cast<std::size_t>(gold) * k_ + p];
        }
        return s;
    }

    double col_sum(int predicted) const {
        double s = 0.0;
        for (std::size_t g = 0; g < k_; ++g) {
            s += counts_[g * k_ + static_cast<std::size_t>(predicted)];
        }
        return s;
    }

    double total() const {
        double s = 0.0;
        for (double v : counts_) {
            s += v;
        }
        return s;
    }

    double trace() const {
        double s = 0.0;
        for (std::size_t i = 0; i < k_; ++i) {
            s += counts_[i * k_ + i];
        }
        return s;
    }

    /// CSV with a header row and a header column of label names.
    void write_csv(std::ostream &out, const std::vector<std::string> &labels) const {
        auto quote = [](const std::string &s) {
            if (s.find_first_of(",\"\n") == std::string::npos) {
                return s;
            }
            std::string q = "\"";
            for (char c : s) {
                q += c == '"' ? std::string("\"\"") : std::string(1, c);
            }
            return q + "\"";
        };
        out << "gold\\predicted";
        for (std::size_t p = 0; p < k_; ++p) {
            out << ',' << quote(labels.at(p));
        }
        out << '\n';
        for (std::size_t g = 0; g < k_; ++g) {
            out << quote(labels.at(g));
            for (std::size_t p = 0; p < k_; ++p) {
                out << ',' << counts_[g * k_ + p];
            }
            out << '\n';
        }
    }

  private:
    void check(int label) const {
        if (label < 0 || static_cast<std::size_t>(label) >= k_) {
            throw Error("label out of range: " + std::to_string(label));
        }
    }

    std::size_t k_;
    std::vector<double> counts_;
};

/// Rounds to two decimals, ties to even.
inline double round_score(double v) {
    const int saved = std::fegetround();
    std::fesetround(FE_TONEAREST);
    const double r = std::nearbyint(v * 100.0) / 100.0;
    std::fesetround(saved);
    return r;
}

struct ClassScores {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    double support = 0.0;
};

/// All scores on a 0-100 scale.
struct EvalReport {
    double n = 0.0;
    double accuracy = 0.0;
    double macro_f1 = 0.0;
    std::vector<ClassScores> per_class;
    ConfusionMatrix confusion;

    nlohmann::json to_json(const std::vector<std::string> &labels) const {
        nlohmann::json j;
        j["n"] = n;
        j["accuracy"] = round_score(accuracy);
        j["macro_f1"] = round_score(macro_f1);
        j["per_class"] = nlohmann::json::array();
        for (std::size_t c = 0; c < per_class.size(); ++c) {
            j["per_class"].push_back({{"label", labels.at(c)},
                                      {"precision", round_score(per_class[c].precision)},
                                      {"recall", round_score(per_class[c].recall)},
                                      {"f1", round_score(per_class[c].f1)},
                                      {"support", per_class[c].support}});
        }
        return j;
    }
};

/// Per-class F1 = 2TP / (2TP + FP + FN), which equals the harmonic mean of
/// precision and recall and is 0 when both are 0. Macro-F1 is the unweighted
/// mean over all K classes.
inline EvalReport report_from_confusion(const ConfusionMatrix &cm) {
    EvalReport r;
    r.confusion = cm;
    r.n = cm.total();
    const int k = cm.num_classes();
    r.accuracy = r.n > 0.0 ? 100.0 * cm.trace() / r.n : 0.0;
    double f1_sum = 0.0;
    for (int c = 0; c < k; ++c) {
        const double tp = cm(c, c);
        const double gold = cm.row_sum(c);
        const double pred = cm.col_sum(c);
        ClassScores s;
        s.support = gold;
        s.precision = pred > 0.0 ? 100.0 * tp / pred : 0.0;
        s.recall = gold > 0.0 ? 100.0 * tp / gold : 0.0;
        const double denom = gold + pred; // = 2TP + FP + FN
        s.f1 = denom > 0.0 ? 100.0 * 2.0 * tp / denom : 0.0;
        f1_sum += s.f1;
        r.per_class.push_back(s);
    }
    r.macro_f1 = k > 0 ? f1_sum / k : 0.0;
    return r;
}

inline EvalReport evaluate(std::span<const int> predictions, std::span<const int> gold, int num_classes) {
    if (predictions.size() != gold.size()) {
        throw Error("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                    std::to_string(gold.size()) + " gold labels");
    }
    ConfusionMatrix cm(num_classes);
    for (std::size_t i = 0; i < gold.size(); ++i) {
        cm.add(gold[i], predictions[i]);
    }
    return report_from_confusion(cm);
}

using RaterVotes = std::array<int, 3>;

/// Label chosen by at least two of the three raters.
inline std::optional<int> majority_vote(const RaterVotes &v) {
    if (v[0] == v[1] || v[0] == v[2]) {
        return v[0];
    }
    if (v[1] == v[2]) {
        return v[1];
    }
    return std::nullopt;
}

struct ConsensusStats {
    double at_least_two = 0.0; // percent of items
    double all_three = 0.0;
};

inline ConsensusStats consensus_stats(std::span<const RaterVotes> annotations) {
    ConsensusStats s;
    if (annotations.empty()) {
        return s;
    }
    std::size_t two = 0;
    std::size_t three = 0;
    for (const auto &v : annotations) {
        two += majority_vote(v).has_value() ? 1 : 0;
        three += (v[0] == v[1] && v[1] == v[2]) ? 1 : 0;
    }
    const auto n = static_cast<double>(annotations.size());
    s.at_least_two = 100.0 * static_cast<double>(two) / n;
    s.all_three = 100.0 * static_cast<double>(three) / n;
    return s;
}

struct RaterItem {
    std::string id;
    int gold = 0;
    int model = 0;
    RaterVotes raters{};
};

struct SettingResult {
    std::size_t n = 0;
    EvalReport raters;
    EvalReport model;
};

/// A: all items; rater decisions pooled with weight 1/3 each.
/// B: items with a 2-of-3 majority; raters scored by the majority label.
/// C: B minus items where gold, majority or model label is no-connective.
struct RaterAnalysis {
    SettingResult a;
    SettingResult b;
    SettingResult c;
};

inline RaterAnalysis rater_analysis(std::span<const RaterItem> items, int num_classes, int no_connective) {
    RaterAnalysis out;
    ConfusionMatrix ra(num_classes), ma(num_classes), rb(num_classes), mb(num_classes), rc(num_classes),
        mc(num_classes);
    for (const auto &it : items) {
        ++out.a.n;
        for (int r : it.raters) {
            ra.add(it.gold, r, 1.0 / 3.0);
        }
        ma.add(it.gold, it.model);
        const auto majority = majority_vote(it.raters);
        if (!majority) {
            continue;
        }
        ++out.b.n;
        rb.add(it.gold, *majority);
        mb.add(it.gold, it.model);
        if (it.gold == no_connective || *majority == no_connective || it.model == no_connective) {
            continue;
        }
        ++out.c.n;
        rc.add(it.gold, *majority);
        mc.add(it.gold, it.model);
    }
    out.a.raters = report_from_confusion(ra);
    out.a.model = report_from_confusion(ma);
    out.b.raters = report_from_confusion(rb);
    out.b.model = report_from_confusion(mb);
    out.c.raters = report_from_confusion(rc);
    out.c.model = report_from_confusion(mc);
    return out;
}

// ---------------------------------------------------------------------------
// File formats

using LabeledIds = std::vector<std::pair<std::string, int>>;

namespace detail {

inline std::vector<std::string> split_tabs(const std::string &line) {
    std::vector<std::string> fields;
    std::size_t start = 0;
    while (true) {
        const auto tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) {
            return fields;
        }
        start = tab + 1;
    }
}

template <typename Fn>
void for_each_tsv_row(std::istream &in, std::size_t expected_fields, Fn &&fn) {
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') {
            line.pop_back();
        }
        if (line.empty()) {
            continue;
        }
        auto fields = split_tabs(line);
        if (fields.size() != expected_fields) {
            throw DataError("expected " + std::to_string(expected_fields) + " tab-separated fields, got " +
                                std::to_string(fields.size()),
                            line_no);
        }
        fn(fields, line_no);
    }
}

inline int parse_label(const ConnectiveLexicon &lex, const std::string &name, std::size_t line_no) {
    const auto id = lex.label_id(name);
    if (!id) {
        throw DataError("unknown label '" + name + "'", line_no);
    }
    return *id;
}

} // namespace detail

/// `item_id<TAB>label` rows.
inline LabeledIds read_labels_tsv(std::istream &in, const ConnectiveLexicon &lex) {
    LabeledIds out;
    detail::for_each_tsv_row(in, 2, [&](const std::vector<std::string> &f, std::size_t line_no) {
        out.emplace_back(f[0], detail::parse_label(lex, f[1], line_no));
    });
    return out;
}

inline void write_labels_tsv(std::ostream &out, const LabeledIds &rows, const ConnectiveLexicon &lex) {
    for (const auto &[id, label] : rows) {
        out << id << '\t' << lex.label_name(label) << '\n';
    }
}

/// `item_id<TAB>label1<TAB>label2<TAB>label3` rows.
inline std::vector<std::pair<std::string, RaterVotes>> read_raters_tsv(std::istream &in,
                                                                       const ConnectiveLexicon &lex) {
    std::vector<std::pair<std::string, RaterVotes>> out;
    detail::for_each_tsv_row(in, 4, [&](const std::vector<std::string> &f, std::size_t line_no) {
        out.emplace_back(f[0], RaterVotes{detail::parse_label(lex, f[1], line_no),
                                          detail::parse_label(lex, f[2], line_no),
                                          detail::parse_label(lex, f[3], line_no)});
    });
    return out;
}

/// Joins gold labels, model predictions and rater votes on item id, in gold
/// order. Every gold id must appear exactly once in the other two inputs.
inline std::vector<RaterItem> align_rater_items(const LabeledIds &gold, const LabeledIds &model,
                                                const std::vector<std::pair<std::string, RaterVotes>> &raters) {
    std::map<std::string, int> model_by_id;
    for (const auto &[id, label] : model) {
        if (!model_by_id.emplace(id, label).second) {
            throw DataError("duplicate prediction for item '" + id + "'");
        }
    }
    std::map<std::string, RaterVotes> raters_by_id;
    for (const auto &[id, votes] : raters) {
        if (!raters_by_id.emplace(id, votes).second) {
            throw DataError("duplicate rater row for item '" + id + "'");
        }
    }
    if (model_by_id.size() != gold.size() || raters_by_id.size() != gold.size()) {
        throw DataError("misaligned item ids: " + std::to_string(gold.size()) + " gold, " +
                        std::to_string(model_by_id.size()) + " predictions, " +
                        std::to_string(raters_by_id.size()) + " rater rows");
    }
    std::vector<RaterItem> items;
    for (const auto &[id, label] : gold) {
        const auto m = model_by_id.find(id);
        const auto r = raters_by_id.find(id);
        if (m == model_by_id.end() || r == raters_by_id.end()) {
            throw DataError("misaligned item ids: '" + id + "' missing from predictions or rater file");
        }
        items.push_back(RaterItem{id, label, m->second, r->second});
    }
    return items;
}

} // namespace dconn
