#include "dconn.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <fstream>
#include <iostream>
#include <iterator>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

namespace {

using namespace dconn;
using nlohmann::json;

/// Semantic flag problems found after parsing; reported like parse errors.
class UsageError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

/// Reads `key = value` / INI files through CLI11 and JSON objects itself.
/// Keys at the top level apply to the selected subcommand unless they name a
/// global option; `train_da`-style underscores match `--train-da` flags.
class FlexibleConfig : public CLI::ConfigINI {
  public:
    explicit FlexibleConfig(const CLI::App *root) : root_(root) {}

    std::vector<CLI::ConfigItem> from_config(std::istream &in) const override {
        const std::string text{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
        const auto first = text.find_first_not_of(" \t\r\n");
        std::vector<CLI::ConfigItem> items;
        if (first != std::string::npos && text[first] == '{') {
            json doc;
            try {
                doc = json::parse(text);
            } catch (const json::parse_error &e) {
                throw CLI::ConversionError(std::string("config file is not valid JSON: ") + e.what());
            }
            flatten(doc, {}, items);
        } else {
            std::istringstream s(text);
            items = CLI::ConfigINI::from_config(s);
        }
        for (auto &item : items) {
            std::replace(item.name.begin(), item.name.end(), '_', '-');
            const bool global = root_->get_option_no_throw("--" + item.name) != nullptr;
            const auto active = root_->get_subcommands();
            if (item.parents.empty() && !global && !active.empty()) {
                item.parents = {active.front()->get_name()};
            }
        }
        return items;
    }

  private:
    static void flatten(const json &node, std::vector<std::string> parents, std::vector<CLI::ConfigItem> &out) {
        for (const auto &[key, value] : node.items()) {
            if (value.is_object()) {
                auto sub = parents;
                sub.push_back(key);
                flatten(value, sub, out);
                continue;
            }
            CLI::ConfigItem item;
            item.parents = parents;
            item.name = key;
            auto scalar = [](const json &v) { return v.is_string() ? v.get<std::string>() : v.dump(); };
            if (value.is_array()) {
                for (const auto &v : value) item.inputs.push_back(scalar(v));
            } else {
                item.inputs.push_back(scalar(value));
            }
            out.push_back(std::move(item));
        }
    }

    const CLI::App *root_;
};

struct GlobalOptions {
    std::uint64_t seed = 0;
    unsigned threads = 1;
    std::string lexicon;
};

ConnectiveLexicon load_lexicon(const GlobalOptions &g) {
    if (g.lexicon.empty()) {
        return ConnectiveLexicon::default_lexicon();
    }
    std::ifstream in(g.lexicon);
    if (!in) {
        throw DataError("cannot open lexicon " + g.lexicon);
    }
    return ConnectiveLexicon::parse(in);
}

/// Writes to `path`, or to stdout when the path is empty or "-".
class Output {
  public:
    explicit Output(const std::string &path) {
        if (!path.empty() && path != "-") {
            file_ = std::make_unique<std::ofstream>(path, std::ios::binary);
            if (!*file_) {
                throw DataError("cannot write " + path);
            }
        }
    }
    std::ostream &stream() { return file_ ? *file_ : std::cout; }

  private:
    std::unique_ptr<std::ofstream> file_;
};

std::ifstream open_input(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path);
    }
    return in;
}

enum class ModelKind { da, wordpairs };

ModelKind detect_model(const std::string &path) {
    auto in = open_input(path);
    std::string magic(5, '\0');
    in.read(magic.data(), 5);
    if (magic == kCheckpointMagic) {
        return ModelKind::da;
    }
    if (magic == kWordPairsMagic) {
        return ModelKind::wordpairs;
    }
    throw DataError(path + ": not a model file (unknown magic)");
}

/// A loaded model of either kind behind one prediction interface.
struct AnyModel {
    std::optional<DaModel> da;
    std::optional<WordPairsModel> wordpairs;

    static AnyModel load(const std::string &path) {
        AnyModel m;
        if (detect_model(path) == ModelKind::da) {
            m.da = load_checkpoint(path);
        } else {
            m.wordpairs = load_wordpairs(path);
        }
        return m;
    }

    const std::vector<std::string> &labels() const { return da ? da->labels : wordpairs->labels; }

    std::vector<int> predict_all(std::span<const LabeledExample> examples) const {
        return da ? predict_labels(*da, examples) : predict_labels(*wordpairs, examples);
    }

    std::vector<std::pair<int, double>> rank(const Sentence &arg1, const Sentence &arg2) const {
        return da ? predict(*da, arg1, arg2) : predict_ovr(wordpairs->ovr, wordpairs->dict.featurize(arg1, arg2));
    }
};

void check_labels(const std::vector<std::string> &model_labels, const ConnectiveLexicon &lex) {
    if (model_labels != lex.label_names()) {
        throw DataError("model label set does not match the lexicon");
    }
}

json ranked_json(const std::vector<std::pair<int, double>> &ranked, const std::vector<std::string> &labels) {
    json out = json::array();
    for (const auto &[label, score] : ranked) {
        out.push_back({labels.at(static_cast<std::size_t>(label)), score});
    }
    return out;
}

void print_warnings(const std::vector<std::string> &warnings) {
    for (const auto &w : warnings) {
        std::cerr << "warning: " << w << '\n';
    }
}

// ---------------------------------------------------------------------------
// Subcommands

struct ExtractArgs {
    std::string input;
    std::string format = "auto";
    std::string output;
    std::string stats;
};

void run_extract(const ExtractArgs &a, const GlobalOptions &g) {
    const auto lex = load_lexicon(g);
    auto in = open_input(a.input);
    std::string format = a.format;
    if (format == "auto") {
        format = std::filesystem::path(a.input).extension() == ".jsonl" ? "jsonl" : "text";
    }
    const auto read = format == "jsonl" ? read_articles_jsonl(in) : read_articles_text(in);
    print_warnings(read.warnings);
    const auto result = extract_pairs(read.articles, lex, g.threads);
    print_warnings(result.warnings);
    Output out(a.output);
    write_examples(out.stream(), result.examples, lex);
    if (!a.stats.empty()) {
        Output stats(a.stats);
        json j;
        j["articles"] = read.articles.size();
        j["examples"] = result.examples.size();
        j["skipped_articles"] = result.skipped_articles;
        j["skipped_pairs"] = result.skipped_pairs;
        const auto hist = class_histogram(result.examples, lex.size());
        j["histogram"] = json::object();
        for (int c = 0; c < lex.size(); ++c) {
            j["histogram"][lex.label_name(c)] = hist[static_cast<std::size_t>(c)];
        }
        stats.stream() << j.dump(1) << '\n';
    }
}

struct BuildDatasetArgs {
    std::string input;
    std::string output_dir;
    SplitSpec spec;
};

void run_build_dataset(BuildDatasetArgs a, const GlobalOptions &g) {
    const auto lex = load_lexicon(g);
    const auto examples = read_examples_file(a.input, lex);
    a.spec.seed = g.seed;
    const auto result = build_splits(examples, a.spec, lex);
    print_warnings(result.warnings);
    std::filesystem::create_directories(a.output_dir);
    write_dataset(a.output_dir, result.split, lex);
    std::cerr << "train " << result.split.train.size() << " dev " << result.split.dev.size() << " test "
              << result.split.test.size() << '\n';
}

struct TrainDaArgs {
    std::string dataset;
    std::string output;
    std::string log;
    std::string embeddings;
    std::string optimizer = "adam";
    bool no_layer_norm = false;
    bool dry_run = false;
    DaConfig config;
};

DaConfig resolve(TrainDaArgs &a, const GlobalOptions &g, const ConnectiveLexicon &lex) {
    DaConfig c = a.config;
    if (a.optimizer != "adam" && a.optimizer != "sgd") {
        throw UsageError("--optimizer must be adam or sgd");
    }
    c.optimizer = a.optimizer == "sgd" ? OptimizerKind::sgd : OptimizerKind::adam;
    c.layer_norm = !a.no_layer_norm;
    c.num_classes = static_cast<std::size_t>(lex.size());
    c.seed = g.seed;
    return c;
}

void run_train_da(TrainDaArgs a, const GlobalOptions &g) {
    const auto lex = load_lexicon(g);
    const DaConfig config = resolve(a, g, lex);
    if (a.dry_run) {
        std::cout << "config " << config.to_json().dump() << '\n';
        return;
    }
    if (a.dataset.empty() || a.output.empty()) {
        throw UsageError("train-da requires --dataset and --output");
    }
    const auto data = read_dataset(a.dataset, lex);
    std::unique_ptr<std::ofstream> log_file;
    if (!a.log.empty()) {
        log_file = std::make_unique<std::ofstream>(a.log);
        if (!*log_file) {
            throw DataError("cannot write " + a.log);
        }
    }
    std::ostream &log = log_file ? *log_file : std::cerr;
    std::optional<std::ifstream> emb;
    if (!a.embeddings.empty()) {
        emb = open_input(a.embeddings);
    }
    const auto result = train_da(data.train, data.dev, lex.label_names(), config, emb ? &*emb : nullptr,
                                 [&](const std::string &line) { log << line << '\n' << std::flush; });
    save_checkpoint(a.output, result.best_model);
}

struct TrainWordPairsArgs {
    std::string dataset;
    std::string output;
    WordPairsConfig config;
};

void run_train_wordpairs(TrainWordPairsArgs a, const GlobalOptions &g) {
    const auto lex = load_lexicon(g);
    a.config.seed = g.seed;
    a.config.threads = g.threads;
    std::cerr << "config " << a.config.to_json().dump() << '\n';
    const auto data = read_dataset(a.dataset, lex);
    const auto model = train_wordpairs(data.train, lex.label_names(), a.config);
    std::cerr << "features " << model.dict.size() << '\n';
    save_wordpairs(a.output, model);
}

struct PredictArgs {
    std::string model;
    std::string arg1;
    std::string arg2;
    std::string input;
    std::string output;
};

void run_predict(const PredictArgs &a, const GlobalOptions &g) {
    const bool pair = !a.arg1.empty() || !a.arg2.empty();
    if (pair == !a.input.empty()) {
        throw UsageError("predict takes either --arg1 and --arg2 or --input");
    }
    const auto model = AnyModel::load(a.model);
    Output out(a.output);
    if (pair) {
        const json j{{"arg1", a.arg1}, {"arg2", a.arg2},
                     {"ranked", ranked_json(model.rank(tokenize(a.arg1), tokenize(a.arg2)), model.labels())}};
        out.stream() << j.dump() << '\n';
        return;
    }
    const auto lex = load_lexicon(g);
    check_labels(model.labels(), lex);
    const auto examples = read_examples_file(a.input, lex);
    LabeledIds rows;
    const auto preds = model.predict_all(examples);
    for (std::size_t i = 0; i < preds.size(); ++i) {
        rows.emplace_back(std::to_string(i), preds[i]);
    }
    write_labels_tsv(out.stream(), rows, lex);
}

struct EvaluateArgs {
    std::string gold;
    std::string model;
    std::string predictions;
    std::string output;
    std::string confusion;
};

void run_evaluate(const EvaluateArgs &a, const GlobalOptions &g) {
    if (a.model.empty() == a.predictions.empty()) {
        throw UsageError("evaluate takes either --model or --predictions");
    }
    const auto lex = load_lexicon(g);
    const auto examples = read_examples_file(a.gold, lex);
    std::vector<int> gold;
    for (const auto &e : examples) {
        gold.push_back(e.label_id);
    }
    std::vector<int> preds;
    if (!a.model.empty()) {
        const auto model = AnyModel::load(a.model);
        check_labels(model.labels(), lex);
        preds = model.predict_all(examples);
    } else {
        auto in = open_input(a.predictions);
        const auto rows = read_labels_tsv(in, lex);
        if (rows.size() != gold.size()) {
            throw DataError("misaligned item ids: " + std::to_string(rows.size()) + " predictions for " +
                            std::to_string(gold.size()) + " gold rows");
        }
        for (std::size_t i = 0; i < rows.size(); ++i) {
            if (rows[i].first != std::to_string(i)) {
                throw DataError("misaligned item ids: expected '" + std::to_string(i) + "', got '" + rows[i].first +
                                "'");
            }
            preds.push_back(rows[i].second);
        }
    }
    const auto report = evaluate(preds, gold, lex.size());
    Output out(a.output);
    out.stream() << report.to_json(lex.label_names()).dump(1) << '\n';
    if (!a.confusion.empty()) {
        Output csv(a.confusion);
        report.confusion.write_csv(csv.stream(), lex.label_names());
    }
}

struct ExplainArgs {
    std::string model;
    std::string arg1;
    std::string arg2;
    std::string output;
};

void run_explain(const ExplainArgs &a) {
    if (detect_model(a.model) != ModelKind::da) {
        throw DataError(a.model + ": explain needs an attention checkpoint");
    }
    const auto model = load_checkpoint(a.model);
    const auto alignment = explain(model, tokenize(a.arg1), tokenize(a.arg2));
    Output out(a.output);
    out.stream() << alignment.to_json(model.labels).dump() << '\n';
}

struct RaterArgs {
    std::string gold;
    std::string predictions;
    std::string raters;
    std::string output;
};

void run_rater_analysis(const RaterArgs &a, const GlobalOptions &g) {
    const auto lex = load_lexicon(g);
    auto gold_in = open_input(a.gold);
    auto model_in = open_input(a.predictions);
    auto raters_in = open_input(a.raters);
    const auto gold = read_labels_tsv(gold_in, lex);
    const auto model = read_labels_tsv(model_in, lex);
    const auto raters = read_raters_tsv(raters_in, lex);
    const auto items = align_rater_items(gold, model, raters);
    const auto res = rater_analysis(items, lex.size(), lex.no_connective());
    std::vector<RaterVotes> votes;
    for (const auto &it : items) {
        votes.push_back(it.raters);
    }
    const auto consensus = consensus_stats(votes);
    const auto labels = lex.label_names();
    auto setting = [&](const SettingResult &s) {
        return json{{"n", s.n}, {"raters", s.raters.to_json(labels)}, {"model", s.model.to_json(labels)}};
    };
    const json j{{"A", setting(res.a)},
                 {"B", setting(res.b)},
                 {"C", setting(res.c)},
                 {"consensus",
                  {{"at_least_two", round_score(consensus.at_least_two)},
                   {"all_three", round_score(consensus.all_three)}}}};
    Output out(a.output);
    out.stream() << j.dump(1) << '\n';
}

std::string version_text() {
    std::ostringstream s;
    s << "dconn " << kToolVersion << '\n'
      << "lexicon format " << kLexiconFormatVersion << '\n'
      << "dataset TSV format " << kDatasetFormatVersion << '\n'
      << "checkpoint format " << kCheckpointMagic << " v" << kDaCheckpointFormatVersion << '\n'
      << "wordpairs format " << kWordPairsMagic << " v" << kWordPairsFormatVersion;
    return s.str();
}

int fail(const char *kind, const std::string &message, int code, std::size_t line = 0) {
    json j{{"error", kind}, {"message", message}};
    if (line > 0) {
        j["line"] = line;
    }
    std::cerr << j.dump() << '\n';
    return code;
}

} // namespace

int main(int argc, char **argv) {
    CLI::App app{"Discourse connective prediction toolkit", "dconn"};
    app.require_subcommand(1);
    app.fallthrough();
    app.allow_config_extras(CLI::config_extras_mode::error);
    app.set_version_flag("--version", version_text());
    app.config_formatter(std::make_shared<FlexibleConfig>(&app));
    app.set_config("--config", "", "key=value, INI or JSON file; command-line flags take precedence");

    GlobalOptions global;
    app.add_option("--seed", global.seed, "Seed for every random choice")->capture_default_str();
    app.add_option("--threads", global.threads, "Worker cap")->capture_default_str()->check(CLI::PositiveNumber);
    app.add_option("--lexicon", global.lexicon, "Lexicon TSV (default: built-in)");

    ExtractArgs extract;
    auto *cmd_extract = app.add_subcommand("extract", "Extract labeled sentence pairs from a corpus");
    cmd_extract->add_option("--input", extract.input, "Corpus (.jsonl or plain text)")->required();
    cmd_extract->add_option("--format", extract.format, "auto, jsonl or text")
        ->capture_default_str()
        ->check(CLI::IsMember({"auto", "jsonl", "text"}));
    cmd_extract->add_option("--output", extract.output, "Examples TSV (default: stdout)");
    cmd_extract->add_option("--stats", extract.stats, "Write extraction counts as JSON");

    BuildDatasetArgs build;
    auto *cmd_build = app.add_subcommand("build-dataset", "Build balanced article-disjoint splits");
    cmd_build->add_option("--input", build.input, "Examples TSV")->required();
    cmd_build->add_option("--output-dir", build.output_dir, "Directory for train/dev/test.tsv")->required();
    cmd_build->add_option("--dev-per-class", build.spec.dev_per_class)->capture_default_str();
    cmd_build->add_option("--test-per-class", build.spec.test_per_class)->capture_default_str();
    cmd_build->add_option("--train-per-class", build.spec.train_per_class)->capture_default_str();

    TrainDaArgs train_da_args;
    auto &dc = train_da_args.config;
    auto *cmd_da = app.add_subcommand("train-da", "Train the attention classifier");
    cmd_da->add_option("--dataset", train_da_args.dataset, "Dataset directory");
    cmd_da->add_option("--output", train_da_args.output, "Checkpoint path");
    cmd_da->add_option("--log", train_da_args.log, "Training log (default: stderr)");
    cmd_da->add_option("--embeddings", train_da_args.embeddings, "Pretrained text embeddings");
    cmd_da->add_flag("--dry-run", train_da_args.dry_run, "Print the resolved config and exit");
    cmd_da->add_option("--embed-dim", dc.embed_dim)->capture_default_str();
    cmd_da->add_option("--hidden-dim", dc.hidden_dim)->capture_default_str();
    cmd_da->add_option("--max-len", dc.max_len)->capture_default_str();
    cmd_da->add_option("--dropout-attend", dc.dropout_attend)->capture_default_str()->check(CLI::Range(0.0, 0.99));
    cmd_da->add_option("--dropout-compare", dc.dropout_compare)->capture_default_str()->check(CLI::Range(0.0, 0.99));
    cmd_da->add_option("--dropout-aggregate", dc.dropout_aggregate)
        ->capture_default_str()
        ->check(CLI::Range(0.0, 0.99));
    cmd_da->add_option("--learning-rate", dc.learning_rate)->capture_default_str();
    cmd_da->add_option("--optimizer", train_da_args.optimizer)->capture_default_str();
    cmd_da->add_option("--batch-size", dc.batch_size)->capture_default_str()->check(CLI::PositiveNumber);
    cmd_da->add_option("--max-steps", dc.max_steps)->capture_default_str();
    cmd_da->add_option("--eval-every", dc.eval_every)->capture_default_str();
    cmd_da->add_option("--log-every", dc.log_every)->capture_default_str();
    cmd_da->add_option("--vocab-min-freq", dc.vocab_min_freq)->capture_default_str();
    cmd_da->add_option("--embedding-init-scale", dc.embedding_init_scale)->capture_default_str();
    cmd_da->add_flag("--no-layer-norm", train_da_args.no_layer_norm);

    TrainWordPairsArgs train_wp;
    auto &wc = train_wp.config;
    auto *cmd_wp = app.add_subcommand("train-wordpairs", "Train the word-pair logistic regression baseline");
    cmd_wp->add_option("--dataset", train_wp.dataset, "Dataset directory")->required();
    cmd_wp->add_option("--output", train_wp.output, "Model path")->required();
    cmd_wp->add_option("--min-support", wc.min_support)->capture_default_str();
    cmd_wp->add_flag("--arg1-singles", wc.arg1_singles, "Add single-word features for Arg1");
    cmd_wp->add_flag("--hashed", wc.hashed, "Hash features instead of counting support");
    cmd_wp->add_option("--hash-buckets", wc.hash_buckets)->capture_default_str();
    cmd_wp->add_option("--learning-rate", wc.learning_rate)->capture_default_str();
    cmd_wp->add_option("--l2", wc.l2)->capture_default_str();
    cmd_wp->add_option("--epochs", wc.epochs)->capture_default_str();
    cmd_wp->add_option("--batch-size", wc.batch_size)->capture_default_str()->check(CLI::PositiveNumber);

    PredictArgs predict_args;
    auto *cmd_predict = app.add_subcommand("predict", "Rank labels for a pair, or label a TSV of examples");
    cmd_predict->add_option("--model", predict_args.model, "Checkpoint or word-pair model")->required();
    cmd_predict->add_option("--arg1", predict_args.arg1);
    cmd_predict->add_option("--arg2", predict_args.arg2);
    cmd_predict->add_option("--input", predict_args.input, "Examples TSV; item ids are row indices");
    cmd_predict->add_option("--output", predict_args.output, "Default: stdout");

    EvaluateArgs eval_args;
    auto *cmd_eval = app.add_subcommand("evaluate", "Score predictions against an examples TSV");
    cmd_eval->add_option("--gold", eval_args.gold, "Examples TSV")->required();
    cmd_eval->add_option("--model", eval_args.model);
    cmd_eval->add_option("--predictions", eval_args.predictions, "Predictions TSV keyed by row index");
    cmd_eval->add_option("--output", eval_args.output, "Report JSON (default: stdout)");
    cmd_eval->add_option("--confusion", eval_args.confusion, "Confusion matrix CSV");

    ExplainArgs explain_args;
    auto *cmd_explain = app.add_subcommand("explain", "Export soft alignments for a pair");
    cmd_explain->add_option("--model", explain_args.model, "Checkpoint")->required();
    cmd_explain->add_option("--arg1", explain_args.arg1)->required();
    cmd_explain->add_option("--arg2", explain_args.arg2)->required();
    cmd_explain->add_option("--output", explain_args.output, "Default: stdout");

    RaterArgs rater_args;
    auto *cmd_rater = app.add_subcommand("rater-analysis", "Compare raters and a model under settings A/B/C");
    cmd_rater->add_option("--gold", rater_args.gold, "Gold labels TSV")->required();
    cmd_rater->add_option("--predictions", rater_args.predictions, "Model labels TSV")->required();
    cmd_rater->add_option("--raters", rater_args.raters, "Rater TSV")->required();
    cmd_rater->add_option("--output", rater_args.output, "Default: stdout");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp &e) {
        return app.exit(e);
    } catch (const CLI::CallForVersion &e) {
        return app.exit(e);
    } catch (const CLI::ParseError &e) {
        return fail("usage", e.what(), 2);
    }

    try {
        if (*cmd_extract) run_extract(extract, global);
        if (*cmd_build) run_build_dataset(build, global);
        if (*cmd_da) run_train_da(train_da_args, global);
        if (*cmd_wp) run_train_wordpairs(train_wp, global);
        if (*cmd_predict) run_predict(predict_args, global);
        if (*cmd_eval) run_evaluate(eval_args, global);
        if (*cmd_explain) run_explain(explain_args);
        if (*cmd_rater) run_rater_analysis(rater_args, global);
    } catch (const UsageError &e) {
        return fail("usage", e.what(), 2);
    } catch (const DataError &e) {
        return fail("data", e.what(), 1, e.line());
    } catch (const Error &e) {
        return fail("data", e.what(), 1);
    } catch (const std::exception &e) {
        return fail("internal", e.what(), 1);
    }
    return 0;
}
