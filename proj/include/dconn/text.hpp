#pragma once

#include "dconn/error.hpp"

#include <algorithm>
#include <cctype>
#include <cstddef>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dconn {

struct Sentence {
    std::vector<std::string> tokens;
    std::string raw;

    friend bool operator==(const Sentence &a, const Sentence &b) { return a.tokens == b.tokens; }
};

namespace detail {

inline bool is_space(char c) { return std::isspace(static_cast<unsigned char>(c)) != 0; }

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && is_space(s.front())) {
        s.remove_prefix(1);
    }
    while (!s.empty() && is_space(s.back())) {
        s.remove_suffix(1);
    }
    return s;
}

} // namespace detail

/// Characters split off the edges of whitespace-delimited chunks.
inline bool is_detached_punct(char c) {
    switch (c) {
    case ',': case '.': case ';': case ':': case '!': case '?':
    case '"': case '(': case ')': case '[': case ']': case '{': case '}':
        return true;
    default:
        return false;
    }
}

inline std::string to_lower(std::string_view s) {
    std::string out(s);
    for (char &c : out) {
        c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

inline std::string join(const std::vector<std::string> &tokens, std::string_view sep = " ") {
    std::string out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (i != 0) {
            out += sep;
        }
        out += tokens[i];
    }
    return out;
}

/// Splits on whitespace, then detaches punctuation from both ends of every
/// chunk, one character per token. Punctuation inside a chunk ("on-time",
/// "1,000", "U.S") stays put. Casing is preserved.
inline Sentence tokenize(std::string_view text) {
    const std::string_view trimmed = detail::trim(text);
    if (trimmed.empty()) {
        throw DataError("cannot tokenize empty text");
    }
    Sentence s;
    s.raw = std::string(trimmed);
    std::size_t i = 0;
    while (i < trimmed.size()) {
        while (i < trimmed.size() && detail::is_space(trimmed[i])) {
            ++i;
        }
        std::size_t j = i;
        while (j < trimmed.size() && !detail::is_space(trimmed[j])) {
            ++j;
        }
        std::string_view chunk = trimmed.substr(i, j - i);
        i = j;
        if (chunk.empty()) {
            continue;
        }
        std::size_t lead = 0;
        while (lead < chunk.size() && is_detached_punct(chunk[lead])) {
            s.tokens.emplace_back(1, chunk[lead]);
            ++lead;
        }
        if (lead == chunk.size()) {
            continue;
        }
        std::size_t end = chunk.size();
        while (end > lead && is_detached_punct(chunk[end - 1])) {
            --end;
        }
        s.tokens.emplace_back(chunk.substr(lead, end - lead));
        for (std::size_t k = end; k < chunk.size(); ++k) {
            s.tokens.emplace_back(1, chunk[k]);
        }
    }
    return s;
}

/// Builds a sentence from already tokenized text; raw is the space-joined tokens.
inline Sentence sentence_from_tokens(std::vector<std::string> tokens) {
    Sentence s;
    s.raw = join(tokens);
    s.tokens = std::move(tokens);
    return s;
}

/// Rule-based sentence splitter for plain paragraphs: a sentence ends after a
/// ".", "!" or "?" token, plus any closing brackets that follow it and a
/// '"' that closes a quote opened in the same sentence.
inline std::vector<Sentence> split_sentences(std::string_view paragraph) {
    std::vector<Sentence> out;
    if (detail::trim(paragraph).empty()) {
        return out;
    }
    const Sentence all = tokenize(paragraph);
    std::vector<std::string> current;
    auto is_terminal = [](const std::string &t) { return t == "." || t == "!" || t == "?"; };
    bool open_quote = false; // a '"' in the current sentence is unmatched
    auto is_closer = [&](const std::string &t) {
        return (t == "\"" && open_quote) || t == ")" || t == "]" || t == "}";
    };
    for (std::size_t i = 0; i < all.tokens.size(); ++i) {
        current.push_back(all.tokens[i]);
        if (all.tokens[i] == "\"") {
            open_quote = !open_quote;
        }
        if (is_terminal(all.tokens[i])) {
            while (i + 1 < all.tokens.size() && is_closer(all.tokens[i + 1])) {
                if (all.tokens[++i] == "\"") {
                    open_quote = false;
                }
                current.push_back(all.tokens[i]);
            }
            open_quote = false;
            out.push_back(sentence_from_tokens(std::move(current)));
            current.clear();
        }
    }
    if (!current.empty()) {
        out.push_back(sentence_from_tokens(std::move(current)));
    }
    return out;
}

struct ConnectiveEntry {
    int label_id = 0;
    std::vector<std::string> surface; // lowercase tokens
    bool comma_required = false;

    std::string name() const { return join(surface); }
};

/// The label set: one entry per connective, in label-id order, plus the
/// implicit last label for pairs without a connective.
class ConnectiveLexicon {
  public:
    static constexpr std::string_view kNoConnectiveName = "[No connective]";

    ConnectiveLexicon() = default;

    /// Entries are (surface, comma_required); label ids follow the order given.
    explicit ConnectiveLexicon(const std::vector<std::pair<std::string, bool>> &entries) {
        for (const auto &[surface, comma] : entries) {
            add(surface, comma, 0);
        }
    }

    /// The 19 connectives studied in the original experiments, ordered by
    /// corpus frequency. Entries written with a trailing comma require one.
    static ConnectiveLexicon default_lexicon() {
        return ConnectiveLexicon({
            {"however", false},        {"for example", false},     {"and", false},
            {"meanwhile", true},       {"therefore", false},       {"finally", true},
            {"nevertheless", false},   {"instead", true},          {"moreover", false},
            {"then", true},            {"on the other hand", false}, {"in particular", true},
            {"indeed", true},          {"overall", true},          {"in other words", false},
            {"rather", true},          {"by contrast", true},      {"by then", false},
            {"otherwise", true},
        });
    }

    /// Reads `surface<TAB>comma_required(0|1)` lines. Blank lines and lines
    /// starting with '#' are ignored.
    static ConnectiveLexicon parse(std::istream &in) {
        ConnectiveLexicon lex;
        std::string line;
        std::size_t line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            if (!line.empty() && line.back() == '\r') {
                line.pop_back();
            }
            if (detail::trim(line).empty() || line.front() == '#') {
                continue;
            }
            const auto tab = line.find('\t');
            if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
                throw DataError("expected `surface<TAB>comma_required`", line_no);
            }
            const std::string flag(detail::trim(std::string_view(line).substr(tab + 1)));
            if (flag != "0" && flag != "1") {
                throw DataError("comma_required must be 0 or 1, got '" + flag + "'", line_no);
            }
            lex.add(line.substr(0, tab), flag == "1", line_no);
        }
        if (lex.entries_.empty()) {
            throw DataError("lexicon has no entries");
        }
        return lex;
    }

    void write(std::ostream &out) const {
        for (const auto &e : entries_) {
            out << e.name() << '\t' << (e.comma_required ? 1 : 0) << '\n';
        }
    }

    /// Number of labels, including the no-connective label.
    int size() const { return static_cast<int>(entries_.size()) + 1; }
    int no_connective() const { return static_cast<int>(entries_.size()); }
    const std::vector<ConnectiveEntry> &entries() const { return entries_; }

    std::string label_name(int label_id) const {
        if (label_id == no_connective()) {
            return std::string(kNoConnectiveName);
        }
        if (label_id < 0 || label_id > no_connective()) {
            throw Error("label id out of range: " + std::to_string(label_id));
        }
        return entries_[static_cast<std::size_t>(label_id)].name();
    }

    std::vector<std::string> label_names() const {
        std::vector<std::string> out;
        for (int i = 0; i < size(); ++i) {
            out.push_back(label_name(i));
        }
        return out;
    }

    /// Accepts the label name with or without a trailing comma, any casing.
    std::optional<int> label_id(std::string_view name) const {
        if (name == kNoConnectiveName) {
            return no_connective();
        }
        std::string key = to_lower(detail::trim(name));
        if (!key.empty() && key.back() == ',') {
            key.pop_back();
        }
        const auto it = by_name_.find(key);
        if (it == by_name_.end()) {
            return std::nullopt;
        }
        return it->second;
    }

  private:
    void add(std::string_view surface, bool comma_required, std::size_t line_no) {
        ConnectiveEntry e;
        e.label_id = static_cast<int>(entries_.size());
        e.comma_required = comma_required;
        std::istringstream words{std::string(surface)};
        std::string w;
        while (words >> w) {
            e.surface.push_back(to_lower(w));
        }
        if (e.surface.empty()) {
            throw DataError("empty connective surface", line_no);
        }
        for (const auto &tok : e.surface) {
            if (std::any_of(tok.begin(), tok.end(), is_detached_punct)) {
                throw DataError("connective surface may not contain punctuation: '" + std::string(surface) + "'",
                                line_no);
            }
        }
        const std::string key = e.name();
        if (by_name_.count(key) != 0) {
            throw DataError("duplicate connective surface '" + key + "'", line_no);
        }
        by_name_.emplace(key, e.label_id);
        entries_.push_back(std::move(e));
    }

    std::vector<ConnectiveEntry> entries_;
    std::unordered_map<std::string, int> by_name_;
};

/// Removes the first `span` tokens and a directly following comma, then
/// upper-cases the first character of what remains.
inline Sentence strip_and_recase(const Sentence &s, std::size_t span) {
    if (span > s.tokens.size()) {
        throw Error("connective span exceeds sentence length");
    }
    std::size_t start = span;
    if (start < s.tokens.size() && s.tokens[start] == ",") {
        ++start;
    }
    if (start == s.tokens.size()) {
        throw DataError("stripping the connective leaves an empty sentence: '" + s.raw + "'");
    }
    std::vector<std::string> rest(s.tokens.begin() + static_cast<std::ptrdiff_t>(start), s.tokens.end());
    rest.front()[0] = static_cast<char>(std::toupper(static_cast<unsigned char>(rest.front()[0])));
    return sentence_from_tokens(std::move(rest));
}

struct MatchResult {
    int label_id = 0;
    std::size_t span = 0; // connective tokens, excluding any comma
    Sentence stripped;
};

/// Label and span of the longest lexicon surface at the start of `s`, without
/// stripping. Matching is case-insensitive.
inline std::optional<std::pair<int, std::size_t>> find_connective(const Sentence &s,
                                                                  const ConnectiveLexicon &lex) {
    std::optional<std::pair<int, std::size_t>> best;
    for (const auto &e : lex.entries()) {
        const std::size_t n = e.surface.size();
        if (n > s.tokens.size() || (best && n <= best->second)) {
            continue;
        }
        bool ok = true;
        for (std::size_t i = 0; i < n && ok; ++i) {
            ok = to_lower(s.tokens[i]) == e.surface[i];
        }
        if (ok && e.comma_required) {
            ok = n < s.tokens.size() && s.tokens[n] == ",";
        }
        if (ok) {
            best = std::make_pair(e.label_id, n);
        }
    }
    return best;
}

/// Matches a connective at the start of `s` and strips it. Absent when no
/// surface matches. Throws DataError when the connective is the whole sentence.
inline std::optional<MatchResult> match_connective(const Sentence &s, const ConnectiveLexicon &lex) {
    const auto found = find_connective(s, lex);
    if (!found) {
        return std::nullopt;
    }
    return MatchResult{found->first, found->second, strip_and_recase(s, found->second)};
}

} // namespace dconn
