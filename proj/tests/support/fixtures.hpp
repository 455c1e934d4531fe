#pragma once

#include "dconn/corpus.hpp"
#include "dconn/text.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

namespace dconn::support {

inline std::filesystem::path fixture_path(const std::string &name) {
    return std::filesystem::path(DCONN_FIXTURE_DIR) / name;
}

inline std::filesystem::path source_path(const std::string &name) {
    return std::filesystem::path(DCONN_SOURCE_DIR) / name;
}

inline std::string read_file(const std::filesystem::path &p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot read " + p.string());
    }
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

inline ConnectiveLexicon default_lexicon_file() {
    std::ifstream in(source_path("data/lexicon_default.tsv"));
    return ConnectiveLexicon::parse(in);
}

inline ArticleReadResult fixture_articles() {
    std::ifstream in(fixture_path("corpus.jsonl"));
    return read_articles_jsonl(in);
}

inline std::string examples_tsv(std::span<const LabeledExample> ex, const ConnectiveLexicon &lex) {
    std::ostringstream out;
    write_examples(out, ex, lex);
    return out.str();
}

/// Fresh scratch directory under the build tree, removed on destruction.
class TempDir {
  public:
    explicit TempDir(const std::string &tag) {
        path_ = std::filesystem::temp_directory_path() /
                ("dconn_" + tag + "_" + std::to_string(reinterpret_cast<std::uintptr_t>(this)));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir &) = delete;
    TempDir &operator=(const TempDir &) = delete;

    const std::filesystem::path &path() const { return path_; }
    std::filesystem::path operator/(const std::string &name) const { return path_ / name; }

  private:
    std::filesystem::path path_;
};

} // namespace dconn::support
