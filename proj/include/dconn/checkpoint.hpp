#pragma once

#include "dconn/error.hpp"
#include "dconn/tensor.hpp"

#include <json.hpp>

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace dconn {

/// Binary container shared by model files:
///
///   magic (5 bytes) | u64 LE header length | JSON header | f32 LE arrays
///
/// The header's "tensors" list gives name, rows and cols of each array in
/// the order they are stored.
struct BinaryModel {
    nlohmann::json header;
    std::vector<std::pair<std::string, Matrix<float>>> tensors;

    const Matrix<float> &tensor(std::string_view name) const {
        for (const auto &[n, m] : tensors) {
            if (n == name) {
                return m;
            }
        }
        throw DataError("model file has no tensor '" + std::string(name) + "'");
    }
};

namespace detail {

inline void put_u64(std::ostream &out, std::uint64_t v) {
    std::array<char, 8> b{};
    for (int i = 0; i < 8; ++i) {
        b[static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xff);
    }
    out.write(b.data(), 8);
}

inline std::uint64_t get_u64(std::istream &in) {
    std::array<unsigned char, 8> b{};
    in.read(reinterpret_cast<char *>(b.data()), 8);
    if (!in) {
        throw DataError("truncated model file");
    }
    std::uint64_t v = 0;
    for (int i = 7; i >= 0; --i) {
        v = (v << 8) | b[static_cast<std::size_t>(i)];
    }
    return v;
}

} // namespace detail

inline void write_binary_model(std::ostream &out, std::string_view magic, const BinaryModel &model) {
    nlohmann::json header = model.header;
    header["tensors"] = nlohmann::json::array();
    for (const auto &[name, m] : model.tensors) {
        header["tensors"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}});
    }
    const std::string text = header.dump();
    out.write(magic.data(), static_cast<std::streamsize>(magic.size()));
    detail::put_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto &[name, m] : model.tensors) {
        for (float v : m.values()) {
            const auto bits = std::bit_cast<std::uint32_t>(v);
            const char b[4] = {static_cast<char>(bits & 0xff), static_cast<char>((bits >> 8) & 0xff),
                               static_cast<char>((bits >> 16) & 0xff), static_cast<char>((bits >> 24) & 0xff)};
            out.write(b, 4);
        }
    }
    if (!out) {
        throw Error("failed to write model file");
    }
}

inline BinaryModel read_binary_model(std::istream &in, std::string_view magic) {
    std::string got(magic.size(), '\0');
    in.read(got.data(), static_cast<std::streamsize>(got.size()));
    if (!in || got != magic) {
        throw DataError("bad magic: expected '" + std::string(magic) + "'");
    }
    const std::uint64_t len = detail::get_u64(in);
    if (len > (std::uint64_t{1} << 32)) {
        throw DataError("implausible header length");
    }
    std::string text(len, '\0');
    in.read(text.data(), static_cast<std::streamsize>(len));
    if (!in) {
        throw DataError("truncated model header");
    }
    BinaryModel model;
    model.header = nlohmann::json::parse(text, nullptr, false);
    if (model.header.is_discarded() || !model.header.contains("tensors")) {
        throw DataError("malformed model header");
    }
    for (const auto &t : model.header["tensors"]) {
        Matrix<float> m(t.at("rows").get<std::size_t>(), t.at("cols").get<std::size_t>());
        for (auto &v : m.values()) {
            unsigned char b[4];
            in.read(reinterpret_cast<char *>(b), 4);
            if (!in) {
                throw DataError("truncated tensor data for '" + t.at("name").get<std::string>() + "'");
            }
            const std::uint32_t bits = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                                       (static_cast<std::uint32_t>(b[2]) << 16) |
                                       (static_cast<std::uint32_t>(b[3]) << 24);
            v = std::bit_cast<float>(bits);
        }
        model.tensors.emplace_back(t.at("name").get<std::string>(), std::move(m));
    }
    model.header.erase("tensors");
    return model;
}

inline void save_binary_model(const std::filesystem::path &path, std::string_view magic, const BinaryModel &model) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw Error("cannot open for writing: " + path.string());
    }
    write_binary_model(out, magic, model);
}

inline BinaryModel load_binary_model(const std::filesystem::path &path, std::string_view magic) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw Error("cannot open: " + path.string());
    }
    return read_binary_model(in, magic);
}

} // namespace dconn
