#pragma once

#include "dconn/error.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dconn {

/// Dense row-major matrix.
template <typename T>
class Matrix {
  public:
    using value_type = T;

    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, T fill = T(0)) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T &operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T &operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    T &operator[](std::size_t i) { return data_[i]; }
    const T &operator[](std::size_t i) const { return data_[i]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    std::span<T> values() { return data_; }
    std::span<const T> values() const { return data_; }
    T *data() noexcept { return data_.data(); }
    const T *data() const noexcept { return data_.data(); }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
    bool same_shape(const Matrix &o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    template <typename U>
    Matrix<U> cast() const {
        Matrix<U> out(rows_, cols_);
        for (std::size_t i = 0; i < data_.size(); ++i) {
            out[i] = static_cast<U>(data_[i]);
        }
        return out;
    }

    Matrix &operator+=(const Matrix &o) {
        check_same(o, "+=");
        for (std::size_t i = 0; i < data_.size(); ++i) {
            data_[i] += o.data_[i];
        }
        return *this;
    }

    Matrix &operator*=(T s) {
        for (auto &v : data_) {
            v *= s;
        }
        return *this;
    }

    friend bool operator==(const Matrix &a, const Matrix &b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

  private:
    void check_same(const Matrix &o, const char *op) const {
        if (!same_shape(o)) {
            throw DimensionError(std::string("shape mismatch in ") + op + ": " + shape_str() + " vs " + o.shape_str());
        }
    }
    std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

namespace detail {

inline void require(bool ok, const char *op, std::size_t a, std::size_t b) {
    if (!ok) {
        throw DimensionError(std::string(op) + ": dimension mismatch (" + std::to_string(a) + " vs " +
                             std::to_string(b) + ")");
    }
}

} // namespace detail

/// A * B
template <typename T>
Matrix<T> matmul(const Matrix<T> &a, const Matrix<T> &b) {
    detail::require(a.cols() == b.rows(), "matmul", a.cols(), b.rows());
    Matrix<T> c(a.rows(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        T *ci = c.data() + i * n;
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const T aik = a(i, k);
            if (aik == T(0)) {
                continue;
            }
            const T *bk = b.data() + k * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += aik * bk[j];
            }
        }
    }
    return c;
}

/// A^T * B
template <typename T>
Matrix<T> matmul_tn(const Matrix<T> &a, const Matrix<T> &b) {
    detail::require(a.rows() == b.rows(), "matmul_tn", a.rows(), b.rows());
    Matrix<T> c(a.cols(), b.cols());
    const std::size_t n = b.cols();
    for (std::size_t k = 0; k < a.rows(); ++k) {
        const T *bk = b.data() + k * n;
        for (std::size_t i = 0; i < a.cols(); ++i) {
            const T aki = a(k, i);
            if (aki == T(0)) {
                continue;
            }
            T *ci = c.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) {
                ci[j] += aki * bk[j];
            }
        }
    }
    return c;
}

template <typename T>
Matrix<T> transpose(const Matrix<T> &a);

/// A * B^T. Transposing B first keeps the inner loop a contiguous axpy.
template <typename T>
Matrix<T> matmul_nt(const Matrix<T> &a, const Matrix<T> &b) {
    detail::require(a.cols() == b.cols(), "matmul_nt", a.cols(), b.cols());
    return matmul(a, transpose(b));
}

template <typename T>
Matrix<T> transpose(const Matrix<T> &a) {
    Matrix<T> t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        for (std::size_t j = 0; j < a.cols(); ++j) {
            t(j, i) = a(i, j);
        }
    }
    return t;
}

/// Copies rows [begin, begin + count) of `a`.
template <typename T>
Matrix<T> slice_rows(const Matrix<T> &a, std::size_t begin, std::size_t count) {
    detail::require(begin + count <= a.rows(), "slice_rows", begin + count, a.rows());
    Matrix<T> out(count, a.cols());
    std::copy_n(a.data() + begin * a.cols(), count * a.cols(), out.data());
    return out;
}

/// Row r of the result is a.row(r) followed by b.row(r).
template <typename T>
Matrix<T> hconcat(const Matrix<T> &a, const Matrix<T> &b) {
    detail::require(a.rows() == b.rows(), "hconcat", a.rows(), b.rows());
    Matrix<T> out(a.rows(), a.cols() + b.cols());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        std::copy(a.row(r).begin(), a.row(r).end(), out.row(r).begin());
        std::copy(b.row(r).begin(), b.row(r).end(), out.row(r).begin() + static_cast<std::ptrdiff_t>(a.cols()));
    }
    return out;
}

/// Row-wise numerically stable softmax.
template <typename T>
Matrix<T> softmax_rows(const Matrix<T> &logits) {
    Matrix<T> out(logits.rows(), logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        const auto in = logits.row(r);
        auto o = out.row(r);
        if (in.empty()) {
            continue;
        }
        const T mx = *std::max_element(in.begin(), in.end());
        T sum = T(0);
        for (std::size_t c = 0; c < in.size(); ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (auto &v : o) {
            v /= sum;
        }
    }
    return out;
}

/// Backward of a row-wise softmax given its output `p` and upstream `dp`.
template <typename T>
Matrix<T> softmax_rows_backward(const Matrix<T> &p, const Matrix<T> &dp) {
    Matrix<T> dx(p.rows(), p.cols());
    for (std::size_t r = 0; r < p.rows(); ++r) {
        T dot = T(0);
        for (std::size_t c = 0; c < p.cols(); ++c) {
            dot += p(r, c) * dp(r, c);
        }
        for (std::size_t c = 0; c < p.cols(); ++c) {
            dx(r, c) = p(r, c) * (dp(r, c) - dot);
        }
    }
    return dx;
}

} // namespace dconn
