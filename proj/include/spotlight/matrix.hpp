#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "spotlight/errors.hpp"

namespace spotlight {

// Dense row-major matrix. Float for production paths, double for oracle and
// gradient-check paths.
template <typename T>
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols)
        : rows_(rows), cols_(cols), data_(rows * cols, T(0)) {}
    Matrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        if (data_.size() != rows_ * cols_) {
            throw DimensionError("Matrix: data size " + std::to_string(data_.size()) +
                                 " does not match " + std::to_string(rows_) + "x" +
                                 std::to_string(cols_));
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    const std::vector<T>& values() const { return data_; }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool all_finite() const {
        for (const T& v : data_) {
            if (!std::isfinite(static_cast<double>(v))) return false;
        }
        return true;
    }

    bool operator==(const Matrix& other) const {
        return rows_ == other.rows_ && cols_ == other.cols_ && data_ == other.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

namespace detail {

inline void check_mm(std::size_t a_cols, std::size_t b_rows, const char* where) {
    if (a_cols != b_rows) {
        throw DimensionError(std::string(where) + ": inner dimensions " +
                             std::to_string(a_cols) + " and " + std::to_string(b_rows) +
                             " do not match");
    }
}

// Work cutoff below which threading a product is not worth the fork.
constexpr std::size_t kParallelGrain = std::size_t(1) << 21;

}  // namespace detail

// C = A * B. Each output row is produced by exactly one thread with a fixed
// accumulation order, so results are bit-identical across thread counts.
template <typename T>
Matrix<T> matmul(const Matrix<T>& a, const Matrix<T>& b) {
    detail::check_mm(a.cols(), b.rows(), "matmul");
    Matrix<T> c(a.rows(), b.cols());
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    const bool par = m * k * n >= detail::kParallelGrain;
    (void)par;
#pragma omp parallel for schedule(static) if (par)
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a.row(i).data();
        T* crow = c.row(i).data();
        for (std::size_t p = 0; p < k; ++p) {
            const T av = arow[p];
            const T* brow = b.row(p).data();
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
    return c;
}

// C = A * B^T (rows of B are the right-hand vectors).
template <typename T>
Matrix<T> matmul_bt(const Matrix<T>& a, const Matrix<T>& b) {
    detail::check_mm(a.cols(), b.cols(), "matmul_bt");
    Matrix<T> c(a.rows(), b.rows());
    const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
    const bool par = m * k * n >= detail::kParallelGrain;
    (void)par;
#pragma omp parallel for schedule(static) if (par)
    for (std::size_t i = 0; i < m; ++i) {
        const T* arow = a.row(i).data();
        T* crow = c.row(i).data();
        for (std::size_t j = 0; j < n; ++j) {
            const T* brow = b.row(j).data();
            T acc = T(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] = acc;
        }
    }
    return c;
}

// C += A^T * B, used for weight-gradient accumulation. Parallel over output
// rows; reads of A are strided but each C row has a single writer.
template <typename T>
void add_matmul_at(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& c) {
    detail::check_mm(a.rows(), b.rows(), "add_matmul_at");
    if (c.rows() != a.cols() || c.cols() != b.cols()) {
        throw DimensionError("add_matmul_at: output shape mismatch");
    }
    const std::size_t rows = a.rows(), m = a.cols(), n = b.cols();
    const bool par = rows * m * n >= detail::kParallelGrain;
    (void)par;
#pragma omp parallel for schedule(static) if (par)
    for (std::size_t i = 0; i < m; ++i) {
        T* crow = c.row(i).data();
        for (std::size_t p = 0; p < rows; ++p) {
            const T av = a.row(p).data()[i];
            const T* brow = b.row(p).data();
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <typename T>
T dot(std::span<const T> a, std::span<const T> b) {
    T acc = T(0);
    for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
    return acc;
}

template <typename T>
T norm2(std::span<const T> a) {
    return std::sqrt(dot(a, a));
}

template <typename To, typename From>
Matrix<To> matrix_cast(const Matrix<From>& m) {
    Matrix<To> out(m.rows(), m.cols());
    for (std::size_t i = 0; i < m.size(); ++i) out.data()[i] = static_cast<To>(m.data()[i]);
    return out;
}

}  // namespace spotlight
