#pragma once

#include <cassert>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace nodal {

// Dense row-major matrix. Vectors (biases, gains) are 1 x n.
template <class T>
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, T fill = T{0}) : rows(r), cols(c), data(r * c, fill) {}

    T& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<T> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const T> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

    void fill(T v) { std::fill(data.begin(), data.end(), v); }

    template <class U>
    Matrix<U> cast() const {
        Matrix<U> out(rows, cols);
        for (std::size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
        return out;
    }

    bool all_finite() const {
        for (const T& v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows == b.rows && a.cols == b.cols && a.data == b.data;
    }
};

// out = a * b (+ out when accumulate)
template <class T>
void matmul(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, bool accumulate = false) {
    assert(a.cols == b.rows);
    if (!accumulate) out = Matrix<T>(a.rows, b.cols);
    assert(out.rows == a.rows && out.cols == b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        T* o = out.data.data() + i * out.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const T av = a(i, k);
            if (av == T{0}) continue;
            const T* br = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j) o[j] += av * br[j];
        }
    }
}

// out = a^T * b (+ out when accumulate)
template <class T>
void matmul_tn(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, bool accumulate = false) {
    assert(a.rows == b.rows);
    if (!accumulate) out = Matrix<T>(a.cols, b.cols);
    assert(out.rows == a.cols && out.cols == b.cols);
    for (std::size_t r = 0; r < a.rows; ++r) {
        const T* ar = a.data.data() + r * a.cols;
        const T* br = b.data.data() + r * b.cols;
        for (std::size_t i = 0; i < a.cols; ++i) {
            const T av = ar[i];
            if (av == T{0}) continue;
            T* o = out.data.data() + i * out.cols;
            for (std::size_t j = 0; j < b.cols; ++j) o[j] += av * br[j];
        }
    }
}

// out = a * b^T (+ out when accumulate)
template <class T>
void matmul_nt(const Matrix<T>& a, const Matrix<T>& b, Matrix<T>& out, bool accumulate = false) {
    assert(a.cols == b.cols);
    if (!accumulate) out = Matrix<T>(a.rows, b.rows);
    assert(out.rows == a.rows && out.cols == b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const T* ar = a.data.data() + i * a.cols;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const T* br = b.data.data() + j * b.cols;
            T s{0};
            for (std::size_t k = 0; k < a.cols; ++k) s += ar[k] * br[k];
            out(i, j) += s;
        }
    }
}

// Adds a 1 x cols bias to every row.
template <class T>
void add_row_bias(Matrix<T>& m, const Matrix<T>& bias) {
    assert(bias.rows == 1 && bias.cols == m.cols);
    for (std::size_t i = 0; i < m.rows; ++i) {
        T* r = m.data.data() + i * m.cols;
        for (std::size_t j = 0; j < m.cols; ++j) r[j] += bias.data[j];
    }
}

// Accumulates column sums of m into a 1 x cols gradient.
template <class T>
void add_column_sums(const Matrix<T>& m, Matrix<T>& out) {
    assert(out.rows == 1 && out.cols == m.cols);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const T* r = m.data.data() + i * m.cols;
        for (std::size_t j = 0; j < m.cols; ++j) out.data[j] += r[j];
    }
}

template <class T>
void add_into(Matrix<T>& dst, const Matrix<T>& src) {
    assert(dst.same_shape(src));
    for (std::size_t i = 0; i < dst.data.size(); ++i) dst.data[i] += src.data[i];
}

}  // namespace nodal
