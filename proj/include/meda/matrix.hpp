#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "meda/types.hpp"

namespace meda {

/// Dense row-major matrix of doubles. The whole engine runs on this one
/// representation; shapes are validated at the operation boundaries.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;  // row-major, rows * cols entries

    Matrix() = default;

    Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

    Matrix(std::size_t r, std::size_t c, std::vector<double> values)
        : rows(r), cols(c), data(std::move(values)) {
        if (data.size() != rows * cols) {
            throw ShapeError("Matrix: data length " + std::to_string(data.size()) +
                             " does not match " + std::to_string(rows) + "x" + std::to_string(cols));
        }
    }

    static Matrix identity(std::size_t n) {
        Matrix m(n, n);
        for (std::size_t i = 0; i < n; ++i) {
            m.at(i, i) = 1.0;
        }
        return m;
    }

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    bool empty() const { return rows == 0 || cols == 0; }

    bool same_shape(const Matrix& other) const { return rows == other.rows && cols == other.cols; }
};

inline void check_finite(const Matrix& m, const char* what) {
    for (double v : m.data) {
        if (!std::isfinite(v)) {
            throw ContractError(std::string(what) + ": non-finite value produced");
        }
    }
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: " + std::to_string(a.rows) + "x" + std::to_string(a.cols) +
                         " * " + std::to_string(b.rows) + "x" + std::to_string(b.cols));
    }
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = a.at(i, k);
            if (aik == 0.0) {
                continue;
            }
            const double* brow = b.data.data() + k * b.cols;
            double* orow = out.data.data() + i * out.cols;
            for (std::size_t j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    check_finite(out, "matmul");
    return out;
}

/// Row-wise softmax of a[i][j] / scale, max-subtracted for stability.
inline Matrix softmax_rows(const Matrix& a, double scale) {
    if (a.empty()) {
        throw ShapeError("softmax_rows: empty input");
    }
    if (!(scale > 0.0)) {
        throw ContractError("softmax_rows: scale must be positive");
    }
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        auto src = a.row(i);
        auto dst = out.row(i);
        double m = src[0];
        for (double v : src) {
            m = std::max(m, v);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) {
            dst[j] = std::exp((src[j] - m) / scale);
            sum += dst[j];
        }
        for (std::size_t j = 0; j < a.cols; ++j) {
            dst[j] /= sum;
        }
    }
    check_finite(out, "softmax_rows");
    return out;
}

/// Softmax restricted to j <= i; entries above the diagonal are 0.
inline Matrix causal_softmax_rows(const Matrix& a, double scale) {
    if (a.rows != a.cols) {
        throw ShapeError("causal_softmax_rows: square matrix required");
    }
    if (a.empty()) {
        throw ShapeError("causal_softmax_rows: empty input");
    }
    if (!(scale > 0.0)) {
        throw ContractError("causal_softmax_rows: scale must be positive");
    }
    Matrix out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        auto src = a.row(i);
        auto dst = out.row(i);
        double m = src[0];
        for (std::size_t j = 1; j <= i; ++j) {
            m = std::max(m, src[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
            dst[j] = std::exp((src[j] - m) / scale);
            sum += dst[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
            dst[j] /= sum;
        }
    }
    check_finite(out, "causal_softmax_rows");
    return out;
}

/// Shannon entropy in nats of a probability row, with 0 * ln 0 = 0.
/// The row must be non-negative and sum to 1 within 1e-6.
inline double row_entropy(std::span<const double> p) {
    double sum = 0.0;
    for (double v : p) {
        if (v < -1e-12) {
            throw ContractError("row_entropy: negative probability");
        }
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) {
        throw ContractError("row_entropy: row sums to " + std::to_string(sum) + ", expected 1");
    }
    double h = 0.0;
    for (double v : p) {
        if (v > 0.0) {
            h -= v * std::log(v);
        }
    }
    return h;
}

inline double mean_row_entropy(const Matrix& a) {
    if (a.rows == 0) {
        throw ShapeError("mean_row_entropy: empty matrix");
    }
    double total = 0.0;
    for (std::size_t i = 0; i < a.rows; ++i) {
        total += row_entropy(a.row(i));
    }
    return total / static_cast<double>(a.rows);
}

/// Cosine similarity in [-1, 1]; a zero-norm vector has similarity 0 to
/// everything.
inline double cosine_similarity(std::span<const double> u, std::span<const double> v) {
    if (u.size() != v.size()) {
        throw ShapeError("cosine_similarity: length mismatch");
    }
    double dot = 0.0, nu = 0.0, nv = 0.0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    if (nu == 0.0 || nv == 0.0) {
        return 0.0;
    }
    double c = dot / (std::sqrt(nu) * std::sqrt(nv));
    return std::clamp(c, -1.0, 1.0);
}

// --- seeded generation -------------------------------------------------
//
// mt19937_64 output is mapped to doubles directly so that generated values
// are bit-identical across standard library implementations
// (std::uniform_real_distribution is not portable).

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream));
}

/// Uniform double in [0, 1) from the next engine output.
inline double next_unit(std::mt19937_64& gen) {
    return static_cast<double>(gen() >> 11) * 0x1.0p-53;
}

inline double next_uniform(std::mt19937_64& gen, double lo, double hi) {
    return lo + (hi - lo) * next_unit(gen);
}

inline Matrix random_uniform_matrix(std::size_t rows, std::size_t cols, double lo, double hi,
                                    std::uint64_t seed) {
    std::mt19937_64 gen(seed);
    Matrix m(rows, cols);
    for (double& v : m.data) {
        v = next_uniform(gen, lo, hi);
    }
    return m;
}

}  // namespace meda
