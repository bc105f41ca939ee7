#include "mpq/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace mpq {

Matrix identity(int n) {
    Matrix m(n, n);
    for (int i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw std::runtime_error("matmul: dimension mismatch " + std::to_string(a.cols) +
                                 " vs " + std::to_string(b.rows));
    Matrix out(a.rows, b.cols);
    // i-k-j loop order: deterministic accumulation, row-major friendly.
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = &a.data[static_cast<size_t>(i) * a.cols];
        double* orow = &out.data[static_cast<size_t>(i) * out.cols];
        for (int k = 0; k < a.cols; ++k) {
            double aik = arow[k];
            const double* brow = &b.data[static_cast<size_t>(k) * b.cols];
            for (int j = 0; j < b.cols; ++j) orow[j] += aik * brow[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols)
        throw std::runtime_error("matmul_nt: dimension mismatch " + std::to_string(a.cols) +
                                 " vs " + std::to_string(b.cols));
    Matrix out(a.rows, b.rows);
    for (int i = 0; i < a.rows; ++i) {
        const double* arow = &a.data[static_cast<size_t>(i) * a.cols];
        for (int j = 0; j < b.rows; ++j) {
            const double* brow = &b.data[static_cast<size_t>(j) * b.cols];
            double s = 0.0;
            for (int k = 0; k < a.cols; ++k) s += arow[k] * brow[k];
            out(i, j) = s;
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows)
        throw std::runtime_error("matmul_tn: dimension mismatch " + std::to_string(a.rows) +
                                 " vs " + std::to_string(b.rows));
    Matrix out(a.cols, b.cols);
    for (int k = 0; k < a.rows; ++k) {
        const double* arow = &a.data[static_cast<size_t>(k) * a.cols];
        const double* brow = &b.data[static_cast<size_t>(k) * b.cols];
        for (int i = 0; i < a.cols; ++i) {
            double aki = arow[i];
            double* orow = &out.data[static_cast<size_t>(i) * out.cols];
            for (int j = 0; j < b.cols; ++j) orow[j] += aki * brow[j];
        }
    }
    return out;
}

Matrix transpose(const Matrix& m) {
    Matrix out(m.cols, m.rows);
    for (int i = 0; i < m.rows; ++i)
        for (int j = 0; j < m.cols; ++j) out(j, i) = m(i, j);
    return out;
}

Matrix add(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::runtime_error("add: shape mismatch");
    Matrix out(a.rows, a.cols);
    for (size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] + b.data[i];
    return out;
}

Matrix sub(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::runtime_error("sub: shape mismatch");
    Matrix out(a.rows, a.cols);
    for (size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] - b.data[i];
    return out;
}

void add_inplace(Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw std::runtime_error("add_inplace: shape mismatch");
    for (size_t i = 0; i < a.size(); ++i) a.data[i] += b.data[i];
}

Matrix scaled(const Matrix& a, double c) {
    Matrix out(a.rows, a.cols);
    for (size_t i = 0; i < a.size(); ++i) out.data[i] = a.data[i] * c;
    return out;
}

double frobenius_norm_sq(const Matrix& m) {
    double s = 0.0;
    for (double v : m.data) s += v * v;
    return s;
}

bool all_finite(const Matrix& m) {
    for (double v : m.data)
        if (!std::isfinite(v)) return false;
    return true;
}

void check_finite(const Matrix& m, const std::string& where) {
    if (!all_finite(m)) throw std::runtime_error(where + ": non-finite values");
}

}  // namespace mpq
