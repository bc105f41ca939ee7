#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace mpq {

// Dense row-major matrix of doubles. All operations are pure functions with a
// fixed summation order, so results are bit-identical across runs of the same
// binary.
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c)
        : rows(r), cols(c), data(static_cast<size_t>(r) * static_cast<size_t>(c), 0.0) {}

    double& operator()(int r, int c) {
        return data[static_cast<size_t>(r) * cols + c];
    }
    double operator()(int r, int c) const {
        return data[static_cast<size_t>(r) * cols + c];
    }

    size_t size() const { return data.size(); }
    bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }
};

Matrix identity(int n);

// a * b
Matrix matmul(const Matrix& a, const Matrix& b);
// a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);

Matrix transpose(const Matrix& m);
Matrix add(const Matrix& a, const Matrix& b);
Matrix sub(const Matrix& a, const Matrix& b);
void add_inplace(Matrix& a, const Matrix& b);
Matrix scaled(const Matrix& a, double c);

double frobenius_norm_sq(const Matrix& m);

bool all_finite(const Matrix& m);
// Throws when m contains NaN/Inf; `where` tags the failing operation.
void check_finite(const Matrix& m, const std::string& where);

}  // namespace mpq
