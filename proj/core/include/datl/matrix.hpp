#pragma once

#include <cstddef>
#include <string>
#include <vector>

namespace datl {

/// Row-major dense matrix of 64-bit floats. The only container the numeric
/// core operates on; shapes are validated at operation boundaries.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> values;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), values(r * c, fill) {}

    double& operator()(std::size_t r, std::size_t c) { return values[r * cols + c]; }
    double operator()(std::size_t r, std::size_t c) const { return values[r * cols + c]; }

    double* row_ptr(std::size_t r) { return values.data() + r * cols; }
    const double* row_ptr(std::size_t r) const { return values.data() + r * cols; }

    std::size_t size() const { return values.size(); }
    bool empty() const { return values.empty(); }
    bool same_shape(const Matrix& other) const {
        return rows == other.rows && cols == other.cols;
    }
};

std::string shape_str(const Matrix& m);

/// Standard product a*b. Throws std::invalid_argument naming both shapes
/// when the inner dimensions disagree.
Matrix matmul(const Matrix& a, const Matrix& b);

/// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

/// a^T * b without materializing the transpose.
Matrix matmul_tn(const Matrix& a, const Matrix& b);

std::vector<double> column_sums(const Matrix& m);

bool all_finite(const Matrix& m);

}  // namespace datl
