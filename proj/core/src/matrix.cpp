#include "datl/matrix.hpp"

#include <cmath>
#include <stdexcept>

namespace datl {

std::string shape_str(const Matrix& m) {
    return std::to_string(m.rows) + "x" + std::to_string(m.cols);
}

namespace {

void check_inner(const Matrix& a, const Matrix& b, std::size_t a_inner, std::size_t b_inner,
                 const char* op) {
    if (a_inner != b_inner) {
        throw std::invalid_argument(std::string(op) + ": incompatible shapes " + shape_str(a) +
                                    " and " + shape_str(b));
    }
}

}  // namespace

Matrix matmul(const Matrix& a, const Matrix& b) {
    check_inner(a, b, a.cols, b.rows, "matmul");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row_ptr(i);
        double* orow = out.row_ptr(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.row_ptr(k);
            for (std::size_t j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    check_inner(a, b, a.cols, b.cols, "matmul_nt");
    Matrix out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row_ptr(i);
        double* orow = out.row_ptr(i);
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* brow = b.row_ptr(j);
            double acc = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k) {
                acc += arow[k] * brow[k];
            }
            orow[j] = acc;
        }
    }
    return out;
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    check_inner(a, b, a.rows, b.rows, "matmul_tn");
    Matrix out(a.cols, b.cols);
    for (std::size_t k = 0; k < a.rows; ++k) {
        const double* arow = a.row_ptr(k);
        const double* brow = b.row_ptr(k);
        for (std::size_t i = 0; i < a.cols; ++i) {
            const double aki = arow[i];
            double* orow = out.row_ptr(i);
            for (std::size_t j = 0; j < b.cols; ++j) {
                orow[j] += aki * brow[j];
            }
        }
    }
    return out;
}

std::vector<double> column_sums(const Matrix& m) {
    std::vector<double> sums(m.cols, 0.0);
    for (std::size_t i = 0; i < m.rows; ++i) {
        const double* row = m.row_ptr(i);
        for (std::size_t j = 0; j < m.cols; ++j) {
            sums[j] += row[j];
        }
    }
    return sums;
}

bool all_finite(const Matrix& m) {
    for (double v : m.values) {
        if (!std::isfinite(v)) return false;
    }
    return true;
}

}  // namespace datl
