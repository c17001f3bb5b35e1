#include "bitdance/matrix.hpp"

#include <algorithm>
#include <cmath>

#include "bitdance/error.hpp"

namespace bitdance {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw InvalidInput("Matrix: data size does not match shape");
    }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
    rows_ = rows.size();
    cols_ = rows_ == 0 ? 0 : rows.begin()->size();
    data_.reserve(rows_ * cols_);
    for (const auto& r : rows) {
        if (r.size() != cols_) throw InvalidInput("Matrix: ragged initializer");
        data_.insert(data_.end(), r.begin(), r.end());
    }
}

void Matrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Matrix::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Matrix::append_rows(const Matrix& other) {
    if (other.rows_ == 0) return;
    if (rows_ == 0) {
        cols_ = other.cols_;
    } else if (other.cols_ != cols_) {
        throw InvalidInput("Matrix::append_rows: column mismatch");
    }
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    rows_ += other.rows_;
}

Matrix Matrix::slice_rows(std::size_t begin, std::size_t count) const {
    if (begin + count > rows_) throw InvalidInput("Matrix::slice_rows: out of range");
    Matrix out(count, cols_);
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(begin * cols_), count * cols_, out.data_.begin());
    return out;
}

Matrix& Matrix::operator+=(const Matrix& other) {
    if (!same_shape(other)) throw InvalidInput("Matrix +=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
    return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
    if (!same_shape(other)) throw InvalidInput("Matrix -=: shape mismatch");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
    return *this;
}

Matrix& Matrix::operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
}

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw InvalidInput("matmul: inner dimension mismatch");
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    Matrix c(n, m);
    for (std::size_t i = 0; i < n; ++i) {
        double* ci = c.data() + i * m;
        const double* ai = a.data() + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b.data() + p * m;
            for (std::size_t j = 0; j < m; ++j) ci[j] += av * bp[j];
        }
    }
    return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw InvalidInput("matmul_nt: inner dimension mismatch");
    // Same per-element summation order as a dot-product loop, but the
    // row-times-matrix form vectorizes.
    return matmul(a, transpose(b));
}

void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c) {
    if (a.rows() != b.rows() || c.rows() != a.cols() || c.cols() != b.cols()) {
        throw InvalidInput("matmul_tn: shape mismatch");
    }
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    for (std::size_t r = 0; r < n; ++r) {
        const double* ar = a.data() + r * k;
        const double* br = b.data() + r * m;
        for (std::size_t i = 0; i < k; ++i) {
            const double av = ar[i];
            if (av == 0.0) continue;
            double* ci = c.data() + i * m;
            for (std::size_t j = 0; j < m; ++j) ci[j] += av * br[j];
        }
    }
}

Matrix matmul_tn(const Matrix& a, const Matrix& b) {
    Matrix c(a.cols(), b.cols());
    matmul_tn_acc(a, b, c);
    return c;
}

Matrix transpose(const Matrix& a) {
    Matrix t(a.cols(), a.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < a.cols(); ++j) t(j, i) = a(i, j);
    return t;
}

double sum(const Matrix& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    return s;
}

double frobenius_sq(const Matrix& a) {
    double s = 0.0;
    for (double v : a.values()) s += v * v;
    return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
    if (!a.same_shape(b)) throw InvalidInput("max_abs_diff: shape mismatch");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace bitdance
