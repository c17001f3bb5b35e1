#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace bitdance {

// Dense row-major matrix of doubles. All model state and activations use this
// type; vectors are 1xN matrices.
//
// The product kernels accumulate each output element in ascending order of the
// inner index and each output row depends only on the matching input row.
// Results are therefore bit-identical no matter how many rows are processed in
// one call, which the KV-cache equivalence guarantees rely on.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
    Matrix(std::initializer_list<std::initializer_list<double>> rows);

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }
    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    void fill(double v);
    bool same_shape(const Matrix& other) const { return rows_ == other.rows_ && cols_ == other.cols_; }
    bool all_finite() const;

    // Appends the rows of `other` (same column count, or any if this is empty).
    void append_rows(const Matrix& other);
    Matrix slice_rows(std::size_t begin, std::size_t count) const;

    Matrix& operator+=(const Matrix& other);
    Matrix& operator-=(const Matrix& other);
    Matrix& operator*=(double s);

    friend bool operator==(const Matrix& a, const Matrix& b) {
        return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
    }

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);

// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
// C = A^T * B
Matrix matmul_tn(const Matrix& a, const Matrix& b);
// C += A^T * B
void matmul_tn_acc(const Matrix& a, const Matrix& b, Matrix& c);

Matrix transpose(const Matrix& a);
double sum(const Matrix& a);
double frobenius_sq(const Matrix& a);
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace bitdance
