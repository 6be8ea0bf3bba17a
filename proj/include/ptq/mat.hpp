#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

#include "ptq/error.hpp"

namespace ptq {

// Dense row-major matrix of doubles. Used for both weight matrices and
// activation batches.
//
// Orientation convention, used everywhere in this library: weight matrices
// are stored with rows indexing input channels and columns indexing output
// features, so a layer computes Y = X * W with X of shape tokens x channels.
// Row masks, per-row scales and per-row quantization parameters all index
// input channels.
class Matrix {
public:
    Matrix() = default;

    Matrix(std::size_t rows, std::size_t cols) : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {
        require(rows >= 1 && cols >= 1, ErrorKind::data, "matrix dimensions must be >= 1");
    }

    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
        : rows_(rows), cols_(cols), data_(std::move(data)) {
        require(rows >= 1 && cols >= 1, ErrorKind::data, "matrix dimensions must be >= 1");
        require(data_.size() == rows * cols, ErrorKind::data, "matrix data size does not match dimensions");
    }

    static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
        require(rows.size() > 0 && rows.begin()->size() > 0, ErrorKind::data, "matrix literal must be non-empty");
        Matrix m(rows.size(), rows.begin()->size());
        std::size_t r = 0;
        for (const auto& row : rows) {
            require(row.size() == m.cols_, ErrorKind::data, "ragged matrix literal");
            std::size_t c = 0;
            for (double v : row) m(r, c++) = v;
            ++r;
        }
        return m;
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    double* row(std::size_t r) noexcept { return data_.data() + r * cols_; }
    const double* row(std::size_t r) const noexcept { return data_.data() + r * cols_; }

    std::span<const double> values() const noexcept { return data_; }
    std::span<double> values() noexcept { return data_; }

    bool all_finite() const noexcept {
        for (double v : data_)
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

using Vector = std::vector<double>;

}  // namespace ptq
