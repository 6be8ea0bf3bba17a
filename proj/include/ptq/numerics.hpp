#pragma once

#include "ptq/mat.hpp"

namespace ptq {

// Y = X * W, X: t x m, W: m x n. Parallel over output rows; every output
// entry accumulates over the shared dimension in ascending order, so results
// are bit-identical to the serial kernel regardless of thread count.
Matrix matmul(const Matrix& x, const Matrix& w);

// Serial reference for the parallel kernel.
Matrix matmul_serial(const Matrix& x, const Matrix& w);

// A^T * B with A: m x r, B: m x n  ->  r x n
Matrix matmul_at(const Matrix& a, const Matrix& b);

// A * B^T with A: m x n, B: k x n  ->  m x k
Matrix matmul_bt(const Matrix& a, const Matrix& b);

// <f1,f2> / (|f1| |f2|), clamped into [-1, 1] against rounding.
// Zero-norm inputs are rejected.
double cosine_similarity(const Vector& f1, const Vector& f2);

// Euclidean norm of f1 - f2.
double l2_distance(const Vector& f1, const Vector& f2);

double dot(const Vector& f1, const Vector& f2);
double norm2(const Vector& f);

}  // namespace ptq
