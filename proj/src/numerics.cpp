#include "ptq/numerics.hpp"

#include <cmath>
#include <cstdint>

#include "ptq/error.hpp"

namespace ptq {

namespace {

void check_matmul_shapes(const Matrix& x, const Matrix& w) {
    require(x.cols() == w.rows(), ErrorKind::data,
            "matmul shape mismatch: " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                " * " + std::to_string(w.rows()) + "x" + std::to_string(w.cols()));
}

inline void matmul_row(const Matrix& x, const Matrix& w, Matrix& y, std::size_t a) {
    double* out = y.row(a);
    const std::size_t m = w.rows();
    const std::size_t n = w.cols();
    for (std::size_t i = 0; i < m; ++i) {
        const double xa = x(a, i);
        const double* wr = w.row(i);
        for (std::size_t b = 0; b < n; ++b) out[b] += xa * wr[b];
    }
}

}  // namespace

Matrix matmul(const Matrix& x, const Matrix& w) {
    check_matmul_shapes(x, w);
    Matrix y(x.rows(), w.cols());
    const std::int64_t t = static_cast<std::int64_t>(x.rows());
#pragma omp parallel for schedule(static)
    for (std::int64_t a = 0; a < t; ++a) matmul_row(x, w, y, static_cast<std::size_t>(a));
    return y;
}

Matrix matmul_serial(const Matrix& x, const Matrix& w) {
    check_matmul_shapes(x, w);
    Matrix y(x.rows(), w.cols());
    for (std::size_t a = 0; a < x.rows(); ++a) matmul_row(x, w, y, a);
    return y;
}

Matrix matmul_at(const Matrix& a, const Matrix& b) {
    require(a.rows() == b.rows(), ErrorKind::data, "matmul_at shape mismatch");
    Matrix y(a.cols(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i);
        const double* br = b.row(i);
        for (std::size_t r = 0; r < a.cols(); ++r) {
            double* out = y.row(r);
            const double av = ar[r];
            for (std::size_t c = 0; c < b.cols(); ++c) out[c] += av * br[c];
        }
    }
    return y;
}

Matrix matmul_bt(const Matrix& a, const Matrix& b) {
    require(a.cols() == b.cols(), ErrorKind::data, "matmul_bt shape mismatch");
    Matrix y(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        const double* ar = a.row(i);
        for (std::size_t k = 0; k < b.rows(); ++k) {
            const double* br = b.row(k);
            double acc = 0.0;
            for (std::size_t c = 0; c < a.cols(); ++c) acc += ar[c] * br[c];
            y(i, k) = acc;
        }
    }
    return y;
}

double dot(const Vector& f1, const Vector& f2) {
    require(f1.size() == f2.size(), ErrorKind::data, "vector length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < f1.size(); ++i) acc += f1[i] * f2[i];
    return acc;
}

double norm2(const Vector& f) { return std::sqrt(dot(f, f)); }

double cosine_similarity(const Vector& f1, const Vector& f2) {
    require(f1.size() == f2.size(), ErrorKind::data, "cosine_similarity length mismatch");
    const double n1 = norm2(f1);
    const double n2 = norm2(f2);
    require(n1 > 0.0 && n2 > 0.0, ErrorKind::data, "cosine_similarity on zero-norm input");
    const double c = dot(f1, f2) / (n1 * n2);
    if (c > 1.0) return 1.0;
    if (c < -1.0) return -1.0;
    return c;
}

double l2_distance(const Vector& f1, const Vector& f2) {
    require(f1.size() == f2.size(), ErrorKind::data, "l2_distance length mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < f1.size(); ++i) {
        const double d = f1[i] - f2[i];
        acc += d * d;
    }
    return std::sqrt(acc);
}

}  // namespace ptq
