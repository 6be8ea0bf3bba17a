#pragma once

#include <cmath>
#include <vector>

#include "ptq/mat.hpp"
#include "ptq/rng.hpp"

namespace ptq::test {

inline Matrix random_matrix(Rng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0) {
    return rng.normal_matrix(rows, cols, stddev);
}

inline Vector random_vector(Rng& rng, std::size_t n, double stddev = 1.0) {
    Vector v(n);
    for (double& x : v) x = stddev * rng.normal();
    return v;
}

// Naive triple-loop product, the reference oracle for the matmul kernels.
inline Matrix matmul_oracle(const Matrix& x, const Matrix& w) {
    Matrix y(x.rows(), w.cols());
    for (std::size_t a = 0; a < x.rows(); ++a)
        for (std::size_t b = 0; b < w.cols(); ++b)
            for (std::size_t k = 0; k < x.cols(); ++k) y(a, b) += x(a, k) * w(k, b);
    return y;
}

inline double max_abs_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        worst = std::max(worst, std::fabs(a.values()[i] - b.values()[i]));
    return worst;
}

inline double max_rel_diff(const Matrix& a, const Matrix& b) {
    double worst = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double denom = std::max({std::fabs(a.values()[i]), std::fabs(b.values()[i]), 1e-12});
        worst = std::max(worst, std::fabs(a.values()[i] - b.values()[i]) / denom);
    }
    return worst;
}

}  // namespace ptq::test
