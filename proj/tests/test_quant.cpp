#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <limits>

#include "ptq/quant.hpp"
#include "test_util.hpp"

using namespace ptq;

namespace {

// Reference minimizer of || w - a*sign(w) ||^2 by direct grid evaluation.
double grid_search_scale(const std::vector<double>& w, double step = 1e-4) {
    double max_abs = 0.0;
    for (double v : w) max_abs = std::max(max_abs, std::fabs(v));
    double best_a = 0.0, best_val = std::numeric_limits<double>::infinity();
    for (double a = 0.0; a <= 2.0 * max_abs + step; a += step) {
        double val = 0.0;
        for (double v : w) {
            const double s = v >= 0.0 ? 1.0 : -1.0;
            const double d = v - a * s;
            val += d * d;
        }
        if (val < best_val) {
            best_val = val;
            best_a = a;
        }
    }
    return best_a;
}

ChannelMask direct_mask(std::vector<std::uint8_t> bits) {
    ChannelMask m;
    m.bits = std::move(bits);
    m.salient = 0;
    for (auto b : m.bits) m.salient += b;
    m.ratio = static_cast<double>(m.salient) / static_cast<double>(m.bits.size());
    return m;
}

}  // namespace

TEST_CASE("affine quantization of the endpoint row") {
    const std::vector<double> w = {0.0, 1.5};
    const auto [codes, p] = affine_quantize_row(w, 4);
    CHECK(p.scale == doctest::Approx(0.1));
    CHECK(p.zero_point == 0);
    CHECK(codes == std::vector<std::uint8_t>{0, 15});
    CHECK(affine_dequantize(codes[0], p) == doctest::Approx(0.0));
    CHECK(affine_dequantize(codes[1], p) == doctest::Approx(1.5));
}

TEST_CASE("affine quantization of a constant row") {
    const std::vector<double> w = {3.0, 3.0, 3.0};
    const auto [codes, p] = affine_quantize_row(w, 4);
    CHECK(p.scale == 1.0);
    CHECK(codes[0] == codes[1]);
    CHECK(codes[1] == codes[2]);
    CHECK(std::fabs(affine_dequantize(codes[0], p) - 3.0) <= p.scale / 2);
}

TEST_CASE("affine quantization rejects bad input") {
    CHECK_THROWS_AS(affine_quantize_row(std::vector<double>{1.0, 2.0}, 5), Error);
    CHECK_THROWS_AS(affine_quantize_row(std::vector<double>{1.0, std::nan("")}, 4), Error);
}

TEST_CASE("affine roundtrip error stays within half a scale step") {
    Rng rng(21);
    for (int it = 0; it < 50; ++it) {
        std::vector<double> w(64);
        const double spread = rng.uniform(0.1, 3.0);
        for (double& v : w) v = spread * rng.normal();
        for (int bits : {2, 3, 4, 8}) {
            const auto [codes, p] = affine_quantize_row(w, bits);
            const int qmax = (1 << bits) - 1;
            for (std::size_t i = 0; i < w.size(); ++i) {
                const long unclamped = std::lround(w[i] / p.scale) + p.zero_point;
                if (unclamped < 0 || unclamped > qmax) continue;  // clamped entries excluded
                CHECK(std::fabs(affine_dequantize(codes[i], p) - w[i]) <= p.scale / 2 + 1e-9);
            }
        }
    }
}

TEST_CASE("binarize basics") {
    const auto [bits, alpha] = binarize_row(std::vector<double>{0.5, -1.5, 1.0, -1.0});
    CHECK(bits == std::vector<std::uint8_t>{1, 0, 1, 0});
    CHECK(alpha == doctest::Approx(1.0));

    const auto [zbits, zalpha] = binarize_row(std::vector<double>{0.0, 0.0, 0.0});
    CHECK(zbits == std::vector<std::uint8_t>{1, 1, 1});  // sign(0) = +1
    CHECK(zalpha == 0.0);
}

TEST_CASE("mean-abs scale matches the grid-search minimizer") {
    Rng rng(22);
    for (int it = 0; it < 20; ++it) {
        std::vector<double> w(4 + rng.index(60));
        for (double& v : w) v = rng.uniform(-1.0, 1.0);
        const auto [bits, alpha] = binarize_row(w);
        (void)bits;
        CHECK(std::fabs(alpha - grid_search_scale(w)) < 1e-3);
    }
}

TEST_CASE("quantize_layer routes rows by the mask") {
    const Matrix w = Matrix::from_rows({{0.1, -0.9}, {0.4, 0.2}});
    const QuantizedLayer q = quantize_layer(w, direct_mask({1, 0}));
    CHECK(q.salient_rows == std::vector<std::uint32_t>{0});
    CHECK(q.binary_rows == std::vector<std::uint32_t>{1});
    CHECK(q.codes.size() == 2);
    CHECK(q.signs.size() == 2);
    CHECK(q.scales.magnitude[1] == doctest::Approx(0.3));
    CHECK(q.scales.row_angular == std::vector<double>{1.0, 1.0});
    CHECK(q.scales.col_angular == std::vector<double>{1.0, 1.0});

    CHECK_THROWS_AS(quantize_layer(w, direct_mask({1, 0, 0})), Error);
}

TEST_CASE("an all-salient mask leaves the binarized branch empty") {
    const Matrix w = Matrix::from_rows({{0.1, -0.9}, {0.4, 0.2}});
    const QuantizedLayer q = quantize_layer(w, direct_mask({1, 1}));
    CHECK(q.binary_rows.empty());
    const Matrix back = dequantize(q);
    CHECK(back.rows() == 2);
    CHECK(back.cols() == 2);
}

TEST_CASE("dequantize at identity angular factors equals the analytic binarization") {
    Rng rng(23);
    const Matrix w = test::random_matrix(rng, 6, 5);
    const QuantizedLayer q = quantize_layer(w, direct_mask({0, 0, 0, 0, 0, 0}));
    const Matrix back = dequantize(q);
    for (std::size_t i = 0; i < 6; ++i) {
        double alpha = 0.0;
        for (std::size_t j = 0; j < 5; ++j) alpha += std::fabs(w(i, j));
        alpha /= 5.0;
        for (std::size_t j = 0; j < 5; ++j) {
            const double sign = w(i, j) >= 0.0 ? 1.0 : -1.0;
            CHECK(back(i, j) == doctest::Approx(alpha * sign).epsilon(1e-12));
        }
    }
}

TEST_CASE("doubling the column factors doubles binarized outputs") {
    Rng rng(24);
    const Matrix w = test::random_matrix(rng, 4, 3);
    QuantizedLayer q = quantize_layer(w, direct_mask({1, 0, 0, 0}));
    const Matrix base = dequantize(q);
    ScalingVectors doubled = q.scales;
    for (double& v : doubled.col_angular) v = 2.0;
    const Matrix scaled = dequantize_with(q, doubled);
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
            if (i == 0) {
                CHECK(scaled(i, j) == base(i, j));  // salient rows ignore angular factors
            } else {
                CHECK(scaled(i, j) == doctest::Approx(2.0 * base(i, j)));
            }
        }
}

TEST_CASE("dequantize matches an elementwise reference") {
    Rng rng(25);
    const Matrix w = test::random_matrix(rng, 16, 8);
    std::vector<std::uint8_t> bits(16, 0);
    for (int i = 0; i < 4; ++i) bits[rng.index(16)] = 1;
    QuantizedLayer q = quantize_layer(w, direct_mask(bits));
    for (double& v : q.scales.row_angular) v = rng.uniform(0.5, 2.0);
    for (double& v : q.scales.col_angular) v = rng.uniform(0.5, 2.0);

    const Matrix got = dequantize(q);
    // reference: walk every entry straight off the stored planes
    for (std::size_t i = 0; i < q.rows; ++i) {
        if (q.mask.is_salient(i)) {
            std::size_t s = 0;
            while (q.salient_rows[s] != i) ++s;
            for (std::size_t j = 0; j < q.cols; ++j) {
                const double expect =
                    (static_cast<double>(q.codes[s * q.cols + j]) - q.affine[s].zero_point) *
                    q.affine[s].scale;
                CHECK(got(i, j) == doctest::Approx(expect).epsilon(1e-12));
            }
        } else {
            std::size_t s = 0;
            while (q.binary_rows[s] != i) ++s;
            for (std::size_t j = 0; j < q.cols; ++j) {
                const double sign = q.signs[s * q.cols + j] ? 1.0 : -1.0;
                const double expect = q.scales.magnitude[i] * q.scales.row_angular[i] *
                                      q.scales.col_angular[j] * sign;
                CHECK(got(i, j) == doctest::Approx(expect).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("quantized branches honor their per-branch error contracts") {
    Rng rng(26);
    const Matrix w = test::random_matrix(rng, 16, 8);
    std::vector<std::uint8_t> bits(16, 0);
    for (std::size_t i = 0; i < 3; ++i) bits[i * 5] = 1;
    const QuantizedLayer q = quantize_layer(w, direct_mask(bits));
    const Matrix back = dequantize(q);
    for (std::size_t s = 0; s < q.salient_rows.size(); ++s) {
        const std::size_t i = q.salient_rows[s];
        const AffineRowParams& p = q.affine[s];
        for (std::size_t j = 0; j < 8; ++j) {
            const long unclamped = std::lround(w(i, j) / p.scale) + p.zero_point;
            if (unclamped < 0 || unclamped > 15) continue;
            CHECK(std::fabs(back(i, j) - w(i, j)) <= p.scale / 2 + 1e-9);
        }
    }
    for (std::size_t s = 0; s < q.binary_rows.size(); ++s) {
        const std::size_t i = q.binary_rows[s];
        for (std::size_t j = 0; j < 8; ++j) {
            const double sign = w(i, j) >= 0.0 ? 1.0 : -1.0;
            CHECK(back(i, j) == doctest::Approx(q.scales.magnitude[i] * sign));
        }
    }
}

TEST_CASE("a salient mask lowers layer error on heavy-tailed activations") {
    // mirrors the directional claim that keeping the loud channels at 4-bit
    // beats binarizing everything
    Rng rng(27);
    int better = 0;
    const int runs = 20;
    for (int it = 0; it < runs; ++it) {
        const std::size_t m = 32, n = 16, t = 24;
        Matrix x(t, m);
        std::vector<double> scale(m, 1.0);
        for (std::size_t h = 0; h < 3; ++h) scale[rng.index(m)] = 1000.0;
        for (std::size_t a = 0; a < t; ++a)
            for (std::size_t i = 0; i < m; ++i) x(a, i) = scale[i] * rng.normal();
        const Matrix w = test::random_matrix(rng, m, n);

        const ChannelSaliency s = channel_saliency(x);
        const ChannelMask mask = build_mask(s, 0.2);
        const Matrix wq_masked = dequantize(quantize_layer(w, mask));
        const Matrix wq_allbin = dequantize(quantize_layer(w, direct_mask(std::vector<std::uint8_t>(m, 0))));

        auto mean_err = [&](const Matrix& wq) {
            const auto [err, bound] = layer_error_and_bound(x, w, wq);
            (void)bound;
            double acc = 0.0;
            for (double v : err.values()) acc += v;
            return acc / static_cast<double>(err.size());
        };
        if (mean_err(wq_masked) <= mean_err(wq_allbin)) ++better;
    }
    CHECK(better == runs);
}
