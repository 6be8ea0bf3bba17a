#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <set>

#include "ptq/saliency.hpp"
#include "test_util.hpp"

using namespace ptq;

TEST_CASE("channel saliency mean-abs") {
    const Matrix x = Matrix::from_rows({{1, 10}, {-1, 12}});
    const ChannelSaliency s = channel_saliency(x);
    REQUIRE(s.scores.size() == 2);
    CHECK(s.scores[0] == doctest::Approx(1.0));
    CHECK(s.scores[1] == doctest::Approx(11.0));

    const Matrix zeros(3, 4);
    for (double v : channel_saliency(zeros).scores) CHECK(v == 0.0);
}

TEST_CASE("channel saliency matches the per-column oracle") {
    Rng rng(11);
    const Matrix x = test::random_matrix(rng, 64, 16);
    const ChannelSaliency s = channel_saliency(x);
    for (std::size_t i = 0; i < 16; ++i) {
        double acc = 0.0;
        for (std::size_t a = 0; a < 64; ++a) acc += std::fabs(x(a, i));
        CHECK(s.scores[i] == doctest::Approx(acc / 64.0).epsilon(1e-9));
    }

    const ChannelSaliency mx = channel_saliency(x, SaliencyKind::max_abs);
    const ChannelSaliency l2 = channel_saliency(x, SaliencyKind::l2);
    for (std::size_t i = 0; i < 16; ++i) {
        double worst = 0.0, sq = 0.0;
        for (std::size_t a = 0; a < 64; ++a) {
            worst = std::max(worst, std::fabs(x(a, i)));
            sq += x(a, i) * x(a, i);
        }
        CHECK(mx.scores[i] == doctest::Approx(worst));
        CHECK(l2.scores[i] == doctest::Approx(std::sqrt(sq)).epsilon(1e-9));
    }
}

TEST_CASE("build_mask basics") {
    ChannelSaliency s;
    s.scores = {1, 11};
    const ChannelMask m = build_mask(s, 0.5);
    CHECK(m.salient == 1);
    CHECK(m.bits == std::vector<std::uint8_t>{0, 1});

    s.scores = {5, 5, 5, 5};
    const ChannelMask ties = build_mask(s, 0.5);
    CHECK(ties.bits == std::vector<std::uint8_t>{1, 1, 0, 0});

    CHECK_THROWS_AS(build_mask(s, 0.0), Error);
    CHECK_THROWS_AS(build_mask(s, 1.0), Error);

    // k clamps away from the degenerate all/none masks
    CHECK(build_mask(s, 0.01).salient == 1);
    CHECK(build_mask(s, 0.99).salient == 3);
}

TEST_CASE("build_mask agrees with a full-sort oracle") {
    Rng rng(12);
    ChannelSaliency s;
    for (int i = 0; i < 100; ++i) s.scores.push_back(rng.uniform(0, 1));
    const ChannelMask m = build_mask(s, 0.2);
    CHECK(m.salient == 20);

    std::vector<std::size_t> order(100);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return s.scores[a] > s.scores[b]; });
    std::set<std::size_t> expected(order.begin(), order.begin() + 20);
    for (std::size_t i = 0; i < 100; ++i) CHECK(m.is_salient(i) == (expected.count(i) > 0));

    std::size_t pop = 0;
    for (auto b : m.bits) pop += b;
    CHECK(pop == m.salient);
}

TEST_CASE("mask selection is invariant to positive rescaling") {
    Rng rng(13);
    ChannelSaliency s;
    for (int i = 0; i < 40; ++i) s.scores.push_back(rng.uniform(0, 10));
    const ChannelMask base = build_mask(s, 0.3);
    for (double c : {1e-6, 0.5, 3.0, 1e8}) {
        ChannelSaliency scaled = s;
        for (double& v : scaled.scores) v *= c;
        CHECK(build_mask(scaled, 0.3).bits == base.bits);
    }
}

TEST_CASE("a dominant channel is always selected") {
    Rng rng(14);
    for (int it = 0; it < 20; ++it) {
        const std::size_t m = 8 + rng.index(56);
        const std::size_t hot = rng.index(m);
        Matrix x(16, m);
        for (std::size_t a = 0; a < 16; ++a)
            for (std::size_t i = 0; i < m; ++i)
                x(a, i) = (i == hot ? 1000.0 : 1.0) * rng.normal();
        const ChannelSaliency s = channel_saliency(x);
        const ChannelMask mask = build_mask(s, std::max(0.02, 1.0 / static_cast<double>(m)));
        CHECK(mask.is_salient(hot));
    }
}

TEST_CASE("weight saliency map") {
    const Matrix w = Matrix::from_rows({{1, 0}, {0, 2}});
    const auto map = weight_saliency_map(w, 0.25);
    CHECK(map == std::vector<std::uint8_t>{0, 0, 0, 1});

    const Matrix flat = Matrix::from_rows({{3, 3}, {3, 3}});
    const auto ties = weight_saliency_map(flat, 0.6);  // ceil(2.4) = 3, lowest flat indices
    CHECK(ties == std::vector<std::uint8_t>{1, 1, 1, 0});
}

TEST_CASE("weight saliency map agrees with a full-sort oracle") {
    Rng rng(15);
    const Matrix w = test::random_matrix(rng, 32, 32);
    const auto map = weight_saliency_map(w, 0.1);

    std::vector<std::size_t> order(w.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return std::fabs(w.values()[a]) > std::fabs(w.values()[b]);
    });
    const auto k = static_cast<std::size_t>(std::ceil(0.1 * 32 * 32));
    std::set<std::size_t> expected(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
    std::size_t marked = 0;
    for (std::size_t i = 0; i < map.size(); ++i) {
        if (map[i]) ++marked;
        CHECK(static_cast<bool>(map[i]) == (expected.count(i) > 0));
    }
    CHECK(marked == k);
}

TEST_CASE("layer error and bound") {
    const Matrix x = Matrix::from_rows({{2}});
    const Matrix w = Matrix::from_rows({{1}});
    const Matrix wq = Matrix::from_rows({{0.5}});
    const auto [err, bound] = layer_error_and_bound(x, w, wq);
    CHECK(err(0, 0) == doctest::Approx(1.0));
    CHECK(bound(0, 0) == doctest::Approx(1.0));

    // sign cancellation sits strictly below the bound
    const Matrix x2 = Matrix::from_rows({{1, 1}});
    const Matrix w2 = Matrix::from_rows({{0.0}, {0.0}});
    const Matrix wq2 = Matrix::from_rows({{0.5}, {-0.5}});
    const auto [err2, bound2] = layer_error_and_bound(x2, w2, wq2);
    CHECK(err2(0, 0) == doctest::Approx(0.0));
    CHECK(bound2(0, 0) == doctest::Approx(1.0));

    CHECK_THROWS_AS(layer_error_and_bound(Matrix(1, 3), w, wq), Error);
}

TEST_CASE("the bound dominates the error on random instances") {
    Rng rng(16);
    for (int it = 0; it < 200; ++it) {
        const std::size_t t = 1 + rng.index(6);
        const std::size_t m = 1 + rng.index(10);
        const std::size_t n = 1 + rng.index(8);
        const Matrix x = test::random_matrix(rng, t, m, 2.0);
        const Matrix w = test::random_matrix(rng, m, n);
        const Matrix wq = test::random_matrix(rng, m, n);
        const auto [err, bound] = layer_error_and_bound(x, w, wq);
        for (std::size_t i = 0; i < err.size(); ++i)
            CHECK(err.values()[i] <= bound.values()[i] + 1e-9);
    }
}
