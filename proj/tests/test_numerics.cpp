#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "ptq/numerics.hpp"
#include "ptq/ptqf.hpp"
#include "test_util.hpp"

using namespace ptq;
using test::matmul_oracle;

TEST_CASE("matmul small cases") {
    const Matrix x = Matrix::from_rows({{1, 2}});
    const Matrix w = Matrix::from_rows({{3}, {4}});
    const Matrix y = matmul(x, w);
    CHECK(y.rows() == 1);
    CHECK(y.cols() == 1);
    CHECK(y(0, 0) == 11.0);

    const Matrix id = Matrix::from_rows({{1, 0}, {0, 1}});
    const Matrix any = Matrix::from_rows({{5, -1, 2}, {0.5, 3, -7}});
    CHECK(matmul(id, any) == any);
}

TEST_CASE("matmul matches the naive oracle exactly") {
    Rng rng(101);
    const Matrix x = test::random_matrix(rng, 7, 5);
    const Matrix w = test::random_matrix(rng, 5, 3);
    const Matrix y = matmul(x, w);
    const Matrix ref = matmul_oracle(x, w);
    // identical accumulation order over the shared dimension
    CHECK(y == ref);

    Matrix xi(4, 6), wi(6, 2);
    for (double& v : xi.values()) v = std::floor(rng.uniform(-5, 5));
    for (double& v : wi.values()) v = std::floor(rng.uniform(-5, 5));
    CHECK(matmul(xi, wi) == matmul_oracle(xi, wi));
}

TEST_CASE("parallel and serial kernels agree bitwise") {
    Rng rng(7);
    for (int it = 0; it < 5; ++it) {
        const Matrix x = test::random_matrix(rng, 1 + rng.index(16), 1 + rng.index(24));
        const Matrix w = test::random_matrix(rng, x.cols(), 1 + rng.index(12));
        CHECK(matmul(x, w) == matmul_serial(x, w));
    }
}

TEST_CASE("matmul rejects mismatched shapes") {
    const Matrix x(2, 3);
    const Matrix w(4, 2);
    CHECK_THROWS_AS(matmul(x, w), Error);
}

TEST_CASE("transposed products match the oracle") {
    Rng rng(55);
    const Matrix a = test::random_matrix(rng, 6, 4);
    const Matrix b = test::random_matrix(rng, 6, 5);
    const Matrix atb = matmul_at(a, b);  // 4x5
    Matrix at(4, 6);
    for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 4; ++j) at(j, i) = a(i, j);
    CHECK(test::max_abs_diff(atb, matmul_oracle(at, b)) < 1e-12);

    const Matrix c = test::random_matrix(rng, 3, 5);
    const Matrix d = test::random_matrix(rng, 7, 5);
    const Matrix cdt = matmul_bt(c, d);  // 3x7
    Matrix dt(5, 7);
    for (std::size_t i = 0; i < 7; ++i)
        for (std::size_t j = 0; j < 5; ++j) dt(j, i) = d(i, j);
    CHECK(test::max_abs_diff(cdt, matmul_oracle(c, dt)) < 1e-12);
}

TEST_CASE("cosine similarity") {
    CHECK(cosine_similarity({1, 2, 3}, {1, 2, 3}) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(cosine_similarity({1, 0}, {0, 1}) == doctest::Approx(0.0));
    CHECK(cosine_similarity({1, 1}, {1, 0}) == doctest::Approx(0.7071067811865475).epsilon(1e-9));
    CHECK_THROWS_AS(cosine_similarity({0, 0}, {1, 0}), Error);
    CHECK_THROWS_AS(cosine_similarity({1, 0}, {1, 0, 0}), Error);
}

TEST_CASE("cosine of positively scaled copies is one") {
    Rng rng(31);
    for (int it = 0; it < 50; ++it) {
        const Vector f = test::random_vector(rng, 2 + rng.index(40));
        if (norm2(f) == 0.0) continue;
        const double c = rng.uniform(1e-3, 1e3);
        Vector g = f;
        for (double& v : g) v *= c;
        CHECK(cosine_similarity(f, g) == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("l2 distance") {
    CHECK(l2_distance({1, 2, 3}, {1, 2, 3}) == 0.0);
    CHECK(l2_distance({3, 0}, {0, 4}) == doctest::Approx(5.0));
    CHECK_THROWS_AS(l2_distance({1}, {1, 2}), Error);

    Rng rng(77);
    const Vector a = test::random_vector(rng, 20);
    const Vector b = test::random_vector(rng, 20);
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    CHECK(l2_distance(a, b) == doctest::Approx(std::sqrt(acc)).epsilon(1e-12));
}

TEST_CASE("l2 distance satisfies the triangle inequality") {
    Rng rng(78);
    for (int it = 0; it < 200; ++it) {
        const std::size_t n = 1 + rng.index(16);
        const Vector a = test::random_vector(rng, n);
        const Vector b = test::random_vector(rng, n);
        const Vector c = test::random_vector(rng, n);
        CHECK(l2_distance(a, c) <= l2_distance(a, b) + l2_distance(b, c) + 1e-9);
    }
}

TEST_CASE("ptqf roundtrip is bit-exact") {
    Rng rng(900);
    PtqfTensor t;
    t.dims = {3, 4, 2};
    for (std::size_t i = 0; i < 24; ++i) t.data.push_back(static_cast<float>(rng.normal()));

    const auto bytes = ptqf_encode(t);
    const PtqfTensor back = ptqf_decode(bytes);
    CHECK(back.dims == t.dims);
    CHECK(back.data == t.data);
    CHECK(ptqf_encode(back) == bytes);
}

TEST_CASE("ptqf file io") {
    const auto dir = std::filesystem::temp_directory_path() / "ptqf_test";
    std::filesystem::create_directories(dir);
    const std::string path = (dir / "t.ptqf").string();

    Rng rng(901);
    const Matrix m = test::random_matrix(rng, 5, 7);
    ptqf_write_matrix(path, m);
    const Matrix back = ptqf_read_matrix(path);
    CHECK(back.rows() == 5);
    CHECK(back.cols() == 7);
    // exact at f32 resolution
    for (std::size_t i = 0; i < m.size(); ++i)
        CHECK(back.values()[i] == static_cast<double>(static_cast<float>(m.values()[i])));

    ptqf_write_matrix(path, back);
    const Matrix again = ptqf_read_matrix(path);
    CHECK(again == back);
}

TEST_CASE("ptqf decode rejects malformed input") {
    PtqfTensor t;
    t.dims = {2};
    t.data = {1.0f, 2.0f};
    auto bytes = ptqf_encode(t);

    auto bad_magic = bytes;
    bad_magic[0] = 'X';
    CHECK_THROWS_WITH_AS(ptqf_decode(bad_magic), doctest::Contains("bad magic"), Error);

    auto truncated = bytes;
    truncated.pop_back();
    CHECK_THROWS_AS(ptqf_decode(truncated), Error);

    auto bad_type = bytes;
    bad_type[8] = 9;
    CHECK_THROWS_AS(ptqf_decode(bad_type), Error);

    try {
        ptqf_decode(bad_magic);
        CHECK(false);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::data);
    }
}
