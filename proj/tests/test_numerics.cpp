#include <cmath>
#include <numbers>

#include "doctest.h"
#include "oracles.hpp"
#include "qmerge/numerics.hpp"

using namespace qmerge;

TEST_CASE("softmax_rows closed-form rows") {
    const Matrix half = softmax_rows(Matrix::from_rows({{0.0, 0.0}}));
    CHECK(half(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(half(0, 1) == doctest::Approx(0.5).epsilon(1e-15));

    const Matrix logs = softmax_rows(Matrix::from_rows({{std::log(1.0), std::log(2.0), std::log(3.0)}}));
    CHECK(std::abs(logs(0, 0) - 1.0 / 6.0) < 1e-15);
    CHECK(std::abs(logs(0, 1) - 2.0 / 6.0) < 1e-15);
    CHECK(std::abs(logs(0, 2) - 3.0 / 6.0) < 1e-15);
}

TEST_CASE("softmax_rows does not overflow on a large spread") {
    const std::vector<double> row{1000.0, 0.0};
    const Matrix out = softmax_rows(Matrix::from_rows({row}));
    const auto ref = oracle::softmax(row);
    CHECK(std::isfinite(out(0, 0)));
    CHECK(std::abs(out(0, 0) - static_cast<double>(ref[0])) < 1e-15);
    CHECK(std::abs(out(0, 1) - static_cast<double>(ref[1])) < 1e-300);
    CHECK(out(0, 0) == 1.0);
}

TEST_CASE("softmax_rows rejects an empty matrix") {
    CHECK_THROWS_AS(softmax_rows(Matrix()), Error);
    try {
        softmax_rows(Matrix(0, 3));
    } catch (const Error& e) {
        CHECK(e.code() == Errc::invalid_shape);
    }
}

TEST_CASE("softmax rows sum to one for random rows with spread 1e3") {
    RngState rng(11);
    for (int trial = 0; trial < 200; ++trial) {
        Matrix m(3, 17);
        for (double& v : m.data()) v = (rng.uniform() - 0.5) * 2e3;
        const Matrix p = softmax_rows(m);
        for (std::size_t r = 0; r < p.rows(); ++r) {
            double total = 0.0;
            for (double v : p.row(r)) {
                CHECK(v >= 0.0);
                total += v;
            }
            REQUIRE(std::abs(total - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("row_entropy examples") {
    const std::vector<double> uniform{0.25, 0.25, 0.25, 0.25};
    CHECK(row_entropy(uniform) == doctest::Approx(1.386294361119891).epsilon(1e-14));
    const std::vector<double> onehot{1.0, 0.0, 0.0};
    CHECK(row_entropy(onehot) == 0.0);
    const std::vector<double> mixed{0.5, 0.25, 0.25};
    CHECK(row_entropy(mixed) == doctest::Approx(1.5 * std::log(2.0)).epsilon(1e-14));
    CHECK(row_entropy(mixed) == doctest::Approx(1.039721).epsilon(1e-6));
}

TEST_CASE("row_entropy rejects negative entries") {
    const std::vector<double> bad{1.2, -0.2};
    try {
        row_entropy(bad);
        FAIL("expected InvalidProbability");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::invalid_probability);
    }
    const std::vector<double> short_row{0.5, 0.4};
    CHECK_THROWS_AS(row_entropy(short_row), Error);
}

TEST_CASE("row_entropy stays within [0, ln N]; uniform attains the maximum") {
    RngState rng(5);
    for (int trial = 0; trial < 300; ++trial) {
        const std::size_t n = 1 + rng.next_u64() % 12;
        Matrix m(1, n);
        for (double& v : m.data()) v = 4.0 * rng.normal();
        const Matrix p = softmax_rows(m);
        const double h = row_entropy(p.row(0));
        CHECK(h >= 0.0);
        CHECK(h <= std::log(static_cast<double>(n)) + 1e-12);
    }
    std::vector<double> u(7, 1.0 / 7.0);
    CHECK(row_entropy(u) == doctest::Approx(std::log(7.0)).epsilon(1e-14));
}

TEST_CASE("attention_from_embeddings small cases") {
    const Matrix single = attention_from_embeddings(Matrix::from_rows({{0.3, -1.2}}), 2);
    CHECK(single.rows() == 1);
    CHECK(single(0, 0) == 1.0);

    const Matrix twins = attention_from_embeddings(Matrix::from_rows({{1.0, 2.0}, {1.0, 2.0}}), 2);
    for (std::size_t r = 0; r < 2; ++r)
        for (std::size_t c = 0; c < 2; ++c) CHECK(twins(r, c) == doctest::Approx(0.5).epsilon(1e-15));

    CHECK_THROWS_AS(attention_from_embeddings(Matrix(0, 2), 2), Error);
}

TEST_CASE("attention_from_embeddings matches the loop oracle on a seeded 3x2 input") {
    const auto rows = oracle::random_rows(3, 2, 42);
    const Matrix a = attention_from_embeddings(Matrix::from_rows(rows), 2);
    const auto ref = oracle::attention(rows);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(a(i, j) - static_cast<double>(ref[i][j])) < 1e-14);
}

TEST_CASE("softmax is invariant to a per-row constant shift") {
    RngState rng(9);
    Matrix x(6, 4);
    for (double& v : x.data()) v = rng.normal();
    Matrix scores = matmul_nt(x, x);
    for (double& v : scores.data()) v /= 2.0;
    Matrix shifted = scores;
    for (std::size_t r = 0; r < shifted.rows(); ++r)
        for (double& v : shifted.row(r)) v += 10.0 * static_cast<double>(r) - 7.5;
    const Matrix a = softmax_rows(scores);
    const Matrix b = softmax_rows(shifted);
    const Matrix direct = attention_from_embeddings(x, 4);
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(std::abs(a.data()[i] - b.data()[i]) < 1e-13);
        CHECK(std::abs(a.data()[i] - direct.data()[i]) < 1e-13);
    }
}

TEST_CASE("cosine_similarity") {
    const std::vector<double> a{0.4, -2.0, 1.0};
    CHECK(cosine_similarity(a, a).value == doctest::Approx(1.0).epsilon(1e-15));
    const std::vector<double> ex{1.0, 0.0}, ey{0.0, 1.0}, diag{1.0, 1.0};
    CHECK(cosine_similarity(ex, ey).value == 0.0);
    CHECK(cosine_similarity(diag, ex).value == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-15));
    CHECK(cosine_similarity(diag, ex).value == doctest::Approx(0.70711).epsilon(1e-5));

    const std::vector<double> zero{0.0, 0.0};
    const auto both = cosine_similarity(zero, zero);
    CHECK(both.value == 0.0);
    CHECK(both.degenerate);
    CHECK_FALSE(cosine_similarity(zero, ex).degenerate);
}

TEST_CASE("gumbel transform") {
    CHECK(gumbel_from_uniform(0.5) == doctest::Approx(-std::log(std::log(2.0))).epsilon(1e-15));
    CHECK(gumbel_from_uniform(0.5) == doctest::Approx(0.366513).epsilon(1e-6));
    CHECK(std::abs(gumbel_from_uniform(1.0 / std::numbers::e)) < 1e-15);
    CHECK(std::isfinite(gumbel_from_uniform(0.0)));
    CHECK(std::isfinite(gumbel_from_uniform(1.0)));
}

TEST_CASE("gumbel draws average to the Euler-Mascheroni constant") {
    RngState rng(2024);
    double total = 0.0;
    const int draws = 100000;
    for (int i = 0; i < draws; ++i) total += gumbel_draw(rng);
    CHECK(std::abs(total / draws - std::numbers::egamma) < 0.02);
}

TEST_CASE("RngState streams are reproducible and distinct") {
    RngState a(77), b(77);
    for (int i = 0; i < 100; ++i) CHECK(gumbel_draw(a) == gumbel_draw(b));

    RngState base(77);
    RngState s1 = base.split(1), s1b = base.split(1), s2 = base.split(2);
    bool differs = false;
    for (int i = 0; i < 16; ++i) {
        const auto x = s1.next_u64();
        CHECK(x == s1b.next_u64());
        differs = differs || x != s2.next_u64();
    }
    CHECK(differs);
}

TEST_CASE("Matrix constructors reject non-finite data") {
    CHECK_THROWS_AS(Matrix(1, 2, std::vector<double>{1.0, std::nan("")}), Error);
    CHECK_THROWS_AS(Matrix(1, 2, std::vector<double>{1.0}), Error);
    CHECK_THROWS_AS(Matrix::from_rows({{1.0, 2.0}, {3.0}}), Error);
}
