#include <cmath>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "oracles.hpp"
#include "qmerge/ar_prior.hpp"

using namespace qmerge;

namespace {

PriorConfig tiny(std::uint64_t seed = 0) {
    PriorConfig c;
    c.layers = 1;
    c.model_dim = 8;
    c.heads = 2;
    c.context = 16;
    c.seed = seed;
    return c;
}

Matrix seq(std::size_t k, std::size_t d, std::uint64_t seed) { return Matrix::from_rows(oracle::random_rows(k, d, seed)); }

Matrix constant_seq(std::size_t k, const std::vector<double>& token) {
    Matrix m(k, token.size());
    for (std::size_t t = 0; t < k; ++t)
        for (std::size_t j = 0; j < token.size(); ++j) m(t, j) = token[j];
    return m;
}

Matrix prefix(const Matrix& s, std::size_t len) {
    Matrix out(len, s.cols());
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t j = 0; j < s.cols(); ++j) out(t, j) = s(t, j);
    return out;
}

/// Sum of squared errors from one predict_next call per prefix.
double looped_loss(const PriorModel& m, const Matrix& s) {
    double total = 0.0;
    for (std::size_t t = 1; t < s.rows(); ++t) {
        const auto pred = predict_next(m, prefix(s, t));
        for (std::size_t j = 0; j < s.cols(); ++j) total += (pred[j] - s(t, j)) * (pred[j] - s(t, j));
    }
    return total;
}

/// Skip-connection-only model: zero head, so the prediction equals the last input token.
PriorModel identity_model(std::size_t d, Direction dir) {
    PriorConfig c = tiny();
    c.residual_input = true;
    PriorModel m(c, d, dir);
    m.zero_output_head();
    return m;
}

std::filesystem::path temp_path(const std::string& name) {
    return std::filesystem::temp_directory_path() / ("qmerge_test_" + name);
}

}  // namespace

TEST_CASE("PriorConfig validation") {
    PriorConfig c = tiny();
    CHECK_NOTHROW(c.validate());
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny();
    c.context = 0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = tiny();
    c.learn_rate = -1.0;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("zero output head predicts the zero vector") {
    PriorModel m(tiny(), 3, Direction::forward);
    m.zero_output_head();
    const auto p = predict_next(m, seq(4, 3, 1));
    CHECK(p == std::vector<double>{0.0, 0.0, 0.0});
}

TEST_CASE("predict_next rejects empty and over-long prefixes") {
    PriorModel m(tiny(), 2, Direction::forward);
    try {
        (void)predict_next(m, Matrix(0, 2));
        FAIL("expected InvalidPrefix");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::invalid_prefix);
    }
    CHECK_THROWS_AS(predict_next(m, seq(17, 2, 1)), Error);
    CHECK_THROWS_AS(predict_next(m, seq(3, 5, 1)), Error);
}

TEST_CASE("causality: later tokens never change earlier outputs") {
    PriorModel m(tiny(5), 3, Direction::forward);
    const Matrix one = seq(1, 3, 2);
    Matrix two = constant_seq(2, {one(0, 0), one(0, 1), one(0, 2)});
    const Matrix a = m.predict_all(one);
    const Matrix b = m.predict_all(two);
    for (std::size_t j = 0; j < 3; ++j) CHECK(a(0, j) == b(0, j));

    const Matrix base = seq(6, 3, 3);
    const Matrix out = m.predict_all(base);
    for (std::size_t t = 0; t < 6; ++t) {
        Matrix changed = base;
        for (std::size_t r = t + 1; r < 6; ++r)
            for (std::size_t j = 0; j < 3; ++j) changed(r, j) += 10.0 * static_cast<double>(r + j + 1);
        const Matrix o = m.predict_all(changed);
        for (std::size_t r = 0; r <= t; ++r)
            for (std::size_t j = 0; j < 3; ++j) CHECK(o(r, j) == out(r, j));
    }
}

TEST_CASE("prediction is a deterministic function of the seed") {
    const Matrix p = seq(5, 4, 9);
    const PriorModel a(tiny(42), 4, Direction::forward);
    const PriorModel b(tiny(42), 4, Direction::forward);
    const PriorModel c(tiny(43), 4, Direction::forward);
    CHECK(predict_next(a, p) == predict_next(b, p));
    CHECK(predict_next(a, p) != predict_next(c, p));
    CHECK(a.parameter_count() == b.parameter_count());
    const PriorModel back(tiny(42), 4, Direction::backward);
    CHECK(back.parameters() != a.parameters());
    for (double v : a.predict_all(p).data()) CHECK(std::isfinite(v));
}

TEST_CASE("loss_forward") {
    const PriorModel m(tiny(1), 3, Direction::forward);
    CHECK(loss_forward(m, seq(1, 3, 4)) == 0.0);

    const auto id = identity_model(3, Direction::forward);
    CHECK(loss_forward(id, constant_seq(5, {0.3, -1.2, 2.0})) == 0.0);

    const Matrix s = seq(3, 3, 5);
    CHECK(loss_forward(m, s) == doctest::Approx(looped_loss(m, s)).epsilon(1e-12));
    CHECK(loss_forward(m, s) > 0.0);
}

TEST_CASE("loss_backward") {
    const PriorModel fwd(tiny(2), 2, Direction::forward);
    const PriorModel bwd(tiny(2), 2, Direction::backward);
    CHECK(loss_backward(bwd, seq(1, 2, 1)) == 0.0);

    const Matrix s = seq(3, 2, 6);
    CHECK(loss_backward(bwd, s) == doctest::Approx(looped_loss(bwd, reversed_rows(s))).epsilon(1e-12));

    Matrix pal = seq(5, 2, 7);
    for (std::size_t t = 0; t < 2; ++t)
        for (std::size_t j = 0; j < 2; ++j) pal(4 - t, j) = pal(t, j);
    const PriorModel shared = fwd.with_direction(Direction::backward);
    CHECK(loss_backward(shared, pal) == loss_forward(fwd, pal));
}

TEST_CASE("loss_ar: additivity and direction checks") {
    const Matrix zeros(2, 3);
    auto fwd = identity_model(3, Direction::forward);
    auto bwd = identity_model(3, Direction::backward);
    CHECK(loss_ar(fwd, bwd, zeros) == 0.0);

    fwd.parameters().back() = Matrix::from_rows({{1.0, 0.5, 0.5}});
    bwd.parameters().back() = Matrix::from_rows({{1.5, 0.5, 0.0}});
    CHECK(loss_forward(fwd, zeros) == 1.5);
    CHECK(loss_backward(bwd, zeros) == 2.5);
    CHECK(loss_ar(fwd, bwd, zeros) == 4.0);

    const PriorModel f(tiny(3), 2, Direction::forward);
    const PriorModel b(tiny(3), 2, Direction::backward);
    const Matrix s = seq(4, 2, 8);
    CHECK(std::abs(loss_ar(f, b, s) - (loss_forward(f, s) + loss_backward(b, s))) < 1e-12);

    try {
        (void)loss_ar(b, f, s);
        FAIL("expected InvalidDirection");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::invalid_direction);
    }
    CHECK_THROWS_AS(loss_ar(f, f, s), Error);
    PriorConfig other = tiny(3);
    other.model_dim = 4;
    CHECK_THROWS_AS(loss_ar(f, PriorModel(other, 2, Direction::backward), s), Error);
}

TEST_CASE("loss_forward is zero iff predictions hit every target") {
    auto id = identity_model(2, Direction::forward);
    Matrix s = constant_seq(4, {1.0, 2.0});
    CHECK(loss_forward(id, s) == 0.0);
    s(3, 1) += 0.5;
    CHECK(loss_forward(id, s) == 0.25);
}

TEST_CASE("directional_loss_and_grad follows the direction tag") {
    const PriorModel f(tiny(4), 2, Direction::forward);
    const PriorModel b(tiny(4), 2, Direction::backward);
    const Matrix s = seq(4, 2, 10);
    const auto gf = directional_loss_and_grad(f, s);
    const auto gb = directional_loss_and_grad(b, s);
    CHECK(gf.loss == doctest::Approx(loss_forward(f, s)).epsilon(1e-14));
    CHECK(gb.loss == doctest::Approx(loss_backward(b, s)).epsilon(1e-14));
    CHECK(gf.grads.size() == f.parameters().size());
    for (std::size_t i = 0; i < gf.grads.size(); ++i) {
        CHECK(gf.grads[i].rows() == f.parameters()[i].rows());
        CHECK(gf.grads[i].cols() == f.parameters()[i].cols());
    }
}

TEST_CASE("gradient_check: linear-only model on one token") {
    PriorConfig c = tiny(6);
    c.layers = 0;
    const PriorModel m(c, 3, Direction::forward);
    CHECK(gradient_check(m, seq(1, 3, 11), 1e-5) < 1e-8);
}

TEST_CASE("linear-only model gradients match the closed form") {
    // Without attention blocks the prediction at t is h_t W_out + b_out with
    // h_t = x_t W_in + b_in + pos_t, so the loss is an explicit quadratic.
    PriorConfig c = tiny(6);
    c.layers = 0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        c.seed = seed;
        const PriorModel m(c, 3, Direction::forward);
        const Matrix s = seq(4, 3, 60 + seed);
        const auto& p = m.parameters();
        const Matrix& w_in = p[0];
        const Matrix& w_out = p[3];
        const std::size_t md = c.model_dim;

        std::vector<std::vector<double>> h(3, std::vector<double>(md));
        std::vector<std::vector<double>> r(3, std::vector<double>(3));
        for (std::size_t t = 0; t < 3; ++t) {
            for (std::size_t a = 0; a < md; ++a) {
                double v = p[1](0, a) + p[2](t, a);
                for (std::size_t j = 0; j < 3; ++j) v += s(t, j) * w_in(j, a);
                h[t][a] = v;
            }
            for (std::size_t j = 0; j < 3; ++j) {
                double out = p[4](0, j);
                for (std::size_t a = 0; a < md; ++a) out += h[t][a] * w_out(a, j);
                r[t][j] = out - s(t + 1, j);
            }
        }
        const auto g = directional_loss_and_grad(m, s);
        auto close = [](double a, double b) { return std::abs(a - b) <= 1e-10 * std::max(1.0, std::abs(b)); };
        for (std::size_t j = 0; j < 3; ++j) {
            double gb = 0.0;
            for (std::size_t t = 0; t < 3; ++t) gb += 2.0 * r[t][j];
            CHECK(close(g.grads[4](0, j), gb));
            for (std::size_t a = 0; a < md; ++a) {
                double gw = 0.0;
                for (std::size_t t = 0; t < 3; ++t) gw += 2.0 * h[t][a] * r[t][j];
                CHECK(close(g.grads[3](a, j), gw));
            }
        }
        for (std::size_t t = 0; t < 3; ++t)
            for (std::size_t a = 0; a < md; ++a) {
                double gp = 0.0;
                for (std::size_t j = 0; j < 3; ++j) gp += 2.0 * r[t][j] * w_out(a, j);
                CHECK(close(g.grads[2](t, a), gp));
            }
        // The last position predicts nothing, so its embedding gets no gradient.
        for (std::size_t a = 0; a < md; ++a) CHECK(g.grads[2](3, a) == 0.0);
    }
}

TEST_CASE("gradient_check: full tiny model in both directions") {
    for (std::uint64_t seed : {0u, 1u, 2u}) {
        const PriorModel f(tiny(seed), 3, Direction::forward);
        const PriorModel b(tiny(seed), 3, Direction::backward);
        const Matrix s = seq(4, 3, 20 + seed);
        CHECK(gradient_check(f, s, 1e-5, 50, seed) < 1e-4);
        CHECK(gradient_check(b, s, 1e-5, 50, seed) < 1e-4);
    }
    PriorConfig deep = tiny(9);
    deep.layers = 2;
    deep.residual_input = true;
    CHECK(gradient_check(PriorModel(deep, 2, Direction::forward), seq(5, 2, 30), 1e-5, 80) < 1e-4);
}

TEST_CASE("gradient_check: zero sequence with zero parameters") {
    PriorModel m(tiny(), 2, Direction::forward);
    for (auto& p : m.parameters()) p = Matrix(p.rows(), p.cols());
    CHECK(gradient_check(m, Matrix(3, 2), 1e-5) == 0.0);
    const auto g = directional_loss_and_grad(m, Matrix(3, 2));
    for (const auto& t : g.grads)
        for (double v : t.data()) CHECK(v == 0.0);
}

TEST_CASE("gradient_check rejects steps outside [1e-6, 1e-4]") {
    const PriorModel m(tiny(), 2, Direction::forward);
    CHECK_THROWS_AS(gradient_check(m, seq(2, 2, 1), 1e-3), Error);
    CHECK_THROWS_AS(gradient_check(m, seq(2, 2, 1), 1e-7), Error);
}

TEST_CASE("train: zero learning rate leaves parameters untouched") {
    PriorConfig c = tiny(1);
    c.learn_rate = 0.0;
    c.epochs = 3;
    PriorModel f(c, 2, Direction::forward), b(c, 2, Direction::backward);
    const auto before_f = f.parameters();
    const auto before_b = b.parameters();
    const auto trace = train(f, b, {seq(4, 2, 1), seq(3, 2, 2)}, c);
    REQUIRE(trace.loss.size() == 4);
    for (double l : trace.loss) CHECK(l == trace.loss[0]);
    CHECK(f.parameters() == before_f);
    CHECK(b.parameters() == before_b);
}

TEST_CASE("train: single constant sequence decreases monotonically at the default rate") {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        PriorConfig c;
        c.seed = seed;
        c.epochs = 10;
        RngState rng(seed + 50);
        std::vector<double> token(8);
        for (auto& v : token) v = rng.normal();
        PriorModel f(c, 8, Direction::forward), b(c, 8, Direction::backward);
        const auto trace = train(f, b, {constant_seq(6, token)}, c);
        for (std::size_t e = 1; e <= 10; ++e) CHECK(trace.loss[e] < trace.loss[e - 1]);
    }
}

TEST_CASE("train: deterministic under a fixed seed") {
    PriorConfig c = tiny(12);
    c.epochs = 5;
    c.momentum = 0.5;
    const std::vector<Matrix> corpus{seq(4, 2, 1), seq(5, 2, 2), seq(3, 2, 3)};
    PriorModel f1(c, 2, Direction::forward), b1(c, 2, Direction::backward);
    PriorModel f2(c, 2, Direction::forward), b2(c, 2, Direction::backward);
    const auto t1 = train(f1, b1, corpus, c);
    const auto t2 = train(f2, b2, corpus, c);
    CHECK(t1.loss == t2.loss);
    CHECK(f1.parameters() == f2.parameters());
    CHECK(b1.parameters() == b2.parameters());
}

TEST_CASE("train: divergence and bad corpora") {
    PriorConfig c = tiny(1);
    c.learn_rate = 1e6;
    c.epochs = 20;
    PriorModel f(c, 2, Direction::forward), b(c, 2, Direction::backward);
    try {
        (void)train(f, b, {seq(6, 2, 1)}, c);
        FAIL("expected DivergedTraining");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::diverged_training);
        CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
    PriorModel f2(tiny(), 2, Direction::forward), b2(tiny(), 2, Direction::backward);
    CHECK_THROWS_AS(train(f2, b2, {}, tiny()), Error);
    CHECK_THROWS_AS(train(f2, b2, {seq(3, 4, 1)}, tiny()), Error);
}

TEST_CASE("lipschitz_divergence_probe") {
    const PriorModel m(tiny(7), 3, Direction::forward);
    const Matrix full = seq(6, 3, 40);
    const auto same = lipschitz_divergence_probe(m, full, full);
    CHECK(same.output_gap == 0.0);
    CHECK(same.input_gap == 0.0);
    CHECK(same.ratio == 0.0);
    CHECK(same.identical);

    Matrix distorted = full;
    for (std::size_t i = 0; i < distorted.size(); ++i) distorted.data()[i] += 0.01 * static_cast<double>(i % 5);
    const auto id = identity_model(3, Direction::forward);
    const auto unit = lipschitz_divergence_probe(id, full, distorted);
    CHECK(unit.ratio == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_FALSE(unit.identical);

    const auto r1 = lipschitz_divergence_probe(m, full, distorted);
    const auto r2 = lipschitz_divergence_probe(m, full, distorted);
    CHECK(r1.ratio == r2.ratio);
    CHECK(std::isfinite(r1.ratio));
    CHECK(r1.ratio >= 0.0);
    CHECK_THROWS_AS(lipschitz_divergence_probe(m, full, seq(5, 3, 1)), Error);
}

TEST_CASE("checkpoint round trip") {
    PriorConfig c = tiny(77);
    c.momentum = 0.25;
    c.residual_input = true;
    const PriorModel m(c, 3, Direction::backward);
    const auto path = temp_path("ckpt.qmp");
    save_checkpoint(m, path);
    const PriorModel r = load_checkpoint(path);
    CHECK(r.direction() == Direction::backward);
    CHECK(r.token_dim() == 3);
    CHECK(r.parameters() == m.parameters());
    CHECK(r.config().model_dim == c.model_dim);
    CHECK(r.config().residual_input);
    CHECK(r.config().momentum == 0.25);
    CHECK(r.config().seed == 77);
    const Matrix s = seq(4, 3, 2);
    CHECK(r.predict_all(s) == m.predict_all(s));
    std::filesystem::remove(path);
}

TEST_CASE("checkpoint corruption is reported") {
    const PriorModel m(tiny(), 2, Direction::forward);
    const auto path = temp_path("bad.qmp");
    save_checkpoint(m, path);
    const auto size = std::filesystem::file_size(path);

    std::filesystem::resize_file(path, size - 8);
    try {
        (void)load_checkpoint(path);
        FAIL("expected BadCheckpoint");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::bad_checkpoint);
        CHECK(e.is_input_error());
    }

    {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out << "NOTAPRIOR-file";
    }
    CHECK_THROWS_AS(load_checkpoint(path), Error);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_checkpoint(temp_path("missing.qmp")), Error);
}
