#include <cmath>

#include "doctest.h"
#include "oracles.hpp"
#include "qmerge/pipeline.hpp"
#include "qmerge/synthetic.hpp"

using namespace qmerge;

namespace {

EmbeddingStack make_stack(const oracle::Rows& final_layer, std::size_t layers = 2, std::uint64_t seed = 0) {
    EmbeddingStack s;
    for (std::size_t l = 0; l + 1 < layers; ++l)
        s.layers.push_back(Matrix::from_rows(oracle::random_rows(final_layer.size(), final_layer[0].size(), seed + l)));
    s.layers.push_back(Matrix::from_rows(final_layer));
    return s;
}

void check_same(const RunResult& a, const RunResult& b) {
    CHECK(a.merged.tokens == b.merged.tokens);
    CHECK(a.merged.plan.clusters == b.merged.plan.clusters);
    CHECK(a.selection.pi == b.selection.pi);
    CHECK(a.selection.mask == b.selection.mask);
    CHECK(a.saliency.saliency == b.saliency.saliency);
    CHECK(a.fidelity.lhs == b.fidelity.lhs);
    CHECK(a.fidelity.gamma == b.fidelity.gamma);
}

void check_hull(const Matrix& x, const MergedSequence& m) {
    for (std::size_t g = 0; g < m.plan.size(); ++g)
        for (std::size_t j = 0; j < x.cols(); ++j) {
            double lo = x(m.plan.clusters[g][0], j), hi = lo;
            for (std::size_t i : m.plan.clusters[g]) {
                lo = std::min(lo, x(i, j));
                hi = std::max(hi, x(i, j));
            }
            CHECK(m.tokens(g, j) >= lo);
            CHECK(m.tokens(g, j) <= hi);
        }
}

}  // namespace

TEST_CASE("PipelineConfig validation") {
    PipelineConfig c;
    CHECK(c.alpha == 0.45);
    CHECK(c.tau == 1.0);
    CHECK(c.epsilon == 1e-6);
    CHECK(c.delta == 1e-6);
    CHECK(c.invert_entropy);
    CHECK(c.hard_selection);
    CHECK_NOTHROW(c.validate());
    c.alpha = 1.2;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.tau = 0.0;
    CHECK_THROWS_AS(c.validate(), Error);
    c = {};
    c.k_min = 3;
    c.k_max = 2;
    CHECK_THROWS_AS(c.validate(), Error);
}

TEST_CASE("compress: a single token passes through") {
    const auto stack = make_stack({{0.3, -1.0, 2.0}});
    const auto r = compress(stack, {});
    CHECK(r.selection.budget == 1);
    CHECK(r.merged.tokens == stack.final_layer());
    CHECK(r.fidelity.lhs == 0.0);
    CHECK(r.fidelity.comp_rate == 1.0);
}

TEST_CASE("compress: duplicate pairs are merged") {
    const oracle::Rows x{{1.0, 0.2, 0.0}, {-0.3, 0.1, 2.0}, {1.0, 0.2, 0.0}, {-0.3, 0.1, 2.0}};
    const auto stack = make_stack(x, 1);
    PipelineConfig cfg;
    cfg.k_max = 2;
    cfg.alpha = 0.0;
    const auto r = compress(stack, cfg);
    REQUIRE(r.merged.tokens.rows() == 2);
    CHECK(r.merged.plan.clusters[0] == std::vector<std::size_t>{0, 2});
    CHECK(r.merged.plan.clusters[1] == std::vector<std::size_t>{1, 3});
    check_hull(stack.final_layer(), r.merged);
    CHECK(r.fidelity.lhs == 0.0);
    for (std::size_t j = 0; j < 3; ++j) {
        CHECK(r.merged.tokens(0, j) == x[0][j]);
        CHECK(r.merged.tokens(1, j) == x[1][j]);
    }
}

TEST_CASE("compress: Table-3 style synthetic fixture") {
    SyntheticSpec spec;
    spec.n = 128;
    spec.d = 16;
    spec.clusters = 54;
    spec.noise = 0.05;
    const auto data = generate_synthetic(spec);
    PipelineConfig cfg;
    cfg.k_max = 54;
    cfg.alpha = 0.0;
    const auto r = compress(data.stack, cfg);
    CHECK(r.fidelity.n == 128);
    CHECK(r.fidelity.k == 54);
    CHECK(std::abs(r.fidelity.comp_rate - 2.37) < 0.01);
    CHECK(std::abs(r.fidelity.flops.speedup - (128.0 / 54.0) * (128.0 / 54.0)) < 1e-9);
}

TEST_CASE("compress: budget bounds, convex hulls and reproducibility") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const std::size_t n = 1 + seed % 13;
        const auto stack = make_stack(oracle::random_rows(n, 4, 100 + seed), 3, 200 + seed);
        PipelineConfig cfg;
        cfg.seed = seed;
        cfg.k_min = 1 + seed % 3;
        cfg.k_max = cfg.k_min + seed % 5;
        cfg.alpha = 0.1 * static_cast<double>(seed % 10);
        cfg.hard_selection = seed % 2 == 0;
        cfg.cluster_method = seed % 3 == 0 ? ClusterMethod::knn : ClusterMethod::agglomerative_cosine;
        const auto r = compress(stack, cfg);
        const std::size_t k = r.merged.tokens.rows();
        CHECK(k == r.selection.budget);
        CHECK(k >= std::min(cfg.k_min, n));
        CHECK(k <= std::min(*cfg.k_max, n));
        CHECK(r.fidelity.comp_rate == static_cast<double>(n) / static_cast<double>(k));
        check_hull(stack.final_layer(), r.merged);
        for (double m : r.selection.mass) CHECK(m > 0.0);
        double total = 0.0;
        for (double p : r.selection.pi) total += p;
        CHECK(std::abs(total - 1.0) < 1e-9);
        CHECK(r.fidelity.gamma >= 0.0);
        CHECK(r.fidelity.gamma <= 1.0);
        CHECK(r.fidelity.lhs >= 0.0);
        check_same(r, compress(stack, cfg));
    }
}

TEST_CASE("compress: stream ids select distinct but reproducible noise") {
    const auto stack = make_stack(oracle::random_rows(8, 3, 5));
    const auto a = compress(stack, {}, 0);
    const auto b = compress(stack, {}, 1);
    CHECK(a.selection.pi != b.selection.pi);
    check_same(b, compress(stack, {}, 1));
}

TEST_CASE("compress: errors carry a stage label") {
    EmbeddingStack bad;
    bad.layers.push_back(Matrix(3, 2, 1.0));
    bad.layers.push_back(Matrix(4, 2, 1.0));
    try {
        (void)compress(bad, {});
        FAIL("expected InvalidShape");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::invalid_shape);
        CHECK(std::string(e.what()).find("input") != std::string::npos);
    }
    PipelineConfig cfg;
    cfg.tau = -1.0;
    CHECK_THROWS_AS(compress(make_stack({{1.0}}), cfg), Error);
}

TEST_CASE("compress_and_decode") {
    const auto stack = make_stack(oracle::random_rows(10, 3, 9));
    PriorConfig pc;
    pc.layers = 1;
    pc.model_dim = 8;
    pc.context = 16;
    PipelineConfig cfg;
    cfg.alpha = 0.0;
    cfg.k_max = 5;

    const PriorModel model(pc, 3, Direction::forward);
    const auto r = compress_and_decode(stack, cfg, model);
    REQUIRE(r.predictions.has_value());
    CHECK(r.predictions->rows() == 4);
    const auto again = compress_and_decode(stack, cfg, model);
    CHECK(*again.predictions == *r.predictions);

    PriorConfig id = pc;
    id.residual_input = true;
    PriorModel identity(id, 3, Direction::forward);
    identity.zero_output_head();
    const auto ri = compress_and_decode(stack, cfg, identity);
    for (std::size_t t = 0; t < 4; ++t)
        for (std::size_t j = 0; j < 3; ++j) CHECK((*ri.predictions)(t, j) == ri.merged.tokens(t, j));

    PipelineConfig one = cfg;
    one.k_max = 1;
    const auto r1 = compress_and_decode(stack, one, model);
    CHECK(r1.predictions->rows() == 0);

    const PriorModel back(pc, 3, Direction::backward);
    try {
        (void)compress_and_decode(stack, cfg, back);
        FAIL("expected InvalidDirection");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::invalid_direction);
    }
}

TEST_CASE("batch_compress") {
    std::vector<EmbeddingStack> stacks;
    for (std::uint64_t i = 0; i < 7; ++i) stacks.push_back(make_stack(oracle::random_rows(6 + i, 3, 40 + i), 2, 60 + i));

    const auto single = batch_compress({stacks[0]}, {});
    REQUIRE(single[0].ok());
    check_same(*single[0].result, compress(stacks[0], {}));

    const auto seq = batch_compress(stacks, {}, {.threads = 1});
    const auto par = batch_compress(stacks, {}, {.threads = 4});
    REQUIRE(seq.size() == stacks.size());
    for (std::size_t i = 0; i < stacks.size(); ++i) {
        REQUIRE(seq[i].ok());
        REQUIRE(par[i].ok());
        check_same(*seq[i].result, *par[i].result);
        check_same(*seq[i].result, compress(stacks[i], {}, i));
    }

    const std::vector<EmbeddingStack> same(3, stacks[2]);
    const auto shared = batch_compress(same, {}, {.threads = 2, .shared_stream = true});
    check_same(*shared[0].result, *shared[1].result);
    check_same(*shared[0].result, *shared[2].result);

    EmbeddingStack bad;
    bad.layers.push_back(Matrix(3, 2, 1.0));
    bad.layers.push_back(Matrix(2, 2, 1.0));
    const auto mixed = batch_compress({stacks[0], bad, stacks[1]}, {}, {.threads = 2});
    CHECK(mixed[0].ok());
    CHECK_FALSE(mixed[1].ok());
    CHECK(mixed[1].error_code == Errc::invalid_shape);
    CHECK_FALSE(mixed[1].error_message.empty());
    CHECK(mixed[2].ok());

    CHECK_THROWS_AS(batch_compress({}, {}), Error);
}

TEST_CASE("synthetic generator") {
    SyntheticSpec spec;
    spec.n = 20;
    spec.clusters = 5;
    spec.noise = 0.0;
    const auto d = generate_synthetic(spec);
    CHECK(d.stack.num_layers() == 3);
    CHECK(d.stack.tokens() == 20);
    std::vector<int> seen(5, 0);
    for (std::size_t i = 0; i < 20; ++i) {
        seen[d.assignment[i]] = 1;
        for (std::size_t j = 0; j < spec.d; ++j) CHECK(d.stack.final_layer()(i, j) == d.centroids(d.assignment[i], j));
    }
    for (int s : seen) CHECK(s == 1);
    spec.clusters = 21;
    CHECK_THROWS_AS(generate_synthetic(spec), Error);
    const auto again = generate_synthetic(SyntheticSpec{});
    CHECK(again.stack.final_layer() == generate_synthetic(SyntheticSpec{}).stack.final_layer());
}
