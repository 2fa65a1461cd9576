#include "qmerge/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <thread>

namespace qmerge {

void PipelineConfig::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(Errc::invalid_config, "alpha must lie in [0, 1]");
    if (!(tau > 0.0) || !std::isfinite(tau)) throw Error(Errc::invalid_config, "tau must be positive");
    if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw Error(Errc::invalid_config, "epsilon must lie in (0, 1e-2]");
    if (!(delta > 0.0)) throw Error(Errc::invalid_config, "delta must be positive");
    if (k_min == 0) throw Error(Errc::invalid_config, "k_min must be >= 1");
    if (k_max && (*k_max == 0 || *k_max < k_min)) throw Error(Errc::invalid_config, "k_max must be >= k_min");
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
    return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

template <typename F>
auto in_stage(const char* stage, double& ms, F&& body) {
    const auto start = Clock::now();
    try {
        if constexpr (std::is_void_v<decltype(body())>) {
            body();
            ms = elapsed_ms(start);
        } else {
            auto out = body();
            ms = elapsed_ms(start);
            return out;
        }
    } catch (const Error& e) {
        rethrow_in_stage(stage, e);
    }
}

}  // namespace

RunResult compress(const EmbeddingStack& stack, const PipelineConfig& cfg, std::uint64_t stream_id) {
    const auto start = Clock::now();
    try {
        cfg.validate();
        stack.validate();
    } catch (const Error& e) {
        rethrow_in_stage("input", e);
    }
    const std::size_t n = stack.tokens();
    const Matrix& x = stack.final_layer();
    RunResult r;
    RngState rng = RngState(cfg.seed).split(stream_id);

    r.saliency = in_stage("saliency", r.timings.saliency_ms,
                          [&] { return profile_saliency(stack, cfg.invert_entropy, cfg.delta); });

    const std::size_t k = in_stage("budget", r.timings.budget_ms, [&] {
        BudgetRule rule;
        rule.alpha = cfg.alpha;
        rule.k_max = std::min(cfg.k_max.value_or(n), n);
        rule.k_min = std::min(cfg.k_min, rule.k_max);
        return estimate_budget(r.saliency.saliency, rule);
    });

    in_stage("selection", r.timings.selection_ms, [&] {
        auto& sel = r.selection;
        sel.budget = k;
        sel.tau = cfg.tau;
        sel.epsilon = cfg.epsilon;
        sel.hard = cfg.hard_selection;
        sel.pi = gumbel_softmax(r.saliency.saliency, cfg.tau, rng);
        sel.mask = cfg.hard_selection ? harden(sel.pi, k) : sel.pi;
        sel.mass = token_mass(sel.mask, r.saliency.saliency, cfg.epsilon);
        // A selected token with zero saliency would carry no weight at all.
        for (double& m : sel.mass)
            if (!(m > 0.0)) m = cfg.epsilon;
    });

    MergePlan plan = in_stage("cluster", r.timings.cluster_ms, [&] {
        ClusterOptions opts;
        opts.method = cfg.cluster_method;
        opts.knn_neighbors = cfg.knn_neighbors;
        return cluster(x, r.selection.mass, k, opts);
    });

    r.merged = in_stage("merge", r.timings.merge_ms, [&] { return merge(x, r.selection.mass, std::move(plan)); });

    r.fidelity = in_stage("fidelity", r.timings.fidelity_ms,
                          [&] { return fidelity_report(x, r.merged, r.selection.mass, k); });

    r.timings.total_ms = elapsed_ms(start);
    return r;
}

RunResult compress_and_decode(const EmbeddingStack& stack, const PipelineConfig& cfg, const PriorModel& model,
                              std::uint64_t stream_id) {
    if (model.direction() != Direction::forward)
        throw Error(Errc::invalid_direction, "decode: only the forward decoder runs at inference");
    RunResult r = compress(stack, cfg, stream_id);
    const auto start = Clock::now();
    const Matrix& tokens = r.merged.tokens;
    const std::size_t k = tokens.rows();
    in_stage("decode", r.timings.decode_ms, [&] {
        if (k <= 1) {
            r.predictions = Matrix(0, tokens.cols());
            return;
        }
        Matrix prefix(k - 1, tokens.cols());
        for (std::size_t t = 0; t + 1 < k; ++t)
            std::copy(tokens.row(t).begin(), tokens.row(t).end(), prefix.row(t).begin());
        r.predictions = model.predict_all(prefix);
    });
    r.timings.total_ms += elapsed_ms(start);
    return r;
}

std::vector<BatchItem> batch_compress(const std::vector<EmbeddingStack>& stacks, const PipelineConfig& cfg,
                                      const BatchOptions& options) {
    if (stacks.empty()) throw Error(Errc::invalid_config, "batch is empty");
    std::vector<BatchItem> items(stacks.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (std::size_t i = next.fetch_add(1); i < stacks.size(); i = next.fetch_add(1)) {
            try {
                items[i].result = compress(stacks[i], cfg, options.shared_stream ? 0 : i);
            } catch (const Error& e) {
                items[i].error_code = e.code();
                items[i].error_message = e.what();
            }
        }
    };
    const std::size_t threads = std::clamp<std::size_t>(options.threads, 1, stacks.size());
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(worker);
    }
    return items;
}

}  // namespace qmerge
