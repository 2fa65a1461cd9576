#include "qmerge/merging.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <tuple>

namespace qmerge {

std::string_view cluster_method_name(ClusterMethod m) noexcept {
    return m == ClusterMethod::knn ? "knn" : "agglomerative-cosine";
}

ClusterMethod parse_cluster_method(std::string_view name) {
    if (name == "agglomerative" || name == "agglomerative-cosine") return ClusterMethod::agglomerative_cosine;
    if (name == "knn") return ClusterMethod::knn;
    throw Error(Errc::invalid_config, "unknown cluster method '" + std::string(name) + "'");
}

std::size_t MergePlan::covered() const noexcept {
    std::size_t total = 0;
    for (const auto& c : clusters) total += c.size();
    return total;
}

std::vector<std::size_t> MergePlan::assignment(std::size_t n) const {
    constexpr std::size_t unset = static_cast<std::size_t>(-1);
    std::vector<std::size_t> owner(n, unset);
    for (std::size_t k = 0; k < clusters.size(); ++k) {
        if (clusters[k].empty()) throw Error(Errc::invalid_shape, "empty cluster in merge plan");
        for (std::size_t j : clusters[k]) {
            if (j >= n || owner[j] != unset) throw Error(Errc::invalid_shape, "merge plan is not a partition");
            owner[j] = k;
        }
    }
    if (std::find(owner.begin(), owner.end(), unset) != owner.end())
        throw Error(Errc::invalid_shape, "merge plan does not cover every token");
    return owner;
}

double cosine_distance(std::span<const double> a, std::span<const double> b) {
    return 1.0 - cosine_similarity(a, b).value;
}

namespace {

std::vector<double> resolve_weights(std::span<const double> mass, std::size_t n) {
    if (mass.empty()) return std::vector<double>(n, 1.0);
    if (mass.size() != n) throw Error(Errc::invalid_shape, "mass length differs from token count");
    for (double m : mass) {
        if (!(m > 0.0) || !std::isfinite(m)) throw Error(Errc::invalid_config, "cluster masses must be positive");
    }
    return {mass.begin(), mass.end()};
}

Matrix pairwise_cosine_distance(const Matrix& x) {
    const std::size_t n = x.rows();
    Matrix d(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) d(i, j) = d(j, i) = cosine_distance(x.row(i), x.row(j));
    return d;
}

void order_plan(MergePlan& plan) {
    for (auto& c : plan.clusters) std::sort(c.begin(), c.end());
    std::sort(plan.clusters.begin(), plan.clusters.end(),
              [](const auto& a, const auto& b) { return a.front() < b.front(); });
}

MergePlan agglomerative(const Matrix& x, std::span<const double> mass, std::size_t k) {
    const std::size_t n = x.rows();
    const auto weight0 = resolve_weights(mass, n);
    Matrix dist = pairwise_cosine_distance(x);

    // Slots stay in ascending order of their smallest member: merging (a, b)
    // with a < b keeps slot a, whose smallest member is the smaller one.
    std::vector<std::size_t> slots(n);
    std::iota(slots.begin(), slots.end(), std::size_t{0});
    std::vector<std::vector<std::size_t>> members(n);
    for (std::size_t i = 0; i < n; ++i) members[i] = {i};
    std::vector<double> weight = weight0;

    while (slots.size() > k) {
        std::size_t best_a = 0, best_b = 1;
        double best = dist(slots[0], slots[1]);
        for (std::size_t a = 0; a < slots.size(); ++a) {
            for (std::size_t b = a + 1; b < slots.size(); ++b) {
                const double v = dist(slots[a], slots[b]);
                if (v < best) {
                    best = v;
                    best_a = a;
                    best_b = b;
                }
            }
        }
        const std::size_t ia = slots[best_a];
        const std::size_t ib = slots[best_b];
        const double wa = weight[ia];
        const double wb = weight[ib];
        for (std::size_t c : slots) {
            if (c == ia || c == ib) continue;
            const double v = (wa * dist(ia, c) + wb * dist(ib, c)) / (wa + wb);
            dist(ia, c) = dist(c, ia) = v;
        }
        weight[ia] = wa + wb;
        members[ia].insert(members[ia].end(), members[ib].begin(), members[ib].end());
        members[ib].clear();
        slots.erase(slots.begin() + static_cast<std::ptrdiff_t>(best_b));
    }

    MergePlan plan;
    plan.method = ClusterMethod::agglomerative_cosine;
    for (std::size_t s : slots) plan.clusters.push_back(std::move(members[s]));
    order_plan(plan);
    return plan;
}

struct DisjointSets {
    std::vector<std::size_t> parent;
    explicit DisjointSets(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), std::size_t{0}); }
    std::size_t find(std::size_t v) {
        while (parent[v] != v) v = parent[v] = parent[parent[v]];
        return v;
    }
    bool unite(std::size_t a, std::size_t b) {
        a = find(a);
        b = find(b);
        if (a == b) return false;
        if (b < a) std::swap(a, b);
        parent[b] = a;
        return true;
    }
};

MergePlan knn_contract(const Matrix& x, std::size_t k, std::size_t neighbors) {
    const std::size_t n = x.rows();
    const Matrix dist = pairwise_cosine_distance(x);
    using Edge = std::tuple<double, std::size_t, std::size_t>;
    std::vector<Edge> graph;
    std::vector<Edge> rest;
    std::vector<std::vector<bool>> in_graph(n, std::vector<bool>(n, false));
    const std::size_t nn = std::min(neighbors, n > 0 ? n - 1 : 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<std::size_t> others;
        for (std::size_t j = 0; j < n; ++j)
            if (j != i) others.push_back(j);
        std::stable_sort(others.begin(), others.end(),
                         [&](std::size_t a, std::size_t b) { return dist(i, a) < dist(i, b); });
        for (std::size_t r = 0; r < nn; ++r) {
            const std::size_t j = others[r];
            in_graph[std::min(i, j)][std::max(i, j)] = true;
        }
    }
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) (in_graph[i][j] ? graph : rest).emplace_back(dist(i, j), i, j);
    std::sort(graph.begin(), graph.end());
    std::sort(rest.begin(), rest.end());

    DisjointSets sets(n);
    std::size_t components = n;
    for (const auto* edges : {&graph, &rest}) {
        for (const auto& [d, i, j] : *edges) {
            if (components <= k) break;
            if (sets.unite(i, j)) --components;
        }
    }

    MergePlan plan;
    plan.method = ClusterMethod::knn;
    std::vector<std::size_t> slot_of(n, static_cast<std::size_t>(-1));
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t root = sets.find(i);
        if (slot_of[root] == static_cast<std::size_t>(-1)) {
            slot_of[root] = plan.clusters.size();
            plan.clusters.emplace_back();
        }
        plan.clusters[slot_of[root]].push_back(i);
    }
    order_plan(plan);
    return plan;
}

}  // namespace

MergePlan cluster(const Matrix& x, std::span<const double> mass, std::size_t k, const ClusterOptions& options) {
    const std::size_t n = x.rows();
    if (k == 0) throw Error(Errc::invalid_budget, "cluster count must be >= 1");
    if (k > n) throw Error(Errc::invalid_budget, "cluster count " + std::to_string(k) + " exceeds N = " + std::to_string(n));
    if (k == n) {
        MergePlan plan;
        plan.method = options.method;
        for (std::size_t i = 0; i < n; ++i) plan.clusters.push_back({i});
        resolve_weights(mass, n);
        return plan;
    }
    if (options.method == ClusterMethod::knn) {
        resolve_weights(mass, n);
        return knn_contract(x, k, std::max<std::size_t>(options.knn_neighbors, 1));
    }
    return agglomerative(x, mass, k);
}

MergedSequence merge(const Matrix& x, std::span<const double> mass, MergePlan plan) {
    const std::size_t n = x.rows();
    const std::size_t d = x.cols();
    const std::vector<double> uniform = mass.empty() ? std::vector<double>(n, 1.0) : std::vector<double>{};
    if (mass.empty()) mass = uniform;
    if (mass.size() != n) throw Error(Errc::invalid_shape, "mass length differs from token count");
    plan.assignment(n);
    order_plan(plan);

    Matrix out(plan.size(), d);
    for (std::size_t k = 0; k < plan.size(); ++k) {
        const auto& group = plan.clusters[k];
        double total = 0.0;
        for (std::size_t j : group) {
            if (mass[j] < 0.0 || !std::isfinite(mass[j])) throw Error(Errc::invalid_config, "negative token mass");
            total += mass[j];
        }
        if (!(total > 0.0)) throw Error(Errc::degenerate_cluster, "cluster " + std::to_string(k) + " has zero total mass");
        auto row = out.row(k);
        for (std::size_t j : group) {
            auto src = x.row(j);
            for (std::size_t c = 0; c < d; ++c) row[c] += mass[j] * src[c];
        }
        for (std::size_t c = 0; c < d; ++c) {
            // The exact weighted mean lies between the member extremes; clamp away rounding.
            double lo = x(group.front(), c), hi = lo;
            for (std::size_t j : group) {
                lo = std::min(lo, x(j, c));
                hi = std::max(hi, x(j, c));
            }
            row[c] = std::clamp(row[c] / total, lo, hi);
        }
    }
    return {std::move(out), std::move(plan)};
}

Matrix pad_to_original(const MergedSequence& merged, std::size_t n) {
    const auto owner = merged.plan.assignment(n);
    Matrix out(n, merged.tokens.cols());
    for (std::size_t i = 0; i < n; ++i) {
        auto src = merged.tokens.row(owner[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

Flagged<double> retained_norm_gamma(const Matrix& x, std::size_t k) {
    const std::size_t n = x.rows();
    if (k == 0 || k > n) throw Error(Errc::invalid_budget, "gamma needs 1 <= k <= N");
    std::vector<double> norms(n);
    for (std::size_t i = 0; i < n; ++i) norms[i] = l2_norm(x.row(i));
    const double total = std::accumulate(norms.begin(), norms.end(), 0.0);
    if (total == 0.0) return {1.0, true};
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return norms[a] > norms[b]; });
    if (k == n) return {1.0, false};
    double kept = 0.0;
    for (std::size_t r = 0; r < k; ++r) kept += norms[order[r]];
    return {std::clamp(kept / total, 0.0, 1.0), false};
}

FlopModel flop_model(std::size_t n, std::size_t k, std::size_t d) {
    if (n == 0 || k == 0 || d == 0 || k > n) throw Error(Errc::invalid_config, "flop model needs n, k, d >= 1 and k <= n");
    const double nd = static_cast<double>(n);
    const double kd = static_cast<double>(k);
    const double dd = static_cast<double>(d);
    const double rate = nd / kd;
    return {2.0 * nd * nd * dd, 2.0 * kd * kd * dd, rate * rate};
}

FidelityReport fidelity_report(const Matrix& x, const MergedSequence& merged, std::span<const double> mass,
                               std::size_t k) {
    const std::size_t n = x.rows();
    if (merged.tokens.cols() != x.cols()) throw Error(Errc::invalid_shape, "merged tokens have a different dim");
    const std::vector<double> uniform = mass.empty() ? std::vector<double>(n, 1.0) : std::vector<double>{};
    if (mass.empty()) mass = uniform;
    if (mass.size() != n) throw Error(Errc::invalid_shape, "mass length differs from token count");
    FidelityReport r;
    r.n = n;
    r.k = merged.tokens.rows();
    const auto gamma = retained_norm_gamma(x, k);
    r.gamma = gamma.value;
    r.gamma_degenerate = gamma.degenerate;

    const Matrix padded = pad_to_original(merged, n);
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double diff = x.data()[i] - padded.data()[i];
        r.lhs += diff * diff;
    }
    r.rhs_bound = (1.0 - r.gamma) * (1.0 - r.gamma) * frobenius_norm_sq(x);
    for (std::size_t c = 0; c < merged.plan.size(); ++c) {
        auto center = merged.tokens.row(c);
        for (std::size_t j : merged.plan.clusters[c]) {
            auto src = x.row(j);
            double sq = 0.0;
            for (std::size_t t = 0; t < src.size(); ++t) sq += (src[t] - center[t]) * (src[t] - center[t]);
            r.cluster_spread += mass[j] * sq;
        }
    }
    r.bound_holds = r.lhs <= r.rhs_bound + 1e-9;
    r.comp_rate = static_cast<double>(n) / static_cast<double>(r.k);
    r.flops = flop_model(n, r.k, x.cols());
    return r;
}

}  // namespace qmerge
