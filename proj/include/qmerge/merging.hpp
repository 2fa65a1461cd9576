#pragma once

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "qmerge/numerics.hpp"

namespace qmerge {

enum class ClusterMethod { agglomerative_cosine, knn };

std::string_view cluster_method_name(ClusterMethod m) noexcept;
/// Accepts "agglomerative" / "agglomerative-cosine" / "knn"; throws InvalidConfig otherwise.
ClusterMethod parse_cluster_method(std::string_view name);

/// Disjoint groups covering 0..N-1. Groups are sorted internally and ordered
/// by their smallest member.
struct MergePlan {
    std::vector<std::vector<std::size_t>> clusters;
    ClusterMethod method = ClusterMethod::agglomerative_cosine;

    std::size_t size() const noexcept { return clusters.size(); }
    std::size_t covered() const noexcept;
    /// Cluster id per original position. Throws InvalidShape unless the plan
    /// partitions 0..n-1 into nonempty groups.
    std::vector<std::size_t> assignment(std::size_t n) const;
};

struct MergedSequence {
    Matrix tokens;  // K x D, row k is the merge of plan.clusters[k]
    MergePlan plan;
};

struct ClusterOptions {
    ClusterMethod method = ClusterMethod::agglomerative_cosine;
    std::size_t knn_neighbors = 5;
};

/// Cosine distance 1 - cos(a, b); zero vectors count as similarity 0.
double cosine_distance(std::span<const double> a, std::span<const double> b);

/// Groups the rows of x into exactly k clusters.
///
/// agglomerative_cosine: average linkage under cosine distance, each token
/// weighted by its mass (an empty mass span means equal weights). At every
/// step the closest pair merges; equal distances go to the pair whose
/// (i, j) cluster positions are lexicographically smallest.
///
/// knn: edges of the symmetrized k-nearest-neighbour graph are contracted in
/// increasing (distance, i, j) order until k components remain; if the graph
/// runs out of edges first the remaining pairs are used in the same order.
MergePlan cluster(const Matrix& x, std::span<const double> mass, std::size_t k,
                  const ClusterOptions& options = {});

/// Mass-weighted mean of each cluster (empty mass means equal weights). Throws DegenerateCluster when a
/// cluster's total mass is zero.
MergedSequence merge(const Matrix& x, std::span<const double> mass, MergePlan plan);

/// Cluster-broadcast reconstruction: row i is the merged token of i's cluster.
Matrix pad_to_original(const MergedSequence& merged, std::size_t n);

/// Share of total row norm carried by the k largest-norm rows. All-zero x
/// gives 1, flagged degenerate.
Flagged<double> retained_norm_gamma(const Matrix& x, std::size_t k);

struct FlopModel {
    double flops_full = 0.0;    // 2 n^2 d
    double flops_merged = 0.0;  // 2 k^2 d
    double speedup = 0.0;       // (n / k)^2
};

FlopModel flop_model(std::size_t n, std::size_t k, std::size_t d);

struct FidelityReport {
    double gamma = 0.0;
    bool gamma_degenerate = false;
    double lhs = 0.0;             // ||X - X_pad||_F^2
    double rhs_bound = 0.0;       // (1 - gamma)^2 ||X||_F^2
    double cluster_spread = 0.0;  // sum_k sum_{j in G_k} m_j ||x_j - x~_k||^2
    bool bound_holds = false;     // lhs <= rhs_bound + 1e-9
    double comp_rate = 1.0;       // N / K
    std::size_t n = 0;
    std::size_t k = 0;
    FlopModel flops;
};

FidelityReport fidelity_report(const Matrix& x, const MergedSequence& merged, std::span<const double> mass,
                               std::size_t k);

}  // namespace qmerge
