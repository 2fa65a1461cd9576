#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <vector>

#include "qmerge/numerics.hpp"

namespace qmerge {

/// Per-layer token embeddings, optionally with attention captured from the encoder.
struct EmbeddingStack {
    std::vector<Matrix> layers;                  // L matrices of shape N x D
    std::optional<std::vector<Matrix>> attention;  // L matrices of shape N x N

    std::size_t num_layers() const noexcept { return layers.size(); }
    std::size_t tokens() const noexcept { return layers.empty() ? 0 : layers.front().rows(); }
    std::size_t dim() const noexcept { return layers.empty() ? 0 : layers.front().cols(); }

    /// Embeddings the merge stage operates on (the last layer).
    const Matrix& final_layer() const { return layers.back(); }

    /// Throws InvalidShape unless L >= 1, N >= 1, D >= 1 and all layers agree.
    void validate() const;
};

/// Captured attention when present, otherwise recomputed from the layer's embeddings.
Matrix layer_attention(const EmbeddingStack& stack, std::size_t layer);

struct ColumnStats {
    std::vector<double> sigma2;  // Var(A[., i]), population variance
    std::vector<double> mean;    // E[A[., i]]
    std::vector<double> proxy;   // Var(A[., i]) / E[A[., i]] - Var(A[i, .])
};

struct NedScores {
    std::vector<double> ned;
    std::vector<bool> degenerate;  // column with zero total mass
};

struct SaliencyProfile {
    Matrix entropies;  // L x N, nats
    std::vector<double> saliency;
    std::vector<double> ned;
    std::vector<bool> ned_degenerate;
    std::vector<double> sigma2;
    std::vector<double> column_mean;
    std::vector<double> proxy;
};

inline constexpr double kDefaultDelta = 1e-6;

/// L x N table of attention-row entropies.
Matrix layer_entropies(const EmbeddingStack& stack);

/// Min-max to [0, 1]; `invert` returns the complement. Constant rows map to 0.5.
std::vector<double> normalize_layer(std::span<const double> h, bool invert);

/// Mean over layers of the normalized entropies. Only `entropies` and `saliency` are filled.
SaliencyProfile saliency_scores(const EmbeddingStack& stack, bool invert);

/// Normalized entropy drop per token. Incoming entropy is taken over column i
/// renormalized to a distribution; outgoing entropy over row i.
NedScores ned_scores(const Matrix& attention, double delta = kDefaultDelta);

ColumnStats column_statistics(const Matrix& attention);

/// Saliency plus NED and column diagnostics on the final layer's attention.
SaliencyProfile profile_saliency(const EmbeddingStack& stack, bool invert, double delta = kDefaultDelta);

struct StabilityPoint {
    double scale = 0.0;
    double delta_x = 0.0;        // ||dX||_F
    double max_delta_ned = 0.0;  // max_i |NED_i(X + dX) - NED_i(X)|
};

/// Perturbs the final layer along one fixed random unit direction at
/// scale, scale/10, ... (`steps` points) and reports the NED response.
std::vector<StabilityPoint> stability_probe(const EmbeddingStack& stack, double perturbation_scale,
                                            RngState& rng, std::size_t steps = 3,
                                            double delta = kDefaultDelta);

/// exp(-ned^2 / (2 sigma2)); sigma2 = 0 gives 1 when ned = 0 and 0 otherwise.
double merge_risk(double ned, double sigma2);

}  // namespace qmerge
