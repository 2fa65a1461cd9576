#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "qmerge/numerics.hpp"

namespace qmerge {

struct BudgetRule {
    double alpha = 0.45;
    std::size_t k_max = 1;
    std::size_t k_min = 1;

    /// Throws InvalidConfig on alpha outside [0, 1], k_min = 0 or k_min > k_max.
    void validate() const;
};

struct SelectionSample {
    std::vector<double> pi;
    std::vector<double> mask;  // soft (= pi) or hard {0, 1}
    std::vector<double> mass;
    std::size_t budget = 0;
    double tau = 1.0;
    double epsilon = 1e-6;
    bool hard = true;
};

inline constexpr double kDefaultEpsilon = 1e-6;

/// clamp(#{i : s_i >= alpha}, k_min, k_max).
std::size_t estimate_budget(std::span<const double> saliency, const BudgetRule& rule);

/// softmax((s + g) / tau) for explicitly supplied Gumbel noise g.
std::vector<double> gumbel_softmax_with_noise(std::span<const double> saliency, double tau,
                                              std::span<const double> noise);

/// One joint Gumbel-softmax sample over all tokens; draws one Gumbel value per token.
std::vector<double> gumbel_softmax(std::span<const double> saliency, double tau, RngState& rng);

/// 1 on the k largest entries of pi (ties to the lowest index), 0 elsewhere.
/// In training the hard mask is used forward while gradients flow through pi.
std::vector<double> harden(std::span<const double> pi, std::size_t k);

/// mask * s + (1 - mask) * epsilon.
std::vector<double> token_mass(std::span<const double> mask, std::span<const double> saliency,
                               double epsilon = kDefaultEpsilon);

/// Geometric temperature schedule for training mode: tau0 * factor^epoch.
double annealed_temperature(double tau0, std::size_t epoch, double factor = 0.95);

}  // namespace qmerge
