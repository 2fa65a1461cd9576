#include "qmerge/selection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace qmerge {

void BudgetRule::validate() const {
    if (!(alpha >= 0.0 && alpha <= 1.0)) throw Error(Errc::invalid_config, "alpha must lie in [0, 1]");
    if (k_min == 0) throw Error(Errc::invalid_config, "k_min must be >= 1");
    if (k_min > k_max) throw Error(Errc::invalid_config, "k_min must not exceed k_max");
}

std::size_t estimate_budget(std::span<const double> saliency, const BudgetRule& rule) {
    rule.validate();
    const auto above = static_cast<std::size_t>(
        std::count_if(saliency.begin(), saliency.end(), [&](double s) { return s >= rule.alpha; }));
    return std::clamp(above, rule.k_min, rule.k_max);
}

std::vector<double> gumbel_softmax_with_noise(std::span<const double> saliency, double tau,
                                              std::span<const double> noise) {
    if (!(tau > 0.0) || !std::isfinite(tau))
        throw Error(Errc::invalid_temperature, "tau must be positive, got " + std::to_string(tau));
    if (noise.size() != saliency.size()) throw Error(Errc::invalid_shape, "noise length differs from saliency");
    if (saliency.empty()) throw Error(Errc::invalid_shape, "empty saliency row");
    std::vector<double> logits(saliency.size());
    for (std::size_t i = 0; i < logits.size(); ++i) logits[i] = (saliency[i] + noise[i]) / tau;
    const double peak = *std::max_element(logits.begin(), logits.end());
    double total = 0.0;
    for (double& v : logits) {
        v = std::exp(v - peak);
        total += v;
    }
    for (double& v : logits) v /= total;
    return logits;
}

std::vector<double> gumbel_softmax(std::span<const double> saliency, double tau, RngState& rng) {
    std::vector<double> noise(saliency.size());
    for (double& g : noise) g = gumbel_draw(rng);
    return gumbel_softmax_with_noise(saliency, tau, noise);
}

std::vector<double> harden(std::span<const double> pi, std::size_t k) {
    if (k == 0) throw Error(Errc::invalid_budget, "k must be >= 1");
    if (k > pi.size()) throw Error(Errc::invalid_budget, "k exceeds token count");
    std::vector<std::size_t> order(pi.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pi[a] > pi[b]; });
    std::vector<double> mask(pi.size(), 0.0);
    for (std::size_t r = 0; r < k; ++r) mask[order[r]] = 1.0;
    return mask;
}

std::vector<double> token_mass(std::span<const double> mask, std::span<const double> saliency, double epsilon) {
    if (mask.size() != saliency.size()) throw Error(Errc::invalid_shape, "mask length differs from saliency");
    if (!(epsilon > 0.0 && epsilon <= 1e-2)) throw Error(Errc::invalid_config, "epsilon must lie in (0, 1e-2]");
    std::vector<double> mass(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mass[i] = mask[i] * saliency[i] + (1.0 - mask[i]) * epsilon;
    return mass;
}

double annealed_temperature(double tau0, std::size_t epoch, double factor) {
    if (!(tau0 > 0.0)) throw Error(Errc::invalid_temperature, "initial temperature must be positive");
    if (!(factor > 0.0 && factor <= 1.0)) throw Error(Errc::invalid_config, "anneal factor must lie in (0, 1]");
    return tau0 * std::pow(factor, static_cast<double>(epoch));
}

}  // namespace qmerge
