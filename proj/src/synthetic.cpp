#include "qmerge/synthetic.hpp"

#include <cmath>
#include <utility>

namespace qmerge {

void SyntheticSpec::validate() const {
    if (n == 0 || d == 0 || layers == 0) throw Error(Errc::invalid_config, "n, d and layers must be >= 1");
    if (clusters == 0 || clusters > n) throw Error(Errc::invalid_config, "clusters must lie in [1, n]");
    if (!(noise >= 0.0) || !std::isfinite(noise)) throw Error(Errc::invalid_config, "noise must be >= 0");
}

SyntheticData generate_synthetic(const SyntheticSpec& spec) {
    spec.validate();
    RngState rng(spec.seed);
    SyntheticData out;
    out.centroids = Matrix(spec.clusters, spec.d);
    const double radius = std::sqrt(static_cast<double>(spec.d));
    for (std::size_t c = 0; c < spec.clusters; ++c) {
        auto row = out.centroids.row(c);
        for (double& v : row) v = rng.normal();
        const double norm = l2_norm(row);
        for (double& v : row) v *= norm > 0.0 ? radius / norm : 0.0;
    }

    out.assignment.resize(spec.n);
    for (std::size_t i = 0; i < spec.n; ++i)
        out.assignment[i] = i < spec.clusters ? i : static_cast<std::size_t>(rng.next_u64() % spec.clusters);
    for (std::size_t i = spec.n; i > 1; --i) {
        const auto j = static_cast<std::size_t>(rng.next_u64() % i);
        std::swap(out.assignment[i - 1], out.assignment[j]);
    }

    for (std::size_t l = 0; l < spec.layers; ++l) {
        Matrix x(spec.n, spec.d);
        for (std::size_t i = 0; i < spec.n; ++i) {
            auto c = out.centroids.row(out.assignment[i]);
            for (std::size_t j = 0; j < spec.d; ++j) x(i, j) = c[j] + spec.noise * rng.normal();
        }
        out.stack.layers.push_back(std::move(x));
    }
    return out;
}

}  // namespace qmerge
