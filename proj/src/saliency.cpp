#include "qmerge/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace qmerge {

void EmbeddingStack::validate() const {
    if (layers.empty()) throw Error(Errc::invalid_shape, "embedding stack has no layers");
    const std::size_t n = tokens();
    const std::size_t d = dim();
    if (n == 0 || d == 0) throw Error(Errc::invalid_shape, "embedding stack has zero tokens or zero dim");
    for (const auto& m : layers) {
        if (m.rows() != n || m.cols() != d) throw Error(Errc::invalid_shape, "layers disagree on (N, D)");
    }
    if (attention) {
        if (attention->size() != layers.size())
            throw Error(Errc::invalid_shape, "attention layer count differs from embedding layers");
        for (const auto& a : *attention) {
            if (a.rows() != n || a.cols() != n) throw Error(Errc::invalid_shape, "attention must be N x N");
        }
    }
}

Matrix layer_attention(const EmbeddingStack& stack, std::size_t layer) {
    if (stack.attention) return (*stack.attention)[layer];
    const Matrix& x = stack.layers[layer];
    return attention_from_embeddings(x, x.cols());
}

Matrix layer_entropies(const EmbeddingStack& stack) {
    stack.validate();
    const std::size_t n = stack.tokens();
    Matrix table(stack.num_layers(), n);
    for (std::size_t l = 0; l < stack.num_layers(); ++l) {
        const Matrix a = layer_attention(stack, l);
        for (std::size_t i = 0; i < n; ++i) table(l, i) = row_entropy(a.row(i));
    }
    return table;
}

std::vector<double> normalize_layer(std::span<const double> h, bool invert) {
    std::vector<double> out(h.size(), 0.5);
    if (h.empty()) return out;
    const auto [lo, hi] = std::minmax_element(h.begin(), h.end());
    const double range = *hi - *lo;
    if (!(range > 0.0)) return out;
    for (std::size_t i = 0; i < h.size(); ++i) {
        const double v = std::clamp((h[i] - *lo) / range, 0.0, 1.0);
        out[i] = invert ? 1.0 - v : v;
    }
    return out;
}

SaliencyProfile saliency_scores(const EmbeddingStack& stack, bool invert) {
    SaliencyProfile p;
    p.entropies = layer_entropies(stack);
    const std::size_t layers = p.entropies.rows();
    p.saliency.assign(p.entropies.cols(), 0.0);
    for (std::size_t l = 0; l < layers; ++l) {
        const auto norm = normalize_layer(p.entropies.row(l), invert);
        for (std::size_t i = 0; i < norm.size(); ++i) p.saliency[i] += norm[i];
    }
    for (double& s : p.saliency) s = std::clamp(s / static_cast<double>(layers), 0.0, 1.0);
    return p;
}

NedScores ned_scores(const Matrix& attention, double delta) {
    if (attention.rows() != attention.cols() || attention.rows() == 0)
        throw Error(Errc::invalid_shape, "attention must be square and nonempty");
    if (!(delta > 0.0)) throw Error(Errc::invalid_config, "delta must be positive");
    const std::size_t n = attention.rows();
    NedScores out{std::vector<double>(n), std::vector<bool>(n, false)};
    std::vector<double> column(n);
    for (std::size_t i = 0; i < n; ++i) {
        double total = 0.0;
        for (std::size_t r = 0; r < n; ++r) total += attention(r, i);
        double h_in = 0.0;
        if (total > 0.0) {
            for (std::size_t r = 0; r < n; ++r) {
                const double p = attention(r, i) / total;
                if (p > 0.0) h_in -= p * std::log(p);
            }
            h_in = std::max(h_in, 0.0);
        } else {
            out.degenerate[i] = true;
        }
        const double h_out = row_entropy(attention.row(i));
        out.ned[i] = (h_in - h_out) / (h_in + delta);
    }
    return out;
}

ColumnStats column_statistics(const Matrix& attention) {
    const std::size_t n = attention.rows();
    const std::size_t m = attention.cols();
    ColumnStats st{std::vector<double>(m), std::vector<double>(m), std::vector<double>(m)};
    if (n == 0 || m == 0) return st;
    const double inv_n = 1.0 / static_cast<double>(n);
    const double inv_m = 1.0 / static_cast<double>(m);
    for (std::size_t c = 0; c < m; ++c) {
        double mean = 0.0;
        for (std::size_t r = 0; r < n; ++r) mean += attention(r, c);
        mean *= inv_n;
        double var = 0.0;
        for (std::size_t r = 0; r < n; ++r) {
            const double d = attention(r, c) - mean;
            var += d * d;
        }
        st.mean[c] = mean;
        st.sigma2[c] = var * inv_n;
    }
    for (std::size_t i = 0; i < m; ++i) {
        double row_var = 0.0;
        if (i < n) {
            auto row = attention.row(i);
            double mean = 0.0;
            for (double v : row) mean += v;
            mean *= inv_m;
            for (double v : row) row_var += (v - mean) * (v - mean);
            row_var *= inv_m;
        }
        const double ratio = st.mean[i] > 0.0 ? st.sigma2[i] / st.mean[i] : 0.0;
        st.proxy[i] = ratio - row_var;
    }
    return st;
}

SaliencyProfile profile_saliency(const EmbeddingStack& stack, bool invert, double delta) {
    SaliencyProfile p = saliency_scores(stack, invert);
    const Matrix a = layer_attention(stack, stack.num_layers() - 1);
    auto ned = ned_scores(a, delta);
    p.ned = std::move(ned.ned);
    p.ned_degenerate = std::move(ned.degenerate);
    auto stats = column_statistics(a);
    p.sigma2 = std::move(stats.sigma2);
    p.column_mean = std::move(stats.mean);
    p.proxy = std::move(stats.proxy);
    return p;
}

std::vector<StabilityPoint> stability_probe(const EmbeddingStack& stack, double perturbation_scale,
                                            RngState& rng, std::size_t steps, double delta) {
    stack.validate();
    if (!(perturbation_scale >= 0.0) || !std::isfinite(perturbation_scale))
        throw Error(Errc::invalid_config, "perturbation scale must be finite and >= 0");
    const Matrix& x = stack.final_layer();
    const std::size_t d = x.cols();
    const auto base = ned_scores(attention_from_embeddings(x, d), delta).ned;

    Matrix direction(x.rows(), x.cols());
    for (double& v : direction.data()) v = rng.normal();
    const double dir_norm = std::sqrt(frobenius_norm_sq(direction));
    for (double& v : direction.data()) v /= dir_norm;

    std::vector<StabilityPoint> table;
    double scale = perturbation_scale;
    for (std::size_t step = 0; step < steps; ++step, scale /= 10.0) {
        Matrix moved = x;
        Matrix diff(x.rows(), x.cols());
        for (std::size_t k = 0; k < moved.size(); ++k) {
            moved.data()[k] += scale * direction.data()[k];
            diff.data()[k] = moved.data()[k] - x.data()[k];
        }
        const auto ned = ned_scores(attention_from_embeddings(moved, d), delta).ned;
        StabilityPoint pt;
        pt.scale = scale;
        pt.delta_x = std::sqrt(frobenius_norm_sq(diff));
        for (std::size_t i = 0; i < ned.size(); ++i)
            pt.max_delta_ned = std::max(pt.max_delta_ned, std::abs(ned[i] - base[i]));
        table.push_back(pt);
    }
    return table;
}

double merge_risk(double ned, double sigma2) {
    if (sigma2 < 0.0) throw Error(Errc::invalid_config, "sigma2 must be >= 0");
    if (sigma2 == 0.0) return ned == 0.0 ? 1.0 : 0.0;
    return std::exp(-(ned * ned) / (2.0 * sigma2));
}

}  // namespace qmerge
