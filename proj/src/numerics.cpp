#include "qmerge/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace qmerge {

std::string_view errc_name(Errc code) noexcept {
    switch (code) {
        case Errc::invalid_shape: return "InvalidShape";
        case Errc::invalid_probability: return "InvalidProbability";
        case Errc::invalid_temperature: return "InvalidTemperature";
        case Errc::invalid_budget: return "InvalidBudget";
        case Errc::invalid_config: return "InvalidConfig";
        case Errc::degenerate_cluster: return "DegenerateCluster";
        case Errc::invalid_prefix: return "InvalidPrefix";
        case Errc::invalid_direction: return "InvalidDirection";
        case Errc::diverged_training: return "DivergedTraining";
        case Errc::not_npy: return "NotNpy";
        case Errc::unsupported_layout: return "UnsupportedLayout";
        case Errc::unsupported_dtype: return "UnsupportedDtype";
        case Errc::payload_truncated: return "PayloadTruncated";
        case Errc::io_failure: return "IoFailure";
        case Errc::bad_checkpoint: return "BadCheckpoint";
    }
    return "Unknown";
}

bool Error::is_input_error() const noexcept {
    switch (code_) {
        case Errc::not_npy:
        case Errc::unsupported_layout:
        case Errc::unsupported_dtype:
        case Errc::payload_truncated:
        case Errc::io_failure:
        case Errc::bad_checkpoint:
        case Errc::invalid_config:
            return true;
        default:
            return false;
    }
}

void rethrow_in_stage(std::string_view stage, const Error& e) {
    // what() already carries the code name; strip it so it is not repeated.
    std::string msg = e.what();
    const auto name = std::string(errc_name(e.code())) + ": ";
    if (msg.starts_with(name)) msg.erase(0, name.size());
    throw Error(e.code(), std::string(stage) + ": " + msg);
}

namespace {

void require_finite(std::span<const double> data) {
    for (double v : data) {
        if (!std::isfinite(v)) throw Error(Errc::invalid_shape, "matrix entries must be finite");
    }
}

}  // namespace

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {
    if (!std::isfinite(fill)) throw Error(Errc::invalid_shape, "matrix entries must be finite");
}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows * cols) {
        throw Error(Errc::invalid_shape, "data length " + std::to_string(data_.size()) +
                                             " != " + std::to_string(rows) + "x" + std::to_string(cols));
    }
    require_finite(data_);
}

Matrix Matrix::from_rows(const std::vector<std::vector<double>>& rows) {
    const std::size_t n = rows.size();
    const std::size_t d = n == 0 ? 0 : rows.front().size();
    std::vector<double> data;
    data.reserve(n * d);
    for (const auto& r : rows) {
        if (r.size() != d) throw Error(Errc::invalid_shape, "ragged rows");
        data.insert(data.end(), r.begin(), r.end());
    }
    return Matrix(n, d, std::move(data));
}

Matrix Matrix::transposed() const {
    Matrix t(cols_, rows_);
    for (std::size_t r = 0; r < rows_; ++r)
        for (std::size_t c = 0; c < cols_; ++c) t(c, r) = (*this)(r, c);
    return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) throw Error(Errc::invalid_shape, "matmul inner dimensions differ");
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto o = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double av = a(i, k);
            auto br = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) o[j] += av * br[j];
        }
    }
    return out;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.cols()) throw Error(Errc::invalid_shape, "matmul_nt inner dimensions differ");
    Matrix out(a.rows(), b.rows());
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < b.rows(); ++j) out(i, j) = dot(a.row(i), b.row(j));
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double frobenius_norm_sq(const Matrix& m) { return dot(m.data(), m.data()); }

Matrix softmax_rows(const Matrix& m) {
    if (m.rows() == 0 || m.cols() == 0) throw Error(Errc::invalid_shape, "softmax of an empty matrix");
    Matrix out(m.rows(), m.cols());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto in = m.row(r);
        auto o = out.row(r);
        const double peak = *std::max_element(in.begin(), in.end());
        double total = 0.0;
        for (std::size_t c = 0; c < in.size(); ++c) {
            o[c] = std::exp(in[c] - peak);
            total += o[c];
        }
        for (double& v : o) v /= total;
    }
    return out;
}

double row_entropy(std::span<const double> p) {
    double total = 0.0;
    double h = 0.0;
    for (double v : p) {
        if (v < 0.0 || !std::isfinite(v)) throw Error(Errc::invalid_probability, "negative or non-finite entry");
        total += v;
        if (v > 0.0) h -= v * std::log(v);
    }
    if (std::abs(total - 1.0) > 1e-9) throw Error(Errc::invalid_probability, "row does not sum to 1");
    return std::max(h, 0.0);
}

Matrix attention_from_embeddings(const Matrix& x, std::size_t d) {
    if (x.rows() == 0) throw Error(Errc::invalid_shape, "attention over zero tokens");
    if (d == 0) throw Error(Errc::invalid_shape, "embedding dimension must be >= 1");
    Matrix scores = matmul_nt(x, x);
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    for (double& v : scores.data()) v *= scale;
    return softmax_rows(scores);
}

Flagged<double> cosine_similarity(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw Error(Errc::invalid_shape, "cosine of vectors with different lengths");
    const double na = l2_norm(a);
    const double nb = l2_norm(b);
    if (na == 0.0 && nb == 0.0) return {0.0, true};
    if (na == 0.0 || nb == 0.0) return {0.0, false};
    return {std::clamp(dot(a, b) / (na * nb), -1.0, 1.0), false};
}

std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

RngState::RngState(std::uint64_t seed) : seed_(seed), engine_(splitmix64(seed)) {}

RngState RngState::split(std::uint64_t stream_id) const {
    return RngState(splitmix64(seed_ ^ splitmix64(stream_id + 0x632be59bd9b4e019ULL)));
}

std::uint64_t RngState::next_u64() { return engine_(); }

double RngState::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double RngState::normal() {
    // Box-Muller; std::normal_distribution is implementation-defined.
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double angle = 2.0 * std::numbers::pi * u2;
    spare_ = radius * std::sin(angle);
    has_spare_ = true;
    return radius * std::cos(angle);
}

double gumbel_from_uniform(double u) noexcept {
    u = std::clamp(u, kUniformClamp, 1.0 - kUniformClamp);
    return -std::log(-std::log(u));
}

double gumbel_draw(RngState& rng) { return gumbel_from_uniform(rng.uniform()); }

}  // namespace qmerge
