#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "qmerge/error.hpp"

namespace qmerge {

/// Dense row-major matrix of finite doubles.
class Matrix {
public:
    Matrix() = default;
    Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
    /// Throws InvalidShape on a length mismatch and InvalidShape on non-finite data.
    Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

    static Matrix from_rows(const std::vector<std::vector<double>>& rows);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }

    Matrix transposed() const;

    friend bool operator==(const Matrix&, const Matrix&) = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<double> data_;
};

Matrix matmul(const Matrix& a, const Matrix& b);
/// a * b^T without materializing the transpose.
Matrix matmul_nt(const Matrix& a, const Matrix& b);

double dot(std::span<const double> a, std::span<const double> b);
double l2_norm(std::span<const double> v);
double frobenius_norm_sq(const Matrix& m);

/// A value together with a flag marking a conventionally-defined degenerate case.
template <typename T>
struct Flagged {
    T value{};
    bool degenerate = false;
};

/// Row-wise softmax with max subtraction. Throws InvalidShape on an empty matrix.
Matrix softmax_rows(const Matrix& m);

/// Shannon entropy in nats; 0 log 0 = 0. Rejects negative entries and rows
/// whose sum is off by more than 1e-9 with InvalidProbability.
double row_entropy(std::span<const double> p);

/// softmax(X X^T / sqrt(d)) for an N x D embedding matrix.
Matrix attention_from_embeddings(const Matrix& x, std::size_t d);

/// Cosine similarity; two zero vectors give 0 flagged degenerate. A single
/// zero vector also gives 0 (no direction to compare) but is not flagged.
Flagged<double> cosine_similarity(std::span<const double> a, std::span<const double> b);

/// Seeded generator with reproducible substreams.
class RngState {
public:
    explicit RngState(std::uint64_t seed = 0);

    std::uint64_t seed() const noexcept { return seed_; }

    /// Independent substream; equal (seed, stream_id) always give the same stream.
    RngState split(std::uint64_t stream_id) const;

    std::uint64_t next_u64();
    /// Uniform in [0, 1) with 53 bits of resolution.
    double uniform();
    double normal();

private:
    std::uint64_t seed_;
    std::mt19937_64 engine_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x) noexcept;

inline constexpr double kUniformClamp = 1e-12;

/// -ln(-ln u) with u clamped to [1e-12, 1 - 1e-12].
double gumbel_from_uniform(double u) noexcept;
double gumbel_draw(RngState& rng);

}  // namespace qmerge
