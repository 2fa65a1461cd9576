#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "qmerge/autodiff.hpp"
#include "qmerge/numerics.hpp"

namespace qmerge {

enum class Direction : std::uint32_t { forward = 0, backward = 1 };

struct PriorConfig {
    std::size_t layers = 2;
    std::size_t model_dim = 32;
    std::size_t heads = 2;
    std::size_t context = 64;
    std::size_t ffn_mult = 2;
    double learn_rate = 5e-4;
    double momentum = 0.0;
    std::size_t epochs = 200;
    std::uint64_t seed = 0;
    /// Adds the prefix-final input token to the prediction (skip connection).
    bool residual_input = false;

    void validate() const;
};

/// Causal decoder over continuous token embeddings: input projection plus
/// learned positions, `layers` pre-residual blocks of multi-head causal
/// self-attention and a GELU feed-forward, and a linear head back to the
/// token dimension.
class PriorModel {
public:
    PriorModel(const PriorConfig& config, std::size_t token_dim, Direction direction);

    const PriorConfig& config() const noexcept { return config_; }
    std::size_t token_dim() const noexcept { return token_dim_; }
    Direction direction() const noexcept { return direction_; }

    std::vector<Matrix>& parameters() noexcept { return params_; }
    const std::vector<Matrix>& parameters() const noexcept { return params_; }
    std::size_t parameter_count() const noexcept;

    /// Zeroes the output projection and its bias.
    void zero_output_head();

    /// Copy with the same parameters but another direction tag.
    PriorModel with_direction(Direction direction) const;

    /// Records the forward pass of `seq` (T x D) on `tape`; row t of the
    /// returned node predicts the token after position t.
    Var forward(Tape& tape, const std::vector<Var>& params, const Matrix& seq) const;
    std::vector<Var> bind(Tape& tape, bool requires_grad) const;

    /// All T outputs for a T-token sequence.
    Matrix predict_all(const Matrix& seq) const;

private:
    PriorConfig config_;
    std::size_t token_dim_;
    Direction direction_;
    std::vector<Matrix> params_;
};

/// Prediction of the token following `prefix`. Throws InvalidPrefix when the
/// prefix is empty or longer than the context.
std::vector<double> predict_next(const PriorModel& model, const Matrix& prefix);

Matrix reversed_rows(const Matrix& seq);

/// sum_{t=1}^{K-1} ||f(x_1..x_t) - x_{t+1}||^2; zero for K <= 1.
double loss_forward(const PriorModel& model, const Matrix& seq);
/// loss_forward of `model` on the reversed sequence.
double loss_backward(const PriorModel& model, const Matrix& seq);
/// loss_forward(fwd) + loss_backward(bwd); InvalidDirection unless the tags
/// are forward / backward and the configs agree.
double loss_ar(const PriorModel& fwd, const PriorModel& bwd, const Matrix& seq);

/// Directional loss (forward or backward by the model's tag) and its gradient
/// for every parameter.
struct LossAndGrad {
    double loss = 0.0;
    std::vector<Matrix> grads;
};
LossAndGrad directional_loss_and_grad(const PriorModel& model, const Matrix& seq);

struct TrainingTrace {
    /// L_AR summed over the corpus: entry 0 before training, entry e after epoch e.
    std::vector<double> loss;
};

/// Per-sequence gradient descent on both directions, visiting the corpus in a
/// seeded shuffled order each epoch. Throws DivergedTraining on a non-finite loss.
TrainingTrace train(PriorModel& fwd, PriorModel& bwd, const std::vector<Matrix>& corpus, const PriorConfig& cfg);

/// Max relative error between tape gradients and central differences over
/// `samples` randomly chosen parameter entries (all entries if fewer).
double gradient_check(const PriorModel& model, const Matrix& seq, double h, std::size_t samples = 50,
                      std::uint64_t seed = 0);

struct DivergenceProbe {
    double output_gap = 0.0;  // mean_t ||f(z~_<=t) - f(z_<=t)||^2
    double input_gap = 0.0;   // mean_t ||z~_t - z_t||^2
    double ratio = 0.0;       // output_gap / input_gap, empirical L^2
    bool identical = false;
};

DivergenceProbe lipschitz_divergence_probe(const PriorModel& model, const Matrix& full, const Matrix& merged_padded);

/// Binary checkpoint: "QMPRIOR1" magic, u32 version, u32 direction, config
/// fields, u64 token dim, u64 tensor count, (u64 rows, u64 cols) per tensor,
/// then every tensor as little-endian f64 in row-major order.
void save_checkpoint(const PriorModel& model, const std::filesystem::path& path);
PriorModel load_checkpoint(const std::filesystem::path& path);

}  // namespace qmerge
