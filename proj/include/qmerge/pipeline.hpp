#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "qmerge/ar_prior.hpp"
#include "qmerge/merging.hpp"
#include "qmerge/saliency.hpp"
#include "qmerge/selection.hpp"

namespace qmerge {

struct PipelineConfig {
    double alpha = 0.45;
    double tau = 1.0;
    double epsilon = kDefaultEpsilon;
    double delta = kDefaultDelta;
    std::optional<std::size_t> k_max;  // unset: N
    std::size_t k_min = 1;
    bool invert_entropy = true;
    ClusterMethod cluster_method = ClusterMethod::agglomerative_cosine;
    std::size_t knn_neighbors = 5;
    std::uint64_t seed = 0;
    bool hard_selection = true;

    void validate() const;
};

struct StageTimings {
    double saliency_ms = 0.0;
    double budget_ms = 0.0;
    double selection_ms = 0.0;
    double cluster_ms = 0.0;
    double merge_ms = 0.0;
    double fidelity_ms = 0.0;
    double decode_ms = 0.0;
    double total_ms = 0.0;
};

struct RunResult {
    MergedSequence merged;
    SaliencyProfile saliency;
    SelectionSample selection;
    FidelityReport fidelity;
    StageTimings timings;
    /// Row t predicts merged token t + 1 from tokens 0..t (decode runs only).
    std::optional<Matrix> predictions;
};

/// Saliency, budget, Gumbel-softmax selection, clustering, merge and fidelity
/// on the final layer. The Gumbel noise comes from RngState(seed).split(stream_id).
RunResult compress(const EmbeddingStack& stack, const PipelineConfig& cfg, std::uint64_t stream_id = 0);

/// compress, then forward-decoder predictions along the merged sequence.
/// Throws InvalidDirection for a backward model.
RunResult compress_and_decode(const EmbeddingStack& stack, const PipelineConfig& cfg, const PriorModel& model,
                              std::uint64_t stream_id = 0);

struct BatchOptions {
    std::size_t threads = 1;
    /// Every item draws from stream 0 instead of its own index.
    bool shared_stream = false;
};

struct BatchItem {
    std::optional<RunResult> result;
    std::optional<Errc> error_code;
    std::string error_message;

    bool ok() const noexcept { return result.has_value(); }
};

/// Item i uses stream i (or 0 when shared). Failures are recorded per item.
std::vector<BatchItem> batch_compress(const std::vector<EmbeddingStack>& stacks, const PipelineConfig& cfg,
                                      const BatchOptions& options = {});

}  // namespace qmerge
