#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "qmerge/saliency.hpp"

namespace qmerge {

struct SyntheticSpec {
    std::size_t n = 32;
    std::size_t d = 16;
    std::size_t layers = 3;
    std::size_t clusters = 4;
    double noise = 0.1;
    std::uint64_t seed = 0;

    void validate() const;
};

struct SyntheticData {
    EmbeddingStack stack;
    Matrix centroids;                    // clusters x d
    std::vector<std::size_t> assignment;  // ground-truth cluster per token
};

/// Gaussian tokens around random centroids. Every cluster owns at least one
/// token; each layer draws its own noise around the same centroids, so
/// noise = 0 yields exact duplicates of the centroid rows.
SyntheticData generate_synthetic(const SyntheticSpec& spec);

}  // namespace qmerge
