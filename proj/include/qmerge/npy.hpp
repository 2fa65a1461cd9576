#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "qmerge/numerics.hpp"
#include "qmerge/saliency.hpp"

namespace qmerge {

enum class NpyDtype { f4, f8 };

/// A little-endian C-order float array in NPY format 1.0.
struct NpyArray {
    NpyDtype dtype = NpyDtype::f8;
    std::vector<std::size_t> shape;
    bool fortran_order = false;
    std::vector<std::uint8_t> payload;

    std::size_t element_count() const noexcept;
    std::size_t element_size() const noexcept { return dtype == NpyDtype::f4 ? 4 : 8; }

    /// Values widened to double.
    std::vector<double> values() const;

    static NpyArray from_values(std::vector<std::size_t> shape, std::span<const double> values,
                                NpyDtype dtype = NpyDtype::f8);

    friend bool operator==(const NpyArray&, const NpyArray&) = default;
};


std::vector<std::uint8_t> encode_npy(const NpyArray& arr);
/// Throws NotNpy, UnsupportedLayout, UnsupportedDtype or PayloadTruncated.
NpyArray decode_npy(std::span<const std::uint8_t> bytes);

NpyArray read_npy(const std::filesystem::path& path);
void write_npy(const NpyArray& arr, const std::filesystem::path& path);

NpyArray npy_from_matrix(const Matrix& m);
/// 3-D L x N x D array.
NpyArray npy_from_stack(const EmbeddingStack& stack);

Matrix npy_to_matrix(const NpyArray& arr);
/// Accepts a 2-D N x D array (one layer) or a 3-D L x N x D array.
EmbeddingStack npy_to_stack(const NpyArray& arr);
/// 3-D B x K x D array as B matrices.
std::vector<Matrix> npy_to_sequences(const NpyArray& arr);

}  // namespace qmerge
