#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace qmerge {

enum class Errc {
    invalid_shape,
    invalid_probability,
    invalid_temperature,
    invalid_budget,
    invalid_config,
    degenerate_cluster,
    invalid_prefix,
    invalid_direction,
    diverged_training,
    not_npy,
    unsupported_layout,
    unsupported_dtype,
    payload_truncated,
    io_failure,
    bad_checkpoint,
};

std::string_view errc_name(Errc code) noexcept;

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(std::string(errc_name(code)) + ": " + message), code_(code) {}

    Errc code() const noexcept { return code_; }

    /// Input-side errors (bad files, bad flags) as opposed to failures inside a stage.
    bool is_input_error() const noexcept;

private:
    Errc code_;
};

/// Rethrows `e` with a "stage: " prefix on the message, keeping its code.
[[noreturn]] void rethrow_in_stage(std::string_view stage, const Error& e);

}  // namespace qmerge
