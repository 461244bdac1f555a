#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mdf {

/// Failure categories raised across the library. Each maps to one diagnostic
/// family so callers (and the CLI) can branch on the code instead of the text.
enum class Errc {
    // compute core
    shape_mismatch,
    missing_tensor,
    non_scalar_loss,
    backward_through_nondifferentiable,
    tie_at_checkpoint,
    invalid_argument,
    bad_checkpoint,
    io_failure,
    // moe
    channel_mismatch,
    collector_missing,
    zero_mean_vector,
    // detector
    invalid_size,
    out_of_range_target,
    empty_dataset,
    non_finite_loss,
    // metrics / stats
    no_classes_with_ground_truth,
    insufficient_samples,
    length_mismatch,
    all_zero_differences,
    out_of_range_p,
    seed_mismatch,
    // hpo
    empty_space,
    all_trials_failed,
    insufficient_trials,
    training_failure,
    // agent
    malformed_json,
    extra_top_level_keys,
    unknown_tool,
    argument_schema_violation,
    tool_execution_failure,
    policy_protocol_violation,
    // data
    field_count,
    out_of_range,
    non_numeric,
};

std::string_view to_string(Errc code) noexcept;

class Error : public std::runtime_error {
public:
    Error(Errc code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code) {}

    [[nodiscard]] Errc code() const noexcept { return code_; }

private:
    Errc code_;
};

}  // namespace mdf
