#include "mdf/error.hpp"

namespace mdf {

std::string_view to_string(Errc code) noexcept {
    switch (code) {
        case Errc::shape_mismatch: return "shape-mismatch";
        case Errc::missing_tensor: return "missing-tensor";
        case Errc::non_scalar_loss: return "non-scalar-loss";
        case Errc::backward_through_nondifferentiable: return "backward-through-nondifferentiable";
        case Errc::tie_at_checkpoint: return "tie-at-checkpoint";
        case Errc::invalid_argument: return "invalid-argument";
        case Errc::bad_checkpoint: return "bad-checkpoint";
        case Errc::io_failure: return "io-failure";
        case Errc::channel_mismatch: return "channel-mismatch";
        case Errc::collector_missing: return "collector-missing-in-training";
        case Errc::zero_mean_vector: return "zero-mean-vector";
        case Errc::invalid_size: return "invalid-size";
        case Errc::out_of_range_target: return "out-of-range-target";
        case Errc::empty_dataset: return "empty-dataset";
        case Errc::non_finite_loss: return "non-finite-loss";
        case Errc::no_classes_with_ground_truth: return "no-classes-with-ground-truth";
        case Errc::insufficient_samples: return "insufficient-samples";
        case Errc::length_mismatch: return "length-mismatch";
        case Errc::all_zero_differences: return "all-zero-differences";
        case Errc::out_of_range_p: return "out-of-range-p";
        case Errc::seed_mismatch: return "seed-mismatch";
        case Errc::empty_space: return "empty-space";
        case Errc::all_trials_failed: return "all-trials-failed";
        case Errc::insufficient_trials: return "insufficient-trials";
        case Errc::training_failure: return "training-failure";
        case Errc::malformed_json: return "malformed-json";
        case Errc::extra_top_level_keys: return "extra-top-level-keys";
        case Errc::unknown_tool: return "unknown-tool";
        case Errc::argument_schema_violation: return "argument-schema-violation";
        case Errc::tool_execution_failure: return "tool-execution-failure";
        case Errc::policy_protocol_violation: return "policy-protocol-violation";
        case Errc::field_count: return "field-count";
        case Errc::out_of_range: return "out-of-range";
        case Errc::non_numeric: return "non-numeric";
    }
    return "unknown";
}

}  // namespace mdf
