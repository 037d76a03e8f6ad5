#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace distillery {

enum class ErrorKind {
  precondition,
  // teacher
  credential_missing,
  exhausted_retries,
  malformed_endpoint_response,
  endpoint_rejected,
  fixture_exhausted,
  // datagen / parsing
  parse_failure,
  empty_hypotheses,
  // student / training
  dimension_mismatch,
  empty_batch,
  single_class_dataset,
  non_finite_loss,
  unparseable_response,
  model_load_failure,
  // external trainer protocol
  nonzero_exit,
  timeout,
  missing_manifest,
  line_count_mismatch,
  unparseable_line,
  child_crash,
  // evaluation
  unreadable_file,
  insufficient_class_count,
  predictor_failure,
  empty_matrix,
  corpus_missing,
  airgap_violation,
  // configuration / persistence
  config,
  io,
};

std::string_view to_string(ErrorKind kind);

/// Every failure raised by the library carries a kind so callers (the loop,
/// the CLI exit-code mapping, tests) can tell them apart without parsing text.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace distillery
