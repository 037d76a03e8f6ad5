#pragma once

#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillery/core.hpp"
#include "distillery/datagen.hpp"
#include "distillery/teacher.hpp"
#include "distillery/train.hpp"

namespace distillery::loop {

enum class PlateauMetric { f1, accuracy };

std::string_view to_string(PlateauMetric metric);

struct LoopConfig {
  std::size_t max_iterations = 6;
  double plateau_epsilon = 0.005;
  std::size_t plateau_patience = 2;
  PlateauMetric plateau_metric = PlateauMetric::f1;
  std::size_t initial_train_size = 2000;
  std::size_t validation_size = 500;
  std::size_t refinement_size = 300;
  /// Keep training the previous adapters instead of retraining from init.
  bool continue_training = false;

  void validate() const;
};

/// True iff each of the last `patience` improvements of the plateau metric is
/// below epsilon (within 1e-12, so an improvement that prints as exactly
/// epsilon does not count as progress), or the history has reached
/// max_iterations. Throws Error(precondition) on an empty history.
bool check_plateau(std::span<const double> history, const LoopConfig& config);
bool check_plateau(std::span<const MetricVector> history, const LoopConfig& config);

/// Aggregate numbers only: Acc, Prec, Rec, F1, FP, FN, validation size and
/// the iteration index, plus the hypothesis reply format.
teacher::ChatMessage build_feedback(const MetricVector& metrics, std::size_t validation_size,
                                    std::size_t iteration, std::size_t refinement_size);

/// Lines `HYPOTHESIS<TAB>FP|FN|BOTH<TAB>COUNT`; other lines are ignored.
/// Counts whose total exceeds `cap` are scaled down proportionally.
std::vector<datagen::FailureHypothesis> parse_hypotheses(std::string_view reply, std::size_t cap);

/// The locally synthesized fallback: FP if FP > FN else FN, `count` examples.
datagen::FailureHypothesis default_hypothesis(const MetricVector& metrics, std::size_t count);

// ---------------------------------------------------------------------------

struct DistillOptions {
  LoopConfig loop;
  train::TrainHyper hyper;
  std::string student_name = "a small student classifier";
  std::string teacher_model = "scripted";
  std::filesystem::path run_dir;
  /// Timestamps for transcript.log; scripted runs pass a logical clock.
  teacher::TranscriptLog::Clock transcript_clock = teacher::utc_clock;
  /// Called after each iteration has been persisted.
  std::function<void(const IterationRecord&)> on_iteration;
};

struct DistillResult {
  std::unique_ptr<train::Classifier> model;  // null if no iteration completed
  std::filesystem::path model_dir;
  RunRecord record;
  bool resumed = false;
  std::optional<ErrorKind> failure_kind;  // set on teacher failure
  std::string failure_message;
};

inline constexpr const char* kRunManifest = "run.json";
inline constexpr const char* kTrainFile = "train.jsonl";
inline constexpr const char* kValidationFile = "validation.jsonl";
inline constexpr const char* kTranscriptFile = "transcript.log";

std::filesystem::path model_dir_for(const std::filesystem::path& run_dir, std::size_t iteration);
std::filesystem::path refinement_file_for(const std::filesystem::path& run_dir, std::size_t iteration);

/// Generates V once, then F, then iterates train -> validate -> plateau check
/// -> hypotheses -> refinement until a stop. Every completed step is persisted
/// under run_dir; calling again on the same run_dir resumes after the last
/// completed iteration. Teacher failures are recorded (stop reason
/// teacher-failure) and reported in the result; trainer failures throw.
DistillResult run_distillation(teacher::Teacher& teacher, train::Trainer& trainer,
                               const DistillOptions& options);

/// True for error kinds that originate at the teacher or its replies.
bool is_teacher_failure(ErrorKind kind);

// ---------------------------------------------------------------------------
// JSON forms used by run.json and report.json.

nlohmann::ordered_json to_json(const TokenUsage& usage);
TokenUsage usage_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const MetricVector& metrics);
MetricVector metrics_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const RunRecord& record);
RunRecord run_record_from_json(const nlohmann::json& j);
nlohmann::ordered_json to_json(const LoopConfig& config);
LoopConfig loop_config_from_json(const nlohmann::json& j, LoopConfig defaults = {});
nlohmann::ordered_json to_json(const train::TrainHyper& hyper);
train::TrainHyper hyper_from_json(const nlohmann::json& j, train::TrainHyper defaults = {});

/// Writes via a temporary file and rename.
void write_json_atomic(const std::filesystem::path& path, const nlohmann::ordered_json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace distillery::loop
