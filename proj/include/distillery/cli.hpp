#pragma once

#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillery/eval.hpp"
#include "distillery/loop.hpp"
#include "distillery/student.hpp"
#include "distillery/teacher.hpp"
#include "distillery/train.hpp"

namespace distillery::cli {

struct TeacherSource {
  /// Exactly one of these is set.
  std::optional<std::filesystem::path> fixture;
  std::optional<std::string> endpoint;
  std::string model = "scripted";
  int max_retries = 3;
};

struct TrainerSource {
  /// Empty command means the builtin student.
  std::vector<std::string> external_command;
  std::chrono::milliseconds train_timeout{std::chrono::minutes(30)};
  std::chrono::milliseconds predict_timeout{std::chrono::minutes(30)};
  student::StudentConfig student;  // builtin only

  bool builtin() const { return external_command.empty(); }
};

struct RunConfig {
  TeacherSource teacher;
  TrainerSource trainer;
  train::TrainHyper hyper;
  loop::LoopConfig loop;
  std::filesystem::path corpus;
  std::size_t test_per_class = eval::kDefaultTestPerClass;
  std::uint64_t seed = 42;
  std::filesystem::path run_dir;
  std::string student_name = "a small student classifier";
  std::size_t dpo_pairs = 10000;
  std::size_t dpo_chunk_size = 500;

  /// Throws Error(config) on an inconsistent configuration.
  void validate() const;
};

/// Parses a config document. Relative paths are resolved against `base_dir`.
/// Unknown keys are rejected. Throws Error(config).
RunConfig parse_config(const nlohmann::json& j, const std::filesystem::path& base_dir = {});
RunConfig load_config(const std::filesystem::path& path);
/// Canonical form, also written to <run-dir>/config.json.
nlohmann::ordered_json to_json(const RunConfig& config);

/// The seed governs both training and the test-set sample.
void apply_seed(RunConfig& config, std::uint64_t seed);

std::unique_ptr<teacher::Teacher> make_teacher(const RunConfig& config);
std::unique_ptr<train::Trainer> make_trainer(const RunConfig& config);

inline constexpr const char* kReportFile = "report.json";
inline constexpr const char* kTimingFile = "timing.json";
inline constexpr const char* kConfigFile = "config.json";
inline constexpr const char* kPreferenceFile = "preferences.jsonl";

/// What every command returns: the printed table plus the report.json body
/// (deterministic for a fixed config; wall time lives in timing.json).
struct Report {
  std::vector<eval::ReportRow> rows;
  nlohmann::ordered_json json;
  std::string text() const;
};

Report cmd_baseline(const RunConfig& config);
Report cmd_distill(const RunConfig& config);
Report cmd_dpo(const RunConfig& config);
/// Sealed-test evaluation of a saved model; never constructs a teacher.
Report cmd_eval(const RunConfig& config, const std::filesystem::path& model_dir);
/// Re-renders the reports stored in the given run directories.
Report cmd_report(const std::vector<std::filesystem::path>& run_dirs);

/// 0 success, 2 config, 3 teacher, 4 trainer, 5 evaluation.
int exit_code_for(ErrorKind kind);

/// Entry point shared by the executable and the tests.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace distillery::cli
