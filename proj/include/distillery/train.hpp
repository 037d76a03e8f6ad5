#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "distillery/core.hpp"
#include "distillery/student.hpp"
#include "distillery/teacher.hpp"

namespace distillery::train {

struct TrainHyper {
  double learning_rate = 0.5;  // tuned for the builtin student; see README
  std::size_t batch_size = 8;
  std::size_t epochs = 3;
  std::size_t rank = 32;
  double alpha = 64.0;
  std::uint64_t seed = 42;
  double beta = 0.1;  // DPO only

  /// All fields positive; epochs may be 0 (no-op training).
  void validate() const;

  friend bool operator==(const TrainHyper&, const TrainHyper&) = default;
};

/// The LoRA fields both supervised and preference training consume; kept
/// separate so method parity can be asserted structurally.
struct LoraFields {
  std::size_t rank;
  double alpha;
  double learning_rate;
  std::size_t batch_size;

  friend bool operator==(const LoraFields&, const LoraFields&) = default;
};

inline LoraFields lora_fields(const TrainHyper& h) {
  return {h.rank, h.alpha, h.learning_rate, h.batch_size};
}

inline constexpr double kProbClamp = 1e-7;

// ---------------------------------------------------------------------------
// Losses and gradients

/// Adapter gradient; A0 rows are sparse (only features seen in the batch).
struct Gradient {
  std::vector<double> b0, a1, b1;
  std::unordered_map<std::uint32_t, std::vector<double>> a0t;
};

/// Mean BCE over probabilities clamped to [eps, 1 - eps]. Throws
/// Error(empty_batch) on empty input.
double bce_loss(std::span<const double> probabilities, std::span<const Label> labels);
double bce_loss(const student::StudentModel& model, std::span<const LabeledExample> batch);

/// Mean BCE over pre-featurized inputs; fills `grad` when non-null.
double bce_loss_and_gradient(const student::StudentModel& model,
                             std::span<const student::FeatureVector> xs,
                             std::span<const Label> labels, Gradient* grad);

/// -log sigmoid(beta * [(log pi(y+) - log pi_ref(y+)) - (log pi(y-) - log pi_ref(y-))])
/// with log pi(spam) = log p and log pi(ham) = log(1 - p), p clamped.
double dpo_loss(double policy_p_spam, double reference_p_spam, Label chosen, double beta);
double dpo_loss(const student::StudentModel& policy, const student::StudentModel& reference,
                const PreferencePair& pair, double beta);

struct DpoItem {
  student::FeatureVector x;
  Label chosen;
  double reference_p;  // reference model's p(spam | x)
};

double dpo_loss_and_gradient(const student::StudentModel& policy, std::span<const DpoItem> items,
                             double beta, Gradient* grad);

/// Plain gradient step on the adapters.
void apply_gradient(student::StudentModel& model, const Gradient& grad, double learning_rate);

// ---------------------------------------------------------------------------
// Trainers over the builtin student

struct TrainResult {
  student::StudentModel model;
  std::vector<double> epoch_losses;  // mean loss per epoch, measured during the epoch
};

/// Student configuration with rank/alpha taken from the hyperparameters.
student::StudentConfig student_config(student::StudentConfig base, const TrainHyper& hyper);

/// Throws Error(precondition) unless the dataset is a training split,
/// Error(single_class_dataset), Error(non_finite_loss).
/// `initial` (optional) continues from existing adapters instead of the init.
TrainResult train_bce(const Dataset& dataset, const TrainHyper& hyper,
                      const student::StudentConfig& config = {},
                      const student::Adapters* initial = nullptr);

/// Reference = the untrained student. Throws Error(precondition) on an empty
/// list and Error(unparseable_response) on a bad pair.
TrainResult train_dpo(const std::vector<PreferencePair>& pairs, const TrainHyper& hyper,
                      const student::StudentConfig& config = {});

// ---------------------------------------------------------------------------
// Preference data

struct PreferenceBuildOptions {
  std::string system_prompt;
  teacher::GenerationParams params;
  std::size_t chunk_size = 500;
  int max_topups = 2;
  const WindowIndex* guard = nullptr;
};

struct PreferenceBuildResult {
  std::vector<PreferencePair> pairs;
  std::size_t requests = 0;
  std::size_t rejected_lines = 0;
};

teacher::Conversation build_preference_prompt(std::size_t count, const std::string& system_prompt);

/// Lines `TEXT<TAB>CHOSEN<TAB>REJECTED`; bad lines go to `rejected`.
std::vector<PreferencePair> parse_preferences(std::string_view reply,
                                              std::vector<std::string>* rejected = nullptr);

/// ceil(n / chunk) generation calls, plus at most `max_topups` while short;
/// parsed, deduped on the normalized prompt, balanced on the chosen label and
/// capped at n.
PreferenceBuildResult build_preference_dataset(teacher::Teacher& teacher, std::size_t n,
                                               const PreferenceBuildOptions& options);

void write_preferences(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs);
std::vector<PreferencePair> read_preferences(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Trainer interface

/// Something that labels SMS texts. predict_batch is side-effect free.
class Classifier {
 public:
  virtual ~Classifier() = default;
  virtual std::vector<student::Prediction> predict_batch(std::span<const std::string> texts) const = 0;
};

class Trainer {
 public:
  virtual ~Trainer() = default;
  virtual std::string name() const = 0;
  /// The model before any fine-tuning (zero-shot baseline).
  virtual std::unique_ptr<Classifier> untrained(const TrainHyper& hyper) = 0;
  virtual std::unique_ptr<Classifier> train(const Dataset& dataset, const TrainHyper& hyper,
                                            const std::filesystem::path& model_dir) = 0;
  virtual std::unique_ptr<Classifier> train_preferences(const std::vector<PreferencePair>& pairs,
                                                        const TrainHyper& hyper,
                                                        const std::filesystem::path& model_dir) = 0;
  virtual std::unique_ptr<Classifier> load(const std::filesystem::path& model_dir) = 0;
  /// Continues from the adapters saved in previous_dir. Optional capability;
  /// the default throws Error(precondition).
  virtual std::unique_ptr<Classifier> train_continue(const Dataset& dataset, const TrainHyper& hyper,
                                                     const std::filesystem::path& previous_dir,
                                                     const std::filesystem::path& model_dir);
};

class StudentClassifier : public Classifier {
 public:
  explicit StudentClassifier(student::StudentModel model) : model_(std::move(model)) {}
  std::vector<student::Prediction> predict_batch(std::span<const std::string> texts) const override;
  const student::StudentModel& model() const { return model_; }

 private:
  student::StudentModel model_;
};

inline constexpr const char* kStudentFile = "student.bin";

/// In-process trainer for the desk-scale student; saves model_dir/student.bin.
class BuiltinTrainer : public Trainer {
 public:
  explicit BuiltinTrainer(student::StudentConfig config = {}) : config_(config) {}
  std::string name() const override { return "builtin"; }
  std::unique_ptr<Classifier> untrained(const TrainHyper& hyper) override;
  std::unique_ptr<Classifier> train(const Dataset& dataset, const TrainHyper& hyper,
                                    const std::filesystem::path& model_dir) override;
  std::unique_ptr<Classifier> train_preferences(const std::vector<PreferencePair>& pairs,
                                                const TrainHyper& hyper,
                                                const std::filesystem::path& model_dir) override;
  std::unique_ptr<Classifier> load(const std::filesystem::path& model_dir) override;
  std::unique_ptr<Classifier> train_continue(const Dataset& dataset, const TrainHyper& hyper,
                                             const std::filesystem::path& previous_dir,
                                             const std::filesystem::path& model_dir) override;

  const std::vector<double>& last_epoch_losses() const { return last_losses_; }

 private:
  student::StudentConfig config_;
  std::vector<double> last_losses_;
};

// ---------------------------------------------------------------------------
// External trainer protocol (see docs/PROTOCOL.md)

struct ProcessResult {
  int exit_code = -1;
  int term_signal = 0;  // non-zero if killed by a signal
  bool timed_out = false;
  std::string out;
  std::string err;
};

/// fork/exec with the given argv, feeding `input` on stdin and collecting
/// stdout/stderr; the child is SIGKILLed after `timeout`.
ProcessResult run_process(const std::vector<std::string>& argv, const std::string& input,
                          std::chrono::milliseconds timeout);

struct ExternalTrainerConfig {
  std::vector<std::string> command;  // executable plus leading arguments
  std::chrono::milliseconds train_timeout{std::chrono::minutes(30)};
  std::chrono::milliseconds predict_timeout{std::chrono::minutes(30)};
};

inline constexpr const char* kManifestFile = "MANIFEST";
inline constexpr const char* kTrainDataFile = "train-data.jsonl";

/// Spawns `command train ...`; success iff exit 0 and model_dir/MANIFEST exists.
/// Throws Error(nonzero_exit) with stderr, Error(timeout), Error(missing_manifest).
void external_train(const ExternalTrainerConfig& config, const std::filesystem::path& data_file,
                    const std::filesystem::path& model_dir, const TrainHyper& hyper);

/// Spawns `command predict --model <dir>` (or `predict --zero-shot` when
/// model_dir is empty). Throws Error(line_count_mismatch),
/// Error(unparseable_line), Error(child_crash), Error(timeout).
std::vector<student::Prediction> external_predict(const ExternalTrainerConfig& config,
                                                  const std::filesystem::path& model_dir,
                                                  std::span<const std::string> texts);

class ExternalClassifier : public Classifier {
 public:
  ExternalClassifier(ExternalTrainerConfig config, std::filesystem::path model_dir)
      : config_(std::move(config)), model_dir_(std::move(model_dir)) {}
  std::vector<student::Prediction> predict_batch(std::span<const std::string> texts) const override;

 private:
  ExternalTrainerConfig config_;
  std::filesystem::path model_dir_;
};

class ExternalTrainer : public Trainer {
 public:
  explicit ExternalTrainer(ExternalTrainerConfig config);
  std::string name() const override { return "external"; }
  std::unique_ptr<Classifier> untrained(const TrainHyper& hyper) override;
  std::unique_ptr<Classifier> train(const Dataset& dataset, const TrainHyper& hyper,
                                    const std::filesystem::path& model_dir) override;
  std::unique_ptr<Classifier> train_preferences(const std::vector<PreferencePair>& pairs,
                                                const TrainHyper& hyper,
                                                const std::filesystem::path& model_dir) override;
  std::unique_ptr<Classifier> load(const std::filesystem::path& model_dir) override;

 private:
  ExternalTrainerConfig config_;
};

}  // namespace distillery::train
