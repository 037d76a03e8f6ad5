#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "distillery/core.hpp"
#include "distillery/teacher.hpp"

namespace distillery::datagen {

enum class Purpose { initial_train, validation, refinement };

std::string_view to_string(Purpose purpose);

/// The five attack families every generation request asks for.
const std::vector<std::string>& default_spam_categories();
const std::vector<std::string>& default_ham_categories();

struct GenerationSpec {
  std::size_t count = 2000;
  double spam_ratio = 0.5;
  std::vector<std::string> categories = default_spam_categories();
  Purpose purpose = Purpose::initial_train;

  /// Throws Error(precondition) unless count >= 2 and 0 < spam_ratio < 1.
  void validate() const;
  std::size_t spam_target() const;
  std::size_t ham_target() const { return count - spam_target(); }
};

enum class Targets { false_positives, false_negatives, both };

std::string_view to_string(Targets targets);  // "FP", "FN", "BOTH"
std::optional<Targets> parse_targets(std::string_view text);

struct FailureHypothesis {
  std::string description;
  Targets targets = Targets::both;
  std::size_t requested_examples = 0;

  friend bool operator==(const FailureHypothesis&, const FailureHypothesis&) = default;
};

// ---------------------------------------------------------------------------
// Prompts

/// System prompt + one user message asking for spec.count lines of
/// `LABEL<TAB>CATEGORY<TAB>TEXT`.
teacher::Conversation build_generation_prompt(const GenerationSpec& spec,
                                              const std::string& system_prompt);

/// Asks for more examples of the classes a previous batch fell short on.
teacher::Conversation build_topup_prompt(const GenerationSpec& spec, std::size_t spam_needed,
                                         std::size_t ham_needed, const std::string& system_prompt);

/// Carries aggregate validation numbers and the hypotheses only, never any
/// dataset text. Throws Error(empty_hypotheses) on an empty list.
teacher::Conversation build_refinement_prompt(const std::vector<FailureHypothesis>& hypotheses,
                                              const MetricVector& metrics,
                                              std::size_t validation_size,
                                              const std::string& system_prompt);

/// The follow-up sent once when a reply cannot be parsed.
std::string repair_message(std::string_view expected_format);

inline constexpr std::string_view kExampleFormat = "LABEL<TAB>CATEGORY<TAB>TEXT";

// ---------------------------------------------------------------------------
// Parsing

struct LineDiagnostic {
  std::size_t line = 0;  // 1-based
  std::string reason;
};

struct ParseResult {
  std::vector<LabeledExample> examples;
  std::vector<LineDiagnostic> rejected;
};

/// Lenient parse: every non-blank line either becomes an example or a diagnostic.
ParseResult parse_examples_lenient(std::string_view reply, Origin origin = Origin::teacher());

/// As above, but a reply with no usable line throws Error(parse_failure).
ParseResult parse_examples(std::string_view reply, Origin origin = Origin::teacher());

// ---------------------------------------------------------------------------
// Balance and dedup

struct BalanceResult {
  std::vector<LabeledExample> kept;
  std::size_t duplicates = 0;
  std::size_t trimmed = 0;
  std::size_t spam_needed = 0;  // non-zero only when kept < 0.9 * spec.count
  std::size_t ham_needed = 0;

  bool short_of_target() const { return spam_needed + ham_needed > 0; }
};

/// Drops duplicates (against `existing` and within the batch), keeps the
/// minority class whole and trims the majority from the end so that
/// |spam - ham| <= ceil(0.05 * kept).
BalanceResult balance_and_dedup(const std::vector<LabeledExample>& examples,
                                const GenerationSpec& spec, const Dataset& existing);

// ---------------------------------------------------------------------------
// Teacher-driven collection

struct CollectOptions {
  std::string system_prompt;
  teacher::GenerationParams params;
  int max_topups = 2;
  Origin origin = Origin::teacher();
  /// Every outgoing user message is checked against this before sending.
  const WindowIndex* guard = nullptr;
};

struct CollectResult {
  std::vector<LabeledExample> examples;  // balanced, deduped against `existing`
  std::size_t requests = 0;
  std::size_t topups = 0;
  std::size_t repairs = 0;
  std::size_t rejected_lines = 0;
};

/// Sends `conversation`, parses (one repair re-ask on failure), balances and
/// tops up at most `max_topups` times while short of target.
CollectResult collect_examples(teacher::Teacher& teacher, teacher::Conversation conversation,
                               const GenerationSpec& spec, const Dataset& existing,
                               const CollectOptions& options);

/// Throws Error(airgap_violation) if any guarded window appears in a
/// system or user message of the conversation.
void check_outgoing(const teacher::Conversation& conversation, const WindowIndex* guard);

// ---------------------------------------------------------------------------
// Persistence: one JSON object per line {text, label, category, origin}.

void write_jsonl(const std::filesystem::path& path, const std::vector<LabeledExample>& examples);
std::vector<LabeledExample> read_jsonl(const std::filesystem::path& path);

}  // namespace distillery::datagen
