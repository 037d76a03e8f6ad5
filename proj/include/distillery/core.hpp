#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "distillery/error.hpp"

namespace distillery {

// ---------------------------------------------------------------------------
// Text utilities

/// Lowercases ASCII letters, collapses runs of whitespace to one space and
/// trims both ends. Non-ASCII bytes pass through untouched.
std::string normalize_text(std::string_view text);

bool is_valid_utf8(std::string_view bytes);

/// Reinterprets every byte as a Latin-1 code point and re-encodes as UTF-8.
std::string latin1_to_utf8(std::string_view bytes);

/// Number of code points; invalid sequences count one per byte.
std::size_t utf8_length(std::string_view text);

/// Longest prefix holding at most `max_chars` code points.
std::string_view utf8_prefix(std::string_view text, std::size_t max_chars);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);

std::string_view trim(std::string_view text);

/// Set of every `window`-character substring of a collection of texts.
/// Used to prove that no text from a protected set (validation data,
/// sealed test data) reaches a teacher conversation.
class WindowIndex {
 public:
  explicit WindowIndex(std::size_t window = 20) : window_(window) {}

  void add(std::string_view text);
  std::size_t window() const { return window_; }
  bool empty() const { return windows_.empty(); }

  /// Number of `window`-character substrings of `haystack` present in the index.
  std::size_t count_matches(std::string_view haystack) const;
  bool leaks_into(std::string_view haystack) const { return count_matches(haystack) > 0; }

 private:
  std::size_t window_;
  std::unordered_set<std::string> windows_;
};

// ---------------------------------------------------------------------------
// Labels and examples

/// Spam is the positive class everywhere.
enum class Label { ham = 0, spam = 1 };

std::string_view to_string(Label label);
/// Case-insensitive "spam"/"ham" after trimming.
std::optional<Label> parse_label(std::string_view text);
/// Response-to-label rule for free-text classifier outputs: the leading token
/// (letters only, case-insensitive) must be "spam" or "ham".
std::optional<Label> parse_response_label(std::string_view response);

enum class OriginKind { teacher_generated, refinement, real_corpus };

struct Origin {
  OriginKind kind = OriginKind::teacher_generated;
  int round = 0;  // refinement round, only meaningful for OriginKind::refinement

  static Origin teacher() { return {OriginKind::teacher_generated, 0}; }
  static Origin refinement_round(int k) { return {OriginKind::refinement, k}; }

  friend bool operator==(const Origin&, const Origin&) = default;
};

std::string to_string(const Origin& origin);
std::optional<Origin> parse_origin(std::string_view text);

inline constexpr std::size_t kMaxMessageChars = 1000;

namespace eval {
class CorpusReader;
}
class CorpusAccess;

/// One SMS with its label. Text is trimmed, non-empty, and capped at
/// kMaxMessageChars code points (longer input is truncated with a warning).
class LabeledExample {
 public:
  /// Throws Error(precondition) on empty text or a real-corpus origin.
  LabeledExample(std::string text, Label label, std::string category = {},
                 Origin origin = Origin::teacher());

  /// Real-corpus examples; the key can only be minted by the evaluation module.
  LabeledExample(const CorpusAccess& key, std::string text, Label label);

  const std::string& text() const { return text_; }
  Label label() const { return label_; }
  const std::string& category() const { return category_; }
  const Origin& origin() const { return origin_; }

  friend bool operator==(const LabeledExample&, const LabeledExample&) = default;

 private:
  void assign_text(std::string text);

  std::string text_;
  Label label_;
  std::string category_;
  Origin origin_;
};

/// Passkey for constructing real-corpus examples; see eval.
class CorpusAccess {
 private:
  CorpusAccess() = default;
  friend class eval::CorpusReader;
};

enum class SplitTag { train, validation, test };

std::string_view to_string(SplitTag tag);

enum class InsertResult { inserted, duplicate };

/// Ordered examples with no two sharing the same normalized text.
class Dataset {
 public:
  explicit Dataset(SplitTag tag = SplitTag::train) : tag_(tag) {}

  InsertResult insert(LabeledExample example);
  bool contains_normalized(std::string_view normalized_key) const;

  SplitTag split() const { return tag_; }
  std::size_t size() const { return examples_.size(); }
  bool empty() const { return examples_.empty(); }
  std::size_t count(Label label) const { return label == Label::spam ? spam_ : ham_; }
  const std::vector<LabeledExample>& examples() const { return examples_; }
  const LabeledExample& operator[](std::size_t i) const { return examples_[i]; }

  /// Digest over label, category, origin and text of every example, in order.
  std::string content_digest() const;

 private:
  SplitTag tag_;
  std::vector<LabeledExample> examples_;
  std::unordered_set<std::string> keys_;
  std::size_t spam_ = 0;
  std::size_t ham_ = 0;
};

/// An SMS prompt with a preferred and a rejected classification response.
struct PreferencePair {
  std::string prompt;
  std::string chosen;
  std::string rejected;

  /// Throws Error(unparseable_response) unless chosen and rejected differ and
  /// both map to a label.
  void validate() const;
  Label chosen_label() const;
  Label rejected_label() const;
};

// ---------------------------------------------------------------------------
// Metrics bookkeeping

struct ConfusionMatrix {
  std::uint64_t tp = 0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  std::uint64_t tn = 0;

  std::uint64_t total() const { return tp + fp + fn + tn; }
  void add(Label truth, Label predicted);

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

enum class MetricConvention { binary_spam_positive, macro_averaged };

std::string_view to_string(MetricConvention convention);

struct MetricVector {
  double accuracy = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::uint64_t fp = 0;
  std::uint64_t fn = 0;
  MetricConvention convention = MetricConvention::binary_spam_positive;
  bool degenerate = false;  // some denominator was zero; that metric reads 0
  ConfusionMatrix source;

  friend bool operator==(const MetricVector&, const MetricVector&) = default;
};

struct TokenUsage {
  std::uint64_t prompt_tokens = 0;
  std::uint64_t completion_tokens = 0;
  bool estimated = false;

  std::uint64_t total() const { return prompt_tokens + completion_tokens; }
  TokenUsage& operator+=(const TokenUsage& other);
  friend TokenUsage operator+(TokenUsage a, const TokenUsage& b) { return a += b; }
  friend bool operator==(const TokenUsage&, const TokenUsage&) = default;
};

TokenUsage operator-(const TokenUsage& a, const TokenUsage& b);

enum class StopReason { plateau, max_iterations, teacher_failure };

std::string_view to_string(StopReason reason);
std::optional<StopReason> parse_stop_reason(std::string_view text);

struct IterationRecord {
  int index = 0;
  std::size_t train_size = 0;
  MetricVector metrics;  // on the fixed validation set
  std::vector<std::string> hypotheses;
  std::size_t refinement_size = 0;
  TokenUsage usage;

  friend bool operator==(const IterationRecord&, const IterationRecord&) = default;
};

struct RunRecord {
  std::string validation_digest;
  TokenUsage setup_usage;  // validation and initial training set generation
  std::vector<IterationRecord> iterations;
  std::optional<StopReason> stop_reason;

  /// Appends, enforcing contiguous indices from 1.
  void append(IterationRecord record);
  TokenUsage total_usage() const;

  friend bool operator==(const RunRecord&, const RunRecord&) = default;
};

}  // namespace distillery
