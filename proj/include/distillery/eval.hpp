#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "distillery/core.hpp"
#include "distillery/train.hpp"

namespace distillery::eval {

inline constexpr std::size_t kDefaultTestPerClass = 747;

struct CorpusDiagnostic {
  std::size_t line = 0;
  std::string reason;
};

class SealedTestSet;

/// Parsed real corpus. Its messages are not enumerable outside this module;
/// only counts and diagnostics are public.
class Corpus {
 public:
  std::size_t size() const { return examples_.size(); }
  std::size_t count(Label label) const;
  const std::vector<CorpusDiagnostic>& diagnostics() const { return diagnostics_; }
  /// Lines that needed the Latin-1 fallback.
  std::size_t latin1_lines() const { return latin1_lines_; }

 private:
  friend class CorpusReader;
  friend SealedTestSet build_balanced_test(const Corpus&, std::uint64_t, std::size_t);

  std::vector<LabeledExample> examples_;
  std::vector<CorpusDiagnostic> diagnostics_;
  std::size_t latin1_lines_ = 0;
};

/// The only code allowed to mint real-corpus examples.
class CorpusReader {
 public:
  static Corpus read(const std::filesystem::path& path);
  static Corpus parse(std::string_view contents);
};

/// Reads `label<TAB>text` lines (UTF-8, Latin-1 fallback per line). Malformed
/// lines are skipped and reported. Throws Error(unreadable_file).
Corpus load_sms_corpus(const std::filesystem::path& path);

/// Balanced real-data test split. Texts never leave this module: callers get
/// sizes, a digest and aggregate evaluation results only.
class SealedTestSet {
 public:
  std::size_t size() const { return examples_.size(); }
  std::size_t count(Label label) const;
  const std::string& digest() const { return digest_; }
  std::uint64_t seed() const { return seed_; }

  /// Number of `window`-character substrings of `haystack` that also occur in
  /// a sealed text (the transcript audit).
  std::size_t count_leaks(std::string_view haystack, std::size_t window = 20) const;

 private:
  friend SealedTestSet build_balanced_test(const Corpus&, std::uint64_t, std::size_t);
  friend ConfusionMatrix confusion(const train::Classifier&, const SealedTestSet&);

  std::vector<LabeledExample> examples_;  // corpus duplicates are kept
  std::string digest_;
  std::uint64_t seed_ = 0;
};

/// Keeps `per_class` spam and samples `per_class` ham uniformly without
/// replacement (a corpus with more spam than that is sampled the same way).
/// Throws Error(insufficient_class_count).
SealedTestSet build_balanced_test(const Corpus& corpus, std::uint64_t seed,
                                  std::size_t per_class = kDefaultTestPerClass);

/// Spam is positive. A classifier failure becomes Error(predictor_failure)
/// naming the index range, never the text.
ConfusionMatrix confusion(const train::Classifier& classifier, const Dataset& dataset);
ConfusionMatrix confusion(const train::Classifier& classifier, const SealedTestSet& test);
ConfusionMatrix confusion(std::span<const Label> truth, std::span<const Label> predicted);

/// Throws Error(empty_matrix) when total is 0. Zero denominators give 0 and
/// set `degenerate`.
MetricVector metrics(const ConfusionMatrix& cm,
                     MetricConvention convention = MetricConvention::binary_spam_positive);

// ---------------------------------------------------------------------------
// Reporting

/// Round half away from zero at `decimals` places.
double round_half_away(double value, int decimals);
/// Fraction as a percentage with two decimals: 0.4980 -> "49.80".
std::string format_percent(double fraction);
/// 27910 -> "27.91K".
std::string format_tokens(std::uint64_t tokens);
/// "42.0 s" below a minute, "~7 min" above.
std::string format_duration(double seconds);

struct ReportRow {
  std::string model;
  MetricVector metrics;
  std::optional<std::uint64_t> tokens;
  std::optional<double> seconds;
};

/// Fixed-width table: Model, Acc., Prec., Recall, F1, Tokens, Time.
std::string format_report(std::span<const ReportRow> rows);

}  // namespace distillery::eval
