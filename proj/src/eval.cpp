#include "distillery/eval.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "distillery/student.hpp"

namespace distillery::eval {

namespace {

std::size_t count_label(const std::vector<LabeledExample>& xs, Label label) {
  return static_cast<std::size_t>(
      std::count_if(xs.begin(), xs.end(), [label](const auto& e) { return e.label() == label; }));
}

constexpr std::size_t kPredictChunk = 512;

// Runs the classifier over texts in chunks, accumulating against `truth`.
ConfusionMatrix run_confusion(const train::Classifier& c, const std::vector<LabeledExample>& xs) {
  ConfusionMatrix cm;
  std::vector<std::string> texts;
  for (std::size_t b = 0; b < xs.size(); b += kPredictChunk) {
    const std::size_t e = std::min(xs.size(), b + kPredictChunk);
    texts.clear();
    for (std::size_t i = b; i < e; ++i) texts.push_back(xs[i].text());
    std::vector<student::Prediction> preds;
    try {
      preds = c.predict_batch(texts);
    } catch (const std::exception& ex) {
      throw Error(ErrorKind::predictor_failure, "examples [" + std::to_string(b) + ", " +
                                                    std::to_string(e) + "): " + ex.what());
    }
    if (preds.size() != texts.size()) {
      throw Error(ErrorKind::predictor_failure,
                  "examples [" + std::to_string(b) + ", " + std::to_string(e) + "): got " +
                      std::to_string(preds.size()) + " predictions");
    }
    for (std::size_t i = b; i < e; ++i) cm.add(xs[i].label(), preds[i - b].label);
  }
  return cm;
}

double ratio(std::uint64_t num, std::uint64_t den, bool& degenerate) {
  if (den == 0) {
    degenerate = true;
    return 0.0;
  }
  return static_cast<double>(num) / static_cast<double>(den);
}

double harmonic(double p, double r, bool& degenerate) {
  if (p + r == 0.0) {
    degenerate = true;
    return 0.0;
  }
  return 2.0 * p * r / (p + r);
}

}  // namespace

// ---------------------------------------------------------------------------

std::size_t Corpus::count(Label label) const { return count_label(examples_, label); }

Corpus CorpusReader::parse(std::string_view contents) {
  static const CorpusAccess key;
  Corpus corpus;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < contents.size()) {
    auto end = contents.find('\n', start);
    if (end == std::string_view::npos) end = contents.size();
    std::string_view raw = contents.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!raw.empty() && raw.back() == '\r') raw.remove_suffix(1);
    if (trim(raw).empty()) continue;

    std::string line;
    if (is_valid_utf8(raw)) {
      line = std::string(raw);
    } else {
      line = latin1_to_utf8(raw);
      ++corpus.latin1_lines_;
    }
    const auto tab = line.find('\t');
    const auto label = tab == std::string::npos ? std::nullopt : parse_label(line.substr(0, tab));
    const auto text = tab == std::string::npos ? std::string_view{} : trim(std::string_view(line).substr(tab + 1));
    if (!label) {
      corpus.diagnostics_.push_back(
          {line_no, tab == std::string::npos ? "missing tab separator" : "unknown label"});
    } else if (text.empty()) {
      corpus.diagnostics_.push_back({line_no, "empty message"});
    } else {
      corpus.examples_.emplace_back(key, std::string(text), *label);
    }
  }
  return corpus;
}

Corpus CorpusReader::read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::unreadable_file, "cannot open corpus " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  if (in.bad()) throw Error(ErrorKind::unreadable_file, "read error on " + path.string());
  auto corpus = parse(ss.str());
  for (const auto& d : corpus.diagnostics()) {
    spdlog::warn("{}:{}: skipped ({})", path.string(), d.line, d.reason);
  }
  spdlog::info("corpus {}: {} messages ({} spam, {} ham)", path.string(), corpus.size(),
               corpus.count(Label::spam), corpus.count(Label::ham));
  return corpus;
}

Corpus load_sms_corpus(const std::filesystem::path& path) { return CorpusReader::read(path); }

// ---------------------------------------------------------------------------

std::size_t SealedTestSet::count(Label label) const { return count_label(examples_, label); }

std::size_t SealedTestSet::count_leaks(std::string_view haystack, std::size_t window) const {
  WindowIndex index(window);
  for (const auto& e : examples_) index.add(e.text());
  return index.count_matches(haystack);
}

SealedTestSet build_balanced_test(const Corpus& corpus, std::uint64_t seed, std::size_t per_class) {
  if (per_class == 0) throw Error(ErrorKind::precondition, "per-class size must be positive");
  std::vector<std::size_t> spam, ham;
  for (std::size_t i = 0; i < corpus.examples_.size(); ++i) {
    (corpus.examples_[i].label() == Label::spam ? spam : ham).push_back(i);
  }
  if (spam.size() < per_class || ham.size() < per_class) {
    throw Error(ErrorKind::insufficient_class_count,
                "need " + std::to_string(per_class) + " of each class, corpus has " +
                    std::to_string(spam.size()) + " spam and " + std::to_string(ham.size()) +
                    " ham");
  }
  // Partial Fisher-Yates: the first k slots become a uniform sample.
  auto sample = [](std::vector<std::size_t>& pool, std::size_t k, std::uint64_t s) {
    student::Rng rng(s);
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(pool[i], pool[i + rng.below(pool.size() - i)]);
    }
    pool.resize(k);
  };
  if (spam.size() > per_class) sample(spam, per_class, student::derive_seed(seed, "spam-sample"));
  sample(ham, per_class, student::derive_seed(seed, "ham-sample"));

  std::vector<std::size_t> keep(spam);
  keep.insert(keep.end(), ham.begin(), ham.end());
  std::sort(keep.begin(), keep.end());

  SealedTestSet set;
  set.seed_ = seed;
  std::string digest_input;
  for (auto i : keep) {
    const auto& e = corpus.examples_[i];
    set.examples_.push_back(e);
    digest_input += to_string(e.label());
    digest_input += '\t';
    digest_input += e.text();
    digest_input += '\n';
  }
  set.digest_ = sha256_hex(digest_input);
  return set;
}

// ---------------------------------------------------------------------------

ConfusionMatrix confusion(const train::Classifier& classifier, const Dataset& dataset) {
  return run_confusion(classifier, dataset.examples());
}

ConfusionMatrix confusion(const train::Classifier& classifier, const SealedTestSet& test) {
  return run_confusion(classifier, test.examples_);
}

ConfusionMatrix confusion(std::span<const Label> truth, std::span<const Label> predicted) {
  if (truth.size() != predicted.size()) {
    throw Error(ErrorKind::precondition, "truth and predictions differ in length");
  }
  ConfusionMatrix cm;
  for (std::size_t i = 0; i < truth.size(); ++i) cm.add(truth[i], predicted[i]);
  return cm;
}

MetricVector metrics(const ConfusionMatrix& cm, MetricConvention convention) {
  if (cm.total() == 0) throw Error(ErrorKind::empty_matrix, "no predictions to score");
  MetricVector m;
  m.convention = convention;
  m.source = cm;
  m.fp = cm.fp;
  m.fn = cm.fn;
  bool deg = false;
  m.accuracy = ratio(cm.tp + cm.tn, cm.total(), deg);
  if (convention == MetricConvention::binary_spam_positive) {
    m.precision = ratio(cm.tp, cm.tp + cm.fp, deg);
    m.recall = ratio(cm.tp, cm.tp + cm.fn, deg);
    m.f1 = harmonic(m.precision, m.recall, deg);
  } else {
    const double p_spam = ratio(cm.tp, cm.tp + cm.fp, deg);
    const double p_ham = ratio(cm.tn, cm.tn + cm.fn, deg);
    const double r_spam = ratio(cm.tp, cm.tp + cm.fn, deg);
    const double r_ham = ratio(cm.tn, cm.tn + cm.fp, deg);
    m.precision = (p_spam + p_ham) / 2.0;
    m.recall = (r_spam + r_ham) / 2.0;
    m.f1 = (harmonic(p_spam, r_spam, deg) + harmonic(p_ham, r_ham, deg)) / 2.0;
  }
  m.degenerate = deg;
  return m;
}

// ---------------------------------------------------------------------------

double round_half_away(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  // The nudge absorbs binary representation error at exact .5 boundaries.
  const double scaled = value * scale;
  return std::round(scaled + std::copysign(1e-9 * std::max(1.0, std::fabs(scaled)), scaled)) / scale;
}

std::string format_percent(double fraction) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(2) << round_half_away(fraction * 100.0, 2);
  return o.str();
}

std::string format_tokens(std::uint64_t tokens) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(2) << round_half_away(static_cast<double>(tokens) / 1000.0, 2)
    << 'K';
  return o.str();
}

std::string format_duration(double seconds) {
  std::ostringstream o;
  if (seconds < 60.0) {
    o << std::fixed << std::setprecision(1) << seconds << " s";
  } else {
    o << '~' << static_cast<long long>(std::llround(seconds / 60.0)) << " min";
  }
  return o.str();
}

std::string format_report(std::span<const ReportRow> rows) {
  std::size_t model_w = 5;
  for (const auto& r : rows) model_w = std::max(model_w, r.model.size());
  model_w += 2;
  constexpr int kNum = 9;
  constexpr int kTok = 11;

  std::ostringstream o;
  o << std::left << std::setw(static_cast<int>(model_w)) << "Model" << std::right
    << std::setw(kNum) << "Acc." << std::setw(kNum) << "Prec." << std::setw(kNum) << "Recall"
    << std::setw(kNum) << "F1" << std::setw(kTok) << "Tokens" << std::setw(kTok) << "Time"
    << '\n';
  for (const auto& r : rows) {
    o << std::left << std::setw(static_cast<int>(model_w)) << r.model << std::right
      << std::setw(kNum) << format_percent(r.metrics.accuracy) + "%" << std::setw(kNum)
      << format_percent(r.metrics.precision) + "%" << std::setw(kNum)
      << format_percent(r.metrics.recall) + "%" << std::setw(kNum)
      << format_percent(r.metrics.f1) + "%" << std::setw(kTok)
      << (r.tokens ? format_tokens(*r.tokens) : "-") << std::setw(kTok)
      << (r.seconds ? format_duration(*r.seconds) : "-") << '\n';
  }
  return o.str();
}

}  // namespace distillery::eval
