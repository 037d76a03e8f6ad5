#include "distillery/core.hpp"

#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <array>
#include <cctype>
#include <charconv>

namespace distillery {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::precondition: return "precondition";
    case ErrorKind::credential_missing: return "credential-missing";
    case ErrorKind::exhausted_retries: return "exhausted-retries";
    case ErrorKind::malformed_endpoint_response: return "malformed-endpoint-response";
    case ErrorKind::endpoint_rejected: return "endpoint-rejected";
    case ErrorKind::fixture_exhausted: return "fixture-exhausted";
    case ErrorKind::parse_failure: return "parse-failure";
    case ErrorKind::empty_hypotheses: return "empty-hypotheses";
    case ErrorKind::dimension_mismatch: return "dimension-mismatch";
    case ErrorKind::empty_batch: return "empty-batch";
    case ErrorKind::single_class_dataset: return "single-class-dataset";
    case ErrorKind::non_finite_loss: return "non-finite-loss";
    case ErrorKind::unparseable_response: return "unparseable-response";
    case ErrorKind::model_load_failure: return "model-load-failure";
    case ErrorKind::nonzero_exit: return "nonzero-exit";
    case ErrorKind::timeout: return "timeout";
    case ErrorKind::missing_manifest: return "missing-manifest";
    case ErrorKind::line_count_mismatch: return "line-count-mismatch";
    case ErrorKind::unparseable_line: return "unparseable-line";
    case ErrorKind::child_crash: return "child-crash";
    case ErrorKind::unreadable_file: return "unreadable-file";
    case ErrorKind::insufficient_class_count: return "insufficient-class-count";
    case ErrorKind::predictor_failure: return "predictor-failure";
    case ErrorKind::empty_matrix: return "empty-matrix";
    case ErrorKind::corpus_missing: return "corpus-missing";
    case ErrorKind::airgap_violation: return "airgap-violation";
    case ErrorKind::config: return "config";
    case ErrorKind::io: return "io";
  }
  return "unknown";
}

namespace {

bool is_space(unsigned char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Length of the UTF-8 sequence starting at `i`, or 0 if it is not well formed.
std::size_t utf8_sequence_length(std::string_view s, std::size_t i) {
  const auto c = static_cast<unsigned char>(s[i]);
  std::size_t len = 0;
  std::uint32_t min_cp = 0;
  std::uint32_t cp = 0;
  if (c < 0x80) return 1;
  if ((c & 0xE0) == 0xC0) { len = 2; min_cp = 0x80; cp = c & 0x1F; }
  else if ((c & 0xF0) == 0xE0) { len = 3; min_cp = 0x800; cp = c & 0x0F; }
  else if ((c & 0xF8) == 0xF0) { len = 4; min_cp = 0x10000; cp = c & 0x07; }
  else return 0;
  if (i + len > s.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto cc = static_cast<unsigned char>(s[i + k]);
    if ((cc & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (cc & 0x3F);
  }
  if (cp < min_cp || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return 0;
  return len;
}

// Advances over one code point; malformed bytes count as one.
std::size_t next_char(std::string_view s, std::size_t i) {
  const std::size_t len = utf8_sequence_length(s, i);
  return i + (len == 0 ? 1 : len);
}

}  // namespace

std::string normalize_text(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  bool pending_space = false;
  for (const char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back(c < 0x80 ? static_cast<char>(std::tolower(c)) : ch);
  }
  return out;
}

bool is_valid_utf8(std::string_view bytes) {
  for (std::size_t i = 0; i < bytes.size();) {
    const std::size_t len = utf8_sequence_length(bytes, i);
    if (len == 0) return false;
    i += len;
  }
  return true;
}

std::string latin1_to_utf8(std::string_view bytes) {
  std::string out;
  out.reserve(bytes.size() + bytes.size() / 4);
  for (const char ch : bytes) {
    const auto c = static_cast<unsigned char>(ch);
    if (c < 0x80) {
      out.push_back(ch);
    } else {
      out.push_back(static_cast<char>(0xC0 | (c >> 6)));
      out.push_back(static_cast<char>(0x80 | (c & 0x3F)));
    }
  }
  return out;
}

std::size_t utf8_length(std::string_view text) {
  std::size_t n = 0;
  for (std::size_t i = 0; i < text.size(); i = next_char(text, i)) ++n;
  return n;
}

std::string_view utf8_prefix(std::string_view text, std::size_t max_chars) {
  std::size_t i = 0;
  for (std::size_t n = 0; n < max_chars && i < text.size(); ++n) i = next_char(text, i);
  return text.substr(0, i);
}

std::string sha256_hex(std::string_view bytes) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::io, "SHA-256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * len);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string_view trim(std::string_view text) {
  std::size_t b = 0;
  std::size_t e = text.size();
  while (b < e && is_space(static_cast<unsigned char>(text[b]))) ++b;
  while (e > b && is_space(static_cast<unsigned char>(text[e - 1]))) --e;
  return text.substr(b, e - b);
}

// ---------------------------------------------------------------------------

namespace {

// Calls fn(window) for every substring spanning exactly `window` code points.
template <typename Fn>
void for_each_window(std::string_view text, std::size_t window, Fn&& fn) {
  if (window == 0) return;
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i < text.size(); i = next_char(text, i)) starts.push_back(i);
  starts.push_back(text.size());
  for (std::size_t k = 0; k + window < starts.size(); ++k) {
    fn(text.substr(starts[k], starts[k + window] - starts[k]));
  }
}

}  // namespace

void WindowIndex::add(std::string_view text) {
  for_each_window(text, window_, [this](std::string_view w) { windows_.emplace(w); });
}

std::size_t WindowIndex::count_matches(std::string_view haystack) const {
  std::size_t n = 0;
  if (windows_.empty()) return 0;
  std::string key;
  for_each_window(haystack, window_, [&](std::string_view w) {
    key.assign(w);
    if (windows_.count(key) != 0) ++n;
  });
  return n;
}

// ---------------------------------------------------------------------------

std::string_view to_string(Label label) { return label == Label::spam ? "spam" : "ham"; }

std::optional<Label> parse_label(std::string_view text) {
  const std::string n = normalize_text(text);
  if (n == "spam") return Label::spam;
  if (n == "ham") return Label::ham;
  return std::nullopt;
}

std::optional<Label> parse_response_label(std::string_view response) {
  const std::string_view t = trim(response);
  std::size_t end = 0;
  while (end < t.size() && std::isalpha(static_cast<unsigned char>(t[end]))) ++end;
  return parse_label(t.substr(0, end));
}

std::string to_string(const Origin& origin) {
  switch (origin.kind) {
    case OriginKind::teacher_generated: return "teacher-generated";
    case OriginKind::refinement: return "refinement-round-" + std::to_string(origin.round);
    case OriginKind::real_corpus: return "real-corpus";
  }
  return "unknown";
}

std::optional<Origin> parse_origin(std::string_view text) {
  if (text == "teacher-generated") return Origin::teacher();
  if (text == "real-corpus") return Origin{OriginKind::real_corpus, 0};
  constexpr std::string_view prefix = "refinement-round-";
  if (text.substr(0, prefix.size()) == prefix) {
    int k = 0;
    const auto digits = text.substr(prefix.size());
    const auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), k);
    if (ec == std::errc() && ptr == digits.data() + digits.size() && k >= 1) {
      return Origin::refinement_round(k);
    }
  }
  return std::nullopt;
}

LabeledExample::LabeledExample(std::string text, Label label, std::string category, Origin origin)
    : label_(label), category_(std::move(category)), origin_(origin) {
  if (origin.kind == OriginKind::real_corpus) {
    throw Error(ErrorKind::precondition,
                "real-corpus examples can only be created by the corpus reader");
  }
  assign_text(std::move(text));
}

LabeledExample::LabeledExample(const CorpusAccess&, std::string text, Label label)
    : label_(label), origin_{OriginKind::real_corpus, 0} {
  assign_text(std::move(text));
}

void LabeledExample::assign_text(std::string text) {
  const std::string_view t = trim(text);
  if (t.empty()) throw Error(ErrorKind::precondition, "example text is empty");
  if (utf8_length(t) > kMaxMessageChars) {
    spdlog::warn("truncating {}-character message to {} characters", utf8_length(t),
                 kMaxMessageChars);
    text_ = std::string(trim(utf8_prefix(t, kMaxMessageChars)));
  } else {
    text_ = std::string(t);
  }
}

std::string_view to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::validation: return "validation";
    case SplitTag::test: return "test";
  }
  return "unknown";
}

InsertResult Dataset::insert(LabeledExample example) {
  auto key = normalize_text(example.text());
  if (!keys_.insert(std::move(key)).second) return InsertResult::duplicate;
  (example.label() == Label::spam ? spam_ : ham_) += 1;
  examples_.push_back(std::move(example));
  return InsertResult::inserted;
}

bool Dataset::contains_normalized(std::string_view normalized_key) const {
  return keys_.count(std::string(normalized_key)) != 0;
}

std::string Dataset::content_digest() const {
  std::string buf;
  for (const auto& e : examples_) {
    buf.append(to_string(e.label()));
    buf.push_back('\t');
    buf.append(e.category());
    buf.push_back('\t');
    buf.append(to_string(e.origin()));
    buf.push_back('\t');
    buf.append(e.text());
    buf.push_back('\n');
  }
  return sha256_hex(buf);
}

void PreferencePair::validate() const {
  if (trim(prompt).empty()) throw Error(ErrorKind::unparseable_response, "empty prompt");
  const auto c = parse_response_label(chosen);
  const auto r = parse_response_label(rejected);
  if (!c || !r) {
    throw Error(ErrorKind::unparseable_response,
                "chosen/rejected must start with spam or ham");
  }
  if (chosen == rejected || *c == *r) {
    throw Error(ErrorKind::unparseable_response, "chosen and rejected must differ");
  }
}

Label PreferencePair::chosen_label() const {
  const auto l = parse_response_label(chosen);
  if (!l) throw Error(ErrorKind::unparseable_response, "unparseable chosen response");
  return *l;
}

Label PreferencePair::rejected_label() const {
  const auto l = parse_response_label(rejected);
  if (!l) throw Error(ErrorKind::unparseable_response, "unparseable rejected response");
  return *l;
}

void ConfusionMatrix::add(Label truth, Label predicted) {
  if (truth == Label::spam) {
    (predicted == Label::spam ? tp : fn) += 1;
  } else {
    (predicted == Label::spam ? fp : tn) += 1;
  }
}

std::string_view to_string(MetricConvention convention) {
  return convention == MetricConvention::binary_spam_positive ? "binary-spam-positive"
                                                              : "macro-averaged";
}

TokenUsage& TokenUsage::operator+=(const TokenUsage& other) {
  prompt_tokens += other.prompt_tokens;
  completion_tokens += other.completion_tokens;
  estimated = estimated || other.estimated;
  return *this;
}

TokenUsage operator-(const TokenUsage& a, const TokenUsage& b) {
  TokenUsage d;
  d.prompt_tokens = a.prompt_tokens - b.prompt_tokens;
  d.completion_tokens = a.completion_tokens - b.completion_tokens;
  d.estimated = a.estimated;
  return d;
}

std::string_view to_string(StopReason reason) {
  switch (reason) {
    case StopReason::plateau: return "plateau";
    case StopReason::max_iterations: return "max-iterations";
    case StopReason::teacher_failure: return "teacher-failure";
  }
  return "unknown";
}

std::optional<StopReason> parse_stop_reason(std::string_view text) {
  if (text == "plateau") return StopReason::plateau;
  if (text == "max-iterations") return StopReason::max_iterations;
  if (text == "teacher-failure") return StopReason::teacher_failure;
  return std::nullopt;
}

void RunRecord::append(IterationRecord record) {
  const int expected = static_cast<int>(iterations.size()) + 1;
  if (record.index != expected) {
    throw Error(ErrorKind::precondition, "iteration index " + std::to_string(record.index) +
                                             " is not contiguous (expected " +
                                             std::to_string(expected) + ")");
  }
  iterations.push_back(std::move(record));
}

TokenUsage RunRecord::total_usage() const {
  TokenUsage t = setup_usage;
  for (const auto& it : iterations) t += it.usage;
  return t;
}

}  // namespace distillery
