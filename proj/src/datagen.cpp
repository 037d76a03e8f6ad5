#include "distillery/datagen.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

namespace distillery::datagen {

namespace {

using teacher::ChatMessage;
using teacher::Conversation;

std::string join(const std::vector<std::string>& items, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += sep;
    out += items[i];
  }
  return out;
}

std::string percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v * 100.0);
  return buf;
}

constexpr std::string_view kFormatRules =
    "Output format, one message per line and nothing else:\n"
    "LABEL<TAB>CATEGORY<TAB>TEXT\n"
    "where LABEL is exactly \"spam\" or \"ham\", CATEGORY is a short lowercase tag, and TEXT is "
    "the SMS on a single line (no tabs or line breaks inside it). Separate fields with a real "
    "tab character. No numbering, headings, code fences or commentary.";

}  // namespace

std::string_view to_string(Purpose purpose) {
  switch (purpose) {
    case Purpose::initial_train: return "initial-train";
    case Purpose::validation: return "validation";
    case Purpose::refinement: return "refinement";
  }
  return "unknown";
}

const std::vector<std::string>& default_spam_categories() {
  static const std::vector<std::string> c{"phishing", "smishing", "delivery-scam", "crypto-scam",
                                          "aggressive-marketing"};
  return c;
}

const std::vector<std::string>& default_ham_categories() {
  static const std::vector<std::string> c{"benign-casual", "benign-workplace", "benign-service",
                                          "benign-notification"};
  return c;
}

void GenerationSpec::validate() const {
  if (count < 2) throw Error(ErrorKind::precondition, "generation count must be at least 2");
  if (!(spam_ratio > 0.0 && spam_ratio < 1.0)) {
    throw Error(ErrorKind::precondition, "spam ratio must be in (0, 1)");
  }
}

std::size_t GenerationSpec::spam_target() const {
  return static_cast<std::size_t>(std::llround(static_cast<double>(count) * spam_ratio));
}

std::string_view to_string(Targets targets) {
  switch (targets) {
    case Targets::false_positives: return "FP";
    case Targets::false_negatives: return "FN";
    case Targets::both: return "BOTH";
  }
  return "BOTH";
}

std::optional<Targets> parse_targets(std::string_view text) {
  std::string t(trim(text));
  for (auto& c : t) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  if (t == "FP") return Targets::false_positives;
  if (t == "FN") return Targets::false_negatives;
  if (t == "BOTH") return Targets::both;
  return std::nullopt;
}

// ---------------------------------------------------------------------------

Conversation build_generation_prompt(const GenerationSpec& spec, const std::string& system_prompt) {
  spec.validate();
  std::ostringstream u;
  const char* what = spec.purpose == Purpose::validation
                         ? "a held-out synthetic validation set"
                         : spec.purpose == Purpose::refinement ? "additional training data"
                                                               : "a synthetic training set";
  u << "Generate " << what << " of exactly " << spec.count << " SMS messages: "
    << spec.spam_target() << " spam and " << spec.ham_target() << " ham (spam ratio "
    << percent(spec.spam_ratio) << "%).\n"
    << "Spam categories to cover, roughly evenly: " << join(spec.categories, ", ") << ".\n"
    << "Ham categories to cover: " << join(default_ham_categories(), ", ") << ".\n"
    << "Vary length, tone, brands, names, amounts and link styles; avoid near-duplicates.\n";
  if (spec.purpose == Purpose::validation) {
    u << "This set is used only to measure the student. It must be disjoint from every other "
         "message you write in this workflow: do not reuse, paraphrase or template any of these "
         "messages in later training data.\n";
  }
  u << kFormatRules;
  return {ChatMessage::system(system_prompt), ChatMessage::user(u.str())};
}

Conversation build_topup_prompt(const GenerationSpec& spec, std::size_t spam_needed,
                                std::size_t ham_needed, const std::string& system_prompt) {
  std::ostringstream u;
  u << "The previous batch fell short after removing duplicates and rebalancing. Generate "
    << spam_needed << " more spam and " << ham_needed
    << " more ham SMS messages, all new and different from anything you have written so far.\n"
    << "Spam categories: " << join(spec.categories, ", ") << ".\n"
    << "Ham categories: " << join(default_ham_categories(), ", ") << ".\n";
  if (spec.purpose == Purpose::validation) {
    u << "These belong to the held-out validation set and must stay disjoint from all training "
         "data.\n";
  }
  u << kFormatRules;
  return {ChatMessage::system(system_prompt), ChatMessage::user(u.str())};
}

Conversation build_refinement_prompt(const std::vector<FailureHypothesis>& hypotheses,
                                     const MetricVector& metrics, std::size_t validation_size,
                                     const std::string& system_prompt) {
  if (hypotheses.empty()) throw Error(ErrorKind::empty_hypotheses, "nothing to refine");

  std::size_t ham_total = 0, spam_total = 0;
  std::ostringstream req;
  int n = 0;
  for (const auto& h : hypotheses) {
    req << ++n << ". Weakness: " << h.description << "\n   ";
    switch (h.targets) {
      case Targets::false_positives:
        ham_total += h.requested_examples;
        req << "Write " << h.requested_examples
            << " hard ham messages: legitimate service and notification texts (banks, deliveries, "
               "appointments, one-time codes, account alerts) that look superficially like spam "
               "but are genuine.\n";
        break;
      case Targets::false_negatives:
        spam_total += h.requested_examples;
        req << "Write " << h.requested_examples
            << " hard spam messages: subtle or short-form scams with little promotional wording, "
               "casual tone, impersonation or bare short links.\n";
        break;
      case Targets::both: {
        const std::size_t s = h.requested_examples / 2;
        spam_total += s;
        ham_total += h.requested_examples - s;
        req << "Write " << h.requested_examples - s << " hard ham and " << s
            << " hard spam messages that sit close to the decision boundary for this pattern.\n";
        break;
      }
    }
  }
  // Keep each refinement batch balanced even when the hypotheses lean one way.
  if (spam_total != ham_total) {
    const bool more_ham = ham_total > spam_total;
    const std::size_t gap = more_ham ? ham_total - spam_total : spam_total - ham_total;
    req << ++n << ". Balance: also write " << gap << (more_ham ? " ordinary spam" : " ordinary ham")
        << " messages across the usual categories so the batch stays 50/50.\n";
  }

  const auto& cm = metrics.source;
  std::ostringstream u;
  u << "The student was retrained and evaluated on the held-out validation set (" << validation_size
    << " messages). Aggregate metrics:\n"
    << "Acc=" << percent(metrics.accuracy) << "% Prec=" << percent(metrics.precision)
    << "% Rec=" << percent(metrics.recall) << "% F1=" << percent(metrics.f1)
    << "% FP=" << metrics.fp << " FN=" << metrics.fn << " TP=" << cm.tp << " TN=" << cm.tn << "\n"
    << "Generate targeted training examples for these hypothesised weaknesses:\n"
    << req.str() << kFormatRules;
  return {ChatMessage::system(system_prompt), ChatMessage::user(u.str())};
}

std::string repair_message(std::string_view expected_format) {
  return "Your previous output was not valid. Emit only the requested lines in the format " +
         std::string(expected_format) + ", one per line, with no other text.";
}

// ---------------------------------------------------------------------------

ParseResult parse_examples_lenient(std::string_view reply, Origin origin) {
  ParseResult out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= reply.size()) {
    auto end = reply.find('\n', start);
    if (end == std::string_view::npos) end = reply.size();
    std::string_view line = reply.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (trim(line).empty()) {
      if (end == reply.size()) break;
      continue;
    }
    auto reject = [&](std::string reason) { out.rejected.push_back({line_no, std::move(reason)}); };

    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string_view::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string_view::npos) {
      reject("expected three tab-separated fields");
    } else if (auto label = parse_label(line.substr(0, t1)); !label) {
      reject("unknown label '" + std::string(trim(line.substr(0, t1))) + "'");
    } else {
      const auto text = trim(line.substr(t2 + 1));
      if (text.empty()) {
        reject("empty text");
      } else if (!is_valid_utf8(text)) {
        reject("text is not valid UTF-8");
      } else {
        out.examples.emplace_back(std::string(text), *label,
                                  std::string(trim(line.substr(t1 + 1, t2 - t1 - 1))), origin);
      }
    }
    if (end == reply.size()) break;
  }
  return out;
}

ParseResult parse_examples(std::string_view reply, Origin origin) {
  auto out = parse_examples_lenient(reply, origin);
  if (out.examples.empty()) {
    std::string msg = std::to_string(out.rejected.size()) + " line(s), none usable";
    if (!out.rejected.empty()) {
      msg += "; line " + std::to_string(out.rejected.front().line) + ": " +
             out.rejected.front().reason;
    }
    throw Error(ErrorKind::parse_failure, msg);
  }
  return out;
}

// ---------------------------------------------------------------------------

BalanceResult balance_and_dedup(const std::vector<LabeledExample>& examples,
                                const GenerationSpec& spec, const Dataset& existing) {
  BalanceResult out;
  std::unordered_set<std::string> seen;
  std::vector<const LabeledExample*> spam, ham;
  for (const auto& e : examples) {
    const std::string key = normalize_text(e.text());
    if (existing.contains_normalized(key) || !seen.insert(key).second) {
      ++out.duplicates;
      continue;
    }
    (e.label() == Label::spam ? spam : ham).push_back(&e);
  }

  auto& majority = spam.size() >= ham.size() ? spam : ham;
  const std::size_t m = std::min(spam.size(), ham.size());
  const std::size_t slack = (2 * m * 5 + 99) / 100;  // ceil(0.05 * 2m)
  const std::size_t keep_major = std::min(majority.size(), m + slack);
  out.trimmed = majority.size() - keep_major;
  majority.resize(keep_major);

  // Preserve the original relative order of the survivors.
  std::unordered_set<const LabeledExample*> keep(spam.begin(), spam.end());
  keep.insert(ham.begin(), ham.end());
  for (const auto& e : examples) {
    if (keep.count(&e)) out.kept.push_back(e);
  }

  if (out.kept.size() * 10 < spec.count * 9) {
    const std::size_t s = spam.size(), h = ham.size();
    out.spam_needed = spec.spam_target() > s ? spec.spam_target() - s : 0;
    out.ham_needed = spec.ham_target() > h ? spec.ham_target() - h : 0;
  }
  return out;
}

// ---------------------------------------------------------------------------

void check_outgoing(const Conversation& conversation, const WindowIndex* guard) {
  if (!guard || guard->empty()) return;
  for (const auto& m : conversation) {
    if (m.role == teacher::Role::assistant) continue;
    if (const auto hits = guard->count_matches(m.content); hits > 0) {
      throw Error(ErrorKind::airgap_violation,
                  "outgoing " + std::string(teacher::to_string(m.role)) + " message shares " +
                      std::to_string(hits) + " protected window(s)");
    }
  }
}

namespace {

// Sends and parses; on a parse failure re-asks once with the repair message.
ParseResult ask_and_parse(teacher::Teacher& t, Conversation conv, const CollectOptions& opt,
                          CollectResult& stats) {
  check_outgoing(conv, opt.guard);
  ++stats.requests;
  auto reply = t.send_chat(conv, opt.params);
  try {
    auto r = parse_examples(reply.content, opt.origin);
    stats.rejected_lines += r.rejected.size();
    return r;
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::parse_failure) throw;
    spdlog::warn("unparseable teacher reply ({}); asking for a repair", e.what());
  }
  conv.push_back(ChatMessage::assistant(reply.content));
  conv.push_back(ChatMessage::user(repair_message(kExampleFormat)));
  ++stats.repairs;
  ++stats.requests;
  reply = t.send_chat(conv, opt.params);
  auto r = parse_examples(reply.content, opt.origin);
  stats.rejected_lines += r.rejected.size();
  return r;
}

}  // namespace

CollectResult collect_examples(teacher::Teacher& teacher, Conversation conversation,
                               const GenerationSpec& spec, const Dataset& existing,
                               const CollectOptions& options) {
  spec.validate();
  CollectResult stats;
  auto pool = ask_and_parse(teacher, std::move(conversation), options, stats).examples;
  auto balanced = balance_and_dedup(pool, spec, existing);

  while (balanced.short_of_target() && static_cast<int>(stats.topups) < options.max_topups) {
    ++stats.topups;
    spdlog::info("{} batch short by {} spam / {} ham; top-up {}", to_string(spec.purpose),
                 balanced.spam_needed, balanced.ham_needed, stats.topups);
    auto conv = build_topup_prompt(spec, balanced.spam_needed, balanced.ham_needed,
                                   options.system_prompt);
    try {
      auto more = ask_and_parse(teacher, std::move(conv), options, stats).examples;
      pool.insert(pool.end(), std::make_move_iterator(more.begin()),
                  std::make_move_iterator(more.end()));
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::parse_failure) throw;
      spdlog::warn("top-up reply unusable after repair; keeping what we have");
      break;
    }
    balanced = balance_and_dedup(pool, spec, existing);
  }
  if (balanced.short_of_target()) {
    spdlog::warn("{} batch still short ({} of {} requested)", to_string(spec.purpose),
                 balanced.kept.size(), spec.count);
  }
  stats.examples = std::move(balanced.kept);
  return stats;
}

// ---------------------------------------------------------------------------

void write_jsonl(const std::filesystem::path& path, const std::vector<LabeledExample>& examples) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  for (const auto& e : examples) {
    nlohmann::ordered_json j;
    j["text"] = e.text();
    j["label"] = to_string(e.label());
    j["category"] = e.category();
    j["origin"] = to_string(e.origin());
    out << j.dump() << '\n';
  }
  if (!out) throw Error(ErrorKind::io, "write failed for " + path.string());
}

std::vector<LabeledExample> read_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  std::vector<LabeledExample> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto label = parse_label(j.at("label").get<std::string>());
      const auto origin = parse_origin(j.value("origin", std::string("teacher-generated")));
      if (!label || !origin) throw Error(ErrorKind::io, "bad label or origin");
      out.emplace_back(j.at("text").get<std::string>(), *label, j.value("category", std::string()),
                       *origin);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::io, path.string() + ":" + std::to_string(n) + ": " + e.what());
    } catch (const Error& e) {
      throw Error(ErrorKind::io, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace distillery::datagen
