#include "distillery/loop.hpp"

#include <spdlog/spdlog.h>

#include <charconv>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

#include "distillery/eval.hpp"

namespace distillery::loop {

using datagen::FailureHypothesis;
using datagen::Targets;
using nlohmann::json;
using nlohmann::ordered_json;
using teacher::ChatMessage;

namespace fs = std::filesystem;

std::string_view to_string(PlateauMetric metric) {
  return metric == PlateauMetric::f1 ? "f1" : "accuracy";
}

void LoopConfig::validate() const {
  if (max_iterations < 1) throw Error(ErrorKind::config, "max_iterations must be >= 1");
  if (plateau_patience < 1) throw Error(ErrorKind::config, "plateau_patience must be >= 1");
  if (!(plateau_epsilon >= 0.0)) throw Error(ErrorKind::config, "plateau_epsilon must be >= 0");
  if (validation_size < 2 || initial_train_size < 2 || refinement_size < 2) {
    throw Error(ErrorKind::config, "dataset sizes must be at least 2");
  }
}

// ---------------------------------------------------------------------------

bool check_plateau(std::span<const double> history, const LoopConfig& config) {
  if (history.empty()) throw Error(ErrorKind::precondition, "empty metric history");
  if (history.size() >= config.max_iterations) return true;
  if (history.size() < config.plateau_patience + 1) return false;
  for (std::size_t k = history.size() - config.plateau_patience; k < history.size(); ++k) {
    if (history[k] - history[k - 1] > config.plateau_epsilon + 1e-12) return false;
  }
  return true;
}

bool check_plateau(std::span<const MetricVector> history, const LoopConfig& config) {
  std::vector<double> values;
  for (const auto& m : history) {
    values.push_back(config.plateau_metric == PlateauMetric::f1 ? m.f1 : m.accuracy);
  }
  return check_plateau(std::span<const double>(values), config);
}

namespace {

// Plateau by epsilon alone, ignoring the iteration cap.
bool plateaued(std::span<const MetricVector> history, const LoopConfig& config) {
  LoopConfig uncapped = config;
  uncapped.max_iterations = history.size() + 1;
  return check_plateau(history, uncapped);
}

constexpr std::string_view kHypothesisFormat = "HYPOTHESIS<TAB>FP|FN|BOTH<TAB>COUNT";

}  // namespace

ChatMessage build_feedback(const MetricVector& m, std::size_t validation_size, std::size_t iteration,
                           std::size_t refinement_size) {
  std::ostringstream u;
  u << "Iteration " << iteration << " results on the held-out synthetic validation set ("
    << validation_size << " messages, spam is the positive class):\n"
    << "Acc=" << eval::format_percent(m.accuracy) << "% Prec=" << eval::format_percent(m.precision)
    << "% Rec=" << eval::format_percent(m.recall) << "% F1=" << eval::format_percent(m.f1)
    << "% FP=" << m.fp << " FN=" << m.fn << "\n"
    << "You will not see individual validation messages. From these aggregate numbers, "
       "hypothesise which message patterns are most likely causing the errors, and say how many "
       "new targeted training examples each hypothesis needs (at most "
    << refinement_size << " in total).\n"
    << "Reply with one line per hypothesis in the format\n"
    << kHypothesisFormat << "\n"
    << "where FP means the pattern causes ham to be flagged as spam, FN means spam slips "
       "through, and COUNT is a positive integer.";
  return ChatMessage::user(u.str());
}

std::vector<FailureHypothesis> parse_hypotheses(std::string_view reply, std::size_t cap) {
  std::vector<FailureHypothesis> out;
  std::istringstream in{std::string(reply)};
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto t2 = line.rfind('\t');
    if (t2 == std::string::npos || t2 == 0) continue;
    const auto t1 = line.rfind('\t', t2 - 1);
    if (t1 == std::string::npos) continue;
    auto desc = trim(std::string_view(line).substr(0, t1));
    // Tolerate the format's placeholder tag echoed literally in front.
    if (desc.starts_with("HYPOTHESIS\t")) desc = trim(desc.substr(11));
    const auto targets = datagen::parse_targets(std::string_view(line).substr(t1 + 1, t2 - t1 - 1));
    const auto count_str = trim(std::string_view(line).substr(t2 + 1));
    std::size_t count = 0;
    const auto [end, ec] = std::from_chars(count_str.data(), count_str.data() + count_str.size(), count);
    if (desc.empty() || !targets || ec != std::errc{} || end != count_str.data() + count_str.size() ||
        count == 0) {
      continue;
    }
    out.push_back({std::string(desc), *targets, count});
  }

  std::size_t total = 0;
  for (const auto& h : out) total += h.requested_examples;
  if (cap > 0 && total > cap) {
    for (auto& h : out) {
      h.requested_examples = std::max<std::size_t>(1, h.requested_examples * cap / total);
    }
  }
  return out;
}

FailureHypothesis default_hypothesis(const MetricVector& m, std::size_t count) {
  if (m.fp > m.fn) {
    return {"ham messages resembling spam are being flagged (no usable analysis received)",
            Targets::false_positives, count};
  }
  return {"spam messages are slipping through as ham (no usable analysis received)",
          Targets::false_negatives, count};
}

bool is_teacher_failure(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::credential_missing:
    case ErrorKind::exhausted_retries:
    case ErrorKind::malformed_endpoint_response:
    case ErrorKind::endpoint_rejected:
    case ErrorKind::fixture_exhausted:
    case ErrorKind::parse_failure:
      return true;
    default:
      return false;
  }
}

fs::path model_dir_for(const fs::path& run_dir, std::size_t iteration) {
  return run_dir / ("model-" + std::to_string(iteration));
}

fs::path refinement_file_for(const fs::path& run_dir, std::size_t iteration) {
  return run_dir / ("refinement-" + std::to_string(iteration) + ".jsonl");
}

// ---------------------------------------------------------------------------
// JSON

ordered_json to_json(const TokenUsage& u) {
  return {{"prompt_tokens", u.prompt_tokens},
          {"completion_tokens", u.completion_tokens},
          {"total_tokens", u.total()},
          {"estimated", u.estimated}};
}

TokenUsage usage_from_json(const json& j) {
  TokenUsage u;
  u.prompt_tokens = j.at("prompt_tokens").get<std::uint64_t>();
  u.completion_tokens = j.at("completion_tokens").get<std::uint64_t>();
  u.estimated = j.value("estimated", false);
  return u;
}

ordered_json to_json(const MetricVector& m) {
  return {{"accuracy", m.accuracy},
          {"precision", m.precision},
          {"recall", m.recall},
          {"f1", m.f1},
          {"fp", m.fp},
          {"fn", m.fn},
          {"convention", std::string(to_string(m.convention))},
          {"degenerate", m.degenerate},
          {"confusion",
           {{"tp", m.source.tp}, {"fp", m.source.fp}, {"fn", m.source.fn}, {"tn", m.source.tn}}}};
}

MetricVector metrics_from_json(const json& j) {
  MetricVector m;
  m.accuracy = j.at("accuracy").get<double>();
  m.precision = j.at("precision").get<double>();
  m.recall = j.at("recall").get<double>();
  m.f1 = j.at("f1").get<double>();
  m.fp = j.at("fp").get<std::uint64_t>();
  m.fn = j.at("fn").get<std::uint64_t>();
  m.convention = j.at("convention").get<std::string>() == to_string(MetricConvention::macro_averaged)
                     ? MetricConvention::macro_averaged
                     : MetricConvention::binary_spam_positive;
  m.degenerate = j.at("degenerate").get<bool>();
  const auto& c = j.at("confusion");
  m.source = {c.at("tp").get<std::uint64_t>(), c.at("fp").get<std::uint64_t>(),
              c.at("fn").get<std::uint64_t>(), c.at("tn").get<std::uint64_t>()};
  return m;
}

ordered_json to_json(const RunRecord& r) {
  ordered_json its = ordered_json::array();
  for (const auto& it : r.iterations) {
    its.push_back({{"iteration", it.index},
                   {"train_size", it.train_size},
                   {"metrics", to_json(it.metrics)},
                   {"hypotheses", it.hypotheses},
                   {"refinement_size", it.refinement_size},
                   {"usage", to_json(it.usage)}});
  }
  ordered_json j;
  j["validation_digest"] = r.validation_digest;
  j["setup_usage"] = to_json(r.setup_usage);
  j["iterations"] = std::move(its);
  j["stop_reason"] = r.stop_reason ? json(std::string(to_string(*r.stop_reason))) : json(nullptr);
  j["total_usage"] = to_json(r.total_usage());
  return j;
}

RunRecord run_record_from_json(const json& j) {
  RunRecord r;
  r.validation_digest = j.at("validation_digest").get<std::string>();
  r.setup_usage = usage_from_json(j.at("setup_usage"));
  for (const auto& it : j.at("iterations")) {
    IterationRecord rec;
    rec.index = it.at("iteration").get<int>();
    rec.train_size = it.at("train_size").get<std::size_t>();
    rec.metrics = metrics_from_json(it.at("metrics"));
    rec.hypotheses = it.at("hypotheses").get<std::vector<std::string>>();
    rec.refinement_size = it.at("refinement_size").get<std::size_t>();
    rec.usage = usage_from_json(it.at("usage"));
    r.append(std::move(rec));
  }
  if (!j.at("stop_reason").is_null()) {
    r.stop_reason = parse_stop_reason(j.at("stop_reason").get<std::string>());
  }
  return r;
}

ordered_json to_json(const LoopConfig& c) {
  return {{"max_iterations", c.max_iterations},
          {"plateau_epsilon", c.plateau_epsilon},
          {"plateau_patience", c.plateau_patience},
          {"plateau_metric", std::string(to_string(c.plateau_metric))},
          {"initial_train_size", c.initial_train_size},
          {"validation_size", c.validation_size},
          {"refinement_size", c.refinement_size},
          {"continue_training", c.continue_training}};
}

LoopConfig loop_config_from_json(const json& j, LoopConfig c) {
  c.max_iterations = j.value("max_iterations", c.max_iterations);
  c.plateau_epsilon = j.value("plateau_epsilon", c.plateau_epsilon);
  c.plateau_patience = j.value("plateau_patience", c.plateau_patience);
  if (j.contains("plateau_metric")) {
    const auto m = j.at("plateau_metric").get<std::string>();
    if (m == "f1") c.plateau_metric = PlateauMetric::f1;
    else if (m == "accuracy") c.plateau_metric = PlateauMetric::accuracy;
    else throw Error(ErrorKind::config, "plateau_metric must be f1 or accuracy");
  }
  c.initial_train_size = j.value("initial_train_size", c.initial_train_size);
  c.validation_size = j.value("validation_size", c.validation_size);
  c.refinement_size = j.value("refinement_size", c.refinement_size);
  c.continue_training = j.value("continue_training", c.continue_training);
  return c;
}

ordered_json to_json(const train::TrainHyper& h) {
  return {{"learning_rate", h.learning_rate}, {"batch_size", h.batch_size}, {"epochs", h.epochs},
          {"rank", h.rank},                   {"alpha", h.alpha},           {"seed", h.seed},
          {"beta", h.beta}};
}

train::TrainHyper hyper_from_json(const json& j, train::TrainHyper h) {
  h.learning_rate = j.value("learning_rate", h.learning_rate);
  h.batch_size = j.value("batch_size", h.batch_size);
  h.epochs = j.value("epochs", h.epochs);
  h.rank = j.value("rank", h.rank);
  h.alpha = j.value("alpha", h.alpha);
  h.seed = j.value("seed", h.seed);
  h.beta = j.value("beta", h.beta);
  return h;
}

void write_json_atomic(const fs::path& path, const ordered_json& j) {
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::io, "cannot write " + tmp);
    out << j.dump(2) << '\n';
    if (!out) throw Error(ErrorKind::io, "write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

json read_json(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::io, path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// The controller

namespace {

struct RunState {
  Dataset validation{SplitTag::validation};
  Dataset train{SplitTag::train};
  WindowIndex v_guard;
  RunRecord record;
  double wall_seconds = 0.0;
  std::optional<ErrorKind> failure_kind;
  std::string failure_message;
};

ordered_json options_json(const DistillOptions& o) {
  return {{"loop", to_json(o.loop)},
          {"hyper", to_json(o.hyper)},
          {"student_name", o.student_name},
          {"teacher_model", o.teacher_model}};
}

void append_jsonl(const fs::path& path, const std::vector<LabeledExample>& examples) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorKind::io, "cannot append to " + path.string());
  for (const auto& e : examples) {
    ordered_json j;
    j["text"] = e.text();
    j["label"] = to_string(e.label());
    j["category"] = e.category();
    j["origin"] = to_string(e.origin());
    out << j.dump() << '\n';
  }
}

void persist(const DistillOptions& o, const RunState& st, teacher::Teacher& t, double elapsed) {
  ordered_json j;
  j["format"] = 1;
  j["config"] = options_json(o);
  j["seeds"] = {{"train", o.hyper.seed}};
  j["validation_digest"] = st.validation.content_digest();
  j["train_size"] = st.train.size();
  j["train_digest"] = st.train.content_digest();
  j["teacher"] = {{"requests", t.requests_served()}, {"usage", to_json(t.total_usage())}};
  j["record"] = to_json(st.record);
  j["final_model_dir"] = st.record.iterations.empty()
                             ? json(nullptr)
                             : json(model_dir_for("", st.record.iterations.size()).string());
  if (st.failure_kind) {
    j["failure"] = {{"kind", std::string(to_string(*st.failure_kind))},
                    {"message", st.failure_message}};
  }
  j["wall_seconds"] = st.wall_seconds + elapsed;
  write_json_atomic(o.run_dir / kRunManifest, j);
}

void insert_all(Dataset& d, const std::vector<LabeledExample>& xs) {
  for (const auto& e : xs) d.insert(e);
}

// Replaces hypothesis descriptions that quote validation text.
std::vector<FailureHypothesis> redact(std::vector<FailureHypothesis> hs, const WindowIndex& guard) {
  for (auto& h : hs) {
    if (guard.leaks_into(h.description)) {
      spdlog::warn("hypothesis quotes validation text; description withheld from the teacher");
      h.description = "(description withheld: it quoted validation data)";
    }
  }
  return hs;
}

std::string hypothesis_line(const FailureHypothesis& h) {
  return h.description + "\t" + std::string(datagen::to_string(h.targets)) + "\t" +
         std::to_string(h.requested_examples);
}

}  // namespace

DistillResult run_distillation(teacher::Teacher& teacher, train::Trainer& trainer,
                               const DistillOptions& o) {
  o.loop.validate();
  o.hyper.validate();
  if (o.run_dir.empty()) throw Error(ErrorKind::config, "run directory not set");
  fs::create_directories(o.run_dir);
  const auto started = std::chrono::steady_clock::now();
  const auto manifest_path = o.run_dir / kRunManifest;
  const std::string system_prompt = teacher::default_system_prompt(o.student_name);
  const auto gen_params = teacher::GenerationParams::for_generation(o.teacher_model);
  const auto analysis_params = teacher::GenerationParams::for_analysis(o.teacher_model);

  RunState st;
  DistillResult result;

  // --- resume or set up -----------------------------------------------------
  if (fs::exists(manifest_path)) {
    const auto j = read_json(manifest_path);
    if (json::parse(options_json(o).dump()) != j.at("config")) {
      throw Error(ErrorKind::config, "run directory " + o.run_dir.string() +
                                         " was created with a different configuration");
    }
    st.record = run_record_from_json(j.at("record"));
    st.wall_seconds = j.value("wall_seconds", 0.0);
    insert_all(st.validation, datagen::read_jsonl(o.run_dir / kValidationFile));
    if (st.validation.content_digest() != st.record.validation_digest) {
      throw Error(ErrorKind::io, "validation.jsonl does not match the run manifest");
    }
    auto train_examples = datagen::read_jsonl(o.run_dir / kTrainFile);
    const auto train_size = j.at("train_size").get<std::size_t>();
    if (train_examples.size() < train_size) throw Error(ErrorKind::io, "train.jsonl is truncated");
    // drop lines from an unfinished iteration
    train_examples.erase(train_examples.begin() + static_cast<std::ptrdiff_t>(train_size), train_examples.end());
    insert_all(st.train, train_examples);
    if (st.train.content_digest() != j.at("train_digest").get<std::string>()) {
      throw Error(ErrorKind::io, "train.jsonl does not match the run manifest");
    }
    datagen::write_jsonl(o.run_dir / kTrainFile, st.train.examples());
    teacher.resume(j.at("teacher").at("requests").get<std::size_t>(),
                   usage_from_json(j.at("teacher").at("usage")));
    result.resumed = true;
    spdlog::info("resuming {} after iteration {}", o.run_dir.string(), st.record.iterations.size());
  } else {
    fs::remove(o.run_dir / kTranscriptFile);
  }
  teacher.attach_transcript(
      std::make_shared<teacher::TranscriptLog>(o.run_dir / kTranscriptFile, o.transcript_clock));
  auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  };
  for (const auto& e : st.validation.examples()) st.v_guard.add(e.text());

  auto finish = [&]() {
    persist(o, st, teacher, elapsed());
    result.record = st.record;
    result.failure_kind = st.failure_kind;
    result.failure_message = st.failure_message;
    if (!st.record.iterations.empty()) {
      result.model_dir = model_dir_for(o.run_dir, st.record.iterations.size());
      if (!result.model) result.model = trainer.load(result.model_dir);
    }
    return std::move(result);
  };
  auto teacher_failed = [&](const Error& e) {
    spdlog::error("teacher failure: {}", e.what());
    st.failure_kind = e.kind();
    st.failure_message = e.what();
    st.record.stop_reason = StopReason::teacher_failure;
  };

  if (st.record.stop_reason) return finish();

  if (!result.resumed) {
    const auto before = teacher.total_usage();
    try {
      datagen::GenerationSpec vspec{o.loop.validation_size, 0.5, datagen::default_spam_categories(),
                                    datagen::Purpose::validation};
      datagen::CollectOptions copt{system_prompt, gen_params, 2, Origin::teacher(), nullptr};
      auto v = datagen::collect_examples(teacher, datagen::build_generation_prompt(vspec, system_prompt),
                                         vspec, st.validation, copt);
      insert_all(st.validation, v.examples);
      for (const auto& e : st.validation.examples()) st.v_guard.add(e.text());
      st.record.validation_digest = st.validation.content_digest();

      datagen::GenerationSpec fspec{o.loop.initial_train_size, 0.5,
                                    datagen::default_spam_categories(),
                                    datagen::Purpose::initial_train};
      copt.guard = &st.v_guard;
      auto f = datagen::collect_examples(teacher, datagen::build_generation_prompt(fspec, system_prompt),
                                         fspec, st.validation, copt);
      insert_all(st.train, f.examples);
    } catch (const Error& e) {
      if (!is_teacher_failure(e.kind())) throw;
      st.record.setup_usage = teacher.total_usage() - before;
      teacher_failed(e);
      return finish();
    }
    st.record.setup_usage = teacher.total_usage() - before;
    datagen::write_jsonl(o.run_dir / kValidationFile, st.validation.examples());
    datagen::write_jsonl(o.run_dir / kTrainFile, st.train.examples());
    persist(o, st, teacher, elapsed());
    spdlog::info("setup done: |V| = {}, |F| = {}", st.validation.size(), st.train.size());
  }

  // --- iterate ----------------------------------------------------------------
  std::vector<MetricVector> history;
  for (const auto& it : st.record.iterations) history.push_back(it.metrics);

  for (std::size_t k = st.record.iterations.size() + 1; k <= o.loop.max_iterations; ++k) {
    if (st.validation.content_digest() != st.record.validation_digest) {
      throw Error(ErrorKind::precondition, "validation set changed during the run");
    }
    const auto before = teacher.total_usage();
    const auto dir = model_dir_for(o.run_dir, k);
    result.model = (o.loop.continue_training && k > 1)
                       ? trainer.train_continue(st.train, o.hyper, model_dir_for(o.run_dir, k - 1), dir)
                       : trainer.train(st.train, o.hyper, dir);
    const auto m = eval::metrics(eval::confusion(*result.model, st.validation));
    history.push_back(m);
    spdlog::info("iteration {}: |F| = {}, V acc {:.4f} f1 {:.4f} FP {} FN {}", k, st.train.size(),
                 m.accuracy, m.f1, m.fp, m.fn);

    IterationRecord rec;
    rec.index = static_cast<int>(k);
    rec.train_size = st.train.size();
    rec.metrics = m;

    if (check_plateau(std::span<const MetricVector>(history), o.loop)) {
      st.record.stop_reason =
          plateaued(history, o.loop) ? StopReason::plateau : StopReason::max_iterations;
      st.record.append(std::move(rec));
      break;
    }

    std::vector<LabeledExample> delta;
    try {
      teacher::Conversation conv{ChatMessage::system(system_prompt),
                                 build_feedback(m, st.validation.size(), k, o.loop.refinement_size)};
      datagen::check_outgoing(conv, &st.v_guard);
      auto reply = teacher.send_chat(conv, analysis_params);
      auto hyps = parse_hypotheses(reply.content, o.loop.refinement_size);
      if (hyps.empty()) {
        conv.push_back(ChatMessage::assistant(reply.content));
        conv.push_back(ChatMessage::user(datagen::repair_message(kHypothesisFormat)));
        reply = teacher.send_chat(conv, analysis_params);
        hyps = parse_hypotheses(reply.content, o.loop.refinement_size);
      }
      if (hyps.empty()) {
        spdlog::warn("no usable hypotheses after repair; using the local default");
        hyps.push_back(default_hypothesis(m, o.loop.refinement_size));
      }
      hyps = redact(std::move(hyps), st.v_guard);
      for (const auto& h : hyps) rec.hypotheses.push_back(hypothesis_line(h));

      auto rconv = datagen::build_refinement_prompt(hyps, m, st.validation.size(), system_prompt);
      std::size_t spam = 0, ham = 0;
      for (const auto& h : hyps) {
        if (h.targets == Targets::false_negatives) spam += h.requested_examples;
        else if (h.targets == Targets::false_positives) ham += h.requested_examples;
        else {
          spam += h.requested_examples / 2;
          ham += h.requested_examples - h.requested_examples / 2;
        }
      }
      datagen::GenerationSpec rspec{2 * std::max(spam, ham), 0.5, datagen::default_spam_categories(),
                                    datagen::Purpose::refinement};
      Dataset existing = st.train;
      insert_all(existing, st.validation.examples());
      datagen::CollectOptions copt{system_prompt, gen_params, 2,
                                   Origin::refinement_round(static_cast<int>(k)), &st.v_guard};
      delta = datagen::collect_examples(teacher, std::move(rconv), rspec, existing, copt).examples;
    } catch (const Error& e) {
      if (!is_teacher_failure(e.kind())) throw;
      rec.usage = teacher.total_usage() - before;
      st.record.append(std::move(rec));
      teacher_failed(e);
      return finish();
    }

    rec.refinement_size = delta.size();
    rec.usage = teacher.total_usage() - before;
    datagen::write_jsonl(refinement_file_for(o.run_dir, k), delta);
    append_jsonl(o.run_dir / kTrainFile, delta);
    insert_all(st.train, delta);
    st.record.append(rec);
    persist(o, st, teacher, elapsed());
    if (o.on_iteration) o.on_iteration(rec);
  }
  return finish();
}

}  // namespace distillery::loop
