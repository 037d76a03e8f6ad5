#include "distillery/cli.hpp"

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <chrono>
#include <fstream>
#include <iostream>
#include <set>
#include <sstream>

namespace distillery::cli {

using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

void reject_unknown(const json& j, std::string_view where, std::initializer_list<const char*> known) {
  if (!j.is_object()) throw Error(ErrorKind::config, std::string(where) + " must be an object");
  const std::set<std::string> allowed(known.begin(), known.end());
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) {
      throw Error(ErrorKind::config, "unknown key \"" + key + "\" in " + std::string(where));
    }
  }
}

fs::path resolve(const fs::path& p, const fs::path& base) {
  if (p.empty() || p.is_absolute() || base.empty()) return p;
  return base / p;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return {};
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void RunConfig::validate() const {
  if (teacher.fixture && teacher.endpoint) {
    throw Error(ErrorKind::config, "teacher: set either \"fixture\" or \"endpoint\", not both");
  }
  if (teacher.model.empty()) throw Error(ErrorKind::config, "teacher model id is empty");
  if (test_per_class == 0) throw Error(ErrorKind::config, "test_per_class must be positive");
  if (dpo_pairs == 0 || dpo_chunk_size == 0) throw Error(ErrorKind::config, "dpo sizes must be positive");
  try {
    hyper.validate();
    loop.validate();
    student::StudentConfig s = trainer.student;
    s.rank = hyper.rank;
    s.alpha = hyper.alpha;
    s.validate();
  } catch (const Error& e) {
    throw Error(ErrorKind::config, e.what());
  }
}

RunConfig parse_config(const json& j, const fs::path& base_dir) {
  RunConfig c;
  try {
    reject_unknown(j, "config",
                   {"teacher", "trainer", "hyper", "loop", "corpus", "test_per_class", "seed",
                    "run_dir", "student_name", "dpo"});
    if (j.contains("teacher")) {
      const auto& t = j["teacher"];
      reject_unknown(t, "teacher", {"fixture", "endpoint", "model", "max_retries"});
      if (t.contains("fixture")) c.teacher.fixture = resolve(t["fixture"].get<std::string>(), base_dir);
      if (t.contains("endpoint")) c.teacher.endpoint = t["endpoint"].get<std::string>();
      c.teacher.model = t.value("model", c.teacher.endpoint ? std::string{} : c.teacher.model);
      c.teacher.max_retries = t.value("max_retries", c.teacher.max_retries);
    }
    if (j.contains("trainer")) {
      const auto& t = j["trainer"];
      reject_unknown(t, "trainer",
                     {"kind", "command", "train_timeout_s", "predict_timeout_s", "student"});
      const auto kind = t.value("kind", std::string("builtin"));
      if (kind == "external") {
        c.trainer.external_command = t.at("command").get<std::vector<std::string>>();
        if (c.trainer.external_command.empty()) throw Error(ErrorKind::config, "empty trainer command");
        auto& exe = c.trainer.external_command.front();
        if (exe.find('/') != std::string::npos) exe = resolve(exe, base_dir).string();
        c.trainer.train_timeout = std::chrono::milliseconds(
            static_cast<long long>(1000 * t.value("train_timeout_s", 1800.0)));
        c.trainer.predict_timeout = std::chrono::milliseconds(
            static_cast<long long>(1000 * t.value("predict_timeout_s", 1800.0)));
      } else if (kind == "builtin") {
        if (t.contains("command")) throw Error(ErrorKind::config, "builtin trainer takes no command");
      } else {
        throw Error(ErrorKind::config, "trainer kind must be builtin or external");
      }
      if (t.contains("student")) {
        const auto& s = t["student"];
        reject_unknown(s, "trainer.student", {"seed", "feature_dim", "hidden", "threshold", "hash_seed"});
        auto& sc = c.trainer.student;
        sc.seed = s.value("seed", sc.seed);
        sc.feature_dim = s.value("feature_dim", sc.feature_dim);
        sc.hidden = s.value("hidden", sc.hidden);
        sc.threshold = s.value("threshold", sc.threshold);
        sc.hash_seed = s.value("hash_seed", sc.hash_seed);
      }
    }
    if (j.contains("hyper")) {
      reject_unknown(j["hyper"], "hyper",
                     {"learning_rate", "batch_size", "epochs", "rank", "alpha", "beta"});
      c.hyper = loop::hyper_from_json(j["hyper"], c.hyper);
    }
    if (j.contains("loop")) {
      reject_unknown(j["loop"], "loop",
                     {"max_iterations", "plateau_epsilon", "plateau_patience", "plateau_metric",
                      "initial_train_size", "validation_size", "refinement_size",
                      "continue_training"});
      c.loop = loop::loop_config_from_json(j["loop"], c.loop);
    }
    if (j.contains("corpus")) c.corpus = resolve(j["corpus"].get<std::string>(), base_dir);
    if (j.contains("run_dir")) c.run_dir = resolve(j["run_dir"].get<std::string>(), base_dir);
    c.test_per_class = j.value("test_per_class", c.test_per_class);
    c.student_name = j.value("student_name", c.student_name);
    if (j.contains("dpo")) {
      reject_unknown(j["dpo"], "dpo", {"pairs", "chunk_size"});
      c.dpo_pairs = j["dpo"].value("pairs", c.dpo_pairs);
      c.dpo_chunk_size = j["dpo"].value("chunk_size", c.dpo_chunk_size);
    }
    apply_seed(c, j.value("seed", c.seed));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, e.what());
  }
  c.validate();
  return c;
}

RunConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::config, "cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::config, path.string() + ": " + e.what());
  }
  return parse_config(j, path.parent_path());
}

ordered_json to_json(const RunConfig& c) {
  ordered_json j;
  ordered_json t;
  if (c.teacher.fixture) t["fixture"] = c.teacher.fixture->string();
  if (c.teacher.endpoint) t["endpoint"] = *c.teacher.endpoint;
  t["model"] = c.teacher.model;
  t["max_retries"] = c.teacher.max_retries;
  j["teacher"] = t;
  ordered_json tr;
  tr["kind"] = c.trainer.builtin() ? "builtin" : "external";
  if (!c.trainer.builtin()) {
    tr["command"] = c.trainer.external_command;
    tr["train_timeout_s"] = c.trainer.train_timeout.count() / 1000.0;
    tr["predict_timeout_s"] = c.trainer.predict_timeout.count() / 1000.0;
  }
  const auto& s = c.trainer.student;
  tr["student"] = {{"seed", s.seed},
                   {"feature_dim", s.feature_dim},
                   {"hidden", s.hidden},
                   {"threshold", s.threshold},
                   {"hash_seed", s.hash_seed}};
  j["trainer"] = tr;
  j["hyper"] = loop::to_json(c.hyper);
  j["hyper"].erase("seed");  // follows the top-level seed
  j["loop"] = loop::to_json(c.loop);
  j["corpus"] = c.corpus.string();
  j["test_per_class"] = c.test_per_class;
  j["seed"] = c.seed;
  j["run_dir"] = c.run_dir.string();
  j["student_name"] = c.student_name;
  j["dpo"] = {{"pairs", c.dpo_pairs}, {"chunk_size", c.dpo_chunk_size}};
  return j;
}

void apply_seed(RunConfig& config, std::uint64_t seed) {
  config.seed = seed;
  config.hyper.seed = seed;
}

std::unique_ptr<teacher::Teacher> make_teacher(const RunConfig& config) {
  if (config.teacher.fixture) return teacher::ScriptedTeacher::from_file(*config.teacher.fixture);
  if (config.teacher.endpoint) {
    teacher::HttpTeacherConfig hc;
    hc.endpoint = *config.teacher.endpoint;
    const char* key = std::getenv(teacher::kApiKeyEnv);
    hc.api_key = key ? key : "";
    hc.max_retries = config.teacher.max_retries;
    return std::make_unique<teacher::HttpTeacher>(std::move(hc));
  }
  throw Error(ErrorKind::config, "no teacher configured (teacher.fixture or teacher.endpoint)");
}

std::unique_ptr<train::Trainer> make_trainer(const RunConfig& config) {
  if (config.trainer.builtin()) return std::make_unique<train::BuiltinTrainer>(config.trainer.student);
  return std::make_unique<train::ExternalTrainer>(train::ExternalTrainerConfig{
      config.trainer.external_command, config.trainer.train_timeout, config.trainer.predict_timeout});
}

// ---------------------------------------------------------------------------
// Commands

namespace {

std::string student_label(const RunConfig& c) {
  if (c.trainer.builtin()) return "builtin student";
  return fs::path(c.trainer.external_command.front()).filename().string();
}

// Config as recorded in report.json: the run directory is left out so the
// same experiment in two directories yields the same report.
ordered_json report_config(const RunConfig& c) {
  auto j = to_json(c);
  j.erase("run_dir");
  return j;
}

eval::SealedTestSet load_test_set(const RunConfig& c) {
  if (c.corpus.empty()) throw Error(ErrorKind::corpus_missing, "no corpus path (--corpus)");
  if (!fs::exists(c.corpus)) throw Error(ErrorKind::corpus_missing, c.corpus.string() + " does not exist");
  const auto corpus = eval::load_sms_corpus(c.corpus);
  auto test = eval::build_balanced_test(corpus, c.seed, c.test_per_class);
  spdlog::info("sealed test set: {} spam + {} ham, digest {}", test.count(Label::spam),
               test.count(Label::ham), test.digest().substr(0, 16));
  return test;
}

void require_corpus(const RunConfig& c) {
  if (c.corpus.empty()) throw Error(ErrorKind::corpus_missing, "no corpus path (--corpus)");
  if (!fs::exists(c.corpus)) throw Error(ErrorKind::corpus_missing, c.corpus.string() + " does not exist");
}

ordered_json test_json(const eval::SealedTestSet& t) {
  return {{"digest", t.digest()}, {"seed", t.seed()}, {"size", t.size()},
          {"spam", t.count(Label::spam)}, {"ham", t.count(Label::ham)}};
}

ordered_json row_json(const eval::ReportRow& r) {
  ordered_json j;
  j["model"] = r.model;
  j["metrics"] = loop::to_json(r.metrics);
  j["tokens"] = r.tokens ? json(*r.tokens) : json(nullptr);
  return j;
}

// Counts sealed-test windows in the run's transcript; throws on any match.
ordered_json audit_transcript(const eval::SealedTestSet& test, const fs::path& transcript) {
  const auto text = read_file(transcript);
  const auto leaks = test.count_leaks(text);
  if (leaks > 0) {
    throw Error(ErrorKind::airgap_violation,
                std::to_string(leaks) + " sealed-test windows found in " + transcript.string());
  }
  return {{"window", 20}, {"transcript_bytes", text.size()}, {"leaks", leaks}};
}

void write_outputs(const RunConfig& c, Report& report, std::optional<double> seconds) {
  ordered_json rows = ordered_json::array();
  for (const auto& r : report.rows) rows.push_back(row_json(r));
  report.json["rows"] = rows;
  if (seconds) {
    for (auto& r : report.rows) r.seconds = seconds;
  }
  if (c.run_dir.empty()) return;
  fs::create_directories(c.run_dir);
  loop::write_json_atomic(c.run_dir / kConfigFile, to_json(c));
  loop::write_json_atomic(c.run_dir / kReportFile, report.json);
  if (seconds) loop::write_json_atomic(c.run_dir / kTimingFile, {{"wall_seconds", *seconds}});
}

std::shared_ptr<teacher::TranscriptLog> transcript_for(const RunConfig& c) {
  return std::make_shared<teacher::TranscriptLog>(
      c.run_dir / loop::kTranscriptFile,
      c.teacher.fixture ? teacher::ScriptedTeacher::logical_clock() : teacher::TranscriptLog::Clock(teacher::utc_clock));
}

}  // namespace

std::string Report::text() const { return eval::format_report(rows); }

Report cmd_baseline(const RunConfig& config) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto test = load_test_set(config);
  auto trainer = make_trainer(config);
  const auto model = trainer->untrained(config.hyper);
  const auto cm = eval::confusion(*model, test);

  Report report;
  report.rows.push_back({student_label(config) + " zero-shot", eval::metrics(cm), std::nullopt, std::nullopt});
  report.json["method"] = "baseline";
  report.json["config"] = report_config(config);
  report.json["test"] = test_json(test);
  report.json["metrics"] = {
      {"binary", loop::to_json(eval::metrics(cm))},
      {"macro", loop::to_json(eval::metrics(cm, MetricConvention::macro_averaged))}};
  write_outputs(config, report, seconds_since(t0));
  return report;
}

Report cmd_distill(const RunConfig& config) {
  config.validate();
  if (config.run_dir.empty()) throw Error(ErrorKind::config, "distill needs a run directory (--run-dir)");
  require_corpus(config);
  auto teacher = make_teacher(config);
  auto trainer = make_trainer(config);

  loop::DistillOptions opts;
  opts.loop = config.loop;
  opts.hyper = config.hyper;
  opts.student_name = config.student_name;
  opts.teacher_model = config.teacher.model;
  opts.run_dir = config.run_dir;
  if (config.teacher.fixture) opts.transcript_clock = teacher::ScriptedTeacher::logical_clock();
  fs::create_directories(config.run_dir);
  loop::write_json_atomic(config.run_dir / kConfigFile, to_json(config));

  auto result = loop::run_distillation(*teacher, *trainer, opts);
  if (result.failure_kind) {
    throw Error(*result.failure_kind, "distillation stopped: " + result.failure_message +
                                          " (partial record in " +
                                          (config.run_dir / loop::kRunManifest).string() + ")");
  }
  if (!result.model) throw Error(ErrorKind::precondition, "distillation produced no model");

  // Post-hoc: the sealed test set is read only once the loop has stopped.
  const auto test = load_test_set(config);
  const auto cm = eval::confusion(*result.model, test);
  const auto usage = result.record.total_usage();

  Report report;
  report.rows.push_back({student_label(config) + " + distill (" + config.teacher.model + ")",
                         eval::metrics(cm), usage.total(), std::nullopt});
  report.json["method"] = "distill";
  report.json["config"] = report_config(config);
  report.json["test"] = test_json(test);
  report.json["metrics"] = {
      {"binary", loop::to_json(eval::metrics(cm))},
      {"macro", loop::to_json(eval::metrics(cm, MetricConvention::macro_averaged))}};
  report.json["usage"] = loop::to_json(usage);
  report.json["record"] = loop::to_json(result.record);
  report.json["final_model"] = result.model_dir.filename().string();
  report.json["airgap"] = audit_transcript(test, config.run_dir / loop::kTranscriptFile);
  const auto run = loop::read_json(config.run_dir / loop::kRunManifest);
  write_outputs(config, report, run.value("wall_seconds", 0.0));
  return report;
}

Report cmd_dpo(const RunConfig& config) {
  config.validate();
  if (config.run_dir.empty()) throw Error(ErrorKind::config, "dpo needs a run directory (--run-dir)");
  require_corpus(config);
  const auto t0 = std::chrono::steady_clock::now();
  fs::create_directories(config.run_dir);
  loop::write_json_atomic(config.run_dir / kConfigFile, to_json(config));
  fs::remove(config.run_dir / loop::kTranscriptFile);

  auto teacher = make_teacher(config);
  teacher->attach_transcript(transcript_for(config));
  auto trainer = make_trainer(config);

  train::PreferenceBuildOptions popt;
  popt.system_prompt = teacher::default_system_prompt(config.student_name);
  popt.params = teacher::GenerationParams::for_generation(config.teacher.model);
  popt.chunk_size = config.dpo_chunk_size;
  auto built = train::build_preference_dataset(*teacher, config.dpo_pairs, popt);
  train::write_preferences(config.run_dir / kPreferenceFile, built.pairs);
  spdlog::info("preference data: {} pairs from {} requests", built.pairs.size(), built.requests);

  const auto model = trainer->train_preferences(built.pairs, config.hyper, config.run_dir / "model");
  const auto test = load_test_set(config);
  const auto cm = eval::confusion(*model, test);
  const auto usage = teacher->total_usage();

  Report report;
  const auto label = student_label(config) + " + DPO";
  report.rows.push_back({label + " (binary)", eval::metrics(cm), usage.total(), std::nullopt});
  report.rows.push_back({label + " (macro)", eval::metrics(cm, MetricConvention::macro_averaged),
                         usage.total(), std::nullopt});
  report.json["method"] = "dpo";
  report.json["config"] = report_config(config);
  report.json["test"] = test_json(test);
  report.json["preferences"] = {{"pairs", built.pairs.size()},
                                {"requests", built.requests},
                                {"rejected_lines", built.rejected_lines}};
  report.json["metrics"] = {
      {"binary", loop::to_json(eval::metrics(cm))},
      {"macro", loop::to_json(eval::metrics(cm, MetricConvention::macro_averaged))}};
  report.json["usage"] = loop::to_json(usage);
  report.json["airgap"] = audit_transcript(test, config.run_dir / loop::kTranscriptFile);
  write_outputs(config, report, seconds_since(t0));
  return report;
}

Report cmd_eval(const RunConfig& config, const fs::path& model_dir) {
  config.validate();
  if (model_dir.empty()) throw Error(ErrorKind::config, "eval needs --model");
  const auto t0 = std::chrono::steady_clock::now();
  const auto test = load_test_set(config);
  auto trainer = make_trainer(config);
  const auto model = trainer->load(model_dir);
  const auto cm = eval::confusion(*model, test);

  Report report;
  report.rows.push_back({student_label(config) + " (" + model_dir.filename().string() + ")",
                         eval::metrics(cm), std::nullopt, std::nullopt});
  report.json["method"] = "eval";
  report.json["config"] = report_config(config);
  report.json["test"] = test_json(test);
  report.json["metrics"] = {
      {"binary", loop::to_json(eval::metrics(cm))},
      {"macro", loop::to_json(eval::metrics(cm, MetricConvention::macro_averaged))}};
  write_outputs(config, report, seconds_since(t0));
  return report;
}

Report cmd_report(const std::vector<fs::path>& run_dirs) {
  if (run_dirs.empty()) throw Error(ErrorKind::config, "report needs at least one run directory");
  Report report;
  report.json["runs"] = ordered_json::array();
  for (const auto& dir : run_dirs) {
    const auto j = loop::read_json(dir / kReportFile);
    std::optional<double> seconds;
    if (fs::exists(dir / kTimingFile)) {
      seconds = loop::read_json(dir / kTimingFile).at("wall_seconds").get<double>();
    }
    for (const auto& r : j.at("rows")) {
      eval::ReportRow row;
      row.model = r.at("model").get<std::string>();
      row.metrics = loop::metrics_from_json(r.at("metrics"));
      if (!r.at("tokens").is_null()) row.tokens = r.at("tokens").get<std::uint64_t>();
      row.seconds = seconds;
      report.rows.push_back(std::move(row));
    }
    report.json["runs"].push_back({{"run_dir", dir.string()}, {"method", j.at("method")}});
  }
  return report;
}

// ---------------------------------------------------------------------------

int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::config:
    case ErrorKind::precondition:
    case ErrorKind::io:
      return 2;
    case ErrorKind::credential_missing:
    case ErrorKind::exhausted_retries:
    case ErrorKind::malformed_endpoint_response:
    case ErrorKind::endpoint_rejected:
    case ErrorKind::fixture_exhausted:
    case ErrorKind::parse_failure:
    case ErrorKind::empty_hypotheses:
    case ErrorKind::airgap_violation:
      return 3;
    case ErrorKind::dimension_mismatch:
    case ErrorKind::empty_batch:
    case ErrorKind::single_class_dataset:
    case ErrorKind::non_finite_loss:
    case ErrorKind::unparseable_response:
    case ErrorKind::nonzero_exit:
    case ErrorKind::timeout:
    case ErrorKind::missing_manifest:
    case ErrorKind::line_count_mismatch:
    case ErrorKind::unparseable_line:
    case ErrorKind::child_crash:
      return 4;
    case ErrorKind::model_load_failure:
    case ErrorKind::unreadable_file:
    case ErrorKind::insufficient_class_count:
    case ErrorKind::predictor_failure:
    case ErrorKind::empty_matrix:
    case ErrorKind::corpus_missing:
      return 5;
  }
  return 1;
}

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Teacher-driven distillation of SMS spam classifiers"};
  app.require_subcommand(1);
  std::string config_path, run_dir, corpus;
  std::optional<std::uint64_t> seed;
  bool quiet = false;
  app.add_option("--config", config_path, "JSON run configuration");
  app.add_option("--seed", seed, "Seed for training and the test-set sample");
  app.add_option("--run-dir", run_dir, "Run directory (outputs, resume state)");
  app.add_option("--corpus", corpus, "SMS Spam Collection file (label<TAB>text)");
  app.add_flag("-q,--quiet", quiet, "Only print warnings and errors");

  auto* baseline = app.add_subcommand("baseline", "Evaluate the untrained student");
  auto* distill = app.add_subcommand("distill", "Run the teacher-driven refinement loop");
  auto* dpo = app.add_subcommand("dpo", "Train on teacher preference pairs");
  auto* evalc = app.add_subcommand("eval", "Evaluate a saved model on the sealed test set");
  std::string model_dir;
  evalc->add_option("--model", model_dir, "Model directory")->required();
  auto* report = app.add_subcommand("report", "Print the reports stored in run directories");
  std::vector<std::string> report_dirs;
  report->add_option("dirs", report_dirs, "Run directories (default: --run-dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e, out, err);
    return rc == 0 ? 0 : 2;
  }
  spdlog::set_level(quiet ? spdlog::level::warn : spdlog::level::info);

  try {
    RunConfig config = config_path.empty() ? parse_config(json::object()) : load_config(config_path);
    if (seed) apply_seed(config, *seed);
    if (!run_dir.empty()) config.run_dir = run_dir;
    if (!corpus.empty()) config.corpus = corpus;

    Report r;
    if (baseline->parsed()) {
      r = cmd_baseline(config);
    } else if (distill->parsed()) {
      r = cmd_distill(config);
    } else if (dpo->parsed()) {
      r = cmd_dpo(config);
    } else if (evalc->parsed()) {
      r = cmd_eval(config, model_dir);
    } else {
      std::vector<fs::path> dirs(report_dirs.begin(), report_dirs.end());
      if (dirs.empty() && !config.run_dir.empty()) dirs.push_back(config.run_dir);
      r = cmd_report(dirs);
    }
    out << r.text();
    return 0;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace distillery::cli
