#include <doctest.h>

#include <fstream>
#include <json.hpp>
#include <sstream>
#include <sys/wait.h>

#include "distillery/cli.hpp"
#include "support.hpp"

using namespace distillery;
using namespace distillery::cli;
using nlohmann::json;

namespace {

RunConfig fixture_config(const char* name, const std::filesystem::path& run_dir) {
  auto c = load_config(testing::fixture(name));
  c.run_dir = run_dir;
  return c;
}

struct CliResult {
  int code;
  std::string out, err;
};

CliResult invoke(std::vector<std::string> args) {
  args.insert(args.begin(), "distillery");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = run_cli(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

}  // namespace

TEST_SUITE("cli") {

TEST_CASE("config parsing resolves paths and rejects unknown keys") {
  const auto c = load_config(testing::fixture("distill.json"));
  REQUIRE(c.teacher.fixture);
  CHECK(c.teacher.fixture->is_absolute());
  CHECK(c.corpus == testing::fixture("heldout_sms.tsv"));
  CHECK(c.test_per_class == 100);
  CHECK(c.trainer.builtin());
  CHECK(c.hyper.seed == 42);

  CHECK_THROWS_AS(parse_config(json::parse(R"({"teacher":{"fixture":"x"},"bogus":1})")), Error);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"teacher":{"fixture":"x","extra":1}})")), Error);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"teacher":{"fixture":"x","endpoint":"http://e"}})")), Error);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"teacher":{"fixture":"x"},"trainer":{"kind":"external"}})")),
                  Error);
  CHECK_THROWS_AS(parse_config(json::parse(R"({"teacher":{"fixture":"x"},"seed":"forty-two"})")), Error);

  const auto ext = parse_config(
      json::parse(R"({"teacher":{"fixture":"t.jsonl"},"trainer":{"kind":"external","command":["run.sh","--x"],
                      "train_timeout_s":5}})"),
      "/base");
  CHECK(ext.teacher.fixture == std::filesystem::path("/base/t.jsonl"));
  CHECK(ext.trainer.external_command.size() == 2);
  CHECK(ext.trainer.train_timeout == std::chrono::seconds(5));

  // Canonical form parses back to itself.
  const auto again = parse_config(json::parse(to_json(c).dump()));
  CHECK(to_json(again) == to_json(c));
}

TEST_CASE("apply_seed drives training and test sampling") {
  auto c = load_config(testing::fixture("distill.json"));
  apply_seed(c, 7);
  CHECK(c.seed == 7);
  CHECK(c.hyper.seed == 7);
}

TEST_CASE("exit code table") {
  CHECK(exit_code_for(ErrorKind::config) == 2);
  CHECK(exit_code_for(ErrorKind::fixture_exhausted) == 3);
  CHECK(exit_code_for(ErrorKind::airgap_violation) == 3);
  CHECK(exit_code_for(ErrorKind::nonzero_exit) == 4);
  CHECK(exit_code_for(ErrorKind::corpus_missing) == 5);
  CHECK(exit_code_for(ErrorKind::model_load_failure) == 5);
}

TEST_CASE("argument errors") {
  CHECK(invoke({}).code == 2);
  CHECK(invoke({"nonsense"}).code == 2);
  CHECK(invoke({"--config", "/nonexistent/c.json", "baseline"}).code == 2);
  CHECK(invoke({"--config", testing::fixture("distill.json").string(), "eval"}).code == 2);  // --model required
}

TEST_CASE("missing corpus exits 5") {
  testing::TempDir dir;
  const auto r = invoke({"--config", testing::fixture("distill.json").string(), "--corpus",
                      (dir / "missing.tsv").string(), "--run-dir", (dir / "run").string(), "-q", "distill"});
  CHECK(r.code == 5);
  CHECK(r.err.find("missing.tsv") != std::string::npos);
  CHECK_FALSE(std::filesystem::exists(dir / "run" / loop::kTranscriptFile));
}

TEST_CASE("baseline on the held-out split") {
  const auto r = cmd_baseline(fixture_config("distill.json", {}));
  REQUIRE(r.rows.size() == 1);
  const auto& m = r.rows[0].metrics;
  CHECK(m.source == ConfusionMatrix{100, 100, 0, 0});
  CHECK(r.json["metrics"]["macro"]["recall"].get<double>() == doctest::Approx(m.accuracy));
  CHECK(r.text().find("50.00%") != std::string::npos);
}

TEST_CASE("distill, eval and report: deterministic and teacher-free evaluation") {
  testing::TempDir a, b;
  const auto ra = cmd_distill(fixture_config("distill.json", a.path()));
  const auto rb = cmd_distill(fixture_config("distill.json", b.path()));
  CHECK(testing::slurp(a / kReportFile) == testing::slurp(b / kReportFile));
  CHECK(std::filesystem::exists(a / kTimingFile));
  CHECK(ra.json["airgap"]["leaks"] == 0);
  CHECK(ra.rows[0].metrics.accuracy >= 0.9);

  const auto final_dir = a / ra.json["final_model"].get<std::string>();
  const auto teachers_before = teacher::Teacher::instances_created();
  const auto ev = cmd_eval(fixture_config("distill.json", {}), final_dir);
  CHECK(teacher::Teacher::instances_created() == teachers_before);
  CHECK(ev.rows[0].metrics == ra.rows[0].metrics);

  const auto rep = cmd_report({a.path(), b.path()});
  CHECK(rep.rows.size() == 2);
  CHECK(rep.text().find(eval::format_tokens(*ra.rows[0].tokens)) != std::string::npos);

  // A corrupted model file is an evaluation error.
  testing::TempDir bad;
  std::filesystem::copy(final_dir, bad / "m", std::filesystem::copy_options::recursive);
  auto bytes = testing::slurp(bad / "m" / train::kStudentFile);
  bytes[bytes.size() / 2] ^= 0x11;
  testing::spit(bad / "m" / train::kStudentFile, bytes);
  const auto r = invoke({"--config", testing::fixture("distill.json").string(), "-q", "eval", "--model",
                      (bad / "m").string()});
  CHECK(r.code == 5);
}

TEST_CASE("dpo writes its preference data and shares the LoRA settings") {
  testing::TempDir dpo, dist;
  const auto r = cmd_dpo(fixture_config("dpo.json", dpo.path()));
  REQUIRE(r.rows.size() == 2);
  CHECK(r.json["preferences"]["pairs"] == 1000);
  std::ifstream in(dpo / kPreferenceFile);
  std::size_t lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  CHECK(lines == 1000);
  CHECK(r.json["airgap"]["leaks"] == 0);

  // Method parity: the adapter hyperparameters are identical across methods.
  auto dc = fixture_config("distill.json", dist.path());
  dc.loop.max_iterations = 1;
  cmd_distill(dc);
  const auto jd = loop::read_json(dpo / kConfigFile);
  const auto jt = loop::read_json(dist / kConfigFile);
  for (const char* k : {"rank", "alpha", "learning_rate", "batch_size", "epochs"}) {
    CHECK_MESSAGE(jd["hyper"][k] == jt["hyper"][k], k);
  }
  CHECK(jd["seed"] == jt["seed"]);
}

TEST_CASE("teacher failure exits 3 and leaves a partial run record") {
  testing::TempDir dir;
  std::ifstream in(testing::fixture("distill_teacher.jsonl"));
  std::string line, truncated;
  for (int i = 0; i < 4 && std::getline(in, line); ++i) truncated += line + "\n";
  testing::spit(dir / "short.jsonl", truncated);
  json cfg = json::parse(testing::slurp(testing::fixture("distill.json")));
  cfg["teacher"]["fixture"] = (dir / "short.jsonl").string();
  cfg["corpus"] = testing::fixture("heldout_sms.tsv").string();
  testing::spit(dir / "cfg.json", cfg.dump());

  const auto r = invoke({"--config", (dir / "cfg.json").string(), "--run-dir", (dir / "run").string(), "-q", "distill"});
  CHECK(r.code == 3);
  const auto j = loop::read_json(dir / "run" / loop::kRunManifest);
  CHECK(j["record"]["stop_reason"] == "teacher-failure");
  CHECK(j["record"]["iterations"].size() >= 1);
}

TEST_CASE("the installed executable behaves like run_cli") {
  testing::TempDir dir;
  const std::string cmd = std::string(DISTILLERY_CLI) + " --config " + testing::fixture("distill.json").string() +
                          " -q baseline > " + (dir / "out.txt").string() + " 2>&1";
  CHECK(std::system(cmd.c_str()) == 0);
  CHECK(testing::slurp(dir / "out.txt").find("50.00%") != std::string::npos);
  const std::string bad = std::string(DISTILLERY_CLI) + " --bogus > /dev/null 2>&1";
  const int status = std::system(bad.c_str());
  CHECK(WEXITSTATUS(status) == 2);
}

}
