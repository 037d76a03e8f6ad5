#include <doctest.h>

#include <cmath>
#include <random>

#include "distillery/eval.hpp"
#include "distillery/student.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace distillery;
using namespace distillery::eval;
namespace oracle = testing::oracle;

namespace {

std::string synthetic_corpus(std::size_t spam, std::size_t ham) {
  std::string s;
  for (std::size_t i = 0; i < spam; ++i) s += "spam\tWIN cash prize number " + std::to_string(i) + " txt now\n";
  for (std::size_t i = 0; i < ham; ++i) s += "ham\tare we still on for lunch, slot " + std::to_string(i) + "\n";
  return s;
}

// Always answers the same label.
class ConstantClassifier : public train::Classifier {
 public:
  explicit ConstantClassifier(Label l) : label_(l) {}
  std::vector<student::Prediction> predict_batch(std::span<const std::string> texts) const override {
    return std::vector<student::Prediction>(texts.size(), {label_, label_ == Label::spam ? 1.0 : 0.0});
  }

 private:
  Label label_;
};

class ThrowingClassifier : public train::Classifier {
 public:
  std::vector<student::Prediction> predict_batch(std::span<const std::string>) const override {
    throw std::runtime_error("backend down");
  }
};

oracle::Row row_of(const MetricVector& m) {
  auto c = [](double x) { return static_cast<std::int64_t>(std::llround(round_half_away(x * 100.0, 2) * 100.0)); };
  return {c(m.accuracy), c(m.precision), c(m.recall), c(m.f1)};
}

}  // namespace

TEST_SUITE("eval") {

TEST_CASE("brute-force oracle pins the zero-shot row quadruple") {
  const auto hits = oracle::brute_force({4980, 2857, 27, 53});
  REQUIRE(hits.size() == 1);
  CHECK(hits[0] == oracle::Quad{2, 5, 745, 742});
  const ConfusionMatrix cm{2, 5, 745, 742};
  const auto m = metrics(cm);
  CHECK(format_percent(m.accuracy) == "49.80");
  CHECK(format_percent(m.precision) == "28.57");
  CHECK(format_percent(m.recall) == "0.27");
  CHECK(format_percent(m.f1) == "0.53");
  CHECK(row_of(m) == oracle::binary_row(hits[0]));
}

TEST_CASE("brute-force oracle pins the best distilled row quadruple") {
  const auto hits = oracle::brute_force({9431, 9265, 9625, 9442});
  REQUIRE(hits.size() == 1);
  CHECK(hits[0] == oracle::Quad{719, 57, 28, 690});
  const auto m = metrics(ConfusionMatrix{719, 57, 28, 690});
  CHECK(std::fabs(m.accuracy * 100 - 94.31) < 0.01);
  CHECK(std::fabs(m.precision * 100 - 92.65) < 0.01);
  CHECK(std::fabs(m.recall * 100 - 96.25) < 0.01);
  CHECK(std::fabs(m.f1 * 100 - 94.42) < 0.01);
  CHECK(m.fp == 57);
  CHECK(m.fn == 28);
}

TEST_CASE("metrics agree with the integer oracle on random matrices") {
  std::mt19937_64 g(17);
  std::uniform_int_distribution<std::uint64_t> d(0, 2000);
  for (int i = 0; i < 2000; ++i) {
    const oracle::Quad q{d(g) + 1, d(g) + 1, d(g), d(g)};
    const auto m = metrics(ConfusionMatrix{q.tp, q.fp, q.fn, q.tn});
    const auto want = oracle::binary_row(q);
    const auto got = row_of(m);
    // Values within a hair of a rounding boundary may land either side.
    REQUIRE(std::llabs(got.acc - want.acc) <= 1);
    REQUIRE(std::llabs(got.f1 - want.f1) <= 1);
  }
}

TEST_CASE("balanced-set identity: macro recall equals binary accuracy") {
  std::mt19937_64 g(99);
  std::uniform_int_distribution<std::uint64_t> n(1, 5000);
  for (int i = 0; i < 5000; ++i) {
    const std::uint64_t per = n(g);
    std::uniform_int_distribution<std::uint64_t> k(0, per);
    const std::uint64_t tp = k(g), fp = k(g);
    const ConfusionMatrix cm{tp, fp, per - tp, per - fp};
    const auto bin = metrics(cm);
    const auto mac = metrics(cm, MetricConvention::macro_averaged);
    REQUIRE(std::fabs(mac.recall - bin.accuracy) <= 1e-12);
  }
}

TEST_CASE("metric edge cases") {
  CHECK_THROWS_AS(metrics(ConfusionMatrix{}), Error);
  const auto m = metrics(ConfusionMatrix{0, 0, 10, 10});  // never predicts spam
  CHECK(m.degenerate);
  CHECK(m.precision == 0.0);
  CHECK(m.f1 == 0.0);
  CHECK(m.accuracy == 0.5);
  const auto perfect = metrics(ConfusionMatrix{5, 0, 0, 5});
  CHECK_FALSE(perfect.degenerate);
  CHECK(perfect.f1 == 1.0);
}

TEST_CASE("confusion from parallel label spans") {
  const std::vector<Label> truth{Label::spam, Label::spam, Label::ham, Label::ham};
  const std::vector<Label> pred{Label::spam, Label::ham, Label::spam, Label::ham};
  CHECK(confusion(truth, pred) == ConfusionMatrix{1, 1, 1, 1});
  CHECK_THROWS_AS(confusion(truth, std::span<const Label>(pred).first(3)), Error);
}

TEST_CASE("corpus parsing: labels, CRLF, Latin-1 fallback and diagnostics") {
  std::string s = "ham\tok then\r\n";
  s += "spam\tFree entry \xa3" "100 now\n";  // Latin-1 pound sign
  s += "\n";
  s += "no tab here\n";
  s += "maybe\tsomething\n";
  s += "ham\t   \n";
  s += "spam\tcol\twith tab\n";
  const auto c = CorpusReader::parse(s);
  CHECK(c.size() == 3);
  CHECK(c.count(Label::spam) == 2);
  CHECK(c.count(Label::ham) == 1);
  CHECK(c.latin1_lines() == 1);
  REQUIRE(c.diagnostics().size() == 3);
  CHECK(c.diagnostics()[0].line == 4);
  CHECK(c.diagnostics()[0].reason == "missing tab separator");
  CHECK(c.diagnostics()[1].reason == "unknown label");
  CHECK(c.diagnostics()[2].reason == "empty message");

  try {
    load_sms_corpus("/nonexistent/SMSSpamCollection");
    FAIL("expected unreadable file");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::unreadable_file);
  }
}

TEST_CASE("bundled held-out split parses cleanly") {
  const auto c = load_sms_corpus(testing::fixture("heldout_sms.tsv"));
  CHECK(c.size() == 200);
  CHECK(c.count(Label::spam) == 100);
  CHECK(c.diagnostics().empty());
}

TEST_CASE("balanced test: exact sizes, seeded determinism, insufficient classes") {
  const auto c = CorpusReader::parse(synthetic_corpus(800, 4800));
  const auto a = build_balanced_test(c, 42);
  CHECK(a.size() == 2 * kDefaultTestPerClass);
  CHECK(a.count(Label::spam) == kDefaultTestPerClass);
  CHECK(a.count(Label::ham) == kDefaultTestPerClass);
  CHECK(build_balanced_test(c, 42).digest() == a.digest());
  CHECK(build_balanced_test(c, 43).digest() != a.digest());
  CHECK(a.seed() == 42);

  const auto small = CorpusReader::parse(synthetic_corpus(10, 100));
  try {
    build_balanced_test(small, 1);
    FAIL("expected insufficient classes");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::insufficient_class_count);
  }
  CHECK(build_balanced_test(small, 1, 10).size() == 20);
}

TEST_CASE("sealed confusion for constant and failing predictors") {
  const auto c = CorpusReader::parse(synthetic_corpus(60, 60));
  const auto t = build_balanced_test(c, 3, 50);
  CHECK(confusion(ConstantClassifier(Label::spam), t) == ConfusionMatrix{50, 50, 0, 0});
  CHECK(confusion(ConstantClassifier(Label::ham), t) == ConfusionMatrix{0, 0, 50, 50});
  // The untrained student sits at p = 0.5 and therefore says spam everywhere.
  student::StudentConfig sc;
  sc.feature_dim = 1 << 12;
  sc.hidden = 8;
  sc.rank = 2;
  sc.alpha = 4;
  train::StudentClassifier untrained{student::StudentModel(sc)};
  CHECK(confusion(untrained, t) == ConfusionMatrix{50, 50, 0, 0});
  try {
    confusion(ThrowingClassifier{}, t);
    FAIL("expected predictor failure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::predictor_failure);
    CHECK(std::string(e.what()).find("WIN cash") == std::string::npos);
  }
}

TEST_CASE("leak counting over sealed texts") {
  const auto c = CorpusReader::parse(synthetic_corpus(30, 30));
  const auto t = build_balanced_test(c, 5, 30);
  CHECK(t.count_leaks("nothing to see in this transcript at all") == 0);
  CHECK(t.count_leaks("... are we still on for lunch, slot 7 ...") > 0);
}

TEST_CASE("formatting") {
  CHECK(format_tokens(27910) == "27.91K");
  CHECK(format_tokens(0) == "0.00K");
  CHECK(format_tokens(90385) == "90.39K");
  CHECK(format_percent(0.4980) == "49.80");
  CHECK(format_percent(0.00005) == "0.01");
  CHECK(round_half_away(-0.125, 2) == -0.13);
  CHECK(round_half_away(0.125, 2) == 0.13);
  CHECK(format_duration(4.26) == "4.3 s");
  CHECK(format_duration(420) == "~7 min");

  const auto header = format_report({});
  CHECK(header.find("Model") == 0);
  for (const char* col : {"Acc.", "Prec.", "Recall", "F1", "Tokens", "Time"}) CHECK(header.find(col) != std::string::npos);
  CHECK(std::count(header.begin(), header.end(), '\n') == 1);
  // Column order follows the header.
  CHECK(header.find("Acc.") < header.find("Prec."));
  CHECK(header.find("Prec.") < header.find("Recall"));
  CHECK(header.find("Recall") < header.find("F1"));

  const std::vector<ReportRow> rows{{"Qwen2.5-0.5B", metrics(ConfusionMatrix{2, 5, 745, 742}), std::nullopt, std::nullopt},
                                    {"distilled", metrics(ConfusionMatrix{719, 57, 28, 690}), 27910, 420.0}};
  const auto table = format_report(rows);
  CHECK(table.find("49.80%") != std::string::npos);
  CHECK(table.find("0.53%") != std::string::npos);
  CHECK(table.find("27.91K") != std::string::npos);
  CHECK(table.find("~7 min") != std::string::npos);
  CHECK(std::count(table.begin(), table.end(), '\n') == 3);
}

}
