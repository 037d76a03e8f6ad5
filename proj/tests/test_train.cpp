#include <doctest.h>

#include <cmath>
#include <random>

#include "distillery/datagen.hpp"
#include "distillery/train.hpp"
#include "support.hpp"

using namespace distillery;
using namespace distillery::train;
using student::StudentConfig;
using student::StudentModel;

namespace {

StudentConfig small_config() {
  StudentConfig c;
  c.feature_dim = 1 << 12;
  c.hidden = 16;
  c.rank = 4;
  c.alpha = 8;
  return c;
}

Dataset separable() {
  Dataset d;
  for (auto& e : datagen::read_jsonl(testing::fixture("separable_200.jsonl"))) d.insert(e);
  return d;
}

double accuracy(const StudentModel& m, const Dataset& d) {
  std::size_t ok = 0;
  for (const auto& e : d.examples()) ok += m.predict(e.text()).label == e.label();
  return static_cast<double>(ok) / static_cast<double>(d.size());
}

// Adapters with every factor non-zero, so all gradient paths are live.
void randomize(StudentModel& m, std::uint64_t seed) {
  std::mt19937_64 g(seed);
  std::normal_distribution<double> n(0.0, 0.3);
  auto& a = m.adapters();
  for (auto& v : a.b0) v = n(g);
  for (auto& v : a.a1) v = n(g);
  for (auto& v : a.b1) v = n(g);
  for (auto& v : a.a0t) v = n(g);
}

// Reference to one adapter coordinate by block.
double& coord(StudentModel& m, int block, std::size_t i) {
  auto& a = m.adapters();
  switch (block) {
    case 0: return a.b0[i];
    case 1: return a.a1[i];
    case 2: return a.b1[i];
    default: return a.a0t[i];
  }
}

double analytic(const Gradient& g, int block, std::size_t i, std::size_t rank) {
  switch (block) {
    case 0: return g.b0[i];
    case 1: return g.a1[i];
    case 2: return g.b1[i];
    default: {
      const auto it = g.a0t.find(static_cast<std::uint32_t>(i / rank));
      return it == g.a0t.end() ? 0.0 : it->second[i % rank];
    }
  }
}

// Central finite differences on random coordinates; returns the max relative error.
template <class Loss>
double max_fd_error(StudentModel& m, const Gradient& g, const std::vector<std::size_t>& live_rows,
                    std::mt19937_64& rng, Loss&& loss) {
  const double h = 1e-4;
  const std::size_t r = m.config().rank;
  double worst = 0.0;
  for (int c = 0; c < 12; ++c) {
    const int block = c % 4;
    std::size_t i;
    if (block == 3) {
      i = live_rows[rng() % live_rows.size()] * r + rng() % r;
    } else {
      const std::size_t size = block == 0 ? m.adapters().b0.size()
                               : block == 1 ? m.adapters().a1.size()
                                            : m.adapters().b1.size();
      i = rng() % size;
    }
    double& w = coord(m, block, i);
    const double saved = w;
    w = saved + h;
    const double up = loss();
    w = saved - h;
    const double down = loss();
    w = saved;
    const double numeric = (up - down) / (2 * h);
    const double a = analytic(g, block, i, r);
    const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-6});
    worst = std::max(worst, rel);
  }
  return worst;
}

}  // namespace

TEST_SUITE("train") {

TEST_CASE("bce_loss reference values") {
  const std::vector<double> half{0.5, 0.5, 0.5};
  const std::vector<Label> ys{Label::spam, Label::ham, Label::spam};
  CHECK(bce_loss(half, ys) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  const std::vector<double> perfect{1.0, 0.0};
  const std::vector<Label> y2{Label::spam, Label::ham};
  CHECK(bce_loss(perfect, y2) == doctest::Approx(-std::log(1 - kProbClamp)).epsilon(1e-9));

  const std::vector<double> p{0.8, 0.3};
  CHECK(bce_loss(p, y2) == doctest::Approx(0.289909).epsilon(1e-6));
  CHECK(bce_loss(p, y2) == doctest::Approx(-(std::log(0.8) + std::log(0.7)) / 2).epsilon(1e-12));
  CHECK_THROWS_AS(bce_loss(std::vector<double>{}, std::vector<Label>{}), Error);
}

TEST_CASE("dpo_loss reference values") {
  CHECK(dpo_loss(0.5, 0.5, Label::spam, 0.1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(dpo_loss(0.9, 0.5, Label::spam, 1.0) == doctest::Approx(std::log(10.0 / 9.0)).epsilon(1e-9));
  CHECK(dpo_loss(0.9, 0.5, Label::spam, 1.0) == doctest::Approx(0.105361).epsilon(1e-5));
  CHECK(dpo_loss(0.93, 0.2, Label::ham, 0.0) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  StudentModel m(small_config());
  CHECK(dpo_loss(m, m, PreferencePair{"hi", "ham", "spam"}, 0.1) == doctest::Approx(std::log(2.0)));
}

TEST_CASE("BCE gradient matches central finite differences") {
  std::mt19937_64 rng(5);
  const auto data = separable();
  for (int batch = 0; batch < 5; ++batch) {
    StudentModel m(small_config());
    randomize(m, 100 + batch);
    std::vector<student::FeatureVector> xs;
    std::vector<Label> ys;
    std::vector<std::size_t> rows;
    for (int k = 0; k < 8; ++k) {
      const auto& e = data[rng() % data.size()];
      xs.push_back(m.features(e.text()));
      ys.push_back(e.label());
      rows.insert(rows.end(), xs.back().indices.begin(), xs.back().indices.end());
    }
    Gradient g;
    bce_loss_and_gradient(m, xs, ys, &g);
    const double err = max_fd_error(m, g, rows, rng, [&] { return bce_loss_and_gradient(m, xs, ys, nullptr); });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("DPO gradient matches central finite differences") {
  std::mt19937_64 rng(6);
  const auto data = separable();
  for (int batch = 0; batch < 5; ++batch) {
    StudentModel ref(small_config());
    StudentModel m(small_config());
    randomize(m, 200 + batch);
    std::vector<DpoItem> items;
    std::vector<std::size_t> rows;
    for (int k = 0; k < 8; ++k) {
      const auto& e = data[rng() % data.size()];
      auto x = m.features(e.text());
      rows.insert(rows.end(), x.indices.begin(), x.indices.end());
      const double q = ref.probability(x);
      items.push_back({std::move(x), e.label(), q});
    }
    Gradient g;
    dpo_loss_and_gradient(m, items, 0.7, &g);
    const double err = max_fd_error(m, g, rows, rng, [&] { return dpo_loss_and_gradient(m, items, 0.7, nullptr); });
    CHECK(err < 1e-4);
  }
}

TEST_CASE("train_bce on the separable fixture") {
  const auto d = separable();
  const auto r = train_bce(d, TrainHyper{});
  REQUIRE(r.epoch_losses.size() == 3);
  CHECK(r.epoch_losses[1] < r.epoch_losses[0]);
  CHECK(r.epoch_losses[2] < r.epoch_losses[1]);
  CHECK(accuracy(r.model, d) >= 0.95);
}

TEST_CASE("train_bce: frozen base, determinism, zero epochs") {
  const auto d = separable();
  TrainHyper h;
  const StudentModel untrained{student_config(StudentConfig{}, h)};
  const auto w0_before = untrained.base().w0();  // copy of the initial weights
  const auto a = train_bce(d, h);
  const auto b = train_bce(d, h);
  CHECK(a.model.adapters() == b.model.adapters());
  CHECK(a.model.base().w0() == w0_before);
  CHECK(a.model.base().digest() == untrained.base().digest());

  h.epochs = 0;
  const auto z = train_bce(d, h);
  CHECK(z.model.adapters() == untrained.adapters());
  CHECK(z.epoch_losses.empty());
}

TEST_CASE("train_bce preconditions") {
  Dataset one_class;
  one_class.insert(LabeledExample("a message", Label::spam));
  one_class.insert(LabeledExample("another message", Label::spam));
  try {
    train_bce(one_class, TrainHyper{});
    FAIL("expected single-class error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::single_class_dataset);
  }
  Dataset val(SplitTag::validation);
  val.insert(LabeledExample("a", Label::spam));
  CHECK_THROWS_AS(train_bce(val, TrainHyper{}), Error);

  TrainHyper bad;
  bad.learning_rate = 1e308;
  bad.learning_rate *= 10;  // inf
  try {
    train_bce(separable(), bad);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK((e.kind() == ErrorKind::precondition || e.kind() == ErrorKind::non_finite_loss));
  }
}

TEST_CASE("train_dpo improves on the untrained student") {
  const auto d = separable();
  std::vector<PreferencePair> pairs;
  for (const auto& e : d.examples()) {
    const bool spam = e.label() == Label::spam;
    pairs.push_back({e.text(), spam ? "spam" : "ham", spam ? "ham" : "spam"});
  }
  const auto r = train_dpo(pairs, TrainHyper{});
  const StudentModel untrained{StudentConfig{}};
  CHECK(accuracy(r.model, d) > accuracy(untrained, d));
  CHECK_THROWS_AS(train_dpo({}, TrainHyper{}), Error);
}

TEST_CASE("DPO and BCE consume the same LoRA fields") {
  TrainHyper h;
  CHECK(lora_fields(h) == LoraFields{32, 64.0, 0.5, 8});
  TrainHyper h2 = h;
  h2.beta = 0.5;
  CHECK(lora_fields(h2) == lora_fields(h));
}

TEST_CASE("parse_preferences") {
  std::vector<std::string> bad;
  const auto pairs = parse_preferences(
      "Win a prize now\tspam\tham\n"
      "see you later\tham\tspam\n"
      "same both\tham\tham\n"
      "no tabs here\n"
      "text with\ttab inside\tspam\tham\n",
      &bad);
  REQUIRE(pairs.size() == 3);
  CHECK(pairs[2].prompt == "text with\ttab inside");
  CHECK(bad.size() == 2);
}

TEST_CASE("build_preference_dataset: chunking arithmetic and caps") {
  SUBCASE("10 valid lines -> 10 pairs") {
    std::string reply;
    for (int i = 0; i < 5; ++i) reply += "free prize " + std::to_string(i) + "\tspam\tham\n";
    for (int i = 0; i < 5; ++i) reply += "meet at " + std::to_string(i) + "\tham\tspam\n";
    teacher::ScriptedTeacher t({{reply, std::nullopt}});
    PreferenceBuildOptions opt{"SYS", teacher::GenerationParams::for_generation("m")};
    const auto r = build_preference_dataset(t, 10, opt);
    CHECK(r.pairs.size() == 10);
    CHECK(r.requests == 1);
  }
  SUBCASE("n = 10,000 in chunks of 500 is 20 calls") {
    std::vector<teacher::FixtureReply> replies;
    for (int c = 0; c < 20; ++c) {
      std::string reply;
      for (int i = 0; i < 250; ++i) reply += "prize " + std::to_string(c) + "-" + std::to_string(i) + "\tspam\tham\n";
      for (int i = 0; i < 250; ++i) reply += "lunch " + std::to_string(c) + "-" + std::to_string(i) + "\tham\tspam\n";
      replies.push_back({reply, std::nullopt});
    }
    teacher::ScriptedTeacher t(std::move(replies));
    PreferenceBuildOptions opt{"SYS", teacher::GenerationParams::for_generation("m")};
    const auto r = build_preference_dataset(t, 10000, opt);
    CHECK(r.requests == 20);
    CHECK(r.pairs.size() == 10000);
  }
  SUBCASE("the bundled DPO fixture yields exactly 1,000 pairs") {
    auto t = teacher::ScriptedTeacher::from_file(testing::fixture("dpo_teacher.jsonl"));
    PreferenceBuildOptions opt{"SYS", teacher::GenerationParams::for_generation("m")};
    const auto r = build_preference_dataset(*t, 1000, opt);
    CHECK(r.pairs.size() == 1000);
    CHECK(r.requests == 2);
  }
}

TEST_CASE("preferences file round-trip") {
  testing::TempDir dir;
  const std::vector<PreferencePair> p{{"a \"b\"", "spam", "ham"}, {"£1", "ham", "spam"}};
  write_preferences(dir / "p.jsonl", p);
  const auto back = read_preferences(dir / "p.jsonl");
  REQUIRE(back.size() == 2);
  CHECK(back[0].prompt == "a \"b\"");
  CHECK(back[1].chosen == "ham");
}

TEST_CASE("builtin trainer persists and reloads models") {
  testing::TempDir dir;
  BuiltinTrainer t;
  const auto d = separable();
  const auto m = t.train(d, TrainHyper{}, dir / "m1");
  const auto loaded = t.load(dir / "m1");
  std::vector<std::string> texts;
  for (const auto& e : d.examples()) texts.push_back(e.text());
  const auto a = m->predict_batch(texts);
  const auto b = loaded->predict_batch(texts);
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].probability == b[i].probability);
  }
  const auto cont = t.train_continue(d, TrainHyper{}, dir / "m1", dir / "m2");
  CHECK(std::filesystem::exists(dir / "m2" / kStudentFile));
  CHECK_THROWS_AS(t.load(dir / "nope"), Error);
}

}
