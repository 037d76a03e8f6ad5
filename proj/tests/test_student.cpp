#include <doctest.h>

#include <cmath>
#include <random>

#include "distillery/datagen.hpp"
#include "distillery/student.hpp"
#include "distillery/train.hpp"
#include "support.hpp"

using namespace distillery;
using namespace distillery::student;

namespace {

// Independent FNV-1a 64 straight from the published constants.
std::uint64_t fnv_oracle(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

StudentConfig small_config() {
  StudentConfig c;
  c.feature_dim = 1 << 12;
  c.hidden = 16;
  c.rank = 4;
  c.alpha = 8;
  return c;
}

std::string random_text(std::mt19937& g) {
  static const std::string alphabet = "abcdefghijklmnopqrstuvwxyz £0123456789!?./:";
  std::uniform_int_distribution<std::size_t> len(0, 80), ch(0, alphabet.size() - 1);
  std::string s;
  const auto n = len(g);
  for (std::size_t i = 0; i < n; ++i) s += alphabet[ch(g)];
  return s;
}

}  // namespace

TEST_SUITE("student") {

TEST_CASE("fnv1a64 matches the reference constants") {
  for (const char* s : {"", "a", "ab", "foobar", "£"}) CHECK(fnv1a64(s) == fnv_oracle(s));
  CHECK(fnv1a64("a") == 0xaf63dc4c8601ec8cull);
  CHECK(fnv1a64("ab", 7) != fnv1a64("ab"));
  CHECK(derive_seed(42, "x") != derive_seed(42, "y"));
  CHECK(derive_seed(42, "x") == derive_seed(42, "x"));
}

TEST_CASE("rng: engine is the standard mt19937_64 and conversions are bounded") {
  Rng std_seed(5489);
  for (int i = 0; i < 9999; ++i) std_seed.next();
  CHECK(std_seed.next() == 9981545732273789042ull);  // the standard's conformance value

  Rng r(1);
  double sum = 0, sq = 0;
  for (int i = 0; i < 20000; ++i) {
    const double u = r.uniform();
    REQUIRE(u >= 0.0);
    REQUIRE(u < 1.0);
    const double g = r.gaussian();
    sum += g;
    sq += g * g;
  }
  CHECK(std::fabs(sum / 20000) < 0.03);
  CHECK(std::fabs(sq / 20000 - 1.0) < 0.05);
  for (int i = 0; i < 1000; ++i) REQUIRE(r.below(7) < 7);

  std::vector<int> v{1, 2, 3, 4, 5, 6, 7, 8};
  Rng a(9), b(9);
  auto v1 = v, v2 = v;
  a.shuffle(v1);
  b.shuffle(v2);
  CHECK(v1 == v2);
  std::sort(v1.begin(), v1.end());
  CHECK(v1 == v);
}

TEST_CASE("featurize definitions") {
  CHECK(featurize("").empty());
  CHECK(featurize("a").empty());  // shorter than the smallest n-gram
  const auto ab = featurize("ab");
  REQUIRE(ab.size() == 1);
  CHECK(ab.indices[0] == (fnv_oracle("ab") & ((1u << 18) - 1)));
  CHECK(ab.values[0] == 1.0);
  const std::string s = "  FREE   Prize!!\tCall NOW ";
  CHECK(featurize(s) == featurize(normalize_text(s)));

  const auto fv = featurize("win a free £100 voucher today");
  double sq = 0;
  for (std::size_t i = 0; i < fv.size(); ++i) {
    sq += fv.values[i] * fv.values[i];
    if (i) REQUIRE(fv.indices[i] > fv.indices[i - 1]);
  }
  CHECK(sq == doctest::Approx(1.0).epsilon(1e-12));
  // "£" is one code point: "£1" is a bigram, not split mid-character.
  CHECK(featurize("£1").size() == 1);
  CHECK_THROWS_AS(featurize("ab", 1000), Error);
}

TEST_CASE("decide and sigmoid") {
  CHECK(decide(0.9, 0.5) == Label::spam);
  CHECK(decide(0.5, 0.5) == Label::spam);
  CHECK(decide(0.4999, 0.5) == Label::ham);
  CHECK(sigmoid(0) == 0.5);
  CHECK(sigmoid(1000) < 1.0);
  CHECK(sigmoid(-1000) > 0.0);
}

TEST_CASE("config validation") {
  auto c = small_config();
  c.rank = 100;
  CHECK_THROWS_AS(StudentModel{c}, Error);
  c = small_config();
  c.feature_dim = 1000;
  CHECK_THROWS_AS(StudentModel{c}, Error);
  CHECK(StudentConfig{}.scaling() == 2.0);
  CHECK(StudentConfig{}.output_rank() == 1);
}

TEST_CASE("untrained student answers 0.5 everywhere and predicts spam") {
  StudentModel m(small_config());
  std::mt19937 g(3);
  for (int i = 0; i < 20; ++i) {
    const auto p = m.predict(random_text(g));
    CHECK(p.probability == 0.5);
    CHECK(p.label == Label::spam);
  }
  Activations act;
  m.forward(FeatureVector{}, act);  // empty input: bias path only
  CHECK(act.z == 0.0);
}

TEST_CASE("LoRA identity: zero B factors reproduce the frozen base exactly") {
  StudentModel m(small_config());
  const auto& base = m.base();
  std::mt19937 g(11);
  for (int t = 0; t < 100; ++t) {
    const auto x = m.features(random_text(g));
    Activations act;
    m.forward(x, act);
    // Oracle: the base network computed directly from its weights.
    for (std::size_t i = 0; i < base.hidden(); ++i) {
      double u = base.b0()[i];
      for (std::size_t k = 0; k < x.size(); ++k) u += x.values[k] * base.w0_row(x.indices[k])[i];
      REQUIRE(act.h[i] == std::tanh(u));
    }
    REQUIRE(act.p == m.base_probability(x));
  }
}

TEST_CASE("forward rejects out-of-range features") {
  StudentModel m(small_config());
  FeatureVector x{{5000}, {1.0}};
  try {
    m.probability(x);
    FAIL("expected dimension mismatch");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension_mismatch);
  }
}

TEST_CASE("base network is shared and seeded") {
  StudentModel a(small_config()), b(small_config());
  CHECK(a.base_ptr() == b.base_ptr());
  auto c = small_config();
  c.seed = 7;
  StudentModel d(c);
  CHECK(d.base().digest() != a.base().digest());
}

TEST_CASE("golden values for seed 42 (pinned from the reference build)") {
  StudentModel m{StudentConfig{}};
  CHECK(m.base().w0()[0] == doctest::Approx(-0.10732711935836095).epsilon(1e-15));
  CHECK(m.base().digest() == "00e384a56e208abcbaeb54519b7b6e3ad8982f687f638c36ef4ca9a52cdabe00");

  Dataset d;
  for (auto& e : datagen::read_jsonl(testing::fixture("separable_200.jsonl"))) d.insert(e);
  const auto r = train::train_bce(d, train::TrainHyper{});
  CHECK(std::fabs(r.model.probability("see you at the pub at 7") - 5.8226792900309415e-07) < 1e-9);
  CHECK(std::fabs(r.model.probability("URGENT: your parcel is held, pay £2.99 at http://x.top/a") -
                  0.99999503877019669) < 1e-9);
  REQUIRE(r.epoch_losses.size() == 3);
  CHECK(std::fabs(r.epoch_losses[0] - 0.45688714645077327) < 1e-9);
}

TEST_CASE("save/load round-trip and corruption detection") {
  testing::TempDir dir;
  StudentModel m(small_config());
  m.adapters().b0[3] = 0.25;
  m.adapters().b1[0] = -1.5;
  m.adapters().a0t[17] += 0.5;
  m.save(dir / "m.bin");
  const auto back = StudentModel::load(dir / "m.bin");
  CHECK(back.config() == m.config());
  CHECK(back.adapters() == m.adapters());

  auto bytes = testing::slurp(dir / "m.bin");
  SUBCASE("flipped payload byte") {
    bytes[bytes.size() - 20] ^= 0x5a;
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() / 2);
  }
  SUBCASE("wrong magic") {
    bytes[0] = 'X';
  }
  testing::spit(dir / "bad.bin", bytes);
  try {
    StudentModel::load(dir / "bad.bin");
    FAIL("expected load failure");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::model_load_failure);
  }
}

TEST_CASE("loading a missing file fails cleanly") {
  CHECK_THROWS_AS(StudentModel::load("/nonexistent/student.bin"), Error);
}

}
