#include <doctest.h>

#include "distillery/core.hpp"

using namespace distillery;

TEST_SUITE("core") {

TEST_CASE("normalize_text lowercases ASCII and collapses whitespace") {
  CHECK(normalize_text("  Hello\t\tWORLD \n") == "hello world");
  CHECK(normalize_text("") == "");
  CHECK(normalize_text("Ä £5 FREE") == "Ä £5 free");  // non-ASCII bytes untouched
}

TEST_CASE("utf8 helpers") {
  CHECK(is_valid_utf8("plain"));
  CHECK(is_valid_utf8("£100"));
  CHECK_FALSE(is_valid_utf8("\xa3" "100"));
  CHECK(latin1_to_utf8("\xa3" "100") == "£100");
  CHECK(utf8_length("£100") == 4);
  CHECK(utf8_prefix("£100", 2) == "£1");
  CHECK(trim("  x y  ") == "x y");
}

TEST_CASE("sha256_hex of the empty string") {
  CHECK(sha256_hex("") == "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST_CASE("WindowIndex finds shared 20-character windows") {
  WindowIndex idx(20);
  idx.add("Your parcel is held at the depot, pay the fee now");
  CHECK(idx.leaks_into("xx parcel is held at the depot yy"));
  CHECK_FALSE(idx.leaks_into("parcel is held at"));  // 17 chars only
  CHECK(idx.count_matches("Your parcel is held ") == 1);
  WindowIndex shorty(20);
  shorty.add("too short");  // shorter than the window: nothing to match
  CHECK(shorty.empty());
}

TEST_CASE("labels parse case-insensitively") {
  CHECK(parse_label(" SPAM ") == Label::spam);
  CHECK(parse_label("Ham") == Label::ham);
  CHECK_FALSE(parse_label("maybe"));
  CHECK(parse_response_label("Spam. This is a scam") == Label::spam);
  CHECK(parse_response_label("ham") == Label::ham);
  CHECK_FALSE(parse_response_label("hamster"));
}

TEST_CASE("origins round-trip") {
  for (const auto& o : {Origin::teacher(), Origin::refinement_round(3)}) {
    CHECK(parse_origin(to_string(o)) == o);
  }
  CHECK_FALSE(parse_origin("refinement-round-0"));
  CHECK_FALSE(parse_origin("refinement-round-x"));
}

TEST_CASE("LabeledExample validates and truncates") {
  CHECK_THROWS_AS(LabeledExample("   ", Label::ham), Error);
  CHECK_THROWS_AS(LabeledExample("x", Label::ham, "", Origin{OriginKind::real_corpus, 0}), Error);
  const LabeledExample e("  hi there ", Label::ham);
  CHECK(e.text() == "hi there");
  const LabeledExample long_one(std::string(1500, 'a'), Label::spam);
  CHECK(long_one.text().size() == kMaxMessageChars);
}

TEST_CASE("Dataset dedups on normalized text and counts classes") {
  Dataset d;
  CHECK(d.insert(LabeledExample("Hello there", Label::ham)) == InsertResult::inserted);
  CHECK(d.insert(LabeledExample("hello   THERE", Label::spam)) == InsertResult::duplicate);
  CHECK(d.insert(LabeledExample("WIN £1000 now", Label::spam)) == InsertResult::inserted);
  CHECK(d.size() == 2);
  CHECK(d.count(Label::spam) == 1);
  CHECK(d.contains_normalized("hello there"));

  Dataset d2;
  d2.insert(LabeledExample("Hello there", Label::ham));
  d2.insert(LabeledExample("WIN £1000 now", Label::spam));
  CHECK(d.content_digest() == d2.content_digest());
  d2.insert(LabeledExample("another", Label::ham));
  CHECK(d.content_digest() != d2.content_digest());
}

TEST_CASE("PreferencePair validation") {
  CHECK_NOTHROW(PreferencePair{"msg", "spam", "ham"}.validate());
  CHECK_THROWS_AS((PreferencePair{"msg", "spam", "spam"}.validate()), Error);
  CHECK_THROWS_AS((PreferencePair{"msg", "yes", "ham"}.validate()), Error);
  CHECK_THROWS_AS((PreferencePair{" ", "spam", "ham"}.validate()), Error);
  CHECK(PreferencePair{"m", "ham", "spam"}.chosen_label() == Label::ham);
}

TEST_CASE("ConfusionMatrix counts with spam positive") {
  ConfusionMatrix cm;
  cm.add(Label::spam, Label::spam);
  cm.add(Label::spam, Label::ham);
  cm.add(Label::ham, Label::spam);
  cm.add(Label::ham, Label::ham);
  cm.add(Label::ham, Label::ham);
  CHECK(cm == ConfusionMatrix{1, 1, 1, 2});
  CHECK(cm.total() == 5);
}

TEST_CASE("TokenUsage arithmetic") {
  TokenUsage a{10, 5, false};
  TokenUsage b{1, 2, true};
  const auto s = a + b;
  CHECK(s.total() == 18);
  CHECK(s.estimated);
  CHECK((s - b).total() == 15);
}

TEST_CASE("RunRecord enforces contiguous iterations and sums usage") {
  RunRecord r;
  r.setup_usage = {100, 50, false};
  IterationRecord it;
  it.index = 1;
  it.usage = {10, 10, false};
  r.append(it);
  it.index = 3;
  CHECK_THROWS_AS(r.append(it), Error);
  it.index = 2;
  r.append(it);
  CHECK(r.total_usage().total() == 190);
  CHECK(parse_stop_reason(to_string(StopReason::teacher_failure)) == StopReason::teacher_failure);
}

TEST_CASE("errors carry their kind in the message") {
  const Error e(ErrorKind::corpus_missing, "x");
  CHECK(e.kind() == ErrorKind::corpus_missing);
  CHECK(std::string(e.what()).find("corpus") != std::string::npos);
}

}
