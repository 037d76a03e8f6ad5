#pragma once

// Independent reference computations shared by unit and acceptance tests.
// Everything here uses exact integer arithmetic and none of the library's
// metric code.

#include <cstdint>
#include <vector>

namespace testing::oracle {

struct Quad {
  std::uint64_t tp, fp, fn, tn;
  bool operator==(const Quad&) const = default;
};

// num/den as a percentage in hundredths, rounded half up (all inputs are
// non-negative, so half-up equals half-away-from-zero). Zero denominator -> 0.
inline std::int64_t centi_percent(std::uint64_t num, std::uint64_t den) {
  if (den == 0) return 0;
  return static_cast<std::int64_t>((num * 20000 + den) / (2 * den));
}

struct Row {
  std::int64_t acc, prec, rec, f1;  // hundredths of a percent
  bool operator==(const Row&) const = default;
};

// Spam-positive binary metrics.
inline Row binary_row(const Quad& q) {
  return {centi_percent(q.tp + q.tn, q.tp + q.fp + q.fn + q.tn), centi_percent(q.tp, q.tp + q.fp),
          centi_percent(q.tp, q.tp + q.fn), centi_percent(2 * q.tp, 2 * q.tp + q.fp + q.fn)};
}

// Every (TP, FP) on a balanced per_class/per_class set whose binary row
// matches `target` exactly.
inline std::vector<Quad> brute_force(const Row& target, std::uint64_t per_class = 747) {
  std::vector<Quad> out;
  for (std::uint64_t tp = 0; tp <= per_class; ++tp) {
    for (std::uint64_t fp = 0; fp <= per_class; ++fp) {
      const Quad q{tp, fp, per_class - tp, per_class - fp};
      if (binary_row(q) == target) out.push_back(q);
    }
  }
  return out;
}

}  // namespace testing::oracle
