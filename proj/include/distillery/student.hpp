#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "distillery/core.hpp"

namespace distillery::student {

inline constexpr std::size_t kDefaultFeatureDim = std::size_t{1} << 18;
inline constexpr std::size_t kDefaultHidden = 64;

// ---------------------------------------------------------------------------
// Hashing and randomness. Everything here is specified bit-for-bit so feature
// vectors and initial weights agree across platforms.

/// FNV-1a 64-bit with the seed XORed into the offset basis.
std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed = 0);

/// Independent stream seed: splitmix64(seed ^ fnv1a64(stream)).
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);

/// mt19937_64 with our own conversions (the standard distributions are
/// implementation-defined).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }
  /// 53-bit uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  /// Box-Muller, caching the second variate.
  double gaussian();
  /// Uniform integer in [0, n) by rejection.
  std::uint64_t below(std::uint64_t n);

  template <class T>
  void shuffle(std::vector<T>& items) {  // Fisher-Yates, back to front
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[below(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  std::optional<double> spare_;
};

// ---------------------------------------------------------------------------
// Features

/// Sparse, indices strictly increasing.
struct FeatureVector {
  std::vector<std::uint32_t> indices;
  std::vector<double> values;

  std::size_t size() const { return indices.size(); }
  bool empty() const { return indices.empty(); }
  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

/// Character 2-, 3- and 4-grams (code points) of normalize_text(text), hashed
/// with fnv1a64(utf8 bytes, hash_seed) & (dimension - 1), counted, L2-normalized.
/// `dimension` must be a power of two.
FeatureVector featurize(std::string_view text, std::size_t dimension = kDefaultFeatureDim,
                        std::uint64_t hash_seed = 0);

// ---------------------------------------------------------------------------
// Model

struct StudentConfig {
  std::uint64_t seed = 42;  // base weights and adapter initialisation
  std::size_t feature_dim = kDefaultFeatureDim;
  std::size_t hidden = kDefaultHidden;
  std::size_t rank = 32;
  double alpha = 64.0;
  double threshold = 0.5;
  std::uint64_t hash_seed = 0;

  void validate() const;
  double scaling() const { return alpha / static_cast<double>(rank); }
  /// W1 is hidden x 1, so its adapter rank is clamped to 1.
  std::size_t output_rank() const { return rank < 1 ? rank : 1; }

  friend bool operator==(const StudentConfig&, const StudentConfig&) = default;
};

/// Frozen two-layer network: u = W0^T x + b0, h = tanh(u), z = W1^T h + b1.
/// W0 ~ N(0, 1), everything else zero, so the bare base answers p = 0.5.
class BaseNetwork {
 public:
  /// Shared, immutable instance for (seed, feature_dim, hidden); built once
  /// while any model holds it.
  static std::shared_ptr<const BaseNetwork> get(std::uint64_t seed, std::size_t feature_dim,
                                                std::size_t hidden);

  BaseNetwork(std::uint64_t seed, std::size_t feature_dim, std::size_t hidden);

  std::uint64_t seed() const { return seed_; }
  std::size_t feature_dim() const { return feature_dim_; }
  std::size_t hidden() const { return hidden_; }
  /// Row j of W0 (the weights leaving input feature j); `hidden` values.
  const double* w0_row(std::size_t j) const { return w0_.data() + j * hidden_; }
  const std::vector<double>& w0() const { return w0_; }
  const std::vector<double>& b0() const { return b0_; }
  const std::vector<double>& w1() const { return w1_; }
  double b1() const { return b1_; }

  /// SHA-256 over all parameters, computed on first use.
  const std::string& digest() const;

 private:
  std::uint64_t seed_;
  std::size_t feature_dim_;
  std::size_t hidden_;
  std::vector<double> w0_;
  std::vector<double> b0_;
  std::vector<double> w1_;
  double b1_ = 0.0;
  mutable std::string digest_;
  mutable std::once_flag digest_once_;
};

/// LoRA factors for both layers. A0 is stored transposed (feature_dim x rank)
/// so a sparse input touches contiguous rows.
struct Adapters {
  std::vector<double> a0t;  // feature_dim x rank
  std::vector<double> b0;   // hidden x rank
  std::vector<double> a1;   // out_rank x hidden
  std::vector<double> b1;   // 1 x out_rank

  friend bool operator==(const Adapters&, const Adapters&) = default;
};

/// Intermediate values of one forward pass, reused by the trainers.
struct Activations {
  std::vector<double> ax;   // A0 x        (rank)
  std::vector<double> h;    // tanh(u)     (hidden)
  std::vector<double> a1h;  // A1 h        (out_rank)
  double z = 0.0;
  double p = 0.5;
};

struct Prediction {
  Label label;
  double probability;
};

/// Spam iff p >= threshold; a tie goes to spam.
Label decide(double p, double threshold);

/// Logistic function, clamped strictly inside (0, 1).
double sigmoid(double z);

class StudentModel {
 public:
  explicit StudentModel(StudentConfig config);

  const StudentConfig& config() const { return config_; }
  const BaseNetwork& base() const { return *base_; }
  std::shared_ptr<const BaseNetwork> base_ptr() const { return base_; }

  Adapters& adapters() { return adapters_; }
  const Adapters& adapters() const { return adapters_; }
  /// A ~ N(0, 0.02^2) from the seed, B = 0.
  static Adapters initial_adapters(const StudentConfig& config);
  void reset_adapters() { adapters_ = initial_adapters(config_); }

  FeatureVector features(std::string_view text) const;

  /// Throws Error(dimension_mismatch) on an out-of-range index.
  void forward(const FeatureVector& x, Activations& act) const;
  double probability(const FeatureVector& x) const;
  double probability(std::string_view text) const { return probability(features(text)); }
  /// Frozen-base path only (adapters ignored).
  double base_probability(const FeatureVector& x) const;

  Prediction predict(std::string_view text) const;

  /// Single file: magic line, JSON header, B0/A1/B1 in full, the rows of A0
  /// that differ from their seeded initial values, FNV-1a checksum.
  void save(const std::filesystem::path& file) const;
  /// Throws Error(model_load_failure) on any inconsistency.
  static StudentModel load(const std::filesystem::path& file);

 private:
  void check_indices(const FeatureVector& x) const;

  StudentConfig config_;
  std::shared_ptr<const BaseNetwork> base_;
  Adapters adapters_;
};

}  // namespace distillery::student
