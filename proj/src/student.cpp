#include "distillery/student.hpp"

#include <json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <numbers>
#include <sstream>
#include <unordered_map>

namespace distillery::student {

static_assert(std::endian::native == std::endian::little, "model files assume little-endian");

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;
constexpr std::string_view kMagic = "distillery-student v1\n";
constexpr double kAdapterInitStd = 0.02;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Byte offsets of code-point starts; continuation bytes never start one.
std::vector<std::size_t> code_point_starts(std::string_view s) {
  std::vector<std::size_t> starts;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if ((static_cast<unsigned char>(s[i]) & 0xC0) != 0x80) starts.push_back(i);
  }
  starts.push_back(s.size());
  return starts;
}

std::vector<double> gaussian_block(std::uint64_t seed, std::size_t n, double stddev) {
  Rng rng(seed);
  std::vector<double> out(n);
  for (auto& v : out) v = stddev * rng.gaussian();
  return out;
}

}  // namespace

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = kFnvOffset ^ seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  return splitmix64(seed ^ fnv1a64(stream));
}

double Rng::gaussian() {
  if (spare_) {
    const double v = *spare_;
    spare_.reset();
    return v;
  }
  const double u1 = 1.0 - uniform();  // (0, 1]
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  return r * std::cos(theta);
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error(ErrorKind::precondition, "Rng::below(0)");
  const std::uint64_t threshold = (0 - n) % n;
  for (;;) {
    const std::uint64_t x = engine_();
    if (x >= threshold) return x % n;
  }
}

// ---------------------------------------------------------------------------

FeatureVector featurize(std::string_view text, std::size_t dimension, std::uint64_t hash_seed) {
  if (dimension == 0 || (dimension & (dimension - 1)) != 0) {
    throw Error(ErrorKind::precondition, "feature dimension must be a power of two");
  }
  const std::string norm = normalize_text(text);
  const auto starts = code_point_starts(norm);
  const std::size_t chars = starts.size() - 1;
  const std::uint64_t mask = dimension - 1;

  std::map<std::uint32_t, double> counts;
  for (std::size_t n = 2; n <= 4; ++n) {
    for (std::size_t i = 0; i + n <= chars; ++i) {
      const auto gram = std::string_view(norm).substr(starts[i], starts[i + n] - starts[i]);
      counts[static_cast<std::uint32_t>(fnv1a64(gram, hash_seed) & mask)] += 1.0;
    }
  }

  FeatureVector fv;
  double sq = 0.0;
  for (const auto& [k, c] : counts) sq += c * c;
  const double norm2 = std::sqrt(sq);
  fv.indices.reserve(counts.size());
  fv.values.reserve(counts.size());
  for (const auto& [k, c] : counts) {
    fv.indices.push_back(k);
    fv.values.push_back(c / norm2);
  }
  return fv;
}

// ---------------------------------------------------------------------------

void StudentConfig::validate() const {
  if (feature_dim == 0 || (feature_dim & (feature_dim - 1)) != 0) {
    throw Error(ErrorKind::precondition, "feature_dim must be a power of two");
  }
  if (feature_dim > (std::size_t{1} << 32)) {
    throw Error(ErrorKind::precondition, "feature_dim exceeds 2^32");
  }
  if (hidden == 0) throw Error(ErrorKind::precondition, "hidden width must be positive");
  if (rank == 0 || rank > std::min(feature_dim, hidden)) {
    throw Error(ErrorKind::precondition, "LoRA rank must be in [1, min(feature_dim, hidden)]");
  }
  if (!(alpha > 0.0)) throw Error(ErrorKind::precondition, "LoRA alpha must be positive");
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorKind::precondition, "threshold must be in (0, 1)");
  }
}

BaseNetwork::BaseNetwork(std::uint64_t seed, std::size_t feature_dim, std::size_t hidden)
    : seed_(seed),
      feature_dim_(feature_dim),
      hidden_(hidden),
      w0_(gaussian_block(derive_seed(seed, "base-w0"), feature_dim * hidden, 1.0)),
      b0_(hidden, 0.0),
      w1_(hidden, 0.0) {}

std::shared_ptr<const BaseNetwork> BaseNetwork::get(std::uint64_t seed, std::size_t feature_dim,
                                                    std::size_t hidden) {
  static std::mutex mu;
  static std::map<std::tuple<std::uint64_t, std::size_t, std::size_t>,
                  std::weak_ptr<const BaseNetwork>>
      cache;
  std::lock_guard lock(mu);
  auto& slot = cache[{seed, feature_dim, hidden}];
  if (auto live = slot.lock()) return live;
  auto fresh = std::make_shared<const BaseNetwork>(seed, feature_dim, hidden);
  slot = fresh;
  return fresh;
}

const std::string& BaseNetwork::digest() const {
  std::call_once(digest_once_, [this] {
    std::string bytes;
    auto put = [&bytes](const std::vector<double>& v) {
      bytes.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
    };
    put(w0_);
    put(b0_);
    put(w1_);
    bytes.append(reinterpret_cast<const char*>(&b1_), sizeof b1_);
    digest_ = sha256_hex(bytes);
  });
  return digest_;
}

// ---------------------------------------------------------------------------

Label decide(double p, double threshold) { return p >= threshold ? Label::spam : Label::ham; }

double sigmoid(double z) {
  const double p = z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
  return std::clamp(p, std::numeric_limits<double>::min(), std::nextafter(1.0, 0.0));
}

StudentModel::StudentModel(StudentConfig config) : config_(config) {
  config_.validate();
  base_ = BaseNetwork::get(config_.seed, config_.feature_dim, config_.hidden);
  adapters_ = initial_adapters(config_);
}

Adapters StudentModel::initial_adapters(const StudentConfig& c) {
  Adapters a;
  a.a0t = gaussian_block(derive_seed(c.seed, "lora-a0"), c.feature_dim * c.rank, kAdapterInitStd);
  a.b0.assign(c.hidden * c.rank, 0.0);
  a.a1 = gaussian_block(derive_seed(c.seed, "lora-a1"), c.output_rank() * c.hidden,
                        kAdapterInitStd);
  a.b1.assign(c.output_rank(), 0.0);
  return a;
}

FeatureVector StudentModel::features(std::string_view text) const {
  return featurize(text, config_.feature_dim, config_.hash_seed);
}

void StudentModel::check_indices(const FeatureVector& x) const {
  if (x.indices.size() != x.values.size()) {
    throw Error(ErrorKind::dimension_mismatch, "feature index/value length mismatch");
  }
  for (auto j : x.indices) {
    if (j >= config_.feature_dim) {
      throw Error(ErrorKind::dimension_mismatch,
                  "feature index " + std::to_string(j) + " >= dimension " +
                      std::to_string(config_.feature_dim));
    }
  }
}

void StudentModel::forward(const FeatureVector& x, Activations& act) const {
  check_indices(x);
  const std::size_t H = config_.hidden, r = config_.rank, ro = config_.output_rank();
  const double s = config_.scaling();
  const auto& A = adapters_;

  act.ax.assign(r, 0.0);
  std::vector<double> u(base_->b0());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const std::size_t j = x.indices[k];
    const double v = x.values[k];
    const double* w = base_->w0_row(j);
    for (std::size_t i = 0; i < H; ++i) u[i] += v * w[i];
    const double* a = A.a0t.data() + j * r;
    for (std::size_t q = 0; q < r; ++q) act.ax[q] += v * a[q];
  }
  act.h.resize(H);
  for (std::size_t i = 0; i < H; ++i) {
    double d = 0.0;
    const double* b = A.b0.data() + i * r;
    for (std::size_t q = 0; q < r; ++q) d += b[q] * act.ax[q];
    act.h[i] = std::tanh(u[i] + s * d);
  }

  double z = base_->b1();
  const auto& w1 = base_->w1();
  for (std::size_t i = 0; i < H; ++i) z += w1[i] * act.h[i];
  act.a1h.assign(ro, 0.0);
  for (std::size_t q = 0; q < ro; ++q) {
    for (std::size_t i = 0; i < H; ++i) act.a1h[q] += A.a1[q * H + i] * act.h[i];
  }
  double d = 0.0;
  for (std::size_t q = 0; q < ro; ++q) d += A.b1[q] * act.a1h[q];
  act.z = z + s * d;
  act.p = sigmoid(act.z);
}

double StudentModel::probability(const FeatureVector& x) const {
  Activations act;
  forward(x, act);
  return act.p;
}

double StudentModel::base_probability(const FeatureVector& x) const {
  check_indices(x);
  const std::size_t H = config_.hidden;
  std::vector<double> u(base_->b0());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double* w = base_->w0_row(x.indices[k]);
    for (std::size_t i = 0; i < H; ++i) u[i] += x.values[k] * w[i];
  }
  double z = base_->b1();
  for (std::size_t i = 0; i < H; ++i) z += base_->w1()[i] * std::tanh(u[i]);
  return sigmoid(z);
}

Prediction StudentModel::predict(std::string_view text) const {
  const double p = probability(text);
  return {decide(p, config_.threshold), p};
}

// ---------------------------------------------------------------------------
// Persistence

namespace {

void put_doubles(std::string& out, const std::vector<double>& v) {
  out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
}

template <class T>
void put_pod(std::string& out, T value) {
  out.append(reinterpret_cast<const char*>(&value), sizeof value);
}

[[noreturn]] void load_fail(const std::filesystem::path& file, const std::string& why) {
  throw Error(ErrorKind::model_load_failure, file.string() + ": " + why);
}

}  // namespace

void StudentModel::save(const std::filesystem::path& file) const {
  const auto init = initial_adapters(config_);
  const std::size_t r = config_.rank;
  std::vector<std::uint32_t> rows;
  for (std::size_t j = 0; j < config_.feature_dim; ++j) {
    if (std::memcmp(adapters_.a0t.data() + j * r, init.a0t.data() + j * r, r * sizeof(double))) {
      rows.push_back(static_cast<std::uint32_t>(j));
    }
  }

  nlohmann::ordered_json header;
  header["seed"] = config_.seed;
  header["feature_dim"] = config_.feature_dim;
  header["hidden"] = config_.hidden;
  header["rank"] = config_.rank;
  header["alpha"] = config_.alpha;
  header["threshold"] = config_.threshold;
  header["hash_seed"] = config_.hash_seed;
  header["base_digest"] = base_->digest();
  header["a0_rows"] = rows.size();

  std::string out(kMagic);
  out += header.dump();
  out += '\n';
  put_doubles(out, adapters_.b0);
  put_doubles(out, adapters_.a1);
  put_doubles(out, adapters_.b1);
  for (auto j : rows) {
    put_pod(out, j);
    out.append(reinterpret_cast<const char*>(adapters_.a0t.data() + std::size_t{j} * r),
               r * sizeof(double));
  }
  put_pod(out, fnv1a64(out));

  const auto tmp = file.string() + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error(ErrorKind::io, "cannot write " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error(ErrorKind::io, "write failed for " + tmp);
  }
  std::filesystem::rename(tmp, file);
}

StudentModel StudentModel::load(const std::filesystem::path& file) {
  std::ifstream f(file, std::ios::binary);
  if (!f) load_fail(file, "cannot open");
  std::stringstream ss;
  ss << f.rdbuf();
  const std::string data = ss.str();

  if (data.size() < kMagic.size() + sizeof(std::uint64_t) || data.compare(0, kMagic.size(), kMagic)) {
    load_fail(file, "not a student model file");
  }
  const std::size_t body = data.size() - sizeof(std::uint64_t);
  std::uint64_t stored = 0;
  std::memcpy(&stored, data.data() + body, sizeof stored);
  if (stored != fnv1a64(std::string_view(data).substr(0, body))) load_fail(file, "checksum mismatch");

  const auto nl = data.find('\n', kMagic.size());
  if (nl == std::string::npos || nl >= body) load_fail(file, "missing header");
  StudentConfig cfg;
  std::string base_digest;
  std::size_t rows = 0;
  try {
    const auto h = nlohmann::json::parse(data.substr(kMagic.size(), nl - kMagic.size()));
    cfg.seed = h.at("seed").get<std::uint64_t>();
    cfg.feature_dim = h.at("feature_dim").get<std::size_t>();
    cfg.hidden = h.at("hidden").get<std::size_t>();
    cfg.rank = h.at("rank").get<std::size_t>();
    cfg.alpha = h.at("alpha").get<double>();
    cfg.threshold = h.at("threshold").get<double>();
    cfg.hash_seed = h.at("hash_seed").get<std::uint64_t>();
    base_digest = h.at("base_digest").get<std::string>();
    rows = h.at("a0_rows").get<std::size_t>();
    cfg.validate();
  } catch (const nlohmann::json::exception& e) {
    load_fail(file, std::string("bad header: ") + e.what());
  } catch (const Error& e) {
    load_fail(file, std::string("bad header: ") + e.what());
  }

  StudentModel m(cfg);
  if (m.base().digest() != base_digest) load_fail(file, "base weights digest mismatch");

  const std::size_t r = cfg.rank;
  std::size_t pos = nl + 1;
  auto take = [&](void* dst, std::size_t n) {
    if (pos + n > body) load_fail(file, "truncated payload");
    std::memcpy(dst, data.data() + pos, n);
    pos += n;
  };
  auto& A = m.adapters();
  take(A.b0.data(), A.b0.size() * sizeof(double));
  take(A.a1.data(), A.a1.size() * sizeof(double));
  take(A.b1.data(), A.b1.size() * sizeof(double));
  for (std::size_t k = 0; k < rows; ++k) {
    std::uint32_t j = 0;
    take(&j, sizeof j);
    if (j >= cfg.feature_dim) load_fail(file, "adapter row out of range");
    take(A.a0t.data() + std::size_t{j} * r, r * sizeof(double));
  }
  if (pos != body) load_fail(file, "trailing bytes");
  return m;
}

}  // namespace distillery::student
