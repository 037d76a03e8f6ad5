#include "distillery/train.hpp"

#include <json.hpp>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "distillery/datagen.hpp"

namespace distillery::train {

using student::Activations;
using student::FeatureVector;
using student::StudentModel;

void TrainHyper::validate() const {
  if (!(learning_rate > 0.0)) throw Error(ErrorKind::precondition, "learning rate must be positive");
  if (batch_size == 0) throw Error(ErrorKind::precondition, "batch size must be positive");
  if (rank == 0) throw Error(ErrorKind::precondition, "LoRA rank must be positive");
  if (!(alpha > 0.0)) throw Error(ErrorKind::precondition, "LoRA alpha must be positive");
  if (!(beta >= 0.0)) throw Error(ErrorKind::precondition, "DPO beta must be non-negative");
}

namespace {

double clamp_p(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }
bool clamped(double p) { return p <= kProbClamp || p >= 1.0 - kProbClamp; }

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

void zero_gradient(const StudentModel& m, Gradient& g) {
  const auto& a = m.adapters();
  g.b0.assign(a.b0.size(), 0.0);
  g.a1.assign(a.a1.size(), 0.0);
  g.b1.assign(a.b1.size(), 0.0);
  g.a0t.clear();
}

// Accumulates dL/d(adapters) given dL/dz for one example.
void backprop(const StudentModel& m, const FeatureVector& x, const Activations& act, double dz,
              Gradient& g) {
  if (dz == 0.0) return;
  const auto& cfg = m.config();
  const auto& A = m.adapters();
  const std::size_t H = cfg.hidden, r = cfg.rank, ro = cfg.output_rank();
  const double s = cfg.scaling();
  const auto& w1 = m.base().w1();

  std::vector<double> du(H);
  for (std::size_t i = 0; i < H; ++i) {
    double dh = w1[i];
    for (std::size_t q = 0; q < ro; ++q) dh += s * A.b1[q] * A.a1[q * H + i];
    du[i] = dz * dh * (1.0 - act.h[i] * act.h[i]);
  }
  for (std::size_t q = 0; q < ro; ++q) {
    g.b1[q] += dz * s * act.a1h[q];
    for (std::size_t i = 0; i < H; ++i) g.a1[q * H + i] += dz * s * A.b1[q] * act.h[i];
  }
  std::vector<double> dax(r, 0.0);
  for (std::size_t i = 0; i < H; ++i) {
    const double* b = A.b0.data() + i * r;
    double* gb = g.b0.data() + i * r;
    for (std::size_t q = 0; q < r; ++q) {
      gb[q] += s * du[i] * act.ax[q];
      dax[q] += s * b[q] * du[i];
    }
  }
  for (std::size_t k = 0; k < x.size(); ++k) {
    auto& row = g.a0t[x.indices[k]];
    if (row.empty()) row.assign(r, 0.0);
    for (std::size_t q = 0; q < r; ++q) row[q] += x.values[k] * dax[q];
  }
}

}  // namespace

double bce_loss(std::span<const double> probabilities, std::span<const Label> labels) {
  if (probabilities.empty()) throw Error(ErrorKind::empty_batch, "bce_loss on an empty batch");
  if (probabilities.size() != labels.size()) {
    throw Error(ErrorKind::precondition, "probabilities and labels differ in length");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < probabilities.size(); ++i) {
    const double p = clamp_p(probabilities[i]);
    sum -= labels[i] == Label::spam ? std::log(p) : std::log(1.0 - p);
  }
  return sum / static_cast<double>(probabilities.size());
}

double bce_loss(const StudentModel& model, std::span<const LabeledExample> batch) {
  if (batch.empty()) throw Error(ErrorKind::empty_batch, "bce_loss on an empty batch");
  std::vector<double> p;
  std::vector<Label> y;
  for (const auto& e : batch) {
    p.push_back(model.probability(std::string_view(e.text())));
    y.push_back(e.label());
  }
  return bce_loss(p, y);
}

double bce_loss_and_gradient(const StudentModel& model, std::span<const FeatureVector> xs,
                             std::span<const Label> labels, Gradient* grad) {
  if (xs.empty()) throw Error(ErrorKind::empty_batch, "empty batch");
  const double n = static_cast<double>(xs.size());
  if (grad) zero_gradient(model, *grad);
  Activations act;
  double sum = 0.0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    model.forward(xs[k], act);
    const double y = labels[k] == Label::spam ? 1.0 : 0.0;
    const double pc = clamp_p(act.p);
    sum -= y * std::log(pc) + (1.0 - y) * std::log(1.0 - pc);
    if (grad && !clamped(act.p)) backprop(model, xs[k], act, (act.p - y) / n, *grad);
  }
  return sum / n;
}

double dpo_loss(double policy_p_spam, double reference_p_spam, Label chosen, double beta) {
  const double p = clamp_p(policy_p_spam), q = clamp_p(reference_p_spam);
  const double lp_spam = std::log(p) - std::log(q);
  const double lp_ham = std::log(1.0 - p) - std::log(1.0 - q);
  const double margin = beta * (chosen == Label::spam ? lp_spam - lp_ham : lp_ham - lp_spam);
  return softplus(-margin);
}

double dpo_loss(const StudentModel& policy, const StudentModel& reference,
                const PreferencePair& pair, double beta) {
  pair.validate();
  if (pair.chosen_label() == pair.rejected_label()) {
    throw Error(ErrorKind::unparseable_response, "chosen and rejected map to the same label");
  }
  return dpo_loss(policy.probability(std::string_view(pair.prompt)),
                  reference.probability(std::string_view(pair.prompt)), pair.chosen_label(), beta);
}

double dpo_loss_and_gradient(const StudentModel& policy, std::span<const DpoItem> items,
                             double beta, Gradient* grad) {
  if (items.empty()) throw Error(ErrorKind::empty_batch, "empty preference batch");
  const double n = static_cast<double>(items.size());
  if (grad) zero_gradient(policy, *grad);
  Activations act;
  double sum = 0.0;
  for (const auto& it : items) {
    policy.forward(it.x, act);
    const double l = dpo_loss(act.p, it.reference_p, it.chosen, beta);
    sum += l;
    if (grad && !clamped(act.p)) {
      const double sign = it.chosen == Label::spam ? 1.0 : -1.0;
      // dL/dm = -sigmoid(-m) = -(1 - exp(-L)); dm/dz = beta * sign
      const double dl_dm = -(1.0 - std::exp(-l));
      backprop(policy, it.x, act, dl_dm * beta * sign / n, *grad);
    }
  }
  return sum / n;
}

void apply_gradient(StudentModel& model, const Gradient& g, double lr) {
  auto& A = model.adapters();
  const std::size_t r = model.config().rank;
  for (std::size_t i = 0; i < A.b0.size(); ++i) A.b0[i] -= lr * g.b0[i];
  for (std::size_t i = 0; i < A.a1.size(); ++i) A.a1[i] -= lr * g.a1[i];
  for (std::size_t i = 0; i < A.b1.size(); ++i) A.b1[i] -= lr * g.b1[i];
  for (const auto& [j, row] : g.a0t) {
    double* a = A.a0t.data() + std::size_t{j} * r;
    for (std::size_t q = 0; q < r; ++q) a[q] -= lr * row[q];
  }
}

// ---------------------------------------------------------------------------

student::StudentConfig student_config(student::StudentConfig base, const TrainHyper& hyper) {
  base.rank = hyper.rank;
  base.alpha = hyper.alpha;
  return base;
}

namespace {

// Shared mini-batch loop: `step(indices)` returns the batch loss after
// computing its gradient; the caller's lambda applies it.
template <class Step>
std::vector<double> run_epochs(std::size_t n, const TrainHyper& hyper, Step&& step) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  student::Rng rng(student::derive_seed(hyper.seed, "shuffle"));
  std::vector<double> losses;
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    double total = 0.0;
    for (std::size_t b = 0; b < n; b += hyper.batch_size) {
      const std::size_t e = std::min(n, b + hyper.batch_size);
      const double loss = step(std::span<const std::size_t>(order.data() + b, e - b));
      if (!std::isfinite(loss)) {
        throw Error(ErrorKind::non_finite_loss, "epoch " + std::to_string(epoch + 1) +
                                                    ", batch starting at position " +
                                                    std::to_string(b) + ": loss " +
                                                    std::to_string(loss));
      }
      total += loss * static_cast<double>(e - b);
    }
    losses.push_back(total / static_cast<double>(n));
    spdlog::debug("epoch {}: mean loss {:.6f}", epoch + 1, losses.back());
  }
  return losses;
}

}  // namespace

TrainResult train_bce(const Dataset& dataset, const TrainHyper& hyper,
                      const student::StudentConfig& config, const student::Adapters* initial) {
  hyper.validate();
  if (dataset.split() != SplitTag::train) {
    throw Error(ErrorKind::precondition,
                "refusing to train on a " + std::string(to_string(dataset.split())) + " split");
  }
  if (dataset.count(Label::spam) == 0 || dataset.count(Label::ham) == 0) {
    throw Error(ErrorKind::single_class_dataset,
                "training data needs both classes (spam " +
                    std::to_string(dataset.count(Label::spam)) + ", ham " +
                    std::to_string(dataset.count(Label::ham)) + ")");
  }
  TrainResult out{StudentModel(student_config(config, hyper)), {}};
  if (initial) {
    const auto& cur = out.model.adapters();
    if (initial->a0t.size() != cur.a0t.size() || initial->b0.size() != cur.b0.size() ||
        initial->a1.size() != cur.a1.size() || initial->b1.size() != cur.b1.size()) {
      throw Error(ErrorKind::dimension_mismatch, "initial adapters do not fit the configuration");
    }
    out.model.adapters() = *initial;
  }
  std::vector<FeatureVector> xs;
  std::vector<Label> ys;
  xs.reserve(dataset.size());
  for (const auto& e : dataset.examples()) {
    xs.push_back(out.model.features(e.text()));
    ys.push_back(e.label());
  }

  Gradient g;
  std::vector<FeatureVector> bx;
  std::vector<Label> by;
  out.epoch_losses = run_epochs(xs.size(), hyper, [&](std::span<const std::size_t> idx) {
    bx.clear();
    by.clear();
    for (auto i : idx) {
      bx.push_back(xs[i]);
      by.push_back(ys[i]);
    }
    const double loss = bce_loss_and_gradient(out.model, bx, by, &g);
    apply_gradient(out.model, g, hyper.learning_rate);
    return loss;
  });
  return out;
}

TrainResult train_dpo(const std::vector<PreferencePair>& pairs, const TrainHyper& hyper,
                      const student::StudentConfig& config) {
  hyper.validate();
  if (pairs.empty()) throw Error(ErrorKind::precondition, "no preference pairs");
  TrainResult out{StudentModel(student_config(config, hyper)), {}};
  const StudentModel& reference = out.model;  // untrained at this point

  std::vector<DpoItem> items;
  items.reserve(pairs.size());
  for (const auto& pair : pairs) {
    pair.validate();
    if (pair.chosen_label() == pair.rejected_label()) {
      throw Error(ErrorKind::unparseable_response, "chosen and rejected map to the same label");
    }
    auto x = reference.features(pair.prompt);
    const double ref_p = reference.probability(x);
    items.push_back({std::move(x), pair.chosen_label(), ref_p});
  }

  Gradient g;
  std::vector<DpoItem> batch;
  out.epoch_losses = run_epochs(items.size(), hyper, [&](std::span<const std::size_t> idx) {
    batch.clear();
    for (auto i : idx) batch.push_back(items[i]);
    const double loss = dpo_loss_and_gradient(out.model, batch, hyper.beta, &g);
    apply_gradient(out.model, g, hyper.learning_rate);
    return loss;
  });
  return out;
}

// ---------------------------------------------------------------------------
// Preference data

teacher::Conversation build_preference_prompt(std::size_t count, const std::string& system_prompt) {
  std::ostringstream u;
  u << "Build a preference dataset for training an SMS spam classifier. Generate exactly " << count
    << " SMS messages, balanced 50/50 between spam and ham.\n"
    << "Spam categories to cover, roughly evenly: ";
  const auto& cats = datagen::default_spam_categories();
  for (std::size_t i = 0; i < cats.size(); ++i) u << (i ? ", " : "") << cats[i];
  u << ".\nHam categories to cover: ";
  const auto& ham = datagen::default_ham_categories();
  for (std::size_t i = 0; i < ham.size(); ++i) u << (i ? ", " : "") << ham[i];
  u << ".\nFor every message give the preferred classification output and a rejected one.\n"
    << "Output format, one record per line and nothing else:\n"
    << "TEXT<TAB>CHOSEN<TAB>REJECTED\n"
    << "where TEXT is the SMS on a single line, CHOSEN is the correct label (\"spam\" or \"ham\") "
       "and REJECTED is the incorrect one. No numbering, headings or commentary.";
  return {teacher::ChatMessage::system(system_prompt), teacher::ChatMessage::user(u.str())};
}

std::vector<PreferencePair> parse_preferences(std::string_view reply,
                                              std::vector<std::string>* rejected) {
  std::vector<PreferencePair> out;
  std::istringstream in{std::string(reply)};
  std::string line;
  std::size_t n = 0;
  auto reject = [&](const std::string& why) {
    if (rejected) rejected->push_back("line " + std::to_string(n) + ": " + why);
  };
  while (std::getline(in, line)) {
    ++n;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto t2 = line.rfind('\t');
    const auto t1 = t2 == std::string::npos || t2 == 0 ? std::string::npos : line.rfind('\t', t2 - 1);
    if (t1 == std::string::npos) {
      reject("expected three tab-separated fields");
      continue;
    }
    PreferencePair p{std::string(trim(std::string_view(line).substr(0, t1))),
                     std::string(trim(std::string_view(line).substr(t1 + 1, t2 - t1 - 1))),
                     std::string(trim(std::string_view(line).substr(t2 + 1)))};
    if (p.prompt.empty() || !is_valid_utf8(p.prompt)) {
      reject("empty or invalid message text");
      continue;
    }
    try {
      p.validate();
    } catch (const Error& e) {
      reject(e.what());
      continue;
    }
    if (p.chosen_label() == p.rejected_label()) {
      reject("chosen and rejected map to the same label");
      continue;
    }
    if (utf8_length(p.prompt) > kMaxMessageChars) {
      p.prompt = std::string(utf8_prefix(p.prompt, kMaxMessageChars));
    }
    out.push_back(std::move(p));
  }
  return out;
}

namespace {

// Dedup on the normalized prompt, trim the majority chosen-label class with the
// same slack rule as generated datasets, then cap at n keeping balance.
std::vector<PreferencePair> balance_pairs(const std::vector<PreferencePair>& pool, std::size_t n) {
  std::unordered_set<std::string> seen;
  std::vector<std::size_t> spam, ham;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (!seen.insert(normalize_text(pool[i].prompt)).second) continue;
    (pool[i].chosen_label() == Label::spam ? spam : ham).push_back(i);
  }
  auto& major = spam.size() >= ham.size() ? spam : ham;
  const std::size_t m = std::min(spam.size(), ham.size());
  major.resize(std::min(major.size(), m + (2 * m * 5 + 99) / 100));
  while (spam.size() + ham.size() > n) {
    (spam.size() > ham.size() ? spam : ham).pop_back();
  }
  std::vector<std::size_t> keep(spam);
  keep.insert(keep.end(), ham.begin(), ham.end());
  std::sort(keep.begin(), keep.end());
  std::vector<PreferencePair> out;
  for (auto i : keep) out.push_back(pool[i]);
  return out;
}

}  // namespace

PreferenceBuildResult build_preference_dataset(teacher::Teacher& teacher, std::size_t n,
                                               const PreferenceBuildOptions& opt) {
  if (n < 2) throw Error(ErrorKind::precondition, "preference dataset needs n >= 2");
  if (opt.chunk_size == 0) throw Error(ErrorKind::precondition, "chunk size must be positive");
  PreferenceBuildResult res;
  std::vector<PreferencePair> pool;

  auto request = [&](std::size_t count) {
    auto conv = build_preference_prompt(count, opt.system_prompt);
    datagen::check_outgoing(conv, opt.guard);
    std::vector<std::string> bad;
    ++res.requests;
    auto reply = teacher.send_chat(conv, opt.params);
    auto pairs = parse_preferences(reply.content, &bad);
    if (pairs.empty()) {
      spdlog::warn("unparseable preference reply ({} bad lines); asking for a repair", bad.size());
      conv.push_back(teacher::ChatMessage::assistant(reply.content));
      conv.push_back(teacher::ChatMessage::user(datagen::repair_message("TEXT<TAB>CHOSEN<TAB>REJECTED")));
      bad.clear();
      ++res.requests;
      reply = teacher.send_chat(conv, opt.params);
      pairs = parse_preferences(reply.content, &bad);
      if (pairs.empty()) {
        throw Error(ErrorKind::parse_failure,
                    "preference reply unusable after repair (" + std::to_string(bad.size()) +
                        " bad lines)");
      }
    }
    res.rejected_lines += bad.size();
    pool.insert(pool.end(), pairs.begin(), pairs.end());
  };

  for (std::size_t asked = 0; asked < n; asked += opt.chunk_size) {
    request(std::min(opt.chunk_size, n - asked));
  }
  res.pairs = balance_pairs(pool, n);
  for (int t = 0; t < opt.max_topups && res.pairs.size() * 10 < n * 9; ++t) {
    request(std::min(opt.chunk_size, n - res.pairs.size()));
    res.pairs = balance_pairs(pool, n);
  }
  return res;
}

void write_preferences(const std::filesystem::path& path, const std::vector<PreferencePair>& pairs) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::io, "cannot write " + path.string());
  for (const auto& p : pairs) {
    nlohmann::ordered_json j;
    j["prompt"] = p.prompt;
    j["chosen"] = p.chosen;
    j["rejected"] = p.rejected;
    out << j.dump() << '\n';
  }
}

std::vector<PreferencePair> read_preferences(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot read " + path.string());
  std::vector<PreferencePair> out;
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("prompt").get<std::string>(), j.at("chosen").get<std::string>(),
                     j.at("rejected").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::io, path.string() + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Builtin trainer

std::vector<student::Prediction> StudentClassifier::predict_batch(
    std::span<const std::string> texts) const {
  std::vector<student::Prediction> out;
  out.reserve(texts.size());
  for (const auto& t : texts) out.push_back(model_.predict(t));
  return out;
}

std::unique_ptr<Classifier> BuiltinTrainer::untrained(const TrainHyper& hyper) {
  return std::make_unique<StudentClassifier>(StudentModel(student_config(config_, hyper)));
}

std::unique_ptr<Classifier> BuiltinTrainer::train(const Dataset& dataset, const TrainHyper& hyper,
                                                  const std::filesystem::path& model_dir) {
  auto result = train_bce(dataset, hyper, config_);
  last_losses_ = result.epoch_losses;
  std::filesystem::create_directories(model_dir);
  result.model.save(model_dir / kStudentFile);
  return std::make_unique<StudentClassifier>(std::move(result.model));
}

std::unique_ptr<Classifier> BuiltinTrainer::train_preferences(const std::vector<PreferencePair>& pairs,
                                                              const TrainHyper& hyper,
                                                              const std::filesystem::path& model_dir) {
  auto result = train_dpo(pairs, hyper, config_);
  last_losses_ = result.epoch_losses;
  std::filesystem::create_directories(model_dir);
  result.model.save(model_dir / kStudentFile);
  return std::make_unique<StudentClassifier>(std::move(result.model));
}

std::unique_ptr<Classifier> Trainer::train_continue(const Dataset&, const TrainHyper&,
                                                    const std::filesystem::path&,
                                                    const std::filesystem::path&) {
  throw Error(ErrorKind::precondition, name() + " trainer cannot continue from previous adapters");
}

std::unique_ptr<Classifier> BuiltinTrainer::train_continue(const Dataset& dataset,
                                                           const TrainHyper& hyper,
                                                           const std::filesystem::path& previous_dir,
                                                           const std::filesystem::path& model_dir) {
  const auto previous = StudentModel::load(previous_dir / kStudentFile);
  if (previous.config() != student_config(config_, hyper)) {
    throw Error(ErrorKind::precondition, "previous model was trained with a different configuration");
  }
  auto result = train_bce(dataset, hyper, config_, &previous.adapters());
  last_losses_ = result.epoch_losses;
  std::filesystem::create_directories(model_dir);
  result.model.save(model_dir / kStudentFile);
  return std::make_unique<StudentClassifier>(std::move(result.model));
}

std::unique_ptr<Classifier> BuiltinTrainer::load(const std::filesystem::path& model_dir) {
  const auto file = std::filesystem::is_directory(model_dir) ? model_dir / kStudentFile : model_dir;
  return std::make_unique<StudentClassifier>(StudentModel::load(file));
}

}  // namespace distillery::train
