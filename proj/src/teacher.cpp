#include "distillery/teacher.hpp"

#include <json.hpp>

#include <atomic>
#include <charconv>
#include <ctime>
#include <fstream>
#include <sstream>

namespace distillery::teacher {

namespace {

std::atomic<std::size_t> g_instances{0};

constexpr std::string_view kSystemPromptTemplate =
    "Mission Objective: Fine-tune [Student SLM] into a world-class SMS spam detector on this "
    "Mac Mini M4.\n"
    "Constraint: Use the mlx-lm library to leverage the M4's GPU.\n"
    "Iterative Workflow:\n"
    "(1) Baseline Evaluation: Run the base model and calculate Accuracy, Recall, and Precision.\n"
    "(2) Agentic Knowledge Distillation: Using your own knowledge, generate two distinct "
    "datasets: (a) a synthetic training set of 2,000+ examples, and (b) a held-out synthetic "
    "validation set (V) of 500 examples for internal metrics. Both should be balanced 50/50 "
    "Spam/Ham and cover diverse categories: phishing, smishing, fake delivery alerts, crypto "
    "scams, and aggressive marketing.\n"
    "(3) Fine-Tuning: Execute a LoRA fine-tune on the student SLM using the synthetic data.\n"
    "(4) Evaluation & Feedback Loop: Evaluate performance. Analyse aggregate error metrics and "
    "hypothesise which patterns may be causing errors. Generate targeted hard negatives based on "
    "these hypotheses. Repeat if performance hasn't plateaued.\n"
    "(5) Final Output: Provide the final adapter weights and performance report.\n"
    "Resources Available: Full terminal access, Python 3.14, and the MLX library. Begin.";

constexpr std::string_view kStudentPlaceholder = "[Student SLM]";

}  // namespace

std::string_view to_string(Role role) {
  switch (role) {
    case Role::system: return "system";
    case Role::user: return "user";
    case Role::assistant: return "assistant";
  }
  return "unknown";
}

void GenerationParams::validate() const {
  if (!(temperature >= 0.0 && temperature <= 2.0)) {
    throw Error(ErrorKind::precondition, "temperature must be in [0, 2]");
  }
  if (max_completion_tokens <= 0) {
    throw Error(ErrorKind::precondition, "max completion tokens must be positive");
  }
}

std::uint64_t estimate_tokens(std::string_view text) {
  return (utf8_length(text) + 3) / 4;
}

std::string default_system_prompt(std::string_view student_name) {
  std::string prompt(kSystemPromptTemplate);
  const auto pos = prompt.find(kStudentPlaceholder);
  prompt.replace(pos, kStudentPlaceholder.size(), student_name);
  return prompt;
}

std::string utc_now_iso8601() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------

TranscriptLog::TranscriptLog(std::filesystem::path path, Clock clock)
    : path_(std::move(path)), clock_(std::move(clock)) {}

void TranscriptLog::append(std::size_t sequence, std::string_view model,
                           std::span<const ChatMessage> request, const TeacherReply& reply) {
  std::ostringstream rec;
  rec << "=== exchange " << sequence << ' ' << clock_(sequence) << " model=" << model
      << " usage=" << reply.usage.prompt_tokens << '/' << reply.usage.completion_tokens
      << (reply.usage.estimated ? "~" : "") << '\n';
  auto frame = [&rec](std::string_view role, std::string_view content) {
    rec << "--- " << role << ' ' << content.size() << '\n' << content << '\n';
  };
  for (const auto& m : request) frame(to_string(m.role), m.content);
  frame("assistant", reply.content);
  rec << "=== end " << sequence << '\n';

  std::ofstream out(path_, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorKind::io, "cannot open transcript " + path_.string());
  out << rec.str();
  out.flush();
}

std::vector<TranscriptEntry> read_transcript(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::io, "cannot open transcript " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string data = ss.str();

  std::vector<TranscriptEntry> entries;
  std::size_t pos = 0;
  auto read_line = [&](std::string& line) {
    const auto nl = data.find('\n', pos);
    if (nl == std::string::npos) return false;
    line = data.substr(pos, nl - pos);
    pos = nl + 1;
    return true;
  };
  auto bad = [&path](const std::string& why) {
    return Error(ErrorKind::io, "malformed transcript " + path.string() + ": " + why);
  };

  std::string line;
  while (read_line(line)) {
    constexpr std::string_view head = "=== exchange ";
    if (line.rfind(head, 0) != 0) throw bad("expected exchange header");
    std::istringstream hs(line.substr(head.size()));
    TranscriptEntry e;
    std::string model_field;
    hs >> e.sequence >> e.timestamp >> model_field;
    if (model_field.rfind("model=", 0) != 0) throw bad("missing model field");
    e.model = model_field.substr(6);
    std::vector<ChatMessage> frames;
    for (;;) {
      if (!read_line(line)) throw bad("truncated record");
      if (line.rfind("=== end", 0) == 0) break;
      if (line.rfind("--- ", 0) != 0) throw bad("expected frame header");
      const auto sp = line.find(' ', 4);
      if (sp == std::string::npos) throw bad("frame header without length");
      const std::string role = line.substr(4, sp - 4);
      std::size_t len = 0;
      const auto lenstr = std::string_view(line).substr(sp + 1);
      std::from_chars(lenstr.data(), lenstr.data() + lenstr.size(), len);
      if (pos + len + 1 > data.size()) throw bad("frame exceeds file");
      std::string content = data.substr(pos, len);
      pos += len + 1;
      Role r = role == "system" ? Role::system : role == "user" ? Role::user : Role::assistant;
      frames.push_back({r, std::move(content)});
    }
    if (frames.empty() || frames.back().role != Role::assistant) throw bad("record without reply");
    e.reply = std::move(frames.back().content);
    frames.pop_back();
    e.request = std::move(frames);
    entries.push_back(std::move(e));
  }
  return entries;
}

// ---------------------------------------------------------------------------

Teacher::Teacher() { g_instances.fetch_add(1, std::memory_order_relaxed); }

std::size_t Teacher::instances_created() { return g_instances.load(std::memory_order_relaxed); }

TeacherReply Teacher::send_chat(std::span<const ChatMessage> conversation,
                                const GenerationParams& params) {
  if (conversation.empty()) throw Error(ErrorKind::precondition, "empty conversation");
  if (conversation.front().role != Role::system) {
    throw Error(ErrorKind::precondition, "conversation must start with a system message");
  }
  for (std::size_t i = 0; i < conversation.size(); ++i) {
    const auto& m = conversation[i];
    if (i > 0 && m.role == Role::system) {
      throw Error(ErrorKind::precondition, "only one system message is allowed");
    }
    if (m.role != Role::assistant && trim(m.content).empty()) {
      throw Error(ErrorKind::precondition, "system and user messages must be non-empty");
    }
  }
  params.validate();

  std::lock_guard lock(mutex_);
  TeacherReply reply = do_send(conversation, params);
  usage_ += reply.usage;
  ++served_;
  if (transcript_) transcript_->append(served_, params.model, conversation, reply);
  return reply;
}

TokenUsage Teacher::total_usage() const {
  std::lock_guard lock(mutex_);
  return usage_;
}

std::size_t Teacher::requests_served() const {
  std::lock_guard lock(mutex_);
  return served_;
}

void Teacher::attach_transcript(std::shared_ptr<TranscriptLog> log) {
  std::lock_guard lock(mutex_);
  transcript_ = std::move(log);
}

void Teacher::resume(std::size_t requests_already_served, const TokenUsage& usage_so_far) {
  std::lock_guard lock(mutex_);
  served_ = requests_already_served;
  usage_ = usage_so_far;
}

// ---------------------------------------------------------------------------

ScriptedTeacher::ScriptedTeacher(std::vector<FixtureReply> replies) : replies_(std::move(replies)) {}

std::unique_ptr<ScriptedTeacher> ScriptedTeacher::from_file(const std::filesystem::path& fixture) {
  std::ifstream in(fixture);
  if (!in) throw Error(ErrorKind::io, "cannot open teacher fixture " + fixture.string());
  std::vector<FixtureReply> replies;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      FixtureReply r;
      r.content = j.at("content").get<std::string>();
      if (j.contains("usage") && !j["usage"].is_null()) {
        TokenUsage u;
        u.prompt_tokens = j["usage"].at("prompt_tokens").get<std::uint64_t>();
        u.completion_tokens = j["usage"].at("completion_tokens").get<std::uint64_t>();
        r.usage = u;
      }
      replies.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorKind::io, "fixture " + fixture.string() + " line " +
                                     std::to_string(lineno) + ": " + e.what());
    }
  }
  return std::make_unique<ScriptedTeacher>(std::move(replies));
}

void ScriptedTeacher::resume(std::size_t requests_already_served, const TokenUsage& usage_so_far) {
  if (requests_already_served > replies_.size()) {
    throw Error(ErrorKind::fixture_exhausted, "cannot resume past the end of the fixture");
  }
  Teacher::resume(requests_already_served, usage_so_far);
  cursor_ = requests_already_served;
}

TranscriptLog::Clock ScriptedTeacher::logical_clock() {
  return [](std::size_t s) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "2000-01-01T%02zu:%02zu:%02zuZ", (s / 3600) % 24, (s / 60) % 60,
                  s % 60);
    return std::string(buf);
  };
}

TeacherReply ScriptedTeacher::do_send(std::span<const ChatMessage> conversation,
                                      const GenerationParams&) {
  if (cursor_ >= replies_.size()) {
    throw Error(ErrorKind::fixture_exhausted,
                "request #" + std::to_string(cursor_ + 1) + " exceeds the " +
                    std::to_string(replies_.size()) + " recorded replies");
  }
  const FixtureReply& r = replies_[cursor_++];
  TeacherReply reply{r.content, {}};
  if (r.usage) {
    reply.usage = *r.usage;
  } else {
    for (const auto& m : conversation) reply.usage.prompt_tokens += estimate_tokens(m.content);
    reply.usage.completion_tokens = estimate_tokens(r.content);
    reply.usage.estimated = true;
  }
  return reply;
}

}  // namespace distillery::teacher
