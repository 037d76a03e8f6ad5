#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "distillery/core.hpp"

namespace distillery::teacher {

enum class Role { system, user, assistant };

std::string_view to_string(Role role);

struct ChatMessage {
  Role role = Role::user;
  std::string content;

  static ChatMessage system(std::string content) { return {Role::system, std::move(content)}; }
  static ChatMessage user(std::string content) { return {Role::user, std::move(content)}; }
  static ChatMessage assistant(std::string content) { return {Role::assistant, std::move(content)}; }

  friend bool operator==(const ChatMessage&, const ChatMessage&) = default;
};

using Conversation = std::vector<ChatMessage>;

struct GenerationParams {
  double temperature = 0.8;
  int max_completion_tokens = 32000;
  std::string model;

  void validate() const;

  /// Sampling presets: diverse for data generation, stable for error analysis.
  static GenerationParams for_generation(std::string model) { return {0.8, 32000, std::move(model)}; }
  static GenerationParams for_analysis(std::string model) { return {0.2, 4000, std::move(model)}; }
};

struct TeacherReply {
  std::string content;
  TokenUsage usage;
};

/// ceil(code points / 4); the fallback when an endpoint reports no usage.
std::uint64_t estimate_tokens(std::string_view text);

/// The mission prompt every teacher receives, with the student name filled in.
std::string default_system_prompt(std::string_view student_name);

std::string utc_now_iso8601();
/// Transcript clock ignoring the sequence number.
inline std::string utc_clock(std::size_t) { return utc_now_iso8601(); }

/// Append-only log of every request/reply pair. Each record is framed with
/// byte lengths so arbitrary content round-trips:
///
///   === exchange <seq> <timestamp> model=<id> usage=<prompt>/<completion>[~]
///   --- <role> <bytes>
///   <content>
///   ...
///   === end <seq>
class TranscriptLog {
 public:
  /// Produces the timestamp for exchange number `sequence`.
  using Clock = std::function<std::string(std::size_t sequence)>;

  explicit TranscriptLog(std::filesystem::path path, Clock clock = utc_clock);

  void append(std::size_t sequence, std::string_view model, std::span<const ChatMessage> request,
              const TeacherReply& reply);
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  Clock clock_;
};

struct TranscriptEntry {
  std::size_t sequence = 0;
  std::string timestamp;
  std::string model;
  std::vector<ChatMessage> request;
  std::string reply;
};

/// Parses a transcript file back into entries; throws Error(io) on bad framing.
std::vector<TranscriptEntry> read_transcript(const std::filesystem::path& path);

/// A chat model that answers conversations. Requests are serialized; usage is
/// accumulated across calls and every exchange goes to the attached transcript.
class Teacher {
 public:
  virtual ~Teacher() = default;
  Teacher(const Teacher&) = delete;
  Teacher& operator=(const Teacher&) = delete;

  /// The conversation must start with its only system message, and system and
  /// user messages must be non-empty.
  TeacherReply send_chat(std::span<const ChatMessage> conversation, const GenerationParams& params);

  TokenUsage total_usage() const;
  std::size_t requests_served() const;
  void attach_transcript(std::shared_ptr<TranscriptLog> log);

  /// Restores counters after a resumed run; scripted teachers also skip the
  /// replies already consumed.
  virtual void resume(std::size_t requests_already_served, const TokenUsage& usage_so_far);

  /// Process-wide count of teacher constructions.
  static std::size_t instances_created();

 protected:
  Teacher();
  virtual TeacherReply do_send(std::span<const ChatMessage> conversation,
                               const GenerationParams& params) = 0;

 private:
  mutable std::mutex mutex_;
  TokenUsage usage_;
  std::size_t served_ = 0;
  std::shared_ptr<TranscriptLog> transcript_;
};

struct FixtureReply {
  std::string content;
  std::optional<TokenUsage> usage;
};

/// Replays recorded replies in order. Fixture files are JSON Lines:
/// {"content": "...", "usage": {"prompt_tokens": n, "completion_tokens": m}}
/// with "usage" optional (absent means the char/4 estimate is used).
class ScriptedTeacher : public Teacher {
 public:
  explicit ScriptedTeacher(std::vector<FixtureReply> replies);
  static std::unique_ptr<ScriptedTeacher> from_file(const std::filesystem::path& fixture);

  std::size_t remaining() const { return replies_.size() - cursor_; }
  void resume(std::size_t requests_already_served, const TokenUsage& usage_so_far) override;

  /// Deterministic timestamps for scripted runs: one logical second per
  /// exchange, so a resumed run writes the same stamps as an uninterrupted one.
  static TranscriptLog::Clock logical_clock();

 protected:
  TeacherReply do_send(std::span<const ChatMessage> conversation,
                       const GenerationParams& params) override;

 private:
  std::vector<FixtureReply> replies_;
  std::size_t cursor_ = 0;
};

struct HttpTeacherConfig {
  std::string endpoint = "https://openrouter.ai/api/v1/chat/completions";
  std::string api_key;
  int max_retries = 3;
  std::chrono::milliseconds initial_backoff{1000};
  std::chrono::seconds request_timeout{300};
  std::function<void(std::chrono::milliseconds)> sleeper;  // defaults to this_thread::sleep_for
};

inline constexpr const char* kApiKeyEnv = "DISTILLERY_API_KEY";

/// Client for OpenAI/OpenRouter-compatible chat-completion endpoints.
/// Timeouts, HTTP 429 and 5xx are retried with exponential backoff
/// (1 s, 2 s, 4 s by default); other failures surface immediately.
class HttpTeacher : public Teacher {
 public:
  explicit HttpTeacher(HttpTeacherConfig config);

  /// Reads the credential from DISTILLERY_API_KEY.
  static std::unique_ptr<HttpTeacher> from_environment(std::string endpoint);

  std::size_t attempts_made() const { return attempts_; }

 protected:
  TeacherReply do_send(std::span<const ChatMessage> conversation,
                       const GenerationParams& params) override;

 private:
  HttpTeacherConfig config_;
  std::string scheme_host_port_;
  std::string path_;
  std::size_t attempts_ = 0;
};

}  // namespace distillery::teacher
