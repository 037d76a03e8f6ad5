#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <cstring>
#include <fstream>
#include <sstream>

#include <json.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "distillery/datagen.hpp"
#include "distillery/train.hpp"

namespace distillery::train {

namespace {

struct Pipe {
  int fd[2] = {-1, -1};
  Pipe() {
    if (::pipe2(fd, O_CLOEXEC) != 0) throw Error(ErrorKind::io, std::string("pipe: ") + std::strerror(errno));
  }
  ~Pipe() {
    close_read();
    close_write();
  }
  void close_read() {
    if (fd[0] >= 0) ::close(fd[0]);
    fd[0] = -1;
  }
  void close_write() {
    if (fd[1] >= 0) ::close(fd[1]);
    fd[1] = -1;
  }
};

std::string tail(const std::string& s, std::size_t n = 2000) {
  return s.size() <= n ? s : "..." + s.substr(s.size() - n);
}

std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

}  // namespace

ProcessResult run_process(const std::vector<std::string>& argv, const std::string& input,
                          std::chrono::milliseconds timeout) {
  if (argv.empty()) throw Error(ErrorKind::precondition, "empty command");
  Pipe in, out, err, exec_err;

  const pid_t pid = ::fork();
  if (pid < 0) throw Error(ErrorKind::io, std::string("fork: ") + std::strerror(errno));
  if (pid == 0) {
    ::dup2(in.fd[0], STDIN_FILENO);
    ::dup2(out.fd[1], STDOUT_FILENO);
    ::dup2(err.fd[1], STDERR_FILENO);
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    ::execvp(args[0], args.data());
    const int e = errno;
    [[maybe_unused]] auto n = ::write(exec_err.fd[1], &e, sizeof e);
    ::_exit(127);
  }
  in.close_read();
  out.close_write();
  err.close_write();
  exec_err.close_write();
  ::signal(SIGPIPE, SIG_IGN);

  int exec_errno = 0;
  if (::read(exec_err.fd[0], &exec_errno, sizeof exec_errno) == sizeof exec_errno) {
    ::waitpid(pid, nullptr, 0);
    throw Error(ErrorKind::nonzero_exit,
                "cannot execute '" + argv[0] + "': " + std::strerror(exec_errno));
  }

  ProcessResult res;
  ::fcntl(in.fd[1], F_SETFL, O_NONBLOCK);
  std::size_t written = 0;
  if (input.empty()) in.close_write();

  const auto deadline = std::chrono::steady_clock::now() + timeout;
  char buf[65536];
  while (out.fd[0] >= 0 || err.fd[0] >= 0) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      res.timed_out = true;
      ::kill(pid, SIGKILL);
      break;
    }
    pollfd fds[3];
    nfds_t nf = 0;
    auto add = [&](int fd, short ev) {
      if (fd >= 0) fds[nf++] = {fd, ev, 0};
    };
    add(out.fd[0], POLLIN);
    add(err.fd[0], POLLIN);
    add(in.fd[1], POLLOUT);
    const int rc = ::poll(fds, nf, static_cast<int>(std::min<long long>(left.count(), 1000)));
    if (rc < 0) {
      if (errno == EINTR) continue;
      throw Error(ErrorKind::io, std::string("poll: ") + std::strerror(errno));
    }
    for (nfds_t k = 0; k < nf; ++k) {
      if (fds[k].revents == 0) continue;
      if (fds[k].fd == in.fd[1]) {
        const ssize_t w = ::write(in.fd[1], input.data() + written, input.size() - written);
        if (w > 0) written += static_cast<std::size_t>(w);
        if (w < 0 && errno != EAGAIN) in.close_write();  // child closed stdin early
        if (written == input.size()) in.close_write();
        continue;
      }
      const ssize_t r = ::read(fds[k].fd, buf, sizeof buf);
      if (r > 0) {
        (fds[k].fd == out.fd[0] ? res.out : res.err).append(buf, static_cast<std::size_t>(r));
      } else if (r == 0 || errno != EAGAIN) {
        if (fds[k].fd == out.fd[0]) out.close_read();
        else err.close_read();
      }
    }
  }
  in.close_write();

  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  if (WIFEXITED(status)) res.exit_code = WEXITSTATUS(status);
  if (WIFSIGNALED(status)) res.term_signal = WTERMSIG(status);
  return res;
}

// ---------------------------------------------------------------------------

void external_train(const ExternalTrainerConfig& config, const std::filesystem::path& data_file,
                    const std::filesystem::path& model_dir, const TrainHyper& hyper) {
  if (config.command.empty()) throw Error(ErrorKind::config, "no external trainer command");
  std::filesystem::create_directories(model_dir);
  std::filesystem::remove(model_dir / kManifestFile);

  auto argv = config.command;
  const std::vector<std::string> args{
      "train",  "--data",   data_file.string(),           "--out",
      model_dir.string(),   "--rank", std::to_string(hyper.rank), "--alpha",
      format_double(hyper.alpha), "--lr", format_double(hyper.learning_rate), "--batch",
      std::to_string(hyper.batch_size), "--epochs", std::to_string(hyper.epochs), "--seed",
      std::to_string(hyper.seed)};
  argv.insert(argv.end(), args.begin(), args.end());

  spdlog::info("external train: {}", fmt::join(argv, " "));
  const auto res = run_process(argv, {}, config.train_timeout);
  if (res.timed_out) {
    throw Error(ErrorKind::timeout, "external trainer exceeded " +
                                        std::to_string(config.train_timeout.count()) + " ms");
  }
  if (res.term_signal != 0) {
    throw Error(ErrorKind::nonzero_exit, "external trainer killed by signal " +
                                             std::to_string(res.term_signal) + "; stderr: " +
                                             tail(res.err));
  }
  if (res.exit_code != 0) {
    throw Error(ErrorKind::nonzero_exit, "external trainer exited " +
                                             std::to_string(res.exit_code) + "; stderr: " +
                                             tail(res.err));
  }
  if (!std::filesystem::exists(model_dir / kManifestFile)) {
    throw Error(ErrorKind::missing_manifest, (model_dir / kManifestFile).string() + " not written");
  }
}

std::vector<student::Prediction> external_predict(const ExternalTrainerConfig& config,
                                                  const std::filesystem::path& model_dir,
                                                  std::span<const std::string> texts) {
  if (config.command.empty()) throw Error(ErrorKind::config, "no external trainer command");
  auto argv = config.command;
  argv.push_back("predict");
  if (model_dir.empty()) {
    argv.push_back("--zero-shot");
  } else {
    if (!std::filesystem::exists(model_dir / kManifestFile)) {
      throw Error(ErrorKind::missing_manifest, (model_dir / kManifestFile).string() + " not found");
    }
    argv.push_back("--model");
    argv.push_back(model_dir.string());
  }

  std::string input;
  for (const auto& t : texts) {
    for (char c : t) input.push_back(c == '\n' || c == '\r' ? ' ' : c);
    input.push_back('\n');
  }
  const auto res = run_process(argv, input, config.predict_timeout);
  if (res.timed_out) {
    throw Error(ErrorKind::timeout, "external predict exceeded " +
                                        std::to_string(config.predict_timeout.count()) + " ms");
  }
  if (res.term_signal != 0 || res.exit_code != 0) {
    throw Error(ErrorKind::child_crash,
                "external predict " +
                    (res.term_signal ? "killed by signal " + std::to_string(res.term_signal)
                                     : "exited " + std::to_string(res.exit_code)) +
                    "; stderr: " + tail(res.err));
  }

  std::vector<std::string> lines;
  std::istringstream in(res.out);
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (lines.size() != texts.size()) {
    throw Error(ErrorKind::line_count_mismatch, "sent " + std::to_string(texts.size()) +
                                                    " messages, got " +
                                                    std::to_string(lines.size()) + " lines");
  }
  std::vector<student::Prediction> out;
  out.reserve(lines.size());
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const auto& line = lines[i];
    const auto tab = line.find('\t');
    const auto bad = [&] {
      return Error(ErrorKind::unparseable_line,
                   "output line " + std::to_string(i + 1) + ": '" + line.substr(0, 80) + "'");
    };
    if (tab == std::string::npos) throw bad();
    const std::string_view label_field = std::string_view(line).substr(0, tab);
    if (label_field != "spam" && label_field != "ham") throw bad();
    const std::string prob_field = line.substr(tab + 1);
    double p = 0.0;
    auto [end, ec] = std::from_chars(prob_field.data(), prob_field.data() + prob_field.size(), p);
    if (ec != std::errc{} || end != prob_field.data() + prob_field.size() || !(p >= 0.0 && p <= 1.0)) {
      throw bad();
    }
    out.push_back({label_field == "spam" ? Label::spam : Label::ham, p});
  }
  return out;
}

// ---------------------------------------------------------------------------

std::vector<student::Prediction> ExternalClassifier::predict_batch(
    std::span<const std::string> texts) const {
  return external_predict(config_, model_dir_, texts);
}

ExternalTrainer::ExternalTrainer(ExternalTrainerConfig config) : config_(std::move(config)) {
  if (config_.command.empty()) throw Error(ErrorKind::config, "no external trainer command");
}

std::unique_ptr<Classifier> ExternalTrainer::untrained(const TrainHyper&) {
  return std::make_unique<ExternalClassifier>(config_, std::filesystem::path{});
}

std::unique_ptr<Classifier> ExternalTrainer::train(const Dataset& dataset, const TrainHyper& hyper,
                                                   const std::filesystem::path& model_dir) {
  hyper.validate();
  if (dataset.split() != SplitTag::train) {
    throw Error(ErrorKind::precondition, "refusing to train on a non-training split");
  }
  std::filesystem::create_directories(model_dir);
  const auto data = model_dir / kTrainDataFile;
  datagen::write_jsonl(data, dataset.examples());
  external_train(config_, data, model_dir, hyper);
  return std::make_unique<ExternalClassifier>(config_, model_dir);
}

std::unique_ptr<Classifier> ExternalTrainer::train_preferences(const std::vector<PreferencePair>& pairs,
                                                               const TrainHyper& hyper,
                                                               const std::filesystem::path& model_dir) {
  hyper.validate();
  if (pairs.empty()) throw Error(ErrorKind::precondition, "no preference pairs");
  std::filesystem::create_directories(model_dir);
  const auto data = model_dir / kTrainDataFile;
  write_preferences(data, pairs);
  external_train(config_, data, model_dir, hyper);
  return std::make_unique<ExternalClassifier>(config_, model_dir);
}

std::unique_ptr<Classifier> ExternalTrainer::load(const std::filesystem::path& model_dir) {
  if (!std::filesystem::exists(model_dir / kManifestFile)) {
    throw Error(ErrorKind::model_load_failure, (model_dir / kManifestFile).string() + " not found");
  }
  return std::make_unique<ExternalClassifier>(config_, model_dir);
}

}  // namespace distillery::train
