// Reference implementation of the external-trainer protocol (docs/PROTOCOL.md).
// It "trains" by memorizing the dataset and predicts with a fixed rule, which
// makes every protocol behaviour easy to assert in tests:
//   memorized spam -> spam 0.99, memorized ham -> ham 0.01,
//   unseen text with "http" or "£" -> spam 0.75, otherwise ham 0.25,
//   zero-shot mode -> spam 0.5 for every line.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "distillery/core.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr const char* kMemoryFile = "memory.jsonl";

int fail(const std::string& message) {
  std::cerr << "stub_trainer: " << message << '\n';
  return 1;
}

// --key value pairs; bare flags map to "".
std::map<std::string, std::string> parse_flags(int argc, char** argv, int first) {
  std::map<std::string, std::string> flags;
  for (int i = first; i < argc; ++i) {
    std::string key = argv[i];
    if (key.rfind("--", 0) != 0) throw std::runtime_error("unexpected argument " + key);
    key = key.substr(2);
    if (i + 1 < argc && std::string(argv[i + 1]).rfind("--", 0) != 0) {
      flags[key] = argv[++i];
    } else {
      flags[key] = "";
    }
  }
  return flags;
}

std::string key_of(const std::string& text) {
  std::string flat = text;
  for (auto& c : flat) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return distillery::normalize_text(flat);
}

int train(const std::map<std::string, std::string>& flags) {
  static const char* required[] = {"data", "out", "rank", "alpha", "lr", "batch", "epochs", "seed"};
  for (const char* r : required) {
    if (!flags.count(r) || flags.at(r).empty()) return fail(std::string("missing --") + r);
  }
  std::ifstream in(flags.at("data"), std::ios::binary);
  if (!in) return fail("cannot read " + flags.at("data"));
  std::stringstream raw;
  raw << in.rdbuf();
  const std::string bytes = raw.str();

  std::vector<ordered_json> memory;
  std::string format;
  std::istringstream lines(bytes);
  std::size_t n = 0;
  for (std::string line; std::getline(lines, line);) {
    ++n;
    if (distillery::trim(line).empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      return fail("line " + std::to_string(n) + ": " + e.what());
    }
    std::string text, label;
    if (rec.contains("prompt")) {  // preference record
      format = "preference";
      text = rec.at("prompt").get<std::string>();
      const auto chosen = distillery::parse_response_label(rec.at("chosen").get<std::string>());
      if (!chosen) return fail("line " + std::to_string(n) + ": chosen response has no label");
      label = std::string(distillery::to_string(*chosen));
    } else {
      format = "labelled";
      text = rec.at("text").get<std::string>();
      label = rec.at("label").get<std::string>();
      if (label != "spam" && label != "ham") return fail("line " + std::to_string(n) + ": bad label");
    }
    memory.push_back({{"key", key_of(text)}, {"label", label}});
  }
  if (memory.empty()) return fail("empty dataset");

  const fs::path out = flags.at("out");
  fs::create_directories(out);
  {
    std::ofstream m(out / kMemoryFile, std::ios::binary | std::ios::trunc);
    for (const auto& r : memory) m << r.dump() << '\n';
  }
  ordered_json manifest;
  manifest["base_model"] = "stub-memorizer";
  for (const char* k : {"rank", "alpha", "lr", "batch", "epochs", "seed"}) manifest[k] = flags.at(k);
  manifest["data_format"] = format;
  manifest["examples"] = memory.size();
  manifest["dataset_digest"] = distillery::sha256_hex(bytes);
  std::ofstream(out / "MANIFEST", std::ios::trunc) << manifest.dump(2) << '\n';
  return 0;
}

int predict(const std::map<std::string, std::string>& flags) {
  const bool zero_shot = flags.count("zero-shot") > 0;
  std::map<std::string, std::string> memory;
  if (!zero_shot) {
    if (!flags.count("model") || flags.at("model").empty()) return fail("missing --model");
    const fs::path dir = flags.at("model");
    if (!fs::exists(dir / "MANIFEST")) return fail("no MANIFEST in " + dir.string());
    std::ifstream in(dir / kMemoryFile);
    for (std::string line; std::getline(in, line);) {
      const auto r = json::parse(line);
      memory[r.at("key").get<std::string>()] = r.at("label").get<std::string>();
    }
  }
  for (std::string line; std::getline(std::cin, line);) {
    if (zero_shot) {
      std::cout << "spam\t0.5\n";
      continue;
    }
    const auto it = memory.find(key_of(line));
    if (it != memory.end()) {
      std::cout << (it->second == "spam" ? "spam\t0.99\n" : "ham\t0.01\n");
    } else if (line.find("http") != std::string::npos || line.find("£") != std::string::npos) {
      std::cout << "spam\t0.75\n";
    } else {
      std::cout << "ham\t0.25\n";
    }
  }
  std::cout.flush();
  return std::cout ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) return fail("usage: stub_trainer train|predict [flags]");
  try {
    const std::string cmd = argv[1];
    const auto flags = parse_flags(argc, argv, 2);
    if (cmd == "train") return train(flags);
    if (cmd == "predict") return predict(flags);
    return fail("unknown command " + cmd);
  } catch (const std::exception& e) {
    return fail(e.what());
  }
}
