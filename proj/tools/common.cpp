#include <chrono>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "cli.hpp"
#include "dscm/error.hpp"

namespace dscm::cli {

fs::path output_dir(const fs::path& out) {
  if (out.empty()) throw ArgumentError("an output directory is required (--out)");
  if (out.is_relative())
    if (const char* root = std::getenv(kOutputRootEnv); root && *root) return fs::path(root) / out;
  return out;
}

nlohmann::json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const nlohmann::json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

void write_run_config(const fs::path& dir, const std::string& command, const nlohmann::json& settings) {
  nlohmann::ordered_json j;
  j["command"] = command;
  for (const auto& [k, v] : settings.items()) j[k] = v;
  write_json(dir / "run_config.json", j);
}

std::vector<std::string> json_diff(const nlohmann::json& a, const nlohmann::json& b) {
  std::vector<std::string> out;
  for (const auto& [k, v] : a.items()) {
    if (!b.contains(k))
      out.push_back(k + ": " + v.dump() + " -> (absent)");
    else if (b.at(k) != v)
      out.push_back(k + ": " + v.dump() + " -> " + b.at(k).dump());
  }
  for (const auto& [k, v] : b.items())
    if (!a.contains(k)) out.push_back(k + ": (absent) -> " + v.dump());
  return out;
}

void log(const std::string& message) {
  auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::cerr << std::put_time(&tm, "%H:%M:%S") << ' ' << message << std::endl;
}

}  // namespace dscm::cli
