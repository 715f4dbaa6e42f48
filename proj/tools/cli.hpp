#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace dscm::cli {

namespace fs = std::filesystem;

inline constexpr const char* kOutputRootEnv = "DSCM_OUTPUT_ROOT";

/// Runs the `dscm` command line. Returns the process exit code.
int run(int argc, char** argv);
int run(const std::vector<std::string>& args);

/// Relative output paths resolve under $DSCM_OUTPUT_ROOT when it is set.
fs::path output_dir(const fs::path& out);

nlohmann::json read_json(const fs::path& path);
void write_json(const fs::path& path, const nlohmann::json& j);

/// Writes <dir>/run_config.json: the command name plus its resolved settings.
void write_run_config(const fs::path& dir, const std::string& command, const nlohmann::json& settings);

/// Top-level keys whose values differ between two objects, formatted "key: a -> b".
std::vector<std::string> json_diff(const nlohmann::json& a, const nlohmann::json& b);

void log(const std::string& message);

struct GenerateOptions {
  fs::path source;
  fs::path out;
  std::string variant = "grayscale";
  std::uint64_t seed = 0;
  int train = 50000;
  int val = 10000;
  int test = 10000;
};
int cmd_generate_data(const GenerateOptions& o);

struct TrainOptions {
  fs::path data;
  fs::path out;
  fs::path config;
  nlohmann::json overrides = nlohmann::json::object();
  int64_t limit = -1;
  int64_t checkpoint_every = 1;
  int64_t log_every = 50;
  bool resume = false;
};
int cmd_train(const TrainOptions& o);

struct ClassifierOptions {
  fs::path data;
  fs::path out;
  int64_t epochs = 100;
  int64_t batch_size = 256;
  double learning_rate = 1e-3;
  std::uint64_t seed = 0;
  int64_t limit = -1;
  bool shuffle_labels = false;
};
int cmd_train_classifier(const ClassifierOptions& o);

struct InferOptions {
  fs::path checkpoint;
  fs::path data;
  fs::path out;
  fs::path classifier;
  std::string split = "test";
  std::string mode;  // spatial | semantic | dynamic; empty picks by mechanism
  std::vector<std::string> intervention;
  double omega = -1.0;  // < 0: checkpoint default
  double eta = -1.0;
  int64_t steps = -1;
  int particles = 1;
  int64_t count = 8;
  int64_t offset = 0;
  int64_t batch_size = 32;
  std::uint64_t seed = 0;
};
int cmd_counterfactual(const InferOptions& o);
int cmd_evaluate(const InferOptions& o, const std::vector<std::string>& attributes);

struct MediateOptions {
  InferOptions infer;
  std::string node;
  double value = 0.0;
};
int cmd_mediate(const MediateOptions& o);

}  // namespace dscm::cli
