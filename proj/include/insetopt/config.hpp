#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "insetopt/composer.hpp"
#include "insetopt/losses.hpp"

#include "json.hpp"

namespace insetopt {

struct ConfigError : std::runtime_error {
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

struct GenConfig {
  std::uint64_t seed = 7;
  int resolution = 256;
  int latent_dim = 32;
  int n_layers = 18;
  int hidden_channels = 8;
  int n_blobs = 1;
  bool operator==(const GenConfig&) const = default;
};

struct TruncationConfig {
  std::string mode = "adaptive";  // none | scalar | adaptive
  double t = 0.7;                 // scalar mode only
  bool operator==(const TruncationConfig&) const = default;
};

struct InitConfig {
  double alpha_canvas = 0.7;  // w_trunc = w_rand*(1-alpha) + w_avg*alpha
  double alpha_inset = 1.0;   // 1.0 collapses to the average-latent init
  bool operator==(const InitConfig&) const = default;
};

struct WAvgConfig {
  int samples = 10000;
  std::uint64_t seed = 1234;
  bool operator==(const WAvgConfig&) const = default;
};

struct FxConfig {
  std::uint64_t seed = 77;
  int channels = 6;
  bool operator==(const FxConfig&) const = default;
};

struct WalkConfigSection {
  int frames_per_segment = 22;
  int budget = 100;
  bool cyclic = true;
  bool operator==(const WalkConfigSection&) const = default;
};

struct EvalConfigSection {
  int count = 120;
  std::uint64_t seed_a = 100;
  std::uint64_t seed_b = 200;
  TruncationConfig trunc_a{"none", 1.0};
  TruncationConfig trunc_b{"adaptive", 0.7};
  int knn_k = 3;
  bool operator==(const EvalConfigSection&) const = default;
};

// Full job description. Every scientific parameter lives here; the defaults
// reproduce the published constants (weight table, learning rates, cadences,
// layer-wise truncation).
struct JobConfig {
  GenConfig canvas;
  std::vector<GenConfig> insets{GenConfig{8, 64, 32, 18, 8, 0}};
  LambdaTable lambdas;
  ScheduleConfig schedule;
  std::string mode = "joint_refine";
  TruncationConfig truncation;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3};
  InitConfig init;
  WAvgConfig w_avg;
  FxConfig fx;
  std::string output_dir = "out";
  bool dump_raw = false;
  WalkConfigSection walk;
  EvalConfigSection eval;
  bool operator==(const JobConfig&) const = default;
};

// Strict parse: unknown or duplicate keys, wrong types, and invalid values
// are rejected with the path to the offending field. An empty file yields
// the full-default config.
JobConfig load_config(const std::string& path);
JobConfig config_from_json_text(const std::string& text);
nlohmann::ordered_json config_to_json(const JobConfig& cfg);
void validate_config(const JobConfig& cfg);

std::string config_hash(const JobConfig& cfg);

// "0..9" or "3,5,7" or "12"
std::vector<std::uint64_t> parse_seed_range(const std::string& text);

}  // namespace insetopt
