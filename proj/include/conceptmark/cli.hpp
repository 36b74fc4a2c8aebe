#pragma once

// Command-line front end. run_cli is the whole program minus the process exit, so
// tests drive it in-process.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "conceptmark/distortions.hpp"
#include "conceptmark/training.hpp"
#include "json.hpp"

namespace conceptmark {

/// Environment variable naming the artifact root; `--root` wins over it.
inline constexpr const char* kArtifactRootEnv = "CONCEPTMARK_ROOT";

struct RunPaths {
  std::filesystem::path registry = "registry.json";
  std::filesystem::path dataset = "dataset";
  std::filesystem::path multiconcept = "multiconcept.json";
  std::filesystem::path backend = "backend";
  std::filesystem::path checkpoints = "checkpoints";
  std::filesystem::path reports = "reports";
};

struct SequentialOptions {
  int initial = 4;
  int increment = 2;
  int final_count = 8;
  double extra_fraction = 0.10;
};

struct EvalOptions {
  int images_per_concept = 25;
  double tau = 0.875;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  std::vector<DistortionSpec> distortions = default_suite();
  bool adversarial = true;
  double alpha = 1.1;
  int pairs = 48;
  int clean_images = 2000;
  std::vector<int> bit_lengths{5, 8, 16, 32, 64};
  std::vector<int> concept_counts{2, 4, 8};
  SequentialOptions sequential;
  int baseline_refs = 8;
};

struct RunConfig {
  std::filesystem::path artifact_root = "artifacts";
  /// Registry secrets, and the default for the backend and training seeds.
  std::uint64_t seed = 0;
  RunPaths paths;
  int n_bits = 8;
  /// Optional JSON list of {"token", "kind"[, "query_template"]} replacing the synthetic world concepts.
  std::filesystem::path concepts_file;
  BackendBuildConfig backend;
  TrainConfig train;
  EvalOptions eval;

  /// Relative paths live under the artifact root.
  std::filesystem::path resolve(const std::filesystem::path& p) const;

  nlohmann::json to_json() const;
  /// Unknown keys anywhere are a ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
};

/// Applies "a.b.c=value" to a JSON object. The value is parsed as JSON when possible,
/// otherwise taken as a string.
void apply_override(nlohmann::json& config, const std::string& assignment);

/// Defaults, then the config file (if any), then overrides, then the artifact root.
RunConfig resolve_config(const std::filesystem::path& config_file, const std::vector<std::string>& overrides,
                         const std::string& root_flag);

/// Runs one command and returns the process exit code. Failures are reported on `err`
/// as a single JSON object.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace conceptmark
