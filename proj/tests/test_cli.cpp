#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <sstream>

#include "conceptmark/cli.hpp"
#include "conceptmark/error.hpp"
#include "conceptmark/registry.hpp"

using namespace conceptmark;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

const char* kTinyConfig = R"({
  "n_bits": 4,
  "seed": 3,
  "backend": {
    "world": {"shapes": ["circle", "square"], "styles": ["red-stripes", "blue-dots"],
              "samples_per_concept": 6, "image_size": 16},
    "generator": {"embedding_dim": 8, "latent_shape": [3, 8, 8], "image_size": 16, "channels": 6,
                  "cond_hidden": 16},
    "backbone": {"c1": 4, "c2": 6, "c3": 8, "text_dim": 8},
    "generator_pretrain": {"iterations": 60, "batch_size": 4},
    "backbone_pretrain": {"iterations": 10, "batch_size": 4}
  },
  "train": {"iterations": 400, "batch_size": 4, "learning_rate": 0.003, "hidden_width_multiplier": 1,
            "attn_dim": 4, "generation_steps": 2, "checkpoint_every": 0, "multi_ratio": 0.0,
            "concepts": ["circle"]},
  "eval": {"images_per_concept": 2, "clean_images": 8, "pairs": 4, "seeds": [0], "baseline_refs": 2}
})";

struct Run {
  int code;
  std::string out;
  std::string err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

fs::path workspace() {
  const fs::path dir = fs::temp_directory_path() / "conceptmark_test_cli";
  static bool fresh = [&] {
    fs::remove_all(dir);
    fs::create_directories(dir);
    write_text_file(dir / "tiny.json", kTinyConfig);
    return true;
  }();
  (void)fresh;
  return dir;
}

std::vector<std::string> base(const std::string& root) {
  return {"-c", (workspace() / "tiny.json").string(), "--root", (workspace() / root).string()};
}

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_CASE("overrides use dot notation and parse JSON values") {
  json j = {{"train", {{"iterations", 5}}}};
  apply_override(j, "train.learning_rate=3e-4");
  apply_override(j, "train.secret_source=registry");
  apply_override(j, "eval.seeds=[4,5]");
  CHECK(j["train"]["learning_rate"] == 3e-4);
  CHECK(j["train"]["secret_source"] == "registry");
  CHECK(j["train"]["iterations"] == 5);
  CHECK(j["eval"]["seeds"] == json::array({4, 5}));
  CHECK_THROWS_AS(apply_override(j, "novalue"), Error);
  CHECK_THROWS_AS(apply_override(j, "a..b=1"), Error);
}

TEST_CASE("config resolution: seeds, root and unknown keys") {
  const RunConfig c = resolve_config({}, {"seed=9", "n_bits=16"}, "/tmp/somewhere");
  CHECK(c.train.seed == 9);
  CHECK(c.backend.seed == 9);
  CHECK(c.train.n_bits == 16);
  CHECK(c.resolve("registry.json") == fs::path("/tmp/somewhere/registry.json"));
  CHECK(RunConfig::from_json(c.to_json()).to_json() == c.to_json());

  setenv(kArtifactRootEnv, "/tmp/from_env", 1);
  CHECK(resolve_config({}, {}, "").artifact_root == fs::path("/tmp/from_env"));
  CHECK(resolve_config({}, {}, "/tmp/flag").artifact_root == fs::path("/tmp/flag"));
  CHECK(resolve_config({}, {"artifact_root=/tmp/from_config"}, "").artifact_root == fs::path("/tmp/from_config"));
  unsetenv(kArtifactRootEnv);

  const Run bad = cli({"--set", "train.learnin_rate=1", "init-registry"});
  CHECK(bad.code == 2);
  const json e = json::parse(bad.err);
  CHECK(e["error"] == "ConfigError");
  CHECK(e["exit_code"] == 2);
  CHECK(cli({"no-such-command"}).code == 2);
}

TEST_CASE("end-to-end commands are deterministic and attribute their own fixture") {
  for (const char* root : {"a", "b"}) {
    for (const char* cmd : {"init-registry", "build-dataset", "pretrain-generator", "train"}) {
      const Run r = cli(with(base(root), {cmd}));
      INFO(cmd << ": " << r.err);
      REQUIRE(r.code == 0);
    }
  }
  const auto digest = [](const std::string& root) {
    return json::parse(read_text_file(workspace() / root / "checkpoints" / "effective_config.json")).dump() +
           checkpoint_digest(workspace() / root / "checkpoints" / "final");
  };
  CHECK(checkpoint_digest(workspace() / "a/checkpoints/final") ==
        checkpoint_digest(workspace() / "b/checkpoints/final"));
  CHECK(fs::exists(workspace() / "a/checkpoints/loss.jsonl"));
  CHECK(!digest("a").empty());

  const auto gen = [&](const std::string& out) {
    return cli(with(base("a"), {"generate", "--prompt", "a photo of <circle> on a table", "--concept", "circle",
                                "--latent-seed", "11", "-o", out, "--clean"}));
  };
  REQUIRE(gen("gen/one.png").code == 0);
  REQUIRE(gen("gen/two.png").code == 0);
  CHECK(read_text_file(workspace() / "a/gen/one.png") == read_text_file(workspace() / "a/gen/two.png"));
  CHECK(fs::exists(workspace() / "a/gen/one_clean.png"));
  CHECK(fs::exists(workspace() / "a/gen/effective_config.json"));

  const Run attr = cli(with(base("a"), {"attribute", "--image", (workspace() / "a/gen/one.png").string(),
                                        "--concept", "circle"}));
  REQUIRE(attr.code == 0);
  const json result = json::parse(attr.out).at(0).at("results").at(0);
  CHECK(result["concept_id"] == "circle");
  CHECK(result["match"] == true);

  const Run unknown = cli(with(base("a"), {"attribute", "--image", (workspace() / "a/gen/one.png").string(),
                                           "--concept", "no-such-concept"}));
  CHECK(unknown.code == exit_code_for(ErrorCode::UnknownConcept));
  CHECK(json::parse(unknown.err)["error"] == "UnknownConcept");

  const Run missing = cli(with(base("a"), {"attribute", "--image", (workspace() / "a/gen/none.png").string(),
                                           "--concept", "circle"}));
  CHECK(missing.code == exit_code_for(ErrorCode::IoError));
}

TEST_CASE("evaluation commands write reports that re-render") {
  const Run r = cli(with(base("a"), {"eval", "robustness"}));
  INFO(r.err);
  REQUIRE(r.code == 0);
  const fs::path report = workspace() / "a/reports/robustness.json";
  CHECK(fs::exists(report));
  CHECK(fs::exists(workspace() / "a/reports/robustness_robustness.csv"));
  const Run again = cli(with(base("a"), {"report", "--input", report.string(), "--plot",
                                         (workspace() / "a/reports/again.png").string()}));
  CHECK(again.code == 0);
  CHECK(fs::exists(workspace() / "a/reports/again.png"));
  CHECK(cli(with(base("a"), {"eval"})).code == 2);
}
