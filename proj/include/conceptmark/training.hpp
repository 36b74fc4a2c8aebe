#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "conceptmark/encoding.hpp"
#include "conceptmark/generation.hpp"
#include "conceptmark/nn.hpp"
#include "conceptmark/objectives.hpp"
#include "conceptmark/registry.hpp"
#include "conceptmark/retrieval.hpp"
#include "json.hpp"

namespace conceptmark {

/// Pretrained, frozen pieces: token table, generator and feature backbone.
struct FrozenBackend {
  std::shared_ptr<TokenEmbeddingTable> table;
  ToyGenerator generator;
  ToyBackbone backbone;

  std::string digest() const;
};

struct BackendBuildConfig {
  SyntheticWorldConfig world;
  GeneratorConfig generator;
  BackboneConfig backbone;
  PretrainConfig generator_pretrain;
  BackbonePretrainConfig backbone_pretrain;
  std::uint64_t seed = 0;
};

/// Registers the world concepts, builds the table and pretrains both networks.
FrozenBackend build_backend(const BackendBuildConfig& cfg, Registry& registry);

nlohmann::json backend_config_to_json(const BackendBuildConfig& cfg);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
BackendBuildConfig backend_config_from_json(const nlohmann::json& j);

void save_backend(const FrozenBackend& backend, const std::filesystem::path& dir);
FrozenBackend load_backend(const std::filesystem::path& dir);

struct TrainConfig {
  int iterations = 5000;
  int batch_size = 8;
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lr_decay_gamma = 0.95;
  int lr_decay_every = 1000;
  double grad_clip = 1.0;
  LossWeights weights;
  int n_bits = 8;
  std::uint64_t seed = 0;
  /// Probability that an item is an object+style pair instead of a single concept.
  double multi_ratio = 0.5;
  int generation_steps = 4;
  int hidden_width_multiplier = 4;
  double mapper_gain = 1.0;
  int attn_dim = 32;
  /// "random": a fresh secret per item; "registry": the concept's own secret.
  std::string secret_source = "random";
  /// Trailing fraction of each template bank reserved for evaluation prompts.
  double holdout_templates = 0.2;
  /// Concepts to train on; empty means every registered concept.
  std::vector<std::string> concepts;
  /// Share of sequential-update items drawn from the new concepts.
  double new_concept_ratio = 0.5;
  int checkpoint_every = 500;
  int log_every = 1;

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// lr0 * gamma^(step / decay_every), integer division.
double learning_rate_at(const TrainConfig& cfg, std::int64_t step);

struct ModelState {
  TrainConfig config;
  EncodingConfig encoding;
  RetrievalConfig retrieval_cfg;
  nn::ParamGroup concept_encoder{"concept_encoder"};
  nn::ParamGroup secret_mapper{"secret_mapper"};
  nn::ParamGroup retrieval{"retrieval"};
  nn::ParamGroup decoder{"decoder"};
  nn::Adam optimizer;
  std::int64_t step = 0;
  std::int64_t base_iterations = 0;
  std::vector<std::string> trained_concepts;
  std::string registry_digest;
  std::string backend_digest;

  std::vector<nn::ParamGroup*> trainable();
  RetrievalModel retrieval_model(const FrozenBackend& backend) const;
};

/// Fresh state with zero-initialized encoder outputs.
ModelState init_state(const TrainConfig& cfg, const FrozenBackend& backend, const Registry& registry);

struct TrainItem {
  std::string prompt;
  std::vector<std::string> concept_ids;
  std::vector<Secret> secrets;
  Tensor z;
};
using TrainBatch = std::vector<TrainItem>;

/// Deterministic batch for one step. `new_ids`, when given, are mixed in at new_concept_ratio.
TrainBatch sample_batch(const TrainConfig& cfg, const Registry& registry, const FrozenBackend& backend,
                        const std::vector<std::string>& ids, std::uint64_t seed,
                        const std::vector<std::string>& new_ids = {});

struct ForwardResult {
  LossTerms terms;
  Var total;
  Var wm_images;
  Tensor clean_images;
};

/// Encode, generate the watermarked and clean counterparts, retrieve and score one batch.
ForwardResult forward_batch(ad::Graph& g, ModelState& state, const FrozenBackend& backend, const Registry& registry,
                            const TrainBatch& batch, bool trainable);

/// One optimizer update. Throws NonFiniteLoss with the breakdown in the message.
LossBreakdown train_step(ModelState& state, const FrozenBackend& backend, const Registry& registry,
                         const TrainBatch& batch);

struct TrainHooks {
  std::filesystem::path log_path;         // JSON lines, skipped when empty
  std::filesystem::path checkpoint_dir;   // periodic and final checkpoints, skipped when empty
  int snapshot_every = 0;
  std::function<void(const ModelState&)> on_snapshot;
  std::function<void(std::int64_t, const LossBreakdown&)> on_step;
};

ModelState train(const TrainConfig& cfg, const Registry& registry, const FrozenBackend& backend,
                 const TrainHooks& hooks = {});

/// Fine-tunes on a mixture of old and new concepts for extra_fraction of the original budget.
ModelState sequential_update(const ModelState& state, const Registry& registry, const FrozenBackend& backend,
                             const std::vector<std::string>& new_concepts, double extra_fraction = 0.10,
                             const TrainHooks& hooks = {});

struct GradientAuditReport {
  std::map<std::string, double> group_error;
  std::map<std::string, int> sampled;
  double max_rel_error = 0.0;

  nlohmann::json to_json() const;
};

/// Central finite differences on `per_group` sampled entries of every trainable group.
GradientAuditReport gradient_audit(ModelState& state, const FrozenBackend& backend, const Registry& registry,
                                   const TrainBatch& batch, int per_group = 12, double h = 1e-5,
                                   std::uint64_t seed = 0);

// ---------------------------------------------------------------- watermarked generation

struct GenerationRequest {
  std::string prompt;
  std::vector<std::string> concept_ids;  // watermarked concepts, each must appear in the prompt
  Tensor z;
  /// Token weight applied to style concepts after perturbation (1 disables it).
  double style_alpha = 1.0;
};

/// Watermarked images with the concepts' registry secrets, one per request.
std::vector<Tensor> generate_watermarked(const ModelState& state, const FrozenBackend& backend,
                                         const Registry& registry, const std::vector<GenerationRequest>& requests);
/// Unperturbed counterparts of the same requests.
std::vector<Tensor> generate_clean(const ModelState& state, const FrozenBackend& backend,
                                   const std::vector<GenerationRequest>& requests);

/// Prompt rendered from the evaluation share of the template bank.
std::string heldout_prompt(const TrainConfig& cfg, const Registry& registry, const std::vector<std::string>& ids,
                           std::uint64_t seed);

// ---------------------------------------------------------------- checkpoints

void save_checkpoint(const ModelState& state, const std::filesystem::path& dir);
ModelState load_checkpoint(const std::filesystem::path& dir);
/// Digest over the manifest and every blob of a checkpoint directory.
std::string checkpoint_digest(const std::filesystem::path& dir);

/// Little-endian float32 records: magic, count, then {name, rank, dims, data} per tensor.
void write_tensor_blob(const std::filesystem::path& path, const std::vector<std::pair<std::string, Tensor>>& tensors);
std::vector<std::pair<std::string, Tensor>> read_tensor_blob(const std::filesystem::path& path);

}  // namespace conceptmark
