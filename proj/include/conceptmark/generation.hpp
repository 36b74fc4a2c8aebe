#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "conceptmark/autodiff.hpp"
#include "conceptmark/encoding.hpp"
#include "conceptmark/nn.hpp"
#include "conceptmark/registry.hpp"
#include "json.hpp"

namespace conceptmark {

/// Stand-in for a text encoder's embedding layer. Every vector is a deterministic
/// function of (table seed, token), so the table is reproducible from its word list.
class TokenEmbeddingTable {
 public:
  TokenEmbeddingTable() = default;
  TokenEmbeddingTable(int dim, std::uint64_t seed);

  void add_word(const std::string& word);
  void add_concept(const ConceptRecord& record);
  void add_registry(const Registry& registry);

  int dim() const { return dim_; }
  std::uint64_t seed() const { return seed_; }
  bool contains(const std::string& token) const { return vectors_.count(token) > 0; }
  /// Vector of a token; unknown tokens share the OOV vector.
  const std::vector<double>& lookup(const std::string& token) const;
  const std::vector<double>& oov() const { return oov_; }
  /// Embedding of a registered concept's token.
  const std::vector<double>& concept_embedding(const std::string& concept_id) const;
  /// Concept id carried by a token, or empty.
  std::string concept_of(const std::string& token) const;
  std::size_t vocabulary_size() const { return vectors_.size(); }

  nlohmann::json to_json() const;
  static TokenEmbeddingTable from_json(const nlohmann::json& j);

 private:
  std::vector<double> make_vector(const std::string& token) const;

  int dim_ = 0;
  std::uint64_t seed_ = 0;
  std::map<std::string, std::vector<double>> vectors_;
  std::map<std::string, std::string> token_concepts_;
  std::map<std::string, std::string> concept_tokens_;
  std::vector<double> oov_;
};

/// Table holding every word of the built-in template banks.
TokenEmbeddingTable make_base_table(int dim, std::uint64_t seed);

/// Lower-cases plain words and strips trailing punctuation. Angle-bracket tokens are kept verbatim.
std::string normalize_word(const std::string& word);

PromptEmbedding embed_prompt(const std::string& prompt, const TokenEmbeddingTable& table);

// ---------------------------------------------------------------- synthetic concept world

/// Rendering factors available to object (shape) and style (palette and texture) concepts.
const std::vector<std::string>& known_shapes();
const std::vector<std::string>& known_styles();

struct SyntheticWorldConfig {
  int image_size = 32;
  std::vector<std::string> shapes{"circle", "square", "triangle", "cross", "ring", "diamond"};
  std::vector<std::string> styles{"red-stripes", "blue-dots", "green-checker", "amber-waves", "violet-grid",
                                  "teal-solid"};
  int samples_per_concept = 24;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Object-shape mask filled with a style texture over the style's background colour.
Tensor render_concept_image(const std::string& shape, const std::string& style, int size, std::mt19937_64& rng);

/// Registers "<shape>" object and "<style>" style concepts in order.
void register_world_concepts(Registry& registry, const std::vector<std::string>& shapes,
                             const std::vector<std::string>& styles);

struct SyntheticSample {
  Tensor image;  // [3, H, W]
  std::vector<std::string> concept_ids;
  std::string prompt;
};

/// Single-object, single-style and object+style samples for every concept of the registry
/// that maps onto a world factor. Rendering fills unnamed factors from the full world.
std::vector<SyntheticSample> build_synthetic_dataset(const SyntheticWorldConfig& cfg, const Registry& registry);

// ---------------------------------------------------------------- generator backend

/// DM(z, E) -> image. Implementations must be deterministic and differentiable in z and E.
class GeneratorBackend {
 public:
  virtual ~GeneratorBackend() = default;
  virtual ad::Shape latent_shape() const = 0;
  virtual ad::Shape image_shape() const = 0;
  virtual int max_steps() const = 0;
  /// z [N, C, h, w]; one [L_i, d] token matrix per item -> images [N, 3, H, W] in [0, 1].
  virtual Var generate(ad::Graph& g, Var z, const std::vector<Var>& prompts, int steps) const = 0;
};

struct GeneratorConfig {
  int embedding_dim = 32;
  int channels = 16;
  int blocks = 1;
  int cond_hidden = 64;
  ad::Shape latent_shape{3, 16, 16};
  int image_size = 32;
  /// Cumulative signal level (alpha-bar) of each sampler step, noisiest first.
  std::vector<double> alpha_bars{0.0, 0.35, 0.7, 0.92};

  nlohmann::json to_json() const;
  static GeneratorConfig from_json(const nlohmann::json& j);
};

/// Small conditional denoiser sampled with a deterministic x0-predicting DDIM loop.
class ToyGenerator : public GeneratorBackend {
 public:
  ToyGenerator() = default;
  ToyGenerator(GeneratorConfig cfg, std::uint64_t seed);

  ad::Shape latent_shape() const override { return cfg_.latent_shape; }
  ad::Shape image_shape() const override { return {3, cfg_.image_size, cfg_.image_size}; }
  int max_steps() const override { return static_cast<int>(cfg_.alpha_bars.size()); }
  Var generate(ad::Graph& g, Var z, const std::vector<Var>& prompts, int steps) const override;

  /// x0 prediction from x_t at schedule index `step`; cond is the pooled prompt [N, d].
  Var denoise(const nn::Binder& bind, Var x_t, Var cond, int step) const;
  /// Pooled prompt conditioning [N, d].
  Var pool(ad::Graph& g, const std::vector<Var>& prompts) const;
  /// Schedule indices used by a sampler run of `steps` steps.
  std::vector<int> schedule(int steps) const;

  const GeneratorConfig& config() const { return cfg_; }
  nn::ParamGroup& params() { return params_; }
  const nn::ParamGroup& params() const { return params_; }

 private:
  GeneratorConfig cfg_;
  nn::ParamGroup params_{"generator"};
};

/// Standard-normal latent drawn from a seed.
Tensor sample_latent(const ad::Shape& shape, std::uint64_t seed);

/// Single-image generation, [C, h, w] latent -> [3, H, W] image.
Tensor generate(const GeneratorBackend& backend, const Tensor& z, const PromptEmbedding& prompt, int steps);
/// Batched generation without gradient tracking.
Tensor generate_batch(const GeneratorBackend& backend, const std::vector<Tensor>& zs,
                      const std::vector<PromptEmbedding>& prompts, int steps);
/// The unperturbed generation DM(z, E) used as I_clean.
inline Tensor clean_counterpart(const GeneratorBackend& backend, const Tensor& z, const PromptEmbedding& prompt,
                                int steps) {
  return generate(backend, z, prompt, steps);
}

struct PretrainConfig {
  int iterations = 1500;
  int batch_size = 16;
  double learning_rate = 2e-3;
  std::uint64_t seed = 0;
};

/// Trains the denoiser on x0 reconstruction with a cosine learning-rate decay.
/// Returns the per-step loss. Throws DivergenceDetected.
std::vector<double> pretrain_generator(ToyGenerator& generator, const std::vector<SyntheticSample>& dataset,
                                       const TokenEmbeddingTable& table, const PretrainConfig& cfg);

// ---------------------------------------------------------------- image files

/// [3, H, W] in [0, 1] -> 8-bit RGB PNG.
void save_png(const Tensor& image, const std::filesystem::path& path);
/// Any 8-bit colour image -> [3, H, W] in [0, 1].
Tensor load_image(const std::filesystem::path& path);
/// 8-bit quantization used by the PNG path.
Tensor quantize8(const Tensor& image);

}  // namespace conceptmark
