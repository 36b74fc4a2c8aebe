#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "conceptmark/autodiff.hpp"
#include "conceptmark/generation.hpp"
#include "conceptmark/nn.hpp"
#include "conceptmark/registry.hpp"
#include "json.hpp"

namespace conceptmark {

struct ImageFeatures {
  Var patches;   // [N, P, d_img]
  Var style;     // [N, d_style], channel statistics of early activations
  Var semantic;  // [N, d_img], mean of the patch features
};

/// Frozen image and text feature extractors.
class FeatureBackbone {
 public:
  virtual ~FeatureBackbone() = default;
  virtual int image_dim() const = 0;
  virtual int text_dim() const = 0;
  virtual int style_dim() const = 0;
  virtual ad::Shape image_shape() const = 0;
  /// images [N, 3, H, W]. Throws BackboneFailure on malformed input.
  virtual ImageFeatures image_features(ad::Graph& g, Var images) const = 0;
  /// Token features [1, L, d_txt] of a text.
  virtual Var text_features(ad::Graph& g, const std::string& text) const = 0;
};

struct BackboneConfig {
  int embedding_dim = 32;
  int c1 = 12;
  int c2 = 24;
  int c3 = 32;
  int text_dim = 32;
  int image_size = 32;

  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

/// Three strided convolutions over the image and a token-averaging text encoder
/// feat_i = SiLU(W [e_i; mean(e)] + b).
class ToyBackbone : public FeatureBackbone {
 public:
  ToyBackbone() = default;
  ToyBackbone(BackboneConfig cfg, std::shared_ptr<const TokenEmbeddingTable> table, std::uint64_t seed);

  int image_dim() const override { return cfg_.c3; }
  int text_dim() const override { return cfg_.text_dim; }
  int style_dim() const override { return 2 * cfg_.c1; }
  ad::Shape image_shape() const override { return {3, cfg_.image_size, cfg_.image_size}; }
  ImageFeatures image_features(ad::Graph& g, Var images) const override;
  Var text_features(ad::Graph& g, const std::string& text) const override;

  /// Same as the overrides but bound through an explicit binder (used while pretraining).
  ImageFeatures image_features(const nn::Binder& bind, Var images) const;
  Var text_features(const nn::Binder& bind, const PromptEmbedding& prompt) const;

  const BackboneConfig& config() const { return cfg_; }
  const TokenEmbeddingTable& table() const { return *table_; }
  std::shared_ptr<const TokenEmbeddingTable> table_ptr() const { return table_; }
  nn::ParamGroup& params() { return params_; }
  const nn::ParamGroup& params() const { return params_; }

 private:
  BackboneConfig cfg_;
  std::shared_ptr<const TokenEmbeddingTable> table_;
  nn::ParamGroup params_{"backbone"};
};

struct BackbonePretrainConfig {
  int iterations = 300;
  int batch_size = 16;
  double learning_rate = 2e-3;
  double temperature = 0.1;
  std::uint64_t seed = 0;
};

/// Symmetric image-text InfoNCE on (image, prompt) pairs. Returns the per-step loss.
std::vector<double> pretrain_backbone(ToyBackbone& backbone, const std::vector<SyntheticSample>& dataset,
                                      const BackbonePretrainConfig& cfg);

// ---------------------------------------------------------------- query retriever

struct RetrievalConfig {
  int image_dim = 32;
  int text_dim = 32;
  int embedding_dim = 32;
  int n_bits = 16;
  int attn_dim = 32;
  int ffn_multiplier = 2;

  nlohmann::json to_json() const;
  static RetrievalConfig from_json(const nlohmann::json& j);
};

/// proj1, single-head cross-attention block (text queries over image patches), proj2.
nn::ParamGroup make_retrieval_params(const RetrievalConfig& cfg, std::uint64_t seed);
/// Linear secret decoder d -> n_bits.
nn::ParamGroup make_decoder_params(const RetrievalConfig& cfg, std::uint64_t seed);

/// patches [1, P, d_img], text [1, L, d_txt] -> predicted concept embedding [1, d].
Var retrieval_forward(const nn::Binder& bind, const RetrievalConfig& cfg, Var patches, Var text);
/// embeddings [N, d] -> logits [N, n_bits].
Var decode_secret(const nn::Binder& bind, Var embeddings);
std::vector<double> decode_secret(const nn::ParamGroup& decoder, const std::vector<double>& embedding);

/// bit_i = 1 iff sigmoid(logit_i) > threshold; ties go to 0.
Secret binarize(const std::vector<double>& logits, double threshold = 0.5);

/// Read-only view of the pieces that turn (image, query) into a secret.
struct RetrievalModel {
  const FeatureBackbone* backbone = nullptr;
  const nn::ParamGroup* params = nullptr;
  const nn::ParamGroup* decoder = nullptr;
  RetrievalConfig cfg;
};

struct Retrieved {
  std::vector<double> embedding;
  std::vector<double> logits;
};

/// Predicted embedding and logits for every image under one query.
std::vector<Retrieved> retrieve(const RetrievalModel& model, const std::vector<Tensor>& images,
                                const std::string& query);
std::vector<double> query_embedding(const RetrievalModel& model, const Tensor& image, const std::string& query);

struct AttributionResult {
  std::string concept_id;
  Secret retrieved;
  double bit_accuracy = 0.0;
  bool match = false;
  double tau = 0.875;
  std::vector<double> predicted_embedding;

  nlohmann::json to_json() const;
};

double bit_accuracy(const Secret& a, const Secret& b);

AttributionResult make_attribution(const std::string& concept_id, const Secret& truth, const Retrieved& r,
                                   double tau);
AttributionResult attribute(const RetrievalModel& model, const Registry& registry, const Tensor& image,
                            const std::string& concept_id, double tau = 0.875);
/// One attribution per image, sharing a single batched backbone pass.
std::vector<AttributionResult> attribute_images(const RetrievalModel& model, const Registry& registry,
                                                const std::vector<Tensor>& images, const std::string& concept_id,
                                                double tau = 0.875);
std::vector<AttributionResult> attribute_multi(const RetrievalModel& model, const Registry& registry,
                                               const Tensor& image, const std::vector<std::string>& concept_ids,
                                               double tau = 0.875);

/// Mean distance between embeddings of different concepts over mean distance between
/// distinct embeddings of the same concept. Capped at `cap` when the latter vanishes.
double separation_ratio(const std::vector<std::vector<std::vector<double>>>& embeddings_by_concept,
                        double cap = 1e6);
double embedding_separation(const RetrievalModel& model, const Registry& registry,
                            const std::map<std::string, std::vector<Tensor>>& images_by_concept);

}  // namespace conceptmark
