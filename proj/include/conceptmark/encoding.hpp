#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "conceptmark/autodiff.hpp"
#include "conceptmark/nn.hpp"
#include "conceptmark/registry.hpp"

namespace conceptmark {

using ad::Tensor;
using ad::Var;

/// Embedded prompt: one row per whitespace token plus the rows that carry registered concepts.
struct PromptEmbedding {
  std::vector<std::string> words;
  Tensor tokens;  // [L, d]
  std::map<std::string, int> target_positions;

  int length() const { return tokens.rank() == 2 ? tokens.dim(0) : 0; }
  int dim() const { return tokens.rank() == 2 ? tokens.dim(1) : 0; }
  std::vector<double> row(int i) const;
  int position_of(const std::string& concept_id) const;

  bool operator==(const PromptEmbedding&) const = default;
};

struct EncodingConfig {
  int embedding_dim = 32;
  int n_bits = 16;
  int hidden_width_multiplier = 4;
  double mapper_gain = 1.0;
  ad::Shape latent_shape{3, 16, 16};

  int hidden() const { return hidden_width_multiplier * embedding_dim; }
  std::size_t latent_numel() const { return ad::shape_numel(latent_shape); }
};

/// f_enc: (e_c, secret) -> delta, 2 hidden layers, zero-initialized output layer.
nn::ParamGroup make_concept_encoder(const EncodingConfig& cfg, std::uint64_t seed);
/// f_map: secret -> latent-shaped delta, 2 hidden layers, zero-initialized output layer.
nn::ParamGroup make_secret_mapper(const EncodingConfig& cfg, std::uint64_t seed);

/// Rows of signed secrets [N, n_bits] from 0/1 secrets.
Tensor signed_secret_rows(const std::vector<Secret>& secrets);

/// e_c [N, d], signed secrets [N, n] -> delta [N, d].
Var concept_encoder_forward(const nn::Binder& bind, const EncodingConfig& cfg, Var e_c, Var secrets);
/// signed secrets [N, n] -> delta [N, C, H, W], scaled by mapper_gain.
Var secret_mapper_forward(const nn::Binder& bind, const EncodingConfig& cfg, Var secrets);

std::vector<double> concept_encoder_delta(const nn::ParamGroup& params, const EncodingConfig& cfg,
                                          const std::vector<double>& e_c, const Secret& secret);
Tensor secret_mapper_delta(const nn::ParamGroup& params, const EncodingConfig& cfg, const Secret& secret);

struct EncoderAssignment {
  const nn::ParamGroup* params = nullptr;
  Secret secret;
};

/// out[i] = E[i] + f_enc(E[i], S_c) at the target row of each assigned concept.
PromptEmbedding perturb_prompt(const PromptEmbedding& prompt, const EncodingConfig& cfg,
                               const std::map<std::string, EncoderAssignment>& assignments);

/// z + sum(deltas), exactly invariant to the order of deltas.
Tensor perturb_noise(const Tensor& z, const std::vector<Tensor>& deltas);

/// Multiplies one token row by alpha.
PromptEmbedding apply_prompt_weight(const PromptEmbedding& prompt, int position, double alpha);

}  // namespace conceptmark
