#include "conceptmark/encoding.hpp"

#include <algorithm>
#include <random>

#include "conceptmark/error.hpp"

namespace conceptmark {

namespace {

void add_mlp(nn::ParamGroup& group, int in, int hidden, int out, std::mt19937_64& rng) {
  nn::add_linear(group, "fc1", in, hidden, rng);
  nn::add_linear(group, "fc2", hidden, hidden, rng);
  nn::add_linear(group, "out", hidden, out, rng, 1.0, /*zero=*/true);
}

Var run_mlp(const nn::Binder& bind, Var x) {
  Var h = ad::silu(nn::apply_linear(bind, "fc1", x));
  h = ad::silu(nn::apply_linear(bind, "fc2", h));
  return nn::apply_linear(bind, "out", h);
}

int input_width(const nn::ParamGroup& group) { return group.get("fc1.w").value.dim(1); }

}  // namespace

std::vector<double> PromptEmbedding::row(int i) const {
  require(i >= 0 && i < length(), ErrorCode::IndexOutOfRange, "token row " + std::to_string(i));
  const auto d = static_cast<std::size_t>(dim());
  auto first = tokens.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(i) * d);
  return {first, first + static_cast<std::ptrdiff_t>(d)};
}

int PromptEmbedding::position_of(const std::string& concept_id) const {
  auto it = target_positions.find(concept_id);
  require(it != target_positions.end(), ErrorCode::UnknownTargetPosition,
          "concept '" + concept_id + "' has no token in the prompt");
  return it->second;
}

nn::ParamGroup make_concept_encoder(const EncodingConfig& cfg, std::uint64_t seed) {
  nn::ParamGroup g("concept_encoder");
  std::mt19937_64 rng(seed);
  add_mlp(g, cfg.embedding_dim + cfg.n_bits, cfg.hidden(), cfg.embedding_dim, rng);
  return g;
}

nn::ParamGroup make_secret_mapper(const EncodingConfig& cfg, std::uint64_t seed) {
  nn::ParamGroup g("secret_mapper");
  std::mt19937_64 rng(seed);
  add_mlp(g, cfg.n_bits, cfg.hidden(), static_cast<int>(cfg.latent_numel()), rng);
  return g;
}

Tensor signed_secret_rows(const std::vector<Secret>& secrets) {
  require(!secrets.empty(), ErrorCode::DimensionMismatch, "no secrets");
  const int n = secrets.front().length();
  Tensor t({static_cast<int>(secrets.size()), n});
  for (std::size_t r = 0; r < secrets.size(); ++r) {
    require(secrets[r].length() == n, ErrorCode::DimensionMismatch, "secrets of different lengths");
    const auto v = secrets[r].signed_values();
    std::copy(v.begin(), v.end(), t.data.begin() + static_cast<std::ptrdiff_t>(r * static_cast<std::size_t>(n)));
  }
  return t;
}

Var concept_encoder_forward(const nn::Binder& bind, const EncodingConfig& cfg, Var e_c, Var secrets) {
  require(e_c.value().rank() == 2 && e_c.shape()[1] == cfg.embedding_dim, ErrorCode::DimensionMismatch,
          "concept embedding " + ad::shape_str(e_c.shape()) + ", expected width " +
              std::to_string(cfg.embedding_dim));
  require(secrets.value().rank() == 2 && secrets.shape()[1] == cfg.n_bits && secrets.shape()[0] == e_c.shape()[0],
          ErrorCode::DimensionMismatch, "secret rows " + ad::shape_str(secrets.shape()));
  return run_mlp(bind, ad::concat_cols(e_c, secrets));
}

Var secret_mapper_forward(const nn::Binder& bind, const EncodingConfig& cfg, Var secrets) {
  require(secrets.value().rank() == 2 && secrets.shape()[1] == cfg.n_bits, ErrorCode::DimensionMismatch,
          "secret rows " + ad::shape_str(secrets.shape()) + ", expected width " + std::to_string(cfg.n_bits));
  Var flat = run_mlp(bind, secrets);
  if (cfg.mapper_gain != 1.0) flat = ad::scale(flat, cfg.mapper_gain);
  ad::Shape shape{secrets.shape()[0]};
  shape.insert(shape.end(), cfg.latent_shape.begin(), cfg.latent_shape.end());
  return ad::reshape(flat, shape);
}

std::vector<double> concept_encoder_delta(const nn::ParamGroup& params, const EncodingConfig& cfg,
                                          const std::vector<double>& e_c, const Secret& secret) {
  require(static_cast<int>(e_c.size()) == cfg.embedding_dim && secret.length() == cfg.n_bits &&
              input_width(params) == cfg.embedding_dim + cfg.n_bits,
          ErrorCode::DimensionMismatch, "concept encoder input dimensions");
  ad::Graph g;
  nn::Binder bind(g, params);
  Var out = concept_encoder_forward(bind, cfg, g.constant(Tensor({1, cfg.embedding_dim}, e_c)),
                                    g.constant(signed_secret_rows({secret})));
  return out.value().data;
}

Tensor secret_mapper_delta(const nn::ParamGroup& params, const EncodingConfig& cfg, const Secret& secret) {
  require(secret.length() == cfg.n_bits && input_width(params) == cfg.n_bits, ErrorCode::DimensionMismatch,
          "secret length " + std::to_string(secret.length()) + ", expected " + std::to_string(cfg.n_bits));
  ad::Graph g;
  nn::Binder bind(g, params);
  Var out = secret_mapper_forward(bind, cfg, g.constant(signed_secret_rows({secret})));
  return Tensor(cfg.latent_shape, out.value().data);
}

PromptEmbedding perturb_prompt(const PromptEmbedding& prompt, const EncodingConfig& cfg,
                               const std::map<std::string, EncoderAssignment>& assignments) {
  PromptEmbedding out = prompt;
  const auto d = static_cast<std::size_t>(prompt.dim());
  for (const auto& [id, a] : assignments) {
    require(a.params != nullptr, ErrorCode::InvalidParameter, "assignment without encoder parameters");
    const int pos = prompt.position_of(id);
    // The encoder reads the unperturbed row even when several concepts are assigned.
    const auto delta = concept_encoder_delta(*a.params, cfg, prompt.row(pos), a.secret);
    for (std::size_t c = 0; c < d; ++c) out.tokens[static_cast<std::size_t>(pos) * d + c] += delta[c];
  }
  return out;
}

Tensor perturb_noise(const Tensor& z, const std::vector<Tensor>& deltas) {
  for (const auto& delta : deltas)
    require(delta.shape == z.shape, ErrorCode::ShapeMismatch,
            "noise delta " + ad::shape_str(delta.shape) + " vs latent " + ad::shape_str(z.shape));
  // Summing in a canonical order keeps the result independent of argument order, bit for bit.
  std::vector<const Tensor*> order;
  for (const auto& delta : deltas) order.push_back(&delta);
  std::sort(order.begin(), order.end(), [](const Tensor* a, const Tensor* b) { return a->data < b->data; });
  Tensor total(z.shape);
  for (const Tensor* delta : order)
    for (std::size_t i = 0; i < total.numel(); ++i) total[i] += (*delta)[i];
  Tensor out = z;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += total[i];
  return out;
}

PromptEmbedding apply_prompt_weight(const PromptEmbedding& prompt, int position, double alpha) {
  require(position >= 0 && position < prompt.length(), ErrorCode::IndexOutOfRange,
          "weighted position " + std::to_string(position) + " outside prompt of length " +
              std::to_string(prompt.length()));
  require(alpha > 0.0, ErrorCode::NonPositiveAlpha, "alpha must be positive");
  PromptEmbedding out = prompt;
  const auto d = static_cast<std::size_t>(prompt.dim());
  for (std::size_t c = 0; c < d; ++c) out.tokens[static_cast<std::size_t>(position) * d + c] *= alpha;
  return out;
}

}  // namespace conceptmark
