#include "conceptmark/retrieval.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <random>

#include "conceptmark/error.hpp"

namespace conceptmark {

using nlohmann::json;

json BackboneConfig::to_json() const {
  return {{"embedding_dim", embedding_dim}, {"c1", c1}, {"c2", c2}, {"c3", c3},
          {"text_dim", text_dim}, {"image_size", image_size}};
}

BackboneConfig BackboneConfig::from_json(const json& j) {
  BackboneConfig c;
  try {
    c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
    c.c1 = j.value("c1", c.c1);
    c.c2 = j.value("c2", c.c2);
    c.c3 = j.value("c3", c.c3);
    c.text_dim = j.value("text_dim", c.text_dim);
    c.image_size = j.value("image_size", c.image_size);
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, std::string("backbone config: ") + e.what());
  }
  return c;
}

ToyBackbone::ToyBackbone(BackboneConfig cfg, std::shared_ptr<const TokenEmbeddingTable> table, std::uint64_t seed)
    : cfg_(cfg), table_(std::move(table)) {
  require(table_ != nullptr, ErrorCode::ConfigError, "backbone needs a token table");
  require(table_->dim() == cfg_.embedding_dim, ErrorCode::DimensionMismatch,
          "token table width does not match the backbone embedding dim");
  require(cfg_.image_size % 4 == 0 && cfg_.image_size >= 8, ErrorCode::ConfigError,
          "backbone image size must be a multiple of 4");
  std::mt19937_64 rng(seed);
  nn::add_conv(params_, "conv1", 3, cfg_.c1, 3, rng, 1.4);
  nn::add_conv(params_, "conv2", cfg_.c1, cfg_.c2, 3, rng, 1.4);
  nn::add_conv(params_, "conv3", cfg_.c2, cfg_.c3, 3, rng, 1.0);
  nn::add_linear(params_, "text", 2 * cfg_.embedding_dim, cfg_.text_dim, rng, 1.4);
  // Heads used only by contrastive pretraining.
  nn::add_linear(params_, "clip.img", cfg_.c3, cfg_.text_dim, rng);
  nn::add_linear(params_, "clip.txt", cfg_.text_dim, cfg_.text_dim, rng);
}

ImageFeatures ToyBackbone::image_features(ad::Graph& g, Var images) const {
  return image_features(nn::Binder(g, params_), images);
}

ImageFeatures ToyBackbone::image_features(const nn::Binder& bind, Var images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != cfg_.image_size || s[3] != cfg_.image_size)
    fail(ErrorCode::BackboneFailure, "backbone expects images [N, 3, " + std::to_string(cfg_.image_size) + ", " +
                                         std::to_string(cfg_.image_size) + "], got " + ad::shape_str(s));
  for (double v : images.value().data)
    if (!std::isfinite(v)) fail(ErrorCode::BackboneFailure, "non-finite pixel passed to the backbone");
  Var x = ad::add_scalar(ad::scale(images, 2.0), -1.0);
  Var h1 = ad::silu(nn::apply_conv(bind, "conv1", x, 2, 1));
  Var style = ad::concat_cols(ad::spatial_mean(h1), ad::spatial_std(h1));
  Var h2 = ad::silu(nn::apply_conv(bind, "conv2", h1, 2, 1));
  Var h3 = nn::apply_conv(bind, "conv3", h2, 1, 1);
  Var patches = ad::to_sequence(h3);
  return {patches, style, ad::mean_axis1(patches)};
}

namespace {

// [L, 2d] rows [e_i ; mean(e)].
Tensor text_input(const PromptEmbedding& prompt) {
  const int L = prompt.length(), d = prompt.dim();
  std::vector<double> mean(static_cast<std::size_t>(d), 0.0);
  for (int i = 0; i < L; ++i)
    for (int c = 0; c < d; ++c) mean[static_cast<std::size_t>(c)] += prompt.tokens[static_cast<std::size_t>(i * d + c)];
  for (double& v : mean) v /= L;
  Tensor out({1, L, 2 * d});
  for (int i = 0; i < L; ++i)
    for (int c = 0; c < d; ++c) {
      out[static_cast<std::size_t>(i * 2 * d + c)] = prompt.tokens[static_cast<std::size_t>(i * d + c)];
      out[static_cast<std::size_t>(i * 2 * d + d + c)] = mean[static_cast<std::size_t>(c)];
    }
  return out;
}

}  // namespace

Var ToyBackbone::text_features(const nn::Binder& bind, const PromptEmbedding& prompt) const {
  return ad::silu(nn::apply_linear(bind, "text", bind.graph().constant(text_input(prompt))));
}

Var ToyBackbone::text_features(ad::Graph& g, const std::string& text) const {
  return text_features(nn::Binder(g, params_), embed_prompt(text, *table_));
}

std::vector<double> pretrain_backbone(ToyBackbone& backbone, const std::vector<SyntheticSample>& dataset,
                                      const BackbonePretrainConfig& cfg) {
  require(dataset.size() >= 2, ErrorCode::InsufficientData, "contrastive pretraining needs at least two samples");
  require(cfg.iterations > 0 && cfg.batch_size >= 2 && cfg.learning_rate > 0.0 && cfg.temperature > 0.0,
          ErrorCode::ConfigError, "invalid backbone pretraining config");
  std::vector<PromptEmbedding> prompts;
  prompts.reserve(dataset.size());
  for (const auto& s : dataset) prompts.push_back(embed_prompt(s.prompt, backbone.table()));

  std::mt19937_64 rng(cfg.seed);
  nn::Adam opt;
  std::vector<double> losses;
  const int B = std::min<int>(cfg.batch_size, static_cast<int>(dataset.size()));
  const int D = backbone.text_dim();
  std::vector<std::size_t> order(dataset.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (int it = 0; it < cfg.iterations; ++it) {
    // Distinct prompts per batch keep the contrastive targets unambiguous.
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<std::size_t> pick;
    std::vector<std::string> seen;
    for (std::size_t k : order) {
      if (std::find(seen.begin(), seen.end(), dataset[k].prompt) != seen.end()) continue;
      seen.push_back(dataset[k].prompt);
      pick.push_back(k);
      if (static_cast<int>(pick.size()) == B) break;
    }
    const int n = static_cast<int>(pick.size());
    require(n >= 2, ErrorCode::InsufficientData, "contrastive pretraining needs two distinct prompts");

    backbone.params().zero_grad();
    ad::Graph g;
    nn::Binder bind(g, backbone.params(), true);
    std::vector<Var> imgs, txts;
    for (std::size_t k : pick) {
      imgs.push_back(g.constant(dataset[k].image));
      txts.push_back(ad::mean_axis1(backbone.text_features(bind, prompts[k])));
    }
    Var sem = backbone.image_features(bind, ad::stack(imgs)).semantic;
    Var ei = ad::l2_normalize_rows(nn::apply_linear(bind, "clip.img", sem));
    Var et = ad::l2_normalize_rows(nn::apply_linear(bind, "clip.txt", ad::reshape(ad::stack(txts), {n, D})));
    Var li = ad::reshape(ad::bmm_bt(ad::reshape(ei, {1, n, D}), ad::reshape(et, {1, n, D})), {n, n});
    Var lt = ad::reshape(ad::bmm_bt(ad::reshape(et, {1, n, D}), ad::reshape(ei, {1, n, D})), {n, n});
    std::vector<int> labels(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) labels[static_cast<std::size_t>(i)] = i;
    Var loss = ad::scale(ad::add(ad::cross_entropy_rows(ad::scale(li, 1.0 / cfg.temperature), labels),
                                 ad::cross_entropy_rows(ad::scale(lt, 1.0 / cfg.temperature), labels)),
                         0.5);
    const double value = loss.value()[0];
    require(std::isfinite(value), ErrorCode::DivergenceDetected,
            "backbone pretraining loss became non-finite at step " + std::to_string(it));
    g.backward(loss);
    nn::clip_grad_norm({&backbone.params()}, 1.0);
    const double progress = static_cast<double>(it) / cfg.iterations;
    opt.step({&backbone.params()}, cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    losses.push_back(value);
  }
  return losses;
}

// ---------------------------------------------------------------- query retriever

json RetrievalConfig::to_json() const {
  return {{"image_dim", image_dim}, {"text_dim", text_dim},   {"embedding_dim", embedding_dim},
          {"n_bits", n_bits},       {"attn_dim", attn_dim},   {"ffn_multiplier", ffn_multiplier}};
}

RetrievalConfig RetrievalConfig::from_json(const json& j) {
  RetrievalConfig c;
  try {
    c.image_dim = j.at("image_dim").get<int>();
    c.text_dim = j.at("text_dim").get<int>();
    c.embedding_dim = j.at("embedding_dim").get<int>();
    c.n_bits = j.at("n_bits").get<int>();
    c.attn_dim = j.at("attn_dim").get<int>();
    c.ffn_multiplier = j.at("ffn_multiplier").get<int>();
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, std::string("retrieval config: ") + e.what());
  }
  return c;
}

nn::ParamGroup make_retrieval_params(const RetrievalConfig& cfg, std::uint64_t seed) {
  require(cfg.image_dim > 0 && cfg.text_dim > 0 && cfg.embedding_dim > 0 && cfg.attn_dim > 0 &&
              cfg.ffn_multiplier > 0,
          ErrorCode::ConfigError, "retrieval widths must be positive");
  std::mt19937_64 rng(seed);
  nn::ParamGroup p("retrieval");
  nn::add_linear(p, "proj1", cfg.image_dim, cfg.text_dim, rng);
  nn::add_linear(p, "attn.q", cfg.text_dim, cfg.attn_dim, rng);
  nn::add_linear(p, "attn.k", cfg.text_dim, cfg.attn_dim, rng);
  nn::add_linear(p, "attn.v", cfg.text_dim, cfg.attn_dim, rng);
  nn::add_linear(p, "attn.o", cfg.attn_dim, cfg.text_dim, rng);
  nn::add_linear(p, "ffn.fc1", cfg.text_dim, cfg.ffn_multiplier * cfg.text_dim, rng, 1.4);
  nn::add_linear(p, "ffn.fc2", cfg.ffn_multiplier * cfg.text_dim, cfg.text_dim, rng);
  nn::add_linear(p, "proj2", cfg.text_dim, cfg.embedding_dim, rng);
  return p;
}

nn::ParamGroup make_decoder_params(const RetrievalConfig& cfg, std::uint64_t seed) {
  require(cfg.n_bits > 0 && cfg.embedding_dim > 0, ErrorCode::ConfigError, "decoder widths must be positive");
  std::mt19937_64 rng(seed);
  nn::ParamGroup p("decoder");
  nn::add_linear(p, "fc", cfg.embedding_dim, cfg.n_bits, rng);
  return p;
}

Var retrieval_forward(const nn::Binder& bind, const RetrievalConfig& cfg, Var patches, Var text) {
  const auto& ps = patches.shape();
  const auto& ts = text.shape();
  if (ps.size() != 3 || ps[2] != cfg.image_dim)
    fail(ErrorCode::DimensionMismatch, "patch features " + ad::shape_str(ps) + " do not match image_dim " +
                                           std::to_string(cfg.image_dim));
  if (ts.size() != 3 || ts[2] != cfg.text_dim || ts[0] != ps[0])
    fail(ErrorCode::DimensionMismatch, "text features " + ad::shape_str(ts) + " do not match text_dim " +
                                           std::to_string(cfg.text_dim));
  Var kv = nn::apply_linear(bind, "proj1", patches);
  Var q = nn::apply_linear(bind, "attn.q", text);
  Var k = nn::apply_linear(bind, "attn.k", kv);
  Var v = nn::apply_linear(bind, "attn.v", kv);
  Var att = ad::softmax(ad::scale(ad::bmm_bt(q, k), 1.0 / std::sqrt(static_cast<double>(cfg.attn_dim))));
  Var h = ad::add(text, nn::apply_linear(bind, "attn.o", ad::bmm(att, v)));
  h = ad::add(h, nn::apply_linear(bind, "ffn.fc2", ad::silu(nn::apply_linear(bind, "ffn.fc1", h))));
  return nn::apply_linear(bind, "proj2", ad::mean_axis1(h));
}

Var decode_secret(const nn::Binder& bind, Var embeddings) { return nn::apply_linear(bind, "fc", embeddings); }

std::vector<double> decode_secret(const nn::ParamGroup& decoder, const std::vector<double>& embedding) {
  const Tensor& w = decoder.get("fc.w").value;
  const Tensor& b = decoder.get("fc.b").value;
  require(static_cast<int>(embedding.size()) == w.dim(1), ErrorCode::DimensionMismatch,
          "embedding width does not match the decoder");
  std::vector<double> out(static_cast<std::size_t>(w.dim(0)));
  for (int o = 0; o < w.dim(0); ++o) {
    double acc = b[static_cast<std::size_t>(o)];
    for (int i = 0; i < w.dim(1); ++i) acc += w[static_cast<std::size_t>(o * w.dim(1) + i)] * embedding[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(o)] = acc;
  }
  return out;
}

Secret binarize(const std::vector<double>& logits, double threshold) {
  require(threshold > 0.0 && threshold < 1.0, ErrorCode::InvalidParameter, "threshold must lie in (0, 1)");
  std::vector<int> bits(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits[i]));
    bits[i] = p > threshold ? 1 : 0;
  }
  return Secret(std::move(bits));
}

std::vector<Retrieved> retrieve(const RetrievalModel& model, const std::vector<Tensor>& images,
                                const std::string& query) {
  require(model.backbone != nullptr && model.params != nullptr && model.decoder != nullptr, ErrorCode::ConfigError,
          "retrieval model is incomplete");
  if (images.empty()) return {};
  const auto shape = model.backbone->image_shape();
  for (const auto& im : images)
    if (im.shape != shape)
      fail(ErrorCode::BackboneFailure, "image " + ad::shape_str(im.shape) + " does not match backbone input " +
                                           ad::shape_str(shape));
  ad::Graph g;
  std::vector<Var> xs;
  for (const auto& im : images) xs.push_back(g.constant(im));
  const int n = static_cast<int>(images.size());
  const ImageFeatures f = model.backbone->image_features(g, ad::stack(xs));
  Var t = model.backbone->text_features(g, query);
  Var text = n == 1 ? t : ad::reshape(ad::stack(std::vector<Var>(static_cast<std::size_t>(n), t)),
                                      {n, t.shape()[1], t.shape()[2]});
  Var emb = retrieval_forward(nn::Binder(g, *model.params), model.cfg, f.patches, text);
  Var logits = decode_secret(nn::Binder(g, *model.decoder), emb);
  std::vector<Retrieved> out(static_cast<std::size_t>(n));
  const int d = emb.shape()[1], nb = logits.shape()[1];
  for (int i = 0; i < n; ++i) {
    auto& r = out[static_cast<std::size_t>(i)];
    const auto& ev = emb.value().data;
    const auto& lv = logits.value().data;
    r.embedding.assign(ev.begin() + i * d, ev.begin() + (i + 1) * d);
    r.logits.assign(lv.begin() + i * nb, lv.begin() + (i + 1) * nb);
  }
  return out;
}

std::vector<double> query_embedding(const RetrievalModel& model, const Tensor& image, const std::string& query) {
  return retrieve(model, {image}, query).front().embedding;
}

json AttributionResult::to_json() const {
  return {{"concept_id", concept_id}, {"retrieved", retrieved.str()}, {"bit_accuracy", bit_accuracy},
          {"match", match},           {"tau", tau}};
}

double bit_accuracy(const Secret& a, const Secret& b) {
  require(a.length() == b.length() && a.length() > 0, ErrorCode::LengthMismatch,
          "secrets of length " + std::to_string(a.length()) + " and " + std::to_string(b.length()));
  int same = 0;
  for (int i = 0; i < a.length(); ++i) same += a.bits[static_cast<std::size_t>(i)] == b.bits[static_cast<std::size_t>(i)];
  return static_cast<double>(same) / a.length();
}

AttributionResult make_attribution(const std::string& concept_id, const Secret& truth, const Retrieved& r,
                                   double tau) {
  require(tau >= 0.0 && tau <= 1.0, ErrorCode::InvalidParameter, "tau must lie in [0, 1]");
  AttributionResult a;
  a.concept_id = concept_id;
  a.retrieved = binarize(r.logits);
  a.bit_accuracy = bit_accuracy(a.retrieved, truth);
  a.match = a.bit_accuracy >= tau;
  a.tau = tau;
  a.predicted_embedding = r.embedding;
  return a;
}

std::vector<AttributionResult> attribute_images(const RetrievalModel& model, const Registry& registry,
                                                const std::vector<Tensor>& images, const std::string& concept_id,
                                                double tau) {
  const ConceptRecord& rec = registry.get(concept_id);
  require(rec.secret.length() == model.cfg.n_bits, ErrorCode::LengthMismatch,
          "registry secrets do not match the decoder width");
  const auto rs = retrieve(model, images, rec.render_query());
  std::vector<AttributionResult> out;
  out.reserve(rs.size());
  for (const auto& r : rs) out.push_back(make_attribution(concept_id, rec.secret, r, tau));
  return out;
}

AttributionResult attribute(const RetrievalModel& model, const Registry& registry, const Tensor& image,
                            const std::string& concept_id, double tau) {
  return attribute_images(model, registry, {image}, concept_id, tau).front();
}

std::vector<AttributionResult> attribute_multi(const RetrievalModel& model, const Registry& registry,
                                               const Tensor& image, const std::vector<std::string>& concept_ids,
                                               double tau) {
  std::vector<AttributionResult> out;
  out.reserve(concept_ids.size());
  for (const auto& id : concept_ids) out.push_back(attribute(model, registry, image, id, tau));
  return out;
}

namespace {

double distance(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

}  // namespace

double separation_ratio(const std::vector<std::vector<std::vector<double>>>& embeddings_by_concept, double cap) {
  require(embeddings_by_concept.size() >= 2, ErrorCode::InsufficientData, "separation needs at least two concepts");
  std::size_t width = 0;
  for (const auto& group : embeddings_by_concept) {
    require(group.size() >= 2, ErrorCode::InsufficientData, "separation needs two embeddings per concept");
    for (const auto& e : group) {
      if (width == 0) width = e.size();
      require(e.size() == width && width > 0, ErrorCode::DimensionMismatch, "embeddings differ in width");
    }
  }
  double intra = 0.0, inter = 0.0;
  std::size_t n_intra = 0, n_inter = 0;
  for (std::size_t c = 0; c < embeddings_by_concept.size(); ++c) {
    const auto& a = embeddings_by_concept[c];
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = i + 1; j < a.size(); ++j, ++n_intra) intra += distance(a[i], a[j]);
      for (std::size_t o = c + 1; o < embeddings_by_concept.size(); ++o)
        for (const auto& e : embeddings_by_concept[o]) {
          inter += distance(a[i], e);
          ++n_inter;
        }
    }
  }
  intra /= static_cast<double>(n_intra);
  inter /= static_cast<double>(n_inter);
  if (intra <= 1e-12) return inter <= 1e-12 ? 1.0 : cap;
  return std::min(inter / intra, cap);
}

double embedding_separation(const RetrievalModel& model, const Registry& registry,
                            const std::map<std::string, std::vector<Tensor>>& images_by_concept) {
  std::vector<std::vector<std::vector<double>>> groups;
  for (const auto& [id, images] : images_by_concept) {
    std::vector<std::vector<double>> es;
    for (const auto& r : retrieve(model, images, registry.get(id).render_query())) es.push_back(r.embedding);
    groups.push_back(std::move(es));
  }
  return separation_ratio(groups);
}

}  // namespace conceptmark
