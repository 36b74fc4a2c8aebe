#include "conceptmark/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "conceptmark/error.hpp"

namespace conceptmark {

using nlohmann::json;

namespace {

std::uint64_t derive(std::uint64_t seed, std::string_view tag) {
  return nn::fnv1a(tag.data(), tag.size(), nn::fnv1a(&seed, sizeof seed));
}

std::uint64_t step_seed(std::uint64_t seed, std::int64_t step) {
  const std::uint64_t base = derive(seed, "batch");
  return nn::fnv1a(&step, sizeof step, base);
}

TemplateBank bank_for(ConceptKind kind) { return kind == ConceptKind::Style ? TemplateBank::Style : TemplateBank::Object; }

std::size_t train_share(const TrainConfig& cfg, TemplateBank bank) {
  const std::size_t n = template_bank(bank).size();
  const auto k = static_cast<std::size_t>(std::floor(static_cast<double>(n) * (1.0 - cfg.holdout_templates)));
  return std::clamp<std::size_t>(k, 1, n);
}

}  // namespace

// ---------------------------------------------------------------- backend

std::string FrozenBackend::digest() const {
  const std::string parts = nn::group_digest(generator.params()) + nn::group_digest(backbone.params()) +
                            (table ? table->to_json().dump() : std::string());
  return nn::hex64(nn::fnv1a(parts.data(), parts.size()));
}

namespace {

void reject_unknown(const json& j, const json& known, const std::string& where) {
  require(j.is_object(), ErrorCode::ConfigError, where + " must be an object");
  for (const auto& [key, _] : j.items())
    require(known.contains(key), ErrorCode::ConfigError, "unknown " + where + " key '" + key + "'");
}

}  // namespace

json backend_config_to_json(const BackendBuildConfig& cfg) {
  const auto& w = cfg.world;
  const auto& gp = cfg.generator_pretrain;
  const auto& bp = cfg.backbone_pretrain;
  return {{"world",
           {{"image_size", w.image_size},
            {"shapes", w.shapes},
            {"styles", w.styles},
            {"samples_per_concept", w.samples_per_concept},
            {"seed", w.seed}}},
          {"generator", cfg.generator.to_json()},
          {"backbone", cfg.backbone.to_json()},
          {"generator_pretrain",
           {{"iterations", gp.iterations}, {"batch_size", gp.batch_size}, {"learning_rate", gp.learning_rate}}},
          {"backbone_pretrain",
           {{"iterations", bp.iterations},
            {"batch_size", bp.batch_size},
            {"learning_rate", bp.learning_rate},
            {"temperature", bp.temperature}}},
          {"seed", cfg.seed}};
}

BackendBuildConfig backend_config_from_json(const json& j) {
  BackendBuildConfig c;
  const json known = backend_config_to_json(c);
  reject_unknown(j, known, "backend config");
  for (const char* part : {"world", "generator", "backbone", "generator_pretrain", "backbone_pretrain"})
    if (j.contains(part)) reject_unknown(j.at(part), known.at(part), std::string("backend.") + part);
  try {
    const json w = j.value("world", json::object());
    c.world.image_size = w.value("image_size", c.world.image_size);
    c.world.shapes = w.value("shapes", c.world.shapes);
    c.world.styles = w.value("styles", c.world.styles);
    c.world.samples_per_concept = w.value("samples_per_concept", c.world.samples_per_concept);
    c.world.seed = w.value("seed", c.world.seed);
    if (j.contains("generator")) c.generator = GeneratorConfig::from_json(j.at("generator"));
    if (j.contains("backbone")) c.backbone = BackboneConfig::from_json(j.at("backbone"));
    const json gp = j.value("generator_pretrain", json::object());
    c.generator_pretrain.iterations = gp.value("iterations", c.generator_pretrain.iterations);
    c.generator_pretrain.batch_size = gp.value("batch_size", c.generator_pretrain.batch_size);
    c.generator_pretrain.learning_rate = gp.value("learning_rate", c.generator_pretrain.learning_rate);
    const json bp = j.value("backbone_pretrain", json::object());
    c.backbone_pretrain.iterations = bp.value("iterations", c.backbone_pretrain.iterations);
    c.backbone_pretrain.batch_size = bp.value("batch_size", c.backbone_pretrain.batch_size);
    c.backbone_pretrain.learning_rate = bp.value("learning_rate", c.backbone_pretrain.learning_rate);
    c.backbone_pretrain.temperature = bp.value("temperature", c.backbone_pretrain.temperature);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("backend config: ") + e.what());
  }
  c.world.validate();
  return c;
}

FrozenBackend build_backend(const BackendBuildConfig& cfg, Registry& registry) {
  cfg.world.validate();
  if (registry.size() == 0) register_world_concepts(registry, cfg.world.shapes, cfg.world.styles);
  FrozenBackend b;
  b.table = std::make_shared<TokenEmbeddingTable>(
      make_base_table(cfg.generator.embedding_dim, derive(cfg.seed, "table")));
  b.table->add_registry(registry);
  const auto dataset = build_synthetic_dataset(cfg.world, registry);
  b.generator = ToyGenerator(cfg.generator, derive(cfg.seed, "generator"));
  PretrainConfig gp = cfg.generator_pretrain;
  gp.seed = derive(cfg.seed, "generator-pretrain");
  pretrain_generator(b.generator, dataset, *b.table, gp);
  BackboneConfig bc = cfg.backbone;
  bc.embedding_dim = cfg.generator.embedding_dim;
  bc.image_size = cfg.generator.image_size;
  b.backbone = ToyBackbone(bc, b.table, derive(cfg.seed, "backbone"));
  BackbonePretrainConfig bp = cfg.backbone_pretrain;
  bp.seed = derive(cfg.seed, "backbone-pretrain");
  pretrain_backbone(b.backbone, dataset, bp);
  return b;
}

namespace {

std::vector<std::pair<std::string, Tensor>> group_records(const nn::ParamGroup& group) {
  std::vector<std::pair<std::string, Tensor>> out;
  for (const auto& p : group.params()) out.emplace_back(p.name, p.value);
  return out;
}

void fill_group(nn::ParamGroup& group, const std::filesystem::path& path, const std::string& expected_digest) {
  const auto records = read_tensor_blob(path);
  require(records.size() == group.params().size(), ErrorCode::IntegrityError,
          "parameter count mismatch in " + path.string());
  for (const auto& [name, value] : records) {
    require(group.contains(name), ErrorCode::IntegrityError, "unexpected parameter " + name + " in " + path.string());
    auto& p = group.get(name);
    require(p.value.shape == value.shape, ErrorCode::IntegrityError, "shape mismatch for " + name);
    p.value = value;
    p.grad = Tensor(value.shape);
  }
  require(nn::group_digest(group) == expected_digest, ErrorCode::IntegrityError,
          "digest mismatch for group " + group.name());
}

json read_json_file(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  try {
    return json::parse(text);
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

}  // namespace

void save_backend(const FrozenBackend& backend, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dir.string() + ": " + ec.message());
  write_tensor_blob(dir / "generator.bin", group_records(backend.generator.params()));
  write_tensor_blob(dir / "backbone.bin", group_records(backend.backbone.params()));
  json j = {{"format", "conceptmark.backend"},
            {"schema_version", 1},
            {"generator", backend.generator.config().to_json()},
            {"backbone", backend.backbone.config().to_json()},
            {"table", backend.table->to_json()},
            {"digests",
             {{"generator", nn::group_digest(backend.generator.params())},
              {"backbone", nn::group_digest(backend.backbone.params())}}}};
  write_text_file(dir / "backend.json", j.dump(2) + "\n");
}

FrozenBackend load_backend(const std::filesystem::path& dir) {
  const json j = read_json_file(dir / "backend.json");
  if (j.value("format", "") != "conceptmark.backend") fail(ErrorCode::ParseError, "not a backend container");
  if (j.value("schema_version", 0) != 1)
    fail(ErrorCode::SchemaVersionMismatch, "backend schema version " + j.value("schema_version", json()).dump());
  FrozenBackend b;
  try {
    b.table = std::make_shared<TokenEmbeddingTable>(TokenEmbeddingTable::from_json(j.at("table")));
    b.generator = ToyGenerator(GeneratorConfig::from_json(j.at("generator")), 0);
    b.backbone = ToyBackbone(BackboneConfig::from_json(j.at("backbone")), b.table, 0);
    fill_group(b.generator.params(), dir / "generator.bin", j.at("digests").at("generator").get<std::string>());
    fill_group(b.backbone.params(), dir / "backbone.bin", j.at("digests").at("backbone").get<std::string>());
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, std::string("backend manifest: ") + e.what());
  }
  return b;
}

// ---------------------------------------------------------------- config

void TrainConfig::validate() const {
  require(iterations > 0 && batch_size > 0, ErrorCode::ConfigError, "iterations and batch_size must be positive");
  require(learning_rate > 0.0 && std::isfinite(learning_rate), ErrorCode::ConfigError, "learning_rate must be positive");
  require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0, ErrorCode::ConfigError, "betas must lie in (0, 1)");
  require(lr_decay_gamma > 0.0 && lr_decay_gamma <= 1.0, ErrorCode::ConfigError, "lr_decay_gamma must lie in (0, 1]");
  require(lr_decay_every > 0, ErrorCode::ConfigError, "lr_decay_every must be positive");
  require(grad_clip > 0.0, ErrorCode::ConfigError, "grad_clip must be positive");
  require(n_bits > 0, ErrorCode::ConfigError, "n_bits must be positive");
  require(multi_ratio >= 0.0 && multi_ratio <= 1.0, ErrorCode::ConfigError, "multi_ratio must lie in [0, 1]");
  require(new_concept_ratio >= 0.0 && new_concept_ratio <= 1.0, ErrorCode::ConfigError,
          "new_concept_ratio must lie in [0, 1]");
  require(holdout_templates >= 0.0 && holdout_templates < 1.0, ErrorCode::ConfigError,
          "holdout_templates must lie in [0, 1)");
  require(secret_source == "random" || secret_source == "registry", ErrorCode::ConfigError,
          "secret_source must be 'random' or 'registry'");
  require(generation_steps > 0 && hidden_width_multiplier > 0 && attn_dim > 0 && mapper_gain > 0.0,
          ErrorCode::ConfigError, "network sizes must be positive");
  require(checkpoint_every >= 0 && log_every > 0, ErrorCode::ConfigError, "invalid logging cadence");
  weights.validate();
}

json TrainConfig::to_json() const {
  return {{"iterations", iterations},
          {"batch_size", batch_size},
          {"learning_rate", learning_rate},
          {"beta1", beta1},
          {"beta2", beta2},
          {"lr_decay_gamma", lr_decay_gamma},
          {"lr_decay_every", lr_decay_every},
          {"grad_clip", grad_clip},
          {"weights", weights.to_json()},
          {"n_bits", n_bits},
          {"seed", seed},
          {"multi_ratio", multi_ratio},
          {"generation_steps", generation_steps},
          {"hidden_width_multiplier", hidden_width_multiplier},
          {"mapper_gain", mapper_gain},
          {"attn_dim", attn_dim},
          {"secret_source", secret_source},
          {"holdout_templates", holdout_templates},
          {"concepts", concepts},
          {"new_concept_ratio", new_concept_ratio},
          {"checkpoint_every", checkpoint_every},
          {"log_every", log_every}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  require(j.is_object(), ErrorCode::ConfigError, "train config must be an object");
  TrainConfig c;
  const json known = c.to_json();
  for (const auto& [key, _] : j.items())
    require(known.contains(key), ErrorCode::ConfigError, "unknown train config key '" + key + "'");
  try {
    c.iterations = j.value("iterations", c.iterations);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.beta1 = j.value("beta1", c.beta1);
    c.beta2 = j.value("beta2", c.beta2);
    c.lr_decay_gamma = j.value("lr_decay_gamma", c.lr_decay_gamma);
    c.lr_decay_every = j.value("lr_decay_every", c.lr_decay_every);
    c.grad_clip = j.value("grad_clip", c.grad_clip);
    if (j.contains("weights")) c.weights = LossWeights::from_json(j.at("weights"));
    c.n_bits = j.value("n_bits", c.n_bits);
    c.seed = j.value("seed", c.seed);
    c.multi_ratio = j.value("multi_ratio", c.multi_ratio);
    c.generation_steps = j.value("generation_steps", c.generation_steps);
    c.hidden_width_multiplier = j.value("hidden_width_multiplier", c.hidden_width_multiplier);
    c.mapper_gain = j.value("mapper_gain", c.mapper_gain);
    c.attn_dim = j.value("attn_dim", c.attn_dim);
    c.secret_source = j.value("secret_source", c.secret_source);
    c.holdout_templates = j.value("holdout_templates", c.holdout_templates);
    c.concepts = j.value("concepts", c.concepts);
    c.new_concept_ratio = j.value("new_concept_ratio", c.new_concept_ratio);
    c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
    c.log_every = j.value("log_every", c.log_every);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

double learning_rate_at(const TrainConfig& cfg, std::int64_t step) {
  return cfg.learning_rate * std::pow(cfg.lr_decay_gamma, static_cast<double>(step / cfg.lr_decay_every));
}

// ---------------------------------------------------------------- state

std::vector<nn::ParamGroup*> ModelState::trainable() { return {&concept_encoder, &secret_mapper, &retrieval, &decoder}; }

RetrievalModel ModelState::retrieval_model(const FrozenBackend& backend) const {
  return {&backend.backbone, &retrieval, &decoder, retrieval_cfg};
}

ModelState init_state(const TrainConfig& cfg, const FrozenBackend& backend, const Registry& registry) {
  cfg.validate();
  require(registry.size() > 0, ErrorCode::InsufficientData, "registry is empty");
  require(registry.n_bits() == cfg.n_bits, ErrorCode::ConfigError,
          "registry secrets have " + std::to_string(registry.n_bits()) + " bits but n_bits is " +
              std::to_string(cfg.n_bits));
  ModelState s;
  s.config = cfg;
  s.encoding.embedding_dim = backend.table->dim();
  s.encoding.n_bits = cfg.n_bits;
  s.encoding.hidden_width_multiplier = cfg.hidden_width_multiplier;
  s.encoding.mapper_gain = cfg.mapper_gain;
  s.encoding.latent_shape = backend.generator.latent_shape();
  s.retrieval_cfg.image_dim = backend.backbone.image_dim();
  s.retrieval_cfg.text_dim = backend.backbone.text_dim();
  s.retrieval_cfg.embedding_dim = backend.table->dim();
  s.retrieval_cfg.n_bits = cfg.n_bits;
  s.retrieval_cfg.attn_dim = cfg.attn_dim;
  s.concept_encoder = make_concept_encoder(s.encoding, derive(cfg.seed, "concept_encoder"));
  s.secret_mapper = make_secret_mapper(s.encoding, derive(cfg.seed, "secret_mapper"));
  s.retrieval = make_retrieval_params(s.retrieval_cfg, derive(cfg.seed, "retrieval"));
  s.decoder = make_decoder_params(s.retrieval_cfg, derive(cfg.seed, "decoder"));
  s.optimizer = nn::Adam(nn::AdamConfig{cfg.beta1, cfg.beta2, 1e-8});
  s.trained_concepts = cfg.concepts.empty() ? registry.ids() : cfg.concepts;
  for (const auto& id : s.trained_concepts) {
    registry.get(id);
    backend.table->concept_embedding(id);
  }
  s.base_iterations = cfg.iterations;
  s.registry_digest = registry.digest();
  s.backend_digest = backend.digest();
  return s;
}

// ---------------------------------------------------------------- batches

TrainBatch sample_batch(const TrainConfig& cfg, const Registry& registry, const FrozenBackend& backend,
                        const std::vector<std::string>& ids, std::uint64_t seed,
                        const std::vector<std::string>& new_ids) {
  require(!ids.empty() || !new_ids.empty(), ErrorCode::InsufficientData, "no concepts to sample from");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<std::string> all = ids;
  all.insert(all.end(), new_ids.begin(), new_ids.end());
  std::vector<std::string> objects, styles;
  for (const auto& id : all) (registry.get(id).kind == ConceptKind::Style ? styles : objects).push_back(id);
  auto pick = [&rng](const std::vector<std::string>& v) { return v[rng() % v.size()]; };

  TrainBatch batch;
  for (int b = 0; b < cfg.batch_size; ++b) {
    const bool from_new = !new_ids.empty() && (ids.empty() || unit(rng) < cfg.new_concept_ratio);
    const std::string primary = pick(from_new ? new_ids : ids);
    const ConceptRecord& rec = registry.get(primary);
    const bool multi = unit(rng) < cfg.multi_ratio;
    TrainItem item;
    const auto& partners = rec.kind == ConceptKind::Style ? objects : styles;
    if (multi && !partners.empty()) {
      const std::string partner = pick(partners);
      const std::string& obj = rec.kind == ConceptKind::Style ? partner : primary;
      const std::string& sty = rec.kind == ConceptKind::Style ? primary : partner;
      item.prompt = registry.render_pair_prompt(obj, sty, rng() % train_share(cfg, TemplateBank::Multi));
      item.concept_ids = {obj, sty};
    } else {
      const TemplateBank bank = bank_for(rec.kind);
      item.prompt = registry.render_training_prompt(primary, bank, rng() % train_share(cfg, bank));
      item.concept_ids = {primary};
    }
    for (const auto& id : item.concept_ids)
      item.secrets.push_back(cfg.secret_source == "registry" ? registry.get(id).secret
                                                             : random_secret(cfg.n_bits, rng()));
    item.z = sample_latent(backend.generator.latent_shape(), rng());
    batch.push_back(std::move(item));
  }
  return batch;
}

std::string heldout_prompt(const TrainConfig& cfg, const Registry& registry, const std::vector<std::string>& ids,
                           std::uint64_t seed) {
  require(ids.size() == 1 || ids.size() == 2, ErrorCode::InvalidParameter, "prompts name one or two concepts");
  std::mt19937_64 rng(seed);
  auto pick_index = [&](TemplateBank bank) {
    const std::size_t n = template_bank(bank).size();
    const std::size_t k = train_share(cfg, bank);
    return k < n ? k + rng() % (n - k) : rng() % n;
  };
  if (ids.size() == 1) {
    const TemplateBank bank = bank_for(registry.get(ids[0]).kind);
    return registry.render_training_prompt(ids[0], bank, pick_index(bank));
  }
  return registry.render_pair_prompt(ids[0], ids[1], pick_index(TemplateBank::Multi));
}

// ---------------------------------------------------------------- forward and update

ForwardResult forward_batch(ad::Graph& g, ModelState& state, const FrozenBackend& backend, const Registry& registry,
                            const TrainBatch& batch, bool trainable) {
  require(!batch.empty(), ErrorCode::InsufficientData, "empty batch");
  const int d = state.encoding.embedding_dim;
  const int n = static_cast<int>(batch.size());
  nn::Binder enc(g, state.concept_encoder, trainable);
  nn::Binder map(g, state.secret_mapper, trainable);
  nn::Binder ret(g, state.retrieval, trainable);
  nn::Binder dec(g, state.decoder, trainable);

  struct Slot {
    int item;
    std::string id;
    int pos;
  };
  std::vector<Slot> slots;
  std::vector<PromptEmbedding> prompts;
  std::vector<Secret> secrets;
  std::vector<double> ec_values;
  for (int i = 0; i < n; ++i) {
    const auto& it = batch[static_cast<std::size_t>(i)];
    require(it.concept_ids.size() == it.secrets.size() && !it.concept_ids.empty(), ErrorCode::InvalidParameter,
            "every batch item needs one secret per concept");
    prompts.push_back(embed_prompt(it.prompt, *backend.table));
    for (std::size_t j = 0; j < it.concept_ids.size(); ++j) {
      const int pos = prompts.back().position_of(it.concept_ids[j]);
      slots.push_back({i, it.concept_ids[j], pos});
      secrets.push_back(it.secrets[j]);
      const auto row = prompts.back().row(pos);
      ec_values.insert(ec_values.end(), row.begin(), row.end());
    }
  }
  const int m = static_cast<int>(slots.size());
  Var ec = g.constant(Tensor({m, d}, ec_values));
  Var sec = g.constant(signed_secret_rows(secrets));
  Var d_embed = concept_encoder_forward(enc, state.encoding, ec, sec);
  Var d_noise = secret_mapper_forward(map, state.encoding, sec);

  std::vector<Var> tokens, zs;
  std::vector<Var> z_clean;
  std::vector<Tensor> z_values;
  for (int i = 0; i < n; ++i) {
    tokens.push_back(g.constant(prompts[static_cast<std::size_t>(i)].tokens));
    zs.push_back(g.constant(batch[static_cast<std::size_t>(i)].z));
    z_clean.push_back(zs.back());
    z_values.push_back(batch[static_cast<std::size_t>(i)].z);
  }
  for (int k = 0; k < m; ++k) {
    const Slot& s = slots[static_cast<std::size_t>(k)];
    auto& t = tokens[static_cast<std::size_t>(s.item)];
    t = ad::add_to_row(t, s.pos, ad::select(d_embed, k));
    auto& z = zs[static_cast<std::size_t>(s.item)];
    z = ad::add(z, ad::select(d_noise, k));
  }
  const int steps = state.config.generation_steps;
  Var z_hat = ad::stack(zs);
  Var wm = backend.generator.generate(g, z_hat, tokens, steps);
  ForwardResult r;
  r.wm_images = wm;
  r.clean_images = generate_batch(backend.generator, z_values, prompts, steps);

  Tensor clean_style;
  {
    ad::Graph cg;
    clean_style = backend.backbone.image_features(cg, cg.constant(r.clean_images)).style.value();
  }
  const ImageFeatures f = backend.backbone.image_features(g, wm);
  const int p = f.patches.shape()[1], di = f.patches.shape()[2];

  std::map<std::string, Tensor> query_cache;
  std::vector<Var> embeddings;
  for (const Slot& s : slots) {
    auto qit = query_cache.find(s.id);
    if (qit == query_cache.end()) {
      ad::Graph qg;
      qit = query_cache.emplace(s.id, backend.backbone.text_features(qg, registry.render_query(s.id)).value()).first;
    }
    Var patches = ad::reshape(ad::select(f.patches, s.item), {1, p, di});
    embeddings.push_back(retrieval_forward(ret, state.retrieval_cfg, patches, g.constant(qit->second)));
  }
  Var emb = ad::reshape(ad::stack(embeddings), {m, state.retrieval_cfg.embedding_dim});
  Var logits = decode_secret(dec, emb);

  r.terms.ce = loss_ce(logits, secrets);
  r.terms.csd = loss_csd(g.constant(std::move(clean_style)), f.style);
  r.terms.l2_image = loss_l2(wm, g.constant(r.clean_images));
  r.terms.reg = loss_l2(emb, ec);
  r.terms.l2_latent = loss_l2(z_hat, ad::stack(z_clean));
  r.total = loss_total(r.terms, state.config.weights);
  return r;
}

LossBreakdown train_step(ModelState& state, const FrozenBackend& backend, const Registry& registry,
                         const TrainBatch& batch) {
  for (auto* group : state.trainable()) group->zero_grad();
  ad::Graph g;
  ForwardResult r = forward_batch(g, state, backend, registry, batch, true);
  const LossBreakdown b = breakdown(r.terms, state.config.weights);
  for (double v : {b.ce, b.csd, b.l2_image, b.reg, b.l2_latent, b.total})
    require(std::isfinite(v), ErrorCode::NonFiniteLoss,
            "non-finite loss at step " + std::to_string(state.step) + ": " + b.to_json().dump());
  g.backward(r.total);
  nn::clip_grad_norm(state.trainable(), state.config.grad_clip);
  state.optimizer.step(state.trainable(), learning_rate_at(state.config, state.step));
  ++state.step;
  return b;
}

namespace {

void run_steps(ModelState& state, const Registry& registry, const FrozenBackend& backend, std::int64_t count,
               const std::vector<std::string>& old_ids, const std::vector<std::string>& new_ids,
               const TrainHooks& hooks) {
  std::ofstream log;
  if (!hooks.log_path.empty()) {
    if (hooks.log_path.has_parent_path()) std::filesystem::create_directories(hooks.log_path.parent_path());
    log.open(hooks.log_path, new_ids.empty() ? std::ios::trunc : std::ios::app);
    require(log.good(), ErrorCode::IoError, "cannot open loss log " + hooks.log_path.string());
  }
  const auto& cfg = state.config;
  for (std::int64_t k = 0; k < count; ++k) {
    const TrainBatch batch =
        sample_batch(cfg, registry, backend, old_ids, step_seed(cfg.seed, state.step), new_ids);
    const double lr = learning_rate_at(cfg, state.step);
    const LossBreakdown b = train_step(state, backend, registry, batch);
    if (log.is_open() && state.step % cfg.log_every == 0) {
      json j = b.to_json();
      j["step"] = state.step;
      j["lr"] = lr;
      log << j.dump() << '\n';
    }
    if (hooks.on_step) hooks.on_step(state.step, b);
    if (!hooks.checkpoint_dir.empty() && cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0) {
      char name[32];
      std::snprintf(name, sizeof name, "step_%06lld", static_cast<long long>(state.step));
      save_checkpoint(state, hooks.checkpoint_dir / name);
    }
    if (hooks.on_snapshot && hooks.snapshot_every > 0 && state.step % hooks.snapshot_every == 0)
      hooks.on_snapshot(state);
  }
  if (!hooks.checkpoint_dir.empty()) save_checkpoint(state, hooks.checkpoint_dir / "final");
}

}  // namespace

ModelState train(const TrainConfig& cfg, const Registry& registry, const FrozenBackend& backend,
                 const TrainHooks& hooks) {
  ModelState state = init_state(cfg, backend, registry);
  const std::vector<std::string> ids = state.trained_concepts;
  run_steps(state, registry, backend, cfg.iterations, ids, {}, hooks);
  return state;
}

ModelState sequential_update(const ModelState& state, const Registry& registry, const FrozenBackend& backend,
                             const std::vector<std::string>& new_concepts, double extra_fraction,
                             const TrainHooks& hooks) {
  require(!new_concepts.empty(), ErrorCode::InsufficientData, "no new concepts given");
  require(extra_fraction > 0.0, ErrorCode::InvalidParameter, "extra_fraction must be positive");
  std::set<std::string> seen(state.trained_concepts.begin(), state.trained_concepts.end());
  for (const auto& id : new_concepts) {
    registry.get(id);
    backend.table->concept_embedding(id);
    require(!seen.count(id), ErrorCode::ConceptAlreadyTrained, "concept '" + id + "' was already trained");
    seen.insert(id);
  }
  ModelState next = state;
  const auto extra = std::max<std::int64_t>(
      1, static_cast<std::int64_t>(std::llround(extra_fraction * static_cast<double>(state.base_iterations))));
  run_steps(next, registry, backend, extra, state.trained_concepts, new_concepts, hooks);
  next.trained_concepts.insert(next.trained_concepts.end(), new_concepts.begin(), new_concepts.end());
  next.registry_digest = registry.digest();
  return next;
}

// ---------------------------------------------------------------- gradient audit

json GradientAuditReport::to_json() const {
  return {{"group_error", group_error}, {"sampled", sampled}, {"max_rel_error", max_rel_error}};
}

GradientAuditReport gradient_audit(ModelState& state, const FrozenBackend& backend, const Registry& registry,
                                   const TrainBatch& batch, int per_group, double h, std::uint64_t seed) {
  require(per_group > 0 && h > 0.0, ErrorCode::InvalidParameter, "audit needs positive sample count and step");
  for (auto* group : state.trainable()) group->zero_grad();
  {
    ad::Graph g;
    ForwardResult r = forward_batch(g, state, backend, registry, batch, true);
    g.backward(r.total);
  }
  auto loss_value = [&] {
    ad::Graph g;
    return forward_batch(g, state, backend, registry, batch, false).total.value()[0];
  };
  std::mt19937_64 rng(seed);
  GradientAuditReport report;
  for (auto* group : state.trainable()) {
    std::vector<std::pair<ad::Parameter*, std::size_t>> entries;
    std::size_t total = 0;
    for (auto& p : group->params()) total += p.value.numel();
    for (int k = 0; k < per_group; ++k) {
      std::size_t flat = rng() % total;
      for (auto& p : group->params()) {
        if (flat < p.value.numel()) {
          entries.emplace_back(&p, flat);
          break;
        }
        flat -= p.value.numel();
      }
    }
    double diff = 0.0, scale_a = 0.0, scale_n = 0.0;
    for (auto [p, idx] : entries) {
      const double keep = p->value[idx];
      p->value[idx] = keep + h;
      const double up = loss_value();
      p->value[idx] = keep - h;
      const double down = loss_value();
      p->value[idx] = keep;
      const double numeric = (up - down) / (2.0 * h);
      const double analytic = p->grad[idx];
      diff += (numeric - analytic) * (numeric - analytic);
      scale_a += analytic * analytic;
      scale_n += numeric * numeric;
    }
    const double denom = std::max(std::sqrt(std::max(scale_a, scale_n)), 1e-12);
    const double err = std::sqrt(scale_a) < 1e-12 && std::sqrt(scale_n) < 1e-12 ? 0.0 : std::sqrt(diff) / denom;
    report.group_error[group->name()] = err;
    report.sampled[group->name()] = static_cast<int>(entries.size());
    report.max_rel_error = std::max(report.max_rel_error, err);
  }
  for (auto* group : state.trainable()) group->zero_grad();
  return report;
}

// ---------------------------------------------------------------- watermarked generation

namespace {

struct PreparedRequest {
  PromptEmbedding clean;
  PromptEmbedding wm;
  Tensor z_hat;
};

PreparedRequest prepare(const ModelState& state, const FrozenBackend& backend, const Registry& registry,
                        const GenerationRequest& req) {
  require(req.style_alpha > 0.0, ErrorCode::NonPositiveAlpha, "style_alpha must be positive");
  PreparedRequest p;
  p.clean = embed_prompt(req.prompt, *backend.table);
  std::map<std::string, EncoderAssignment> assign;
  std::vector<Tensor> deltas;
  for (const auto& id : req.concept_ids) {
    const ConceptRecord& rec = registry.get(id);
    if (!p.clean.target_positions.count(id))
      fail(ErrorCode::TargetNotInPrompt, "concept '" + id + "' does not appear in prompt '" + req.prompt + "'");
    assign[id] = {&state.concept_encoder, rec.secret};
    deltas.push_back(secret_mapper_delta(state.secret_mapper, state.encoding, rec.secret));
  }
  p.wm = perturb_prompt(p.clean, state.encoding, assign);
  if (req.style_alpha != 1.0)
    for (const auto& id : req.concept_ids)
      if (registry.get(id).kind == ConceptKind::Style)
        p.wm = apply_prompt_weight(p.wm, p.wm.position_of(id), req.style_alpha);
  p.z_hat = perturb_noise(req.z, deltas);
  return p;
}

std::vector<Tensor> split_images(const Tensor& batch) {
  std::vector<Tensor> out;
  const int n = batch.dim(0);
  const ad::Shape shape(batch.shape.begin() + 1, batch.shape.end());
  const std::size_t per = ad::shape_numel(shape);
  for (int i = 0; i < n; ++i)
    out.emplace_back(shape, std::vector<double>(batch.data.begin() + static_cast<std::ptrdiff_t>(i * per),
                                                batch.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * per)));
  return out;
}

constexpr std::size_t kChunk = 32;

std::vector<Tensor> run_generation(const FrozenBackend& backend, const std::vector<Tensor>& zs,
                                   const std::vector<PromptEmbedding>& prompts, int steps) {
  std::vector<Tensor> out;
  for (std::size_t s = 0; s < zs.size(); s += kChunk) {
    const std::size_t e = std::min(zs.size(), s + kChunk);
    const std::vector<Tensor> z(zs.begin() + static_cast<std::ptrdiff_t>(s), zs.begin() + static_cast<std::ptrdiff_t>(e));
    const std::vector<PromptEmbedding> p(prompts.begin() + static_cast<std::ptrdiff_t>(s),
                                         prompts.begin() + static_cast<std::ptrdiff_t>(e));
    for (auto& im : split_images(generate_batch(backend.generator, z, p, steps))) out.push_back(std::move(im));
  }
  return out;
}

}  // namespace

std::vector<Tensor> generate_watermarked(const ModelState& state, const FrozenBackend& backend,
                                         const Registry& registry, const std::vector<GenerationRequest>& requests) {
  std::vector<Tensor> zs;
  std::vector<PromptEmbedding> prompts;
  for (const auto& req : requests) {
    auto p = prepare(state, backend, registry, req);
    zs.push_back(std::move(p.z_hat));
    prompts.push_back(std::move(p.wm));
  }
  return run_generation(backend, zs, prompts, state.config.generation_steps);
}

std::vector<Tensor> generate_clean(const ModelState& state, const FrozenBackend& backend,
                                   const std::vector<GenerationRequest>& requests) {
  std::vector<Tensor> zs;
  std::vector<PromptEmbedding> prompts;
  for (const auto& req : requests) {
    zs.push_back(req.z);
    prompts.push_back(embed_prompt(req.prompt, *backend.table));
  }
  return run_generation(backend, zs, prompts, state.config.generation_steps);
}

}  // namespace conceptmark
