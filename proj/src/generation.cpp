#include "conceptmark/generation.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <numbers>
#include <set>

#include "conceptmark/error.hpp"

namespace conceptmark {

namespace {

constexpr const char* kOovKey = "\x01oov";

struct StyleDef {
  const char* name;
  double fg[3];
  double bg[3];
  int pattern;  // 0 stripes, 1 dots, 2 checker, 3 waves, 4 grid, 5 solid, 6 bands, 7 speckle
};

const StyleDef kStyles[] = {
    {"red-stripes", {0.86, 0.16, 0.14}, {0.95, 0.90, 0.84}, 0},
    {"blue-dots", {0.14, 0.30, 0.86}, {0.90, 0.92, 0.97}, 1},
    {"green-checker", {0.16, 0.64, 0.22}, {0.86, 0.95, 0.86}, 2},
    {"amber-waves", {0.96, 0.66, 0.10}, {0.30, 0.20, 0.14}, 3},
    {"violet-grid", {0.62, 0.22, 0.76}, {0.14, 0.14, 0.20}, 4},
    {"teal-solid", {0.10, 0.60, 0.60}, {0.95, 0.95, 0.95}, 5},
    {"pink-bands", {0.95, 0.45, 0.70}, {0.26, 0.10, 0.20}, 6},
    {"slate-speckle", {0.55, 0.58, 0.62}, {0.18, 0.22, 0.30}, 7},
};

const StyleDef& style_def(const std::string& name) {
  for (const auto& s : kStyles)
    if (name == s.name) return s;
  fail(ErrorCode::ConfigError, "unknown style factor '" + name + "'");
}

bool inside(const std::string& shape, double dx, double dy, double r) {
  const double d = std::sqrt(dx * dx + dy * dy);
  if (shape == "circle") return d < r;
  if (shape == "square") return std::abs(dx) < 0.85 * r && std::abs(dy) < 0.85 * r;
  if (shape == "triangle") return dy > -r && dy < 0.8 * r && std::abs(dx) < (dy + r) * 0.55;
  if (shape == "cross")
    return (std::abs(dx) < r / 3 && std::abs(dy) < r) || (std::abs(dy) < r / 3 && std::abs(dx) < r);
  if (shape == "ring") return d < r && d > 0.55 * r;
  if (shape == "diamond") return std::abs(dx) + std::abs(dy) < r;
  if (shape == "bar") return std::abs(dx) < r && std::abs(dy) < 0.35 * r;
  if (shape == "frame") {
    const double m = std::max(std::abs(dx), std::abs(dy));
    return m < 0.9 * r && m > 0.55 * r;
  }
  fail(ErrorCode::ConfigError, "unknown shape factor '" + shape + "'");
}

double pattern_value(int pattern, int x, int y, int phase, std::mt19937_64& rng) {
  switch (pattern) {
    case 0: return ((x + y + phase) / 3) % 2 == 0 ? 1.0 : 0.0;
    case 1: return ((x + phase) % 4 < 2 && (y + phase) % 4 < 2) ? 1.0 : 0.0;
    case 2: return (((x + phase) / 4 + (y + phase) / 4) % 2 == 0) ? 1.0 : 0.0;
    case 3: return 0.5 + 0.5 * std::sin((x + phase) * 0.8 + 2.0 * std::sin(y * 0.5));
    case 4: return ((x + phase) % 5 == 0 || (y + phase) % 5 == 0) ? 1.0 : 0.0;
    case 5: return 1.0;
    case 6: return ((y + phase) / 3) % 2 == 0 ? 1.0 : 0.0;
    default: return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  }
}

std::string lower(std::string s) {
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

Tensor latent_target(const Tensor& image, const ad::Shape& latent) {
  Tensor small = ad::resize_bilinear_value(image, latent[1], latent[2]);
  for (double& v : small.data) v = 2.0 * v - 1.0;
  return small;
}

}  // namespace

// ---------------------------------------------------------------- token table

TokenEmbeddingTable::TokenEmbeddingTable(int dim, std::uint64_t seed) : dim_(dim), seed_(seed) {
  require(dim > 0, ErrorCode::ConfigError, "embedding dim must be positive");
  oov_ = make_vector(kOovKey);
}

std::vector<double> TokenEmbeddingTable::make_vector(const std::string& token) const {
  std::mt19937_64 rng(nn::fnv1a(token.data(), token.size(), nn::fnv1a(&seed_, sizeof seed_)));
  std::normal_distribution<double> d(0.0, 1.0 / std::sqrt(static_cast<double>(dim_)));
  std::vector<double> v(static_cast<std::size_t>(dim_));
  for (double& x : v) x = d(rng);
  return v;
}

void TokenEmbeddingTable::add_word(const std::string& word) {
  if (!vectors_.count(word)) vectors_.emplace(word, make_vector(word));
}

void TokenEmbeddingTable::add_concept(const ConceptRecord& record) {
  add_word(record.token);
  token_concepts_[record.token] = record.concept_id;
  concept_tokens_[record.concept_id] = record.token;
}

void TokenEmbeddingTable::add_registry(const Registry& registry) {
  for (const auto& r : registry.records()) add_concept(r);
}

const std::vector<double>& TokenEmbeddingTable::lookup(const std::string& token) const {
  auto it = vectors_.find(token);
  return it == vectors_.end() ? oov_ : it->second;
}

const std::vector<double>& TokenEmbeddingTable::concept_embedding(const std::string& concept_id) const {
  auto it = concept_tokens_.find(concept_id);
  require(it != concept_tokens_.end(), ErrorCode::UnknownConcept, "no token for concept '" + concept_id + "'");
  return vectors_.at(it->second);
}

std::string TokenEmbeddingTable::concept_of(const std::string& token) const {
  auto it = token_concepts_.find(token);
  return it == token_concepts_.end() ? std::string() : it->second;
}

nlohmann::json TokenEmbeddingTable::to_json() const {
  nlohmann::json words = nlohmann::json::array();
  for (const auto& [w, v] : vectors_)
    if (!token_concepts_.count(w)) words.push_back(w);
  nlohmann::json concepts = nlohmann::json::array();
  for (const auto& [tok, id] : token_concepts_) concepts.push_back({{"token", tok}, {"concept_id", id}});
  return {{"dim", dim_}, {"seed", seed_}, {"words", words}, {"concepts", concepts}};
}

TokenEmbeddingTable TokenEmbeddingTable::from_json(const nlohmann::json& j) {
  try {
    TokenEmbeddingTable t(j.at("dim").get<int>(), j.at("seed").get<std::uint64_t>());
    for (const auto& w : j.at("words")) t.add_word(w.get<std::string>());
    for (const auto& c : j.at("concepts")) {
      const auto tok = c.at("token").get<std::string>();
      t.add_word(tok);
      t.token_concepts_[tok] = c.at("concept_id").get<std::string>();
      t.concept_tokens_[c.at("concept_id").get<std::string>()] = tok;
    }
    return t;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ParseError, std::string("token table: ") + e.what());
  }
}

std::string normalize_word(const std::string& word) {
  std::string w = word;
  while (!w.empty() && std::string_view(".,;:!?").find(w.back()) != std::string_view::npos) w.pop_back();
  if (w.size() > 2 && w.front() == '<' && w.back() == '>') return w;
  return lower(w);
}

TokenEmbeddingTable make_base_table(int dim, std::uint64_t seed) {
  TokenEmbeddingTable t(dim, seed);
  for (auto bank : {TemplateBank::Style, TemplateBank::Object, TemplateBank::Multi})
    for (const auto& tmpl : template_bank(bank))
      for (const auto& w : split_words(tmpl))
        if (w.find("[name") == std::string::npos) t.add_word(normalize_word(w));
  return t;
}

PromptEmbedding embed_prompt(const std::string& prompt, const TokenEmbeddingTable& table) {
  const auto raw = split_words(prompt);
  require(!raw.empty(), ErrorCode::EmptyPrompt, "prompt has no tokens");
  PromptEmbedding e;
  const int d = table.dim();
  e.tokens = Tensor({static_cast<int>(raw.size()), d});
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const std::string w = normalize_word(raw[i]);
    const auto& v = table.lookup(w);
    std::copy(v.begin(), v.end(), e.tokens.data.begin() + static_cast<std::ptrdiff_t>(i * static_cast<std::size_t>(d)));
    const std::string id = table.concept_of(w);
    if (!id.empty()) e.target_positions.emplace(id, static_cast<int>(i));
    e.words.push_back(w);
  }
  return e;
}

// ---------------------------------------------------------------- synthetic world

const std::vector<std::string>& known_shapes() {
  static const std::vector<std::string> shapes{"circle", "square", "triangle", "cross",
                                               "ring",   "diamond", "bar",     "frame"};
  return shapes;
}

const std::vector<std::string>& known_styles() {
  static const std::vector<std::string> styles = [] {
    std::vector<std::string> out;
    for (const auto& s : kStyles) out.emplace_back(s.name);
    return out;
  }();
  return styles;
}

void SyntheticWorldConfig::validate() const {
  require(image_size >= 8, ErrorCode::ConfigError, "image_size must be at least 8");
  require(!shapes.empty() && !styles.empty(), ErrorCode::ConfigError, "world needs shapes and styles");
  require(samples_per_concept > 0, ErrorCode::ConfigError, "samples_per_concept must be positive");
  for (const auto& s : shapes)
    require(std::count(known_shapes().begin(), known_shapes().end(), s) == 1, ErrorCode::ConfigError,
            "unknown shape factor '" + s + "'");
  for (const auto& s : styles)
    require(std::count(known_styles().begin(), known_styles().end(), s) == 1, ErrorCode::ConfigError,
            "unknown style factor '" + s + "'");
}

Tensor render_concept_image(const std::string& shape, const std::string& style, int size, std::mt19937_64& rng) {
  const StyleDef& st = style_def(style);
  std::uniform_real_distribution<double> jitter(-0.1, 0.1);
  std::uniform_real_distribution<double> radius(0.25, 0.34);
  const double cx = size * (0.5 + jitter(rng));
  const double cy = size * (0.5 + jitter(rng));
  const double r = size * radius(rng);
  const int phase = static_cast<int>(rng() % 6);
  Tensor img({3, size, size});
  const std::size_t plane = static_cast<std::size_t>(size) * size;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const bool in = inside(shape, x + 0.5 - cx, y + 0.5 - cy, r);
      const double p = pattern_value(st.pattern, x, y, phase, rng);
      for (int c = 0; c < 3; ++c) {
        const double v = in ? st.fg[c] * (0.55 + 0.45 * p) : st.bg[c] * (0.92 + 0.08 * p);
        img[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * size + x] = std::clamp(v, 0.0, 1.0);
      }
    }
  return img;
}

void register_world_concepts(Registry& registry, const std::vector<std::string>& shapes,
                             const std::vector<std::string>& styles) {
  for (const auto& s : shapes) registry.register_concept("<" + s + ">", ConceptKind::Object);
  for (const auto& s : styles) registry.register_concept("<" + s + ">", ConceptKind::Style);
}

std::vector<SyntheticSample> build_synthetic_dataset(const SyntheticWorldConfig& cfg, const Registry& registry) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  auto pick = [&rng](const std::vector<std::string>& v) { return v[rng() % v.size()]; };
  auto bank_index = [&rng](TemplateBank b) { return static_cast<std::size_t>(rng() % template_bank(b).size()); };
  std::vector<std::string> objects, styles;
  for (const auto& r : registry.records()) {
    if (r.kind == ConceptKind::Object && std::count(cfg.shapes.begin(), cfg.shapes.end(), r.concept_id))
      objects.push_back(r.concept_id);
    if (r.kind == ConceptKind::Style && std::count(cfg.styles.begin(), cfg.styles.end(), r.concept_id))
      styles.push_back(r.concept_id);
  }
  require(!objects.empty() || !styles.empty(), ErrorCode::ConfigError,
          "registry has no concept that maps onto a world factor");
  std::vector<SyntheticSample> out;
  for (const auto& o : objects)
    for (int i = 0; i < cfg.samples_per_concept; ++i) {
      const auto prompt = registry.render_training_prompt(o, TemplateBank::Object, bank_index(TemplateBank::Object));
      out.push_back({render_concept_image(o, pick(cfg.styles), cfg.image_size, rng), {o}, prompt});
    }
  for (const auto& s : styles)
    for (int i = 0; i < cfg.samples_per_concept; ++i) {
      const auto prompt = registry.render_training_prompt(s, TemplateBank::Style, bank_index(TemplateBank::Style));
      out.push_back({render_concept_image(pick(cfg.shapes), s, cfg.image_size, rng), {s}, prompt});
    }
  if (!styles.empty())
    for (const auto& o : objects)
      for (int i = 0; i < cfg.samples_per_concept; ++i) {
        const auto s = pick(styles);
        const auto prompt = registry.render_pair_prompt(o, s, bank_index(TemplateBank::Multi));
        out.push_back({render_concept_image(o, s, cfg.image_size, rng), {o, s}, prompt});
      }
  return out;
}

// ---------------------------------------------------------------- generator

nlohmann::json GeneratorConfig::to_json() const {
  return {{"embedding_dim", embedding_dim}, {"channels", channels},       {"blocks", blocks},
          {"cond_hidden", cond_hidden},     {"latent_shape", latent_shape}, {"image_size", image_size},
          {"alpha_bars", alpha_bars}};
}

GeneratorConfig GeneratorConfig::from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.embedding_dim = j.value("embedding_dim", c.embedding_dim);
  c.channels = j.value("channels", c.channels);
  c.blocks = j.value("blocks", c.blocks);
  c.cond_hidden = j.value("cond_hidden", c.cond_hidden);
  c.latent_shape = j.value("latent_shape", c.latent_shape);
  c.image_size = j.value("image_size", c.image_size);
  c.alpha_bars = j.value("alpha_bars", c.alpha_bars);
  return c;
}

ToyGenerator::ToyGenerator(GeneratorConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
  require(cfg_.latent_shape.size() == 3 && cfg_.latent_shape[0] == 3, ErrorCode::ConfigError,
          "toy generator works on a 3-channel latent canvas");
  require(!cfg_.alpha_bars.empty(), ErrorCode::ConfigError, "empty sampler schedule");
  for (std::size_t i = 0; i < cfg_.alpha_bars.size(); ++i) {
    require(cfg_.alpha_bars[i] >= 0.0 && cfg_.alpha_bars[i] < 1.0, ErrorCode::ConfigError, "alpha_bar outside [0, 1)");
    if (i > 0) require(cfg_.alpha_bars[i] > cfg_.alpha_bars[i - 1], ErrorCode::ConfigError, "schedule must increase");
  }
  std::mt19937_64 rng(seed);
  const int c = cfg_.channels;
  const int steps = max_steps();
  nn::add_linear(params_, "cond.fc1", cfg_.embedding_dim + steps, cfg_.cond_hidden, rng);
  nn::add_linear(params_, "cond.out", cfg_.cond_hidden, 2 * c * (1 + cfg_.blocks), rng, 1.0, /*zero=*/true);
  nn::add_conv(params_, "conv_in", 3, c, 3, rng);
  params_.add("pos", Tensor({c, cfg_.latent_shape[1], cfg_.latent_shape[2]}));
  for (int b = 0; b < cfg_.blocks; ++b) {
    nn::add_conv(params_, "block" + std::to_string(b) + ".conv1", c, c, 3, rng);
    nn::add_conv(params_, "block" + std::to_string(b) + ".conv2", c, c, 3, rng, 0.5);
  }
  nn::add_conv(params_, "conv_out", c, 3, 3, rng, 0.5);
}

std::vector<int> ToyGenerator::schedule(int steps) const {
  const int total = max_steps();
  require(steps >= 1 && steps <= total, ErrorCode::InvalidParameter,
          "steps must lie in [1, " + std::to_string(total) + "]");
  std::vector<int> idx;
  if (steps == 1) return {0};
  for (int i = 0; i < steps; ++i)
    idx.push_back(static_cast<int>(std::lround(static_cast<double>(i) * (total - 1) / (steps - 1))));
  return idx;
}

Var ToyGenerator::pool(ad::Graph&, const std::vector<Var>& prompts) const {
  std::vector<Var> rows;
  for (const Var& p : prompts) {
    require(p.value().rank() == 2 && p.shape()[1] == cfg_.embedding_dim && p.shape()[0] > 0, ErrorCode::ShapeMismatch,
            "prompt embedding " + ad::shape_str(p.shape()) + ", expected [L, " + std::to_string(cfg_.embedding_dim) +
                "]");
    rows.push_back(ad::mean_axis1(ad::reshape(p, {1, p.shape()[0], p.shape()[1]})));
  }
  return ad::reshape(ad::stack(rows), {static_cast<int>(prompts.size()), cfg_.embedding_dim});
}

Var ToyGenerator::denoise(const nn::Binder& bind, Var x_t, Var cond, int step) const {
  ad::Graph& g = bind.graph();
  const int n = x_t.shape()[0];
  const int c = cfg_.channels;
  const int steps = max_steps();
  Tensor onehot({n, steps});
  for (int i = 0; i < n; ++i) onehot[static_cast<std::size_t>(i * steps + step)] = 1.0;
  Var m = ad::silu(nn::apply_linear(bind, "cond.fc1", ad::concat_cols(cond, g.constant(std::move(onehot)))));
  m = nn::apply_linear(bind, "cond.out", m);
  auto gamma = [&](int k) { return ad::add_scalar(ad::slice_cols(m, 2 * c * k, c), 1.0); };
  auto beta = [&](int k) { return ad::slice_cols(m, 2 * c * k + c, c); };

  Var h = nn::apply_conv(bind, "conv_in", x_t, 1, 1);
  h = ad::add_map(h, bind("pos"));
  h = ad::silu(ad::film(h, gamma(0), beta(0)));
  for (int b = 0; b < cfg_.blocks; ++b) {
    const std::string p = "block" + std::to_string(b);
    Var r = nn::apply_conv(bind, p + ".conv1", h, 1, 1);
    r = ad::silu(ad::film(r, gamma(b + 1), beta(b + 1)));
    r = nn::apply_conv(bind, p + ".conv2", r, 1, 1);
    h = ad::add(h, r);
  }
  return ad::tanh(nn::apply_conv(bind, "conv_out", ad::silu(h), 1, 1));
}

Var ToyGenerator::generate(ad::Graph& g, Var z, const std::vector<Var>& prompts, int steps) const {
  ad::Shape expect{static_cast<int>(prompts.size())};
  expect.insert(expect.end(), cfg_.latent_shape.begin(), cfg_.latent_shape.end());
  require(!prompts.empty() && z.shape() == expect, ErrorCode::ShapeMismatch,
          "latent " + ad::shape_str(z.shape()) + ", expected " + ad::shape_str(expect));
  const auto sched = schedule(steps);
  nn::Binder bind(g, params_);
  Var cond = pool(g, prompts);
  Var x = z;
  Var x0;
  for (std::size_t i = 0; i < sched.size(); ++i) {
    const double a = cfg_.alpha_bars[static_cast<std::size_t>(sched[i])];
    x0 = denoise(bind, x, cond, sched[i]);
    if (i + 1 == sched.size()) break;
    const double an = cfg_.alpha_bars[static_cast<std::size_t>(sched[i + 1])];
    // Deterministic update: re-noise the x0 estimate with the implied noise direction.
    Var eps = ad::scale(ad::sub(x, ad::scale(x0, std::sqrt(a))), 1.0 / std::sqrt(1.0 - a));
    x = ad::add(ad::scale(x0, std::sqrt(an)), ad::scale(eps, std::sqrt(1.0 - an)));
  }
  Var img = ad::scale(ad::add_scalar(x0, 1.0), 0.5);
  img = ad::resize_bilinear(img, cfg_.image_size, cfg_.image_size);
  return ad::clamp(img, 0.0, 1.0);
}

Tensor sample_latent(const ad::Shape& shape, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, 1.0);
  Tensor z(shape);
  for (double& v : z.data) v = d(rng);
  return z;
}

Tensor generate_batch(const GeneratorBackend& backend, const std::vector<Tensor>& zs,
                      const std::vector<PromptEmbedding>& prompts, int steps) {
  require(zs.size() == prompts.size() && !zs.empty(), ErrorCode::ShapeMismatch, "latent and prompt counts differ");
  ad::Graph g;
  std::vector<Var> zv, pv;
  for (std::size_t i = 0; i < zs.size(); ++i) {
    require(zs[i].shape == backend.latent_shape(), ErrorCode::ShapeMismatch,
            "latent " + ad::shape_str(zs[i].shape) + ", expected " + ad::shape_str(backend.latent_shape()));
    zv.push_back(g.constant(zs[i]));
    pv.push_back(g.constant(prompts[i].tokens));
  }
  return backend.generate(g, ad::stack(zv), pv, steps).value();
}

Tensor generate(const GeneratorBackend& backend, const Tensor& z, const PromptEmbedding& prompt, int steps) {
  Tensor batch = generate_batch(backend, {z}, {prompt}, steps);
  return Tensor(backend.image_shape(), std::move(batch.data));
}

std::vector<double> pretrain_generator(ToyGenerator& generator, const std::vector<SyntheticSample>& dataset,
                                       const TokenEmbeddingTable& table, const PretrainConfig& cfg) {
  require(!dataset.empty(), ErrorCode::InsufficientData, "empty pretraining dataset");
  require(cfg.iterations > 0 && cfg.batch_size > 0 && cfg.learning_rate > 0.0, ErrorCode::ConfigError,
          "pretraining needs positive iterations, batch size and learning rate");
  const auto& gc = generator.config();
  std::vector<Tensor> pooled, targets;
  for (const auto& s : dataset) {
    const auto e = embed_prompt(s.prompt, table);
    Tensor p({1, e.dim()});
    for (int i = 0; i < e.length(); ++i)
      for (int c = 0; c < e.dim(); ++c) p[static_cast<std::size_t>(c)] += e.tokens[static_cast<std::size_t>(i * e.dim() + c)];
    for (double& v : p.data) v /= e.length();
    pooled.push_back(std::move(p));
    targets.push_back(latent_target(s.image, gc.latent_shape));
  }
  std::mt19937_64 rng(cfg.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  nn::Adam opt;
  std::vector<double> losses;
  const std::size_t per = ad::shape_numel(gc.latent_shape);
  for (int it = 0; it < cfg.iterations; ++it) {
    std::vector<Tensor> xt, x0, cond;
    std::vector<int> steps;
    for (int b = 0; b < cfg.batch_size; ++b) {
      const std::size_t k = rng() % dataset.size();
      const int step = static_cast<int>(rng() % gc.alpha_bars.size());
      const double a = gc.alpha_bars[static_cast<std::size_t>(step)];
      Tensor x(gc.latent_shape);
      for (std::size_t i = 0; i < per; ++i) x[i] = std::sqrt(a) * targets[k][i] + std::sqrt(1.0 - a) * normal(rng);
      xt.push_back(std::move(x));
      x0.push_back(targets[k]);
      cond.push_back(pooled[k]);
      steps.push_back(step);
    }
    generator.params().zero_grad();
    ad::Graph g;
    nn::Binder bind(g, generator.params(), true);
    // Items are grouped by schedule step so each group shares its step embedding.
    double total = 0.0;
    std::vector<Var> terms;
    for (int step = 0; step < generator.max_steps(); ++step) {
      std::vector<Var> xs, ts, cs;
      for (int b = 0; b < cfg.batch_size; ++b)
        if (steps[static_cast<std::size_t>(b)] == step) {
          xs.push_back(g.constant(xt[static_cast<std::size_t>(b)]));
          ts.push_back(g.constant(x0[static_cast<std::size_t>(b)]));
          cs.push_back(g.constant(cond[static_cast<std::size_t>(b)]));
        }
      if (xs.empty()) continue;
      const int n = static_cast<int>(xs.size());
      Var c = ad::reshape(ad::stack(cs), {n, gc.embedding_dim});
      Var pred = generator.denoise(bind, ad::stack(xs), c, step);
      terms.push_back(ad::scale(ad::mse(pred, ad::stack(ts)), static_cast<double>(n) / cfg.batch_size));
    }
    Var loss = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) loss = ad::add(loss, terms[i]);
    total = loss.value()[0];
    require(std::isfinite(total), ErrorCode::DivergenceDetected,
            "generator pretraining loss became non-finite at step " + std::to_string(it));
    g.backward(loss);
    nn::clip_grad_norm({&generator.params()}, 1.0);
    const double progress = static_cast<double>(it) / cfg.iterations;
    opt.step({&generator.params()}, cfg.learning_rate * 0.5 * (1.0 + std::cos(std::numbers::pi * progress)));
    losses.push_back(total);
  }
  return losses;
}

// ---------------------------------------------------------------- image files

Tensor quantize8(const Tensor& image) {
  Tensor out = image;
  for (double& v : out.data) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

void save_png(const Tensor& image, const std::filesystem::path& path) {
  require(image.rank() == 3 && image.dim(0) == 3, ErrorCode::ShapeMismatch, "PNG export needs a [3, H, W] image");
  const int h = image.dim(1), w = image.dim(2);
  cv::Mat mat(h, w, CV_8UC3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) {
        const double v = std::clamp(image[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x], 0.0, 1.0);
        // OpenCV stores BGR.
        mat.at<cv::Vec3b>(y, x)[2 - c] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  require(cv::imwrite(path.string(), mat), ErrorCode::IoError, "cannot write " + path.string());
}

Tensor load_image(const std::filesystem::path& path) {
  cv::Mat mat = cv::imread(path.string(), cv::IMREAD_COLOR);
  require(!mat.empty(), ErrorCode::IoError, "cannot read image " + path.string());
  const int h = mat.rows, w = mat.cols;
  Tensor img({3, h, w});
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        img[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y) * w + x] =
            mat.at<cv::Vec3b>(y, x)[2 - c] / 255.0;
  return img;
}

}  // namespace conceptmark
