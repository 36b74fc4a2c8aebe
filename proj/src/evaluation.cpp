#include "conceptmark/evaluation.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <ctime>
#include <fstream>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <set>
#include <sstream>

#include "conceptmark/error.hpp"

namespace conceptmark {

using nlohmann::json;

namespace {

std::uint64_t mix(std::uint64_t seed, std::string_view tag, std::uint64_t k = 0) {
  std::uint64_t h = nn::fnv1a(&seed, sizeof seed);
  h = nn::fnv1a(tag.data(), tag.size(), h);
  return nn::fnv1a(&k, sizeof k, h);
}

int hamming(const Secret& a, const Secret& b) {
  int d = 0;
  for (int i = 0; i < a.length(); ++i) d += a.bits[static_cast<std::size_t>(i)] != b.bits[static_cast<std::size_t>(i)];
  return d;
}

std::vector<double> unit(std::vector<double> v) {
  double n = 0.0;
  for (double x : v) n += x * x;
  n = std::sqrt(n);
  if (n > 0.0)
    for (double& x : v) x /= n;
  return v;
}

double pct(double fraction) { return 100.0 * fraction; }


// Order that alternates object and style concepts so every prefix mixes both kinds.
std::vector<std::string> interleaved_ids(const Registry& registry) {
  const auto objects = registry.ids(ConceptKind::Object);
  const auto styles = registry.ids(ConceptKind::Style);
  std::vector<std::string> out;
  for (std::size_t i = 0; i < std::max(objects.size(), styles.size()); ++i) {
    if (i < objects.size()) out.push_back(objects[i]);
    if (i < styles.size()) out.push_back(styles[i]);
  }
  for (const auto& id : registry.ids(ConceptKind::General)) out.push_back(id);
  return out;
}

}  // namespace

std::string utc_timestamp() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

double median(std::vector<double> values) {
  require(!values.empty(), ErrorCode::InsufficientData, "median of an empty set");
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  return n % 2 == 1 ? values[n / 2] : 0.5 * (values[n / 2 - 1] + values[n / 2]);
}

double attribution_accuracy(const std::vector<AttributionResult>& results) {
  require(!results.empty(), ErrorCode::InsufficientData, "no attribution results");
  std::size_t exact = 0;
  for (const auto& r : results) exact += r.bit_accuracy == 1.0;
  return static_cast<double>(exact) / static_cast<double>(results.size());
}

double match_rate(const std::vector<AttributionResult>& results) {
  require(!results.empty(), ErrorCode::InsufficientData, "no attribution results");
  std::size_t m = 0;
  for (const auto& r : results) m += r.match;
  return static_cast<double>(m) / static_cast<double>(results.size());
}

double mean_bit_accuracy(const std::vector<AttributionResult>& results) {
  require(!results.empty(), ErrorCode::InsufficientData, "no attribution results");
  double s = 0.0;
  for (const auto& r : results) s += r.bit_accuracy;
  return s / static_cast<double>(results.size());
}

double mean_cosine(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  require(a.size() == b.size() && !a.empty(), ErrorCode::LengthMismatch, "paired feature lists differ in length");
  ad::Graph g;
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    require(a[i].size() == b[i].size() && !a[i].empty(), ErrorCode::DimensionMismatch, "feature widths differ");
    const int d = static_cast<int>(a[i].size());
    s += ad::cosine_rows(g.constant(Tensor({1, d}, a[i])), g.constant(Tensor({1, d}, b[i]))).value()[0];
  }
  return s / static_cast<double>(a.size());
}

namespace {

struct FeatureRows {
  std::vector<std::vector<double>> style, semantic;
};

FeatureRows features_of(const FeatureBackbone& backbone, const std::vector<Tensor>& images) {
  FeatureRows out;
  constexpr std::size_t kChunk = 64;
  for (std::size_t s = 0; s < images.size(); s += kChunk) {
    const std::size_t e = std::min(images.size(), s + kChunk);
    ad::Graph g;
    std::vector<Var> xs;
    for (std::size_t i = s; i < e; ++i) xs.push_back(g.constant(images[i]));
    const ImageFeatures f = backbone.image_features(g, ad::stack(xs));
    const int ds = f.style.shape()[1], dm = f.semantic.shape()[1];
    for (std::size_t i = 0; i < e - s; ++i) {
      const auto& sv = f.style.value().data;
      const auto& mv = f.semantic.value().data;
      out.style.emplace_back(sv.begin() + static_cast<std::ptrdiff_t>(i * ds), sv.begin() + static_cast<std::ptrdiff_t>((i + 1) * ds));
      out.semantic.emplace_back(mv.begin() + static_cast<std::ptrdiff_t>(i * dm), mv.begin() + static_cast<std::ptrdiff_t>((i + 1) * dm));
    }
  }
  return out;
}

}  // namespace

FidelityScores fidelity_scores(const FeatureBackbone& backbone, const std::vector<Tensor>& clean,
                               const std::vector<Tensor>& wm) {
  require(clean.size() == wm.size() && !clean.empty(), ErrorCode::LengthMismatch, "clean and watermarked sets differ");
  const FeatureRows a = features_of(backbone, clean);
  const FeatureRows b = features_of(backbone, wm);
  return {mean_cosine(a.style, b.style), mean_cosine(a.semantic, b.semantic)};
}

json DetectionRates::to_json() const {
  return {{"tpr", tpr}, {"fpr", fpr}, {"precision", precision}, {"f1", f1}, {"positives", positives},
          {"negatives", negatives}};
}

DetectionRates detection_rates(int true_matches, int positives, int false_matches, int negatives) {
  require(positives > 0 && negatives > 0, ErrorCode::InsufficientData, "both test sets must be nonempty");
  require(true_matches >= 0 && true_matches <= positives && false_matches >= 0 && false_matches <= negatives,
          ErrorCode::InvalidParameter, "match counts out of range");
  DetectionRates r;
  r.positives = positives;
  r.negatives = negatives;
  r.tpr = static_cast<double>(true_matches) / positives;
  r.fpr = static_cast<double>(false_matches) / negatives;
  const int claimed = true_matches + false_matches;
  r.precision = claimed == 0 ? 0.0 : static_cast<double>(true_matches) / claimed;
  r.f1 = r.precision + r.tpr == 0.0 ? 0.0 : 2.0 * r.precision * r.tpr / (r.precision + r.tpr);
  return r;
}

DetectionRates comprehensive_test(const RetrievalModel& model, const Registry& registry,
                                  const std::vector<Tensor>& wm_set, const std::vector<Tensor>& clean_set,
                                  const std::string& concept_id, double tau) {
  require(!wm_set.empty() && !clean_set.empty(), ErrorCode::InsufficientData, "both test sets must be nonempty");
  int tp = 0, fp = 0;
  for (const auto& r : attribute_images(model, registry, wm_set, concept_id, tau)) tp += r.match;
  for (const auto& r : attribute_images(model, registry, clean_set, concept_id, tau)) fp += r.match;
  return detection_rates(tp, static_cast<int>(wm_set.size()), fp, static_cast<int>(clean_set.size()));
}

std::vector<RobustnessRow> robustness_sweep(const RetrievalModel& model, const Registry& registry,
                                            const std::vector<LabeledImage>& images,
                                            const std::vector<DistortionSpec>& suite) {
  require(!images.empty(), ErrorCode::InsufficientData, "robustness sweep needs images");
  auto score = [&](const std::vector<Tensor>& distorted) {
    std::map<std::string, std::vector<std::size_t>> by_concept;
    for (std::size_t i = 0; i < images.size(); ++i) by_concept[images[i].concept_id].push_back(i);
    std::vector<AttributionResult> all;
    for (const auto& [id, idx] : by_concept) {
      std::vector<Tensor> batch;
      for (std::size_t i : idx) batch.push_back(distorted[i]);
      for (auto& r : attribute_images(model, registry, batch, id)) all.push_back(std::move(r));
    }
    return std::pair{mean_bit_accuracy(all), attribution_accuracy(all)};
  };
  std::vector<RobustnessRow> rows;
  std::vector<Tensor> plain;
  for (const auto& im : images) plain.push_back(im.image);
  const auto [b0, a0] = score(plain);
  rows.push_back({"none", json{{"kind", "none"}}, b0, a0});
  for (const auto& spec : suite) {
    spec.validate();
    std::vector<Tensor> distorted;
    for (std::size_t i = 0; i < images.size(); ++i) {
      DistortionSpec s = spec;
      s.seed = mix(spec.seed, "image", i);
      if (spec.kind == DistortionKind::Adversarial)
        distorted.push_back(adversarial_attack(model, registry, images[i].image, images[i].concept_id,
                                               spec.param("epsilon"), static_cast<int>(spec.param("steps"))));
      else
        distorted.push_back(apply(s, images[i].image));
    }
    const auto [b, a] = score(distorted);
    rows.push_back({spec.label(), spec.to_json(), b, a});
  }
  return rows;
}

json MultiConceptReport::to_json() const {
  json s = json::array();
  for (const auto& m : samples) {
    json rs = json::array();
    for (std::size_t i = 0; i < m.results.size(); ++i) {
      json r = m.results[i].to_json();
      r["disentangled"] = static_cast<bool>(m.disentangled[i]);
      rs.push_back(r);
    }
    s.push_back({{"prompt", m.prompt}, {"targets", rs}});
  }
  return {{"bit_accuracy", pct(bit_accuracy)},
          {"attribution_accuracy", pct(attribution_accuracy)},
          {"disentanglement", pct(disentanglement)},
          {"samples", s}};
}

MultiConceptReport multiconcept_eval(const ModelState& state, const FrozenBackend& backend, const Registry& registry,
                                     const std::vector<MultiConceptSample>& dataset, MultiVariant variant,
                                     double alpha, std::uint64_t seed, double tau) {
  require(!dataset.empty(), ErrorCode::InsufficientData, "empty multi-concept dataset");
  std::vector<GenerationRequest> reqs;
  for (std::size_t i = 0; i < dataset.size(); ++i)
    reqs.push_back({dataset[i].prompt, dataset[i].targets,
                    sample_latent(backend.generator.latent_shape(), mix(seed, "multi", i)),
                    variant == MultiVariant::PromptWeighted ? alpha : 1.0});
  const auto images = generate_watermarked(state, backend, registry, reqs);
  const RetrievalModel model = state.retrieval_model(backend);
  MultiConceptReport report;
  std::vector<AttributionResult> all;
  std::size_t clean_split = 0, targets = 0;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    MultiSampleResult m;
    m.prompt = dataset[i].prompt;
    m.results = attribute_multi(model, registry, images[i], dataset[i].targets, tau);
    for (std::size_t a = 0; a < m.results.size(); ++a) {
      const Secret& own = registry.get(dataset[i].targets[a]).secret;
      const int d_own = hamming(m.results[a].retrieved, own);
      bool ok = true;
      for (std::size_t b = 0; b < m.results.size(); ++b)
        if (b != a && hamming(m.results[a].retrieved, registry.get(dataset[i].targets[b]).secret) <= d_own) ok = false;
      m.disentangled.push_back(ok);
      clean_split += ok;
      ++targets;
      all.push_back(m.results[a]);
    }
    report.samples.push_back(std::move(m));
  }
  report.bit_accuracy = mean_bit_accuracy(all);
  report.attribution_accuracy = attribution_accuracy(all);
  report.disentanglement = static_cast<double>(clean_split) / static_cast<double>(targets);
  return report;
}

std::vector<MultiConceptSample> make_pair_samples(const TrainConfig& cfg, const Registry& registry,
                                                  const std::vector<std::string>& ids, int count,
                                                  std::uint64_t seed) {
  std::vector<std::string> objects, styles;
  for (const auto& id : ids) (registry.get(id).kind == ConceptKind::Style ? styles : objects).push_back(id);
  require(!objects.empty() && !styles.empty(), ErrorCode::InsufficientData,
          "pair samples need at least one object and one style concept");
  std::vector<MultiConceptSample> out;
  for (int k = 0; k < count; ++k) {
    // Cycle through the grid so every pair is covered before any repeats.
    const std::size_t cell = static_cast<std::size_t>(k) % (objects.size() * styles.size());
    const std::string& o = objects[cell / styles.size()];
    const std::string& s = styles[cell % styles.size()];
    out.push_back({heldout_prompt(cfg, registry, {o, s}, mix(seed, "pair", static_cast<std::uint64_t>(k))), {o, s}});
  }
  return out;
}

HeldoutSet make_heldout_set(const ModelState& state, const FrozenBackend& backend, const Registry& registry,
                            const std::vector<std::string>& ids, int per_concept, std::uint64_t seed) {
  require(per_concept > 0 && !ids.empty(), ErrorCode::InsufficientData, "held-out set needs concepts and images");
  HeldoutSet set;
  for (const auto& id : ids)
    for (int k = 0; k < per_concept; ++k) {
      const std::uint64_t s = mix(mix(seed, id), "heldout", static_cast<std::uint64_t>(k));
      set.requests.push_back({heldout_prompt(state.config, registry, {id}, s), {id},
                              sample_latent(backend.generator.latent_shape(), mix(s, "z")), 1.0});
      set.concept_ids.push_back(id);
    }
  set.wm = generate_watermarked(state, backend, registry, set.requests);
  set.clean = generate_clean(state, backend, set.requests);
  return set;
}

// ---------------------------------------------------------------- reports

namespace {

json metrics_json(const ConceptMetrics& m) {
  return {{"bit_accuracy", pct(m.bit_accuracy)}, {"attribution_accuracy", pct(m.attribution_accuracy)},
          {"images", m.images}};
}

ConceptMetrics metrics_from(const json& j) {
  return {j.at("bit_accuracy").get<double>() / 100.0, j.at("attribution_accuracy").get<double>() / 100.0,
          j.at("images").get<int>()};
}

}  // namespace

json MetricsReport::to_json() const {
  json pc = json::object();
  for (const auto& [id, m] : per_concept) pc[id] = metrics_json(m);
  json rob = json::array();
  for (const auto& r : robustness)
    rob.push_back({{"label", r.label},
                   {"spec", r.spec},
                   {"bit_accuracy", pct(r.bit_accuracy)},
                   {"attribution_accuracy", pct(r.attribution_accuracy)}});
  json j = {{"schema_version", 1},
            {"experiment", experiment},
            {"config", config},
            {"units", "accuracies in percent, similarities as cosine"},
            {"per_concept", pc},
            {"aggregate", metrics_json(aggregate)},
            {"fidelity", {{"csd_score", fidelity.csd_score}, {"semantic_score", fidelity.semantic_score}}},
            {"robustness", rob},
            {"series", {{"x_label", series_x_label}, {"x", series_x}, {"values", series}}},
            {"reference", reference},
            {"extra", extra},
            {"seeds", seeds},
            {"created_at", created_at}};
  j["detection"] = detection ? detection->to_json() : json();
  return j;
}

MetricsReport MetricsReport::from_json(const json& j) {
  MetricsReport r;
  try {
    if (j.at("schema_version").get<int>() != 1) fail(ErrorCode::SchemaVersionMismatch, "report schema version");
    r.experiment = j.at("experiment").get<std::string>();
    r.config = j.at("config");
    for (const auto& [id, m] : j.at("per_concept").items()) r.per_concept[id] = metrics_from(m);
    r.aggregate = metrics_from(j.at("aggregate"));
    r.fidelity = {j.at("fidelity").at("csd_score").get<double>(), j.at("fidelity").at("semantic_score").get<double>()};
    for (const auto& row : j.at("robustness"))
      r.robustness.push_back({row.at("label").get<std::string>(), row.at("spec"),
                              row.at("bit_accuracy").get<double>() / 100.0,
                              row.at("attribution_accuracy").get<double>() / 100.0});
    const json& d = j.at("detection");
    if (!d.is_null())
      r.detection = DetectionRates{d.at("tpr").get<double>(),       d.at("fpr").get<double>(),
                                   d.at("precision").get<double>(), d.at("f1").get<double>(),
                                   d.at("positives").get<int>(),    d.at("negatives").get<int>()};
    r.series_x_label = j.at("series").at("x_label").get<std::string>();
    r.series_x = j.at("series").at("x").get<std::vector<double>>();
    r.series = j.at("series").at("values").get<std::map<std::string, std::vector<double>>>();
    r.reference = j.at("reference");
    r.extra = j.at("extra");
    r.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    r.created_at = j.at("created_at").get<std::string>();
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, std::string("report: ") + e.what());
  }
  return r;
}

MetricsReport evaluate_heldout(const ModelState& state, const FrozenBackend& backend, const Registry& registry,
                               const HeldoutSet& set, double tau) {
  MetricsReport report;
  report.experiment = "heldout";
  report.config = state.config.to_json();
  report.created_at = utc_timestamp();
  const RetrievalModel model = state.retrieval_model(backend);
  std::map<std::string, std::vector<std::size_t>> by_concept;
  for (std::size_t i = 0; i < set.concept_ids.size(); ++i) by_concept[set.concept_ids[i]].push_back(i);
  std::vector<AttributionResult> all;
  for (const auto& [id, idx] : by_concept) {
    std::vector<Tensor> batch;
    for (std::size_t i : idx) batch.push_back(set.wm[i]);
    const auto rs = attribute_images(model, registry, batch, id, tau);
    report.per_concept[id] = {mean_bit_accuracy(rs), attribution_accuracy(rs), static_cast<int>(rs.size())};
    all.insert(all.end(), rs.begin(), rs.end());
  }
  report.aggregate = {mean_bit_accuracy(all), attribution_accuracy(all), static_cast<int>(all.size())};
  report.fidelity = fidelity_scores(backend.backbone, set.clean, set.wm);
  report.reference = {{"bit_accuracy", 98.33}, {"attribution_accuracy", 91.67},
                      {"note", "published large-scale figures, not reproducible with the toy backend"}};
  report.seeds = {state.config.seed};
  return report;
}

Registry rekey_registry(const Registry& registry, int n_bits) {
  Registry out(n_bits, registry.seed());
  for (const auto& r : registry.records()) out.register_concept(r.token, r.kind, std::nullopt, r.query_template);
  return out;
}

MetricsReport bitlength_study(const StudyConfig& cfg, const FrozenBackend& backend, const Registry& template_registry,
                              const std::vector<int>& lengths) {
  require(!lengths.empty() && !cfg.seeds.empty(), ErrorCode::InsufficientData, "study needs lengths and seeds");
  MetricsReport report;
  report.experiment = "bitlength";
  report.config = cfg.train.to_json();
  report.created_at = utc_timestamp();
  report.series_x_label = "secret length (bits)";
  report.seeds = cfg.seeds;
  report.reference = {{"attribution_accuracy", {{"5", 94.38}, {"16", 91.67}, {"64", 84.18}}},
                      {"note", "published large-scale figures"}};
  json runs = json::array();
  for (int n : lengths) {
    const Registry reg = rekey_registry(template_registry, n);
    std::vector<double> attr, bits, csd;
    for (std::uint64_t seed : cfg.seeds) {
      TrainConfig t = cfg.train;
      t.n_bits = n;
      t.seed = seed;
      const ModelState st = train(t, reg, backend);
      const auto set = make_heldout_set(st, backend, reg, st.trained_concepts, cfg.images_per_concept, seed);
      const auto m = evaluate_heldout(st, backend, reg, set, cfg.tau);
      attr.push_back(pct(m.aggregate.attribution_accuracy));
      bits.push_back(pct(m.aggregate.bit_accuracy));
      csd.push_back(m.fidelity.csd_score);
      runs.push_back({{"bits", n}, {"seed", seed}, {"attribution_accuracy", attr.back()},
                      {"bit_accuracy", bits.back()}, {"csd_score", csd.back()}});
    }
    report.series_x.push_back(n);
    report.series["attribution_accuracy"].push_back(median(attr));
    report.series["bit_accuracy"].push_back(median(bits));
    report.series["csd_score"].push_back(median(csd));
  }
  report.extra["runs"] = runs;
  return report;
}

MetricsReport scaling_study(const StudyConfig& cfg, const FrozenBackend& backend, const Registry& registry,
                            const std::vector<int>& concept_counts) {
  const auto order = interleaved_ids(registry);
  MetricsReport report;
  report.experiment = "scaling";
  report.config = cfg.train.to_json();
  report.created_at = utc_timestamp();
  report.series_x_label = "concepts";
  report.seeds = cfg.seeds;
  json runs = json::array();
  for (int count : concept_counts) {
    require(count > 0 && static_cast<std::size_t>(count) <= order.size(), ErrorCode::InvalidParameter,
            "concept count " + std::to_string(count) + " exceeds the registry");
    std::vector<double> attr, bits, csd;
    for (std::uint64_t seed : cfg.seeds) {
      TrainConfig t = cfg.train;
      t.seed = seed;
      t.concepts.assign(order.begin(), order.begin() + count);
      const ModelState st = train(t, registry, backend);
      const auto set = make_heldout_set(st, backend, registry, st.trained_concepts, cfg.images_per_concept, seed);
      const auto m = evaluate_heldout(st, backend, registry, set, cfg.tau);
      attr.push_back(pct(m.aggregate.attribution_accuracy));
      bits.push_back(pct(m.aggregate.bit_accuracy));
      csd.push_back(m.fidelity.csd_score);
      runs.push_back({{"concepts", count}, {"seed", seed}, {"attribution_accuracy", attr.back()},
                      {"bit_accuracy", bits.back()}, {"csd_score", csd.back()}});
    }
    report.series_x.push_back(count);
    report.series["attribution_accuracy"].push_back(median(attr));
    report.series["bit_accuracy"].push_back(median(bits));
    report.series["csd_score"].push_back(median(csd));
  }
  report.extra["runs"] = runs;
  return report;
}

MetricsReport sequential_study(const StudyConfig& cfg, const FrozenBackend& backend, const Registry& registry,
                               int initial_k, int increment, int final_k, double extra_fraction) {
  const auto order = interleaved_ids(registry);
  require(initial_k > 0 && increment > 0 && final_k >= initial_k && static_cast<std::size_t>(final_k) <= order.size(),
          ErrorCode::InvalidParameter, "invalid sequential schedule");
  const std::uint64_t seed = cfg.seeds.front();
  TrainConfig t = cfg.train;
  t.seed = seed;
  const std::vector<std::string> initial(order.begin(), order.begin() + initial_k);
  t.concepts = initial;
  ModelState st = train(t, registry, backend);

  MetricsReport report;
  report.experiment = "sequential";
  report.config = t.to_json();
  report.created_at = utc_timestamp();
  report.series_x_label = "concepts";
  report.seeds = {seed};
  report.reference = {{"attribution_accuracy", {{"start", 98.22}, {"end", 94.13}}},
                      {"csd_score", {{"start", 0.91}, {"end", 0.84}}},
                      {"note", "published large-scale figures"}};
  json stages = json::array();
  auto record = [&](int k, const std::vector<std::string>& fresh) {
    const auto old_set = make_heldout_set(st, backend, registry, initial, cfg.images_per_concept, seed);
    const auto all_set = make_heldout_set(st, backend, registry, st.trained_concepts, cfg.images_per_concept, seed);
    const auto m_old = evaluate_heldout(st, backend, registry, old_set, cfg.tau);
    const auto m_all = evaluate_heldout(st, backend, registry, all_set, cfg.tau);
    report.series_x.push_back(k);
    report.series["initial_attribution_accuracy"].push_back(pct(m_old.aggregate.attribution_accuracy));
    report.series["initial_bit_accuracy"].push_back(pct(m_old.aggregate.bit_accuracy));
    report.series["attribution_accuracy"].push_back(pct(m_all.aggregate.attribution_accuracy));
    report.series["csd_score"].push_back(m_all.fidelity.csd_score);
    json stage = {{"concepts", k}, {"new", fresh}, {"initial", metrics_json(m_old.aggregate)},
                  {"all", metrics_json(m_all.aggregate)}};
    if (!fresh.empty()) {
      const auto new_set = make_heldout_set(st, backend, registry, fresh, cfg.images_per_concept, seed);
      stage["new_metrics"] = metrics_json(evaluate_heldout(st, backend, registry, new_set, cfg.tau).aggregate);
    }
    stages.push_back(stage);
    report.per_concept = m_all.per_concept;
    report.aggregate = m_all.aggregate;
    report.fidelity = m_all.fidelity;
  };
  record(initial_k, {});
  for (int k = initial_k; k < final_k; k += increment) {
    const int next = std::min(final_k, k + increment);
    const std::vector<std::string> fresh(order.begin() + k, order.begin() + next);
    st = sequential_update(st, registry, backend, fresh, extra_fraction);
    record(next, fresh);
  }
  report.extra["stages"] = stages;
  report.extra["extra_fraction"] = extra_fraction;
  return report;
}

// ---------------------------------------------------------------- passive baseline

std::vector<std::vector<double>> passive_features(const FeatureBackbone& backbone, const std::vector<Tensor>& images) {
  const FeatureRows f = features_of(backbone, images);
  std::vector<std::vector<double>> out;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto v = unit(f.style[i]);
    const auto s = unit(f.semantic[i]);
    v.insert(v.end(), s.begin(), s.end());
    out.push_back(std::move(v));
  }
  return out;
}

PassiveGallery build_gallery(const FeatureBackbone& backbone,
                             const std::map<std::string, std::vector<Tensor>>& references) {
  require(references.size() >= 2, ErrorCode::InsufficientData, "gallery needs at least two concepts");
  PassiveGallery g;
  for (const auto& [id, images] : references) {
    require(!images.empty(), ErrorCode::InsufficientData, "gallery concept '" + id + "' has no references");
    const auto feats = passive_features(backbone, images);
    std::vector<double> c(feats.front().size(), 0.0);
    for (const auto& f : feats)
      for (std::size_t k = 0; k < c.size(); ++k) c[k] += f[k] / static_cast<double>(feats.size());
    g.concept_ids.push_back(id);
    g.centroids.push_back(std::move(c));
  }
  return g;
}

namespace {

std::string nearest(const PassiveGallery& gallery, const std::vector<double>& f) {
  double best = std::numeric_limits<double>::infinity();
  std::string id;
  for (std::size_t c = 0; c < gallery.centroids.size(); ++c) {
    double d = 0.0;
    for (std::size_t k = 0; k < f.size(); ++k) d += (f[k] - gallery.centroids[c][k]) * (f[k] - gallery.centroids[c][k]);
    if (d < best) {
      best = d;
      id = gallery.concept_ids[c];
    }
  }
  return id;
}

}  // namespace

std::string passive_baseline_attribute(const FeatureBackbone& backbone, const PassiveGallery& gallery,
                                       const Tensor& image) {
  require(!gallery.centroids.empty(), ErrorCode::InsufficientData, "empty gallery");
  return nearest(gallery, passive_features(backbone, {image}).front());
}

double passive_accuracy(const FeatureBackbone& backbone, const PassiveGallery& gallery,
                        const std::vector<LabeledImage>& images) {
  require(!images.empty() && !gallery.centroids.empty(), ErrorCode::InsufficientData, "passive accuracy needs data");
  std::vector<Tensor> xs;
  for (const auto& im : images) xs.push_back(im.image);
  const auto feats = passive_features(backbone, xs);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < images.size(); ++i) hit += nearest(gallery, feats[i]) == images[i].concept_id;
  return static_cast<double>(hit) / static_cast<double>(images.size());
}

// ---------------------------------------------------------------- files and plots

namespace {

std::filesystem::path sibling(const std::filesystem::path& path, const std::string& suffix) {
  std::filesystem::path p = path;
  p.replace_filename(path.stem().string() + suffix);
  return p;
}

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

}  // namespace

void write_report(const MetricsReport& report, const std::filesystem::path& path) {
  write_text_file(path, report.to_json().dump(2) + "\n");
  std::string csv = "concept,bit_accuracy,attribution_accuracy,images\n";
  for (const auto& [id, m] : report.per_concept)
    csv += csv_quote(id) + "," + fmt(pct(m.bit_accuracy)) + "," + fmt(pct(m.attribution_accuracy)) + "," +
           std::to_string(m.images) + "\n";
  csv += "ALL," + fmt(pct(report.aggregate.bit_accuracy)) + "," + fmt(pct(report.aggregate.attribution_accuracy)) +
         "," + std::to_string(report.aggregate.images) + "\n";
  write_text_file(sibling(path, ".csv"), csv);
  if (!report.robustness.empty()) {
    std::string r = "distortion,bit_accuracy,attribution_accuracy\n";
    for (const auto& row : report.robustness)
      r += csv_quote(row.label) + "," + fmt(pct(row.bit_accuracy)) + "," + fmt(pct(row.attribution_accuracy)) + "\n";
    write_text_file(sibling(path, "_robustness.csv"), r);
  }
  if (!report.series_x.empty()) {
    std::string s = csv_quote(report.series_x_label);
    for (const auto& [name, _] : report.series) s += "," + csv_quote(name);
    s += "\n";
    for (std::size_t i = 0; i < report.series_x.size(); ++i) {
      s += fmt(report.series_x[i]);
      for (const auto& [_, values] : report.series) s += "," + (i < values.size() ? fmt(values[i]) : std::string());
      s += "\n";
    }
    write_text_file(sibling(path, "_series.csv"), s);
  }
}

MetricsReport read_report(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  try {
    return MetricsReport::from_json(json::parse(text));
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, path.string() + ": " + e.what());
  }
}

void plot_report(const MetricsReport& report, const std::filesystem::path& path) {
  const int W = 720, H = 460, left = 70, right = 200, top = 40, bottom = 60;
  cv::Mat canvas(H, W, CV_8UC3, cv::Scalar(255, 255, 255));
  const cv::Scalar black(0, 0, 0), grid(225, 225, 225);
  const std::vector<cv::Scalar> palette{{200, 80, 30}, {40, 140, 40}, {40, 40, 200}, {150, 60, 150}, {30, 150, 190}};
  const int pw = W - left - right, ph = H - top - bottom;

  // Accuracies share a 0-100 axis; cosine series are drawn on the same axis scaled by 100.
  auto y_of = [&](double v) { return top + static_cast<int>(std::lround(ph * (1.0 - std::clamp(v, 0.0, 100.0) / 100.0))); };
  for (int t = 0; t <= 100; t += 20) {
    cv::line(canvas, {left, y_of(t)}, {left + pw, y_of(t)}, grid, 1);
    cv::putText(canvas, std::to_string(t), {left - 40, y_of(t) + 5}, cv::FONT_HERSHEY_SIMPLEX, 0.45, black, 1,
                cv::LINE_AA);
  }
  cv::rectangle(canvas, {left, top}, {left + pw, top + ph}, black, 1);
  cv::putText(canvas, report.experiment, {left, top - 14}, cv::FONT_HERSHEY_SIMPLEX, 0.6, black, 1, cv::LINE_AA);

  if (!report.series_x.empty()) {
    const double x0 = *std::min_element(report.series_x.begin(), report.series_x.end());
    const double x1 = *std::max_element(report.series_x.begin(), report.series_x.end());
    auto x_of = [&](double v) {
      return left + (x1 == x0 ? pw / 2 : static_cast<int>(std::lround(pw * (v - x0) / (x1 - x0))));
    };
    for (double x : report.series_x) {
      cv::putText(canvas, fmt(x), {x_of(x) - 8, top + ph + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.45, black, 1, cv::LINE_AA);
    }
    cv::putText(canvas, report.series_x_label, {left + pw / 2 - 60, H - 15}, cv::FONT_HERSHEY_SIMPLEX, 0.5, black, 1,
                cv::LINE_AA);
    int k = 0;
    for (const auto& [name, values] : report.series) {
      const bool cosine = name.find("score") != std::string::npos;
      const cv::Scalar col = palette[static_cast<std::size_t>(k) % palette.size()];
      std::vector<cv::Point> pts;
      for (std::size_t i = 0; i < values.size() && i < report.series_x.size(); ++i)
        pts.emplace_back(x_of(report.series_x[i]), y_of(cosine ? 100.0 * values[i] : values[i]));
      for (std::size_t i = 1; i < pts.size(); ++i) cv::line(canvas, pts[i - 1], pts[i], col, 2, cv::LINE_AA);
      for (const auto& p : pts) cv::circle(canvas, p, 4, col, cv::FILLED, cv::LINE_AA);
      cv::putText(canvas, name + (cosine ? " x100" : ""), {left + pw + 10, top + 20 + 22 * k},
                  cv::FONT_HERSHEY_SIMPLEX, 0.4, col, 1, cv::LINE_AA);
      ++k;
    }
  } else {
    std::vector<std::pair<std::string, double>> bars;
    if (!report.robustness.empty())
      for (const auto& r : report.robustness) bars.emplace_back(r.label.substr(0, r.label.find(' ')), pct(r.bit_accuracy));
    else
      for (const auto& [id, m] : report.per_concept) bars.emplace_back(id, pct(m.attribution_accuracy));
    const int n = std::max<int>(1, static_cast<int>(bars.size()));
    const int slot = pw / n;
    for (int i = 0; i < static_cast<int>(bars.size()); ++i) {
      const int x = left + i * slot + slot / 6;
      cv::rectangle(canvas, {x, y_of(bars[static_cast<std::size_t>(i)].second)}, {x + slot * 2 / 3, top + ph},
                    palette[0], cv::FILLED);
      cv::putText(canvas, bars[static_cast<std::size_t>(i)].first.substr(0, 10), {x - 4, top + ph + 18 + 14 * (i % 2)},
                  cv::FONT_HERSHEY_SIMPLEX, 0.35, black, 1, cv::LINE_AA);
    }
    cv::putText(canvas, report.robustness.empty() ? "attribution accuracy" : "bit accuracy",
                {left + pw + 10, top + 20}, cv::FONT_HERSHEY_SIMPLEX, 0.4, palette[0], 1, cv::LINE_AA);
  }
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  require(cv::imwrite(path.string(), canvas), ErrorCode::IoError, "cannot write plot " + path.string());
}

}  // namespace conceptmark
