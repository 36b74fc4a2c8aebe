// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fails.
//
//   acceptance [--only 1,4,7]
//
// CONCEPTMARK_ACCEPTANCE_CACHE=<dir> keeps trained desk models between runs. Checkpoints
// store float32, so cached runs can differ from fresh ones in the last digits.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdarg>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "conceptmark/cli.hpp"
#include "conceptmark/error.hpp"
#include "conceptmark/evaluation.hpp"
#include "conceptmark/objectives.hpp"
#include "support/fixtures.hpp"

using namespace conceptmark;
using nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace tol {
constexpr double kCeLn2 = 1e-6;
constexpr double kLossSuiteSeconds = 1.0;
constexpr double kGradRelError = 1e-4;
constexpr double kGradAuditSeconds = 60.0;
constexpr double kDeskBitAccuracy = 0.90;
constexpr double kDeskAttribution = 0.75;
constexpr double kDeskCsd = 0.80;
constexpr double kDeskTrainSeconds = 4 * 3600.0;
constexpr double kDisentanglement = 0.90;
constexpr int kCleanImages = 2000;
constexpr double kFpr = 0.01;
constexpr double kRandomBitCenter = 0.50;
constexpr double kRandomBitBand = 0.03;
constexpr double kJpegDropPoints = 10.0;
constexpr double kSequentialDropPoints = 15.0;
constexpr double kSeparation = 2.0;
constexpr double kPassiveGapPoints = 10.0;
}  // namespace tol

namespace {

constexpr int kDeskSteps = 5000;
constexpr double kDeskLr = 1e-3;
constexpr int kImagesPerConcept = 25;
const std::vector<std::uint64_t> kSeeds{0, 1, 2};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, ...) __attribute__((format(printf, 1, 2)));
std::string fmt(const char* f, ...) {
  char buf[512];
  va_list ap;
  va_start(ap, f);
  std::vsnprintf(buf, sizeof buf, f, ap);
  va_end(ap);
  return buf;
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

// ---------------------------------------------------------------- shared desk world

struct Desk {
  Registry registry{8, 7};
  FrozenBackend backend;
  std::optional<fs::path> cache;

  Desk() {
    if (const char* c = std::getenv("CONCEPTMARK_ACCEPTANCE_CACHE")) cache = fs::path(c);
    BackendBuildConfig bc;
    bc.world.shapes = {"circle", "square", "triangle", "cross"};
    bc.world.styles = {"red-stripes", "blue-dots", "green-checker", "amber-waves"};
    bc.generator_pretrain.iterations = 2000;
    const auto t0 = Clock::now();
    if (cache && fs::exists(*cache / "backend" / "backend.json")) {
      backend = load_backend(*cache / "backend");
      register_world_concepts(registry, bc.world.shapes, bc.world.styles);
    } else {
      backend = build_backend(bc, registry);
      if (cache) save_backend(backend, *cache / "backend");
    }
    std::printf("# desk backend ready in %.1fs (%zu concepts)\n", seconds_since(t0), registry.size());
    std::fflush(stdout);
  }

  static TrainConfig preset(std::uint64_t seed) {
    TrainConfig t;
    t.iterations = kDeskSteps;
    t.learning_rate = kDeskLr;
    t.multi_ratio = 0.0;
    t.n_bits = 8;
    t.seed = seed;
    t.checkpoint_every = 0;
    return t;
  }

  /// Trains, or loads a cached result for the same config and registry.
  ModelState train_cached(const TrainConfig& cfg, const Registry& reg, double* train_seconds = nullptr) {
    const std::string key = std::to_string(std::hash<std::string>{}(cfg.to_json().dump() + reg.digest() +
                                                                    backend.digest()));
    const fs::path dir = cache ? *cache / ("model_" + key) : fs::path();
    if (cache && fs::exists(dir / "manifest.json")) {
      if (train_seconds) *train_seconds = json::parse(read_text_file(dir / "seconds.json")).get<double>();
      return load_checkpoint(dir);
    }
    const auto t0 = Clock::now();
    ModelState st = train(cfg, reg, backend);
    const double s = seconds_since(t0);
    std::printf("# trained %d steps, %d bits, seed %llu in %.1fs\n", cfg.iterations, cfg.n_bits,
                static_cast<unsigned long long>(cfg.seed), s);
    std::fflush(stdout);
    if (train_seconds) *train_seconds = s;
    if (cache) {
      save_checkpoint(st, dir);
      write_text_file(dir / "seconds.json", json(s).dump());
    }
    return st;
  }

  struct SeedRun {
    ModelState state;
    HeldoutSet set;
    MetricsReport metrics;
    double train_seconds = 0.0;
  };

  std::vector<SeedRun>& seed_runs() {
    if (runs_.empty())
      for (std::uint64_t s : kSeeds) {
        SeedRun r;
        r.state = train_cached(preset(s), registry, &r.train_seconds);
        r.set = make_heldout_set(r.state, backend, registry, r.state.trained_concepts, kImagesPerConcept, 100 + s);
        r.metrics = evaluate_heldout(r.state, backend, registry, r.set);
        runs_.push_back(std::move(r));
      }
    return runs_;
  }

 private:
  std::vector<SeedRun> runs_;
};

Desk& desk() {
  static Desk d;
  return d;
}

std::vector<LabeledImage> labeled(const HeldoutSet& set) {
  std::vector<LabeledImage> out;
  for (std::size_t i = 0; i < set.wm.size(); ++i) out.push_back({set.concept_ids[i], set.wm[i]});
  return out;
}

// ---------------------------------------------------------------- criteria

Outcome losses() {
  const auto t0 = Clock::now();
  const double ce = loss_ce(Secret({1, 0}), {0.0, 0.0});
  const double same = loss_csd({0.3, -1.2, 2.0}, {0.3, -1.2, 2.0});
  const double orth = loss_csd({1.0, 0.0}, {0.0, 2.0});
  const double anti = loss_csd({1.0, -2.0}, {-1.0, 2.0});
  const LossWeights w;
  const LossBreakdown a = loss_total(0.6931, 0.1, 0.02, 0.3, 0.5, w);
  const LossBreakdown b = loss_total(0.6931, 0.1, 0.02, 0.3, 0.5, w.scaled(2.0));
  const double oracle = 5 * 0.6931 + 5 * 0.1 + 1 * 0.02 + 1 * 0.3;
  const double s = seconds_since(t0);
  const bool ok = std::abs(ce - std::log(2.0)) <= tol::kCeLn2 && same == 0.0 && orth == 1.0 && anti == 2.0 &&
                  std::abs(a.total - oracle) <= 1e-12 && std::abs(b.total - 2 * a.total) <= 1e-12 &&
                  s < tol::kLossSuiteSeconds;
  return {ok, fmt("ce %.9f (ln2 %.9f), csd %g/%g/%g, total %.6f vs %.6f, doubled %.6f, %.3fs", ce, std::log(2.0),
                  same, orth, anti, a.total, oracle, b.total, s)};
}

Outcome gradients() {
  const auto t0 = Clock::now();
  auto w = testsupport::tiny_world();
  auto cfg = testsupport::tiny_train_config();
  cfg.learning_rate = 1e-2;
  ModelState st = train(cfg, w.registry, w.backend);
  const auto batch = sample_batch(cfg, w.registry, w.backend, w.registry.ids(), 99);
  const auto report = gradient_audit(st, w.backend, w.registry, batch);
  const double s = seconds_since(t0);
  std::string groups;
  for (const auto& [g, e] : report.group_error) groups += fmt(" %s=%.1e", g.c_str(), e);
  const bool ok = report.group_error.size() == st.trainable().size() && report.max_rel_error <= tol::kGradRelError &&
                  s < tol::kGradAuditSeconds;
  return {ok, fmt("max rel err %.2e over %zu groups (%s ), %.1fs", report.max_rel_error, report.group_error.size(),
                  groups.c_str() + 1, s)};
}

Outcome neutrality() {
  Desk& d = desk();
  const TrainConfig cfg = Desk::preset(0);
  ModelState st = init_state(cfg, d.backend, d.registry);
  std::vector<GenerationRequest> reqs;
  const auto ids = d.registry.ids();
  for (std::size_t i = 0; i < ids.size(); ++i)
    reqs.push_back({heldout_prompt(cfg, d.registry, {ids[i]}, i), {ids[i]},
                    sample_latent(d.backend.generator.latent_shape(), 500 + i), 1.0});
  const auto wm = generate_watermarked(st, d.backend, d.registry, reqs);
  const auto clean = generate_clean(st, d.backend, reqs);
  const fs::path dir = fs::temp_directory_path() / "conceptmark_acceptance_neutral";
  fs::create_directories(dir);
  int identical = 0;
  for (std::size_t i = 0; i < wm.size(); ++i) {
    save_png(wm[i], dir / "wm.png");
    save_png(clean[i], dir / "clean.png");
    identical += wm[i].data == clean[i].data && read_text_file(dir / "wm.png") == read_text_file(dir / "clean.png");
  }
  fs::remove_all(dir);
  ad::Graph g;
  const auto batch = sample_batch(cfg, d.registry, d.backend, ids, 1);
  const ForwardResult f = forward_batch(g, st, d.backend, d.registry, batch, false);
  const LossBreakdown b = breakdown(f.terms, cfg.weights);
  const bool ok = identical == static_cast<int>(wm.size()) && b.l2_image == 0.0 && b.csd == 0.0;
  return {ok, fmt("%d/%zu generations byte-identical, l2_image %g, csd %g", identical, wm.size(), b.l2_image, b.csd)};
}

Outcome desk_end_to_end() {
  std::vector<double> bits, attr, csd;
  double slowest = 0.0;
  std::string per;
  for (const auto& r : desk().seed_runs()) {
    bits.push_back(r.metrics.aggregate.bit_accuracy);
    attr.push_back(r.metrics.aggregate.attribution_accuracy);
    csd.push_back(r.metrics.fidelity.csd_score);
    slowest = std::max(slowest, r.train_seconds);
    per += fmt(" %.3f/%.3f/%.3f", bits.back(), attr.back(), csd.back());
  }
  const double mb = median(bits), ma = median(attr), mc = median(csd);
  const bool ok = mb >= tol::kDeskBitAccuracy && ma >= tol::kDeskAttribution && mc >= tol::kDeskCsd &&
                  slowest <= tol::kDeskTrainSeconds;
  return {ok, fmt("median bit %.3f, attribution %.3f, csd %.3f (per seed%s ), slowest run %.0fs", mb, ma, mc,
                  per.c_str(), slowest)};
}

Outcome disentanglement() {
  Desk& d = desk();
  TrainConfig cfg = Desk::preset(0);
  cfg.multi_ratio = TrainConfig{}.multi_ratio;
  const ModelState st = d.train_cached(cfg, d.registry);
  const auto samples = make_pair_samples(cfg, d.registry, d.registry.ids(), 48, 5);
  const auto plain = multiconcept_eval(st, d.backend, d.registry, samples, MultiVariant::Plain, 1.1, 5);
  const auto weighted = multiconcept_eval(st, d.backend, d.registry, samples, MultiVariant::PromptWeighted, 1.1, 5);

  std::vector<GenerationRequest> reqs;
  for (std::size_t i = 0; i < samples.size(); ++i)
    reqs.push_back({samples[i].prompt, samples[i].targets,
                    sample_latent(d.backend.generator.latent_shape(), 900 + i), 1.0});
  const auto images = generate_watermarked(st, d.backend, d.registry, reqs);
  const auto model = st.retrieval_model(d.backend);
  int invariant = 0;
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto ids = samples[i].targets;
    const auto fwd = attribute_multi(model, d.registry, images[i], ids);
    std::reverse(ids.begin(), ids.end());
    auto rev = attribute_multi(model, d.registry, images[i], ids);
    std::reverse(rev.begin(), rev.end());
    bool same = fwd.size() == rev.size();
    for (std::size_t k = 0; same && k < fwd.size(); ++k)
      same = fwd[k].concept_id == rev[k].concept_id && fwd[k].retrieved.bits == rev[k].retrieved.bits &&
             fwd[k].bit_accuracy == rev[k].bit_accuracy && fwd[k].predicted_embedding == rev[k].predicted_embedding;
    invariant += same;
  }
  const bool ok = plain.disentanglement >= tol::kDisentanglement && invariant == static_cast<int>(images.size());
  return {ok, fmt("strictly closer to own secret in %.3f of targets (prompt-weighted %.3f), pair bit %.3f, "
                  "order-invariant %d/%zu",
                  plain.disentanglement, weighted.disentanglement, plain.bit_accuracy, invariant, images.size())};
}

Outcome false_positives() {
  Desk& d = desk();
  const Registry reg16 = rekey_registry(d.registry, 16);
  TrainConfig cfg = Desk::preset(0);
  cfg.n_bits = 16;
  const ModelState st = d.train_cached(cfg, reg16);
  const auto ids = st.trained_concepts;
  const int per = (tol::kCleanImages + static_cast<int>(ids.size()) - 1) / static_cast<int>(ids.size());
  const auto set = make_heldout_set(st, d.backend, reg16, ids, per, 300);
  const auto model = st.retrieval_model(d.backend);
  int fp = 0, tp = 0, n = 0;
  double wm_bits = 0.0;
  for (const auto& id : ids) {
    std::vector<Tensor> wm, clean;
    for (std::size_t i = 0; i < set.clean.size(); ++i)
      if (set.concept_ids[i] == id) {
        clean.push_back(set.clean[i]);
        wm.push_back(set.wm[i]);
      }
    for (const auto& r : attribute_images(model, reg16, clean, id)) fp += r.match;
    for (const auto& r : attribute_images(model, reg16, wm, id)) {
      tp += r.match;
      wm_bits += r.bit_accuracy;
    }
    n += static_cast<int>(clean.size());
  }
  const double fpr = static_cast<double>(fp) / n;

  // An untrained state carries a randomly initialised decoder.
  const ModelState fresh = init_state(cfg, d.backend, reg16);
  const auto random_model = fresh.retrieval_model(d.backend);
  std::vector<AttributionResult> all;
  for (const auto& id : ids) {
    std::vector<Tensor> wm;
    for (std::size_t i = 0; i < set.wm.size(); ++i)
      if (set.concept_ids[i] == id) wm.push_back(set.wm[i]);
    const auto r = attribute_images(random_model, reg16, wm, id);
    all.insert(all.end(), r.begin(), r.end());
  }
  const double random_bits = mean_bit_accuracy(all);
  const bool ok = n >= tol::kCleanImages && fpr <= tol::kFpr &&
                  std::abs(random_bits - tol::kRandomBitCenter) <= tol::kRandomBitBand;
  return {ok, fmt("FPR %.4f on %d clean images (TPR %.3f, watermarked bit accuracy %.3f), random-decoder bit "
                  "accuracy %.4f",
                  fpr, n, static_cast<double>(tp) / n, wm_bits / n, random_bits)};
}

Outcome robustness() {
  Desk& d = desk();
  auto suite = default_suite();
  suite.push_back(DistortionSpec::adversarial());
  std::map<std::string, std::vector<double>> by_label;
  std::vector<std::string> order;
  for (const auto& r : d.seed_runs()) {
    const auto rows = robustness_sweep(r.state.retrieval_model(d.backend), d.registry, labeled(r.set), suite);
    for (const auto& row : rows) {
      if (!by_label.count(row.label)) order.push_back(row.label);
      by_label[row.label].push_back(row.bit_accuracy);
    }
  }
  const double clean = median(by_label[order.front()]);
  bool ordered = true;
  std::string jpeg_label, rows;
  for (const auto& label : order) {
    const double m = median(by_label[label]);
    rows += fmt(" %s=%.3f", label.c_str(), m);
    if (label != order.front()) ordered = ordered && clean >= m;
    if (label.rfind("jpeg", 0) == 0) jpeg_label = label;
  }
  const double drop = jpeg_label.empty() ? 1e9 : 100.0 * (clean - median(by_label[jpeg_label]));
  const bool ok = ordered && drop <= tol::kJpegDropPoints;
  return {ok, fmt("medians%s; JPEG drop %.1f points", rows.c_str(), drop)};
}

Outcome bit_length() {
  Desk& d = desk();
  const std::vector<int> lengths{5, 16, 32};
  std::vector<double> med;
  std::string per;
  for (int n : lengths) {
    const Registry reg = rekey_registry(d.registry, n);
    std::vector<double> attr, bits;
    for (std::uint64_t s : kSeeds) {
      TrainConfig cfg = Desk::preset(s);
      cfg.n_bits = n;
      cfg.iterations = 2000;
      const ModelState st = d.train_cached(cfg, reg);
      const auto set = make_heldout_set(st, d.backend, reg, st.trained_concepts, kImagesPerConcept, 200 + s);
      const auto m = evaluate_heldout(st, d.backend, reg, set).aggregate;
      attr.push_back(m.attribution_accuracy);
      bits.push_back(m.bit_accuracy);
    }
    med.push_back(median(attr));
    per += fmt(" %d:%.3f (bit %.3f)", n, med.back(), median(bits));
  }
  bool monotone = true;
  for (std::size_t i = 1; i < med.size(); ++i) monotone = monotone && med[i] <= med[i - 1];
  const bool ok = monotone && med.front() - med.back() >= 0.0;
  return {ok, fmt("median attribution by length%s at 2000 steps", per.c_str())};
}

Outcome sequential() {
  Desk& d = desk();
  StudyConfig study;
  study.train = Desk::preset(0);
  study.train.iterations = 3000;
  study.images_per_concept = kImagesPerConcept;
  const auto report = sequential_study(study, d.backend, d.registry, 4, 2, 8, 0.10);
  const auto& old = report.series.at("initial_attribution_accuracy");
  const auto& all = report.series.at("attribution_accuracy");
  double worst = 0.0;
  std::string stages;
  for (std::size_t i = 0; i < old.size(); ++i) {
    worst = std::max(worst, old.front() - old[i]);
    stages += fmt(" %g concepts: old %.1f%% all %.1f%%;", report.series_x[i], old[i], all[i]);
  }
  const bool ok = old.size() == 3 && worst <= tol::kSequentialDropPoints;
  return {ok, fmt("%s largest old-concept drop %.1f points", stages.c_str(), worst)};
}

Outcome separation() {
  Desk& d = desk();
  const auto& r = d.seed_runs().front();
  std::map<std::string, std::vector<Tensor>> by_concept;
  for (std::size_t i = 0; i < r.set.wm.size(); ++i) by_concept[r.set.concept_ids[i]].push_back(r.set.wm[i]);
  const double ratio = embedding_separation(r.state.retrieval_model(d.backend), d.registry, by_concept);
  std::size_t smallest = SIZE_MAX;
  for (const auto& [id, v] : by_concept) smallest = std::min(smallest, v.size());
  const bool ok = ratio > tol::kSeparation && by_concept.size() >= 4 && smallest >= 25;
  return {ok, fmt("separation %.3f over %zu concepts x %zu images", ratio, by_concept.size(), smallest)};
}

Outcome determinism() {
  const fs::path ws = fs::temp_directory_path() / "conceptmark_acceptance_cli";
  fs::remove_all(ws);
  fs::create_directories(ws);
  json cfg = {{"n_bits", 4},
              {"seed", 5},
              {"backend",
               {{"world", {{"shapes", {"circle", "square"}}, {"styles", {"red-stripes", "blue-dots"}},
                           {"samples_per_concept", 6}, {"image_size", 16}}},
                {"generator", {{"embedding_dim", 8}, {"latent_shape", {3, 8, 8}}, {"image_size", 16},
                               {"channels", 6}, {"cond_hidden", 16}}},
                {"backbone", {{"c1", 4}, {"c2", 6}, {"c3", 8}, {"text_dim", 8}}},
                {"generator_pretrain", {{"iterations", 30}, {"batch_size", 4}}},
                {"backbone_pretrain", {{"iterations", 10}, {"batch_size", 4}}}}},
              {"train", {{"iterations", 60}, {"batch_size", 4}, {"learning_rate", 3e-3},
                         {"hidden_width_multiplier", 1}, {"attn_dim", 4}, {"generation_steps", 2},
                         {"checkpoint_every", 20}}}};
  write_text_file(ws / "config.json", cfg.dump(2));
  int failures = 0;
  auto run = [&](const std::string& root, std::vector<std::string> args) {
    std::vector<std::string> full{"-c", (ws / "config.json").string(), "--root", (ws / root).string()};
    full.insert(full.end(), args.begin(), args.end());
    std::ostringstream out, err;
    if (run_cli(full, out, err) != 0) {
      ++failures;
      std::printf("# cli failure: %s\n", err.str().c_str());
    }
  };
  for (const char* root : {"a", "b"})
    for (const char* cmd : {"init-registry", "pretrain-generator", "train"}) run(root, {cmd});
  std::set<std::string> digests;
  int checkpoints = 0;
  for (const auto& entry : fs::directory_iterator(ws / "a" / "checkpoints")) {
    if (!entry.is_directory()) continue;
    const fs::path other = ws / "b" / "checkpoints" / entry.path().filename();
    ++checkpoints;
    if (!fs::exists(other) || checkpoint_digest(entry.path()) != checkpoint_digest(other)) ++failures;
  }
  const bool loss_log_same = read_text_file(ws / "a/checkpoints/loss.jsonl") ==
                             read_text_file(ws / "b/checkpoints/loss.jsonl");
  std::vector<std::string> gen{"generate", "--prompt", "a photo of <circle> in the style of <blue-dots>",
                               "--concept", "circle", "--concept", "blue-dots", "--latent-seed", "3"};
  for (const char* out : {"one.png", "two.png"}) {
    auto args = gen;
    args.insert(args.end(), {"-o", out});
    run("a", args);
  }
  run("b", [&] {
    auto args = gen;
    args.insert(args.end(), {"-o", "three.png"});
    return args;
  }());
  const std::string one = read_text_file(ws / "a/one.png");
  const bool png_same = !one.empty() && one == read_text_file(ws / "a/two.png") &&
                        one == read_text_file(ws / "b/three.png");
  fs::remove_all(ws);
  const bool ok = failures == 0 && checkpoints >= 2 && loss_log_same && png_same;
  return {ok, fmt("%d checkpoint dirs compared, loss logs %s, PNG reruns %s, %d failures", checkpoints,
                  loss_log_same ? "identical" : "differ", png_same ? "byte-identical" : "differ", failures)};
}

Outcome passive_gap() {
  Desk& d = desk();
  SyntheticWorldConfig world;
  world.shapes = {"circle", "square", "triangle", "cross"};
  world.styles = {"red-stripes", "blue-dots", "green-checker", "amber-waves"};
  world.samples_per_concept = 8;
  world.seed = 7;
  std::map<std::string, std::vector<Tensor>> refs;
  for (const auto& s : build_synthetic_dataset(world, d.registry))
    if (s.concept_ids.size() == 1) refs[s.concept_ids[0]].push_back(s.image);
  const auto gallery = build_gallery(d.backend.backbone, refs);
  std::vector<double> passive, proactive;
  for (const auto& r : d.seed_runs()) {
    passive.push_back(passive_accuracy(d.backend.backbone, gallery, labeled(r.set)));
    proactive.push_back(r.metrics.aggregate.attribution_accuracy);
  }
  const double gap = 100.0 * (median(proactive) - median(passive));
  const bool ok = gap >= tol::kPassiveGapPoints;
  return {ok, fmt("proactive %.3f vs passive nearest-centroid %.3f (median of 3 seeds), gap %.1f points",
                  median(proactive), median(passive), gap)};
}

struct Criterion {
  int id;
  const char* name;
  std::function<Outcome()> run;
};

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--only") {
      std::stringstream ss(argv[i + 1]);
      for (std::string t; std::getline(ss, t, ',');) only.insert(std::stoi(t));
    }
  const std::vector<Criterion> criteria{
      {1, "loss unit suite", losses},
      {2, "gradient audit", gradients},
      {3, "zero-init neutrality", neutrality},
      {4, "desk-scale end-to-end", desk_end_to_end},
      {5, "multi-concept disentanglement", disentanglement},
      {6, "false-positive control", false_positives},
      {7, "robustness ordering", robustness},
      {8, "bit-length trend", bit_length},
      {9, "sequential learning", sequential},
      {10, "embedding separation", separation},
      {11, "determinism", determinism},
      {12, "passive vs proactive", passive_gap},
  };
  int failed = 0;
  const auto start = Clock::now();
  for (const auto& c : criteria) {
    if (!only.empty() && !only.count(c.id)) continue;
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("[%s] criterion %2d %s: %s (%.0fs)\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str(),
                seconds_since(t0));
    std::fflush(stdout);
  }
  std::printf("# %d failed, total %.0fs\n", failed, seconds_since(start));
  return failed == 0 ? 0 : 1;
}
