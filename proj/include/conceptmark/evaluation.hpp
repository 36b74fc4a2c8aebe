#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "conceptmark/distortions.hpp"
#include "conceptmark/registry.hpp"
#include "conceptmark/retrieval.hpp"
#include "conceptmark/training.hpp"
#include "json.hpp"

namespace conceptmark {

/// Fraction of results whose retrieved secret matches exactly.
double attribution_accuracy(const std::vector<AttributionResult>& results);
/// Fraction of results with bit accuracy at or above their tau.
double match_rate(const std::vector<AttributionResult>& results);
double mean_bit_accuracy(const std::vector<AttributionResult>& results);

/// Mean row-wise cosine similarity of paired feature vectors.
double mean_cosine(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b);

struct FidelityScores {
  double csd_score = 0.0;       // style head
  double semantic_score = 0.0;  // pooled semantic head
};

FidelityScores fidelity_scores(const FeatureBackbone& backbone, const std::vector<Tensor>& clean,
                               const std::vector<Tensor>& wm);

struct DetectionRates {
  double tpr = 0.0;
  double fpr = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  int positives = 0;
  int negatives = 0;

  nlohmann::json to_json() const;
};

/// Rates from match counts on the watermarked (positive) and clean (negative) sets.
DetectionRates detection_rates(int true_matches, int positives, int false_matches, int negatives);

DetectionRates comprehensive_test(const RetrievalModel& model, const Registry& registry,
                                  const std::vector<Tensor>& wm_set, const std::vector<Tensor>& clean_set,
                                  const std::string& concept_id, double tau = 0.875);

struct RobustnessRow {
  std::string label;
  nlohmann::json spec;
  double bit_accuracy = 0.0;
  double attribution_accuracy = 0.0;
};

struct LabeledImage {
  std::string concept_id;
  Tensor image;
};

/// No-distortion row first, then one row per spec. Each image gets its own derived seed.
std::vector<RobustnessRow> robustness_sweep(const RetrievalModel& model, const Registry& registry,
                                            const std::vector<LabeledImage>& images,
                                            const std::vector<DistortionSpec>& suite);

enum class MultiVariant { Plain, PromptWeighted };

struct MultiSampleResult {
  std::string prompt;
  std::vector<AttributionResult> results;
  /// Per target: retrieved secret strictly closer to its own secret than to every other target's.
  std::vector<bool> disentangled;
};

struct MultiConceptReport {
  std::vector<MultiSampleResult> samples;
  double bit_accuracy = 0.0;
  double attribution_accuracy = 0.0;
  double disentanglement = 0.0;

  nlohmann::json to_json() const;
};

MultiConceptReport multiconcept_eval(const ModelState& state, const FrozenBackend& backend, const Registry& registry,
                                     const std::vector<MultiConceptSample>& dataset, MultiVariant variant,
                                     double alpha = 1.1, std::uint64_t seed = 0, double tau = 0.875);

/// Object+style pair samples drawn from the evaluation share of the template bank.
std::vector<MultiConceptSample> make_pair_samples(const TrainConfig& cfg, const Registry& registry,
                                                  const std::vector<std::string>& ids, int count,
                                                  std::uint64_t seed);

// ---------------------------------------------------------------- single-concept protocol

struct HeldoutSet {
  std::vector<GenerationRequest> requests;
  std::vector<Tensor> wm;
  std::vector<Tensor> clean;
  std::vector<std::string> concept_ids;
};

/// `per_concept` held-out generations of every concept, watermarked with its registry secret.
HeldoutSet make_heldout_set(const ModelState& state, const FrozenBackend& backend, const Registry& registry,
                            const std::vector<std::string>& ids, int per_concept, std::uint64_t seed);

struct ConceptMetrics {
  double bit_accuracy = 0.0;
  double attribution_accuracy = 0.0;
  int images = 0;
};

struct MetricsReport {
  std::string experiment;
  nlohmann::json config;
  std::map<std::string, ConceptMetrics> per_concept;
  ConceptMetrics aggregate;
  FidelityScores fidelity;
  std::vector<RobustnessRow> robustness;
  std::optional<DetectionRates> detection;
  /// Named series for the study plots, e.g. accuracy against bit length.
  std::string series_x_label;
  std::vector<double> series_x;
  std::map<std::string, std::vector<double>> series;
  /// Published figures for orientation only; not expected at this scale.
  nlohmann::json reference;
  nlohmann::json extra = nlohmann::json::object();
  std::vector<std::uint64_t> seeds;
  std::string created_at;

  nlohmann::json to_json() const;
  static MetricsReport from_json(const nlohmann::json& j);
};

/// Bit and attribution accuracy per concept plus fidelity between watermarked and clean images.
MetricsReport evaluate_heldout(const ModelState& state, const FrozenBackend& backend, const Registry& registry,
                               const HeldoutSet& set, double tau = 0.875);

// ---------------------------------------------------------------- studies

struct StudyConfig {
  TrainConfig train;
  int images_per_concept = 25;
  std::vector<std::uint64_t> seeds{0};
  double tau = 0.875;
};

/// One model per secret length at a fixed budget; median over seeds.
MetricsReport bitlength_study(const StudyConfig& cfg, const FrozenBackend& backend, const Registry& template_registry,
                              const std::vector<int>& lengths = {5, 8, 16, 32, 64});

/// One model per concept count (a prefix of the registry's concepts).
MetricsReport scaling_study(const StudyConfig& cfg, const FrozenBackend& backend, const Registry& registry,
                            const std::vector<int>& concept_counts);

/// Trains on the first initial_k concepts, then adds `increment` at a time with sequential_update.
MetricsReport sequential_study(const StudyConfig& cfg, const FrozenBackend& backend, const Registry& registry,
                               int initial_k, int increment, int final_k, double extra_fraction = 0.10);

/// Registry with the same tokens and kinds, re-keyed to n_bits.
Registry rekey_registry(const Registry& registry, int n_bits);

// ---------------------------------------------------------------- passive baseline

struct PassiveGallery {
  std::vector<std::string> concept_ids;
  std::vector<std::vector<double>> centroids;
};

/// Frozen image descriptor used by the passive baseline: unit style features joined with unit semantic features.
std::vector<std::vector<double>> passive_features(const FeatureBackbone& backbone, const std::vector<Tensor>& images);
PassiveGallery build_gallery(const FeatureBackbone& backbone,
                             const std::map<std::string, std::vector<Tensor>>& references);
std::string passive_baseline_attribute(const FeatureBackbone& backbone, const PassiveGallery& gallery,
                                       const Tensor& image);
/// Fraction of labeled images whose nearest centroid is their own concept.
double passive_accuracy(const FeatureBackbone& backbone, const PassiveGallery& gallery,
                        const std::vector<LabeledImage>& images);

// ---------------------------------------------------------------- reports

/// JSON at `path` plus CSV mirrors next to it.
void write_report(const MetricsReport& report, const std::filesystem::path& path);
MetricsReport read_report(const std::filesystem::path& path);
/// Static PNG plot: study series as lines, or robustness rows as bars.
void plot_report(const MetricsReport& report, const std::filesystem::path& path);

double median(std::vector<double> values);
/// ISO-8601 UTC time of day, for report timestamps.
std::string utc_timestamp();

}  // namespace conceptmark
