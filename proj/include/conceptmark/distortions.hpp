#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "conceptmark/autodiff.hpp"
#include "conceptmark/registry.hpp"
#include "conceptmark/retrieval.hpp"
#include "json.hpp"

namespace conceptmark {

enum class DistortionKind { Jpeg, Rotation, CropAndResize, GaussianBlur, GaussianNoise, ColorJitter, Sharpness, Adversarial };

std::string_view distortion_name(DistortionKind kind);
DistortionKind parse_distortion(std::string_view name);

/// Parameters per kind:
///   jpeg: quality in [1, 100]
///   rotation: degrees >= 0, angle drawn uniformly from [-degrees, degrees]
///   crop_and_resize: keep in (0, 1], centre crop resized back
///   gaussian_blur: sigma >= 0, kernel 5
///   gaussian_noise: sigma >= 0
///   color_jitter: brightness, contrast, saturation in [0, 1), factors drawn from [1 - x, 1 + x]
///   sharpness: factor >= 0
///   adversarial: epsilon >= 0, steps >= 1
struct DistortionSpec {
  DistortionKind kind = DistortionKind::Jpeg;
  std::map<std::string, double> params;
  std::uint64_t seed = 0;

  double param(const std::string& key) const;
  std::string label() const;
  void validate() const;
  nlohmann::json to_json() const;
  static DistortionSpec from_json(const nlohmann::json& j);

  static DistortionSpec jpeg(double quality = 50);
  static DistortionSpec rotation(double degrees = 15);
  static DistortionSpec crop_and_resize(double keep = 0.8);
  static DistortionSpec gaussian_blur(double sigma = 1.0);
  static DistortionSpec gaussian_noise(double sigma = 0.05);
  static DistortionSpec color_jitter(double brightness = 0.2, double contrast = 0.2, double saturation = 0.2);
  static DistortionSpec sharpness(double factor = 2.0);
  static DistortionSpec adversarial(double epsilon = 2.0 / 255.0, int steps = 10);
};

/// Applies a non-adversarial distortion to a [3, H, W] image in [0, 1].
Tensor apply(const DistortionSpec& spec, const Tensor& image);

/// Projected sign-gradient ascent on the secret cross-entropy within an L-infinity ball.
Tensor adversarial_attack(const RetrievalModel& model, const Registry& registry, const Tensor& image,
                          const std::string& concept_id, double epsilon, int steps);

/// One spec per common distortion, at mid-severity defaults.
std::vector<DistortionSpec> default_suite();

}  // namespace conceptmark
