#include "conceptmark/distortions.hpp"

#include <algorithm>
#include <cmath>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <random>

#include "conceptmark/error.hpp"
#include "conceptmark/objectives.hpp"

namespace conceptmark {

using nlohmann::json;

namespace {

constexpr std::pair<DistortionKind, std::string_view> kNames[] = {
    {DistortionKind::Jpeg, "jpeg"},
    {DistortionKind::Rotation, "rotation"},
    {DistortionKind::CropAndResize, "crop_and_resize"},
    {DistortionKind::GaussianBlur, "gaussian_blur"},
    {DistortionKind::GaussianNoise, "gaussian_noise"},
    {DistortionKind::ColorJitter, "color_jitter"},
    {DistortionKind::Sharpness, "sharpness"},
    {DistortionKind::Adversarial, "adversarial"},
};

cv::Mat to_mat(const Tensor& image) {
  const int h = image.dim(1), w = image.dim(2);
  cv::Mat m(h, w, CV_64FC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        m.at<cv::Vec3d>(y, x)[c] = image[static_cast<std::size_t>((c * h + y) * w + x)];
  return m;
}

Tensor from_mat(const cv::Mat& m) {
  const int h = m.rows, w = m.cols;
  Tensor t({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        t[static_cast<std::size_t>((c * h + y) * w + x)] = std::clamp(m.at<cv::Vec3d>(y, x)[c], 0.0, 1.0);
  return t;
}

void check_image(const Tensor& image) {
  require(image.rank() == 3 && image.dim(0) == 3 && image.dim(1) > 0 && image.dim(2) > 0, ErrorCode::ShapeMismatch,
          "distortions expect a [3, H, W] image, got " + ad::shape_str(image.shape));
}

double gray(const Tensor& im, std::size_t plane, std::size_t i) {
  return 0.299 * im[i] + 0.587 * im[plane + i] + 0.114 * im[2 * plane + i];
}

Tensor jitter(const Tensor& image, double b, double c, double s, std::mt19937_64& rng) {
  auto factor = [&rng](double x) {
    return x == 0.0 ? 1.0 : std::uniform_real_distribution<double>(1.0 - x, 1.0 + x)(rng);
  };
  const double fb = factor(b), fc = factor(c), fs = factor(s);
  Tensor out = image;
  const std::size_t plane = static_cast<std::size_t>(image.dim(1) * image.dim(2));
  if (fb != 1.0)
    for (double& v : out.data) v = std::clamp(v * fb, 0.0, 1.0);
  if (fc != 1.0) {
    double mean = 0.0;
    for (std::size_t i = 0; i < plane; ++i) mean += gray(out, plane, i);
    mean /= static_cast<double>(plane);
    for (double& v : out.data) v = std::clamp(fc * v + (1.0 - fc) * mean, 0.0, 1.0);
  }
  if (fs != 1.0) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double gsc = gray(out, plane, i);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        double& v = out[ch * plane + i];
        v = std::clamp(fs * v + (1.0 - fs) * gsc, 0.0, 1.0);
      }
    }
  }
  return out;
}

// Blend with a 3x3 smoothing filter; border pixels keep their values.
Tensor sharpen(const Tensor& image, double factor) {
  const int h = image.dim(1), w = image.dim(2);
  Tensor out = image;
  for (int c = 0; c < 3; ++c)
    for (int y = 1; y + 1 < h; ++y)
      for (int x = 1; x + 1 < w; ++x) {
        double acc = 0.0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx)
            acc += (dy == 0 && dx == 0 ? 5.0 : 1.0) * image[static_cast<std::size_t>((c * h + y + dy) * w + x + dx)];
        const double smooth = acc / 13.0;
        const std::size_t i = static_cast<std::size_t>((c * h + y) * w + x);
        out[i] = std::clamp(smooth + factor * (image[i] - smooth), 0.0, 1.0);
      }
  return out;
}

Tensor jpeg_roundtrip(const Tensor& image, int quality) {
  const Tensor q = image;
  const int h = image.dim(1), w = image.dim(2);
  cv::Mat bgr(h, w, CV_8UC3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        bgr.at<cv::Vec3b>(y, x)[2 - c] = static_cast<unsigned char>(
            std::lround(std::clamp(q[static_cast<std::size_t>((c * h + y) * w + x)], 0.0, 1.0) * 255.0));
  std::vector<unsigned char> buf;
  require(cv::imencode(".jpg", bgr, buf, {cv::IMWRITE_JPEG_QUALITY, quality}), ErrorCode::IoError,
          "JPEG encoding failed");
  const cv::Mat dec = cv::imdecode(buf, cv::IMREAD_COLOR);
  require(!dec.empty(), ErrorCode::IoError, "JPEG decoding failed");
  Tensor out({3, h, w});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        out[static_cast<std::size_t>((c * h + y) * w + x)] = dec.at<cv::Vec3b>(y, x)[2 - c] / 255.0;
  return out;
}

}  // namespace

std::string_view distortion_name(DistortionKind kind) {
  for (const auto& [k, n] : kNames)
    if (k == kind) return n;
  return "unknown";
}

DistortionKind parse_distortion(std::string_view name) {
  for (const auto& [k, n] : kNames)
    if (n == name) return k;
  fail(ErrorCode::InvalidParameter, "unknown distortion '" + std::string(name) + "'");
}

double DistortionSpec::param(const std::string& key) const {
  auto it = params.find(key);
  require(it != params.end(), ErrorCode::InvalidParameter,
          std::string(distortion_name(kind)) + " needs parameter '" + key + "'");
  return it->second;
}

std::string DistortionSpec::label() const {
  std::string s(distortion_name(kind));
  for (const auto& [k, v] : params) {
    char buf[64];
    std::snprintf(buf, sizeof buf, " %s=%g", k.c_str(), v);
    s += buf;
  }
  return s;
}

void DistortionSpec::validate() const {
  auto in = [&](const std::string& key, double lo, double hi) {
    const double v = param(key);
    require(std::isfinite(v) && v >= lo && v <= hi, ErrorCode::InvalidParameter,
            std::string(distortion_name(kind)) + " " + key + " out of range");
  };
  switch (kind) {
    case DistortionKind::Jpeg: in("quality", 1, 100); break;
    case DistortionKind::Rotation: in("degrees", 0, 180); break;
    case DistortionKind::CropAndResize:
      in("keep", 0, 1);
      require(param("keep") > 0.0, ErrorCode::InvalidParameter, "crop_and_resize keep must be positive");
      break;
    case DistortionKind::GaussianBlur: in("sigma", 0, 10); break;
    case DistortionKind::GaussianNoise: in("sigma", 0, 1); break;
    case DistortionKind::ColorJitter:
      in("brightness", 0, 0.999);
      in("contrast", 0, 0.999);
      in("saturation", 0, 0.999);
      break;
    case DistortionKind::Sharpness: in("factor", 0, 10); break;
    case DistortionKind::Adversarial:
      in("epsilon", 0, 1);
      in("steps", 1, 1000);
      break;
  }
}

json DistortionSpec::to_json() const {
  return {{"kind", distortion_name(kind)}, {"params", params}, {"seed", seed}};
}

DistortionSpec DistortionSpec::from_json(const json& j) {
  DistortionSpec s;
  try {
    s.kind = parse_distortion(j.at("kind").get<std::string>());
    s.params = j.at("params").get<std::map<std::string, double>>();
    s.seed = j.value("seed", std::uint64_t{0});
  } catch (const json::exception& e) {
    fail(ErrorCode::ParseError, std::string("distortion spec: ") + e.what());
  }
  s.validate();
  return s;
}

DistortionSpec DistortionSpec::jpeg(double quality) { return {DistortionKind::Jpeg, {{"quality", quality}}, 0}; }
DistortionSpec DistortionSpec::rotation(double degrees) { return {DistortionKind::Rotation, {{"degrees", degrees}}, 0}; }
DistortionSpec DistortionSpec::crop_and_resize(double keep) {
  return {DistortionKind::CropAndResize, {{"keep", keep}}, 0};
}
DistortionSpec DistortionSpec::gaussian_blur(double sigma) { return {DistortionKind::GaussianBlur, {{"sigma", sigma}}, 0}; }
DistortionSpec DistortionSpec::gaussian_noise(double sigma) {
  return {DistortionKind::GaussianNoise, {{"sigma", sigma}}, 0};
}
DistortionSpec DistortionSpec::color_jitter(double brightness, double contrast, double saturation) {
  return {DistortionKind::ColorJitter, {{"brightness", brightness}, {"contrast", contrast}, {"saturation", saturation}}, 0};
}
DistortionSpec DistortionSpec::sharpness(double factor) { return {DistortionKind::Sharpness, {{"factor", factor}}, 0}; }
DistortionSpec DistortionSpec::adversarial(double epsilon, int steps) {
  return {DistortionKind::Adversarial, {{"epsilon", epsilon}, {"steps", steps}}, 0};
}

Tensor apply(const DistortionSpec& spec, const Tensor& image) {
  check_image(image);
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  switch (spec.kind) {
    case DistortionKind::Jpeg:
      return jpeg_roundtrip(image, static_cast<int>(std::lround(spec.param("quality"))));
    case DistortionKind::Rotation: {
      const double deg = spec.param("degrees");
      const double angle = deg == 0.0 ? 0.0 : std::uniform_real_distribution<double>(-deg, deg)(rng);
      if (angle == 0.0) return image;
      const cv::Mat src = to_mat(image);
      const cv::Point2f centre(static_cast<float>(src.cols - 1) / 2.0f, static_cast<float>(src.rows - 1) / 2.0f);
      cv::Mat dst;
      cv::warpAffine(src, dst, cv::getRotationMatrix2D(centre, angle, 1.0), src.size(), cv::INTER_LINEAR,
                     cv::BORDER_REFLECT_101);
      return from_mat(dst);
    }
    case DistortionKind::CropAndResize: {
      const double keep = spec.param("keep");
      if (keep == 1.0) return image;
      const cv::Mat src = to_mat(image);
      const int ch = std::max(1, static_cast<int>(std::lround(src.rows * keep)));
      const int cw = std::max(1, static_cast<int>(std::lround(src.cols * keep)));
      const cv::Rect roi((src.cols - cw) / 2, (src.rows - ch) / 2, cw, ch);
      cv::Mat dst;
      cv::resize(src(roi), dst, src.size(), 0, 0, cv::INTER_LINEAR);
      return from_mat(dst);
    }
    case DistortionKind::GaussianBlur: {
      const double sigma = spec.param("sigma");
      if (sigma == 0.0) return image;
      cv::Mat dst;
      cv::GaussianBlur(to_mat(image), dst, cv::Size(5, 5), sigma, sigma, cv::BORDER_REFLECT_101);
      return from_mat(dst);
    }
    case DistortionKind::GaussianNoise: {
      const double sigma = spec.param("sigma");
      Tensor out = image;
      if (sigma == 0.0) return out;
      std::normal_distribution<double> n(0.0, sigma);
      for (double& v : out.data) v = std::clamp(v + n(rng), 0.0, 1.0);
      return out;
    }
    case DistortionKind::ColorJitter:
      return jitter(image, spec.param("brightness"), spec.param("contrast"), spec.param("saturation"), rng);
    case DistortionKind::Sharpness: {
      const double f = spec.param("factor");
      return f == 1.0 ? image : sharpen(image, f);
    }
    case DistortionKind::Adversarial:
      fail(ErrorCode::InvalidParameter, "adversarial distortions need a model; use adversarial_attack");
  }
  fail(ErrorCode::InvalidParameter, "unknown distortion kind");
}

Tensor adversarial_attack(const RetrievalModel& model, const Registry& registry, const Tensor& image,
                          const std::string& concept_id, double epsilon, int steps) {
  check_image(image);
  require(std::isfinite(epsilon) && epsilon >= 0.0, ErrorCode::InvalidParameter, "epsilon must be non-negative");
  require(steps >= 1, ErrorCode::InvalidParameter, "attack needs at least one step");
  require(model.backbone && model.params && model.decoder, ErrorCode::ConfigError, "retrieval model is incomplete");
  if (epsilon == 0.0) return image;
  const ConceptRecord& rec = registry.get(concept_id);
  const std::string query = rec.render_query();
  const double step_size = 2.5 * epsilon / steps;
  Tensor x = image;
  for (int k = 0; k < steps; ++k) {
    ad::Graph g;
    Var xi = g.input(x);
    Var batch = ad::reshape(xi, {1, x.dim(0), x.dim(1), x.dim(2)});
    const ImageFeatures f = model.backbone->image_features(g, batch);
    Var emb = retrieval_forward(nn::Binder(g, *model.params), model.cfg, f.patches,
                                model.backbone->text_features(g, query));
    Var loss = loss_ce(decode_secret(nn::Binder(g, *model.decoder), emb), {rec.secret});
    g.backward(loss);
    const auto grad = xi.grad();
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const double sgn = grad[i] > 0.0 ? 1.0 : (grad[i] < 0.0 ? -1.0 : 0.0);
      const double v = x[i] + step_size * sgn;
      x[i] = std::clamp(std::clamp(v, image[i] - epsilon, image[i] + epsilon), 0.0, 1.0);
    }
  }
  return x;
}

std::vector<DistortionSpec> default_suite() {
  std::vector<DistortionSpec> s{DistortionSpec::jpeg(),           DistortionSpec::rotation(),
                                DistortionSpec::crop_and_resize(), DistortionSpec::gaussian_blur(),
                                DistortionSpec::gaussian_noise(),  DistortionSpec::color_jitter(),
                                DistortionSpec::sharpness()};
  for (std::size_t i = 0; i < s.size(); ++i) s[i].seed = 1000 + i;
  return s;
}

}  // namespace conceptmark
