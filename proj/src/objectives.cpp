#include "conceptmark/objectives.hpp"

#include <cmath>

#include "conceptmark/error.hpp"

namespace conceptmark {

using nlohmann::json;

void LossWeights::validate() const {
  for (double w : {lambda1, lambda2, lambda3, lambda4, lambda_latent})
    require(std::isfinite(w) && w >= 0.0, ErrorCode::ConfigError, "loss weights must be non-negative");
}

LossWeights LossWeights::scaled(double k) const {
  return {lambda1 * k, lambda2 * k, lambda3 * k, lambda4 * k, lambda_latent * k};
}

json LossWeights::to_json() const {
  return {{"lambda1", lambda1}, {"lambda2", lambda2}, {"lambda3", lambda3}, {"lambda4", lambda4},
          {"lambda_latent", lambda_latent}};
}

LossWeights LossWeights::from_json(const json& j) {
  LossWeights w;
  try {
    w.lambda1 = j.value("lambda1", w.lambda1);
    w.lambda2 = j.value("lambda2", w.lambda2);
    w.lambda3 = j.value("lambda3", w.lambda3);
    w.lambda4 = j.value("lambda4", w.lambda4);
    w.lambda_latent = j.value("lambda_latent", w.lambda_latent);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, std::string("loss weights: ") + e.what());
  }
  w.validate();
  return w;
}

json LossBreakdown::to_json() const {
  return {{"ce", ce}, {"csd", csd}, {"l2_image", l2_image}, {"reg", reg}, {"l2_latent", l2_latent},
          {"total", total}};
}

double loss_ce(const Secret& secret, const std::vector<double>& logits) {
  require(secret.length() == static_cast<int>(logits.size()) && !logits.empty(), ErrorCode::LengthMismatch,
          "secret has " + std::to_string(secret.length()) + " bits but " + std::to_string(logits.size()) +
              " logits were given");
  double acc = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    const double x = logits[i];
    acc += std::max(x, 0.0) - x * secret.bits[i] + std::log1p(std::exp(-std::abs(x)));
  }
  return acc / static_cast<double>(logits.size());
}

double loss_csd(const std::vector<double>& feat_clean, const std::vector<double>& feat_wm) {
  require(feat_clean.size() == feat_wm.size() && !feat_clean.empty(), ErrorCode::DimensionMismatch,
          "descriptor widths differ");
  ad::Graph g;
  const int d = static_cast<int>(feat_clean.size());
  Var a = g.constant(Tensor({1, d}, feat_clean));
  Var b = g.constant(Tensor({1, d}, feat_wm));
  return loss_csd(a, b).value()[0];
}

double loss_l2_image(const Tensor& clean, const Tensor& wm) {
  require(clean.shape == wm.shape && clean.numel() > 0, ErrorCode::ShapeMismatch,
          "images " + ad::shape_str(clean.shape) + " and " + ad::shape_str(wm.shape));
  double acc = 0.0;
  for (std::size_t i = 0; i < clean.numel(); ++i) acc += (clean[i] - wm[i]) * (clean[i] - wm[i]);
  return acc / static_cast<double>(clean.numel());
}

double loss_reg(const std::vector<double>& e_c, const std::vector<double>& e_pred) {
  require(e_c.size() == e_pred.size() && !e_c.empty(), ErrorCode::DimensionMismatch,
          "embedding widths " + std::to_string(e_c.size()) + " and " + std::to_string(e_pred.size()));
  double acc = 0.0;
  for (std::size_t i = 0; i < e_c.size(); ++i) acc += (e_c[i] - e_pred[i]) * (e_c[i] - e_pred[i]);
  return acc / static_cast<double>(e_c.size());
}

double loss_l2_latent(const Tensor& z, const Tensor& z_hat) {
  require(z.shape == z_hat.shape && z.numel() > 0, ErrorCode::ShapeMismatch,
          "latents " + ad::shape_str(z.shape) + " and " + ad::shape_str(z_hat.shape));
  return loss_l2_image(z, z_hat);
}

LossBreakdown loss_total(double ce, double csd, double l2_image, double reg, double l2_latent,
                         const LossWeights& weights) {
  weights.validate();
  LossBreakdown b{ce, csd, l2_image, reg, l2_latent, 0.0};
  b.total = weights.lambda1 * ce + weights.lambda2 * csd + weights.lambda3 * l2_image + weights.lambda4 * reg;
  if (weights.lambda_latent != 0.0) b.total += weights.lambda_latent * l2_latent;
  return b;
}

Var loss_ce(Var logits, const std::vector<Secret>& secrets) {
  const auto& s = logits.shape();
  require(s.size() == 2 && static_cast<std::size_t>(s[0]) == secrets.size(), ErrorCode::LengthMismatch,
          "one secret per logit row is required");
  Tensor targets(s);
  for (std::size_t r = 0; r < secrets.size(); ++r) {
    require(secrets[r].length() == s[1], ErrorCode::LengthMismatch, "secret length does not match the decoder");
    for (int c = 0; c < s[1]; ++c) targets[r * static_cast<std::size_t>(s[1]) + static_cast<std::size_t>(c)] = secrets[r].bits[static_cast<std::size_t>(c)];
  }
  return ad::bce_with_logits(logits, targets);
}

Var loss_csd(Var feat_clean, Var feat_wm) {
  require(feat_clean.shape() == feat_wm.shape() && feat_clean.shape().size() == 2, ErrorCode::DimensionMismatch,
          "descriptor shapes differ");
  return ad::add_scalar(ad::scale(ad::mean(ad::cosine_rows(feat_clean, feat_wm)), -1.0), 1.0);
}

Var loss_l2(Var a, Var b) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          "operands " + ad::shape_str(a.shape()) + " and " + ad::shape_str(b.shape()));
  return ad::mse(a, b);
}

Var loss_total(const LossTerms& t, const LossWeights& w) {
  w.validate();
  Var total = ad::add(ad::add(ad::scale(t.ce, w.lambda1), ad::scale(t.csd, w.lambda2)),
                      ad::add(ad::scale(t.l2_image, w.lambda3), ad::scale(t.reg, w.lambda4)));
  if (w.lambda_latent != 0.0 && t.l2_latent.valid()) total = ad::add(total, ad::scale(t.l2_latent, w.lambda_latent));
  return total;
}

LossBreakdown breakdown(const LossTerms& t, const LossWeights& w) {
  auto v = [](Var x) { return x.valid() ? x.value()[0] : 0.0; };
  return loss_total(v(t.ce), v(t.csd), v(t.l2_image), v(t.reg), v(t.l2_latent), w);
}

}  // namespace conceptmark
