#pragma once

#include <vector>

#include "conceptmark/autodiff.hpp"
#include "conceptmark/registry.hpp"
#include "json.hpp"

namespace conceptmark {

using ad::Tensor;
using ad::Var;

struct LossWeights {
  double lambda1 = 5.0;  // secret cross-entropy
  double lambda2 = 5.0;  // style-descriptor consistency
  double lambda3 = 1.0;  // pixel L2
  double lambda4 = 1.0;  // embedding regression
  double lambda_latent = 0.0;

  void validate() const;
  LossWeights scaled(double k) const;
  nlohmann::json to_json() const;
  static LossWeights from_json(const nlohmann::json& j);
};

struct LossBreakdown {
  double ce = 0.0;
  double csd = 0.0;
  double l2_image = 0.0;
  double reg = 0.0;
  double l2_latent = 0.0;
  double total = 0.0;

  nlohmann::json to_json() const;
};

double loss_ce(const Secret& secret, const std::vector<double>& logits);
double loss_csd(const std::vector<double>& feat_clean, const std::vector<double>& feat_wm);
double loss_l2_image(const Tensor& clean, const Tensor& wm);
double loss_reg(const std::vector<double>& e_c, const std::vector<double>& e_pred);
double loss_l2_latent(const Tensor& z, const Tensor& z_hat);

LossBreakdown loss_total(double ce, double csd, double l2_image, double reg, double l2_latent,
                         const LossWeights& weights);

/// Differentiable forms. Every reduction is a per-element mean.
Var loss_ce(Var logits, const std::vector<Secret>& secrets);
/// mean over rows of 1 - cos(clean_i, wm_i), features [N, D].
Var loss_csd(Var feat_clean, Var feat_wm);
Var loss_l2(Var a, Var b);

struct LossTerms {
  Var ce, csd, l2_image, reg, l2_latent;
};

/// Weighted total; the latent term is skipped entirely when its weight is zero.
Var loss_total(const LossTerms& terms, const LossWeights& weights);
LossBreakdown breakdown(const LossTerms& terms, const LossWeights& weights);

}  // namespace conceptmark
