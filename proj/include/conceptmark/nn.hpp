#pragma once

#include <cstdint>
#include <deque>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "conceptmark/autodiff.hpp"

namespace conceptmark::nn {

using ad::Graph;
using ad::Parameter;
using ad::Tensor;
using ad::Var;

/// Named, ordered set of parameters. Element addresses are stable under add().
class ParamGroup {
 public:
  ParamGroup() = default;
  explicit ParamGroup(std::string name) : name_(std::move(name)) {}

  const std::string& name() const { return name_; }
  Parameter& add(std::string param_name, Tensor init);
  Parameter& get(std::string_view param_name);
  const Parameter& get(std::string_view param_name) const;
  bool contains(std::string_view param_name) const;

  std::deque<Parameter>& params() { return params_; }
  const std::deque<Parameter>& params() const { return params_; }
  std::size_t numel() const;

  void zero_grad();
  /// Rounds every value to float32 precision (the on-disk representation).
  void round_to_float();

  bool operator==(const ParamGroup& other) const;

 private:
  std::string name_;
  std::deque<Parameter> params_;
};

/// Binds parameters of a group into a graph, either as trainable leaves or constants.
class Binder {
 public:
  Binder(Graph& g, const ParamGroup& group) : g_(&g), frozen_(&group) {}
  Binder(Graph& g, ParamGroup& group, bool trainable)
      : g_(&g), frozen_(&group), mutable_(trainable ? &group : nullptr) {}

  Var operator()(std::string_view name) const;
  Graph& graph() const { return *g_; }

 private:
  Graph* g_;
  const ParamGroup* frozen_;
  ParamGroup* mutable_ = nullptr;
};

/// Gaussian init with std = gain / sqrt(fan_in).
Tensor init_normal(ad::Shape shape, int fan_in, std::mt19937_64& rng, double gain = 1.0);

/// Adds weight [out, in] and bias [out] named prefix.w / prefix.b.
void add_linear(ParamGroup& group, const std::string& prefix, int in, int out, std::mt19937_64& rng,
                double gain = 1.0, bool zero = false);
Var apply_linear(const Binder& bind, const std::string& prefix, Var x);

/// Adds a k x k convolution kernel prefix.w [out, in, k, k] and bias prefix.b.
void add_conv(ParamGroup& group, const std::string& prefix, int in, int out, int k, std::mt19937_64& rng,
              double gain = 1.0);
Var apply_conv(const Binder& bind, const std::string& prefix, Var x, int stride, int pad);

double global_grad_norm(const std::vector<ParamGroup*>& groups);
/// Scales gradients so their global L2 norm is at most max_norm. Returns the pre-clip norm.
double clip_grad_norm(const std::vector<ParamGroup*>& groups, double max_norm);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adaptive moment estimation with bias correction. Moments are keyed by "group/param".
class Adam {
 public:
  Adam() = default;
  explicit Adam(AdamConfig config) : config_(config) {}

  void step(const std::vector<ParamGroup*>& groups, double lr);
  std::int64_t steps() const { return t_; }

  const std::map<std::string, Tensor>& first_moments() const { return m_; }
  const std::map<std::string, Tensor>& second_moments() const { return v_; }
  void restore(std::int64_t t, std::map<std::string, Tensor> m, std::map<std::string, Tensor> v);

 private:
  AdamConfig config_;
  std::int64_t t_ = 0;
  std::map<std::string, Tensor> m_;
  std::map<std::string, Tensor> v_;
};

/// FNV-1a 64-bit digest, rendered as 16 hex chars.
std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed = 1469598103934665603ull);
std::string hex64(std::uint64_t value);
/// Digest of every parameter's name, shape and float32-rounded values.
std::string group_digest(const ParamGroup& group);

}  // namespace conceptmark::nn
