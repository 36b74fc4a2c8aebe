#include "conceptmark/nn.hpp"

#include <cmath>
#include <cstdio>

#include "conceptmark/error.hpp"

namespace conceptmark::nn {

Parameter& ParamGroup::add(std::string param_name, Tensor init) {
  require(!contains(param_name), ErrorCode::ConfigError, "duplicate parameter " + name_ + "/" + param_name);
  params_.emplace_back(std::move(param_name), std::move(init));
  return params_.back();
}

Parameter& ParamGroup::get(std::string_view param_name) {
  for (auto& p : params_)
    if (p.name == param_name) return p;
  fail(ErrorCode::ConfigError, "no parameter " + name_ + "/" + std::string(param_name));
}

const Parameter& ParamGroup::get(std::string_view param_name) const {
  for (const auto& p : params_)
    if (p.name == param_name) return p;
  fail(ErrorCode::ConfigError, "no parameter " + name_ + "/" + std::string(param_name));
}

bool ParamGroup::contains(std::string_view param_name) const {
  for (const auto& p : params_)
    if (p.name == param_name) return true;
  return false;
}

std::size_t ParamGroup::numel() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void ParamGroup::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void ParamGroup::round_to_float() {
  for (auto& p : params_)
    for (double& v : p.value.data) v = static_cast<double>(static_cast<float>(v));
}

bool ParamGroup::operator==(const ParamGroup& other) const {
  if (name_ != other.name_ || params_.size() != other.params_.size()) return false;
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name != other.params_[i].name || !(params_[i].value == other.params_[i].value)) return false;
  return true;
}

Var Binder::operator()(std::string_view name) const {
  if (mutable_ != nullptr) return g_->param(mutable_->get(name), true);
  // Frozen binding never accumulates gradients, so the const_cast is never written through.
  return g_->param(const_cast<Parameter&>(frozen_->get(name)), false);
}

Tensor init_normal(ad::Shape shape, int fan_in, std::mt19937_64& rng, double gain) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, gain / std::sqrt(static_cast<double>(fan_in)));
  for (double& v : t.data) v = dist(rng);
  return t;
}

void add_linear(ParamGroup& group, const std::string& prefix, int in, int out, std::mt19937_64& rng, double gain,
                bool zero) {
  group.add(prefix + ".w", zero ? Tensor({out, in}) : init_normal({out, in}, in, rng, gain));
  group.add(prefix + ".b", Tensor({out}));
}

Var apply_linear(const Binder& bind, const std::string& prefix, Var x) {
  return ad::linear(x, bind(prefix + ".w"), bind(prefix + ".b"));
}

void add_conv(ParamGroup& group, const std::string& prefix, int in, int out, int k, std::mt19937_64& rng,
              double gain) {
  group.add(prefix + ".w", init_normal({out, in, k, k}, in * k * k, rng, gain));
  group.add(prefix + ".b", Tensor({out}));
}

Var apply_conv(const Binder& bind, const std::string& prefix, Var x, int stride, int pad) {
  return ad::conv2d(x, bind(prefix + ".w"), bind(prefix + ".b"), stride, pad);
}

double global_grad_norm(const std::vector<ParamGroup*>& groups) {
  double sq = 0.0;
  for (const ParamGroup* g : groups)
    for (const auto& p : g->params())
      for (double v : p.grad.data) sq += v * v;
  return std::sqrt(sq);
}

double clip_grad_norm(const std::vector<ParamGroup*>& groups, double max_norm) {
  const double norm = global_grad_norm(groups);
  if (norm > max_norm && norm > 0.0) {
    const double k = max_norm / norm;
    for (ParamGroup* g : groups)
      for (auto& p : g->params())
        for (double& v : p.grad.data) v *= k;
  }
  return norm;
}

void Adam::step(const std::vector<ParamGroup*>& groups, double lr) {
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (ParamGroup* g : groups)
    for (auto& p : g->params()) {
      if (p.grad.shape != p.value.shape) continue;
      const std::string key = g->name() + "/" + p.name;
      auto [mit, mnew] = m_.try_emplace(key, p.value.shape);
      auto [vit, vnew] = v_.try_emplace(key, p.value.shape);
      Tensor& m = mit->second;
      Tensor& v = vit->second;
      for (std::size_t i = 0; i < p.value.numel(); ++i) {
        const double gr = p.grad[i];
        m[i] = config_.beta1 * m[i] + (1.0 - config_.beta1) * gr;
        v[i] = config_.beta2 * v[i] + (1.0 - config_.beta2) * gr * gr;
        p.value[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + config_.eps);
      }
    }
}

void Adam::restore(std::int64_t t, std::map<std::string, Tensor> m, std::map<std::string, Tensor> v) {
  t_ = t;
  m_ = std::move(m);
  v_ = std::move(v);
}

std::uint64_t fnv1a(const void* data, std::size_t size, std::uint64_t seed) {
  const auto* bytes = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= bytes[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

std::string group_digest(const ParamGroup& group) {
  std::uint64_t h = fnv1a(group.name().data(), group.name().size());
  for (const auto& p : group.params()) {
    h = fnv1a(p.name.data(), p.name.size(), h);
    h = fnv1a(p.value.shape.data(), p.value.shape.size() * sizeof(int), h);
    for (double v : p.value.data) {
      const float f = static_cast<float>(v);
      h = fnv1a(&f, sizeof f, h);
    }
  }
  return hex64(h);
}

}  // namespace conceptmark::nn
