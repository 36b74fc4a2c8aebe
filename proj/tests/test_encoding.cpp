#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "conceptmark/encoding.hpp"
#include "conceptmark/error.hpp"
#include "support/gradcheck.hpp"

using namespace conceptmark;

namespace {

EncodingConfig tiny() {
  EncodingConfig cfg;
  cfg.embedding_dim = 4;
  cfg.n_bits = 4;
  cfg.hidden_width_multiplier = 2;
  cfg.latent_shape = {1, 2, 2};
  return cfg;
}

/// Stands in for trained weights: every entry, including the zero-initialized output layer, becomes random.
void scramble(nn::ParamGroup& g, std::uint64_t seed, double scale = 0.5) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> d(0.0, scale);
  for (auto& p : g.params())
    for (double& v : p.value.data) v = d(rng);
}

PromptEmbedding prompt_of(int len, int dim, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  PromptEmbedding e;
  e.tokens = testsupport::random_tensor({len, dim}, rng);
  for (int i = 0; i < len; ++i) e.words.push_back("w" + std::to_string(i));
  return e;
}

const Secret kS1(std::vector<int>{1, 0, 1, 1});
const Secret kS2(std::vector<int>{0, 0, 1, 0});

double norm_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

}  // namespace

TEST_CASE("fresh encoders produce exact zeros") {
  const auto cfg = tiny();
  auto enc = make_concept_encoder(cfg, 1);
  auto map = make_secret_mapper(cfg, 2);
  for (double v : concept_encoder_delta(enc, cfg, {0.3, -1.0, 2.0, 0.5}, kS1)) CHECK(v == 0.0);
  for (double v : secret_mapper_delta(map, cfg, kS1).data) CHECK(v == 0.0);
}

TEST_CASE("encoder forwards are deterministic") {
  const auto cfg = tiny();
  auto enc = make_concept_encoder(cfg, 1);
  scramble(enc, 5);
  CHECK(concept_encoder_delta(enc, cfg, {1, 2, 3, 4}, kS1) == concept_encoder_delta(enc, cfg, {1, 2, 3, 4}, kS1));
  auto a = make_concept_encoder(cfg, 9);
  auto b = make_concept_encoder(cfg, 9);
  CHECK(a == b);
}

TEST_CASE("dimension checks") {
  const auto cfg = tiny();
  auto enc = make_concept_encoder(cfg, 1);
  auto map = make_secret_mapper(cfg, 2);
  CHECK_THROWS_AS(concept_encoder_delta(enc, cfg, {1, 2, 3}, kS1), Error);
  CHECK_THROWS_AS(secret_mapper_delta(map, cfg, Secret(std::vector<int>{1, 0})), Error);
  try {
    secret_mapper_delta(map, cfg, Secret(std::vector<int>{1, 0}));
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::DimensionMismatch);
  }
}

TEST_CASE("concept encoder gradient w.r.t. e_c matches central differences") {
  const auto cfg = tiny();
  auto enc = make_concept_encoder(cfg, 3);
  scramble(enc, 4);
  std::mt19937_64 rng(8);
  auto e = testsupport::random_tensor({1, 4}, rng);
  const double err = testsupport::check_inputs(
      [&](ad::Graph& g, const std::vector<ad::Var>& v) {
        nn::Binder bind(g, enc);
        auto out = concept_encoder_forward(bind, cfg, v[0], g.constant(signed_secret_rows({kS1})));
        return testsupport::project(g, out);
      },
      {e});
  CHECK(err <= 1e-4);
}

TEST_CASE("parameter gradients of both networks match central differences") {
  const auto cfg = tiny();
  for (int which = 0; which < 2; ++which) {
    auto group = which == 0 ? make_concept_encoder(cfg, 3) : make_secret_mapper(cfg, 3);
    scramble(group, 11 + which);
    auto loss = [&](ad::Graph& g, const nn::Binder& bind) {
      auto s = g.constant(signed_secret_rows({kS1, kS2}));
      if (which == 0) {
        auto e = g.constant(ad::Tensor({2, 4}, {0.1, -0.2, 0.3, 0.4, 1.0, 0.5, -0.5, 0.0}));
        return testsupport::project(g, concept_encoder_forward(bind, cfg, e, s));
      }
      return testsupport::project(g, secret_mapper_forward(bind, cfg, s));
    };
    group.zero_grad();
    {
      ad::Graph g;
      nn::Binder bind(g, group, true);
      g.backward(loss(g, bind));
    }
    for (auto& p : group.params()) {
      auto eval = [&](const std::vector<double>& x) {
        auto keep = p.value.data;
        p.value.data = x;
        ad::Graph g;
        nn::Binder bind(g, group);
        const double v = loss(g, bind).value()[0];
        p.value.data = keep;
        return v;
      };
      const auto num = testsupport::numeric_grad(eval, p.value.data);
      CHECK_MESSAGE(testsupport::rel_error(p.grad.data, num) <= 1e-4, p.name);
    }
  }
}

TEST_CASE("distinct secrets give distinct noise perturbations") {
  const auto cfg = tiny();
  auto map = make_secret_mapper(cfg, 2);
  scramble(map, 6);
  const auto a = secret_mapper_delta(map, cfg, kS1);
  const auto b = secret_mapper_delta(map, cfg, kS2);
  double dist = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) dist += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(std::sqrt(dist) > 1e-3);
  CHECK(a.shape == cfg.latent_shape);
}

TEST_CASE("mapper gain scales the perturbation") {
  auto cfg = tiny();
  auto map = make_secret_mapper(cfg, 2);
  scramble(map, 6);
  const auto base = secret_mapper_delta(map, cfg, kS1);
  cfg.mapper_gain = 3.0;
  const auto scaled = secret_mapper_delta(map, cfg, kS1);
  for (std::size_t i = 0; i < base.numel(); ++i) CHECK(scaled[i] == doctest::Approx(3.0 * base[i]));
}

TEST_CASE("perturb_prompt is neutral at initialization and local afterwards") {
  const auto cfg = tiny();
  auto enc = make_concept_encoder(cfg, 1);
  auto e = prompt_of(5, 4, 3);
  e.target_positions = {{"obj", 1}, {"sty", 3}};
  const auto copy = e;

  CHECK(perturb_prompt(e, cfg, {{"obj", {&enc, kS1}}}) == e);

  scramble(enc, 2);
  const auto one = perturb_prompt(e, cfg, {{"obj", {&enc, kS1}}});
  CHECK(e == copy);
  int changed = 0;
  for (int i = 0; i < 5; ++i) changed += one.row(i) != e.row(i);
  CHECK(changed == 1);
  CHECK(one.row(1) != e.row(1));

  const auto two = perturb_prompt(e, cfg, {{"obj", {&enc, kS1}}, {"sty", {&enc, kS2}}});
  for (int i : {0, 2, 4}) CHECK(two.row(i) == e.row(i));
  // Independent recomputation of each per-position delta.
  for (auto [pos, secret] : {std::pair{1, kS1}, std::pair{3, kS2}}) {
    const auto delta = concept_encoder_delta(enc, cfg, e.row(pos), secret);
    const auto got = two.row(pos);
    const auto base = e.row(pos);
    for (int c = 0; c < 4; ++c) CHECK(got[c] == base[c] + delta[c]);
  }
}

TEST_CASE("perturb_prompt needs a target position") {
  const auto cfg = tiny();
  auto enc = make_concept_encoder(cfg, 1);
  auto e = prompt_of(3, 4, 3);
  try {
    perturb_prompt(e, cfg, {{"missing", {&enc, kS1}}});
    FAIL("expected UnknownTargetPosition");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::UnknownTargetPosition);
  }
}

TEST_CASE("perturb_noise sums deltas") {
  std::mt19937_64 rng(4);
  const auto z = testsupport::random_tensor({3, 4, 4}, rng);
  const auto a = testsupport::random_tensor({3, 4, 4}, rng);
  const auto b = testsupport::random_tensor({3, 4, 4}, rng);
  const auto c = testsupport::random_tensor({3, 4, 4}, rng);
  CHECK(perturb_noise(z, {}) == z);
  const auto single = perturb_noise(z, {a});
  for (std::size_t i = 0; i < z.numel(); ++i) CHECK(single[i] == z[i] + a[i]);
  CHECK(perturb_noise(z, {a, b}) == perturb_noise(z, {b, a}));
  CHECK(perturb_noise(z, {a, b, c}) == perturb_noise(z, {c, a, b}));
  CHECK(perturb_noise(z, {a}).shape == z.shape);
  CHECK_THROWS_AS(perturb_noise(z, {ad::Tensor({3, 4})}), Error);
}

TEST_CASE("prompt weighting scales one row") {
  auto e = prompt_of(3, 4, 7);
  CHECK(apply_prompt_weight(e, 1, 1.0) == e);
  const auto w = apply_prompt_weight(e, 1, 1.1);
  CHECK(norm_of(w.row(1)) / norm_of(e.row(1)) == doctest::Approx(1.1).epsilon(1e-12));
  CHECK(w.row(0) == e.row(0));
  CHECK(w.row(2) == e.row(2));

  PromptEmbedding unit;
  unit.tokens = ad::Tensor({1, 2}, {0.6, 0.8});
  CHECK(norm_of(apply_prompt_weight(unit, 0, 2.0).row(0)) == doctest::Approx(2.0));

  try {
    apply_prompt_weight(e, 5, 1.1);
    FAIL("expected IndexOutOfRange");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::IndexOutOfRange);
  }
  try {
    apply_prompt_weight(e, 0, 0.0);
    FAIL("expected NonPositiveAlpha");
  } catch (const Error& err) {
    CHECK(err.code() == ErrorCode::NonPositiveAlpha);
  }
}
