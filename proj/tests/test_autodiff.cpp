#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "conceptmark/autodiff.hpp"
#include "conceptmark/error.hpp"
#include "conceptmark/nn.hpp"
#include "support/gradcheck.hpp"

namespace ad = conceptmark::ad;
using testsupport::check_inputs;
using testsupport::project;
using testsupport::random_tensor;

namespace {

constexpr double kTol = 1e-6;

std::mt19937_64& rng() {
  static std::mt19937_64 r(12345);
  return r;
}

}  // namespace

TEST_CASE("elementwise ops match finite differences") {
  auto a = random_tensor({2, 3}, rng());
  auto b = random_tensor({2, 3}, rng());
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::add(v[0], v[1])); }, {a, b}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::sub(v[0], v[1])); }, {a, b}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::mul(v[0], v[1])); }, {a, b}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::scale(v[0], -1.7)); }, {a}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::silu(v[0])); }, {a}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::tanh(v[0])); }, {a}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::sigmoid(v[0])); }, {a}) < kTol);
}

TEST_CASE("clamp passes gradient only strictly inside the range") {
  ad::Graph g;
  auto x = g.input(ad::Tensor({4}, {-0.5, 0.2, 0.9, 1.5}));
  g.backward(ad::sum(ad::clamp(x, 0.0, 1.0)));
  CHECK(x.grad() == std::vector<double>{0.0, 1.0, 1.0, 0.0});
}

TEST_CASE("shape ops match finite differences") {
  auto a = random_tensor({3, 4}, rng());
  auto b = random_tensor({3, 2}, rng());
  auto d = random_tensor({4}, rng());
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::reshape(v[0], {2, 6})); }, {a}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::stack({v[0], v[0]})); }, {a}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::select(v[0], 1)); }, {a}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::slice_cols(v[0], 1, 2)); }, {a}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::concat_cols(v[0], v[1])); }, {a, b}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::add_to_row(v[0], 2, v[1])); }, {a, d}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::scale_row(v[0], 1, 1.1)); }, {a}) < kTol);
}

TEST_CASE("linear algebra ops match finite differences") {
  auto x = random_tensor({2, 3, 4}, rng());
  auto w = random_tensor({5, 4}, rng());
  auto bias = random_tensor({5}, rng());
  auto k = random_tensor({2, 6, 4}, rng());
  auto v6 = random_tensor({2, 6, 3}, rng());
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::linear(v[0], v[1], v[2])); }, {x, w, bias}) <
        kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::linear(v[0], v[1], ad::Var())); }, {x, w}) <
        kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::bmm_bt(v[0], v[1])); }, {x, k}) < kTol);
  auto att = random_tensor({2, 3, 6}, rng());
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::bmm(v[0], v[1])); }, {att, v6}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::softmax(v[0])); }, {x}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::mean_axis1(v[0])); }, {x}) < kTol);
}

TEST_CASE("softmax rows sum to one") {
  ad::Graph g;
  auto y = ad::softmax(g.constant(ad::Tensor({2, 3}, {1000.0, 0.0, -1000.0, 1.0, 2.0, 3.0})));
  CHECK(y.value()[0] + y.value()[1] + y.value()[2] == doctest::Approx(1.0));
  CHECK(y.value()[3] + y.value()[4] + y.value()[5] == doctest::Approx(1.0));
}

TEST_CASE("conv2d matches a direct convolution and finite differences") {
  auto x = random_tensor({2, 2, 5, 5}, rng());
  auto w = random_tensor({3, 2, 3, 3}, rng());
  auto b = random_tensor({3}, rng());
  for (int stride : {1, 2}) {
    ad::Graph g;
    auto y = ad::conv2d(g.constant(x), g.constant(w), g.constant(b), stride, 1);
    const int oh = (5 + 2 - 3) / stride + 1;
    REQUIRE(y.shape() == ad::Shape({2, 3, oh, oh}));
    double worst = 0.0;
    for (int n = 0; n < 2; ++n)
      for (int o = 0; o < 3; ++o)
        for (int r = 0; r < oh; ++r)
          for (int c = 0; c < oh; ++c) {
            double acc = b[o];
            for (int ci = 0; ci < 2; ++ci)
              for (int ki = 0; ki < 3; ++ki)
                for (int kj = 0; kj < 3; ++kj) {
                  const int iy = r * stride - 1 + ki, ix = c * stride - 1 + kj;
                  if (iy < 0 || iy >= 5 || ix < 0 || ix >= 5) continue;
                  acc += w[((o * 2 + ci) * 3 + ki) * 3 + kj] * x[((n * 2 + ci) * 5 + iy) * 5 + ix];
                }
            worst = std::max(worst, std::abs(acc - y.value()[((n * 3 + o) * oh + r) * oh + c]));
          }
    CHECK(worst < 1e-12);
    CHECK(check_inputs([stride](ad::Graph& gg, auto v) { return project(gg, ad::conv2d(v[0], v[1], v[2], stride, 1)); },
                       {x, w, b}) < kTol);
  }
}

TEST_CASE("image ops match finite differences") {
  auto x = random_tensor({2, 3, 4, 4}, rng());
  auto gm = random_tensor({2, 3}, rng());
  auto bt = random_tensor({2, 3}, rng());
  auto map = random_tensor({3, 4, 4}, rng());
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::film(v[0], v[1], v[2])); }, {x, gm, bt}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::add_map(v[0], v[1])); }, {x, map}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::resize_bilinear(v[0], 8, 8)); }, {x}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::resize_bilinear(v[0], 3, 2)); }, {x}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::spatial_mean(v[0])); }, {x}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::spatial_std(v[0])); }, {x}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::to_sequence(v[0])); }, {x}) < kTol);
}

TEST_CASE("bilinear upsampling by two follows half-pixel centers") {
  ad::Tensor x({1, 2}, {0.0, 1.0});
  auto y = ad::resize_bilinear_value(x, 1, 4);
  CHECK(y.data == std::vector<double>{0.0, 0.25, 0.75, 1.0});
}

TEST_CASE("losses match finite differences") {
  auto a = random_tensor({3, 4}, rng());
  auto b = random_tensor({3, 4}, rng());
  ad::Tensor targets({3, 4}, {1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 0});
  CHECK(check_inputs([](ad::Graph&, auto v) { return ad::mse(v[0], v[1]); }, {a, b}) < kTol);
  CHECK(check_inputs([&](ad::Graph&, auto v) { return ad::bce_with_logits(v[0], targets); }, {a}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::cosine_rows(v[0], v[1])); }, {a, b}) < kTol);
  CHECK(check_inputs([](ad::Graph&, auto v) { return ad::mean(v[0]); }, {a}) < kTol);
  CHECK(check_inputs([](ad::Graph& g, auto v) { return project(g, ad::l2_normalize_rows(v[0])); }, {a}) < kTol);
  CHECK(check_inputs([](ad::Graph&, auto v) { return ad::cross_entropy_rows(v[0], {3, 0, 1}); }, {a}) < kTol);
}

TEST_CASE("cross entropy of uniform logits is log K") {
  ad::Graph g;
  auto l = g.constant(ad::Tensor({2, 4}));
  CHECK(ad::cross_entropy_rows(l, {0, 3}).value()[0] == doctest::Approx(std::log(4.0)));
}

TEST_CASE("cosine of identical and negated rows is exact") {
  ad::Graph g;
  ad::Tensor a({1, 3}, {0.1, 0.7, -0.3});
  ad::Tensor n({1, 3}, {-0.1, -0.7, 0.3});
  CHECK(ad::cosine_rows(g.constant(a), g.constant(a)).value()[0] == 1.0);
  CHECK(ad::cosine_rows(g.constant(a), g.constant(n)).value()[0] == -1.0);
  CHECK_THROWS_AS(ad::cosine_rows(g.constant(a), g.constant(ad::Tensor({1, 3}))), conceptmark::Error);
}

TEST_CASE("mismatched shapes are rejected") {
  ad::Graph g;
  auto a = g.constant(ad::Tensor({2, 3}));
  auto b = g.constant(ad::Tensor({3, 2}));
  CHECK_THROWS_AS(ad::add(a, b), conceptmark::Error);
  CHECK_THROWS_AS(ad::linear(a, b, ad::Var()), conceptmark::Error);
}

TEST_CASE("frozen parameters receive no gradient and trainable ones accumulate") {
  conceptmark::nn::ParamGroup group("g");
  auto& w = group.add("w", ad::Tensor({2, 2}, {1, 2, 3, 4}));
  ad::Graph g;
  auto x = g.input(ad::Tensor({1, 2}, {1.0, -1.0}));
  {
    conceptmark::nn::Binder frozen(g, group);
    g.backward(ad::sum(ad::linear(x, frozen("w"), ad::Var())));
    CHECK(w.grad.data == std::vector<double>(4, 0.0));
  }
  ad::Graph g2;
  conceptmark::nn::Binder live(g2, group, true);
  auto x2 = g2.constant(ad::Tensor({1, 2}, {1.0, -1.0}));
  g2.backward(ad::sum(ad::linear(x2, live("w"), ad::Var())));
  CHECK(w.grad.data == std::vector<double>{1.0, -1.0, 1.0, -1.0});
}

TEST_CASE("adam moves a parameter against its gradient") {
  conceptmark::nn::ParamGroup group("g");
  auto& p = group.add("p", ad::Tensor({1}, {0.5}));
  p.grad = ad::Tensor({1}, {2.0});
  conceptmark::nn::Adam opt;
  opt.step({&group}, 0.01);
  // First bias-corrected step has magnitude lr regardless of gradient scale.
  CHECK(p.value[0] == doctest::Approx(0.49).epsilon(1e-9));
}

TEST_CASE("gradient clipping caps the global norm") {
  conceptmark::nn::ParamGroup group("g");
  auto& p = group.add("p", ad::Tensor({2}));
  p.grad = ad::Tensor({2}, {3.0, 4.0});
  const double before = conceptmark::nn::clip_grad_norm({&group}, 1.0);
  CHECK(before == doctest::Approx(5.0));
  CHECK(conceptmark::nn::global_grad_norm({&group}) == doctest::Approx(1.0));
}
