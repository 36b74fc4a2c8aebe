#include "conceptmark/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#ifdef __AVX2__
#include <immintrin.h>
#endif

#include "conceptmark/error.hpp"

namespace conceptmark::ad {

namespace {

// Dense kernels. Every output element sums its k products in index order and then
// adds the total to C, on both the vector and the scalar path, so results never
// depend on buffer alignment or on how many rows are processed together.

// C[m, n] += A[m, k] * B[k, n]
void gemm_nn(const double* a, const double* b, double* c, int m, int n, int k) {
  int m4 = 0, n8 = 0;
#ifdef __AVX2__
  m4 = m - m % 4;
  n8 = n - n % 8;
  for (int j = 0; j < n8; j += 8)
    for (int i = 0; i < m4; i += 4) {
      __m256d acc[4][2];
      for (auto& row : acc) row[0] = row[1] = _mm256_setzero_pd();
      const double* arow = a + static_cast<std::size_t>(i) * k;
      for (int p = 0; p < k; ++p) {
        const double* brow = b + static_cast<std::size_t>(p) * n + j;
        const __m256d b0 = _mm256_loadu_pd(brow);
        const __m256d b1 = _mm256_loadu_pd(brow + 4);
        for (int r = 0; r < 4; ++r) {
          const __m256d av = _mm256_broadcast_sd(arow + static_cast<std::size_t>(r) * k + p);
          acc[r][0] = _mm256_add_pd(acc[r][0], _mm256_mul_pd(av, b0));
          acc[r][1] = _mm256_add_pd(acc[r][1], _mm256_mul_pd(av, b1));
        }
      }
      for (int r = 0; r < 4; ++r) {
        double* crow = c + static_cast<std::size_t>(i + r) * n + j;
        _mm256_storeu_pd(crow, _mm256_add_pd(_mm256_loadu_pd(crow), acc[r][0]));
        _mm256_storeu_pd(crow + 4, _mm256_add_pd(_mm256_loadu_pd(crow + 4), acc[r][1]));
      }
    }
#endif
  for (int i = 0; i < m; ++i)
    for (int j = i < m4 ? n8 : 0; j < n; ++j) {
      double s = 0.0;
      for (int p = 0; p < k; ++p) s += a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
      c[static_cast<std::size_t>(i) * n + j] += s;
    }
}

std::vector<double> transposed(const double* x, int rows, int cols) {
  std::vector<double> t(static_cast<std::size_t>(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int q = 0; q < cols; ++q) t[static_cast<std::size_t>(q) * rows + r] = x[static_cast<std::size_t>(r) * cols + q];
  return t;
}

// C[m, n] += A[m, k] * B[n, k]^T
void gemm_nt(const double* a, const double* b, double* c, int m, int n, int k) {
  const auto bt = transposed(b, n, k);
  gemm_nn(a, bt.data(), c, m, n, k);
}

// C[m, n] += A[k, m]^T * B[k, n]
void gemm_tn(const double* a, const double* b, double* c, int m, int n, int k) {
  const auto at = transposed(a, k, m);
  gemm_nn(at.data(), b, c, m, n, k);
}

void check(bool ok, const std::string& what) {
  if (!ok) fail(ErrorCode::ShapeMismatch, what);
}

void check_same(const Var& a, const Var& b, const char* op) {
  check(a.shape() == b.shape(),
        std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

template <class Fwd, class Deriv>
Var unary(Var a, Fwd fwd, Deriv deriv) {
  const Tensor& x = a.value();
  Tensor y(x.shape);
  for (std::size_t i = 0; i < x.numel(); ++i) y[i] = fwd(x[i]);
  Graph* g = a.graph();
  return g->make(std::move(y), {a}, [g, a, deriv](Graph::Node& self) {
    auto& ga = g->grad_buffer(a);
    const Tensor& xv = a.value();
    const Tensor& yv = self.value();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * deriv(xv[i], yv[i]);
  });
}

// Interpolation taps of a 1-D bilinear resize with half-pixel centers.
struct Taps {
  std::vector<int> lo, hi;
  std::vector<double> w_hi;
};

Taps make_taps(int in, int out) {
  Taps t;
  t.lo.resize(static_cast<std::size_t>(out));
  t.hi.resize(static_cast<std::size_t>(out));
  t.w_hi.resize(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    t.lo[static_cast<std::size_t>(o)] = i0;
    t.hi[static_cast<std::size_t>(o)] = i1;
    t.w_hi[static_cast<std::size_t>(o)] = src - i0;
  }
  return t;
}

void resize_forward(const double* x, double* y, int planes, int h, int w, int oh, int ow, const Taps& ty,
                    const Taps& tx) {
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int p = 0; p < planes; ++p) {
    const double* xp = x + static_cast<std::size_t>(p) * h * w;
    double* yp = y + static_cast<std::size_t>(p) * oh * ow;
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < ow; ++c) {
        const double a = xp[r * w + tx.lo[c]];
        const double b = xp[r * w + tx.hi[c]];
        tmp[static_cast<std::size_t>(r) * ow + c] = a + (b - a) * tx.w_hi[c];
      }
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        const double a = tmp[static_cast<std::size_t>(ty.lo[r]) * ow + c];
        const double b = tmp[static_cast<std::size_t>(ty.hi[r]) * ow + c];
        yp[r * ow + c] = a + (b - a) * ty.w_hi[r];
      }
  }
}

void resize_backward(const double* dy, double* dx, int planes, int h, int w, int oh, int ow, const Taps& ty,
                     const Taps& tx) {
  std::vector<double> tmp(static_cast<std::size_t>(h) * ow);
  for (int p = 0; p < planes; ++p) {
    const double* dyp = dy + static_cast<std::size_t>(p) * oh * ow;
    double* dxp = dx + static_cast<std::size_t>(p) * h * w;
    std::fill(tmp.begin(), tmp.end(), 0.0);
    for (int r = 0; r < oh; ++r)
      for (int c = 0; c < ow; ++c) {
        const double gv = dyp[r * ow + c];
        tmp[static_cast<std::size_t>(ty.lo[r]) * ow + c] += gv * (1.0 - ty.w_hi[r]);
        tmp[static_cast<std::size_t>(ty.hi[r]) * ow + c] += gv * ty.w_hi[r];
      }
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < ow; ++c) {
        const double gv = tmp[static_cast<std::size_t>(r) * ow + c];
        dxp[r * w + tx.lo[c]] += gv * (1.0 - tx.w_hi[c]);
        dxp[r * w + tx.hi[c]] += gv * tx.w_hi[c];
      }
  }
}

// Output columns [lo, hi) whose input column ox * stride - pad + kj lies inside [0, w).
inline void valid_range(int ow, int w, int stride, int pad, int kj, int& lo, int& hi) {
  lo = 0;
  while (lo < ow && lo * stride - pad + kj < 0) ++lo;
  hi = ow;
  while (hi > lo && (hi - 1) * stride - pad + kj >= w) --hi;
}

void im2col(const double* x, double* cols, int n, int c, int h, int w, int k, int stride, int pad, int oh, int ow) {
  const std::size_t pix = static_cast<std::size_t>(oh) * ow;
  const std::size_t ncols = static_cast<std::size_t>(n) * pix;
  for (int ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        int lo, hi;
        valid_range(ow, w, stride, pad, kj, lo, hi);
        double* row = cols + static_cast<std::size_t>((ci * k + ki) * k + kj) * ncols;
        for (int b = 0; b < n; ++b) {
          const double* plane = x + (static_cast<std::size_t>(b) * c + ci) * h * w;
          double* dst = row + b * pix;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= h) continue;
            const double* src = plane + static_cast<std::size_t>(iy) * w - pad + kj;
            double* out = dst + static_cast<std::size_t>(oy) * ow;
            if (stride == 1) {
              for (int ox = lo; ox < hi; ++ox) out[ox] = src[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) out[ox] = src[ox * stride];
            }
          }
        }
      }
}

void col2im(const double* cols, double* dx, int n, int c, int h, int w, int k, int stride, int pad, int oh, int ow) {
  const std::size_t pix = static_cast<std::size_t>(oh) * ow;
  const std::size_t ncols = static_cast<std::size_t>(n) * pix;
  for (int ci = 0; ci < c; ++ci)
    for (int ki = 0; ki < k; ++ki)
      for (int kj = 0; kj < k; ++kj) {
        int lo, hi;
        valid_range(ow, w, stride, pad, kj, lo, hi);
        const double* row = cols + static_cast<std::size_t>((ci * k + ki) * k + kj) * ncols;
        for (int b = 0; b < n; ++b) {
          double* plane = dx + (static_cast<std::size_t>(b) * c + ci) * h * w;
          const double* src = row + b * pix;
          for (int oy = 0; oy < oh; ++oy) {
            const int iy = oy * stride - pad + ki;
            if (iy < 0 || iy >= h) continue;
            double* dst = plane + static_cast<std::size_t>(iy) * w - pad + kj;
            const double* in = src + static_cast<std::size_t>(oy) * ow;
            if (stride == 1) {
              for (int ox = lo; ox < hi; ++ox) dst[ox] += in[ox];
            } else {
              for (int ox = lo; ox < hi; ++ox) dst[ox * stride] += in[ox];
            }
          }
        }
      }
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         [](std::size_t acc, int d) { return acc * static_cast<std::size_t>(d); });
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
  check(data.size() == shape_numel(shape), "tensor data does not match shape " + shape_str(shape));
}

void Parameter::zero_grad() {
  if (grad.shape != value.shape) grad = Tensor(value.shape);
  std::fill(grad.data.begin(), grad.data.end(), 0.0);
}

const Tensor& Var::value() const { return graph_->node(id_).value(); }
bool Var::requires_grad() const { return graph_->node(id_).requires_grad; }

std::vector<double> Var::grad() const {
  const auto& n = graph_->node(id_);
  if (n.grad.empty()) return std::vector<double>(n.value().numel(), 0.0);
  return n.grad;
}

Var Graph::constant(Tensor value) {
  auto n = std::make_unique<Node>();
  n->own = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::input(Tensor value) {
  Var v = constant(std::move(value));
  node(v.id()).requires_grad = true;
  return v;
}

Var Graph::param(Parameter& p, bool trainable) {
  auto n = std::make_unique<Node>();
  n->external = &p.value;
  n->requires_grad = trainable;
  n->param = trainable ? &p : nullptr;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Graph::make(Tensor value, std::initializer_list<Var> inputs, std::function<void(Node&)> backward) {
  return make(std::move(value), std::vector<Var>(inputs), std::move(backward));
}

Var Graph::make(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward) {
  auto n = std::make_unique<Node>();
  n->own = std::move(value);
  for (const Var& v : inputs)
    if (v.valid() && v.requires_grad()) n->requires_grad = true;
  if (n->requires_grad) n->backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size()) - 1};
}

std::vector<double>& Graph::grad_buffer(Var v) {
  Node& n = node(v.id());
  if (n.grad.empty()) n.grad.assign(n.value().numel(), 0.0);
  return n.grad;
}

void Graph::backward(Var root) {
  check(root.value().numel() == 1, "backward root must be a scalar");
  if (!root.requires_grad()) return;
  for (auto& n : nodes_) n->grad.clear();
  grad_buffer(root)[0] = 1.0;
  for (int i = root.id(); i >= 0; --i) {
    Node& n = node(i);
    if (!n.requires_grad || n.grad.empty()) continue;
    if (n.backward) n.backward(n);
    if (n.param != nullptr) {
      auto& acc = n.param->grad;
      if (acc.shape != n.param->value.shape) acc = Tensor(n.param->value.shape);
      for (std::size_t k = 0; k < n.grad.size(); ++k) acc.data[k] += n.grad[k];
    }
  }
}

// ---------------------------------------------------------------- elementwise

Var add(Var a, Var b) {
  check_same(a, b, "add");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] += b.value()[i];
  Graph* g = a.graph();
  return g->make(std::move(y), {a, b}, [g, a, b](Graph::Node& self) {
    for (Var v : {a, b}) {
      if (!v.requires_grad()) continue;
      auto& gv = g->grad_buffer(v);
      for (std::size_t i = 0; i < gv.size(); ++i) gv[i] += self.grad[i];
    }
  });
}

Var sub(Var a, Var b) {
  check_same(a, b, "sub");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] -= b.value()[i];
  Graph* g = a.graph();
  return g->make(std::move(y), {a, b}, [g, a, b](Graph::Node& self) {
    if (a.requires_grad()) {
      auto& ga = g->grad_buffer(a);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    }
    if (b.requires_grad()) {
      auto& gb = g->grad_buffer(b);
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

Var mul(Var a, Var b) {
  check_same(a, b, "mul");
  Tensor y = a.value();
  for (std::size_t i = 0; i < y.numel(); ++i) y[i] *= b.value()[i];
  Graph* g = a.graph();
  return g->make(std::move(y), {a, b}, [g, a, b](Graph::Node& self) {
    if (a.requires_grad()) {
      auto& ga = g->grad_buffer(a);
      const auto& bv = b.value();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto& gb = g->grad_buffer(b);
      const auto& av = a.value();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var silu(Var a) {
  return unary(
      a, [](double x) { return x * stable_sigmoid(x); },
      [](double x, double) {
        const double s = stable_sigmoid(x);
        return s * (1.0 + x * (1.0 - s));
      });
}

Var tanh(Var a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(a, stable_sigmoid, [](double, double y) { return y * (1.0 - y); });
}

Var clamp(Var a, double lo, double hi) {
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

// ---------------------------------------------------------------- shape

Var reshape(Var a, Shape shape) {
  check(shape_numel(shape) == a.value().numel(),
        "reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor y(std::move(shape), a.value().data);
  Graph* g = a.graph();
  return g->make(std::move(y), {a}, [g, a](Graph::Node& self) {
    auto& ga = g->grad_buffer(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
  });
}

Var stack(const std::vector<Var>& parts) {
  check(!parts.empty(), "stack of nothing");
  const Shape& inner = parts.front().shape();
  const std::size_t n = parts.front().value().numel();
  Shape out_shape{static_cast<int>(parts.size())};
  out_shape.insert(out_shape.end(), inner.begin(), inner.end());
  Tensor y(out_shape);
  for (std::size_t p = 0; p < parts.size(); ++p) {
    check(parts[p].shape() == inner, "stack: mismatched parts");
    std::copy(parts[p].value().data.begin(), parts[p].value().data.end(), y.data.begin() + p * n);
  }
  Graph* g = parts.front().graph();
  return g->make(std::move(y), parts, [g, parts, n](Graph::Node& self) {
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (!parts[p].requires_grad()) continue;
      auto& gp = g->grad_buffer(parts[p]);
      for (std::size_t i = 0; i < n; ++i) gp[i] += self.grad[p * n + i];
    }
  });
}

Var select(Var x, int index) {
  const Shape& s = x.shape();
  check(!s.empty() && index >= 0 && index < s[0], "select out of range");
  Shape inner(s.begin() + 1, s.end());
  const std::size_t n = shape_numel(inner);
  Tensor y(inner);
  std::copy_n(x.value().data.begin() + static_cast<std::ptrdiff_t>(index * n), n, y.data.begin());
  Graph* g = x.graph();
  return g->make(std::move(y), {x}, [g, x, index, n](Graph::Node& self) {
    auto& gx = g->grad_buffer(x);
    for (std::size_t i = 0; i < n; ++i) gx[index * n + i] += self.grad[i];
  });
}

Var slice_cols(Var x, int start, int len) {
  check(x.value().rank() == 2 && start >= 0 && start + len <= x.shape()[1], "slice_cols out of range");
  const int rows = x.shape()[0];
  const int cols = x.shape()[1];
  Tensor y({rows, len});
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < len; ++c) y[r * len + c] = x.value()[r * cols + start + c];
  Graph* g = x.graph();
  return g->make(std::move(y), {x}, [g, x, rows, cols, start, len](Graph::Node& self) {
    auto& gx = g->grad_buffer(x);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < len; ++c) gx[r * cols + start + c] += self.grad[r * len + c];
  });
}

Var concat_cols(Var a, Var b) {
  check(a.value().rank() == 2 && b.value().rank() == 2 && a.shape()[0] == b.shape()[0], "concat_cols");
  const int rows = a.shape()[0];
  const int ca = a.shape()[1];
  const int cb = b.shape()[1];
  Tensor y({rows, ca + cb});
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < ca; ++c) y[r * (ca + cb) + c] = a.value()[r * ca + c];
    for (int c = 0; c < cb; ++c) y[r * (ca + cb) + ca + c] = b.value()[r * cb + c];
  }
  Graph* g = a.graph();
  return g->make(std::move(y), {a, b}, [g, a, b, rows, ca, cb](Graph::Node& self) {
    if (a.requires_grad()) {
      auto& ga = g->grad_buffer(a);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < ca; ++c) ga[r * ca + c] += self.grad[r * (ca + cb) + c];
    }
    if (b.requires_grad()) {
      auto& gb = g->grad_buffer(b);
      for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cb; ++c) gb[r * cb + c] += self.grad[r * (ca + cb) + ca + c];
    }
  });
}

Var add_to_row(Var x, int row, Var delta) {
  check(x.value().rank() == 2 && row >= 0 && row < x.shape()[0], "add_to_row: row out of range");
  const int d = x.shape()[1];
  check(static_cast<int>(delta.value().numel()) == d, "add_to_row: delta width");
  Tensor y = x.value();
  for (int c = 0; c < d; ++c) y[row * d + c] += delta.value()[c];
  Graph* g = x.graph();
  return g->make(std::move(y), {x, delta}, [g, x, delta, row, d](Graph::Node& self) {
    if (x.requires_grad()) {
      auto& gx = g->grad_buffer(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    }
    if (delta.requires_grad()) {
      auto& gd = g->grad_buffer(delta);
      for (int c = 0; c < d; ++c) gd[c] += self.grad[row * d + c];
    }
  });
}

Var scale_row(Var x, int row, double alpha) {
  check(x.value().rank() == 2 && row >= 0 && row < x.shape()[0], "scale_row: row out of range");
  const int d = x.shape()[1];
  Tensor y = x.value();
  for (int c = 0; c < d; ++c) y[row * d + c] *= alpha;
  Graph* g = x.graph();
  return g->make(std::move(y), {x}, [g, x, row, d, alpha](Graph::Node& self) {
    auto& gx = g->grad_buffer(x);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const bool in_row = static_cast<int>(i) / d == row;
      gx[i] += self.grad[i] * (in_row ? alpha : 1.0);
    }
  });
}

// ---------------------------------------------------------------- linear algebra

Var linear(Var x, Var weight, Var bias) {
  const Shape& ws = weight.shape();
  check(ws.size() == 2, "linear: weight must be rank 2");
  const int out = ws[0];
  const int in = ws[1];
  check(!x.shape().empty() && x.shape().back() == in,
        "linear: input " + shape_str(x.shape()) + " vs weight " + shape_str(ws));
  if (bias.valid()) check(static_cast<int>(bias.value().numel()) == out, "linear: bias width");
  const int m = static_cast<int>(x.value().numel() / static_cast<std::size_t>(in));
  Shape ys = x.shape();
  ys.back() = out;
  Tensor y(ys);
  gemm_nt(x.value().data.data(), weight.value().data.data(), y.data.data(), m, out, in);
  if (bias.valid())
    for (int i = 0; i < m; ++i)
      for (int o = 0; o < out; ++o) y[static_cast<std::size_t>(i) * out + o] += bias.value()[static_cast<std::size_t>(o)];
  Graph* g = x.graph();
  std::vector<Var> inputs{x, weight};
  if (bias.valid()) inputs.push_back(bias);
  return g->make(std::move(y), inputs, [g, x, weight, bias, m, in, out](Graph::Node& self) {
    const double* dy = self.grad.data();
    if (x.requires_grad()) gemm_nn(dy, weight.value().data.data(), g->grad_buffer(x).data(), m, in, out);
    if (weight.requires_grad()) gemm_tn(dy, x.value().data.data(), g->grad_buffer(weight).data(), out, in, m);
    if (bias.valid() && bias.requires_grad()) {
      auto& db = g->grad_buffer(bias);
      for (int i = 0; i < m; ++i)
        for (int o = 0; o < out; ++o) db[static_cast<std::size_t>(o)] += dy[static_cast<std::size_t>(i) * out + o];
    }
  });
}

Var bmm_bt(Var a, Var b) {
  check(a.value().rank() == 3 && b.value().rank() == 3, "bmm_bt: rank 3 expected");
  const int batch = a.shape()[0], m = a.shape()[1], k = a.shape()[2];
  const int n = b.shape()[1];
  check(b.shape()[0] == batch && b.shape()[2] == k, "bmm_bt: " + shape_str(a.shape()) + " " + shape_str(b.shape()));
  Tensor y({batch, m, n});
  const std::size_t sa = static_cast<std::size_t>(m) * k, sb = static_cast<std::size_t>(n) * k,
                    sy = static_cast<std::size_t>(m) * n;
  for (int i = 0; i < batch; ++i)
    gemm_nt(a.value().data.data() + i * sa, b.value().data.data() + i * sb, y.data.data() + i * sy, m, n, k);
  Graph* g = a.graph();
  return g->make(std::move(y), {a, b}, [g, a, b, batch, m, n, k, sa, sb, sy](Graph::Node& self) {
    for (int i = 0; i < batch; ++i) {
      const double* dy = self.grad.data() + i * sy;
      if (a.requires_grad()) gemm_nn(dy, b.value().data.data() + i * sb, g->grad_buffer(a).data() + i * sa, m, k, n);
      if (b.requires_grad()) gemm_tn(dy, a.value().data.data() + i * sa, g->grad_buffer(b).data() + i * sb, n, k, m);
    }
  });
}

Var bmm(Var a, Var b) {
  check(a.value().rank() == 3 && b.value().rank() == 3, "bmm: rank 3 expected");
  const int batch = a.shape()[0], m = a.shape()[1], n = a.shape()[2];
  const int k = b.shape()[2];
  check(b.shape()[0] == batch && b.shape()[1] == n, "bmm: " + shape_str(a.shape()) + " " + shape_str(b.shape()));
  Tensor y({batch, m, k});
  const std::size_t sa = static_cast<std::size_t>(m) * n, sb = static_cast<std::size_t>(n) * k,
                    sy = static_cast<std::size_t>(m) * k;
  for (int i = 0; i < batch; ++i)
    gemm_nn(a.value().data.data() + i * sa, b.value().data.data() + i * sb, y.data.data() + i * sy, m, k, n);
  Graph* g = a.graph();
  return g->make(std::move(y), {a, b}, [g, a, b, batch, m, n, k, sa, sb, sy](Graph::Node& self) {
    for (int i = 0; i < batch; ++i) {
      const double* dy = self.grad.data() + i * sy;
      if (a.requires_grad()) gemm_nt(dy, b.value().data.data() + i * sb, g->grad_buffer(a).data() + i * sa, m, n, k);
      if (b.requires_grad()) gemm_tn(a.value().data.data() + i * sa, dy, g->grad_buffer(b).data() + i * sb, n, k, m);
    }
  });
}

Var softmax(Var a) {
  const int d = a.shape().back();
  const std::size_t rows = a.value().numel() / static_cast<std::size_t>(d);
  Tensor y(a.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = a.value().data.data() + r * d;
    double* out = y.data.data() + r * d;
    const double mx = *std::max_element(x, x + d);
    double total = 0.0;
    for (int c = 0; c < d; ++c) total += (out[c] = std::exp(x[c] - mx));
    for (int c = 0; c < d; ++c) out[c] /= total;
  }
  Graph* g = a.graph();
  return g->make(std::move(y), {a}, [g, a, rows, d](Graph::Node& self) {
    auto& ga = g->grad_buffer(a);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yv = self.value().data.data() + r * d;
      const double* dy = self.grad.data() + r * d;
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += dy[c] * yv[c];
      for (int c = 0; c < d; ++c) ga[r * d + c] += yv[c] * (dy[c] - dot);
    }
  });
}

Var mean_axis1(Var a) {
  check(a.value().rank() == 3, "mean_axis1: rank 3 expected");
  const int b = a.shape()[0], l = a.shape()[1], d = a.shape()[2];
  Tensor y({b, d});
  for (int i = 0; i < b; ++i)
    for (int t = 0; t < l; ++t)
      for (int c = 0; c < d; ++c) y[i * d + c] += a.value()[(static_cast<std::size_t>(i) * l + t) * d + c] / l;
  Graph* g = a.graph();
  return g->make(std::move(y), {a}, [g, a, b, l, d](Graph::Node& self) {
    auto& ga = g->grad_buffer(a);
    for (int i = 0; i < b; ++i)
      for (int t = 0; t < l; ++t)
        for (int c = 0; c < d; ++c) ga[(static_cast<std::size_t>(i) * l + t) * d + c] += self.grad[i * d + c] / l;
  });
}

// ---------------------------------------------------------------- image ops

Var conv2d(Var x, Var weight, Var bias, int stride, int pad) {
  check(x.value().rank() == 4 && weight.value().rank() == 4, "conv2d: rank 4 expected");
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  const int o = weight.shape()[0], k = weight.shape()[2];
  check(weight.shape()[1] == c && weight.shape()[3] == k,
        "conv2d: input " + shape_str(x.shape()) + " vs weight " + shape_str(weight.shape()));
  if (bias.valid()) check(static_cast<int>(bias.value().numel()) == o, "conv2d: bias width");
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (w + 2 * pad - k) / stride + 1;
  check(oh > 0 && ow > 0, "conv2d: empty output");
  const int ckk = c * k * k;
  const int pix = oh * ow;
  const std::size_t ncols = static_cast<std::size_t>(n) * pix;

  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(ckk) * ncols, 0.0);
  im2col(x.value().data.data(), cols->data(), n, c, h, w, k, stride, pad, oh, ow);

  std::vector<double> out_mat(static_cast<std::size_t>(o) * ncols, 0.0);
  gemm_nn(weight.value().data.data(), cols->data(), out_mat.data(), o, static_cast<int>(ncols), ckk);
  Tensor y({n, o, oh, ow});
  for (int b = 0; b < n; ++b)
    for (int oc = 0; oc < o; ++oc) {
      const double bv = bias.valid() ? bias.value()[static_cast<std::size_t>(oc)] : 0.0;
      const double* src = out_mat.data() + static_cast<std::size_t>(oc) * ncols + static_cast<std::size_t>(b) * pix;
      double* dst = y.data.data() + (static_cast<std::size_t>(b) * o + oc) * pix;
      for (int p = 0; p < pix; ++p) dst[p] = src[p] + bv;
    }

  Graph* g = x.graph();
  std::vector<Var> inputs{x, weight};
  if (bias.valid()) inputs.push_back(bias);
  if (!weight.requires_grad()) cols.reset();
  return g->make(std::move(y), inputs,
                 [g, x, weight, bias, cols, n, c, h, w, o, k, oh, ow, stride, pad, ckk, pix, ncols](Graph::Node& self) {
                   std::vector<double> dy(static_cast<std::size_t>(o) * ncols);
                   for (int b = 0; b < n; ++b)
                     for (int oc = 0; oc < o; ++oc)
                       std::copy_n(self.grad.data() + (static_cast<std::size_t>(b) * o + oc) * pix, pix,
                                   dy.data() + static_cast<std::size_t>(oc) * ncols + static_cast<std::size_t>(b) * pix);
                   if (weight.requires_grad())
                     gemm_nt(dy.data(), cols->data(), g->grad_buffer(weight).data(), o, ckk, static_cast<int>(ncols));
                   if (bias.valid() && bias.requires_grad()) {
                     auto& db = g->grad_buffer(bias);
                     for (int oc = 0; oc < o; ++oc)
                       for (std::size_t p = 0; p < ncols; ++p) db[static_cast<std::size_t>(oc)] += dy[oc * ncols + p];
                   }
                   if (x.requires_grad()) {
                     std::vector<double> dcols(static_cast<std::size_t>(ckk) * ncols, 0.0);
                     gemm_tn(weight.value().data.data(), dy.data(), dcols.data(), ckk, static_cast<int>(ncols), o);
                     col2im(dcols.data(), g->grad_buffer(x).data(), n, c, h, w, k, stride, pad, oh, ow);
                   }
                 });
}

Var film(Var x, Var gamma, Var beta) {
  check(x.value().rank() == 4, "film: rank 4 expected");
  const int n = x.shape()[0], c = x.shape()[1];
  const int pix = x.shape()[2] * x.shape()[3];
  check(gamma.shape() == Shape({n, c}) && beta.shape() == Shape({n, c}), "film: modulation must be [N, C]");
  Tensor y(x.shape());
  for (int i = 0; i < n * c; ++i) {
    const double gm = gamma.value()[static_cast<std::size_t>(i)];
    const double bt = beta.value()[static_cast<std::size_t>(i)];
    const double* src = x.value().data.data() + static_cast<std::size_t>(i) * pix;
    double* dst = y.data.data() + static_cast<std::size_t>(i) * pix;
    for (int p = 0; p < pix; ++p) dst[p] = src[p] * gm + bt;
  }
  Graph* g = x.graph();
  return g->make(std::move(y), {x, gamma, beta}, [g, x, gamma, beta, n, c, pix](Graph::Node& self) {
    for (int i = 0; i < n * c; ++i) {
      const double* dy = self.grad.data() + static_cast<std::size_t>(i) * pix;
      const double* xv = x.value().data.data() + static_cast<std::size_t>(i) * pix;
      if (x.requires_grad()) {
        double* gx = g->grad_buffer(x).data() + static_cast<std::size_t>(i) * pix;
        const double gm = gamma.value()[static_cast<std::size_t>(i)];
        for (int p = 0; p < pix; ++p) gx[p] += dy[p] * gm;
      }
      if (gamma.requires_grad()) {
        double acc = 0.0;
        for (int p = 0; p < pix; ++p) acc += dy[p] * xv[p];
        g->grad_buffer(gamma)[static_cast<std::size_t>(i)] += acc;
      }
      if (beta.requires_grad()) {
        double acc = 0.0;
        for (int p = 0; p < pix; ++p) acc += dy[p];
        g->grad_buffer(beta)[static_cast<std::size_t>(i)] += acc;
      }
    }
  });
}

Var add_map(Var x, Var map) {
  check(x.value().rank() == 4, "add_map: rank 4 expected");
  const Shape item(x.shape().begin() + 1, x.shape().end());
  check(map.shape() == item, "add_map: map " + shape_str(map.shape()) + " vs item " + shape_str(item));
  const int n = x.shape()[0];
  const std::size_t per = shape_numel(item);
  Tensor y = x.value();
  for (int b = 0; b < n; ++b)
    for (std::size_t i = 0; i < per; ++i) y[b * per + i] += map.value()[i];
  Graph* g = x.graph();
  return g->make(std::move(y), {x, map}, [g, x, map, n, per](Graph::Node& self) {
    if (x.requires_grad()) {
      auto& gx = g->grad_buffer(x);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i];
    }
    if (map.requires_grad()) {
      auto& gm = g->grad_buffer(map);
      for (int b = 0; b < n; ++b)
        for (std::size_t i = 0; i < per; ++i) gm[i] += self.grad[b * per + i];
    }
  });
}

Tensor resize_bilinear_value(const Tensor& x, int out_h, int out_w) {
  check(x.rank() >= 2, "resize: rank >= 2 expected");
  const int h = x.dim(-2), w = x.dim(-1);
  const int planes = static_cast<int>(x.numel() / (static_cast<std::size_t>(h) * w));
  Shape ys = x.shape;
  ys[ys.size() - 2] = out_h;
  ys[ys.size() - 1] = out_w;
  Tensor y(ys);
  resize_forward(x.data.data(), y.data.data(), planes, h, w, out_h, out_w, make_taps(h, out_h), make_taps(w, out_w));
  return y;
}

Var resize_bilinear(Var x, int out_h, int out_w) {
  Tensor y = resize_bilinear_value(x.value(), out_h, out_w);
  const int h = x.value().dim(-2), w = x.value().dim(-1);
  const int planes = static_cast<int>(x.value().numel() / (static_cast<std::size_t>(h) * w));
  Graph* g = x.graph();
  return g->make(std::move(y), {x}, [g, x, planes, h, w, out_h, out_w](Graph::Node& self) {
    resize_backward(self.grad.data(), g->grad_buffer(x).data(), planes, h, w, out_h, out_w, make_taps(h, out_h),
                    make_taps(w, out_w));
  });
}

Var spatial_mean(Var x) {
  check(x.value().rank() == 4, "spatial_mean: rank 4 expected");
  const int n = x.shape()[0], c = x.shape()[1];
  const int pix = x.shape()[2] * x.shape()[3];
  Tensor y({n, c});
  for (int i = 0; i < n * c; ++i) {
    const double* src = x.value().data.data() + static_cast<std::size_t>(i) * pix;
    y[static_cast<std::size_t>(i)] = std::accumulate(src, src + pix, 0.0) / pix;
  }
  Graph* g = x.graph();
  return g->make(std::move(y), {x}, [g, x, n, c, pix](Graph::Node& self) {
    auto& gx = g->grad_buffer(x);
    for (int i = 0; i < n * c; ++i)
      for (int p = 0; p < pix; ++p) gx[static_cast<std::size_t>(i) * pix + p] += self.grad[i] / pix;
  });
}

Var spatial_std(Var x, double eps) {
  check(x.value().rank() == 4, "spatial_std: rank 4 expected");
  const int n = x.shape()[0], c = x.shape()[1];
  const int pix = x.shape()[2] * x.shape()[3];
  Tensor y({n, c});
  auto means = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * c);
  for (int i = 0; i < n * c; ++i) {
    const double* src = x.value().data.data() + static_cast<std::size_t>(i) * pix;
    const double mu = std::accumulate(src, src + pix, 0.0) / pix;
    double var = 0.0;
    for (int p = 0; p < pix; ++p) var += (src[p] - mu) * (src[p] - mu);
    (*means)[static_cast<std::size_t>(i)] = mu;
    y[static_cast<std::size_t>(i)] = std::sqrt(var / pix + eps);
  }
  Graph* g = x.graph();
  return g->make(std::move(y), {x}, [g, x, means, n, c, pix](Graph::Node& self) {
    auto& gx = g->grad_buffer(x);
    for (int i = 0; i < n * c; ++i) {
      const double sd = self.value()[static_cast<std::size_t>(i)];
      const double mu = (*means)[static_cast<std::size_t>(i)];
      const double coef = self.grad[i] / (pix * sd);
      const double* src = x.value().data.data() + static_cast<std::size_t>(i) * pix;
      for (int p = 0; p < pix; ++p) gx[static_cast<std::size_t>(i) * pix + p] += coef * (src[p] - mu);
    }
  });
}

Var to_sequence(Var x) {
  check(x.value().rank() == 4, "to_sequence: rank 4 expected");
  const int n = x.shape()[0], c = x.shape()[1];
  const int pix = x.shape()[2] * x.shape()[3];
  Tensor y({n, pix, c});
  for (int b = 0; b < n; ++b)
    for (int ch = 0; ch < c; ++ch)
      for (int p = 0; p < pix; ++p)
        y[(static_cast<std::size_t>(b) * pix + p) * c + ch] = x.value()[(static_cast<std::size_t>(b) * c + ch) * pix + p];
  Graph* g = x.graph();
  return g->make(std::move(y), {x}, [g, x, n, c, pix](Graph::Node& self) {
    auto& gx = g->grad_buffer(x);
    for (int b = 0; b < n; ++b)
      for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < pix; ++p)
          gx[(static_cast<std::size_t>(b) * c + ch) * pix + p] += self.grad[(static_cast<std::size_t>(b) * pix + p) * c + ch];
  });
}

// ---------------------------------------------------------------- reductions

Var sum(Var a) {
  Tensor y({1}, {std::accumulate(a.value().data.begin(), a.value().data.end(), 0.0)});
  Graph* g = a.graph();
  return g->make(std::move(y), {a}, [g, a](Graph::Node& self) {
    auto& ga = g->grad_buffer(a);
    for (double& v : ga) v += self.grad[0];
  });
}

Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

Var mse(Var a, Var b) {
  check_same(a, b, "mse");
  const std::size_t n = a.value().numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = a.value()[i] - b.value()[i];
    acc += d * d;
  }
  Graph* g = a.graph();
  return g->make(Tensor({1}, {acc / static_cast<double>(n)}), {a, b}, [g, a, b, n](Graph::Node& self) {
    const double k = 2.0 * self.grad[0] / static_cast<double>(n);
    if (a.requires_grad()) {
      auto& ga = g->grad_buffer(a);
      for (std::size_t i = 0; i < n; ++i) ga[i] += k * (a.value()[i] - b.value()[i]);
    }
    if (b.requires_grad()) {
      auto& gb = g->grad_buffer(b);
      for (std::size_t i = 0; i < n; ++i) gb[i] -= k * (a.value()[i] - b.value()[i]);
    }
  });
}

Var bce_with_logits(Var logits, const Tensor& targets) {
  check(logits.value().numel() == targets.numel(), "bce_with_logits: length mismatch");
  const std::size_t n = targets.numel();
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = logits.value()[i];
    acc += std::max(x, 0.0) - x * targets[i] + std::log1p(std::exp(-std::abs(x)));
  }
  Graph* g = logits.graph();
  return g->make(Tensor({1}, {acc / static_cast<double>(n)}), {logits}, [g, logits, targets, n](Graph::Node& self) {
    auto& gl = g->grad_buffer(logits);
    for (std::size_t i = 0; i < n; ++i)
      gl[i] += self.grad[0] * (stable_sigmoid(logits.value()[i]) - targets[i]) / static_cast<double>(n);
  });
}

Var cosine_rows(Var a, Var b) {
  check_same(a, b, "cosine_rows");
  check(a.value().rank() == 2, "cosine_rows: rank 2 expected");
  const int n = a.shape()[0], d = a.shape()[1];
  Tensor y({n});
  auto stats = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * 3);
  for (int r = 0; r < n; ++r) {
    const double* av = a.value().data.data() + static_cast<std::size_t>(r) * d;
    const double* bv = b.value().data.data() + static_cast<std::size_t>(r) * d;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int c = 0; c < d; ++c) {
      dot += av[c] * bv[c];
      na += av[c] * av[c];
      nb += bv[c] * bv[c];
    }
    if (na == 0.0 || nb == 0.0) fail(ErrorCode::ZeroVector, "cosine of a zero vector");
    (*stats)[r * 3] = dot;
    (*stats)[r * 3 + 1] = na;
    (*stats)[r * 3 + 2] = nb;
    // Exact results for parallel copies so that 1 - cos vanishes without rounding residue.
    if (std::equal(av, av + d, bv)) {
      y[static_cast<std::size_t>(r)] = 1.0;
    } else if (std::equal(av, av + d, bv, [](double p, double q) { return p == -q; })) {
      y[static_cast<std::size_t>(r)] = -1.0;
    } else {
      y[static_cast<std::size_t>(r)] = std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
    }
  }
  Graph* g = a.graph();
  return g->make(std::move(y), {a, b}, [g, a, b, stats, n, d](Graph::Node& self) {
    for (int r = 0; r < n; ++r) {
      const double dot = (*stats)[r * 3], na = (*stats)[r * 3 + 1], nb = (*stats)[r * 3 + 2];
      const double inv = 1.0 / std::sqrt(na * nb);
      const double cs = dot * inv;
      const double gr = self.grad[r];
      const double* av = a.value().data.data() + static_cast<std::size_t>(r) * d;
      const double* bv = b.value().data.data() + static_cast<std::size_t>(r) * d;
      if (a.requires_grad()) {
        double* ga = g->grad_buffer(a).data() + static_cast<std::size_t>(r) * d;
        for (int c = 0; c < d; ++c) ga[c] += gr * (bv[c] * inv - cs * av[c] / na);
      }
      if (b.requires_grad()) {
        double* gb = g->grad_buffer(b).data() + static_cast<std::size_t>(r) * d;
        for (int c = 0; c < d; ++c) gb[c] += gr * (av[c] * inv - cs * bv[c] / nb);
      }
    }
  });
}

Var l2_normalize_rows(Var a) {
  check(a.value().rank() == 2, "l2_normalize_rows: rank 2 expected");
  const int n = a.shape()[0], d = a.shape()[1];
  Tensor y(a.shape());
  auto norms = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  for (int r = 0; r < n; ++r) {
    const double* av = a.value().data.data() + static_cast<std::size_t>(r) * d;
    double sq = 0.0;
    for (int c = 0; c < d; ++c) sq += av[c] * av[c];
    if (sq == 0.0) fail(ErrorCode::ZeroVector, "normalizing a zero row");
    const double nr = std::sqrt(sq);
    (*norms)[static_cast<std::size_t>(r)] = nr;
    for (int c = 0; c < d; ++c) y[static_cast<std::size_t>(r) * d + c] = av[c] / nr;
  }
  Graph* g = a.graph();
  return g->make(std::move(y), {a}, [g, a, norms, n, d](Graph::Node& self) {
    auto& ga = g->grad_buffer(a);
    for (int r = 0; r < n; ++r) {
      const double* yv = self.value().data.data() + static_cast<std::size_t>(r) * d;
      const double* dy = self.grad.data() + static_cast<std::size_t>(r) * d;
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += yv[c] * dy[c];
      const double inv = 1.0 / (*norms)[static_cast<std::size_t>(r)];
      for (int c = 0; c < d; ++c) ga[static_cast<std::size_t>(r) * d + c] += (dy[c] - yv[c] * dot) * inv;
    }
  });
}

Var cross_entropy_rows(Var logits, const std::vector<int>& labels) {
  check(logits.value().rank() == 2, "cross_entropy_rows: rank 2 expected");
  const int n = logits.shape()[0], k = logits.shape()[1];
  check(static_cast<int>(labels.size()) == n, "cross_entropy_rows: label count");
  auto probs = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n) * k);
  double acc = 0.0;
  for (int r = 0; r < n; ++r) {
    check(labels[static_cast<std::size_t>(r)] >= 0 && labels[static_cast<std::size_t>(r)] < k,
          "cross_entropy_rows: label out of range");
    const double* lv = logits.value().data.data() + static_cast<std::size_t>(r) * k;
    const double mx = *std::max_element(lv, lv + k);
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += std::exp(lv[c] - mx);
    const double lse = mx + std::log(z);
    for (int c = 0; c < k; ++c) (*probs)[static_cast<std::size_t>(r) * k + c] = std::exp(lv[c] - lse);
    acc += lse - lv[labels[static_cast<std::size_t>(r)]];
  }
  Graph* g = logits.graph();
  return g->make(Tensor({1}, {acc / n}), {logits}, [g, logits, labels, probs, n, k](Graph::Node& self) {
    auto& gl = g->grad_buffer(logits);
    const double s = self.grad[0] / n;
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < k; ++c) {
        const double target = c == labels[static_cast<std::size_t>(r)] ? 1.0 : 0.0;
        gl[static_cast<std::size_t>(r) * k + c] += s * ((*probs)[static_cast<std::size_t>(r) * k + c] - target);
      }
  });
}

}  // namespace conceptmark::ad
