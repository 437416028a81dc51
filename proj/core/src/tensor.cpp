#include "dswp/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <thread>
#include <unordered_set>

namespace dswp {

namespace {

std::atomic<uint64_t> g_seq{1};
thread_local bool g_grad_enabled = true;

std::shared_ptr<TensorImpl> make_impl(Shape s, std::vector<float> vals) {
  auto t = std::make_shared<TensorImpl>();
  for (int d : s) require(d > 0, "tensor: non-positive dimension in shape ", shape_str(s));
  require(numel_of(s) == static_cast<int64_t>(vals.size()), "tensor: shape ", shape_str(s),
          " wants ", numel_of(s), " values, got ", vals.size());
  t->shape = std::move(s);
  t->data = std::move(vals);
  t->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return t;
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!g_grad_enabled) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

std::vector<float>& gbuf(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0f);
  return t.grad;
}

/// Wraps a freshly computed payload into a Tensor, recording the node when
/// any input is tracked.
Tensor make_result(Shape shape, std::vector<float> data, const char* op,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(TensorImpl&)> backprop) {
  Tensor out;
  out.impl = make_impl(std::move(shape), std::move(data));
  out.impl->op = op;
  if (should_record(inputs)) {
    out.impl->requires_grad = true;
    out.impl->leaf = false;
    for (const Tensor* t : inputs) out.impl->parents.push_back(t->impl);
    out.impl->backprop = std::move(backprop);
  }
  return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  require(a.shape() == b.shape(), op, ": shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
}

void check_3d(const Tensor& x, const char* op) {
  require(x.shape().size() == 3, op, ": expected a [C,H,W] tensor, got ", shape_str(x.shape()));
}

}  // namespace

// ---- Tensor basics ----------------------------------------------------------

Tensor Tensor::zeros(const Shape& s, bool requires_grad) {
  Tensor t;
  t.impl = make_impl(s, std::vector<float>(numel_of(s), 0.0f));
  t.impl->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(const Shape& s, float v) {
  Tensor t;
  t.impl = make_impl(s, std::vector<float>(numel_of(s), v));
  return t;
}

Tensor Tensor::scalar(float v) { return full({1}, v); }

Tensor Tensor::from(const Shape& s, std::vector<float> vals, bool requires_grad) {
  Tensor t;
  t.impl = make_impl(s, std::move(vals));
  t.impl->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::randn(const Shape& s, Philox& rng, bool requires_grad) {
  std::vector<float> v(numel_of(s));
  rng.fill_normal(v);
  return from(s, std::move(v), requires_grad);
}

float Tensor::item() const {
  require(numel() == 1, "item: tensor has ", numel(), " elements, expected 1");
  return impl->data[0];
}

const std::vector<float>& Tensor::grad() const {
  require(impl && !impl->grad.empty(), "grad: no gradient present on this tensor (op ",
          impl ? impl->op : "null", ")");
  return impl->grad;
}

Tensor Tensor::detach() const {
  Tensor t;
  t.impl = make_impl(impl->shape, impl->data);
  return t;
}

Tensor Tensor::clone_as_leaf(bool requires_grad) const {
  Tensor t = detach();
  t.impl->requires_grad = requires_grad;
  return t;
}

bool Tensor::all_finite() const {
  for (float v : impl->data)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::check_finite(const char* what) const {
  require(all_finite(), what, ": non-finite value encountered");
}

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }
bool grad_enabled() { return g_grad_enabled; }

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  std::vector<float> out(a.numel());
  const float *pa = a.data(), *pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] + pb[i];
  auto ia = a.impl, ib = b.impl;
  return make_result(a.shape(), std::move(out), "add", {&a, &b}, [ia, ib](TensorImpl& self) {
    if (ia->requires_grad) {
      auto& g = gbuf(*ia);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (ib->requires_grad) {
      auto& g = gbuf(*ib);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  std::vector<float> out(a.numel());
  const float *pa = a.data(), *pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] - pb[i];
  auto ia = a.impl, ib = b.impl;
  return make_result(a.shape(), std::move(out), "sub", {&a, &b}, [ia, ib](TensorImpl& self) {
    if (ia->requires_grad) {
      auto& g = gbuf(*ia);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    }
    if (ib->requires_grad) {
      auto& g = gbuf(*ib);
      for (size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  std::vector<float> out(a.numel());
  const float *pa = a.data(), *pb = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * pb[i];
  auto ia = a.impl, ib = b.impl;
  return make_result(a.shape(), std::move(out), "mul", {&a, &b}, [ia, ib](TensorImpl& self) {
    if (ia->requires_grad) {
      auto& g = gbuf(*ia);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ib->data[i];
    }
    if (ib->requires_grad) {
      auto& g = gbuf(*ib);
      for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * ia->data[i];
    }
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  std::vector<float> out(a.numel());
  const float* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(pa[i] + s);
  auto ia = a.impl;
  return make_result(a.shape(), std::move(out), "add_scalar", {&a}, [ia](TensorImpl& self) {
    auto& g = gbuf(*ia);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

Tensor mul_scalar(const Tensor& a, double s) {
  std::vector<float> out(a.numel());
  const float* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(pa[i] * s);
  auto ia = a.impl;
  float sf = static_cast<float>(s);
  return make_result(a.shape(), std::move(out), "mul_scalar", {&a}, [ia, sf](TensorImpl& self) {
    auto& g = gbuf(*ia);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * sf;
  });
}

Tensor axpby(double a, const Tensor& x, double b, const Tensor& y) {
  check_same_shape(x, y, "axpby");
  std::vector<float> out(x.numel());
  const float *px = x.data(), *py = y.data();
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<float>(a * static_cast<double>(px[i]) + b * static_cast<double>(py[i]));
  auto ix = x.impl, iy = y.impl;
  float af = static_cast<float>(a), bf = static_cast<float>(b);
  return make_result(x.shape(), std::move(out), "axpby", {&x, &y},
                     [ix, iy, af, bf](TensorImpl& self) {
                       if (ix->requires_grad) {
                         auto& g = gbuf(*ix);
                         for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * af;
                       }
                       if (iy->requires_grad) {
                         auto& g = gbuf(*iy);
                         for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * bf;
                       }
                     });
}

// ---- activations ------------------------------------------------------------

Tensor relu(const Tensor& a) {
  std::vector<float> out(a.numel());
  const float* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] > 0.0f ? pa[i] : 0.0f;
  auto ia = a.impl;
  return make_result(a.shape(), std::move(out), "relu", {&a}, [ia](TensorImpl& self) {
    auto& g = gbuf(*ia);
    for (size_t i = 0; i < g.size(); ++i)
      if (ia->data[i] > 0.0f) g[i] += self.grad[i];
  });
}

namespace {
inline float sigmoid_val(float x) { return 1.0f / (1.0f + std::exp(-x)); }
}  // namespace

Tensor sigmoid(const Tensor& a) {
  std::vector<float> out(a.numel());
  const float* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = sigmoid_val(pa[i]);
  auto ia = a.impl;
  return make_result(a.shape(), std::move(out), "sigmoid", {&a}, [ia](TensorImpl& self) {
    auto& g = gbuf(*ia);
    for (size_t i = 0; i < g.size(); ++i) {
      float s = sigmoid_val(ia->data[i]);
      g[i] += self.grad[i] * s * (1.0f - s);
    }
  });
}

Tensor silu(const Tensor& a) {
  std::vector<float> out(a.numel());
  const float* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = pa[i] * sigmoid_val(pa[i]);
  auto ia = a.impl;
  return make_result(a.shape(), std::move(out), "silu", {&a}, [ia](TensorImpl& self) {
    auto& g = gbuf(*ia);
    for (size_t i = 0; i < g.size(); ++i) {
      float s = sigmoid_val(ia->data[i]);
      g[i] += self.grad[i] * s * (1.0f + ia->data[i] * (1.0f - s));
    }
  });
}

namespace {
constexpr float kClampMargin = 0.1f;

inline float softclamp_val(float x) {
  if (x < kClampMargin) return kClampMargin + kClampMargin * std::tanh((x - kClampMargin) / kClampMargin);
  if (x > 1.0f - kClampMargin)
    return (1.0f - kClampMargin) + kClampMargin * std::tanh((x - (1.0f - kClampMargin)) / kClampMargin);
  return x;
}

inline float softclamp_deriv(float x) {
  if (x < kClampMargin) {
    float t = std::tanh((x - kClampMargin) / kClampMargin);
    return 1.0f - t * t;
  }
  if (x > 1.0f - kClampMargin) {
    float t = std::tanh((x - (1.0f - kClampMargin)) / kClampMargin);
    return 1.0f - t * t;
  }
  return 1.0f;
}
}  // namespace

Tensor softclamp01(const Tensor& a) {
  std::vector<float> out(a.numel());
  const float* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = softclamp_val(pa[i]);
  auto ia = a.impl;
  return make_result(a.shape(), std::move(out), "softclamp01", {&a}, [ia](TensorImpl& self) {
    auto& g = gbuf(*ia);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * softclamp_deriv(ia->data[i]);
  });
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.shape().size() == 2 && b.shape().size() == 2, "matmul: expected 2-D operands, got ",
          shape_str(a.shape()), " and ", shape_str(b.shape()));
  int m = a.shape()[0], k = a.shape()[1], k2 = b.shape()[0], n = b.shape()[1];
  require(k == k2, "matmul: inner dimensions differ, ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  std::vector<float> out(static_cast<size_t>(m) * n, 0.0f);
  const float *pa = a.data(), *pb = b.data();
  for (int i = 0; i < m; ++i)
    for (int l = 0; l < k; ++l) {
      float av = pa[i * k + l];
      const float* brow = pb + static_cast<size_t>(l) * n;
      float* orow = out.data() + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  auto ia = a.impl, ib = b.impl;
  return make_result({m, n}, std::move(out), "matmul", {&a, &b},
                     [ia, ib, m, k, n](TensorImpl& self) {
                       const float* g = self.grad.data();
                       if (ia->requires_grad) {
                         auto& ga = gbuf(*ia);
                         for (int i = 0; i < m; ++i)
                           for (int l = 0; l < k; ++l) {
                             double acc = 0.0;
                             const float* grow = g + static_cast<size_t>(i) * n;
                             const float* brow = ib->data.data() + static_cast<size_t>(l) * n;
                             for (int j = 0; j < n; ++j) acc += double(grow[j]) * brow[j];
                             ga[i * k + l] += static_cast<float>(acc);
                           }
                       }
                       if (ib->requires_grad) {
                         auto& gb = gbuf(*ib);
                         for (int l = 0; l < k; ++l)
                           for (int j = 0; j < n; ++j) {
                             double acc = 0.0;
                             for (int i = 0; i < m; ++i)
                               acc += double(ia->data[i * k + l]) * g[static_cast<size_t>(i) * n + j];
                             gb[static_cast<size_t>(l) * n + j] += static_cast<float>(acc);
                           }
                       }
                     });
}

Tensor linear(const Tensor& w, const Tensor& x, const Tensor& b) {
  require(x.shape().size() == 1, "linear: input must be 1-D, got ", shape_str(x.shape()));
  int in = x.shape()[0];
  require(w.shape().size() == 2 && w.shape()[1] == in, "linear: weight ", shape_str(w.shape()),
          " does not match input ", shape_str(x.shape()));
  int out_dim = w.shape()[0];
  Tensor y = reshape(matmul(w, reshape(x, {in, 1})), {out_dim});
  return add(y, b);
}

namespace {
struct ConvDims {
  int ci, h, w, co, kh, kw, oh, ow;
};

ConvDims conv_dims(const Tensor& x, const Tensor& wt, int stride, int pad) {
  require(x.shape().size() == 3, "conv2d: input must be [C,H,W], got ", shape_str(x.shape()));
  require(wt.shape().size() == 4, "conv2d: weight must be [Co,Ci,Kh,Kw], got ",
          shape_str(wt.shape()));
  ConvDims d{};
  d.ci = x.shape()[0];
  d.h = x.shape()[1];
  d.w = x.shape()[2];
  d.co = wt.shape()[0];
  d.kh = wt.shape()[2];
  d.kw = wt.shape()[3];
  require(wt.shape()[1] == d.ci, "conv2d: input has ", d.ci, " channels but weight expects ",
          wt.shape()[1], " (input ", shape_str(x.shape()), ", weight ", shape_str(wt.shape()), ")");
  require(stride >= 1, "conv2d: stride must be >= 1, got ", stride);
  require(pad >= 0, "conv2d: pad must be >= 0, got ", pad);
  d.oh = (d.h + 2 * pad - d.kh) / stride + 1;
  d.ow = (d.w + 2 * pad - d.kw) / stride + 1;
  require(d.oh > 0 && d.ow > 0, "conv2d: kernel ", shape_str(wt.shape()),
          " too large for input ", shape_str(x.shape()), " with pad ", pad);
  return d;
}

inline int lo_index(int p, int k, int s) {
  int v = p - k;
  return v > 0 ? (v + s - 1) / s : 0;
}
}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& wt, const Tensor& bias, int stride, int pad) {
  ConvDims d = conv_dims(x, wt, stride, pad);
  bool has_bias = bias.defined();
  if (has_bias)
    require(bias.shape() == Shape{d.co}, "conv2d: bias shape ", shape_str(bias.shape()),
            " does not match ", d.co, " output channels");
  std::vector<float> out(static_cast<size_t>(d.co) * d.oh * d.ow, 0.0f);
  const float *px = x.data(), *pw = wt.data();
  for (int co = 0; co < d.co; ++co) {
    float* oc = out.data() + static_cast<size_t>(co) * d.oh * d.ow;
    if (has_bias) std::fill(oc, oc + d.oh * d.ow, bias.at(co));
    for (int ci = 0; ci < d.ci; ++ci) {
      const float* xc = px + static_cast<size_t>(ci) * d.h * d.w;
      const float* wcc = pw + (static_cast<size_t>(co) * d.ci + ci) * d.kh * d.kw;
      for (int kh = 0; kh < d.kh; ++kh) {
        int oh_lo = lo_index(pad, kh, stride);
        int oh_hi = std::min(d.oh - 1, (d.h - 1 + pad - kh) / stride);
        for (int kw = 0; kw < d.kw; ++kw) {
          float wv = wcc[kh * d.kw + kw];
          int ow_lo = lo_index(pad, kw, stride);
          int ow_hi = std::min(d.ow - 1, (d.w - 1 + pad - kw) / stride);
          int n = ow_hi - ow_lo + 1;
          if (n <= 0) continue;
          for (int oh = oh_lo; oh <= oh_hi; ++oh) {
            const float* xrow = xc + (oh * stride - pad + kh) * d.w + (ow_lo * stride - pad + kw);
            float* orow = oc + oh * d.ow + ow_lo;
            if (stride == 1) {
              for (int i = 0; i < n; ++i) orow[i] += wv * xrow[i];
            } else {
              for (int i = 0; i < n; ++i) orow[i] += wv * xrow[static_cast<size_t>(i) * stride];
            }
          }
        }
      }
    }
  }
  auto ix = x.impl, iw = wt.impl;
  auto ib = has_bias ? bias.impl : nullptr;
  return make_result(
      {d.co, d.oh, d.ow}, std::move(out), "conv2d",
      has_bias ? std::initializer_list<const Tensor*>{&x, &wt, &bias}
               : std::initializer_list<const Tensor*>{&x, &wt},
      [ix, iw, ib, d, stride, pad](TensorImpl& self) {
        const float* g = self.grad.data();
        if (ib && ib->requires_grad) {
          auto& gb = gbuf(*ib);
          for (int co = 0; co < d.co; ++co) {
            double acc = 0.0;
            const float* gc = g + static_cast<size_t>(co) * d.oh * d.ow;
            for (int i = 0; i < d.oh * d.ow; ++i) acc += gc[i];
            gb[co] += static_cast<float>(acc);
          }
        }
        if (iw->requires_grad) {
          auto& gw = gbuf(*iw);
          for (int co = 0; co < d.co; ++co) {
            const float* gc = g + static_cast<size_t>(co) * d.oh * d.ow;
            for (int ci = 0; ci < d.ci; ++ci) {
              const float* xc = ix->data.data() + static_cast<size_t>(ci) * d.h * d.w;
              for (int kh = 0; kh < d.kh; ++kh) {
                int oh_lo = lo_index(pad, kh, stride);
                int oh_hi = std::min(d.oh - 1, (d.h - 1 + pad - kh) / stride);
                for (int kw = 0; kw < d.kw; ++kw) {
                  int ow_lo = lo_index(pad, kw, stride);
                  int ow_hi = std::min(d.ow - 1, (d.w - 1 + pad - kw) / stride);
                  int n = ow_hi - ow_lo + 1;
                  if (n <= 0) continue;
                  double acc = 0.0;
                  for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                    const float* xrow =
                        xc + (oh * stride - pad + kh) * d.w + (ow_lo * stride - pad + kw);
                    const float* grow = gc + oh * d.ow + ow_lo;
                    if (stride == 1) {
                      for (int i = 0; i < n; ++i) acc += double(grow[i]) * xrow[i];
                    } else {
                      for (int i = 0; i < n; ++i)
                        acc += double(grow[i]) * xrow[static_cast<size_t>(i) * stride];
                    }
                  }
                  gw[(static_cast<size_t>(co) * d.ci + ci) * d.kh * d.kw + kh * d.kw + kw] +=
                      static_cast<float>(acc);
                }
              }
            }
          }
        }
        if (ix->requires_grad) {
          auto& gx = gbuf(*ix);
          for (int co = 0; co < d.co; ++co) {
            const float* gc = g + static_cast<size_t>(co) * d.oh * d.ow;
            for (int ci = 0; ci < d.ci; ++ci) {
              float* gxc = gx.data() + static_cast<size_t>(ci) * d.h * d.w;
              const float* wcc =
                  iw->data.data() + (static_cast<size_t>(co) * d.ci + ci) * d.kh * d.kw;
              for (int kh = 0; kh < d.kh; ++kh) {
                int oh_lo = lo_index(pad, kh, stride);
                int oh_hi = std::min(d.oh - 1, (d.h - 1 + pad - kh) / stride);
                for (int kw = 0; kw < d.kw; ++kw) {
                  float wv = wcc[kh * d.kw + kw];
                  int ow_lo = lo_index(pad, kw, stride);
                  int ow_hi = std::min(d.ow - 1, (d.w - 1 + pad - kw) / stride);
                  int n = ow_hi - ow_lo + 1;
                  if (n <= 0) continue;
                  for (int oh = oh_lo; oh <= oh_hi; ++oh) {
                    float* gxrow =
                        gxc + (oh * stride - pad + kh) * d.w + (ow_lo * stride - pad + kw);
                    const float* grow = gc + oh * d.ow + ow_lo;
                    if (stride == 1) {
                      for (int i = 0; i < n; ++i) gxrow[i] += wv * grow[i];
                    } else {
                      for (int i = 0; i < n; ++i)
                        gxrow[static_cast<size_t>(i) * stride] += wv * grow[i];
                    }
                  }
                }
              }
            }
          }
        }
      });
}

Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  check_3d(x, "group_norm");
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  require(groups >= 1 && c % groups == 0, "group_norm: ", c, " channels not divisible by ",
          groups, " groups");
  require(gamma.shape() == Shape{c} && beta.shape() == Shape{c},
          "group_norm: gamma/beta must be [C]=", c, ", got ", shape_str(gamma.shape()), " and ",
          shape_str(beta.shape()));
  int cs = c / groups;
  int64_t gn = static_cast<int64_t>(cs) * h * w;
  std::vector<float> out(x.numel());
  std::vector<float> mu(groups), inv(groups);
  const float* px = x.data();
  for (int g = 0; g < groups; ++g) {
    const float* base = px + static_cast<size_t>(g) * gn;
    double s = 0.0, ss = 0.0;
    for (int64_t i = 0; i < gn; ++i) {
      s += base[i];
      ss += double(base[i]) * base[i];
    }
    double m = s / double(gn);
    double var = ss / double(gn) - m * m;
    if (var < 0) var = 0;
    mu[g] = static_cast<float>(m);
    inv[g] = static_cast<float>(1.0 / std::sqrt(var + eps));
  }
  for (int ch = 0; ch < c; ++ch) {
    int g = ch / cs;
    const float* xi = px + static_cast<size_t>(ch) * h * w;
    float* oi = out.data() + static_cast<size_t>(ch) * h * w;
    float ga = gamma.at(ch), be = beta.at(ch);
    for (int i = 0; i < h * w; ++i) oi[i] = ga * (xi[i] - mu[g]) * inv[g] + be;
  }
  auto ix = x.impl, ig = gamma.impl, ibe = beta.impl;
  return make_result(
      x.shape(), std::move(out), "group_norm", {&x, &gamma, &beta},
      [ix, ig, ibe, groups, c, h, w, cs, gn, mu, inv](TensorImpl& self) {
        const float* g = self.grad.data();
        const float* px = ix->data.data();
        int hw = h * w;
        if (ig->requires_grad || ibe->requires_grad) {
          for (int ch = 0; ch < c; ++ch) {
            int grp = ch / cs;
            const float* xi = px + static_cast<size_t>(ch) * hw;
            const float* gi = g + static_cast<size_t>(ch) * hw;
            double dg = 0.0, db = 0.0;
            for (int i = 0; i < hw; ++i) {
              dg += double(gi[i]) * (xi[i] - mu[grp]) * inv[grp];
              db += gi[i];
            }
            if (ig->requires_grad) gbuf(*ig)[ch] += static_cast<float>(dg);
            if (ibe->requires_grad) gbuf(*ibe)[ch] += static_cast<float>(db);
          }
        }
        if (ix->requires_grad) {
          auto& gx = gbuf(*ix);
          for (int grp = 0; grp < groups; ++grp) {
            // dxh = dy * gamma; dx = inv*(dxh - mean(dxh) - xh*mean(dxh*xh))
            double s1 = 0.0, s2 = 0.0;
            for (int cc = 0; cc < cs; ++cc) {
              int ch = grp * cs + cc;
              float ga = ig->data[ch];
              const float* xi = px + static_cast<size_t>(ch) * hw;
              const float* gi = g + static_cast<size_t>(ch) * hw;
              for (int i = 0; i < hw; ++i) {
                double dxh = double(gi[i]) * ga;
                double xh = (xi[i] - mu[grp]) * inv[grp];
                s1 += dxh;
                s2 += dxh * xh;
              }
            }
            double m1 = s1 / double(gn), m2 = s2 / double(gn);
            for (int cc = 0; cc < cs; ++cc) {
              int ch = grp * cs + cc;
              float ga = ig->data[ch];
              const float* xi = px + static_cast<size_t>(ch) * hw;
              const float* gi = g + static_cast<size_t>(ch) * hw;
              float* gxi = gx.data() + static_cast<size_t>(ch) * hw;
              for (int i = 0; i < hw; ++i) {
                double dxh = double(gi[i]) * ga;
                double xh = (xi[i] - mu[grp]) * inv[grp];
                gxi[i] += static_cast<float>(inv[grp] * (dxh - m1 - xh * m2));
              }
            }
          }
        }
      });
}

Tensor bias_channel(const Tensor& x, const Tensor& b) {
  check_3d(x, "bias_channel");
  int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  require(b.shape() == Shape{c}, "bias_channel: bias ", shape_str(b.shape()),
          " does not match ", c, " channels");
  std::vector<float> out(x.numel());
  const float* px = x.data();
  for (int ch = 0; ch < c; ++ch) {
    float bv = b.at(ch);
    const float* xi = px + static_cast<size_t>(ch) * hw;
    float* oi = out.data() + static_cast<size_t>(ch) * hw;
    for (int i = 0; i < hw; ++i) oi[i] = xi[i] + bv;
  }
  auto ix = x.impl, ib = b.impl;
  return make_result(x.shape(), std::move(out), "bias_channel", {&x, &b},
                     [ix, ib, c, hw](TensorImpl& self) {
                       const float* g = self.grad.data();
                       if (ix->requires_grad) {
                         auto& gx = gbuf(*ix);
                         for (size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
                       }
                       if (ib->requires_grad) {
                         auto& gb = gbuf(*ib);
                         for (int ch = 0; ch < c; ++ch) {
                           double acc = 0.0;
                           const float* gi = g + static_cast<size_t>(ch) * hw;
                           for (int i = 0; i < hw; ++i) acc += gi[i];
                           gb[ch] += static_cast<float>(acc);
                         }
                       }
                     });
}

// ---- reductions ---------------------------------------------------------------

Tensor mean_all(const Tensor& a) {
  double s = 0.0;
  for (float v : a.vec()) s += v;
  double n = static_cast<double>(a.numel());
  auto ia = a.impl;
  return make_result({1}, {static_cast<float>(s / n)}, "mean", {&a}, [ia, n](TensorImpl& self) {
    auto& g = gbuf(*ia);
    float gv = static_cast<float>(self.grad[0] / n);
    for (size_t i = 0; i < g.size(); ++i) g[i] += gv;
  });
}

Tensor sum_all(const Tensor& a) {
  double s = 0.0;
  for (float v : a.vec()) s += v;
  auto ia = a.impl;
  return make_result({1}, {static_cast<float>(s)}, "sum", {&a}, [ia](TensorImpl& self) {
    auto& g = gbuf(*ia);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[0];
  });
}

Tensor sumsq(const Tensor& a) {
  double s = 0.0;
  for (float v : a.vec()) s += double(v) * v;
  auto ia = a.impl;
  return make_result({1}, {static_cast<float>(s)}, "sumsq", {&a}, [ia](TensorImpl& self) {
    auto& g = gbuf(*ia);
    float gv = self.grad[0];
    for (size_t i = 0; i < g.size(); ++i) g[i] += 2.0f * gv * ia->data[i];
  });
}

Tensor dot(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  const float *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) s += double(pa[i]) * pb[i];
  auto ia = a.impl, ib = b.impl;
  return make_result({1}, {static_cast<float>(s)}, "dot", {&a, &b}, [ia, ib](TensorImpl& self) {
    float gv = self.grad[0];
    if (ia->requires_grad) {
      auto& g = gbuf(*ia);
      for (size_t i = 0; i < g.size(); ++i) g[i] += gv * ib->data[i];
    }
    if (ib->requires_grad) {
      auto& g = gbuf(*ib);
      for (size_t i = 0; i < g.size(); ++i) g[i] += gv * ia->data[i];
    }
  });
}

Tensor cosine(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "cosine");
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  const float *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    sab += double(pa[i]) * pb[i];
    saa += double(pa[i]) * pa[i];
    sbb += double(pb[i]) * pb[i];
  }
  require(saa > 0.0 && sbb > 0.0, "cosine: zero-norm operand");
  double na = std::sqrt(saa), nb = std::sqrt(sbb);
  double c = sab / (na * nb);
  auto ia = a.impl, ib = b.impl;
  return make_result({1}, {static_cast<float>(c)}, "cosine", {&a, &b},
                     [ia, ib, na, nb, c](TensorImpl& self) {
                       double gv = self.grad[0];
                       if (ia->requires_grad) {
                         auto& g = gbuf(*ia);
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] += static_cast<float>(
                               gv * (ib->data[i] / (na * nb) - c * ia->data[i] / (na * na)));
                       }
                       if (ib->requires_grad) {
                         auto& g = gbuf(*ib);
                         for (size_t i = 0; i < g.size(); ++i)
                           g[i] += static_cast<float>(
                               gv * (ia->data[i] / (na * nb) - c * ib->data[i] / (nb * nb)));
                       }
                     });
}

Tensor l2_normalize(const Tensor& a, double eps) {
  double ss = 0.0;
  for (float v : a.vec()) ss += double(v) * v;
  double r = std::sqrt(ss + eps);
  std::vector<float> out(a.numel());
  const float* pa = a.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(pa[i] / r);
  auto ia = a.impl;
  return make_result(a.shape(), std::move(out), "l2_normalize", {&a}, [ia, r](TensorImpl& self) {
    auto& g = gbuf(*ia);
    double gdotx = 0.0;
    for (size_t i = 0; i < g.size(); ++i) gdotx += double(self.grad[i]) * ia->data[i];
    double r3 = r * r * r;
    for (size_t i = 0; i < g.size(); ++i)
      g[i] += static_cast<float>(self.grad[i] / r - ia->data[i] * gdotx / r3);
  });
}

// ---- classification losses ------------------------------------------------------

Tensor cross_entropy_logits(const Tensor& logits, int label) {
  require(logits.shape().size() == 1, "cross_entropy: logits must be 1-D, got ",
          shape_str(logits.shape()));
  int n = logits.shape()[0];
  require(label >= 0 && label < n, "cross_entropy: label ", label, " out of range [0,", n, ")");
  const float* p = logits.data();
  double m = p[0];
  for (int i = 1; i < n; ++i) m = std::max(m, double(p[i]));
  double se = 0.0;
  for (int i = 0; i < n; ++i) se += std::exp(double(p[i]) - m);
  double lse = m + std::log(se);
  double loss = lse - double(p[label]);
  auto il = logits.impl;
  return make_result({1}, {static_cast<float>(loss)}, "cross_entropy", {&logits},
                     [il, label, lse, n](TensorImpl& self) {
                       auto& g = gbuf(*il);
                       float gv = self.grad[0];
                       for (int i = 0; i < n; ++i) {
                         float pi = static_cast<float>(std::exp(double(il->data[i]) - lse));
                         g[i] += gv * (pi - (i == label ? 1.0f : 0.0f));
                       }
                     });
}

Tensor seg_cross_entropy_logits(const Tensor& logits, const std::vector<uint8_t>& labels) {
  check_3d(logits, "seg_cross_entropy");
  int c = logits.shape()[0], hw = logits.shape()[1] * logits.shape()[2];
  require(static_cast<int>(labels.size()) == hw, "seg_cross_entropy: ", labels.size(),
          " labels for ", hw, " pixels");
  const float* p = logits.data();
  std::vector<float> lse(hw);
  double total = 0.0;
  for (int i = 0; i < hw; ++i) {
    require(labels[i] < c, "seg_cross_entropy: label ", int(labels[i]), " out of range [0,", c, ")");
    double m = p[i];
    for (int ch = 1; ch < c; ++ch) m = std::max(m, double(p[ch * hw + i]));
    double se = 0.0;
    for (int ch = 0; ch < c; ++ch) se += std::exp(double(p[ch * hw + i]) - m);
    double l = m + std::log(se);
    lse[i] = static_cast<float>(l);
    total += l - double(p[labels[i] * hw + i]);
  }
  auto il = logits.impl;
  auto lab = labels;  // copy; label maps are small
  return make_result({1}, {static_cast<float>(total / hw)}, "seg_cross_entropy", {&logits},
                     [il, lab, lse, c, hw](TensorImpl& self) {
                       auto& g = gbuf(*il);
                       float gv = self.grad[0] / static_cast<float>(hw);
                       for (int i = 0; i < hw; ++i) {
                         for (int ch = 0; ch < c; ++ch) {
                           float pi = std::exp(il->data[ch * hw + i] - lse[i]);
                           g[ch * hw + i] += gv * (pi - (ch == lab[i] ? 1.0f : 0.0f));
                         }
                       }
                     });
}

Tensor softmax_channel(const Tensor& x) {
  check_3d(x, "softmax_channel");
  int c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  std::vector<float> out(x.numel());
  const float* p = x.data();
  for (int i = 0; i < hw; ++i) {
    double m = p[i];
    for (int ch = 1; ch < c; ++ch) m = std::max(m, double(p[ch * hw + i]));
    double se = 0.0;
    for (int ch = 0; ch < c; ++ch) se += std::exp(double(p[ch * hw + i]) - m);
    for (int ch = 0; ch < c; ++ch)
      out[ch * hw + i] = static_cast<float>(std::exp(double(p[ch * hw + i]) - m) / se);
  }
  auto ix = x.impl;
  std::vector<float> y = out;
  return make_result(x.shape(), std::move(out), "softmax_channel", {&x},
                     [ix, y, c, hw](TensorImpl& self) {
                       auto& g = gbuf(*ix);
                       for (int i = 0; i < hw; ++i) {
                         double gy = 0.0;
                         for (int ch = 0; ch < c; ++ch)
                           gy += double(self.grad[ch * hw + i]) * y[ch * hw + i];
                         for (int ch = 0; ch < c; ++ch)
                           g[ch * hw + i] += static_cast<float>(
                               y[ch * hw + i] * (double(self.grad[ch * hw + i]) - gy));
                       }
                     });
}

// ---- shape ops -----------------------------------------------------------------

Tensor upsample_nearest(const Tensor& x, int factor) {
  check_3d(x, "upsample_nearest");
  require(factor >= 1, "upsample_nearest: factor must be >= 1, got ", factor);
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  int oh = h * factor, ow = w * factor;
  std::vector<float> out(static_cast<size_t>(c) * oh * ow);
  const float* p = x.data();
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y) {
      const float* xrow = p + (static_cast<size_t>(ch) * h + y / factor) * w;
      float* orow = out.data() + (static_cast<size_t>(ch) * oh + y) * ow;
      for (int xx = 0; xx < ow; ++xx) orow[xx] = xrow[xx / factor];
    }
  auto ix = x.impl;
  return make_result({c, oh, ow}, std::move(out), "upsample_nearest", {&x},
                     [ix, c, h, w, factor, oh, ow](TensorImpl& self) {
                       auto& g = gbuf(*ix);
                       for (int ch = 0; ch < c; ++ch)
                         for (int y = 0; y < oh; ++y) {
                           float* grow = g.data() + (static_cast<size_t>(ch) * h + y / factor) * w;
                           const float* srow =
                               self.grad.data() + (static_cast<size_t>(ch) * oh + y) * ow;
                           for (int xx = 0; xx < ow; ++xx) grow[xx / factor] += srow[xx];
                         }
                     });
}

Tensor downsample_area(const Tensor& x, int factor) {
  check_3d(x, "downsample_area");
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  require(factor >= 1 && h % factor == 0 && w % factor == 0, "downsample_area: size ",
          shape_str(x.shape()), " not divisible by factor ", factor);
  int oh = h / factor, ow = w / factor;
  std::vector<float> out(static_cast<size_t>(c) * oh * ow, 0.0f);
  const float* p = x.data();
  float inv = 1.0f / (factor * factor);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < oh; ++y)
      for (int xx = 0; xx < ow; ++xx) {
        double acc = 0.0;
        for (int dy = 0; dy < factor; ++dy) {
          const float* xrow = p + (static_cast<size_t>(ch) * h + y * factor + dy) * w + xx * factor;
          for (int dx = 0; dx < factor; ++dx) acc += xrow[dx];
        }
        out[(static_cast<size_t>(ch) * oh + y) * ow + xx] = static_cast<float>(acc) * inv;
      }
  auto ix = x.impl;
  return make_result({c, oh, ow}, std::move(out), "downsample_area", {&x},
                     [ix, c, h, w, factor, oh, ow, inv](TensorImpl& self) {
                       auto& g = gbuf(*ix);
                       for (int ch = 0; ch < c; ++ch)
                         for (int y = 0; y < oh; ++y)
                           for (int xx = 0; xx < ow; ++xx) {
                             float gv =
                                 self.grad[(static_cast<size_t>(ch) * oh + y) * ow + xx] * inv;
                             for (int dy = 0; dy < factor; ++dy) {
                               float* grow = g.data() +
                                             (static_cast<size_t>(ch) * h + y * factor + dy) * w +
                                             xx * factor;
                               for (int dx = 0; dx < factor; ++dx) grow[dx] += gv;
                             }
                           }
                     });
}

Tensor concat_ch(const Tensor& a, const Tensor& b) {
  check_3d(a, "concat_ch");
  check_3d(b, "concat_ch");
  require(a.shape()[1] == b.shape()[1] && a.shape()[2] == b.shape()[2],
          "concat_ch: spatial dims differ, ", shape_str(a.shape()), " vs ", shape_str(b.shape()));
  int ca = a.shape()[0], cb = b.shape()[0], h = a.shape()[1], w = a.shape()[2];
  std::vector<float> out;
  out.reserve(a.numel() + b.numel());
  out.insert(out.end(), a.vec().begin(), a.vec().end());
  out.insert(out.end(), b.vec().begin(), b.vec().end());
  auto ia = a.impl, ib = b.impl;
  return make_result({ca + cb, h, w}, std::move(out), "concat_ch", {&a, &b},
                     [ia, ib](TensorImpl& self) {
                       size_t na = ia->data.size();
                       if (ia->requires_grad) {
                         auto& g = gbuf(*ia);
                         for (size_t i = 0; i < na; ++i) g[i] += self.grad[i];
                       }
                       if (ib->requires_grad) {
                         auto& g = gbuf(*ib);
                         for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
                       }
                     });
}

Tensor slice_ch(const Tensor& x, int c0, int c1) {
  check_3d(x, "slice_ch");
  int c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  require(0 <= c0 && c0 < c1 && c1 <= c, "slice_ch: range [", c0, ",", c1, ") invalid for ", c,
          " channels");
  size_t hw = static_cast<size_t>(h) * w;
  std::vector<float> out(x.vec().begin() + c0 * hw, x.vec().begin() + c1 * hw);
  auto ix = x.impl;
  return make_result({c1 - c0, h, w}, std::move(out), "slice_ch", {&x},
                     [ix, c0, hw](TensorImpl& self) {
                       auto& g = gbuf(*ix);
                       for (size_t i = 0; i < self.grad.size(); ++i) g[c0 * hw + i] += self.grad[i];
                     });
}

Tensor reshape(const Tensor& x, const Shape& s) {
  require(numel_of(s) == x.numel(), "reshape: cannot view ", shape_str(x.shape()), " as ",
          shape_str(s));
  std::vector<float> out = x.vec();
  auto ix = x.impl;
  return make_result(s, std::move(out), "reshape", {&x}, [ix](TensorImpl& self) {
    auto& g = gbuf(*ix);
    for (size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

// ---- backward -------------------------------------------------------------------

void backward(const Tensor& out) {
  require(out.defined(), "backward: undefined tensor");
  require(out.numel() == 1, "backward: output must be scalar, got shape ",
          shape_str(out.shape()));
  require(std::isfinite(out.item()), "backward: output is non-finite");
  require(out.impl->backprop || (out.impl->leaf && out.impl->requires_grad),
          "backward: tensor has no recorded graph (detached or already consumed)");

  // Depth-first collection of the reachable recorded subgraph; reverse
  // creation order is a valid topological order because every node is
  // recorded after its parents.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> seen;
  std::vector<TensorImpl*> stack{out.impl.get()};
  seen.insert(out.impl.get());
  while (!stack.empty()) {
    TensorImpl* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents)
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const TensorImpl* a, const TensorImpl* b) { return a->seq > b->seq; });

  gbuf(*out.impl)[0] = 1.0f;
  for (TensorImpl* n : order) {
    if (!n->backprop) continue;  // leaf
    n->backprop(*n);
    // Consume the node: free interior grad and edges so a long sampling loop
    // does not accumulate graphs.
    n->backprop = nullptr;
    n->parents.clear();
    if (!n->leaf) n->grad.clear();
  }
}

// ---- value-space helpers ----------------------------------------------------------

Tensor hard_clamp01(const Tensor& x) {
  std::vector<float> out(x.numel());
  const float* p = x.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::min(1.0f, std::max(0.0f, p[i]));
  return Tensor::from(x.shape(), std::move(out));
}

double mse(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mse: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  double s = 0.0;
  const float *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) {
    double d = double(pa[i]) - pb[i];
    s += d * d;
  }
  return s / double(a.numel());
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "max_abs_diff: shape mismatch");
  double m = 0.0;
  const float *pa = a.data(), *pb = b.data();
  for (int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(double(pa[i]) - pb[i]));
  return m;
}

double l2_norm_value(std::span<const float> v) {
  double s = 0.0;
  for (float x : v) s += double(x) * x;
  return std::sqrt(s);
}

double rel_error(std::span<const float> a, std::span<const float> b) {
  require(a.size() == b.size(), "rel_error: length mismatch");
  double num = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    double d = double(a[i]) - b[i];
    num += d * d;
    na += double(a[i]) * a[i];
    nb += double(b[i]) * b[i];
  }
  double den = std::max({std::sqrt(na), std::sqrt(nb), 1e-12});
  return std::sqrt(num) / den;
}

// ---- finite differences --------------------------------------------------------

namespace {
double eval_perturbed(const std::function<double(const Tensor&)>& f, const Tensor& x, int64_t i,
                      double delta) {
  std::vector<float> v = x.vec();
  v[i] = static_cast<float>(double(v[i]) + delta);
  double y = f(Tensor::from(x.shape(), std::move(v)));
  require(std::isfinite(y), "finite_diff_grad: f returned a non-finite value");
  return y;
}

void fd_worker_range(const std::function<double(const Tensor&)>& f, const Tensor& x, double h,
                     std::span<const int64_t> coords, std::span<float> out, size_t lo, size_t hi) {
  for (size_t j = lo; j < hi; ++j) {
    int64_t i = coords[j];
    double up = eval_perturbed(f, x, i, h);
    double dn = eval_perturbed(f, x, i, -h);
    out[j] = static_cast<float>((up - dn) / (2.0 * h));
  }
}
}  // namespace

std::vector<float> finite_diff_grad_at(const std::function<double(const Tensor&)>& f,
                                       const Tensor& x, double h,
                                       std::span<const int64_t> coords, int threads) {
  require(h > 0.0, "finite_diff_grad: step must be positive, got ", h);
  std::vector<float> out(coords.size());
  if (threads <= 0) threads = static_cast<int>(std::thread::hardware_concurrency());
  threads = std::max(1, std::min<int>(threads, static_cast<int>(coords.size())));
  if (threads == 1) {
    fd_worker_range(f, x, h, coords, out, 0, coords.size());
    return out;
  }
  std::vector<std::thread> pool;
  size_t chunk = (coords.size() + threads - 1) / threads;
  for (int t = 0; t < threads; ++t) {
    size_t lo = t * chunk, hi = std::min(coords.size(), lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back(
        [&, lo, hi]() { fd_worker_range(f, x, h, coords, std::span<float>(out), lo, hi); });
  }
  for (auto& th : pool) th.join();
  return out;
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h,
                        int threads) {
  std::vector<int64_t> coords(x.numel());
  for (int64_t i = 0; i < x.numel(); ++i) coords[i] = i;
  auto vals = finite_diff_grad_at(f, x, h, coords, threads);
  return Tensor::from(x.shape(), std::move(vals));
}

}  // namespace dswp
