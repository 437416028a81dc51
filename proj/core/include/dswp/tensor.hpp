#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dswp/common.hpp"
#include "dswp/rng.hpp"

namespace dswp {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<float> grad;  // allocated on first accumulation
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backprop;  // consumes this->grad
  const char* op = "leaf";
  uint64_t seq = 0;
};

/// Dense row-major 32-bit tensor with reverse-mode differentiation.
///
/// Value semantics over a shared immutable payload: copies are cheap, data is
/// never mutated after construction, only the grad buffer changes. Applying an
/// op while any input requires grad records a graph node; backward() replays
/// the recorded nodes once each, in reverse order of recording.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, float v);
  static Tensor scalar(float v);
  static Tensor from(const Shape& s, std::vector<float> vals, bool requires_grad = false);
  static Tensor randn(const Shape& s, Philox& rng, bool requires_grad = false);

  bool defined() const { return impl != nullptr; }
  const Shape& shape() const { return impl->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl->data.size()); }
  bool requires_grad() const { return impl && impl->requires_grad; }
  bool is_leaf() const { return impl && impl->leaf; }
  const char* op_name() const { return impl->op; }

  const std::vector<float>& vec() const { return impl->data; }
  const float* data() const { return impl->data.data(); }
  float at(int64_t i) const { return impl->data[static_cast<size_t>(i)]; }
  float item() const;

  bool has_grad() const { return impl && !impl->grad.empty(); }
  const std::vector<float>& grad() const;
  void clear_grad() { if (impl) impl->grad.clear(); }

  /// Same data, no recorded history, no grad requirement.
  Tensor detach() const;
  Tensor clone_as_leaf(bool requires_grad) const;

  bool all_finite() const;
  void check_finite(const char* what) const;

  std::shared_ptr<TensorImpl> impl;
};

/// While alive on a thread, ops do not record graph nodes (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_enabled();

// ---- primitives ------------------------------------------------------------
// Same-shape elementwise; no broadcasting except scalar-with-tensor.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
/// a*x + b*y with per-element double arithmetic and a single rounding.
/// All closed-form diffusion updates are built from this.
Tensor axpby(double a, const Tensor& x, double b, const Tensor& y);

Tensor relu(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
/// Identity on [m, 1-m], tanh tails saturating to (0,1); C1 everywhere so
/// gradients never die at saturation. m = 0.1.
Tensor softclamp01(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
Tensor group_norm(const Tensor& x, int groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
Tensor bias_channel(const Tensor& x, const Tensor& b);  // x[C,H,W] + b[C]

Tensor mean_all(const Tensor& a);
Tensor sum_all(const Tensor& a);
Tensor sumsq(const Tensor& a);
Tensor dot(const Tensor& a, const Tensor& b);
Tensor cosine(const Tensor& a, const Tensor& b);
Tensor l2_normalize(const Tensor& a, double eps = 1e-12);

Tensor softmax_channel(const Tensor& x);  // [C,H,W], per-pixel over C
Tensor cross_entropy_logits(const Tensor& logits, int label);
Tensor seg_cross_entropy_logits(const Tensor& logits, const std::vector<uint8_t>& labels);

Tensor upsample_nearest(const Tensor& x, int factor);
Tensor downsample_area(const Tensor& x, int factor);
Tensor concat_ch(const Tensor& a, const Tensor& b);
Tensor slice_ch(const Tensor& x, int c0, int c1);
Tensor reshape(const Tensor& x, const Shape& s);

/// Composed linear layer: w[out,in] * x[in] + b[out].
Tensor linear(const Tensor& w, const Tensor& x, const Tensor& b);

// ---- reverse pass ----------------------------------------------------------
/// Accumulates d(out)/d(leaf) into .grad of every requires-grad leaf reachable
/// from `out`. `out` must be scalar and carry a recorded graph; the graph is
/// consumed (a second backward over it errors).
void backward(const Tensor& out);

// ---- value-space helpers (never recorded) ----------------------------------
Tensor hard_clamp01(const Tensor& x);
double mse(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);
double l2_norm_value(std::span<const float> v);

// ---- finite-difference oracle ----------------------------------------------
/// Central differences (f(x+h e_i) - f(x-h e_i)) / 2h per coordinate.
/// f must be deterministic; non-finite values error. Coordinates are
/// independent so they are evaluated on a small thread pool; results are
/// written per-slot, so the output is identical for any thread count.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                        double h, int threads = 0);
/// Same, restricted to the given coordinates.
std::vector<float> finite_diff_grad_at(const std::function<double(const Tensor&)>& f,
                                       const Tensor& x, double h,
                                       std::span<const int64_t> coords, int threads = 0);

/// ||a-b|| / max(||a||, ||b||, tiny); the gradient-check metric.
double rel_error(std::span<const float> a, std::span<const float> b);

}  // namespace dswp
