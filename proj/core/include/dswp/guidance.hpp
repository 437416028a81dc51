#pragma once

#include <utility>
#include <vector>

#include "dswp/nets.hpp"
#include "dswp/schedule.hpp"

namespace dswp {

/// Step-function weight schedules over the remaining timestep fraction t/k.
/// A segment (threshold, mult) applies while t/k > threshold; thresholds are
/// strictly decreasing and the last one is 0. Effective weight is
/// base * mult, so guidance weakens as denoising progresses.
struct GuidanceConfig {
  bool enable_id = true;
  bool enable_seg = true;
  double lambda_id_base = 2.0;
  double lambda_seg_base = 1.0;
  std::vector<std::pair<double, double>> steps = {
      {2.0 / 3.0, 1.0}, {1.0 / 3.0, 0.5}, {0.0, 0.25}};
  bool full_path = true;   // backprop through the denoiser; false freezes eps
  double grad_clip = 0.0;  // 0 disables gradient-norm clipping

  void validate() const;
};

struct GuidanceTraceRow {
  int t = 0;
  double g_id = 0.0, g_seg = 0.0, g_fac = 0.0, grad_norm = 0.0;
};
using GuidanceTrace = std::vector<GuidanceTraceRow>;

/// (lambda_id, lambda_seg) at timestep t of a swap started at k.
std::pair<double, double> lambda_at(const GuidanceConfig& cfg, int t, int k);

/// 1 - cos(D_I(x_src), D_I(x_hat)); src_embedding is precomputed once per
/// swap. Differentiable w.r.t. x_hat.
Tensor identity_loss(const Tensor& src_embedding, const Tensor& x_hat,
                     const IdentityEmbedder& embedder);

/// ||targ_seg - D_F(x_hat)||_2^2 over all pixels and classes; targ_seg is
/// precomputed once per swap.
Tensor segmentation_loss(const Tensor& targ_seg, const Tensor& x_hat, const Segmenter& segmenter);

/// lambda_id(t) G_id + lambda_seg(t) G_seg.
Tensor facial_loss(const GuidanceConfig& cfg, int t, int k, const Tensor& src_embedding,
                   const Tensor& targ_seg, const Tensor& x_hat, const IdentityEmbedder& embedder,
                   const Segmenter& segmenter);

/// eps + sqrt(1 - abar_t) * grad: the guided noise prediction.
Tensor guide_eps(const NoiseSchedule& s, const Tensor& eps, const Tensor& grad, int t);

/// Constants of one swap, computed once before the loop.
struct GuidanceContext {
  Tensor src_embedding;  // D_I(x_src)
  Tensor targ_seg;       // D_F(x_targ)

  static GuidanceContext make(const Tensor& x_src, const Tensor& x_targ, const SwapModels& models);
};

struct GuidanceStep {
  Tensor grad;  // dG_fac/dz_t, z_t's shape
  Tensor eps;   // detached noise prediction at z_t (reusable by the sampler)
  GuidanceTraceRow trace;
};

/// The composed chain z_t -> z_hat -> decode -> soft clamp -> losses, then
/// reverse mode back to z_t. With full_path the denoiser is part of the
/// differentiated graph; otherwise eps is treated as a constant of z_t.
GuidanceStep guidance_gradient(const GuidanceConfig& cfg, int t, int k, const Tensor& z_t,
                               const NoiseSchedule& s, const SwapModels& models,
                               const GuidanceContext& ctx);

void save_trace_csv(const std::string& path, const GuidanceTrace& trace);

}  // namespace dswp
