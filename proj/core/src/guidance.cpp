#include "dswp/guidance.hpp"

#include <cmath>
#include <fstream>

namespace dswp {

void GuidanceConfig::validate() const {
  require(lambda_id_base >= 0.0 && lambda_seg_base >= 0.0,
          "guidance: lambda bases must be >= 0, got ", lambda_id_base, " and ", lambda_seg_base);
  require(!steps.empty(), "guidance: empty step schedule");
  double prev = 1.0 + 1e-9;
  for (auto& [thr, mult] : steps) {
    require(thr >= 0.0 && thr < prev, "guidance: thresholds must strictly decrease from 1, got ",
            thr, " after ", prev);
    require(mult >= 0.0, "guidance: multiplier must be >= 0, got ", mult);
    prev = thr;
  }
  require(steps.back().first == 0.0, "guidance: last threshold must be 0");
  // Non-increasing as t decreases (weights decay as denoising progresses).
  for (size_t i = 1; i < steps.size(); ++i)
    require(steps[i].second <= steps[i - 1].second,
            "guidance: multipliers must be non-increasing toward t=0");
  require(grad_clip >= 0.0, "guidance: grad_clip must be >= 0, got ", grad_clip);
}

std::pair<double, double> lambda_at(const GuidanceConfig& cfg, int t, int k) {
  require(k >= 1, "lambda_at: k must be >= 1, got ", k);
  require(t >= 1 && t <= k, "lambda_at: timestep ", t, " out of range [1,", k, "]");
  cfg.validate();
  double frac = double(t) / double(k);
  double mult = cfg.steps.back().second;
  for (auto& [thr, m] : cfg.steps) {
    if (frac > thr) {
      mult = m;
      break;
    }
  }
  double lid = cfg.enable_id ? cfg.lambda_id_base * mult : 0.0;
  double lseg = cfg.enable_seg ? cfg.lambda_seg_base * mult : 0.0;
  return {lid, lseg};
}

Tensor identity_loss(const Tensor& src_embedding, const Tensor& x_hat,
                     const IdentityEmbedder& embedder) {
  Tensor e = embedder.embed(x_hat);
  return add_scalar(mul_scalar(cosine(e, src_embedding), -1.0), 1.0);
}

Tensor segmentation_loss(const Tensor& targ_seg, const Tensor& x_hat, const Segmenter& segmenter) {
  Tensor p = segmenter.segment(x_hat);
  require(p.shape() == targ_seg.shape(), "segmentation_loss: target map ",
          shape_str(targ_seg.shape()), " does not match prediction ", shape_str(p.shape()));
  return sumsq(sub(p, targ_seg));
}

Tensor facial_loss(const GuidanceConfig& cfg, int t, int k, const Tensor& src_embedding,
                   const Tensor& targ_seg, const Tensor& x_hat, const IdentityEmbedder& embedder,
                   const Segmenter& segmenter) {
  auto [lid, lseg] = lambda_at(cfg, t, k);
  Tensor total = Tensor::scalar(0.0f);
  if (lid > 0.0) total = add(total, mul_scalar(identity_loss(src_embedding, x_hat, embedder), lid));
  if (lseg > 0.0)
    total = add(total, mul_scalar(segmentation_loss(targ_seg, x_hat, segmenter), lseg));
  return total;
}

Tensor guide_eps(const NoiseSchedule& s, const Tensor& eps, const Tensor& grad, int t) {
  s.check_timestep(t, "guide_eps");
  require(grad.shape() == eps.shape(), "guide_eps: grad shape ", shape_str(grad.shape()),
          " does not match eps ", shape_str(eps.shape()));
  grad.check_finite("guide_eps: gradient");
  double coeff = std::sqrt(1.0 - s.alpha_bar_at(t));
  return axpby(1.0, eps, coeff, grad);
}

GuidanceContext GuidanceContext::make(const Tensor& x_src, const Tensor& x_targ,
                                      const SwapModels& models) {
  NoGradGuard ng;
  return {models.embedder.embed(x_src), models.segmenter.segment(x_targ)};
}

GuidanceStep guidance_gradient(const GuidanceConfig& cfg, int t, int k, const Tensor& z_t,
                               const NoiseSchedule& s, const SwapModels& models,
                               const GuidanceContext& ctx) {
  auto [lid, lseg] = lambda_at(cfg, t, k);
  GuidanceStep out;
  out.trace.t = t;

  if (lid == 0.0 && lseg == 0.0) {
    NoGradGuard ng;
    out.eps = models.denoiser.forward(z_t, t);
    out.grad = Tensor::zeros(z_t.shape());
    return out;
  }

  Tensor z_leaf = z_t.clone_as_leaf(true);
  Tensor eps;
  if (cfg.full_path) {
    eps = models.denoiser.forward(z_leaf, t);
  } else {
    NoGradGuard ng;
    eps = models.denoiser.forward(z_t, t);
  }
  Tensor z_hat = estimate_z0(s, z_leaf, eps, t);
  Tensor x_raw = models.codec.decode(z_hat);
  Tensor x_hat = softclamp01(x_raw);

  Tensor total = Tensor::scalar(0.0f);
  if (lid > 0.0) {
    Tensor g_id = identity_loss(ctx.src_embedding, x_hat, models.embedder);
    out.trace.g_id = g_id.item();
    require(std::isfinite(out.trace.g_id), "guidance: identity loss non-finite at t=", t);
    total = add(total, mul_scalar(g_id, lid));
  }
  if (lseg > 0.0) {
    Tensor g_seg = segmentation_loss(ctx.targ_seg, x_hat, models.segmenter);
    out.trace.g_seg = g_seg.item();
    require(std::isfinite(out.trace.g_seg), "guidance: segmentation loss non-finite at t=", t);
    total = add(total, mul_scalar(g_seg, lseg));
  }
  out.trace.g_fac = total.item();
  backward(total);

  require(z_leaf.has_grad(), "guidance: no gradient reached z_t at t=", t);
  Tensor grad = Tensor::from(z_t.shape(), z_leaf.impl->grad);
  require(grad.all_finite(), "guidance: gradient non-finite at t=", t);
  double norm = l2_norm_value(grad.vec());
  if (cfg.grad_clip > 0.0 && norm > cfg.grad_clip) {
    grad = mul_scalar(grad, cfg.grad_clip / norm);
    norm = cfg.grad_clip;
  }
  out.trace.grad_norm = norm;
  out.grad = grad;
  out.eps = eps.detach();
  return out;
}

void save_trace_csv(const std::string& path, const GuidanceTrace& trace) {
  std::ofstream f(path);
  require(f.good(), "trace: cannot write ", path);
  f << "t,g_id,g_seg,g_fac,grad_norm\n";
  for (const GuidanceTraceRow& r : trace)
    f << r.t << "," << r.g_id << "," << r.g_seg << "," << r.g_fac << "," << r.grad_norm << "\n";
}

}  // namespace dswp
