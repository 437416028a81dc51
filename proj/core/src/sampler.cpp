#include "dswp/sampler.hpp"

#include <chrono>
#include <cmath>

namespace dswp {

void SwapConfig::validate(const NoiseSchedule& s) const {
  require(k >= 0 && k <= s.T, "swap: k=", k, " out of range [0,", s.T, "]");
  require(eta >= 0.0 && eta <= 1.0, "swap: eta=", eta, " outside [0,1]");
  if (k > 0)
    require(stride >= 1 && k % stride == 0, "swap: stride ", stride, " must divide k=", k);
  guidance.validate();
}

Tensor downsample_mask(const Tensor& M, int factor) {
  require(M.shape().size() == 3 && M.shape()[0] == 1, "downsample_mask: mask must be [1,H,W], got ",
          shape_str(M.shape()));
  int h = M.shape()[1], w = M.shape()[2];
  require(factor >= 1 && h % factor == 0 && w % factor == 0, "downsample_mask: ", h, "x", w,
          " not divisible by factor ", factor);
  const float* p = M.data();
  for (int64_t i = 0; i < M.numel(); ++i)
    require(p[i] == 0.0f || p[i] == 1.0f, "downsample_mask: mask is not binary at pixel ", i);
  int oh = h / factor, ow = w / factor;
  std::vector<float> out(static_cast<size_t>(oh) * ow);
  int block = factor * factor;
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      int ones = 0;
      for (int dy = 0; dy < factor; ++dy) {
        const float* row = p + (static_cast<size_t>(y) * factor + dy) * w + x * factor;
        for (int dx = 0; dx < factor; ++dx) ones += row[dx] == 1.0f ? 1 : 0;
      }
      out[static_cast<size_t>(y) * ow + x] = 2 * ones > block ? 1.0f : 0.0f;
    }
  return Tensor::from({1, oh, ow}, std::move(out));
}

Tensor blend_latents(const Tensor& fg, const Tensor& bg, const Tensor& m) {
  require(fg.shape() == bg.shape(), "blend_latents: fg ", shape_str(fg.shape()),
          " does not match bg ", shape_str(bg.shape()));
  require(fg.shape().size() == 3 && m.shape().size() == 3, "blend_latents: expected [C,H,W]");
  int c = fg.shape()[0], h = fg.shape()[1], w = fg.shape()[2];
  bool broadcast = m.shape() == Shape({1, h, w});
  require(broadcast || m.shape() == fg.shape(), "blend_latents: mask ", shape_str(m.shape()),
          " does not conform to ", shape_str(fg.shape()));
  std::vector<float> out(fg.numel());
  const float *pf = fg.data(), *pb = bg.data(), *pm = m.data();
  size_t hw = static_cast<size_t>(h) * w;
  for (int ch = 0; ch < c; ++ch) {
    const float* mrow = broadcast ? pm : pm + ch * hw;
    for (size_t i = 0; i < hw; ++i) {
      size_t idx = ch * hw + i;
      out[idx] = pf[idx] * mrow[i] + pb[idx] * (1.0f - mrow[i]);
    }
  }
  return Tensor::from(fg.shape(), std::move(out));
}

namespace {
Tensor fill_noise(const Shape& shape, Philox& rng) {
  std::vector<float> v(numel_of(shape));
  rng.fill_normal(v);
  return Tensor::from(shape, std::move(v));
}

void check_stage(const Tensor& t, const char* stage, int timestep) {
  require(t.all_finite(), "swap: non-finite latent after ", stage, " at t=", timestep);
}

Tensor pixel_composite(const Tensor& x_hat, const Tensor& x_targ, const Tensor& M) {
  return blend_latents(x_hat, x_targ, M);
}
}  // namespace

SwapResult swap(const Tensor& x_src, const Tensor& x_targ, const Tensor& M, const SwapConfig& cfg,
                const SwapModels& models, const NoiseSchedule& s) {
  auto t0 = std::chrono::steady_clock::now();
  cfg.validate(s);
  require(x_src.shape() == x_targ.shape(), "swap: source ", shape_str(x_src.shape()),
          " and target ", shape_str(x_targ.shape()), " differ");
  require(M.shape() == Shape({1, x_targ.shape()[1], x_targ.shape()[2]}),
          "swap: mask must be [1,H,W] aligned to the target, got ", shape_str(M.shape()));

  const int factor = kImageSize / kLatentSize;
  bool guided = cfg.guidance.enable_id || cfg.guidance.enable_seg;

  SwapResult res;
  res.config = cfg;

  Philox rng(cfg.seed);
  Tensor z;
  Tensor z0;
  {
    NoGradGuard ng;
    z0 = models.codec.encode(x_targ);  // line 3
    check_stage(z0, "encode", cfg.k);
  }
  Tensor m = downsample_mask(M, factor);  // line 5

  GuidanceContext ctx;
  if (guided) ctx = GuidanceContext::make(x_src, x_targ, models);

  if (cfg.k > 0) {
    {
      NoGradGuard ng;
      z = forward_sample(s, z0, cfg.k, fill_noise(z0.shape(), rng));  // line 4
      check_stage(z, "initial noising", cfg.k);
    }
    std::vector<int> steps = strided_timesteps(cfg.k, cfg.stride);
    for (size_t i = 0; i < steps.size(); ++i) {
      int t_cur = steps[i];
      int t_prev = i + 1 < steps.size() ? steps[i + 1] : 0;

      Tensor eps;
      if (guided) {
        GuidanceStep gs = guidance_gradient(cfg.guidance, t_cur, cfg.k, z, s, models, ctx);
        res.trace.push_back(gs.trace);
        NoGradGuard ng;
        eps = guide_eps(s, gs.eps, gs.grad, t_cur);  // line 13
      } else {
        NoGradGuard ng;
        eps = models.denoiser.forward(z, t_cur);  // line 7
      }

      NoGradGuard ng;
      check_stage(eps, "noise prediction", t_cur);
      Tensor z_hat = estimate_z0(s, z, eps, t_cur);  // line 14
      check_stage(z_hat, "clean-latent estimate", t_cur);

      double sigma = ddim_sigma(s, t_cur, t_prev, cfg.eta);
      Tensor fg_noise;
      if (sigma > 0.0) fg_noise = fill_noise(z.shape(), rng);
      Tensor z_fg = ddim_step(s, z_hat, eps, t_cur, t_prev, cfg.eta, fg_noise);  // line 15
      check_stage(z_fg, "foreground step", t_cur);

      // Line 16 with the background indexed at the step's own noise level;
      // at t_prev=0 the background latent is z0 itself.
      Tensor z_bg = t_prev > 0 ? forward_sample(s, z0, t_prev, fill_noise(z0.shape(), rng)) : z0;
      check_stage(z_bg, "background noising", t_cur);

      z = blend_latents(z_fg, z_bg, m);  // line 17
      check_stage(z, "blend", t_cur);
    }
  } else {
    z = z0;  // no noising: pure codec round-trip
  }

  {
    NoGradGuard ng;
    Tensor decoded = models.codec.decode(z);  // line 19
    check_stage(decoded, "final decode", 0);
    Tensor out = hard_clamp01(decoded);
    if (cfg.pixel_composite) out = pixel_composite(out, x_targ, M);
    res.image = out;
  }
  res.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return res;
}

AblationResult ablate(const Tensor& x_src, const Tensor& x_targ, const Tensor& M,
                      const SwapConfig& cfg, const SwapModels& models, const NoiseSchedule& s) {
  AblationResult out;
  OracleFit fit_src = oracle_estimate(x_src);
  OracleFit fit_targ = oracle_estimate(x_targ);

  auto run = [&](bool id_on, bool seg_on) {
    SwapConfig c = cfg;
    c.guidance.enable_id = id_on;
    c.guidance.enable_seg = seg_on;
    AblationEntry e;
    e.result = swap(x_src, x_targ, M, c, models, s);
    e.eval = evaluate_with_fits(e.result.image, fit_src, fit_targ, x_src, models.embedder);
    e.result.metrics = e.eval.metrics;
    return e;
  };

  out.disabled = run(false, false);
  out.id_only = run(true, false);
  out.full = run(true, true);
  return out;
}

}  // namespace dswp
