#pragma once

#include <optional>
#include <string>

#include "dswp/facegen.hpp"
#include "dswp/guidance.hpp"
#include "dswp/nets.hpp"
#include "dswp/schedule.hpp"

namespace dswp {

struct SwapConfig {
  int k = 500;       // start timestep; 0 degenerates to a codec round-trip
  double eta = 0.0;  // DDIM stochasticity
  int stride = 20;   // timestep subsampling; must divide k
  uint64_t seed = 7;
  GuidanceConfig guidance;
  bool trace = false;
  bool pixel_composite = false;  // optional final pixel-space compositing

  void validate(const NoiseSchedule& s) const;
};

struct SwapResult {
  Tensor image;  // [3,64,64] in [0,1]
  GuidanceTrace trace;
  std::optional<MetricBundle> metrics;
  SwapConfig config;
  double elapsed_seconds = 0.0;
};

/// Area-downsample by the codec factor, then majority-threshold: a latent
/// cell is foreground iff more than half of its block is. M must be binary.
Tensor downsample_mask(const Tensor& M, int factor);

/// fg*m + bg*(1-m); mask is [1,h,w] broadcast over channels (or [C,h,w]).
Tensor blend_latents(const Tensor& fg, const Tensor& bg, const Tensor& m);

/// The full guided sampling loop: encode target, noise to z_k, then per step
/// predict noise, guide it with the facial-loss gradient, take a DDIM step
/// for the foreground, re-noise the target latent for the background, and
/// blend through the downsampled mask. Draw order from the seed: one initial
/// noise fill, then per step a foreground fill iff sigma>0 followed by a
/// background fill iff t_prev>0.
SwapResult swap(const Tensor& x_src, const Tensor& x_targ, const Tensor& M, const SwapConfig& cfg,
                const SwapModels& models, const NoiseSchedule& s);

struct AblationEntry {
  SwapResult result;
  SwapEvaluation eval;
};

/// Both disabled / identity only / identity + segmentation, sharing one seed
/// and schedule; metrics attached to every entry.
struct AblationResult {
  AblationEntry disabled, id_only, full;
};

AblationResult ablate(const Tensor& x_src, const Tensor& x_targ, const Tensor& M,
                      const SwapConfig& cfg, const SwapModels& models, const NoiseSchedule& s);

}  // namespace dswp
