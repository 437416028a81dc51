#pragma once

#include <string>
#include <vector>

#include "dswp/facegen.hpp"
#include "dswp/nets.hpp"
#include "dswp/schedule.hpp"

namespace dswp {

struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  void step(ParamMap& params);

 private:
  std::vector<std::vector<float>> m_, v_;
  int t_ = 0;
};

struct TrainParams {
  int steps = 1000;
  int batch = 8;
  double lr = 1e-3;
  uint64_t seed = 11;
  int log_every = 25;
};

struct TrainReport {
  std::vector<std::pair<int, float>> loss_history;  // (step, batch loss)
  double validation = 0.0;
  bool diverged = false;
  int last_good_step = 0;

  void save_csv(const std::string& path) const;
};

/// Thrown on loss divergence; the model is restored to the last finite
/// snapshot before this is raised so callers can persist it.
struct DivergenceError : Error {
  explicit DivergenceError(const std::string& msg) : Error(msg) {}
};

/// MSE reconstruction; validation = PSNR (dB) of the mean held-out MSE.
TrainReport train_codec(LatentCodec& codec, const std::vector<LoadedFace>& train,
                        const std::vector<LoadedFace>& holdout, const TrainParams& p);

/// Noise-prediction MSE at uniformly sampled t; validation = held-out
/// noise MSE relative to the zero predictor (1.0 = no better than zero).
TrainReport train_denoiser(Denoiser& den, const std::vector<Tensor>& latents_train,
                           const std::vector<Tensor>& latents_holdout, const NoiseSchedule& s,
                           const TrainParams& p);

/// Identity classification; validation = mean same-identity cosine minus mean
/// different-identity cosine over held-out pairs.
TrainReport train_identity(IdentityEmbedder& emb, const std::vector<LoadedFace>& train,
                           const std::vector<LoadedFace>& holdout, const TrainParams& p);

/// Per-pixel cross-entropy against analytic masks; validation = held-out
/// pixel accuracy.
TrainReport train_segmenter(Segmenter& seg, const std::vector<LoadedFace>& train,
                            const std::vector<LoadedFace>& holdout, const TrainParams& p);

/// Encode every face once with the frozen codec (the denoiser trains in
/// latent space).
std::vector<Tensor> encode_dataset(const LatentCodec& codec, const std::vector<LoadedFace>& faces);

double codec_psnr(const LatentCodec& codec, const std::vector<LoadedFace>& faces);
double denoiser_relative_mse(const Denoiser& den, const std::vector<Tensor>& latents,
                             const NoiseSchedule& s, uint64_t seed);
double identity_margin(const IdentityEmbedder& emb, const std::vector<LoadedFace>& faces,
                       uint64_t seed);
double segmenter_accuracy(const Segmenter& seg, const std::vector<LoadedFace>& faces);

}  // namespace dswp
