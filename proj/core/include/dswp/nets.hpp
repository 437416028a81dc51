#pragma once

#include <string>
#include <utility>
#include <vector>

#include "dswp/checkpoint.hpp"
#include "dswp/tensor.hpp"

namespace dswp {

/// Mutable views of a model's weights, used by the optimizer and checkpoints.
struct ParamMap {
  std::vector<std::pair<std::string, Tensor*>> items;

  void add(const std::string& name, Tensor* t) { items.emplace_back(name, t); }
  void set_requires_grad(bool on);
  void clear_grads();
  Checkpoint to_checkpoint() const;
  void load_from(const Checkpoint& ck);
};

struct Conv2dLayer {
  Tensor w, b;
  int stride = 1, pad = 1;

  static Conv2dLayer make(int cin, int cout, int k, int stride, int pad, Philox& rng);
  static Conv2dLayer make_zero(int cin, int cout, int k, int stride, int pad);
  Tensor operator()(const Tensor& x) const { return conv2d(x, w, b, stride, pad); }
  void register_params(ParamMap& pm, const std::string& prefix);
};

struct LinearLayer {
  Tensor w, b;

  static LinearLayer make(int in, int out, Philox& rng);
  Tensor operator()(const Tensor& x) const { return linear(w, x, b); }
  void register_params(ParamMap& pm, const std::string& prefix);
};

struct GroupNormLayer {
  Tensor gamma, beta;
  int groups = 8;

  static GroupNormLayer make(int channels, int groups);
  Tensor operator()(const Tensor& x) const { return group_norm(x, groups, gamma, beta); }
  void register_params(ParamMap& pm, const std::string& prefix);
};

/// Sinusoidal timestep embedding, dim must be even. Constant (no grad).
Tensor timestep_embedding(int t, int dim);

// ---- latent autoencoder -------------------------------------------------------

/// 64x64x3 image <-> 16x16x4 latent, downsample factor 4.
class LatentCodec {
 public:
  explicit LatentCodec(uint64_t init_seed = 1);

  Tensor encode(const Tensor& image) const;
  /// Raw decode, unclamped; callers clamp (hard for output, soft in the
  /// guidance path). Differentiable w.r.t. z.
  Tensor decode(const Tensor& z) const;

  ParamMap params();
  void save(const std::string& path) const;
  static LatentCodec load(const std::string& path);

 private:
  Conv2dLayer e1_, e2_, e3_, e4_, e5_;
  Conv2dLayer d1_, d2_, d3_, d4_, d5_;
};

// ---- latent denoiser ------------------------------------------------------------

struct DenoiserResBlock {
  GroupNormLayer gn1;
  Conv2dLayer c1;
  LinearLayer temb_proj;
  GroupNormLayer gn2;
  Conv2dLayer c2;

  static DenoiserResBlock make(int ch, int temb_dim, Philox& rng);
  Tensor forward(const Tensor& x, const Tensor& temb) const;
  void register_params(ParamMap& pm, const std::string& prefix);
};

/// 3-level U-Net over the latent with per-block timestep conditioning.
class Denoiser {
 public:
  explicit Denoiser(int max_timestep = 1000, uint64_t init_seed = 2);

  Tensor forward(const Tensor& z, int t) const;
  int max_timestep() const { return max_timestep_; }

  ParamMap params();
  void save(const std::string& path) const;
  static Denoiser load(const std::string& path);

  static constexpr int kTembDim = 64;

 private:
  int max_timestep_;
  LinearLayer temb1_, temb2_;
  Conv2dLayer stem_;
  DenoiserResBlock down0_;
  Conv2dLayer down1_proj_;
  DenoiserResBlock down1_;
  Conv2dLayer down2_proj_;
  DenoiserResBlock mid_;
  Conv2dLayer up1_merge_;
  DenoiserResBlock up1_;
  Conv2dLayer up0_merge_;
  DenoiserResBlock up0_;
  GroupNormLayer out_gn_;
  Conv2dLayer out_conv_;
};

// ---- identity embedder -----------------------------------------------------------

class IdentityEmbedder {
 public:
  explicit IdentityEmbedder(int n_classes = 200, uint64_t init_seed = 3);

  /// Unit-norm 64-d embedding; differentiable w.r.t. the image.
  Tensor embed(const Tensor& image) const;
  /// Classification logits over identity classes (training only).
  Tensor logits(const Tensor& image) const;
  int n_classes() const { return n_classes_; }

  ParamMap params();
  void save(const std::string& path) const;
  static IdentityEmbedder load(const std::string& path);

  static constexpr int kEmbedDim = 64;

 private:
  Tensor features(const Tensor& image) const;
  int n_classes_;
  Conv2dLayer c1_, c2_, c3_, c4_;
  LinearLayer fc_, head_;
};

// ---- face-part segmenter -----------------------------------------------------------

class Segmenter {
 public:
  explicit Segmenter(uint64_t init_seed = 4);

  Tensor logits(const Tensor& image) const;  // [6,H,W]
  /// Per-pixel class probabilities (softmax over channels); differentiable.
  Tensor segment(const Tensor& image) const;

  ParamMap params();
  void save(const std::string& path) const;
  static Segmenter load(const std::string& path);

 private:
  Conv2dLayer c1_, c2_, c3_, c4_, u1_, u2_, head_;
};

/// Everything the sampling loop needs.
struct SwapModels {
  LatentCodec codec;
  Denoiser denoiser;
  IdentityEmbedder embedder;
  Segmenter segmenter;

  static SwapModels load(const std::string& dir);
  void save(const std::string& dir) const;
};

}  // namespace dswp
