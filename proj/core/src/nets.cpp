#include "dswp/nets.hpp"

#include <cmath>

#include "dswp/facegen.hpp"

namespace dswp {

namespace {
// He-normal init for conv/linear weights.
std::vector<float> he_init(int64_t n, int fan_in, Philox& rng) {
  std::vector<float> v(n);
  rng.fill_normal(v);
  float scale = std::sqrt(2.0f / static_cast<float>(fan_in));
  for (float& x : v) x *= scale;
  return v;
}

constexpr const char* kArchEntry = "meta/arch";

void check_arch(const Checkpoint& ck, std::initializer_list<float> expect, const char* what) {
  const Tensor* meta = ck.find(kArchEntry);
  require(meta != nullptr, what, ": checkpoint has no ", kArchEntry, " entry");
  require(meta->numel() == static_cast<int64_t>(expect.size()), what,
          ": architecture tag length mismatch");
  int i = 0;
  for (float e : expect)
    require(meta->at(i++) == e, what, ": checkpoint architecture differs from this build");
}
}  // namespace

void ParamMap::set_requires_grad(bool on) {
  for (auto& [name, t] : items) *t = t->clone_as_leaf(on);
}

void ParamMap::clear_grads() {
  for (auto& [name, t] : items) t->clear_grad();
}

Checkpoint ParamMap::to_checkpoint() const {
  Checkpoint ck;
  for (const auto& [name, t] : items) ck.add(name, *t);
  return ck;
}

void ParamMap::load_from(const Checkpoint& ck) {
  for (auto& [name, t] : items) *t = ck.fetch(name, t->shape()).clone_as_leaf(t->requires_grad());
}

Conv2dLayer Conv2dLayer::make(int cin, int cout, int k, int stride, int pad, Philox& rng) {
  Conv2dLayer l;
  l.stride = stride;
  l.pad = pad;
  l.w = Tensor::from({cout, cin, k, k}, he_init(int64_t(cout) * cin * k * k, cin * k * k, rng));
  l.b = Tensor::zeros({cout});
  return l;
}

Conv2dLayer Conv2dLayer::make_zero(int cin, int cout, int k, int stride, int pad) {
  Conv2dLayer l;
  l.stride = stride;
  l.pad = pad;
  l.w = Tensor::zeros({cout, cin, k, k});
  l.b = Tensor::zeros({cout});
  return l;
}

void Conv2dLayer::register_params(ParamMap& pm, const std::string& prefix) {
  pm.add(prefix + ".w", &w);
  pm.add(prefix + ".b", &b);
}

LinearLayer LinearLayer::make(int in, int out, Philox& rng) {
  LinearLayer l;
  l.w = Tensor::from({out, in}, he_init(int64_t(out) * in, in, rng));
  l.b = Tensor::zeros({out});
  return l;
}

void LinearLayer::register_params(ParamMap& pm, const std::string& prefix) {
  pm.add(prefix + ".w", &w);
  pm.add(prefix + ".b", &b);
}

GroupNormLayer GroupNormLayer::make(int channels, int groups) {
  GroupNormLayer l;
  l.groups = groups;
  l.gamma = Tensor::full({channels}, 1.0f);
  l.beta = Tensor::zeros({channels});
  return l;
}

void GroupNormLayer::register_params(ParamMap& pm, const std::string& prefix) {
  pm.add(prefix + ".gamma", &gamma);
  pm.add(prefix + ".beta", &beta);
}

Tensor timestep_embedding(int t, int dim) {
  require(dim % 2 == 0, "timestep_embedding: dim must be even, got ", dim);
  int half = dim / 2;
  std::vector<float> v(dim);
  for (int i = 0; i < half; ++i) {
    double freq = std::exp(-std::log(10000.0) * double(i) / double(half - 1));
    v[i] = static_cast<float>(std::sin(t * freq));
    v[half + i] = static_cast<float>(std::cos(t * freq));
  }
  return Tensor::from({dim}, std::move(v));
}

// ---- LatentCodec -------------------------------------------------------------

LatentCodec::LatentCodec(uint64_t init_seed) {
  Philox rng(init_seed, 0xC0DEC);
  e1_ = Conv2dLayer::make(3, 16, 3, 1, 1, rng);
  e2_ = Conv2dLayer::make(16, 24, 3, 2, 1, rng);
  e3_ = Conv2dLayer::make(24, 32, 3, 2, 1, rng);
  e4_ = Conv2dLayer::make(32, 32, 3, 1, 1, rng);
  e5_ = Conv2dLayer::make(32, kLatentChannels, 1, 1, 0, rng);
  d1_ = Conv2dLayer::make(kLatentChannels, 32, 3, 1, 1, rng);
  d2_ = Conv2dLayer::make(32, 32, 3, 1, 1, rng);
  d3_ = Conv2dLayer::make(32, 24, 3, 1, 1, rng);
  d4_ = Conv2dLayer::make(24, 16, 3, 1, 1, rng);
  d5_ = Conv2dLayer::make(16, 3, 3, 1, 1, rng);
}

Tensor LatentCodec::encode(const Tensor& image) const {
  require(image.shape() == Shape({3, kImageSize, kImageSize}), "encode: image must be [3,",
          kImageSize, ",", kImageSize, "], got ", shape_str(image.shape()));
  Tensor h = silu(e1_(image));
  h = silu(e2_(h));
  h = silu(e3_(h));
  h = silu(e4_(h));
  return e5_(h);
}

Tensor LatentCodec::decode(const Tensor& z) const {
  require(z.shape() == Shape({kLatentChannels, kLatentSize, kLatentSize}),
          "decode: latent must be [", kLatentChannels, ",", kLatentSize, ",", kLatentSize,
          "], got ", shape_str(z.shape()));
  Tensor h = silu(d1_(z));
  h = silu(d2_(h));
  h = upsample_nearest(h, 2);
  h = silu(d3_(h));
  h = upsample_nearest(h, 2);
  h = silu(d4_(h));
  return d5_(h);
}

ParamMap LatentCodec::params() {
  ParamMap pm;
  e1_.register_params(pm, "enc.c1");
  e2_.register_params(pm, "enc.c2");
  e3_.register_params(pm, "enc.c3");
  e4_.register_params(pm, "enc.c4");
  e5_.register_params(pm, "enc.c5");
  d1_.register_params(pm, "dec.c1");
  d2_.register_params(pm, "dec.c2");
  d3_.register_params(pm, "dec.c3");
  d4_.register_params(pm, "dec.c4");
  d5_.register_params(pm, "dec.c5");
  return pm;
}

void LatentCodec::save(const std::string& path) const {
  Checkpoint ck = const_cast<LatentCodec*>(this)->params().to_checkpoint();
  ck.add(kArchEntry, Tensor::from({4}, {1, 16, 24, 32}));
  ck.save(path);
}

LatentCodec LatentCodec::load(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  check_arch(ck, {1, 16, 24, 32}, "codec");
  LatentCodec m(0);
  m.params().load_from(ck);
  return m;
}

// ---- Denoiser ----------------------------------------------------------------

DenoiserResBlock DenoiserResBlock::make(int ch, int temb_dim, Philox& rng) {
  DenoiserResBlock b;
  b.gn1 = GroupNormLayer::make(ch, 8);
  b.c1 = Conv2dLayer::make(ch, ch, 3, 1, 1, rng);
  b.temb_proj = LinearLayer::make(temb_dim, ch, rng);
  b.gn2 = GroupNormLayer::make(ch, 8);
  b.c2 = Conv2dLayer::make(ch, ch, 3, 1, 1, rng);
  return b;
}

Tensor DenoiserResBlock::forward(const Tensor& x, const Tensor& temb) const {
  Tensor h = c1(silu(gn1(x)));
  h = bias_channel(h, temb_proj(temb));
  h = c2(silu(gn2(h)));
  return add(x, h);
}

void DenoiserResBlock::register_params(ParamMap& pm, const std::string& prefix) {
  gn1.register_params(pm, prefix + ".gn1");
  c1.register_params(pm, prefix + ".c1");
  temb_proj.register_params(pm, prefix + ".temb");
  gn2.register_params(pm, prefix + ".gn2");
  c2.register_params(pm, prefix + ".c2");
}

namespace {
constexpr int kDenCh0 = 24, kDenCh1 = 32, kDenCh2 = 48;
}

Denoiser::Denoiser(int max_timestep, uint64_t init_seed) : max_timestep_(max_timestep) {
  require(max_timestep >= 1, "denoiser: max_timestep must be >= 1, got ", max_timestep);
  Philox rng(init_seed, 0xDE401);
  temb1_ = LinearLayer::make(kTembDim, kTembDim, rng);
  temb2_ = LinearLayer::make(kTembDim, kTembDim, rng);
  stem_ = Conv2dLayer::make(kLatentChannels, kDenCh0, 3, 1, 1, rng);
  down0_ = DenoiserResBlock::make(kDenCh0, kTembDim, rng);
  down1_proj_ = Conv2dLayer::make(kDenCh0, kDenCh1, 1, 1, 0, rng);
  down1_ = DenoiserResBlock::make(kDenCh1, kTembDim, rng);
  down2_proj_ = Conv2dLayer::make(kDenCh1, kDenCh2, 1, 1, 0, rng);
  mid_ = DenoiserResBlock::make(kDenCh2, kTembDim, rng);
  up1_merge_ = Conv2dLayer::make(kDenCh2 + kDenCh1, kDenCh1, 3, 1, 1, rng);
  up1_ = DenoiserResBlock::make(kDenCh1, kTembDim, rng);
  up0_merge_ = Conv2dLayer::make(kDenCh1 + kDenCh0, kDenCh0, 3, 1, 1, rng);
  up0_ = DenoiserResBlock::make(kDenCh0, kTembDim, rng);
  out_gn_ = GroupNormLayer::make(kDenCh0, 8);
  // Zero-initialized head: the untrained denoiser predicts zero noise.
  out_conv_ = Conv2dLayer::make_zero(kDenCh0, kLatentChannels, 3, 1, 1);
}

Tensor Denoiser::forward(const Tensor& z, int t) const {
  require(z.shape() == Shape({kLatentChannels, kLatentSize, kLatentSize}),
          "denoiser: latent must be [", kLatentChannels, ",", kLatentSize, ",", kLatentSize,
          "], got ", shape_str(z.shape()));
  require(t >= 1 && t <= max_timestep_, "denoiser: timestep ", t, " out of range [1,",
          max_timestep_, "]");
  Tensor temb = timestep_embedding(t, kTembDim);
  temb = temb2_(silu(temb1_(temb)));
  Tensor h0 = down0_.forward(stem_(z), temb);
  Tensor h1 = down1_.forward(down1_proj_(downsample_area(h0, 2)), temb);
  Tensor h2 = mid_.forward(down2_proj_(downsample_area(h1, 2)), temb);
  Tensor u1 = up1_.forward(up1_merge_(concat_ch(upsample_nearest(h2, 2), h1)), temb);
  Tensor u0 = up0_.forward(up0_merge_(concat_ch(upsample_nearest(u1, 2), h0)), temb);
  return out_conv_(silu(out_gn_(u0)));
}

ParamMap Denoiser::params() {
  ParamMap pm;
  temb1_.register_params(pm, "temb.l1");
  temb2_.register_params(pm, "temb.l2");
  stem_.register_params(pm, "stem");
  down0_.register_params(pm, "down0");
  down1_proj_.register_params(pm, "down1.proj");
  down1_.register_params(pm, "down1");
  down2_proj_.register_params(pm, "down2.proj");
  mid_.register_params(pm, "mid");
  up1_merge_.register_params(pm, "up1.merge");
  up1_.register_params(pm, "up1");
  up0_merge_.register_params(pm, "up0.merge");
  up0_.register_params(pm, "up0");
  out_gn_.register_params(pm, "out.gn");
  out_conv_.register_params(pm, "out.conv");
  return pm;
}

void Denoiser::save(const std::string& path) const {
  Checkpoint ck = const_cast<Denoiser*>(this)->params().to_checkpoint();
  ck.add(kArchEntry, Tensor::from({5}, {2, kDenCh0, kDenCh1, kDenCh2,
                                        static_cast<float>(max_timestep_)}));
  ck.save(path);
}

Denoiser Denoiser::load(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  const Tensor* meta = ck.find(kArchEntry);
  require(meta && meta->numel() == 5, "denoiser: bad checkpoint metadata");
  check_arch(ck, {2, kDenCh0, kDenCh1, kDenCh2, meta->at(4)}, "denoiser");
  Denoiser m(static_cast<int>(meta->at(4)), 0);
  m.params().load_from(ck);
  return m;
}

// ---- IdentityEmbedder -----------------------------------------------------------

IdentityEmbedder::IdentityEmbedder(int n_classes, uint64_t init_seed) : n_classes_(n_classes) {
  require(n_classes >= 2, "embedder: need at least 2 identity classes, got ", n_classes);
  Philox rng(init_seed, 0x1DE47);
  c1_ = Conv2dLayer::make(3, 16, 3, 2, 1, rng);
  c2_ = Conv2dLayer::make(16, 32, 3, 2, 1, rng);
  c3_ = Conv2dLayer::make(32, 48, 3, 2, 1, rng);
  c4_ = Conv2dLayer::make(48, 64, 3, 2, 1, rng);
  fc_ = LinearLayer::make(64, kEmbedDim, rng);
  head_ = LinearLayer::make(kEmbedDim, n_classes, rng);
}

Tensor IdentityEmbedder::features(const Tensor& image) const {
  require(image.shape() == Shape({3, kImageSize, kImageSize}), "embedder: image must be [3,",
          kImageSize, ",", kImageSize, "], got ", shape_str(image.shape()));
  Tensor h = silu(c1_(image));
  h = silu(c2_(h));
  h = silu(c3_(h));
  h = silu(c4_(h));                      // [64,4,4]
  h = downsample_area(h, kImageSize / 16);  // global average pool -> [64,1,1]
  return fc_(reshape(h, {64}));
}

Tensor IdentityEmbedder::embed(const Tensor& image) const {
  return l2_normalize(features(image));
}

Tensor IdentityEmbedder::logits(const Tensor& image) const { return head_(features(image)); }

ParamMap IdentityEmbedder::params() {
  ParamMap pm;
  c1_.register_params(pm, "c1");
  c2_.register_params(pm, "c2");
  c3_.register_params(pm, "c3");
  c4_.register_params(pm, "c4");
  fc_.register_params(pm, "fc");
  head_.register_params(pm, "head");
  return pm;
}

void IdentityEmbedder::save(const std::string& path) const {
  Checkpoint ck = const_cast<IdentityEmbedder*>(this)->params().to_checkpoint();
  ck.add(kArchEntry, Tensor::from({3}, {3, kEmbedDim, static_cast<float>(n_classes_)}));
  ck.save(path);
}

IdentityEmbedder IdentityEmbedder::load(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  const Tensor* meta = ck.find(kArchEntry);
  require(meta && meta->numel() == 3, "embedder: bad checkpoint metadata");
  check_arch(ck, {3, kEmbedDim, meta->at(2)}, "embedder");
  IdentityEmbedder m(static_cast<int>(meta->at(2)), 0);
  m.params().load_from(ck);
  return m;
}

// ---- Segmenter ---------------------------------------------------------------------

Segmenter::Segmenter(uint64_t init_seed) {
  Philox rng(init_seed, 0x5E6);
  c1_ = Conv2dLayer::make(3, 12, 3, 1, 1, rng);
  c2_ = Conv2dLayer::make(12, 20, 3, 2, 1, rng);
  c3_ = Conv2dLayer::make(20, 28, 3, 2, 1, rng);
  c4_ = Conv2dLayer::make(28, 28, 3, 1, 1, rng);
  u1_ = Conv2dLayer::make(28 + 20, 20, 3, 1, 1, rng);
  u2_ = Conv2dLayer::make(20 + 12, 12, 3, 1, 1, rng);
  head_ = Conv2dLayer::make(12, kNumSegClasses, 1, 1, 0, rng);
}

Tensor Segmenter::logits(const Tensor& image) const {
  require(image.shape() == Shape({3, kImageSize, kImageSize}), "segmenter: image must be [3,",
          kImageSize, ",", kImageSize, "], got ", shape_str(image.shape()));
  Tensor h1 = silu(c1_(image));                          // [12,64,64]
  Tensor h2 = silu(c2_(h1));                             // [20,32,32]
  Tensor h3 = silu(c4_(silu(c3_(h2))));                  // [28,16,16]
  Tensor u = silu(u1_(concat_ch(upsample_nearest(h3, 2), h2)));  // [20,32,32]
  u = silu(u2_(concat_ch(upsample_nearest(u, 2), h1)));          // [12,64,64]
  return head_(u);
}

Tensor Segmenter::segment(const Tensor& image) const { return softmax_channel(logits(image)); }

ParamMap Segmenter::params() {
  ParamMap pm;
  c1_.register_params(pm, "c1");
  c2_.register_params(pm, "c2");
  c3_.register_params(pm, "c3");
  c4_.register_params(pm, "c4");
  u1_.register_params(pm, "u1");
  u2_.register_params(pm, "u2");
  head_.register_params(pm, "head");
  return pm;
}

void Segmenter::save(const std::string& path) const {
  Checkpoint ck = const_cast<Segmenter*>(this)->params().to_checkpoint();
  ck.add(kArchEntry, Tensor::from({2}, {4, kNumSegClasses}));
  ck.save(path);
}

Segmenter Segmenter::load(const std::string& path) {
  Checkpoint ck = Checkpoint::load(path);
  check_arch(ck, {4, kNumSegClasses}, "segmenter");
  Segmenter m(0);
  m.params().load_from(ck);
  return m;
}

// ---- SwapModels ---------------------------------------------------------------------

SwapModels SwapModels::load(const std::string& dir) {
  return SwapModels{LatentCodec::load(dir + "/codec.dswp"), Denoiser::load(dir + "/denoiser.dswp"),
                    IdentityEmbedder::load(dir + "/identity.dswp"),
                    Segmenter::load(dir + "/segmenter.dswp")};
}

void SwapModels::save(const std::string& dir) const {
  codec.save(dir + "/codec.dswp");
  denoiser.save(dir + "/denoiser.dswp");
  embedder.save(dir + "/identity.dswp");
  segmenter.save(dir + "/segmenter.dswp");
}

}  // namespace dswp
