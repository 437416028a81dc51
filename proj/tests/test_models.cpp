#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "dswp/train.hpp"

using namespace dswp;

namespace {
std::vector<LoadedFace> tiny_dataset(int n, int identities, uint64_t seed) {
  auto items = plan_dataset({n, seed, identities, 0.0});
  std::vector<LoadedFace> out;
  for (auto& it : items) {
    RenderedFace rf = render(it.spec, it.render_seed);
    out.push_back({rf.image, rf.mask, rf.labels, it.spec, it.identity_class});
  }
  return out;
}

/// Gradient spot-check against central differences on a random subset of
/// input coordinates (full finite differences over 12k pixels would dominate
/// the suite's runtime without adding information).
void subset_grad_check(const char* name, const std::function<Tensor(const Tensor&)>& scalar_op,
                       const Tensor& x, int n_coords, uint64_t seed, double h, double tol) {
  Tensor leaf = x.clone_as_leaf(true);
  backward(scalar_op(leaf));
  REQUIRE(leaf.has_grad());

  Philox rng(seed, 5);
  std::vector<int64_t> coords(n_coords);
  for (int i = 0; i < n_coords; ++i)
    coords[i] = static_cast<int64_t>(rng.uniform() * x.numel());
  auto f = [&](const Tensor& t) { return double(scalar_op(t.detach()).item()); };
  std::vector<float> fd = finite_diff_grad_at(f, x, h, coords);
  std::vector<float> ad(n_coords);
  for (int i = 0; i < n_coords; ++i) ad[i] = leaf.grad()[coords[i]];
  double err = rel_error(ad, fd);
  CHECK_MESSAGE(err < tol, name, ": rel err ", err);
}
}  // namespace

TEST_CASE("codec shapes, determinism and round-trip structure") {
  LatentCodec codec(42);
  Philox rng(1);
  Tensor img = render(FaceSpec{}, 1).image;
  Tensor z = codec.encode(img);
  CHECK(z.shape() == Shape({kLatentChannels, kLatentSize, kLatentSize}));
  CHECK(codec.encode(img).vec() == z.vec());

  Tensor dec = codec.decode(z);
  CHECK(dec.shape() == Shape({3, kImageSize, kImageSize}));
  CHECK(codec.decode(z).vec() == dec.vec());

  // all-zeros image maps to one fixed latent
  Tensor zero = Tensor::zeros({3, kImageSize, kImageSize});
  CHECK(codec.encode(zero).vec() == codec.encode(zero).vec());

  CHECK_THROWS_AS(codec.encode(Tensor::zeros({3, 32, 32})), Error);
  CHECK_THROWS_AS(codec.decode(Tensor::zeros({4, 8, 8})), Error);
}

TEST_CASE("denoiser shape, determinism and timestep validation") {
  Denoiser den(100, 7);
  Philox rng(2);
  Tensor z = Tensor::randn({kLatentChannels, kLatentSize, kLatentSize}, rng);
  for (int t : {1, 50, 100}) {
    Tensor eps = den.forward(z, t);
    CHECK(eps.shape() == z.shape());
    CHECK(den.forward(z, t).vec() == eps.vec());
  }
  CHECK(den.forward(z, 1).vec() != den.forward(z, 100).vec());
  CHECK_THROWS_AS(den.forward(z, 0), Error);
  CHECK_THROWS_AS(den.forward(z, 101), Error);
}

TEST_CASE("embedder output is unit norm") {
  IdentityEmbedder emb(16, 9);
  Philox rng(3);
  for (int i = 0; i < 5; ++i) {
    Tensor img = Tensor::randn({3, kImageSize, kImageSize}, rng);
    Tensor e = emb.embed(img);
    CHECK(e.shape() == Shape({IdentityEmbedder::kEmbedDim}));
    CHECK(std::abs(l2_norm_value(e.vec()) - 1.0) < 1e-5);
  }
  CHECK(emb.logits(Tensor::randn({3, kImageSize, kImageSize}, rng)).shape() == Shape({16}));
}

TEST_CASE("segmenter probabilities sum to one per pixel") {
  Segmenter seg(11);
  Philox rng(4);
  Tensor img = Tensor::randn({3, kImageSize, kImageSize}, rng);
  Tensor p = seg.segment(img);
  CHECK(p.shape() == Shape({kNumSegClasses, kImageSize, kImageSize}));
  int hw = kImageSize * kImageSize;
  for (int i = 0; i < hw; i += 97) {
    double s = 0;
    for (int c = 0; c < kNumSegClasses; ++c) s += p.at(c * hw + i);
    CHECK(std::abs(s - 1.0) < 1e-5);
  }
}

TEST_CASE("guidance-path networks pass gradient spot checks") {
  LatentCodec codec(42);
  IdentityEmbedder emb(8, 9);
  Segmenter seg(11);
  Philox rng(5);

  for (int trial = 0; trial < 3; ++trial) {
    Tensor z = Tensor::randn({kLatentChannels, kLatentSize, kLatentSize}, rng);
    subset_grad_check("decoder", [&](const Tensor& t) { return mean_all(codec.decode(t)); }, z,
                      40, 100 + trial, 1e-3, 1e-3);
  }
  for (int trial = 0; trial < 3; ++trial) {
    // images near the render manifold, values in [0,1]
    Philox r2(50 + trial);
    Tensor img = render(FaceSpec{}, trial).image;
    Tensor probe = l2_normalize(Tensor::randn({IdentityEmbedder::kEmbedDim}, r2)).detach();
    subset_grad_check("embedder",
                      [&](const Tensor& t) { return cosine(emb.embed(t), probe); }, img, 40,
                      200 + trial, 1e-3, 2e-3);
    subset_grad_check("segmenter",
                      [&](const Tensor& t) { return sumsq(seg.segment(t)); }, img, 40,
                      300 + trial, 1e-3, 2e-3);
  }
}

TEST_CASE("checkpoints round-trip to identical outputs") {
  namespace fs = std::filesystem;
  std::string dir = (fs::temp_directory_path() / "dswp_models_test").string();
  fs::create_directories(dir);
  Philox rng(6);
  Tensor img = render(FaceSpec{}, 2).image;
  Tensor z = Tensor::randn({kLatentChannels, kLatentSize, kLatentSize}, rng);

  LatentCodec codec(1);
  codec.save(dir + "/codec.dswp");
  CHECK(LatentCodec::load(dir + "/codec.dswp").encode(img).vec() == codec.encode(img).vec());

  Denoiser den(64, 2);
  den.save(dir + "/denoiser.dswp");
  CHECK(Denoiser::load(dir + "/denoiser.dswp").forward(z, 13).vec() == den.forward(z, 13).vec());

  IdentityEmbedder emb(12, 3);
  emb.save(dir + "/identity.dswp");
  CHECK(IdentityEmbedder::load(dir + "/identity.dswp").embed(img).vec() == emb.embed(img).vec());

  Segmenter seg(4);
  seg.save(dir + "/segmenter.dswp");
  CHECK(Segmenter::load(dir + "/segmenter.dswp").segment(img).vec() == seg.segment(img).vec());

  // wrong-architecture checkpoint is rejected
  CHECK_THROWS_AS(Denoiser::load(dir + "/codec.dswp"), Error);
  fs::remove_all(dir);
}

TEST_CASE("adam minimizes a quadratic") {
  Tensor w = Tensor::from({3}, {5.0f, -4.0f, 2.5f}, true);
  ParamMap pm;
  pm.add("w", &w);
  Adam opt;
  opt.lr = 0.2;
  for (int i = 0; i < 300; ++i) {
    pm.clear_grads();
    backward(sumsq(w));
    opt.step(pm);
  }
  for (int i = 0; i < 3; ++i) CHECK(std::abs(w.at(i)) < 1e-2);
}

TEST_CASE("short codec training decreases the loss") {
  auto faces = tiny_dataset(24, 4, 31);
  std::vector<LoadedFace> train(faces.begin(), faces.begin() + 20);
  std::vector<LoadedFace> hold(faces.begin() + 20, faces.end());
  LatentCodec codec(77);
  TrainParams p{120, 4, 1e-3, 5, 10};
  TrainReport rep = train_codec(codec, train, hold, p);
  REQUIRE(rep.loss_history.size() >= 4);
  double first = rep.loss_history.front().second;
  double last = rep.loss_history.back().second;
  CHECK(last < first);
  CHECK(rep.validation > 5.0);  // some PSNR, even when barely trained
}

TEST_CASE("divergence restores the last good weights and throws") {
  auto faces = tiny_dataset(8, 2, 32);
  std::vector<LoadedFace> train(faces.begin(), faces.begin() + 6);
  std::vector<LoadedFace> hold(faces.begin() + 6, faces.end());
  LatentCodec codec(78);
  TrainParams p{300, 2, 1e18, 6, 10};  // absurd lr forces non-finite loss
  CHECK_THROWS_AS(train_codec(codec, train, hold, p), DivergenceError);
  // restored weights still produce finite outputs
  Tensor z = codec.encode(train[0].image);
  CHECK(z.all_finite());
}

TEST_CASE("denoiser training beats the zero predictor on a tiny run") {
  auto faces = tiny_dataset(16, 4, 33);
  LatentCodec codec(79);
  auto latents = encode_dataset(codec, faces);
  std::vector<Tensor> lat_train(latents.begin(), latents.begin() + 12);
  std::vector<Tensor> lat_hold(latents.begin() + 12, latents.end());
  NoiseSchedule s = make_schedule(100, 1e-3, 0.05);
  Denoiser den(100, 80);
  TrainParams p{150, 4, 2e-4, 7, 25};
  TrainReport rep = train_denoiser(den, lat_train, lat_hold, s, p);
  CHECK(rep.validation < 1.0);  // already better than predicting zero
}
