#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "dswp/facegen.hpp"
#include "dswp/nets.hpp"

using namespace dswp;

namespace {
FaceSpec sample_spec(Philox& rng) {
  FaceSpec s;
  s.id.skin_hue = static_cast<float>(rng.uniform());
  s.id.skin_sat = static_cast<float>(rng.uniform());
  s.id.eye_color = static_cast<float>(rng.uniform());
  s.id.aspect = static_cast<float>(rng.uniform());
  s.id.nose_len = static_cast<float>(rng.uniform());
  s.id.brow = static_cast<float>(rng.uniform());
  s.expr.mouth_curve = static_cast<float>(rng.uniform() * 2 - 1);
  s.expr.mouth_open = static_cast<float>(rng.uniform());
  s.expr.eye_open = static_cast<float>(0.2 + 0.8 * rng.uniform());
  s.yaw_deg = static_cast<float>(rng.uniform() * 60 - 30);
  return s;
}

float param_of(const FaceSpec& s, int i) {
  switch (i) {
    case 0: return s.id.skin_hue;
    case 1: return s.id.skin_sat;
    case 2: return s.id.eye_color;
    case 3: return s.id.aspect;
    case 4: return s.id.nose_len;
    case 5: return s.id.brow;
    case 6: return s.expr.mouth_curve;
    case 7: return s.expr.mouth_open;
    case 8: return s.expr.eye_open;
    default: return s.yaw_deg;
  }
}

void set_param_of(FaceSpec& s, int i, float v) {
  switch (i) {
    case 0: s.id.skin_hue = v; break;
    case 1: s.id.skin_sat = v; break;
    case 2: s.id.eye_color = v; break;
    case 3: s.id.aspect = v; break;
    case 4: s.id.nose_len = v; break;
    case 5: s.id.brow = v; break;
    case 6: s.expr.mouth_curve = v; break;
    case 7: s.expr.mouth_open = v; break;
    case 8: s.expr.eye_open = v; break;
    default: s.yaw_deg = v; break;
  }
}

constexpr float kRangeLo[10] = {0, 0, 0, 0, 0, 0, -1, 0, 0, -30};
constexpr float kRangeHi[10] = {1, 1, 1, 1, 1, 1, 1, 1, 1, 30};
}  // namespace

TEST_CASE("render is deterministic and validates its spec") {
  Philox rng(21);
  FaceSpec s = sample_spec(rng);
  RenderedFace a = render(s, 99), b = render(s, 99);
  CHECK(a.image.vec() == b.image.vec());
  CHECK(a.labels.labels == b.labels.labels);

  RenderedFace c = render(s, 100);
  CHECK(a.image.vec() != c.image.vec());  // seed perturbs the background
  CHECK(a.labels.labels == c.labels.labels);

  FaceSpec bad = s;
  bad.yaw_deg = 45.0f;
  CHECK_THROWS_AS(render(bad, 1), Error);
  bad = s;
  bad.expr.mouth_open = -0.2f;
  CHECK_THROWS_AS(render(bad, 1), Error);
}

TEST_CASE("labels partition the image and the mask is their union") {
  Philox rng(22);
  for (int trial = 0; trial < 5; ++trial) {
    RenderedFace f = render(sample_spec(rng), trial);
    int64_t face_px = 0;
    for (size_t i = 0; i < f.labels.labels.size(); ++i) {
      uint8_t l = f.labels.labels[i];
      CHECK(l < kNumSegClasses);
      bool in_mask = f.mask.at(static_cast<int64_t>(i)) == 1.0f;
      CHECK(in_mask == (l != 0));
      face_px += l != 0;
    }
    // sanity: the face occupies a plausible fraction of the canvas
    CHECK(face_px > 500);
    CHECK(face_px < 3500);
  }
}

TEST_CASE("mouth curvature only changes mouth-region pixels") {
  Philox rng(23);
  FaceSpec s = sample_spec(rng);
  s.expr.mouth_open = 0.3f;
  FaceSpec up = s, down = s;
  up.expr.mouth_curve = 1.0f;
  down.expr.mouth_curve = -1.0f;
  RenderedFace a = render(up, 7), b = render(down, 7);

  int hw = kImageSize * kImageSize;
  int changed_in_mouth = 0;
  for (int i = 0; i < hw; ++i) {
    bool mouthish = a.labels.labels[i] == 5 || b.labels.labels[i] == 5;
    float diff = 0;
    for (int c = 0; c < 3; ++c)
      diff = std::max(diff, std::abs(a.image.at(c * hw + i) - b.image.at(c * hw + i)));
    if (!mouthish) {
      CHECK(diff == 0.0f);
      if (diff != 0.0f) return;
    } else if (diff > 0.05f) {
      ++changed_in_mouth;
    }
  }
  CHECK(changed_in_mouth > 10);
}

TEST_CASE("occluders draw over the face but leave the mask alone") {
  Philox rng(24);
  FaceSpec s = sample_spec(rng);
  s.occluder = OccluderKind::None;
  RenderedFace plain = render(s, 3);
  s.occluder = OccluderKind::Bar;
  s.occ_y = 0.55f;
  RenderedFace barred = render(s, 3);

  CHECK(barred.mask.vec() == plain.mask.vec());
  CHECK(barred.labels.labels == plain.labels.labels);
  CHECK(mse(barred.image, plain.image) > 1e-3);  // the bar is visible
}

TEST_CASE("renderer is locally Lipschitz in every parameter") {
  Philox rng(25);
  for (int trial = 0; trial < 3; ++trial) {
    FaceSpec s = sample_spec(rng);
    RenderedFace base = render(s, 1);
    for (int p = 0; p < 10; ++p) {
      float range = kRangeHi[p] - kRangeLo[p];
      float v = param_of(s, p) + 0.01f * range;
      if (v > kRangeHi[p]) v = param_of(s, p) - 0.01f * range;
      FaceSpec pert = s;
      set_param_of(pert, p, v);
      CHECK(mse(render(pert, 1).image, base.image) < 0.05);
    }
  }
}

TEST_CASE("dataset planning is balanced and reproducible") {
  CHECK_THROWS_AS(plan_dataset({0, 1, 0, 0.0}), Error);

  DatasetConfig cfg{10000, 7, 0, 0.0};
  auto items = plan_dataset(cfg);
  auto again = plan_dataset(cfg);
  REQUIRE(items.size() == 10000);
  CHECK(items[0].spec.id.skin_hue == again[0].spec.id.skin_hue);
  CHECK(items[9999].render_seed == again[9999].render_seed);

  std::map<int, int> counts;
  for (auto& it : items) counts[it.identity_class]++;
  CHECK(counts.size() >= 100);
  for (auto& [cls, n] : counts) CHECK(n >= 20);

  // same identity appears with different expressions
  std::map<int, std::set<float>> curves;
  for (auto& it : items) curves[it.identity_class].insert(it.spec.expr.mouth_curve);
  CHECK(curves.begin()->second.size() >= 2);

  // identity parameters identical within a class
  std::map<int, FaceIdentity> first;
  for (auto& it : items) {
    auto found = first.find(it.identity_class);
    if (found == first.end()) {
      first.emplace(it.identity_class, it.spec.id);
    } else {
      CHECK(found->second.skin_hue == it.spec.id.skin_hue);
      CHECK(found->second.brow == it.spec.id.brow);
    }
  }
}

TEST_CASE("dataset save/load round trip") {
  namespace fs = std::filesystem;
  std::string dir = (fs::temp_directory_path() / "dswp_ds_test").string();
  fs::remove_all(dir);
  DatasetConfig cfg{12, 5, 4, 0.25};
  save_dataset(dir, cfg);

  auto faces = load_dataset(dir);
  auto items = plan_dataset(cfg);
  REQUIRE(faces.size() == 12);
  for (size_t i = 0; i < faces.size(); ++i) {
    CHECK(faces[i].identity_class == items[i].identity_class);
    CHECK(faces[i].spec.id.skin_hue == doctest::Approx(items[i].spec.id.skin_hue));
    CHECK(faces[i].spec.yaw_deg == doctest::Approx(items[i].spec.yaw_deg));
    RenderedFace rf = render(items[i].spec, items[i].render_seed);
    // PNG quantization bounds the image error; labels and mask are exact
    CHECK(max_abs_diff(faces[i].image, rf.image) <= 0.5f / 255.0f + 1e-6f);
    CHECK(faces[i].labels.labels == rf.labels.labels);
    CHECK(faces[i].mask.vec() == rf.mask.vec());
  }
  CHECK(load_dataset(dir, 5).size() == 5);
  fs::remove_all(dir);
  CHECK_THROWS_AS(load_dataset(dir), Error);
}

TEST_CASE("oracle recovers rendered parameters within 5% of range") {
  Philox rng(26);
  for (int trial = 0; trial < 3; ++trial) {
    FaceSpec truth = sample_spec(rng);
    RenderedFace f = render(truth, 1234 + trial);
    OracleFit fit = oracle_estimate(f.image);
    CHECK_FALSE(fit.low_confidence);
    for (int p = 0; p < 10; ++p) {
      float range = kRangeHi[p] - kRangeLo[p];
      float err = std::abs(param_of(fit.spec, p) - param_of(truth, p)) / range;
      CHECK_MESSAGE(err < 0.05f, "param ", p, " trial ", trial, " err ", err);
    }
  }
}

TEST_CASE("oracle tolerates small noise and flags off-manifold inputs") {
  Philox rng(27);
  FaceSpec truth = sample_spec(rng);
  RenderedFace f = render(truth, 77);
  std::vector<float> noisy = f.image.vec();
  Philox nrng(0xabcd);
  for (float& v : noisy) v += 0.02f * nrng.normal();
  OracleFit fit = oracle_estimate(Tensor::from(f.image.shape(), std::move(noisy)));
  for (int p = 0; p < 10; ++p) {
    float range = kRangeHi[p] - kRangeLo[p];
    CHECK(std::abs(param_of(fit.spec, p) - param_of(truth, p)) / range < 0.10f);
  }

  OracleFit black = oracle_estimate(Tensor::zeros({3, kImageSize, kImageSize}));
  CHECK(black.low_confidence);
}

TEST_CASE("oracle identity similarity and metric identities") {
  FaceIdentity a{0.9f, 0.8f, 0.1f, 0.7f, 0.2f, 0.6f};
  CHECK(oracle_identity_similarity(a, a) == doctest::Approx(1.0));
  FaceIdentity opposite{1 - a.skin_hue, 1 - a.skin_sat, 1 - a.eye_color,
                        1 - a.aspect,   1 - a.nose_len, 1 - a.brow};
  CHECK(oracle_identity_similarity(a, opposite) == doctest::Approx(-1.0));

  Philox rng(28);
  FaceSpec src = sample_spec(rng), targ = sample_spec(rng);
  RenderedFace fs_ = render(src, 1), ft = render(targ, 2);
  IdentityEmbedder emb(8, 99);  // untrained is fine for the identities below

  MetricBundle self = evaluate(fs_.image, fs_.image, ft.image, emb);
  CHECK(self.id_similarity == doctest::Approx(1.0).epsilon(1e-4));

  MetricBundle t2t = evaluate(ft.image, fs_.image, ft.image, emb);
  CHECK(t2t.pose_error < 1e-3);
  CHECK(t2t.expression_error < 1e-3);
}
