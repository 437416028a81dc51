#include "dswp/facegen.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "dswp/nets.hpp"
#include "dswp/rng.hpp"

namespace dswp {

namespace {

constexpr int kN = kImageSize;
constexpr float kAA = 1.2f / kN;  // anti-aliasing half-width, canvas units

struct Rgb {
  float r, g, b;
};

Rgb hsv(float h_deg, float s, float v) {
  float h = h_deg / 60.0f;
  h -= 6.0f * std::floor(h / 6.0f);
  int i = static_cast<int>(h) % 6;
  float f = h - std::floor(h);
  float p = v * (1 - s), q = v * (1 - f * s), t = v * (1 - (1 - f) * s);
  switch (i) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

inline float smoothstep01(float e0, float e1, float x) {
  float t = std::min(1.0f, std::max(0.0f, (x - e0) / (e1 - e0)));
  return t * t * (3.0f - 2.0f * t);
}

/// Coverage of the region {sdf <= 0} with fixed AA band.
inline float cov(float sdf) { return smoothstep01(kAA, -kAA, sdf); }

inline float ellipse_sdf(float u, float v, float cx, float cy, float rx, float ry) {
  float dx = (u - cx) / rx, dy = (v - cy) / ry;
  return (std::sqrt(dx * dx + dy * dy) - 1.0f) * std::min(rx, ry);
}

inline float capsule_sdf(float u, float v, float x0, float y0, float x1, float y1, float r) {
  float px = u - x0, py = v - y0, dx = x1 - x0, dy = y1 - y0;
  float hh = std::min(1.0f, std::max(0.0f, (px * dx + py * dy) / (dx * dx + dy * dy)));
  float qx = px - dx * hh, qy = py - dy * hh;
  return std::sqrt(qx * qx + qy * qy) - r;
}

inline void blend(Rgb& dst, const Rgb& src, float a) {
  dst.r += (src.r - dst.r) * a;
  dst.g += (src.g - dst.g) * a;
  dst.b += (src.b - dst.b) * a;
}

/// Geometry derived from a spec; all feature positions live in [0,1]^2 canvas
/// coordinates anchored to the head ellipse.
struct FaceGeometry {
  float cx = 0.5f, cy = 0.52f;
  float rx = 0.30f, ry;
  float shift, squeeze;  // yaw as horizontal offset + symmetric squeeze
  float eye_v, eye_du = 0.13f, eye_rx = 0.055f, eye_ry;
  float iris_r = 0.030f, pupil_r = 0.013f;
  float brow_v, brow_half = 0.058f, brow_r;
  float nose_v0 = 0.475f, nose_v1, nose_w0 = 0.010f, nose_w1 = 0.024f;
  float mouth_v, mouth_rx = 0.095f, curve_amp = 0.035f;

  explicit FaceGeometry(const FaceSpec& s) {
    ry = 0.30f + 0.12f * s.id.aspect;
    float yn = s.yaw_deg / 30.0f;
    shift = 0.09f * yn;
    squeeze = 1.0f - 0.20f * yn * yn;
    eye_v = cy - 0.32f * ry;
    eye_ry = 0.014f + 0.040f * s.expr.eye_open;
    brow_v = eye_v - 0.085f;
    brow_r = (0.010f + 0.022f * s.id.brow) * 0.5f;
    nose_v1 = nose_v0 + 0.045f + 0.080f * s.id.nose_len;
    mouth_v = cy + 0.065f + 0.38f * ry;
  }

  float fx(float u) const { return cx + shift + (u - cx) * squeeze; }
};

struct PixelClassCov {
  float head, eye, iris, pupil, brow, nose, lip, gap;
};

PixelClassCov coverage_at(const FaceGeometry& g, const FaceSpec& s, float u, float v) {
  PixelClassCov c{};
  c.head = cov(ellipse_sdf(u, v, g.cx, g.cy, g.rx, g.ry));

  float el = g.fx(g.cx - g.eye_du), er = g.fx(g.cx + g.eye_du);
  float sl = ellipse_sdf(u, v, el, g.eye_v, g.eye_rx, g.eye_ry);
  float sr = ellipse_sdf(u, v, er, g.eye_v, g.eye_rx, g.eye_ry);
  float eye_sdf = std::min(sl, sr);
  c.eye = cov(eye_sdf);
  float ex = sl < sr ? el : er;
  float iris = cov(ellipse_sdf(u, v, ex, g.eye_v, g.iris_r, g.iris_r));
  float pupil = cov(ellipse_sdf(u, v, ex, g.eye_v, g.pupil_r, g.pupil_r));
  c.iris = std::min(iris, c.eye);
  c.pupil = std::min(pupil, c.eye);

  float bl = cov(capsule_sdf(u, v, el - g.brow_half, g.brow_v, el + g.brow_half, g.brow_v, g.brow_r));
  float br = cov(capsule_sdf(u, v, er - g.brow_half, g.brow_v, er + g.brow_half, g.brow_v, g.brow_r));
  c.brow = std::max(bl, br);

  float nx = g.fx(g.cx);
  float tn = std::min(1.0f, std::max(0.0f, (v - g.nose_v0) / (g.nose_v1 - g.nose_v0)));
  float nw = g.nose_w0 + (g.nose_w1 - g.nose_w0) * tn;
  float nose_h = cov(std::abs(u - nx) - nw);
  float nose_v = smoothstep01(g.nose_v0 - kAA, g.nose_v0 + kAA, v) *
                 smoothstep01(g.nose_v1 + kAA, g.nose_v1 - kAA, v);
  c.nose = nose_h * nose_v;

  float mx = g.fx(g.cx);
  float q = (u - mx) / g.mouth_rx;
  float q2 = std::min(1.0f, q * q);
  float vc = g.mouth_v - s.expr.mouth_curve * g.curve_amp * (2.0f * q2 - 1.0f);
  float gap_h = 0.024f * s.expr.mouth_open * (1.0f - q2);
  float lip_h = gap_h + 0.016f;
  float horiz = cov(std::abs(q) * g.mouth_rx - g.mouth_rx);  // |q| <= 1, AA in canvas units
  c.lip = cov(std::abs(v - vc) - lip_h) * horiz;
  c.gap = cov(std::abs(v - vc) - gap_h) * horiz;
  return c;
}

struct FaceColors {
  Rgb skin, nose, iris, brow, lips, gap, sclera, pupil;
};

FaceColors colors_of(const FaceSpec& s) {
  FaceColors c;
  c.skin = hsv(15.0f + 30.0f * s.id.skin_hue, 0.18f + 0.42f * s.id.skin_sat, 0.92f);
  c.nose = hsv(15.0f + 30.0f * s.id.skin_hue, 0.18f + 0.42f * s.id.skin_sat, 0.78f);
  c.iris = hsv(210.0f - 170.0f * s.id.eye_color, 0.60f, 0.55f);
  c.brow = hsv(25.0f, 0.55f, 0.25f);
  c.lips = hsv(2.0f, 0.55f, 0.78f);
  c.gap = hsv(0.0f, 0.60f, 0.16f);
  c.sclera = {0.96f, 0.96f, 0.94f};
  c.pupil = {0.05f, 0.04f, 0.04f};
  return c;
}

std::array<float, 3> tint_from_seed(uint64_t seed) {
  Philox rng(seed, 0xb6u);
  std::array<float, 3> t{};
  for (float& v : t) v = static_cast<float>((rng.uniform() - 0.5) * 0.08);
  return t;
}

void render_pixels(const FaceSpec& spec, const std::array<float, 3>& tint, float* img,
                   uint8_t* labels) {
  FaceGeometry g(spec);
  FaceColors col = colors_of(spec);
  const int hw = kN * kN;
  for (int y = 0; y < kN; ++y) {
    float v = (y + 0.5f) / kN;
    float grad = 1.0f - 0.18f * v;
    for (int x = 0; x < kN; ++x) {
      float u = (x + 0.5f) / kN;
      Rgb px = {(0.50f + tint[0]) * grad, (0.55f + tint[1]) * grad, (0.66f + tint[2]) * grad};
      PixelClassCov c = coverage_at(g, spec, u, v);
      blend(px, col.skin, c.head);
      blend(px, col.nose, c.nose);
      blend(px, col.brow, c.brow);
      blend(px, col.sclera, c.eye);
      blend(px, col.iris, c.iris);
      blend(px, col.pupil, c.pupil);
      blend(px, col.lips, c.lip);
      blend(px, col.gap, c.gap);

      if (spec.occluder == OccluderKind::Bar) {
        float od = std::abs(v - spec.occ_y) - 0.035f;
        blend(px, {0.20f, 0.20f, 0.22f}, cov(od));
      } else if (spec.occluder == OccluderKind::Patch) {
        float od = std::max(std::abs(u - spec.occ_x), std::abs(v - spec.occ_y)) - 0.09f;
        blend(px, {0.20f, 0.20f, 0.22f}, cov(od));
      }

      int i = y * kN + x;
      img[0 * hw + i] = px.r;
      img[1 * hw + i] = px.g;
      img[2 * hw + i] = px.b;

      // Exclusive labels by priority; occluders do not change labels (the
      // mask marks the face region including occluded pixels).
      uint8_t lab = 0;
      if (c.lip >= 0.5f) lab = 5;
      else if (c.nose >= 0.5f) lab = 4;
      else if (c.brow >= 0.5f) lab = 3;
      else if (c.eye >= 0.5f) lab = 2;
      else if (c.head >= 0.5f) lab = 1;
      labels[i] = lab;
    }
  }
}

constexpr int kNumOracleParams = 10;

struct ParamRange {
  float lo, hi;
};
constexpr ParamRange kParamRange[kNumOracleParams] = {
    {0, 1},     // aspect
    {-30, 30},  // yaw
    {0, 1},     // skin_hue
    {0, 1},     // skin_sat
    {0, 1},     // brow
    {0, 1},     // nose_len
    {0, 1},     // eye_open
    {0, 1},     // eye_color
    {-1, 1},    // mouth_curve
    {0, 1},     // mouth_open
};

float get_param(const FaceSpec& s, int i) {
  switch (i) {
    case 0: return s.id.aspect;
    case 1: return s.yaw_deg;
    case 2: return s.id.skin_hue;
    case 3: return s.id.skin_sat;
    case 4: return s.id.brow;
    case 5: return s.id.nose_len;
    case 6: return s.expr.eye_open;
    case 7: return s.id.eye_color;
    case 8: return s.expr.mouth_curve;
    default: return s.expr.mouth_open;
  }
}

void set_param(FaceSpec& s, int i, float v) {
  switch (i) {
    case 0: s.id.aspect = v; break;
    case 1: s.yaw_deg = v; break;
    case 2: s.id.skin_hue = v; break;
    case 3: s.id.skin_sat = v; break;
    case 4: s.id.brow = v; break;
    case 5: s.id.nose_len = v; break;
    case 6: s.expr.eye_open = v; break;
    case 7: s.id.eye_color = v; break;
    case 8: s.expr.mouth_curve = v; break;
    default: s.expr.mouth_open = v; break;
  }
}

double fit_mse(const FaceSpec& s, const std::array<float, 3>& tint, const float* target) {
  std::vector<float> img(3 * kN * kN);
  std::vector<uint8_t> labels(kN * kN);
  render_pixels(s, tint, img.data(), labels.data());
  double acc = 0.0;
  for (size_t i = 0; i < img.size(); ++i) {
    double d = double(img[i]) - target[i];
    acc += d * d;
  }
  return acc / double(img.size());
}

constexpr double kOracleResidualThreshold = 0.01;

void check01(float v, const char* name) {
  require(v >= 0.0f && v <= 1.0f, "face spec: ", name, " = ", v, " outside [0,1]");
}

}  // namespace

void FaceSpec::validate() const {
  check01(id.skin_hue, "skin_hue");
  check01(id.skin_sat, "skin_sat");
  check01(id.eye_color, "eye_color");
  check01(id.aspect, "aspect");
  check01(id.nose_len, "nose_len");
  check01(id.brow, "brow");
  require(expr.mouth_curve >= -1.0f && expr.mouth_curve <= 1.0f,
          "face spec: mouth_curve = ", expr.mouth_curve, " outside [-1,1]");
  check01(expr.mouth_open, "mouth_open");
  check01(expr.eye_open, "eye_open");
  require(yaw_deg >= -30.0f && yaw_deg <= 30.0f, "face spec: yaw_deg = ", yaw_deg,
          " outside [-30,30]");
  if (occluder != OccluderKind::None) {
    check01(occ_x, "occ_x");
    check01(occ_y, "occ_y");
  }
}

RenderedFace render(const FaceSpec& spec, uint64_t seed) {
  spec.validate();
  RenderedFace out;
  std::vector<float> img(static_cast<size_t>(3) * kN * kN);
  out.labels.h = kN;
  out.labels.w = kN;
  out.labels.labels.resize(static_cast<size_t>(kN) * kN);
  render_pixels(spec, tint_from_seed(seed), img.data(), out.labels.labels.data());
  out.image = Tensor::from({3, kN, kN}, std::move(img));
  std::vector<float> m(static_cast<size_t>(kN) * kN);
  for (size_t i = 0; i < m.size(); ++i) m[i] = out.labels.labels[i] != 0 ? 1.0f : 0.0f;
  out.mask = Tensor::from({1, kN, kN}, std::move(m));
  out.spec = spec;
  return out;
}

const std::vector<Rgb8>& seg_palette() {
  static const std::vector<Rgb8> palette = {
      {0, 0, 0},        // background
      {224, 172, 105},  // skin
      {255, 255, 255},  // eyes
      {101, 67, 33},    // brows
      {255, 128, 0},    // nose
      {220, 20, 60},    // mouth
  };
  return palette;
}

// ---- dataset ---------------------------------------------------------------------

int derive_identity_count(int n) {
  int base = n / 50;
  int lo = std::min(n, 100);
  return std::max(lo, std::min(base, 400));
}

std::vector<DatasetItem> plan_dataset(const DatasetConfig& cfg) {
  require(cfg.n >= 1, "dataset: n must be >= 1, got ", cfg.n);
  require(cfg.occluder_frac >= 0.0 && cfg.occluder_frac <= 1.0,
          "dataset: occluder_frac must be in [0,1], got ", cfg.occluder_frac);
  int n_id = cfg.identities > 0 ? cfg.identities : derive_identity_count(cfg.n);
  require(n_id <= 729, "dataset: identity grid supports at most 729 classes, got ", n_id);

  // 3 grid levels per identity dimension; per-class jitter keeps classes
  // separated by at least 1/3 - 2*0.1 of a range.
  constexpr int kLevels = 3;
  std::vector<FaceIdentity> ids(n_id);
  for (int i = 0; i < n_id; ++i) {
    Philox rng(Philox::derive_seed(cfg.seed, 0x1D000000ull + i));
    int rem = i;
    float p[6];
    for (int d = 0; d < 6; ++d) {
      int digit = rem % kLevels;
      rem /= kLevels;
      float base = (digit + 0.5f) / kLevels;
      float jit = static_cast<float>((rng.uniform() - 0.5) * (0.6 / kLevels));
      p[d] = std::min(0.98f, std::max(0.02f, base + jit));
    }
    ids[i] = {p[0], p[1], p[2], p[3], p[4], p[5]};
  }

  std::vector<DatasetItem> items(cfg.n);
  for (int j = 0; j < cfg.n; ++j) {
    Philox rng(Philox::derive_seed(cfg.seed, 0x2E000000ull + j));
    DatasetItem& it = items[j];
    it.identity_class = j % n_id;
    it.spec.id = ids[it.identity_class];
    it.spec.expr.mouth_curve = static_cast<float>(rng.uniform() * 2.0 - 1.0);
    it.spec.expr.mouth_open = static_cast<float>(rng.uniform());
    // eye_open below 0.2 hides the iris, making eye color unrecoverable for
    // the oracle, so the dataset stays above it.
    it.spec.expr.eye_open = static_cast<float>(0.2 + 0.8 * rng.uniform());
    it.spec.yaw_deg = static_cast<float>(rng.uniform() * 60.0 - 30.0);
    if (rng.uniform() < cfg.occluder_frac) {
      it.spec.occluder = rng.uniform() < 0.5 ? OccluderKind::Bar : OccluderKind::Patch;
      it.spec.occ_x = static_cast<float>(0.25 + 0.5 * rng.uniform());
      it.spec.occ_y = static_cast<float>(0.30 + 0.4 * rng.uniform());
    }
    it.render_seed = Philox::derive_seed(cfg.seed, 0x3F000000ull + j);
  }
  return items;
}

DatasetPaths dataset_paths(const std::string& dir, int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%06d.png", index);
  return {dir + "/images/face_" + buf, dir + "/masks/mask_" + buf, dir + "/seg/seg_" + buf};
}

namespace {
const char* occluder_name(OccluderKind k) {
  switch (k) {
    case OccluderKind::Bar: return "bar";
    case OccluderKind::Patch: return "patch";
    default: return "none";
  }
}

OccluderKind occluder_from_name(const std::string& s) {
  if (s == "bar") return OccluderKind::Bar;
  if (s == "patch") return OccluderKind::Patch;
  require(s == "none", "manifest: unknown occluder kind '", s, "'");
  return OccluderKind::None;
}
}  // namespace

std::string save_dataset(const std::string& dir, const DatasetConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(dir + "/images");
  fs::create_directories(dir + "/masks");
  fs::create_directories(dir + "/seg");
  auto items = plan_dataset(cfg);
  std::string manifest_path = dir + "/manifest.csv";
  std::ofstream mf(manifest_path);
  require(mf.good(), "dataset: cannot write ", manifest_path);
  mf << "filename,identity_class,skin_hue,skin_sat,eye_color,aspect,nose_len,brow,"
        "mouth_curve,mouth_open,eye_open,yaw_deg,occluder,occ_x,occ_y,render_seed\n";
  char line[512];
  for (size_t j = 0; j < items.size(); ++j) {
    const DatasetItem& it = items[j];
    RenderedFace rf = render(it.spec, it.render_seed);
    DatasetPaths paths = dataset_paths(dir, static_cast<int>(j));
    save_png_rgb(paths.image, rf.image);
    save_png_mask(paths.mask, rf.mask);
    save_png_indexed(paths.seg, rf.labels, seg_palette());
    const FaceSpec& s = it.spec;
    std::snprintf(line, sizeof(line),
                  "%s,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g,%s,%.9g,%.9g,%llu\n",
                  paths.image.substr(dir.size() + 1).c_str(), it.identity_class, s.id.skin_hue,
                  s.id.skin_sat, s.id.eye_color, s.id.aspect, s.id.nose_len, s.id.brow,
                  s.expr.mouth_curve, s.expr.mouth_open, s.expr.eye_open, s.yaw_deg,
                  occluder_name(s.occluder), s.occ_x, s.occ_y,
                  static_cast<unsigned long long>(it.render_seed));
    mf << line;
  }
  mf.flush();
  require(mf.good(), "dataset: write failed for ", manifest_path);
  return manifest_path;
}

std::vector<LoadedFace> load_dataset(const std::string& dir, int limit) {
  std::ifstream mf(dir + "/manifest.csv");
  require(mf.good(), "dataset: cannot open ", dir, "/manifest.csv");
  std::string header;
  std::getline(mf, header);
  std::vector<LoadedFace> out;
  std::string line;
  int index = 0;
  while (std::getline(mf, line)) {
    if (line.empty()) continue;
    if (limit > 0 && static_cast<int>(out.size()) >= limit) break;
    std::vector<std::string> cell;
    size_t pos = 0;
    while (pos <= line.size()) {
      size_t c = line.find(',', pos);
      if (c == std::string::npos) c = line.size();
      cell.push_back(line.substr(pos, c - pos));
      pos = c + 1;
    }
    require(cell.size() == 16, "manifest: row ", index, " has ", cell.size(),
            " fields, expected 16");
    LoadedFace f;
    f.identity_class = std::stoi(cell[1]);
    FaceSpec& s = f.spec;
    s.id.skin_hue = std::stof(cell[2]);
    s.id.skin_sat = std::stof(cell[3]);
    s.id.eye_color = std::stof(cell[4]);
    s.id.aspect = std::stof(cell[5]);
    s.id.nose_len = std::stof(cell[6]);
    s.id.brow = std::stof(cell[7]);
    s.expr.mouth_curve = std::stof(cell[8]);
    s.expr.mouth_open = std::stof(cell[9]);
    s.expr.eye_open = std::stof(cell[10]);
    s.yaw_deg = std::stof(cell[11]);
    s.occluder = occluder_from_name(cell[12]);
    s.occ_x = std::stof(cell[13]);
    s.occ_y = std::stof(cell[14]);
    DatasetPaths paths = dataset_paths(dir, index);
    f.image = load_png_rgb(paths.image);
    f.mask = load_png_mask(paths.mask);
    f.labels = load_png_indexed(paths.seg, seg_palette());
    out.push_back(std::move(f));
    ++index;
  }
  require(!out.empty(), "dataset: ", dir, " has no rows");
  return out;
}

// ---- oracle ----------------------------------------------------------------------

OracleFit oracle_estimate(const Tensor& image) {
  require(image.shape() == Shape({3, kN, kN}), "oracle: image must be [3,", kN, ",", kN,
          "], got ", shape_str(image.shape()));
  const float* target = image.data();

  OracleFit fit;
  fit.spec = FaceSpec{};  // mid-range start
  double best = fit_mse(fit.spec, fit.bg_tint, target);

  constexpr int kGrid = 16;
  constexpr double kPassWidth[3] = {1.0, 0.25, 0.0625};
  for (int pass = 0; pass < 3; ++pass) {
    for (int sweep = 0; sweep < 2; ++sweep) {
      // Background tint channels, then spec parameters.
      for (int tc = 0; tc < 3; ++tc) {
        float center = fit.bg_tint[tc];
        float half = static_cast<float>(0.08 * kPassWidth[pass] * 0.5);
        for (int gi = 0; gi < kGrid; ++gi) {
          float v = center - half + 2 * half * (gi / float(kGrid - 1));
          v = std::min(0.08f, std::max(-0.08f, v));
          auto tint = fit.bg_tint;
          tint[tc] = v;
          double m = fit_mse(fit.spec, tint, target);
          if (m < best) {
            best = m;
            fit.bg_tint = tint;
          }
        }
      }
      for (int p = 0; p < kNumOracleParams; ++p) {
        float lo = kParamRange[p].lo, hi = kParamRange[p].hi;
        float center = get_param(fit.spec, p);
        float half = static_cast<float>((hi - lo) * kPassWidth[pass] * 0.5);
        float a = std::max(lo, center - half), b = std::min(hi, center + half);
        for (int gi = 0; gi < kGrid; ++gi) {
          float v = a + (b - a) * (gi / float(kGrid - 1));
          FaceSpec cand = fit.spec;
          set_param(cand, p, v);
          double m = fit_mse(cand, fit.bg_tint, target);
          if (m < best) {
            best = m;
            fit.spec = cand;
          }
        }
      }
    }
  }
  fit.residual = best;
  fit.low_confidence = best > kOracleResidualThreshold;
  return fit;
}

double oracle_identity_similarity(const FaceIdentity& a, const FaceIdentity& b) {
  const float pa[6] = {a.skin_hue, a.skin_sat, a.eye_color, a.aspect, a.nose_len, a.brow};
  const float pb[6] = {b.skin_hue, b.skin_sat, b.eye_color, b.aspect, b.nose_len, b.brow};
  double sab = 0, saa = 0, sbb = 0;
  for (int i = 0; i < 6; ++i) {
    double va = 2.0 * pa[i] - 1.0, vb = 2.0 * pb[i] - 1.0;
    sab += va * vb;
    saa += va * va;
    sbb += vb * vb;
  }
  if (saa < 1e-18 || sbb < 1e-18) return 0.0;
  return sab / (std::sqrt(saa) * std::sqrt(sbb));
}

double pose_error_between(const FaceSpec& a, const FaceSpec& b) {
  return std::abs(double(a.yaw_deg) - b.yaw_deg) / 30.0;
}

double expression_error_between(const FaceSpec& a, const FaceSpec& b) {
  double dc = double(a.expr.mouth_curve) - b.expr.mouth_curve;
  double dm = double(a.expr.mouth_open) - b.expr.mouth_open;
  double de = double(a.expr.eye_open) - b.expr.eye_open;
  return std::sqrt(dc * dc + dm * dm + de * de);
}

// ---- metrics ----------------------------------------------------------------------

SwapEvaluation evaluate_with_fits(const Tensor& x_swapped, const OracleFit& fit_src,
                                  const OracleFit& fit_targ, const Tensor& x_src,
                                  const IdentityEmbedder& embedder) {
  SwapEvaluation ev;
  ev.fit_swapped = oracle_estimate(x_swapped);
  {
    NoGradGuard ng;
    Tensor e_sw = embedder.embed(x_swapped);
    Tensor e_src = embedder.embed(x_src);
    ev.metrics.id_similarity = cosine(e_sw, e_src).item();
  }
  ev.metrics.pose_error = pose_error_between(ev.fit_swapped.spec, fit_targ.spec);
  ev.metrics.expression_error = expression_error_between(ev.fit_swapped.spec, fit_targ.spec);
  ev.oracle_id_to_src = oracle_identity_similarity(ev.fit_swapped.spec.id, fit_src.spec.id);
  ev.oracle_id_to_targ = oracle_identity_similarity(ev.fit_swapped.spec.id, fit_targ.spec.id);
  return ev;
}

SwapEvaluation evaluate_full(const Tensor& x_swapped, const Tensor& x_src, const Tensor& x_targ,
                             const IdentityEmbedder& embedder) {
  OracleFit fit_src = oracle_estimate(x_src);
  OracleFit fit_targ = oracle_estimate(x_targ);
  return evaluate_with_fits(x_swapped, fit_src, fit_targ, x_src, embedder);
}

MetricBundle evaluate(const Tensor& x_swapped, const Tensor& x_src, const Tensor& x_targ,
                      const IdentityEmbedder& embedder) {
  return evaluate_full(x_swapped, x_src, x_targ, embedder).metrics;
}

}  // namespace dswp
