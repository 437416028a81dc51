#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "dswp/image.hpp"
#include "dswp/tensor.hpp"

namespace dswp {

class IdentityEmbedder;

constexpr int kImageSize = 64;
constexpr int kLatentSize = 16;
constexpr int kLatentChannels = 4;
constexpr int kNumSegClasses = 6;  // background, skin, eyes, brows, nose, mouth

/// Who: color and geometry parameters, each normalized to [0,1].
struct FaceIdentity {
  float skin_hue = 0.5f;
  float skin_sat = 0.5f;
  float eye_color = 0.5f;
  float aspect = 0.5f;    // head height
  float nose_len = 0.5f;
  float brow = 0.5f;      // brow thickness
};

/// How: expression and pose.
struct FaceExpression {
  float mouth_curve = 0.0f;  // [-1,1], +1 smile
  float mouth_open = 0.0f;   // [0,1]
  float eye_open = 0.7f;     // [0,1]
};

enum class OccluderKind { None, Bar, Patch };

struct FaceSpec {
  FaceIdentity id;
  FaceExpression expr;
  float yaw_deg = 0.0f;  // [-30,30], rendered as horizontal feature shear
  OccluderKind occluder = OccluderKind::None;
  float occ_x = 0.5f, occ_y = 0.5f;  // patch center / bar height, normalized

  void validate() const;
};

struct RenderedFace {
  Tensor image;            // [3,64,64] in [0,1]
  Tensor mask;             // [1,64,64] binary face region (occluder-invariant)
  LabelMap labels;         // per-pixel class ids
  FaceSpec spec;
};

/// Deterministic given (spec, seed); seed only perturbs the background tint.
/// Smooth parameter dependence comes from signed-distance rasterization with
/// a fixed anti-aliasing width.
RenderedFace render(const FaceSpec& spec, uint64_t seed);

const std::vector<Rgb8>& seg_palette();

// ---- dataset -----------------------------------------------------------------

struct DatasetConfig {
  int n = 10000;
  uint64_t seed = 7;
  int identities = 0;          // 0 = derived from n
  double occluder_frac = 0.0;  // fraction of renders with an occluder
};

struct DatasetItem {
  FaceSpec spec;
  int identity_class = 0;
  uint64_t render_seed = 0;
};

int derive_identity_count(int n);
/// Identity classes sit on a jittered 5-D grid so the same class re-renders
/// with many expressions; expressions and pose are drawn per item.
std::vector<DatasetItem> plan_dataset(const DatasetConfig& cfg);

struct DatasetPaths {
  std::string image, mask, seg;
};
DatasetPaths dataset_paths(const std::string& dir, int index);

/// Renders every planned item to dir/{images,masks,seg} and writes
/// dir/manifest.csv; returns the manifest path.
std::string save_dataset(const std::string& dir, const DatasetConfig& cfg);

struct LoadedFace {
  Tensor image;
  Tensor mask;
  LabelMap labels;
  FaceSpec spec;
  int identity_class = 0;
};
std::vector<LoadedFace> load_dataset(const std::string& dir, int limit = 0);

// ---- analysis-by-synthesis oracle ---------------------------------------------

struct OracleFit {
  FaceSpec spec;
  std::array<float, 3> bg_tint{0, 0, 0};
  double residual = 0.0;
  bool low_confidence = false;
};

/// Inverts render() by coordinate-descent grid search (16 samples per scan,
/// full range first, twice refined). Independent of every trained network.
OracleFit oracle_estimate(const Tensor& image);

/// Cosine similarity of identity parameters mapped to [-1,1]; the
/// trusted-instrument identity score used by the ablation gates.
double oracle_identity_similarity(const FaceIdentity& a, const FaceIdentity& b);

double pose_error_between(const FaceSpec& a, const FaceSpec& b);
double expression_error_between(const FaceSpec& a, const FaceSpec& b);

// ---- metrics -------------------------------------------------------------------

struct MetricBundle {
  double id_similarity = 0.0;     // embedder cosine to source, [-1,1]
  double pose_error = 0.0;        // |yaw_sw - yaw_tg| / 30
  double expression_error = 0.0;  // L2 over (curve, open, eye_open)
};

struct SwapEvaluation {
  MetricBundle metrics;
  OracleFit fit_swapped;
  double oracle_id_to_src = 0.0;
  double oracle_id_to_targ = 0.0;
};

/// ID similarity uses the trained embedder (the paper-style instrument);
/// pose/expression come from the oracle fits.
MetricBundle evaluate(const Tensor& x_swapped, const Tensor& x_src, const Tensor& x_targ,
                      const IdentityEmbedder& embedder);
SwapEvaluation evaluate_full(const Tensor& x_swapped, const Tensor& x_src, const Tensor& x_targ,
                             const IdentityEmbedder& embedder);
/// As above but reuses precomputed oracle fits for source/target.
SwapEvaluation evaluate_with_fits(const Tensor& x_swapped, const OracleFit& fit_src,
                                  const OracleFit& fit_targ, const Tensor& x_src,
                                  const IdentityEmbedder& embedder);

}  // namespace dswp
