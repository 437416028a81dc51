#include "dswp/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

namespace dswp {

void Adam::step(ParamMap& params) {
  if (m_.empty()) {
    m_.resize(params.items.size());
    v_.resize(params.items.size());
    for (size_t i = 0; i < params.items.size(); ++i) {
      size_t n = params.items[i].second->vec().size();
      m_[i].assign(n, 0.0f);
      v_[i].assign(n, 0.0f);
    }
  }
  require(m_.size() == params.items.size(), "adam: parameter count changed between steps");
  ++t_;
  double bc1 = 1.0 - std::pow(beta1, t_);
  double bc2 = 1.0 - std::pow(beta2, t_);
  for (size_t i = 0; i < params.items.size(); ++i) {
    Tensor* p = params.items[i].second;
    if (!p->has_grad()) continue;  // parameter unused this step
    const std::vector<float>& g = p->impl->grad;
    std::vector<float> nd = p->vec();
    for (size_t j = 0; j < nd.size(); ++j) {
      m_[i][j] = static_cast<float>(beta1 * m_[i][j] + (1.0 - beta1) * g[j]);
      v_[i][j] = static_cast<float>(beta2 * v_[i][j] + (1.0 - beta2) * double(g[j]) * g[j]);
      double mh = m_[i][j] / bc1;
      double vh = v_[i][j] / bc2;
      nd[j] = static_cast<float>(nd[j] - lr * mh / (std::sqrt(vh) + eps));
    }
    *p = Tensor::from(p->shape(), std::move(nd), true);
  }
}

void TrainReport::save_csv(const std::string& path) const {
  std::ofstream f(path);
  require(f.good(), "train: cannot write ", path);
  f << "step,loss\n";
  for (auto& [step, loss] : loss_history) f << step << "," << loss << "\n";
}

namespace {

std::vector<std::vector<float>> snapshot(const ParamMap& pm) {
  std::vector<std::vector<float>> snap;
  snap.reserve(pm.items.size());
  for (auto& [name, t] : pm.items) snap.push_back(t->vec());
  return snap;
}

void restore(ParamMap& pm, const std::vector<std::vector<float>>& snap) {
  for (size_t i = 0; i < pm.items.size(); ++i) {
    Tensor* t = pm.items[i].second;
    *t = Tensor::from(t->shape(), snap[i], true);
  }
}

/// Shared training-loop skeleton: batches are assembled from seeded draws,
/// per-sample losses (scaled by 1/batch) accumulate grads, Adam steps, and a
/// non-finite batch loss restores the last snapshot and raises.
template <typename SampleLoss>
TrainReport run_training(ParamMap params, const TrainParams& p, const char* what,
                         SampleLoss&& sample_loss) {
  params.set_requires_grad(true);
  Adam opt;
  opt.lr = p.lr;
  Philox rng(p.seed, 0x7124);
  TrainReport report;
  auto last_good = snapshot(params);
  constexpr int kSnapshotEvery = 50;

  for (int step = 1; step <= p.steps; ++step) {
    params.clear_grads();
    double batch_loss = 0.0;
    for (int b = 0; b < p.batch; ++b) {
      Tensor loss = mul_scalar(sample_loss(rng), 1.0 / p.batch);
      batch_loss += loss.item();
      backward(loss);
    }
    if (!std::isfinite(batch_loss)) {
      restore(params, last_good);
      report.diverged = true;
      throw DivergenceError(strcat_msg(what, ": loss diverged at step ", step,
                                       "; weights restored to step ", report.last_good_step));
    }
    opt.step(params);
    if (step == 1 || step % p.log_every == 0 || step == p.steps)
      report.loss_history.emplace_back(step, static_cast<float>(batch_loss));
    if (step % kSnapshotEvery == 0) {
      last_good = snapshot(params);
      report.last_good_step = step;
    }
  }
  params.set_requires_grad(false);
  return report;
}

}  // namespace

// ---- codec -------------------------------------------------------------------

TrainReport train_codec(LatentCodec& codec, const std::vector<LoadedFace>& train,
                        const std::vector<LoadedFace>& holdout, const TrainParams& p) {
  require(!train.empty(), "train_codec: empty training set");
  TrainReport rep = run_training(codec.params(), p, "codec", [&](Philox& rng) {
    const LoadedFace& f = train[static_cast<size_t>(rng.uniform() * train.size())];
    Tensor rec = codec.decode(codec.encode(f.image));
    return mul_scalar(sumsq(sub(rec, f.image)), 1.0 / f.image.numel());
  });
  rep.validation = codec_psnr(codec, holdout);
  return rep;
}

double codec_psnr(const LatentCodec& codec, const std::vector<LoadedFace>& faces) {
  require(!faces.empty(), "codec_psnr: empty set");
  NoGradGuard ng;
  double acc = 0.0;
  for (const LoadedFace& f : faces) {
    Tensor rec = hard_clamp01(codec.decode(codec.encode(f.image)));
    acc += mse(rec, f.image);
  }
  double m = acc / double(faces.size());
  return -10.0 * std::log10(std::max(m, 1e-12));
}

std::vector<Tensor> encode_dataset(const LatentCodec& codec,
                                   const std::vector<LoadedFace>& faces) {
  NoGradGuard ng;
  std::vector<Tensor> out;
  out.reserve(faces.size());
  for (const LoadedFace& f : faces) out.push_back(codec.encode(f.image));
  return out;
}

// ---- denoiser -----------------------------------------------------------------

TrainReport train_denoiser(Denoiser& den, const std::vector<Tensor>& latents_train,
                           const std::vector<Tensor>& latents_holdout, const NoiseSchedule& s,
                           const TrainParams& p) {
  require(!latents_train.empty(), "train_denoiser: empty training set");
  require(s.T <= den.max_timestep(), "train_denoiser: schedule T=", s.T,
          " exceeds denoiser range ", den.max_timestep());
  TrainReport rep = run_training(den.params(), p, "denoiser", [&](Philox& rng) {
    const Tensor& z0 = latents_train[static_cast<size_t>(rng.uniform() * latents_train.size())];
    int t = 1 + static_cast<int>(rng.uniform() * s.T);
    Tensor noise = Tensor::randn(z0.shape(), rng);
    Tensor z_t = forward_sample(s, z0, t, noise);
    Tensor pred = den.forward(z_t, t);
    return mul_scalar(sumsq(sub(pred, noise)), 1.0 / noise.numel());
  });
  rep.validation = denoiser_relative_mse(den, latents_holdout, s, p.seed ^ 0x9e3779b9ull);
  return rep;
}

double denoiser_relative_mse(const Denoiser& den, const std::vector<Tensor>& latents,
                             const NoiseSchedule& s, uint64_t seed) {
  require(!latents.empty(), "denoiser_relative_mse: empty set");
  NoGradGuard ng;
  Philox rng(seed, 0xE7A1);
  double pred_acc = 0.0, zero_acc = 0.0;
  int count = 0;
  for (const Tensor& z0 : latents) {
    for (int rep = 0; rep < 2; ++rep) {
      int t = 1 + static_cast<int>(rng.uniform() * s.T);
      Tensor noise = Tensor::randn(z0.shape(), rng);
      Tensor z_t = forward_sample(s, z0, t, noise);
      Tensor pred = den.forward(z_t, t);
      pred_acc += mse(pred, noise);
      zero_acc += mse(Tensor::zeros(noise.shape()), noise);
      ++count;
    }
  }
  return (pred_acc / count) / (zero_acc / count);
}

// ---- identity -----------------------------------------------------------------

TrainReport train_identity(IdentityEmbedder& emb, const std::vector<LoadedFace>& train,
                           const std::vector<LoadedFace>& holdout, const TrainParams& p) {
  require(!train.empty(), "train_identity: empty training set");
  for (const LoadedFace& f : train)
    require(f.identity_class < emb.n_classes(), "train_identity: class ", f.identity_class,
            " outside embedder head of ", emb.n_classes());
  TrainReport rep = run_training(emb.params(), p, "identity", [&](Philox& rng) {
    const LoadedFace& f = train[static_cast<size_t>(rng.uniform() * train.size())];
    return cross_entropy_logits(emb.logits(f.image), f.identity_class);
  });
  rep.validation = identity_margin(emb, holdout, p.seed ^ 0x51u);
  return rep;
}

double identity_margin(const IdentityEmbedder& emb, const std::vector<LoadedFace>& faces,
                       uint64_t seed) {
  require(faces.size() >= 4, "identity_margin: need at least 4 faces");
  NoGradGuard ng;
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < faces.size(); ++i) by_class[faces[i].identity_class].push_back(i);

  std::vector<Tensor> embs(faces.size());
  for (size_t i = 0; i < faces.size(); ++i) embs[i] = emb.embed(faces[i].image);

  Philox rng(seed, 0x3a61);
  double same_acc = 0.0, diff_acc = 0.0;
  int same_n = 0, diff_n = 0;
  constexpr int kPairs = 200;
  std::vector<int> classes;
  for (auto& [c, v] : by_class)
    if (v.size() >= 2) classes.push_back(c);
  require(!classes.empty(), "identity_margin: no class has two held-out renders");
  for (int k = 0; k < kPairs; ++k) {
    int c = classes[static_cast<size_t>(rng.uniform() * classes.size())];
    auto& v = by_class[c];
    size_t i = static_cast<size_t>(rng.uniform() * v.size());
    size_t j = static_cast<size_t>(rng.uniform() * v.size());
    if (i == j) j = (j + 1) % v.size();
    same_acc += cosine(embs[v[i]], embs[v[j]]).item();
    ++same_n;

    size_t a = static_cast<size_t>(rng.uniform() * faces.size());
    size_t b = static_cast<size_t>(rng.uniform() * faces.size());
    if (faces[a].identity_class != faces[b].identity_class) {
      diff_acc += cosine(embs[a], embs[b]).item();
      ++diff_n;
    }
  }
  require(diff_n > 0, "identity_margin: no different-identity pair sampled");
  return same_acc / same_n - diff_acc / diff_n;
}

// ---- segmenter -----------------------------------------------------------------

TrainReport train_segmenter(Segmenter& seg, const std::vector<LoadedFace>& train,
                            const std::vector<LoadedFace>& holdout, const TrainParams& p) {
  require(!train.empty(), "train_segmenter: empty training set");
  TrainReport rep = run_training(seg.params(), p, "segmenter", [&](Philox& rng) {
    const LoadedFace& f = train[static_cast<size_t>(rng.uniform() * train.size())];
    return seg_cross_entropy_logits(seg.logits(f.image), f.labels.labels);
  });
  rep.validation = segmenter_accuracy(seg, holdout);
  return rep;
}

double segmenter_accuracy(const Segmenter& seg, const std::vector<LoadedFace>& faces) {
  require(!faces.empty(), "segmenter_accuracy: empty set");
  NoGradGuard ng;
  int64_t correct = 0, total = 0;
  for (const LoadedFace& f : faces) {
    Tensor lg = seg.logits(f.image);
    int hw = kImageSize * kImageSize;
    const float* p = lg.data();
    for (int i = 0; i < hw; ++i) {
      int arg = 0;
      float best = p[i];
      for (int c = 1; c < kNumSegClasses; ++c)
        if (p[c * hw + i] > best) {
          best = p[c * hw + i];
          arg = c;
        }
      correct += arg == f.labels.labels[i] ? 1 : 0;
      ++total;
    }
  }
  return double(correct) / double(total);
}

}  // namespace dswp
