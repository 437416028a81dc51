#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>

#include "dswp/config.hpp"
#include "dswp/parallel.hpp"
#include "dswp/sampler.hpp"

namespace fs = std::filesystem;
using namespace dswp;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 2;
constexpr int kExitValidation = 3;
constexpr int kExitRuntime = 4;

constexpr const char* kMetricsHeader =
    "pair,config,src,targ,out,id_similarity,pose_error,expression_error,"
    "oracle_id_src,oracle_id_targ,swap_low_confidence,elapsed_seconds\n";

std::string config_label(const GuidanceConfig& g) {
  if (g.enable_id && g.enable_seg) return "full";
  if (g.enable_id) return "id_only";
  if (g.enable_seg) return "seg_only";
  return "disabled";
}

void append_metrics_row(const std::string& path, const std::string& pair,
                        const std::string& label, const std::string& src,
                        const std::string& targ, const std::string& out,
                        const SwapEvaluation& ev, double elapsed) {
  bool fresh = !fs::exists(path);
  std::ofstream f(path, std::ios::app);
  require(f.good(), "metrics: cannot open ", path);
  if (fresh) f << kMetricsHeader;
  char line[640];
  std::snprintf(line, sizeof(line), "%s,%s,%s,%s,%s,%.6f,%.6f,%.6f,%.6f,%.6f,%d,%.3f\n",
                pair.c_str(), label.c_str(), src.c_str(), targ.c_str(), out.c_str(),
                ev.metrics.id_similarity, ev.metrics.pose_error, ev.metrics.expression_error,
                ev.oracle_id_to_src, ev.oracle_id_to_targ, ev.fit_swapped.low_confidence ? 1 : 0,
                elapsed);
  f << line;
}

struct PairRow {
  std::string src, targ, mask;
};

std::vector<PairRow> load_pairs(const std::string& path) {
  std::ifstream f(path);
  require(f.good(), "pairs: cannot open ", path);
  std::string line;
  std::getline(f, line);
  require(line.rfind("src", 0) == 0, "pairs: ", path, " must start with header src,targ,mask");
  std::vector<PairRow> rows;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    size_t c1 = line.find(','), c2 = line.find(',', c1 + 1);
    require(c1 != std::string::npos && c2 != std::string::npos, "pairs: malformed row '", line,
            "'");
    rows.push_back(
        {line.substr(0, c1), line.substr(c1 + 1, c2 - c1 - 1), line.substr(c2 + 1)});
  }
  require(!rows.empty(), "pairs: ", path, " has no pairs");
  return rows;
}

struct SplitDataset {
  std::vector<LoadedFace> train, holdout;
};

SplitDataset split_dataset(std::vector<LoadedFace> all) {
  size_t hold = std::max<size_t>(1, all.size() / 10);
  SplitDataset s;
  s.holdout.assign(all.end() - hold, all.end());
  all.resize(all.size() - hold);
  s.train = std::move(all);
  require(!s.train.empty(), "dataset: too small to split");
  return s;
}

// ---- command implementations --------------------------------------------------

int cmd_gen_dataset(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  write_config_echo(cfg, out_dir + "/config.ini");
  std::string manifest = save_dataset(out_dir, cfg.dataset);
  int n_id = cfg.dataset.identities > 0 ? cfg.dataset.identities
                                        : derive_identity_count(cfg.dataset.n);
  std::printf("wrote %d faces over %d identities to %s (manifest %s)\n", cfg.dataset.n, n_id,
              out_dir.c_str(), manifest.c_str());
  return kExitOk;
}

int cmd_train(const RunConfig& cfg, const std::string& data_dir, const std::string& out_dir,
              const std::string& which, int limit) {
  fs::create_directories(out_dir);
  write_config_echo(cfg, out_dir + "/config.ini");
  SplitDataset ds = split_dataset(load_dataset(data_dir, limit));
  std::printf("loaded %zu train / %zu holdout faces from %s\n", ds.train.size(),
              ds.holdout.size(), data_dir.c_str());
  NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);

  bool all = which == "all";
  int rc = kExitOk;
  auto gate = [&rc](const char* name, double value, const char* cmp, double bound, bool ok) {
    std::printf("[gate] %s = %.4f (want %s %g): %s\n", name, value, cmp, bound,
                ok ? "pass" : "FAIL");
    if (!ok) rc = kExitRuntime;
  };

  if (all || which == "codec") {
    LatentCodec codec(cfg.codec.seed);
    try {
      TrainReport rep = train_codec(codec, ds.train, ds.holdout, cfg.codec);
      rep.save_csv(out_dir + "/loss_codec.csv");
      codec.save(out_dir + "/codec.dswp");
      gate("codec PSNR (dB)", rep.validation, ">", 25.0, rep.validation > 25.0);
    } catch (const DivergenceError& e) {
      codec.save(out_dir + "/codec.dswp");
      std::fprintf(stderr, "error: %s\n", e.what());
      return kExitRuntime;
    }
  }
  if (all || which == "denoiser") {
    LatentCodec codec = LatentCodec::load(out_dir + "/codec.dswp");
    std::vector<Tensor> lat_train = encode_dataset(codec, ds.train);
    std::vector<Tensor> lat_hold = encode_dataset(codec, ds.holdout);
    Denoiser den(cfg.T, cfg.denoiser.seed);
    try {
      TrainReport rep = train_denoiser(den, lat_train, lat_hold, sched, cfg.denoiser);
      rep.save_csv(out_dir + "/loss_denoiser.csv");
      den.save(out_dir + "/denoiser.dswp");
      gate("denoiser relative MSE", rep.validation, "<", 0.5, rep.validation < 0.5);
    } catch (const DivergenceError& e) {
      den.save(out_dir + "/denoiser.dswp");
      std::fprintf(stderr, "error: %s\n", e.what());
      return kExitRuntime;
    }
  }
  if (all || which == "identity") {
    int n_classes = 0;
    for (const LoadedFace& f : ds.train) n_classes = std::max(n_classes, f.identity_class + 1);
    IdentityEmbedder emb(n_classes, cfg.identity.seed);
    try {
      TrainReport rep = train_identity(emb, ds.train, ds.holdout, cfg.identity);
      rep.save_csv(out_dir + "/loss_identity.csv");
      emb.save(out_dir + "/identity.dswp");
      gate("identity cosine margin", rep.validation, ">", 0.2, rep.validation > 0.2);
    } catch (const DivergenceError& e) {
      emb.save(out_dir + "/identity.dswp");
      std::fprintf(stderr, "error: %s\n", e.what());
      return kExitRuntime;
    }
  }
  if (all || which == "segmenter") {
    Segmenter seg(cfg.segmenter.seed);
    try {
      TrainReport rep = train_segmenter(seg, ds.train, ds.holdout, cfg.segmenter);
      rep.save_csv(out_dir + "/loss_segmenter.csv");
      seg.save(out_dir + "/segmenter.dswp");
      gate("segmenter pixel accuracy", rep.validation, ">", 0.95, rep.validation > 0.95);
    } catch (const DivergenceError& e) {
      seg.save(out_dir + "/segmenter.dswp");
      std::fprintf(stderr, "error: %s\n", e.what());
      return kExitRuntime;
    }
  }
  return rc;
}

int cmd_swap(const RunConfig& cfg, const std::string& src_path, const std::string& targ_path,
             const std::string& mask_path, const std::string& models_dir,
             const std::string& out_path, const std::string& grid_path,
             const std::string& trace_path, const std::string& metrics_path) {
  Tensor x_src = load_png_rgb(src_path);
  Tensor x_targ = load_png_rgb(targ_path);
  Tensor mask = load_png_mask(mask_path);
  SwapModels models = SwapModels::load(models_dir);
  NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);

  SwapResult res = swap(x_src, x_targ, mask, cfg.swap, models, sched);
  if (fs::path(out_path).has_parent_path()) fs::create_directories(fs::path(out_path).parent_path());
  save_png_rgb(out_path, res.image);
  write_config_echo(cfg, fs::path(out_path).replace_extension(".config.ini").string());
  if (!grid_path.empty()) save_png_rgb(grid_path, compose_grid({x_src, x_targ, res.image}));
  if (!trace_path.empty()) save_trace_csv(trace_path, res.trace);
  if (!metrics_path.empty()) {
    SwapEvaluation ev = evaluate_full(res.image, x_src, x_targ, models.embedder);
    append_metrics_row(metrics_path, fs::path(out_path).stem().string(),
                       config_label(cfg.swap.guidance), src_path, targ_path, out_path, ev,
                       res.elapsed_seconds);
  }
  std::printf("swap %s + %s -> %s (%.2fs, %zu guided steps)\n", src_path.c_str(),
              targ_path.c_str(), out_path.c_str(), res.elapsed_seconds, res.trace.size());
  return kExitOk;
}

int cmd_ablate(const RunConfig& cfg, const std::string& pairs_path, const std::string& models_dir,
               const std::string& out_dir, int jobs) {
  auto pairs = load_pairs(pairs_path);
  fs::create_directories(out_dir);
  write_config_echo(cfg, out_dir + "/config.ini");
  SwapModels models = SwapModels::load(models_dir);
  NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);

  std::vector<AblationResult> results(pairs.size());
  std::mutex log_mu;
  parallel_for(static_cast<int>(pairs.size()), jobs, [&](int i) {
    Tensor x_src = load_png_rgb(pairs[i].src);
    Tensor x_targ = load_png_rgb(pairs[i].targ);
    Tensor mask = load_png_mask(pairs[i].mask);
    SwapConfig sc = cfg.swap;
    sc.seed = Philox::derive_seed(cfg.swap.seed, static_cast<uint64_t>(i));
    results[i] = ablate(x_src, x_targ, mask, sc, models, sched);
    std::lock_guard<std::mutex> lk(log_mu);
    std::printf("pair %03d done (seed %llu)\n", i,
                static_cast<unsigned long long>(sc.seed));
  });

  std::string results_csv = out_dir + "/results.csv";
  if (fs::exists(results_csv)) fs::remove(results_csv);
  double sum_id[3] = {0, 0, 0}, sum_expr[3] = {0, 0, 0};
  for (size_t i = 0; i < pairs.size(); ++i) {
    char prefix[64];
    std::snprintf(prefix, sizeof(prefix), "pair_%03zu", i);
    const AblationEntry* entries[3] = {&results[i].disabled, &results[i].id_only,
                                       &results[i].full};
    const char* labels[3] = {"disabled", "id_only", "full"};
    std::vector<Tensor> row_images;
    for (int c = 0; c < 3; ++c) {
      std::string out_png = out_dir + "/" + prefix + "_" + labels[c] + ".png";
      save_png_rgb(out_png, entries[c]->result.image);
      if (cfg.swap.trace)
        save_trace_csv(out_dir + "/" + prefix + "_" + labels[c] + "_trace.csv",
                       entries[c]->result.trace);
      append_metrics_row(results_csv, prefix, labels[c], pairs[i].src, pairs[i].targ, out_png,
                         entries[c]->eval, entries[c]->result.elapsed_seconds);
      sum_id[c] += entries[c]->eval.oracle_id_to_src;
      sum_expr[c] += entries[c]->eval.metrics.expression_error;
      row_images.push_back(entries[c]->result.image);
    }
    std::vector<Tensor> grid = {load_png_rgb(pairs[i].src), load_png_rgb(pairs[i].targ)};
    grid.insert(grid.end(), row_images.begin(), row_images.end());
    save_png_rgb(out_dir + "/" + prefix + "_grid.png", compose_grid(grid));
  }

  double n = static_cast<double>(pairs.size());
  double id_dis = sum_id[0] / n, id_only = sum_id[1] / n, id_full = sum_id[2] / n;
  double expr_only = sum_expr[1] / n, expr_full = sum_expr[2] / n;
  bool order_id = id_full > id_only && id_only > id_dis;
  bool order_expr = expr_full < expr_only;
  std::ofstream sf(out_dir + "/summary.csv");
  sf << "metric,disabled,id_only,full\n";
  sf << "oracle_id_to_src," << id_dis << "," << id_only << "," << id_full << "\n";
  sf << "expression_error," << sum_expr[0] / n << "," << expr_only << "," << expr_full << "\n";
  std::printf("[ablate] oracle id-sim to source: full=%.4f id_only=%.4f disabled=%.4f (%s)\n",
              id_full, id_only, id_dis, order_id ? "ordered" : "NOT ordered");
  std::printf("[ablate] expression error to target: full=%.4f id_only=%.4f (%s)\n", expr_full,
              expr_only, order_expr ? "ordered" : "NOT ordered");
  std::printf("wrote %zu x 3 results to %s\n", pairs.size(), results_csv.c_str());
  return kExitOk;
}

int cmd_eval(const std::string& results_dir, const std::string& out_csv) {
  require(fs::is_directory(results_dir), "eval: ", results_dir, " is not a directory");
  std::vector<std::array<double, 3>> rows;  // id_similarity, pose, expr
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(results_dir))
    if (e.path().extension() == ".csv") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const fs::path& p : files) {
    std::ifstream f(p);
    std::string header;
    if (!std::getline(f, header)) continue;
    std::vector<std::string> cols;
    std::stringstream hs(header);
    std::string c;
    while (std::getline(hs, c, ',')) cols.push_back(c);
    auto col = [&](const std::string& name) -> int {
      for (size_t i = 0; i < cols.size(); ++i)
        if (cols[i] == name) return static_cast<int>(i);
      return -1;
    };
    int ci = col("id_similarity"), cp = col("pose_error"), ce = col("expression_error");
    if (ci < 0 || cp < 0 || ce < 0) continue;  // not a metrics file
    std::string line;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      std::vector<std::string> cell;
      std::stringstream ls(line);
      while (std::getline(ls, c, ',')) cell.push_back(c);
      if (static_cast<int>(cell.size()) <= std::max({ci, cp, ce})) continue;
      rows.push_back({std::stod(cell[ci]), std::stod(cell[cp]), std::stod(cell[ce])});
    }
  }
  require(!rows.empty(), "eval: no metric rows found under ", results_dir);

  const char* names[3] = {"id_similarity", "pose_error", "expression_error"};
  double mean[3] = {0, 0, 0}, stddev[3] = {0, 0, 0};
  for (auto& r : rows)
    for (int j = 0; j < 3; ++j) mean[j] += r[j];
  for (int j = 0; j < 3; ++j) mean[j] /= rows.size();
  for (auto& r : rows)
    for (int j = 0; j < 3; ++j) stddev[j] += (r[j] - mean[j]) * (r[j] - mean[j]);
  for (int j = 0; j < 3; ++j)
    stddev[j] = rows.size() > 1 ? std::sqrt(stddev[j] / (rows.size() - 1)) : 0.0;

  std::printf("n=%zu", rows.size());
  for (int j = 0; j < 3; ++j) std::printf("  %s=%.4f±%.4f", names[j], mean[j], stddev[j]);
  std::printf("\n");
  if (!out_csv.empty()) {
    std::ofstream f(out_csv);
    require(f.good(), "eval: cannot write ", out_csv);
    f << "n,id_similarity_mean,id_similarity_std,pose_error_mean,pose_error_std,"
         "expression_error_mean,expression_error_std\n";
    f << rows.size();
    for (int j = 0; j < 3; ++j) f << "," << mean[j] << "," << stddev[j];
    f << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"guided latent-diffusion face swapping on a procedural toy dataset"};
  app.require_subcommand(1);

  std::string config_path;
  app.add_option("--config", config_path, "INI config file (flags override file values)")
      ->check(CLI::ExistingFile);

  // gen-dataset
  auto* gen = app.add_subcommand("gen-dataset", "render the synthetic dataset + manifest");
  std::string gen_out;
  int gen_n = -1, gen_ids = -1;
  double gen_occ = -1.0;
  uint64_t gen_seed = 0;
  auto* gen_seed_opt = gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--n", gen_n, "number of renders");
  gen->add_option("--identities", gen_ids, "number of identity classes (0 = derived)");
  gen->add_option("--occluder-frac", gen_occ, "fraction of renders with occluders");

  // train
  auto* train = app.add_subcommand("train", "train toy models on a generated dataset");
  std::string train_data, train_out, train_which = "all";
  int train_limit = 0;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output directory for checkpoints")->required();
  train->add_option("--which", train_which, "codec|denoiser|identity|segmenter|all")
      ->check(CLI::IsMember({"codec", "denoiser", "identity", "segmenter", "all"}));
  train->add_option("--limit", train_limit, "cap the number of loaded faces (0 = all)");

  // shared swap-ish flags
  auto add_swap_flags = [](CLI::App* cmd, auto& opts) {
    cmd->add_option("--seed", opts.seed, "sampling seed");
    cmd->add_option("--k", opts.k, "start timestep");
    cmd->add_option("--eta", opts.eta, "DDIM stochasticity in [0,1]");
    cmd->add_option("--stride", opts.stride, "timestep stride");
    cmd->add_option("--lambda-id", opts.lambda_id, "identity guidance base weight");
    cmd->add_option("--lambda-seg", opts.lambda_seg, "segmentation guidance base weight");
    cmd->add_option("--grad-clip", opts.grad_clip, "guidance gradient norm clip (0 = off)");
    cmd->add_flag("--no-id-guidance", opts.no_id, "disable identity guidance");
    cmd->add_flag("--no-seg-guidance", opts.no_seg, "disable segmentation guidance");
    cmd->add_flag("--frozen-eps", opts.frozen_eps,
                  "treat the noise prediction as constant in the guidance gradient");
    cmd->add_flag("--pixel-composite", opts.pixel_composite,
                  "recomposite the final image in pixel space");
  };
  struct SwapFlagVals {
    uint64_t seed = 0;
    int k = -1, stride = -1;
    double eta = -1, lambda_id = -1, lambda_seg = -1, grad_clip = -1;
    bool no_id = false, no_seg = false, frozen_eps = false, pixel_composite = false;
    bool trace = false;
  };

  // swap
  auto* swp = app.add_subcommand("swap", "run one guided face swap");
  std::string swap_src, swap_targ, swap_mask, swap_models, swap_out, swap_grid, swap_trace,
      swap_metrics;
  SwapFlagVals swap_flags;
  swp->add_option("--src", swap_src, "source face PNG")->required()->check(CLI::ExistingFile);
  swp->add_option("--targ", swap_targ, "target face PNG")->required()->check(CLI::ExistingFile);
  swp->add_option("--mask", swap_mask, "target mask PNG (0/255)")
      ->required()
      ->check(CLI::ExistingFile);
  swp->add_option("--models", swap_models, "checkpoint directory")->required();
  swp->add_option("--out", swap_out, "output PNG")->required();
  swp->add_option("--grid", swap_grid, "also write source|target|swapped grid PNG");
  swp->add_option("--trace", swap_trace, "write per-step guidance trace CSV");
  swp->add_option("--metrics", swap_metrics, "append a metrics row to this CSV");
  add_swap_flags(swp, swap_flags);
  auto* swap_seed_opt = swp->get_option("--seed");

  // ablate
  auto* abl = app.add_subcommand("ablate", "three-config ablation over a pair manifest");
  std::string abl_pairs, abl_models, abl_out;
  int abl_jobs = 0;
  SwapFlagVals abl_flags;
  abl->add_option("--pairs", abl_pairs, "CSV manifest: src,targ,mask")
      ->required()
      ->check(CLI::ExistingFile);
  abl->add_option("--models", abl_models, "checkpoint directory")->required();
  abl->add_option("--out", abl_out, "output directory")->required();
  abl->add_option("--jobs", abl_jobs, "worker threads (0 = logical cores)");
  abl->add_flag("--trace", abl_flags.trace, "write per-step guidance traces per result");
  add_swap_flags(abl, abl_flags);
  auto* abl_seed_opt = abl->get_option("--seed");

  // eval
  auto* ev = app.add_subcommand("eval", "aggregate metric CSVs into one table");
  std::string eval_results, eval_out;
  ev->add_option("--results", eval_results, "directory of metrics CSVs")->required();
  ev->add_option("--out", eval_out, "write the aggregate row to this CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kExitOk : kExitUsage;
  }

  RunConfig cfg;
  try {
    cfg = default_config();
    if (!config_path.empty()) apply_config_file(cfg, config_path);

    if (gen->parsed()) {
      if (gen_seed_opt->count()) cfg.dataset.seed = gen_seed;
      if (gen_n >= 0) cfg.dataset.n = gen_n;
      if (gen_ids >= 0) cfg.dataset.identities = gen_ids;
      if (gen_occ >= 0) cfg.dataset.occluder_frac = gen_occ;
    }
    auto apply_swap_flags = [&](const SwapFlagVals& v, const CLI::Option* seed_opt) {
      if (seed_opt->count()) cfg.swap.seed = v.seed;
      if (v.k >= 0) cfg.swap.k = v.k;
      if (v.stride >= 0) cfg.swap.stride = v.stride;
      if (v.eta >= 0) cfg.swap.eta = v.eta;
      if (v.lambda_id >= 0) cfg.swap.guidance.lambda_id_base = v.lambda_id;
      if (v.lambda_seg >= 0) cfg.swap.guidance.lambda_seg_base = v.lambda_seg;
      if (v.grad_clip >= 0) cfg.swap.guidance.grad_clip = v.grad_clip;
      if (v.no_id) cfg.swap.guidance.enable_id = false;
      if (v.no_seg) cfg.swap.guidance.enable_seg = false;
      if (v.frozen_eps) cfg.swap.guidance.full_path = false;
      if (v.pixel_composite) cfg.swap.pixel_composite = true;
    };
    if (swp->parsed()) {
      apply_swap_flags(swap_flags, swap_seed_opt);
      if (!swap_trace.empty()) cfg.swap.trace = true;
    }
    if (abl->parsed()) {
      apply_swap_flags(abl_flags, abl_seed_opt);
      if (abl_flags.trace) cfg.swap.trace = true;
    }

    cfg.validate();
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitValidation;
  }

  try {
    if (gen->parsed()) return cmd_gen_dataset(cfg, gen_out);
    if (train->parsed()) return cmd_train(cfg, train_data, train_out, train_which, train_limit);
    if (swp->parsed())
      return cmd_swap(cfg, swap_src, swap_targ, swap_mask, swap_models, swap_out, swap_grid,
                      swap_trace, swap_metrics);
    if (abl->parsed()) return cmd_ablate(cfg, abl_pairs, abl_models, abl_out, abl_jobs);
    if (ev->parsed()) return cmd_eval(eval_results, eval_out);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}
