#pragma once

// Two-stage cascade training: masked patch sampling, the SH + fixel-class
// loss, Adam with linear warm-up, validation and checkpoints.

#include <cmath>
#include <limits>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fodforge/acquisition.hpp"
#include "fodforge/checkpoint.hpp"
#include "fodforge/classifier.hpp"
#include "fodforge/error.hpp"
#include "fodforge/fixel.hpp"
#include "fodforge/forward_model.hpp"
#include "fodforge/metrics.hpp"
#include "fodforge/phantom.hpp"
#include "fodforge/unrolled.hpp"
#include "fodforge/volume.hpp"

namespace fodforge {

// ---------------------------------------------------------------- data

inline constexpr int kSubsamplePerShell = 9;
inline constexpr int kSubsampleB0 = 3;

/// Keeps the listed volumes of a DWI, updating its scheme metadata.
inline Volume select_dwi_volumes(const Volume& dwi, const Subsampled& sub) {
  expect_kind(dwi, VolumeKind::Dwi, "DWI");
  for (int k : sub.retained)
    if (k < 0 || k >= dwi.channels())
      throw InvalidInput("volume " + std::to_string(k) + " outside a DWI with " + std::to_string(dwi.channels()) + " volumes");
  Volume out(dwi.spatial(), static_cast<int>(sub.retained.size()), VolumeKind::Dwi);
  out.voxel_size = dwi.voxel_size;
  for (int v = 0; v < dwi.voxel_count(); ++v)
    for (std::size_t k = 0; k < sub.retained.size(); ++k)
      out.set(v, static_cast<int>(k), dwi.value(v, sub.retained[k]));
  const auto [bvec, bval] = serialize_scheme(sub.scheme);
  out.meta = {{"bvec", bvec}, {"bval", bval}};
  return out;
}

/// 1 / mean b0 signal over the mask, or 1 when the scheme has no b0 volume.
inline double estimate_scale(const Volume& dwi, const AcquisitionScheme& scheme, const Volume& mask) {
  std::vector<int> b0;
  for (const Shell& s : scheme.shells())
    if (s.nominal_b == 0.0) b0 = s.volumes;
  if (b0.empty()) return 1.0;
  double sum = 0.0;
  long n = 0;
  for (int v = 0; v < dwi.voxel_count(); ++v) {
    if (mask.value(v, 0) < 0.5f) continue;
    for (int k : b0) sum += dwi.value(v, k);
    n += static_cast<long>(b0.size());
  }
  if (n == 0 || !(sum > 0.0)) return 1.0;
  return static_cast<double>(n) / sum;
}

/// One aligned subject: undersampled DWI, ground-truth FODs and tissue masks.
struct TrainingSubject {
  Volume dwi;      // [dims x m]
  Volume fod;      // [dims x n_total]
  Volume wm_mask;
  Volume gm_mask;
  std::vector<int> centres;  // WM or GM voxels
  std::vector<int> labels;   // per voxel, thresholded fixel count of the ground-truth WM part
  std::vector<int> counts;   // per voxel, raw fixel count of the ground-truth WM part
};

inline TrainingSubject make_subject(Volume dwi, Volume fod, Volume wm_mask, Volume gm_mask,
                                    const FixelSegmenter& seg = FixelSegmenter()) {
  expect_kind(dwi, VolumeKind::Dwi, "DWI");
  expect_kind(fod, VolumeKind::Fod, "ground-truth FOD");
  expect_kind(wm_mask, VolumeKind::Mask, "WM mask");
  expect_kind(gm_mask, VolumeKind::Mask, "GM mask");
  if (dwi.spatial() != fod.spatial() || dwi.spatial() != wm_mask.spatial() || dwi.spatial() != gm_mask.spatial())
    throw InvalidInput("training volumes differ spatially: DWI " + dwi.shape_string() + ", FOD " + fod.shape_string() +
                       ", WM " + wm_mask.shape_string() + ", GM " + gm_mask.shape_string());
  const int wm = seg.coefficients();
  if (fod.channels() != wm + 2)
    throw InvalidInput("ground-truth FOD has " + std::to_string(fod.channels()) + " channels, expected " + std::to_string(wm + 2));
  TrainingSubject s{std::move(dwi), std::move(fod), std::move(wm_mask), std::move(gm_mask), {}, {}, {}};
  const int n = s.fod.voxel_count();
  s.labels.assign(static_cast<std::size_t>(n), 0);
  s.counts.assign(static_cast<std::size_t>(n), 0);
  for (int v = 0; v < n; ++v) {
    if (s.wm_mask.value(v, 0) >= 0.5f || s.gm_mask.value(v, 0) >= 0.5f) s.centres.push_back(v);
    const Eigen::VectorXd c = s.fod.voxel(v);
    if (c.head(wm).cwiseAbs().maxCoeff() == 0.0) continue;
    const auto count = seg.segment(c.head(wm)).size();
    s.counts[static_cast<std::size_t>(v)] = static_cast<int>(count);
    s.labels[static_cast<std::size_t>(v)] = fixel_label(count);
  }
  return s;
}

/// Simulates the phantom's full acquisition and keeps the subsampled volumes.
inline TrainingSubject phantom_subject(const Phantom& ph, const Subsampled& sub, std::uint64_t noise_seed,
                                       const FixelSegmenter& seg = FixelSegmenter()) {
  const ConvolutionOperator full = build_operator(ph.scheme, preset_responses(shell_bvalues(ph.scheme), ph.spec.l_max), ph.spec.l_max);
  const Volume dwi = simulate_dwi(ph.fod, full, ph.spec.noise, ph.spec.sigma, noise_seed);
  return make_subject(select_dwi_volumes(dwi, sub), ph.fod, ph.wm_mask, ph.gm_mask, seg);
}

/// Copies the p^3 neighbourhood of `centre` into columns [b p^3, (b+1) p^3) of
/// `out`; voxels outside the volume stay zero.
inline void extract_patch(const Volume& dwi, int centre, int p, double scale, Eigen::MatrixXd& out, int b) {
  const auto [cx, cy, cz] = dwi.coords(centre);
  const int h = p / 2;
  const int m = dwi.channels();
  for (int z = 0; z < p; ++z)
    for (int y = 0; y < p; ++y)
      for (int x = 0; x < p; ++x) {
        const Eigen::Index col = ((static_cast<Eigen::Index>(b) * p + z) * p + y) * p + x;
        const int sx = cx + x - h, sy = cy + y - h, sz = cz + z - h;
        if (!dwi.inside(sx, sy, sz)) {
          out.col(col).setZero();
          continue;
        }
        const int v = dwi.index(sx, sy, sz);
        for (int k = 0; k < m; ++k) out(k, col) = scale * dwi.value(v, k);
      }
}

/// Uniformly samples `batch` centres over every subject's WM/GM voxels.
inline PatchBatch sample_patches(const std::vector<TrainingSubject>& subjects, int batch, int patch, std::mt19937_64& rng) {
  if (batch < 1) throw ConfigError("batch size must be positive");
  std::size_t total = 0;
  for (const auto& s : subjects) total += s.centres.size();
  if (total == 0) throw ConfigError("no WM or GM voxels to sample from");
  const int m = subjects.front().dwi.channels();
  const int n = subjects.front().fod.channels();
  PatchBatch pb;
  pb.batch = batch;
  pb.patch = patch;
  pb.dwi.resize(m, static_cast<Eigen::Index>(batch) * patch * patch * patch);
  pb.target.resize(n, batch);
  std::uniform_int_distribution<std::size_t> pick(0, total - 1);
  for (int b = 0; b < batch; ++b) {
    std::size_t k = pick(rng);
    std::size_t si = 0;
    while (k >= subjects[si].centres.size()) k -= subjects[si++].centres.size();
    const TrainingSubject& s = subjects[si];
    if (s.dwi.channels() != m || s.fod.channels() != n) throw InvalidInput("training subjects disagree on channel counts");
    const int v = s.centres[k];
    extract_patch(s.dwi, v, patch, 1.0, pb.dwi, b);
    pb.target.col(b) = s.fod.voxel(v);
    pb.labels.push_back(s.labels[static_cast<std::size_t>(v)]);
    pb.centres.push_back(v);
  }
  return pb;
}

// ---------------------------------------------------------------- loss

struct LossValue {
  double total = 0.0;
  double sse = 0.0;  // mean over the batch
  double ce = 0.0;   // mean cross-entropy, 0 when kappa is 0
  Eigen::MatrixXd grad;  // d total / d c_hat, [45 x N]
};

/// c_hat, c: [45 x N] WM coefficients. The classifier is only evaluated when kappa > 0.
inline LossValue sdnet_loss(const Eigen::MatrixXd& c_hat, const Eigen::MatrixXd& c, const std::vector<int>& labels,
                            const FixelClassifier* classifier, double kappa) {
  if (c_hat.rows() != c.rows() || c_hat.cols() != c.cols())
    throw InvalidInput("prediction and target shapes differ");
  if (static_cast<Eigen::Index>(labels.size()) != c.cols()) throw InvalidInput("one label per sample is required");
  for (int y : labels)
    if (y < 0 || y > kMaxFixelLabel) throw InvalidInput("fixel label " + std::to_string(y) + " outside 0..4");
  if (kappa < 0.0) throw InvalidInput("kappa must be non-negative");
  const double n = static_cast<double>(c.cols());
  LossValue out;
  const Eigen::MatrixXd diff = c_hat - c;
  out.sse = diff.squaredNorm() / n;
  out.grad = 2.0 / n * diff;
  if (kappa > 0.0) {
    if (!classifier) throw InvalidInput("a classifier is required when kappa > 0");
    FixelClassifier::Cache cache;
    const CrossEntropy ce = softmax_cross_entropy(classifier->predict(c_hat, &cache), labels);
    out.ce = ce.loss;
    out.grad += kappa * classifier->input_gradient(cache, ce.dlogits);
  }
  out.total = out.sse + kappa * out.ce;
  return out;
}

// ---------------------------------------------------------------- optimiser

struct TrainConfig {
  double kappa = 1.6e-4;
  int batch = 256;
  double lr_start = 1e-6;
  double lr_end = 1e-4;
  long warmup = 10000;
  long decay_every = 0;  // 0: constant after warm-up
  double decay_factor = 1.0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  int eval_every = 500;
  int patience = 5;
  double min_improvement = 1e-3;  // relative validation-SSE gain that resets patience
  long max_stage_iterations = 0;   // 0: run each stage to convergence
  long max_stage2_iterations = -1; // -1: same cap as stage 1
  int validation_voxels = 512;
  std::uint64_t seed = 0;

  static TrainConfig paper() { return {}; }

  /// Shortened schedule for one CPU core.
  static TrainConfig desk() {
    TrainConfig c;
    c.batch = 16;
    c.lr_start = 1e-5;
    c.lr_end = 1e-3;
    c.warmup = 100;
    c.decay_every = 350;
    c.decay_factor = 0.3;
    c.eval_every = 100;
    c.patience = 5;
    c.max_stage_iterations = 1000;
    c.max_stage2_iterations = 300;
    c.validation_voxels = 256;
    return c;
  }

  void validate() const {
    if (!(kappa >= 0.0)) throw ConfigError("kappa must be non-negative");
    if (batch < 2) throw ConfigError("batch size must be at least 2 (batch normalisation)");
    if (!(lr_start > 0.0) || !(lr_end > 0.0)) throw ConfigError("learning rates must be positive");
    if (warmup < 0) throw ConfigError("warm-up length must be non-negative");
    if (decay_every < 0 || !(decay_factor > 0.0) || decay_factor > 1.0)
      throw ConfigError("learning-rate decay needs a non-negative period and a factor in (0, 1]");
    if (eval_every < 1 || patience < 1) throw ConfigError("evaluation cadence and patience must be positive");
    if (max_stage_iterations < 0 || max_stage2_iterations < -1) throw ConfigError("iteration caps must be non-negative");
    if (validation_voxels < 1) throw ConfigError("validation needs at least one voxel");
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"kappa", c.kappa},       {"batch", c.batch},         {"lr_start", c.lr_start},
          {"lr_end", c.lr_end},     {"warmup", c.warmup},       {"decay_every", c.decay_every},
          {"decay_factor", c.decay_factor},       {"beta1", c.beta1},
          {"beta2", c.beta2},       {"eps", c.eps},             {"eval_every", c.eval_every},
          {"patience", c.patience}, {"min_improvement", c.min_improvement},
          {"max_stage_iterations", c.max_stage_iterations}, {"max_stage2_iterations", c.max_stage2_iterations},   {"validation_voxels", c.validation_voxels},
          {"seed", c.seed}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  try {
    if (j.contains("preset")) {
      const std::string p = j.at("preset").get<std::string>();
      if (p == "paper") base = TrainConfig::paper();
      else if (p == "desk") base = TrainConfig::desk();
      else throw ConfigError("unknown training preset '" + p + "'");
    }
    base.kappa = j.value("kappa", base.kappa);
    base.batch = j.value("batch", base.batch);
    base.lr_start = j.value("lr_start", base.lr_start);
    base.lr_end = j.value("lr_end", base.lr_end);
    base.warmup = j.value("warmup", base.warmup);
    base.decay_every = j.value("decay_every", base.decay_every);
    base.decay_factor = j.value("decay_factor", base.decay_factor);
    base.beta1 = j.value("beta1", base.beta1);
    base.beta2 = j.value("beta2", base.beta2);
    base.eps = j.value("eps", base.eps);
    base.eval_every = j.value("eval_every", base.eval_every);
    base.patience = j.value("patience", base.patience);
    base.min_improvement = j.value("min_improvement", base.min_improvement);
    base.max_stage_iterations = j.value("max_stage_iterations", base.max_stage_iterations);
    base.max_stage2_iterations = j.value("max_stage2_iterations", base.max_stage2_iterations);
    base.validation_voxels = j.value("validation_voxels", base.validation_voxels);
    base.seed = j.value("seed", base.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid training config: ") + e.what());
  }
  base.validate();
  return base;
}

/// Linear ramp from lr_start at 0 to lr_end at `warmup`, then constant or
/// multiplied by decay_factor every decay_every iterations.
inline double learning_rate(const TrainConfig& cfg, long iteration) {
  if (iteration >= cfg.warmup) {
    if (cfg.decay_every <= 0) return cfg.lr_end;
    return cfg.lr_end * std::pow(cfg.decay_factor, static_cast<double>((iteration - cfg.warmup) / cfg.decay_every));
  }
  return cfg.lr_start + (cfg.lr_end - cfg.lr_start) * static_cast<double>(iteration) / static_cast<double>(cfg.warmup);
}

inline void adam_step(nn::ParamStore& ps, nn::AdamState& state, long iteration, const TrainConfig& cfg) {
  state.beta1 = cfg.beta1;
  state.beta2 = cfg.beta2;
  state.eps = cfg.eps;
  nn::adam_update(ps, state, learning_rate(cfg, iteration));
}

// ---------------------------------------------------------------- inference

/// Runs the cascade (eval mode) on every voxel of `mask`; other voxels stay zero.
inline Volume reconstruct_volume(Cascade& net, const Volume& dwi, const Volume& mask, int batch = 64) {
  expect_kind(dwi, VolumeKind::Dwi, "DWI input");
  if (dwi.spatial() != mask.spatial())
    throw InvalidInput("DWI " + dwi.shape_string() + " and mask " + mask.shape_string() + " differ spatially");
  const CascadeConfig& cfg = net.config();
  if (dwi.channels() != cfg.m_in)
    throw InvalidInput("DWI has " + std::to_string(dwi.channels()) + " volumes, network expects " + std::to_string(cfg.m_in));
  Volume out(dwi.spatial(), cfg.n_total(), VolumeKind::Fod);
  out.voxel_size = dwi.voxel_size;
  out.meta = {{"l_max_wm", cfg.l_max}, {"tissues", {"wm", "gm", "csf"}}};
  std::vector<int> todo;
  for (int v = 0; v < dwi.voxel_count(); ++v)
    if (mask.value(v, 0) >= 0.5f) todo.push_back(v);
  const int p = cfg.patch, p3 = p * p * p;
  for (std::size_t start = 0; start < todo.size(); start += static_cast<std::size_t>(batch)) {
    const int B = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(batch), todo.size() - start));
    PatchBatch pb;
    pb.batch = B;
    pb.patch = p;
    pb.dwi.resize(cfg.m_in, static_cast<Eigen::Index>(B) * p3);
    for (int b = 0; b < B; ++b) extract_patch(dwi, todo[start + static_cast<std::size_t>(b)], p, 1.0, pb.dwi, b);
    const Eigen::MatrixXd y = net.forward(pb, nn::Mode::Eval);
    for (int b = 0; b < B; ++b) out.set_voxel(todo[start + static_cast<std::size_t>(b)], y.col(b));
  }
  return out;
}

struct ValidationMetrics {
  double sse = 0.0;
  double acc = 0.0;
  double fixel_accuracy = 0.0;
  int acc_excluded = 0;
};

/// Eval-mode metrics on the WM part of a fixed voxel list.
inline ValidationMetrics validate_voxels(Cascade& net, const TrainingSubject& s, const std::vector<int>& voxels,
                                         const FixelSegmenter& seg, int batch = 64) {
  const CascadeConfig& cfg = net.config();
  const int wm = ShScheme::count(cfg.l_max);
  const int p = cfg.patch;
  ValidationMetrics m;
  double acc_sum = 0.0;
  int acc_n = 0, hits = 0;
  for (std::size_t start = 0; start < voxels.size(); start += static_cast<std::size_t>(batch)) {
    const int B = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(batch), voxels.size() - start));
    PatchBatch pb;
    pb.batch = B;
    pb.patch = p;
    pb.dwi.resize(cfg.m_in, static_cast<Eigen::Index>(B) * p * p * p);
    for (int b = 0; b < B; ++b) extract_patch(s.dwi, voxels[start + static_cast<std::size_t>(b)], p, 1.0, pb.dwi, b);
    const Eigen::MatrixXd y = net.forward(pb, nn::Mode::Eval);
    for (int b = 0; b < B; ++b) {
      const int v = voxels[start + static_cast<std::size_t>(b)];
      const Eigen::VectorXd truth = s.fod.voxel(v).head(wm);
      const Eigen::VectorXd pred = y.col(b).head(wm);
      m.sse += sse(truth, pred);
      if (const auto a = acc(truth, pred)) {
        acc_sum += *a;
        ++acc_n;
      } else {
        ++m.acc_excluded;
      }
      hits += static_cast<int>(seg.segment(pred).size()) == s.counts[static_cast<std::size_t>(v)];
    }
  }
  const double n = static_cast<double>(std::max<std::size_t>(1, voxels.size()));
  m.sse /= n;
  m.acc = acc_n ? acc_sum / acc_n : 0.0;
  m.fixel_accuracy = hits / n;
  return m;
}

/// Evenly spaced WM voxels, at most `count`.
inline std::vector<int> validation_voxels(const TrainingSubject& s, int count) {
  std::vector<int> wm;
  for (int v = 0; v < s.wm_mask.voxel_count(); ++v)
    if (s.wm_mask.value(v, 0) >= 0.5f) wm.push_back(v);
  if (wm.empty()) throw ConfigError("validation subject has no WM voxels");
  if (static_cast<int>(wm.size()) <= count) return wm;
  std::vector<int> out;
  for (int i = 0; i < count; ++i) out.push_back(wm[static_cast<std::size_t>(i) * wm.size() / static_cast<std::size_t>(count)]);
  return out;
}

// ---------------------------------------------------------------- checkpoints

/// Self-contained cascade checkpoint: config, input scale, acquisition scheme
/// and responses, all stored as exact JSON numbers.
inline Checkpoint cascade_checkpoint(const Cascade& net, const ConvolutionOperator& op,
                                     const std::vector<ResponseFunction>& responses) {
  Checkpoint ck;
  nlohmann::json bvecs = nlohmann::json::array();
  for (const Vec3& g : op.scheme.bvecs()) bvecs.push_back({g.x(), g.y(), g.z()});
  nlohmann::json resp = nlohmann::json::object();
  for (const auto& r : responses) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index i = 0; i < r.coeffs.rows(); ++i) {
      std::vector<double> row;
      for (Eigen::Index j = 0; j < r.coeffs.cols(); ++j) row.push_back(r.coeffs(i, j));
      rows.push_back(row);
    }
    resp[tissue_name(r.tissue)] = rows;
  }
  ck.header = {{"kind", "sdnet"},   {"config", to_json(net.config())}, {"scale", net.scale},
               {"bvecs", bvecs},    {"bvals", op.scheme.bvals()},       {"responses", resp}};
  ck.tensors = snapshot_tensors(net.params());
  return ck;
}

struct LoadedCascade {
  ConvolutionOperator op;
  std::vector<ResponseFunction> responses;
  Cascade net;
};

inline LoadedCascade load_cascade(const Checkpoint& ck) {
  try {
    if (ck.header.value("kind", std::string()) != "sdnet") throw ConfigError("checkpoint does not hold a cascade");
    const CascadeConfig cfg = cascade_config_from_json(ck.header.at("config"));
    std::vector<Vec3> bvecs;
    for (const auto& g : ck.header.at("bvecs")) bvecs.emplace_back(g.at(0).get<double>(), g.at(1).get<double>(), g.at(2).get<double>());
    const AcquisitionScheme scheme(std::move(bvecs), ck.header.at("bvals").get<std::vector<double>>());
    std::vector<ResponseFunction> responses;
    for (Tissue t : {Tissue::WM, Tissue::GM, Tissue::CSF}) {
      const auto rows = ck.header.at("responses").at(tissue_name(t)).get<std::vector<std::vector<double>>>();
      if (rows.empty() || rows.front().empty()) throw ConfigError(std::string(tissue_name(t)) + " response is empty");
      Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(rows.front().size()));
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != rows.front().size()) throw ConfigError(std::string(tissue_name(t)) + " response rows differ in length");
        for (std::size_t j = 0; j < rows[i].size(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = rows[i][j];
      }
      responses.push_back({t, m});
    }
    ConvolutionOperator op = build_operator(scheme, responses, cfg.l_max);
    LoadedCascade out{op, responses, Cascade(cfg, op)};
    out.net.scale = ck.header.at("scale").get<double>();
    restore_tensors(out.net.params(), ck.tensors);
    return out;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid checkpoint header: ") + e.what());
  }
}

// ---------------------------------------------------------------- training loop

struct StageRange {
  int first = 1;
  int last = 2;
  long start_iteration = 0;  // global iteration count when resuming
};

struct TrainResult {
  Checkpoint stage1;
  Checkpoint stage2;
  long iterations = 0;
  long stage_boundary = 0;  // first iteration trained with the final kappa
  bool diverged = false;
  std::vector<nlohmann::json> log;
};

/// Trains stage 1 (kappa = 0) then stage 2 (cfg.kappa), each until the
/// validation SSE stops improving. `classifier` is only read.
inline TrainResult train_sdnet(Cascade& net, const ConvolutionOperator& op, const std::vector<ResponseFunction>& responses,
                               const std::vector<TrainingSubject>& train, const TrainingSubject& val,
                               const FixelClassifier* classifier, const TrainConfig& cfg, std::ostream* log = nullptr,
                               StageRange stages = {}) {
  cfg.validate();
  if (train.empty()) throw ConfigError("no training subjects");
  if (stages.first < 1 || stages.last > 2 || stages.first > stages.last || stages.start_iteration < 0)
    throw ConfigError("training stages must satisfy 1 <= first <= last <= 2");
  const bool run_stage2 = stages.last == 2;
  if (run_stage2 && cfg.kappa > 0.0 && !classifier) throw ConfigError("stage 2 needs a trained fixel classifier");
  const CascadeConfig& ccfg = net.config();
  const int wm = ShScheme::count(ccfg.l_max);
  const FixelSegmenter seg;
  const std::vector<int> val_voxels = validation_voxels(val, cfg.validation_voxels);
  TrainResult res;
  Checkpoint last_good = cascade_checkpoint(net, op, responses);

  auto emit = [&](nlohmann::json j) {
    if (log) *log << j.dump() << '\n' << std::flush;
    res.log.push_back(std::move(j));
  };

  long it = stages.start_iteration;
  for (int stage = stages.first; stage <= stages.last; ++stage) {
    const double kappa = stage == 1 ? 0.0 : cfg.kappa;
    // Each stage owns its sampling stream and optimiser moments, so resuming
    // from a stage-1 checkpoint reproduces an uninterrupted run.
    std::mt19937_64 rng(detail::splitmix64(cfg.seed ^ static_cast<std::uint64_t>(stage)));
    nn::AdamState adam;
    if (stage == 2) {
      res.stage_boundary = it;
      emit({{"event", "kappa_change"}, {"iteration", it}, {"kappa", kappa}});
    }
    double best = std::numeric_limits<double>::infinity();
    int stale = 0;
    long stage_it = 0;
    double loss_sum = 0.0, sse_sum = 0.0, ce_sum = 0.0;
    int loss_n = 0;
    while (true) {
      const PatchBatch pb = sample_patches(train, cfg.batch, ccfg.patch, rng);
      Cascade::Tape tape;
      const Eigen::MatrixXd y = net.forward(pb, nn::Mode::Train, &tape);
      const LossValue L = sdnet_loss(y.topRows(wm), pb.target.topRows(wm), pb.labels, classifier, kappa);
      if (!std::isfinite(L.total)) {
        restore_tensors(net.params(), last_good.tensors);
        res.diverged = true;
        emit({{"event", "diverged"}, {"iteration", it}, {"stage", stage}});
        if (stage == 1) res.stage1 = last_good;
        res.stage2 = last_good;
        res.iterations = it - stages.start_iteration;
        return res;
      }
      Eigen::MatrixXd dy = Eigen::MatrixXd::Zero(y.rows(), y.cols());
      dy.topRows(wm) = L.grad;
      net.params().zero_grad();
      net.backward(tape, dy);
      adam_step(net.params(), adam, it, cfg);
      ++it;
      ++stage_it;
      loss_sum += L.total;
      sse_sum += L.sse;
      ce_sum += L.ce;
      ++loss_n;

      const long cap = stage == 2 && cfg.max_stage2_iterations >= 0 ? cfg.max_stage2_iterations : cfg.max_stage_iterations;
      const bool capped = cap > 0 && stage_it >= cap;
      if (stage_it % cfg.eval_every != 0 && !capped) continue;
      const ValidationMetrics vm = validate_voxels(net, val, val_voxels, seg);
      nlohmann::json lambdas = nlohmann::json::array();
      for (int k = 0; k <= ccfg.cascades; ++k) lambdas.push_back(net.lambda(k));
      emit({{"iteration", it},
            {"stage", stage},
            {"lr", learning_rate(cfg, it - 1)},
            {"kappa", kappa},
            {"lambda", lambdas},
            {"train_loss", loss_sum / loss_n},
            {"train_sse", sse_sum / loss_n},
            {"train_ce", ce_sum / loss_n},
            {"val_sse", vm.sse},
            {"val_acc", vm.acc},
            {"val_fixel_accuracy", vm.fixel_accuracy}});
      loss_sum = sse_sum = ce_sum = 0.0;
      loss_n = 0;
      last_good = cascade_checkpoint(net, op, responses);
      if (vm.sse < best * (1.0 - cfg.min_improvement)) {
        best = vm.sse;
        stale = 0;
      } else {
        ++stale;
      }
      if (stale >= cfg.patience || capped) break;
    }
    emit({{"event", "stage_end"}, {"stage", stage}, {"iteration", it}});
    Checkpoint ck = cascade_checkpoint(net, op, responses);
    ck.header["training"] = {{"stage", stage}, {"iteration", it}};
    // Continue from the stored (float32) weights, exactly as a resumed run would.
    restore_tensors(net.params(), ck.tensors);
    (stage == 1 ? res.stage1 : res.stage2) = std::move(ck);
  }
  if (!run_stage2) res.stage2 = res.stage1;
  res.iterations = it - stages.start_iteration;
  return res;
}

}  // namespace fodforge
