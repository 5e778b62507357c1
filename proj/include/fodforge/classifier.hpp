#pragma once

// Fully connected fixel-count classifier on WM SH coefficients, its training
// loop, and a labelled synthetic FOD generator.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>
#include <set>
#include <vector>

#include <Eigen/Dense>

#include "fodforge/error.hpp"
#include "fodforge/fixel.hpp"
#include "fodforge/nn.hpp"
#include "fodforge/sh_basis.hpp"

namespace fodforge {

inline constexpr std::array<int, 8> kClassifierWidths{45, 1000, 800, 600, 400, 200, 100, 5};
inline constexpr int kClassCount = 5;

/// Mean softmax cross-entropy over columns and its gradient w.r.t. the logits.
struct CrossEntropy {
  double loss = 0.0;
  Eigen::MatrixXd dlogits;
};

inline CrossEntropy softmax_cross_entropy(const Eigen::MatrixXd& logits, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != logits.cols())
    throw InvalidInput("label count " + std::to_string(labels.size()) + " differs from batch " + std::to_string(logits.cols()));
  CrossEntropy ce;
  ce.dlogits.resize(logits.rows(), logits.cols());
  const double n = static_cast<double>(logits.cols());
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    const int y = labels[static_cast<std::size_t>(j)];
    if (y < 0 || y >= logits.rows()) throw InvalidInput("class label " + std::to_string(y) + " out of range");
    const double mx = logits.col(j).maxCoeff();
    const Eigen::VectorXd e = (logits.col(j).array() - mx).exp();
    const double z = e.sum();
    ce.loss += (std::log(z) + mx - logits(y, j)) / n;
    ce.dlogits.col(j) = e / z;
    ce.dlogits(y, j) -= 1.0;
  }
  ce.dlogits /= n;
  return ce;
}

inline std::vector<int> argmax_columns(const Eigen::MatrixXd& logits) {
  std::vector<int> out(static_cast<std::size_t>(logits.cols()));
  for (Eigen::Index j = 0; j < logits.cols(); ++j) {
    Eigen::Index k = 0;
    logits.col(j).maxCoeff(&k);
    out[static_cast<std::size_t>(j)] = static_cast<int>(k);
  }
  return out;
}

class FixelClassifier {
 public:
  struct Cache {
    nn::Mode mode = nn::Mode::Eval;
    std::vector<nn::Mat> lin_in;                // input of every linear layer
    std::vector<nn::Mat> relu_in;               // pre-activation of every hidden ReLU
    std::vector<nn::BatchNorm::Cache> bn;
  };

  FixelClassifier() {
    const int L = static_cast<int>(kClassifierWidths.size()) - 1;
    for (int i = 0; i < L; ++i) {
      const std::string p = "fc" + std::to_string(i);
      layers_.push_back(nn::Linear::make(ps_, p, kClassifierWidths[static_cast<std::size_t>(i)],
                                         kClassifierWidths[static_cast<std::size_t>(i) + 1]));
      if (i + 2 < L) norms_.push_back(nn::BatchNorm::make(ps_, p + ".bn", kClassifierWidths[static_cast<std::size_t>(i) + 1]));
    }
    init(0);
  }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (const auto& l : layers_) l.init(ps_, rng);
    for (const auto& b : norms_) {
      ps_[b.gamma].value.setOnes();
      ps_[b.beta].value.setZero();
      ps_[b.running_mean].value.setZero();
      ps_[b.running_var].value.setOnes();
    }
  }

  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  /// Number of forward passes since construction.
  std::size_t calls() const { return calls_; }

  /// x: [45 x N] -> logits [5 x N]. Linear, BN, ReLU on the hidden layers;
  /// the last hidden layer skips BN.
  Eigen::MatrixXd forward(const Eigen::MatrixXd& x, nn::Mode mode, Cache* cache = nullptr) {
    if (x.rows() != kClassifierWidths[0])
      throw InvalidInput("classifier input has " + std::to_string(x.rows()) + " rows, expected 45");
    ++calls_;
    if (cache) *cache = Cache{mode, {}, {}, {}};
    nn::Mat h = x;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      if (cache) cache->lin_in.push_back(h);
      h = layers_[i].forward(ps_, h);
      if (i + 1 == layers_.size()) break;
      if (i < norms_.size()) {
        nn::BatchNorm::Cache bc;
        h = norms_[i].forward(ps_, h, mode, cache ? &bc : nullptr);
        if (cache) cache->bn.push_back(std::move(bc));
      }
      if (cache) cache->relu_in.push_back(h);
      h = nn::relu(h);
    }
    return h;
  }

  /// Eval-mode forward that leaves every parameter (running moments included) untouched.
  Eigen::MatrixXd predict(const Eigen::MatrixXd& x, Cache* cache = nullptr) const {
    return const_cast<FixelClassifier*>(this)->forward(x, nn::Mode::Eval, cache);
  }

  /// Gradient w.r.t. the input; parameter gradients are accumulated only when asked.
  Eigen::MatrixXd backward(const Cache& c, const Eigen::MatrixXd& dlogits, bool accumulate = true) {
    nn::Mat d = dlogits;
    for (std::size_t i = layers_.size(); i-- > 0;) {
      if (i + 1 < layers_.size()) {
        d = nn::relu_backward(c.relu_in[i], d);
        if (i < norms_.size()) d = norm_backward(i, c, d, accumulate);
      }
      d = accumulate ? layers_[i].backward(ps_, c.lin_in[i], d) : linear_input_grad(i, d);
    }
    return d;
  }

  /// Input gradient only; const because the parameters are frozen.
  Eigen::MatrixXd input_gradient(const Cache& c, const Eigen::MatrixXd& dlogits) const {
    return const_cast<FixelClassifier*>(this)->backward(c, dlogits, false);
  }

 private:
  nn::Mat linear_input_grad(std::size_t i, const nn::Mat& dy) const {
    const auto& l = layers_[i];
    const Eigen::Map<const nn::RowMat> W(ps_[l.weight].value.data(), l.out, l.in);
    return W.transpose() * dy;
  }

  nn::Mat norm_backward(std::size_t i, const Cache& c, const nn::Mat& dy, bool accumulate) {
    if (accumulate) return norms_[i].backward(ps_, c.bn[i], dy);
    const nn::Mat dxhat = dy.array().colwise() * ps_[norms_[i].gamma].value.array();
    if (!c.bn[i].train) return dxhat.array().colwise() * c.bn[i].inv_std.array();
    const auto n = static_cast<double>(dy.cols());
    const Eigen::VectorXd s1 = dxhat.rowwise().sum();
    const Eigen::VectorXd s2 = (dxhat.array() * c.bn[i].xhat.array()).matrix().rowwise().sum();
    nn::Mat dx = (n * dxhat.array() - c.bn[i].xhat.array().colwise() * s2.array()).colwise() - s1.array();
    return dx.array().colwise() * (c.bn[i].inv_std.array() / n);
  }

  nn::ParamStore ps_;
  std::vector<nn::Linear> layers_;
  std::vector<nn::BatchNorm> norms_;
  std::size_t calls_ = 0;
};

struct ClassifierTrainConfig {
  int epochs = 12;
  int batch = 100;
  double lr = 1e-3;
  std::uint64_t seed = 0;
};

struct ClassifierTrainResult {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_loss;
};

/// Full-dataset eval-mode cross-entropy.
inline double classifier_loss(const FixelClassifier& net, const Eigen::MatrixXd& x, const std::vector<int>& labels) {
  return softmax_cross_entropy(net.predict(x), labels).loss;
}

inline double classifier_accuracy(const FixelClassifier& net, const Eigen::MatrixXd& x, const std::vector<int>& labels) {
  if (labels.empty()) return 0.0;
  const std::vector<int> pred = argmax_columns(net.predict(x));
  long hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hits += pred[i] == labels[i];
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

/// x: [45 x N] raw WM coefficients, labels in 0..4.
inline ClassifierTrainResult train_classifier(FixelClassifier& net, const Eigen::MatrixXd& x, const std::vector<int>& labels,
                                              const ClassifierTrainConfig& cfg = {}) {
  if (x.rows() != kClassifierWidths[0]) throw InvalidInput("classifier data must have 45 rows");
  if (static_cast<Eigen::Index>(labels.size()) != x.cols()) throw InvalidInput("label count differs from sample count");
  const std::set<int> classes(labels.begin(), labels.end());
  if (classes.size() < 2) throw ConfigError("classifier training needs at least two classes present");
  if (*classes.begin() < 0 || *classes.rbegin() >= kClassCount) throw InvalidInput("class labels must lie in 0..4");
  if (cfg.epochs < 1 || cfg.batch < 2 || !(cfg.lr > 0.0)) throw ConfigError("invalid classifier training settings");

  net.init(cfg.seed);
  ClassifierTrainResult res;
  res.initial_loss = classifier_loss(net, x, labels);
  std::mt19937_64 rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<int> order(static_cast<std::size_t>(x.cols()));
  std::iota(order.begin(), order.end(), 0);
  nn::AdamState adam;
  for (int e = 0; e < cfg.epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start + 2 <= order.size(); start += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch));
      if (end - start < 2) break;
      Eigen::MatrixXd xb(x.rows(), static_cast<Eigen::Index>(end - start));
      std::vector<int> yb;
      for (std::size_t k = start; k < end; ++k) {
        xb.col(static_cast<Eigen::Index>(k - start)) = x.col(order[k]);
        yb.push_back(labels[static_cast<std::size_t>(order[k])]);
      }
      net.params().zero_grad();
      FixelClassifier::Cache cache;
      const CrossEntropy ce = softmax_cross_entropy(net.forward(xb, nn::Mode::Train, &cache), yb);
      net.backward(cache, ce.dlogits);
      nn::adam_update(net.params(), adam, e < cfg.epochs * 2 / 3 ? cfg.lr : 0.1 * cfg.lr);
      sum += ce.loss;
      ++batches;
    }
    res.epoch_loss.push_back(sum / std::max(1, batches));
  }
  net.params().zero_grad();
  res.final_loss = classifier_loss(net, x, labels);
  return res;
}

struct LabelledFods {
  Eigen::MatrixXd coeffs;  // [45 x N]
  std::vector<int> labels;
};

/// Mixtures of 0-4 apodised deltas with pairwise separation of at least
/// min_separation_deg; labels come from segment_fixels, thresholded to 4.
inline LabelledFods synthetic_fixel_dataset(int count, std::uint64_t seed, double min_separation_deg = 60.0,
                                            const FixelSegmenter& seg = FixelSegmenter()) {
  if (count < 1) throw ConfigError("dataset size must be positive");
  const ShScheme sh(8);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::normal_distribution<double> g(0.0, 1.0);
  const double cos_min = std::cos(min_separation_deg * std::numbers::pi / 180.0);
  LabelledFods out;
  out.coeffs.resize(sh.size(), count);
  out.labels.resize(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const int k = static_cast<int>(rng() % 5);
    std::vector<Vec3> dirs;
    int misses = 0;
    while (static_cast<int>(dirs.size()) < k) {
      // Greedy placement can jam; start over when it does.
      if (++misses > 200) {
        dirs.clear();
        misses = 0;
      }
      Vec3 d(g(rng), g(rng), g(rng));
      d.normalize();
      bool ok = true;
      for (const Vec3& e : dirs) ok = ok && std::abs(d.dot(e)) <= cos_min;
      if (ok) dirs.push_back(d);
    }
    Eigen::VectorXd w(k);
    for (int j = 0; j < k; ++j) w(j) = 1.0 + u(rng);
    if (k > 0) w *= (0.6 + 0.4 * u(rng)) / w.sum();
    Eigen::VectorXd c = Eigen::VectorXd::Zero(sh.size());
    for (int j = 0; j < k; ++j) c += w(j) * delta_sh(dirs[static_cast<std::size_t>(j)], sh);
    if (k == 0) c(0) = 0.05 * u(rng);
    out.coeffs.col(i) = c;
    out.labels[static_cast<std::size_t>(i)] = fixel_label(static_cast<int>(seg.segment(c).size()));
  }
  return out;
}

/// Coefficients of f(R^T u) for band-limited f, by quadrature on the dense mesh.
inline Eigen::MatrixXd rotate_sh(const Eigen::MatrixXd& coeffs, const Eigen::Matrix3d& R, const ShScheme& sh) {
  const SphereMesh& mesh = dense_mesh();
  const Eigen::MatrixXd Y = sh_basis_matrix(mesh.directions, sh);
  const DirectionList back = mesh.directions * R;  // rows R^T u
  const Eigen::MatrixXd Yr = sh_basis_matrix(back, sh);
  return Y.transpose() * mesh.weights.asDiagonal() * (Yr * coeffs);
}

/// Appends `copies` randomly rotated versions of every sample, relabelled by segmentation.
inline LabelledFods augment_with_rotations(const LabelledFods& base, int copies, std::uint64_t seed,
                                           const FixelSegmenter& seg = FixelSegmenter()) {
  if (copies < 0) throw ConfigError("rotation copies must be non-negative");
  const ShScheme sh(8);
  const Eigen::Index n = base.coeffs.cols();
  LabelledFods out;
  out.coeffs.resize(base.coeffs.rows(), n * (copies + 1));
  out.coeffs.leftCols(n) = base.coeffs;
  out.labels = base.labels;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  for (int r = 0; r < copies; ++r) {
    // One rotation per block of samples keeps the mesh resampling cheap.
    const int block = 50;
    for (Eigen::Index start = 0; start < n; start += block) {
      const Eigen::Index len = std::min<Eigen::Index>(block, n - start);
      const Eigen::Matrix3d R = Eigen::Quaterniond(g(rng), g(rng), g(rng), g(rng)).normalized().toRotationMatrix();
      const Eigen::MatrixXd rot = rotate_sh(base.coeffs.middleCols(start, len), R, sh);
      for (Eigen::Index j = 0; j < len; ++j) {
        const Eigen::Index col = (r + 1) * n + start + j;
        out.coeffs.col(col) = rot.col(j);
        out.labels.push_back(fixel_label(static_cast<int>(seg.segment(rot.col(j)).size())));
      }
    }
  }
  return out;
}

/// Appends `copies` noisy versions of every sample that keep the clean label.
/// Each copy gets white coefficient noise with a standard deviation drawn
/// uniformly from [0, sigma_max], mimicking estimation error in network outputs.
inline LabelledFods augment_with_noise(const LabelledFods& base, int copies, double sigma_max, std::uint64_t seed) {
  if (copies < 0) throw ConfigError("noise copies must be non-negative");
  if (!(sigma_max >= 0.0)) throw ConfigError("noise level must be non-negative");
  const Eigen::Index n = base.coeffs.cols();
  LabelledFods out;
  out.coeffs.resize(base.coeffs.rows(), n * (copies + 1));
  out.coeffs.leftCols(n) = base.coeffs;
  out.labels = base.labels;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, 1.0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int r = 0; r < copies; ++r)
    for (Eigen::Index j = 0; j < n; ++j) {
      const double s = sigma_max * u(rng);
      auto col = out.coeffs.col((r + 1) * n + j);
      for (Eigen::Index k = 0; k < col.size(); ++k) col(k) = base.coeffs(k, j) + s * g(rng);
      out.labels.push_back(base.labels[static_cast<std::size_t>(j)]);
    }
  return out;
}

/// Training set of the stage-2 classifier: clean synthetic FODs plus noisy copies.
struct ClassifierDataConfig {
  int samples = 5000;
  int noise_copies = 2;
  double noise_sigma = 0.06;
  std::uint64_t seed = 1;
};

inline LabelledFods classifier_training_set(const ClassifierDataConfig& cfg = {}) {
  return augment_with_noise(synthetic_fixel_dataset(cfg.samples, cfg.seed), cfg.noise_copies, cfg.noise_sigma,
                            cfg.seed ^ 0x5851f42d4c957f2dULL);
}

}  // namespace fodforge
