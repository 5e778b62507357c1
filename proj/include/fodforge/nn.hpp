#pragma once

// Small reverse-mode layer kit on column-major activations [channels x samples].
// Each layer has an explicit forward and a matching backward that accumulates
// parameter gradients into the owning ParamStore.

#include <cmath>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fodforge/error.hpp"

namespace fodforge::nn {

using Mat = Eigen::MatrixXd;
using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Mode { Train, Eval };

/// Named parameter; value is the row-major flattening of shape.
struct Tensor {
  std::string name;
  std::vector<int> shape;
  Eigen::VectorXd value;
  Eigen::VectorXd grad;
  bool trainable = true;

  Eigen::Index size() const { return value.size(); }
};

class ParamStore {
 public:
  int add(const std::string& name, std::vector<int> shape, bool trainable = true) {
    if (index_.count(name)) throw InternalError("duplicate parameter '" + name + "'");
    Eigen::Index n = 1;
    for (int d : shape) n *= d;
    Tensor t{name, std::move(shape), Eigen::VectorXd::Zero(n), Eigen::VectorXd::Zero(n), trainable};
    tensors_.push_back(std::move(t));
    index_[name] = static_cast<int>(tensors_.size()) - 1;
    return static_cast<int>(tensors_.size()) - 1;
  }

  Tensor& operator[](int i) { return tensors_[static_cast<std::size_t>(i)]; }
  const Tensor& operator[](int i) const { return tensors_[static_cast<std::size_t>(i)]; }
  Tensor& at(const std::string& name) { return tensors_[static_cast<std::size_t>(find(name))]; }
  const Tensor& at(const std::string& name) const { return tensors_[static_cast<std::size_t>(find(name))]; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::vector<Tensor>& tensors() { return tensors_; }
  const std::vector<Tensor>& tensors() const { return tensors_; }

  void zero_grad() {
    for (auto& t : tensors_) t.grad.setZero();
  }

  Eigen::Index count(bool trainable_only = true) const {
    Eigen::Index n = 0;
    for (const auto& t : tensors_)
      if (t.trainable || !trainable_only) n += t.size();
    return n;
  }

 private:
  int find(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) throw InvalidInput("no parameter named '" + name + "'");
    return it->second;
  }

  std::vector<Tensor> tensors_;
  std::map<std::string, int> index_;
};

inline double sigmoid(double x) { return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) scaled by gain.
inline void init_uniform(Tensor& t, int fan_in, std::mt19937_64& rng, double gain = 1.0) {
  const double k = gain / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-k, k);
  for (Eigen::Index i = 0; i < t.size(); ++i) t.value(i) = u(rng);
}

// ---------------------------------------------------------------- Linear

struct Linear {
  int weight = -1, bias = -1;
  int in = 0, out = 0;

  static Linear make(ParamStore& ps, const std::string& name, int in, int out) {
    Linear l;
    l.in = in;
    l.out = out;
    l.weight = ps.add(name + ".weight", {out, in});
    l.bias = ps.add(name + ".bias", {out});
    return l;
  }
  void init(ParamStore& ps, std::mt19937_64& rng) const {
    init_uniform(ps[weight], in, rng);
    init_uniform(ps[bias], in, rng);
  }

  Mat forward(const ParamStore& ps, const Mat& x) const {
    const Eigen::Map<const RowMat> W(ps[weight].value.data(), out, in);
    Mat y = W * x;
    y.colwise() += ps[bias].value;
    return y;
  }
  Mat backward(ParamStore& ps, const Mat& x, const Mat& dy) const {
    const Eigen::Map<const RowMat> W(ps[weight].value.data(), out, in);
    Eigen::Map<RowMat> dW(ps[weight].grad.data(), out, in);
    dW.noalias() += dy * x.transpose();
    ps[bias].grad += dy.rowwise().sum();
    return W.transpose() * dy;
  }
};

// ---------------------------------------------------------------- BatchNorm

struct BatchNorm {
  int gamma = -1, beta = -1, running_mean = -1, running_var = -1;
  int channels = 0;
  double eps = 1e-5;
  double momentum = 0.1;

  struct Cache {
    Mat xhat;
    Eigen::VectorXd inv_std;
    bool train = false;
  };

  static BatchNorm make(ParamStore& ps, const std::string& name, int channels) {
    BatchNorm b;
    b.channels = channels;
    b.gamma = ps.add(name + ".gamma", {channels});
    b.beta = ps.add(name + ".beta", {channels});
    b.running_mean = ps.add(name + ".running_mean", {channels}, false);
    b.running_var = ps.add(name + ".running_var", {channels}, false);
    ps[b.gamma].value.setOnes();
    ps[b.running_var].value.setOnes();
    return b;
  }

  /// Train mode normalises with batch statistics and updates the running moments.
  Mat forward(ParamStore& ps, const Mat& x, Mode mode, Cache* cache) const {
    const Eigen::Index n = x.cols();
    Eigen::VectorXd mean, var;
    if (mode == Mode::Train) {
      if (n < 2) throw InvalidInput("batch normalisation in train mode needs at least 2 samples per channel");
      mean = x.rowwise().mean();
      var = (x.colwise() - mean).array().square().rowwise().mean();
      auto& rm = ps[running_mean].value;
      auto& rv = ps[running_var].value;
      rm = (1.0 - momentum) * rm + momentum * mean;
      rv = (1.0 - momentum) * rv + momentum * var * (static_cast<double>(n) / static_cast<double>(n - 1));
    } else {
      mean = ps[running_mean].value;
      var = ps[running_var].value;
    }
    const Eigen::VectorXd inv_std = (var.array() + eps).rsqrt();
    Mat xhat = (x.colwise() - mean).array().colwise() * inv_std.array();
    Mat y = xhat.array().colwise() * ps[gamma].value.array();
    y.colwise() += ps[beta].value;
    if (cache) {
      cache->xhat = std::move(xhat);
      cache->inv_std = inv_std;
      cache->train = mode == Mode::Train;
    }
    return y;
  }

  Mat backward(ParamStore& ps, const Cache& c, const Mat& dy) const {
    const auto n = static_cast<double>(dy.cols());
    ps[beta].grad += dy.rowwise().sum();
    ps[gamma].grad += (dy.array() * c.xhat.array()).matrix().rowwise().sum();
    const Mat dxhat = dy.array().colwise() * ps[gamma].value.array();
    if (!c.train) return dxhat.array().colwise() * c.inv_std.array();
    const Eigen::VectorXd s1 = dxhat.rowwise().sum();
    const Eigen::VectorXd s2 = (dxhat.array() * c.xhat.array()).matrix().rowwise().sum();
    Mat dx = (n * dxhat.array() - c.xhat.array().colwise() * s2.array()).colwise() - s1.array();
    return dx.array().colwise() * (c.inv_std.array() / n);
  }
};

// ---------------------------------------------------------------- activations

/// PReLU with one learnable slope shared by all channels.
struct PRelu {
  int slope = -1;

  static PRelu make(ParamStore& ps, const std::string& name, double init = 0.25) {
    PRelu p;
    p.slope = ps.add(name + ".slope", {1});
    ps[p.slope].value(0) = init;
    return p;
  }
  Mat forward(const ParamStore& ps, const Mat& x) const {
    const double a = ps[slope].value(0);
    return x.unaryExpr([a](double v) { return v > 0.0 ? v : a * v; });
  }
  Mat backward(ParamStore& ps, const Mat& x, const Mat& dy) const {
    const double a = ps[slope].value(0);
    ps[slope].grad(0) += (x.array() < 0.0).select(x.array() * dy.array(), 0.0).sum();
    return (x.array() > 0.0).select(dy.array(), a * dy.array());
  }
};

inline Mat relu(const Mat& x) { return x.cwiseMax(0.0); }
inline Mat relu_backward(const Mat& x, const Mat& dy) { return (x.array() > 0.0).select(dy.array(), 0.0); }

/// Gated linear unit: first half of the channels gated by sigmoid of the second.
inline Mat glu(const Mat& x) {
  const Eigen::Index h = x.rows() / 2;
  return x.topRows(h).array() * x.bottomRows(h).unaryExpr([](double v) { return sigmoid(v); }).array();
}
inline Mat glu_backward(const Mat& x, const Mat& dy) {
  const Eigen::Index h = x.rows() / 2;
  const Mat s = x.bottomRows(h).unaryExpr([](double v) { return sigmoid(v); });
  Mat dx(x.rows(), x.cols());
  dx.topRows(h) = dy.array() * s.array();
  dx.bottomRows(h) = dy.array() * x.topRows(h).array() * s.array() * (1.0 - s.array());
  return dx;
}

// ---------------------------------------------------------------- 3-D geometry

/// Batch of B cubes of side S; column index = b S^3 + (z S + y) S + x.
struct Grid {
  int batch = 1;
  int side = 1;
  Eigen::Index columns() const { return static_cast<Eigen::Index>(batch) * side * side * side; }
};

/// Centre crop from side `from.side` to `to_side`.
inline Mat crop(const Mat& x, Grid from, int to_side) {
  const int off = (from.side - to_side) / 2;
  if (off < 0 || from.side - to_side != 2 * off) throw InvalidInput("crop needs an even, non-negative margin");
  if (off == 0) return x;
  const int S = from.side, T = to_side;
  Mat y(x.rows(), static_cast<Eigen::Index>(from.batch) * T * T * T);
  for (int b = 0; b < from.batch; ++b)
    for (int z = 0; z < T; ++z)
      for (int yy = 0; yy < T; ++yy)
        for (int xx = 0; xx < T; ++xx)
          y.col(((static_cast<Eigen::Index>(b) * T + z) * T + yy) * T + xx) =
              x.col(((static_cast<Eigen::Index>(b) * S + z + off) * S + yy + off) * S + xx + off);
  return y;
}

inline Mat crop_backward(const Mat& dy, Grid from, int to_side) {
  const int off = (from.side - to_side) / 2;
  if (off == 0) return dy;
  const int S = from.side, T = to_side;
  Mat dx = Mat::Zero(dy.rows(), from.columns());
  for (int b = 0; b < from.batch; ++b)
    for (int z = 0; z < T; ++z)
      for (int yy = 0; yy < T; ++yy)
        for (int xx = 0; xx < T; ++xx)
          dx.col(((static_cast<Eigen::Index>(b) * S + z + off) * S + yy + off) * S + xx + off) =
              dy.col(((static_cast<Eigen::Index>(b) * T + z) * T + yy) * T + xx);
  return dx;
}

// ---------------------------------------------------------------- Conv3d

struct Conv3d {
  int weight = -1, bias = -1;
  int in = 0, out = 0, kernel = 3, pad = 1;

  static Conv3d make(ParamStore& ps, const std::string& name, int in, int out, int kernel, int pad, bool with_bias) {
    Conv3d c;
    c.in = in;
    c.out = out;
    c.kernel = kernel;
    c.pad = pad;
    c.weight = ps.add(name + ".weight", {out, in, kernel, kernel, kernel});
    if (with_bias) c.bias = ps.add(name + ".bias", {out});
    return c;
  }
  int fan_in() const { return in * kernel * kernel * kernel; }
  void init(ParamStore& ps, std::mt19937_64& rng, double gain = 1.0) const {
    init_uniform(ps[weight], fan_in(), rng, gain);
    if (bias >= 0) init_uniform(ps[bias], fan_in(), rng, gain);
  }
  int out_side(int side) const { return side + 2 * pad - kernel + 1; }

  /// Rows ordered (channel, dz, dy, dx), matching the row-major weight layout.
  Mat im2col(const Mat& x, Grid g) const {
    const int S = g.side, T = out_side(S), k = kernel, k3 = k * k * k;
    Mat cols = Mat::Zero(static_cast<Eigen::Index>(in) * k3, static_cast<Eigen::Index>(g.batch) * T * T * T);
    for (int b = 0; b < g.batch; ++b)
      for (int z = 0; z < T; ++z)
        for (int y = 0; y < T; ++y)
          for (int xo = 0; xo < T; ++xo) {
            const Eigen::Index col = ((static_cast<Eigen::Index>(b) * T + z) * T + y) * T + xo;
            for (int dz = 0; dz < k; ++dz) {
              const int sz = z + dz - pad;
              if (sz < 0 || sz >= S) continue;
              for (int dy = 0; dy < k; ++dy) {
                const int sy = y + dy - pad;
                if (sy < 0 || sy >= S) continue;
                for (int dx = 0; dx < k; ++dx) {
                  const int sx = xo + dx - pad;
                  if (sx < 0 || sx >= S) continue;
                  const Eigen::Index src = ((static_cast<Eigen::Index>(b) * S + sz) * S + sy) * S + sx;
                  const int tap = (dz * k + dy) * k + dx;
                  for (int c = 0; c < in; ++c) cols(static_cast<Eigen::Index>(c) * k3 + tap, col) = x(c, src);
                }
              }
            }
          }
    return cols;
  }

  Mat col2im(const Mat& cols, Grid g) const {
    const int S = g.side, T = out_side(S), k = kernel, k3 = k * k * k;
    Mat x = Mat::Zero(in, g.columns());
    for (int b = 0; b < g.batch; ++b)
      for (int z = 0; z < T; ++z)
        for (int y = 0; y < T; ++y)
          for (int xo = 0; xo < T; ++xo) {
            const Eigen::Index col = ((static_cast<Eigen::Index>(b) * T + z) * T + y) * T + xo;
            for (int dz = 0; dz < k; ++dz) {
              const int sz = z + dz - pad;
              if (sz < 0 || sz >= S) continue;
              for (int dy = 0; dy < k; ++dy) {
                const int sy = y + dy - pad;
                if (sy < 0 || sy >= S) continue;
                for (int dx = 0; dx < k; ++dx) {
                  const int sx = xo + dx - pad;
                  if (sx < 0 || sx >= S) continue;
                  const Eigen::Index dst = ((static_cast<Eigen::Index>(b) * S + sz) * S + sy) * S + sx;
                  const int tap = (dz * k + dy) * k + dx;
                  for (int c = 0; c < in; ++c) x(c, dst) += cols(static_cast<Eigen::Index>(c) * k3 + tap, col);
                }
              }
            }
          }
    return x;
  }

  Mat forward(const ParamStore& ps, const Mat& x, Grid g) const {
    if (x.rows() != in) throw InvalidInput("conv input has " + std::to_string(x.rows()) + " channels, expected " + std::to_string(in));
    if (out_side(g.side) < 1) throw InvalidInput("conv input side " + std::to_string(g.side) + " too small");
    const Eigen::Map<const RowMat> W(ps[weight].value.data(), out, fan_in());
    Mat y = (kernel == 1 && pad == 0) ? Mat(W * x) : Mat(W * im2col(x, g));
    if (bias >= 0) y.colwise() += ps[bias].value;
    return y;
  }

  Mat backward(ParamStore& ps, const Mat& x, Grid g, const Mat& dy) const {
    const Eigen::Map<const RowMat> W(ps[weight].value.data(), out, fan_in());
    Eigen::Map<RowMat> dW(ps[weight].grad.data(), out, fan_in());
    if (bias >= 0) ps[bias].grad += dy.rowwise().sum();
    if (kernel == 1 && pad == 0) {
      dW.noalias() += dy * x.transpose();
      return W.transpose() * dy;
    }
    const Mat cols = im2col(x, g);
    dW.noalias() += dy * cols.transpose();
    return col2im(W.transpose() * dy, g);
  }
};

// ---------------------------------------------------------------- Adam

struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  long step = 0;
  std::vector<Eigen::VectorXd> m, v;
};

/// One bias-corrected Adam step on every trainable tensor.
inline void adam_update(ParamStore& ps, AdamState& st, double lr) {
  auto& ts = ps.tensors();
  if (st.m.size() != ts.size()) {
    st.m.clear();
    st.v.clear();
    for (const auto& t : ts) {
      st.m.push_back(Eigen::VectorXd::Zero(t.size()));
      st.v.push_back(Eigen::VectorXd::Zero(t.size()));
    }
  }
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (!ts[i].trainable) continue;
    if (st.m[i].size() != ts[i].size()) throw InvalidInput("optimizer state does not match parameter '" + ts[i].name + "'");
    const Eigen::VectorXd& g = ts[i].grad;
    if (!g.allFinite()) throw InvalidState("non-finite gradient in '" + ts[i].name + "'");
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * g;
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * g.cwiseAbs2();
    ts[i].value.array() -= lr * (st.m[i].array() / c1) / ((st.v[i].array() / c2).sqrt() + st.eps);
  }
}

}  // namespace fodforge::nn
