#pragma once

// Unrolled cascade: closed-form DWI-consistency solves alternating with
// convolutional regularisation blocks, with a manual reverse pass.

#include <cmath>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fodforge/error.hpp"
#include "fodforge/forward_model.hpp"
#include "fodforge/nn.hpp"
#include "fodforge/sh_basis.hpp"

namespace fodforge {

struct CascadeConfig {
  int patch = 9;
  int m_in = 30;
  int cascades = 4;
  int l_max_initial = 4;
  int l_max = 8;
  /// Padded 3x3x3 stages after the concatenated input.
  std::vector<int> schedule{128, 192, 256, 320, 384, 448};
  /// Width of the unpadded 3x3x3 stage.
  int pre_output = 512;
  bool dc_enabled = true;
  double lambda_init = 1e-3;

  int n_total() const { return ShScheme::count(l_max) + 2; }
  int glu_in() const { return 2 * n_total(); }

  static CascadeConfig paper() { return {}; }

  /// Small enough to train on one CPU core.
  static CascadeConfig desk() {
    CascadeConfig c;
    c.patch = 5;
    c.cascades = 2;
    c.schedule = {32, 32};
    c.pre_output = 64;
    return c;
  }

  void validate() const {
    if (patch < 1 || patch % 2 == 0) throw ConfigError("patch size must be odd and positive");
    if (cascades < 1) throw ConfigError("cascade count must be at least 1");
    if (patch - 2 * cascades < 1) throw ConfigError("patch " + std::to_string(patch) + " cannot shrink through " +
                                                    std::to_string(cascades) + " regularisation blocks");
    if (m_in < 1) throw ConfigError("input channel count must be positive");
    if (l_max < 0 || l_max % 2 || l_max_initial < 0 || l_max_initial % 2 || l_max_initial > l_max)
      throw ConfigError("invalid SH orders");
    if (pre_output < 1) throw ConfigError("pre-output width must be positive");
    for (int s : schedule)
      if (s < 1) throw ConfigError("channel schedule entries must be positive");
    if (!(lambda_init > 0.0)) throw ConfigError("initial lambda must be positive");
  }

  /// Channel widths from the concatenated input to the block output.
  std::vector<int> channel_trace() const {
    std::vector<int> t{glu_in()};
    t.insert(t.end(), schedule.begin(), schedule.end());
    t.push_back(pre_output);
    t.push_back(glu_in());
    t.push_back(n_total());
    return t;
  }
};

inline nlohmann::json to_json(const CascadeConfig& c) {
  return {{"patch", c.patch},       {"m_in", c.m_in},         {"cascades", c.cascades},
          {"l_max_initial", c.l_max_initial}, {"l_max", c.l_max}, {"schedule", c.schedule},
          {"pre_output", c.pre_output}, {"dc_enabled", c.dc_enabled}, {"lambda_init", c.lambda_init}};
}

inline CascadeConfig cascade_config_from_json(const nlohmann::json& j, CascadeConfig base = {}) {
  try {
    if (j.contains("preset")) {
      const std::string p = j.at("preset").get<std::string>();
      if (p == "paper") base = CascadeConfig::paper();
      else if (p == "desk") base = CascadeConfig::desk();
      else throw ConfigError("unknown cascade preset '" + p + "'");
    }
    base.patch = j.value("patch", base.patch);
    base.m_in = j.value("m_in", base.m_in);
    base.cascades = j.value("cascades", base.cascades);
    base.l_max_initial = j.value("l_max_initial", base.l_max_initial);
    base.l_max = j.value("l_max", base.l_max);
    base.schedule = j.value("schedule", base.schedule);
    base.pre_output = j.value("pre_output", base.pre_output);
    base.dc_enabled = j.value("dc_enabled", base.dc_enabled);
    base.lambda_init = j.value("lambda_init", base.lambda_init);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid cascade config: ") + e.what());
  }
  base.validate();
  return base;
}

/// DWI patches [m_in x B p^3] (see nn::Grid for the column order) with
/// centre-voxel targets and fixel-count labels.
struct PatchBatch {
  int batch = 0;
  int patch = 0;
  Eigen::MatrixXd dwi;
  Eigen::MatrixXd target;  // [n_total x B]
  std::vector<int> labels;
  std::vector<int> centres;
};

/// Per-voxel DWI-consistency solve (1/m F'F + lambda I) c = 1/m F'b + lambda w
/// on the active columns; inactive WM orders pass through from w.
class DcSolver {
 public:
  DcSolver(const ConvolutionOperator& full, int l_max_active)
      : cols_(active_columns(full, l_max_active)), n_full_(full.cols()), m_(full.rows()) {
    F_ = restrict_operator(full, l_max_active).matrix;
    gram_ = F_.transpose() * F_ / static_cast<double>(m_);
  }

  int active() const { return static_cast<int>(cols_.size()); }
  const std::vector<int>& columns() const { return cols_; }
  const Eigen::MatrixXd& restricted() const { return F_; }

  Eigen::MatrixXd system(double lambda) const {
    Eigen::MatrixXd M = gram_;
    M.diagonal().array() += lambda;
    return M;
  }

  Eigen::MatrixXd rhs(const Eigen::MatrixXd& b, const Eigen::MatrixXd* w, double lambda) const {
    Eigen::MatrixXd r = F_.transpose() * b / static_cast<double>(m_);
    if (w) r += lambda * gather(*w);
    return r;
  }

  /// b: [m x N], w: [n_full x N] or null. Returns [n_full x N].
  Eigen::MatrixXd solve(const Eigen::MatrixXd& b, const Eigen::MatrixXd* w, double lambda) const {
    if (!(lambda > 0.0)) throw InvalidInput("DC penalty lambda must be positive");
    if (b.rows() != m_) throw InvalidInput("DC input has " + std::to_string(b.rows()) + " volumes, operator has " + std::to_string(m_));
    Eigen::LLT<Eigen::MatrixXd> llt(system(lambda));
    if (llt.info() != Eigen::Success) throw InternalError("DC system is not positive definite");
    const Eigen::MatrixXd ca = llt.solve(rhs(b, w, lambda));
    Eigen::MatrixXd c = w ? *w : Eigen::MatrixXd::Zero(n_full_, b.cols());
    scatter(ca, c);
    return c;
  }

  Eigen::MatrixXd gather(const Eigen::MatrixXd& full) const {
    Eigen::MatrixXd a(active(), full.cols());
    for (int k = 0; k < active(); ++k) a.row(k) = full.row(cols_[static_cast<std::size_t>(k)]);
    return a;
  }
  void scatter(const Eigen::MatrixXd& a, Eigen::MatrixXd& full) const {
    for (int k = 0; k < active(); ++k) full.row(cols_[static_cast<std::size_t>(k)]) = a.row(k);
  }

  struct Grad {
    Eigen::MatrixXd dw;  // empty when w was absent
    Eigen::MatrixXd db;
    double dlambda = 0.0;
  };

  /// Adjoint of solve(): y = M^{-1} dc_active, dw = lambda y (active) and dc
  /// (inactive), dlambda = sum y.(w - c), db = F y / m.
  Grad backward(const Eigen::MatrixXd& c, const Eigen::MatrixXd* w, double lambda, const Eigen::MatrixXd& dc) const {
    Eigen::LLT<Eigen::MatrixXd> llt(system(lambda));
    const Eigen::MatrixXd y = llt.solve(gather(dc));
    Grad g;
    const Eigen::MatrixXd ca = gather(c);
    if (w) {
      g.dw = dc;
      Eigen::MatrixXd act = lambda * y;
      scatter(act, g.dw);
      g.dlambda = (y.array() * (gather(*w) - ca).array()).sum();
    } else {
      g.dlambda = -(y.array() * ca.array()).sum();
    }
    g.db = F_ * y / static_cast<double>(m_);
    return g;
  }

 private:
  std::vector<int> cols_;
  int n_full_;
  int m_;
  Eigen::MatrixXd F_;
  Eigen::MatrixXd gram_;
};

/// Layers of one regularisation block.
struct RegBlock {
  std::vector<nn::Conv3d> convs;
  std::vector<nn::BatchNorm> norms;
  std::vector<nn::PRelu> acts;
  nn::Conv3d pre;
  nn::PRelu pre_act;
  nn::Conv3d out;

  struct Cache {
    nn::Grid grid;
    std::vector<nn::Mat> conv_in;
    std::vector<nn::BatchNorm::Cache> bn;
    std::vector<nn::Mat> act_in;
    nn::Mat pre_in, pre_act_in, out_in, glu_in;
  };

  /// x: concatenated input [2 n_total x B q^3]; returns the GLU output on side q-2.
  nn::Mat forward(nn::ParamStore& ps, const nn::Mat& x, nn::Grid g, nn::Mode mode, Cache* cache) const {
    nn::Mat h = x;
    if (cache) cache->grid = g;
    for (std::size_t i = 0; i < convs.size(); ++i) {
      if (cache) cache->conv_in.push_back(h);
      nn::Mat z = convs[i].forward(ps, h, g);
      nn::BatchNorm::Cache bc;
      nn::Mat zn = norms[i].forward(ps, z, mode, cache ? &bc : nullptr);
      if (cache) {
        cache->bn.push_back(std::move(bc));
        cache->act_in.push_back(zn);
      }
      h = acts[i].forward(ps, zn);
    }
    if (cache) cache->pre_in = h;
    nn::Mat p = pre.forward(ps, h, g);
    if (cache) cache->pre_act_in = p;
    const nn::Grid g2{g.batch, g.side - 2};
    nn::Mat a = pre_act.forward(ps, p);
    if (cache) cache->out_in = a;
    nn::Mat o = out.forward(ps, a, g2);
    if (cache) cache->glu_in = o;
    return nn::glu(o);
  }

  nn::Mat backward(nn::ParamStore& ps, const Cache& c, const nn::Mat& dglu) const {
    const nn::Grid g = c.grid, g2{g.batch, g.side - 2};
    nn::Mat d = nn::glu_backward(c.glu_in, dglu);
    d = out.backward(ps, c.out_in, g2, d);
    d = pre_act.backward(ps, c.pre_act_in, d);
    d = pre.backward(ps, c.pre_in, g, d);
    for (std::size_t i = convs.size(); i-- > 0;) {
      d = acts[i].backward(ps, c.act_in[i], d);
      d = norms[i].backward(ps, c.bn[i], d);
      d = convs[i].backward(ps, c.conv_in[i], g, d);
    }
    return d;
  }
};

class Cascade {
 public:
  struct Tape {
    nn::Mode mode = nn::Mode::Train;
    nn::Grid input_grid;
    Eigen::MatrixXd b;                    // scaled input
    std::vector<Eigen::MatrixXd> c;       // DC outputs (or pass-through) per stage, c[0] initial
    std::vector<Eigen::MatrixXd> w;       // reg outputs per cascade (after residual)
    std::vector<RegBlock::Cache> reg;
    std::vector<int> side;                // spatial side of c[k]
  };

  struct Gradients {
    Eigen::MatrixXd input;  // d loss / d dwi patches
  };

  Cascade(CascadeConfig cfg, const ConvolutionOperator& op) : cfg_(std::move(cfg)) {
    cfg_.validate();
    if (op.rows() != cfg_.m_in)
      throw InvalidInput("operator has " + std::to_string(op.rows()) + " rows, cascade expects " + std::to_string(cfg_.m_in));
    if (op.l_max_wm != cfg_.l_max)
      throw InvalidInput("operator l_max " + std::to_string(op.l_max_wm) + " differs from cascade l_max " + std::to_string(cfg_.l_max));
    dc_initial_.emplace(op, cfg_.l_max_initial);
    dc_full_.emplace(op, cfg_.l_max);
    build();
  }

  const CascadeConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }
  const DcSolver& dc_initial() const { return *dc_initial_; }
  const DcSolver& dc_full() const { return *dc_full_; }
  /// Global intensity factor applied to the DWI input.
  double scale = 1.0;

  double lambda(int k) const { return std::exp(ps_[theta_[static_cast<std::size_t>(k)]].value(0)); }
  int theta_index(int k) const { return theta_[static_cast<std::size_t>(k)]; }

  void init(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (auto& t : ps_.tensors()) t.grad.setZero();
    for (auto& blk : blocks_) {
      for (std::size_t i = 0; i < blk.convs.size(); ++i) {
        blk.convs[i].init(ps_, rng);
        ps_[blk.norms[i].gamma].value.setOnes();
        ps_[blk.norms[i].beta].value.setZero();
        ps_[blk.norms[i].running_mean].value.setZero();
        ps_[blk.norms[i].running_var].value.setOnes();
        ps_[blk.acts[i].slope].value.setConstant(0.25);
      }
      blk.pre.init(ps_, rng);
      ps_[blk.pre_act.slope].value.setConstant(0.25);
      // Start each block close to the identity on its residual path.
      blk.out.init(ps_, rng, 0.1);
    }
    for (int t : theta_) ps_[t].value.setConstant(std::log(cfg_.lambda_init));
  }

  /// Returns the centre-voxel prediction [n_total x B].
  Eigen::MatrixXd forward(const PatchBatch& batch, nn::Mode mode, Tape* tape = nullptr) {
    if (batch.patch != cfg_.patch) throw InvalidInput("batch patch size " + std::to_string(batch.patch) + " differs from config " + std::to_string(cfg_.patch));
    const nn::Grid g0{batch.batch, cfg_.patch};
    if (batch.dwi.rows() != cfg_.m_in || batch.dwi.cols() != g0.columns())
      throw InvalidInput("DWI batch is " + std::to_string(batch.dwi.rows()) + "x" + std::to_string(batch.dwi.cols()) +
                         ", expected " + std::to_string(cfg_.m_in) + "x" + std::to_string(g0.columns()));
    Tape local;
    Tape& t = tape ? *tape : local;
    t = Tape{};
    t.mode = mode;
    t.input_grid = g0;
    t.b = scale * batch.dwi;
    t.c.push_back(dc_initial_->solve(t.b, nullptr, lambda(0)));
    t.side.push_back(cfg_.patch);
    for (int k = 1; k <= cfg_.cascades; ++k) {
      const int q = t.side.back();
      const nn::Grid g{batch.batch, q};
      const Eigen::MatrixXd& prev = t.c.back();
      const Eigen::MatrixXd prev2 = k == 1 ? prev : nn::crop(t.c[t.c.size() - 2], {batch.batch, q + 2}, q);
      Eigen::MatrixXd x(2 * cfg_.n_total(), g.columns());
      x.topRows(cfg_.n_total()) = prev;
      x.bottomRows(cfg_.n_total()) = prev2;
      RegBlock::Cache cache;
      Eigen::MatrixXd w = blocks_[static_cast<std::size_t>(k - 1)].forward(ps_, x, g, mode, tape ? &cache : nullptr);
      w += nn::crop(prev, g, q - 2);
      if (tape) t.reg.push_back(std::move(cache));
      t.side.push_back(q - 2);
      if (cfg_.dc_enabled) {
        const Eigen::MatrixXd bk = nn::crop(t.b, g0, q - 2);
        t.c.push_back(dc_full_->solve(bk, &w, lambda(k)));
      } else {
        t.c.push_back(w);
      }
      t.w.push_back(std::move(w));
    }
    return center(t.c.back(), {batch.batch, t.side.back()});
  }

  /// Accumulates parameter gradients of <dout, forward(...)> into params().
  Gradients backward(const Tape& t, const Eigen::MatrixXd& dout) {
    if (t.mode != nn::Mode::Train) throw InvalidState("backward needs a train-mode tape");
    if (t.c.empty() || t.reg.size() != static_cast<std::size_t>(cfg_.cascades))
      throw InvalidState("tape was not recorded");
    const int B = t.input_grid.batch;
    std::vector<Eigen::MatrixXd> dc(t.c.size());
    for (std::size_t i = 0; i < t.c.size(); ++i) dc[i] = Eigen::MatrixXd::Zero(t.c[i].rows(), t.c[i].cols());
    dc.back() = center_backward(dout, {B, t.side.back()});
    Eigen::MatrixXd db = Eigen::MatrixXd::Zero(t.b.rows(), t.b.cols());

    for (int k = cfg_.cascades; k >= 1; --k) {
      const int q = t.side[static_cast<std::size_t>(k - 1)];
      const nn::Grid g{B, q};
      Eigen::MatrixXd dw;
      if (cfg_.dc_enabled) {
        const Eigen::MatrixXd& w = t.w[static_cast<std::size_t>(k - 1)];
        const DcSolver::Grad gr = dc_full_->backward(t.c[static_cast<std::size_t>(k)], &w, lambda(k), dc[static_cast<std::size_t>(k)]);
        ps_[theta_[static_cast<std::size_t>(k)]].grad(0) += lambda(k) * gr.dlambda;
        db += nn::crop_backward(gr.db, t.input_grid, q - 2);
        dw = gr.dw;
      } else {
        dw = dc[static_cast<std::size_t>(k)];
      }
      // Residual path and the block itself.
      dc[static_cast<std::size_t>(k - 1)] += nn::crop_backward(dw, g, q - 2);
      const Eigen::MatrixXd dx = blocks_[static_cast<std::size_t>(k - 1)].backward(ps_, t.reg[static_cast<std::size_t>(k - 1)], dw);
      dc[static_cast<std::size_t>(k - 1)] += dx.topRows(cfg_.n_total());
      if (k == 1)
        dc[0] += dx.bottomRows(cfg_.n_total());
      else
        dc[static_cast<std::size_t>(k - 2)] += nn::crop_backward(dx.bottomRows(cfg_.n_total()), {B, q + 2}, q);
    }
    const DcSolver::Grad g0 = dc_initial_->backward(t.c[0], nullptr, lambda(0), dc[0]);
    ps_[theta_[0]].grad(0) += lambda(0) * g0.dlambda;
    db += g0.db;
    return {scale * db};
  }

 private:
  void build() {
    const int n = cfg_.n_total();
    theta_.push_back(ps_.add("dc0.theta", {1}));
    for (int k = 1; k <= cfg_.cascades; ++k) {
      const std::string p = "reg" + std::to_string(k);
      RegBlock blk;
      int width = 2 * n;
      for (std::size_t i = 0; i < cfg_.schedule.size(); ++i) {
        const std::string s = p + ".stage" + std::to_string(i);
        blk.convs.push_back(nn::Conv3d::make(ps_, s + ".conv", width, cfg_.schedule[i], 3, 1, false));
        blk.norms.push_back(nn::BatchNorm::make(ps_, s + ".bn", cfg_.schedule[i]));
        blk.acts.push_back(nn::PRelu::make(ps_, s + ".prelu"));
        width = cfg_.schedule[i];
      }
      blk.pre = nn::Conv3d::make(ps_, p + ".pre.conv", width, cfg_.pre_output, 3, 0, true);
      blk.pre_act = nn::PRelu::make(ps_, p + ".pre.prelu");
      blk.out = nn::Conv3d::make(ps_, p + ".out.conv", cfg_.pre_output, 2 * n, 1, 0, true);
      blocks_.push_back(std::move(blk));
      theta_.push_back(ps_.add("dc" + std::to_string(k) + ".theta", {1}));
    }
    init(0);
  }

  static Eigen::MatrixXd center(const Eigen::MatrixXd& x, nn::Grid g) {
    const int S = g.side, h = S / 2;
    Eigen::MatrixXd out(x.rows(), g.batch);
    for (int b = 0; b < g.batch; ++b)
      out.col(b) = x.col(((static_cast<Eigen::Index>(b) * S + h) * S + h) * S + h);
    return out;
  }
  static Eigen::MatrixXd center_backward(const Eigen::MatrixXd& d, nn::Grid g) {
    const int S = g.side, h = S / 2;
    Eigen::MatrixXd out = Eigen::MatrixXd::Zero(d.rows(), g.columns());
    for (int b = 0; b < g.batch; ++b)
      out.col(((static_cast<Eigen::Index>(b) * S + h) * S + h) * S + h) = d.col(b);
    return out;
  }

  CascadeConfig cfg_;
  std::optional<DcSolver> dc_initial_, dc_full_;
  nn::ParamStore ps_;
  std::vector<RegBlock> blocks_;
  std::vector<int> theta_;
};

}  // namespace fodforge
