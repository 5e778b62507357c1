#pragma once

// Lawson-Hanson active-set solvers: non-negative least squares and least
// distance programming.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include <Eigen/Dense>

namespace fodforge {

struct NnlsResult {
  Eigen::VectorXd x;
  bool converged = false;
  int iterations = 0;
  /// ||E x - f||^2 after every outer iteration; non-increasing.
  std::vector<double> objective_trace;
};

/// min ||E x - f|| subject to x >= 0.
inline NnlsResult nnls(const Eigen::Ref<const Eigen::MatrixXd>& E, const Eigen::Ref<const Eigen::VectorXd>& f,
                       int max_outer) {
  const Eigen::Index n = E.cols();
  NnlsResult res;
  res.x = Eigen::VectorXd::Zero(n);
  std::vector<char> passive(static_cast<std::size_t>(n), 0);
  const double tol = 10.0 * std::numeric_limits<double>::epsilon() *
                     std::max<double>(1.0, E.cwiseAbs().maxCoeff()) * static_cast<double>(std::max(E.rows(), n));

  Eigen::VectorXd resid = f;
  Eigen::VectorXd w = E.transpose() * resid;
  Eigen::VectorXd z(n);
  std::vector<int> P;

  auto solve_passive = [&]() {
    P.clear();
    for (Eigen::Index j = 0; j < n; ++j)
      if (passive[static_cast<std::size_t>(j)]) P.push_back(static_cast<int>(j));
    Eigen::MatrixXd Ep(E.rows(), static_cast<Eigen::Index>(P.size()));
    for (std::size_t k = 0; k < P.size(); ++k) Ep.col(static_cast<Eigen::Index>(k)) = E.col(P[k]);
    const Eigen::VectorXd zp = Ep.colPivHouseholderQr().solve(f);
    z.setZero();
    for (std::size_t k = 0; k < P.size(); ++k) z(P[k]) = zp(static_cast<Eigen::Index>(k));
  };

  while (res.iterations < max_outer) {
    Eigen::Index t = -1;
    double best = tol;
    for (Eigen::Index j = 0; j < n; ++j)
      if (!passive[static_cast<std::size_t>(j)] && w(j) > best) {
        best = w(j);
        t = j;
      }
    if (t < 0) {
      res.converged = true;
      break;
    }
    ++res.iterations;
    passive[static_cast<std::size_t>(t)] = 1;

    bool stalled = false;
    for (int inner = 0; inner < 3 * static_cast<int>(n) + 3; ++inner) {
      solve_passive();
      if (inner == 0 && z(t) <= 0.0) {
        // Rounding made the entering column useless; the current point is optimal to working precision.
        passive[static_cast<std::size_t>(t)] = 0;
        stalled = true;
        break;
      }
      bool feasible = true;
      for (int j : P)
        if (z(j) <= 0.0) feasible = false;
      if (feasible) {
        res.x = z;
        break;
      }
      double alpha = 1.0;
      for (int j : P)
        if (z(j) <= 0.0) alpha = std::min(alpha, res.x(j) / (res.x(j) - z(j)));
      res.x += alpha * (z - res.x);
      for (int j : P)
        if (res.x(j) <= tol) {
          res.x(j) = 0.0;
          passive[static_cast<std::size_t>(j)] = 0;
        }
    }
    resid = f - E * res.x;
    w = E.transpose() * resid;
    res.objective_trace.push_back(resid.squaredNorm());
    if (stalled) {
      res.converged = true;
      break;
    }
  }
  if (!res.converged) {
    // Outer loop exhausted; report convergence if the dual condition holds anyway.
    bool done = true;
    for (Eigen::Index j = 0; j < n; ++j)
      if (!passive[static_cast<std::size_t>(j)] && w(j) > tol) done = false;
    res.converged = done;
  }
  return res;
}

struct LdpResult {
  Eigen::VectorXd x;
  /// Multipliers of G x >= h at the solution (x = G^T multipliers).
  Eigen::VectorXd multipliers;
  bool feasible = false;
  bool converged = false;
  int iterations = 0;
  std::vector<double> objective_trace;
};

/// min ||x|| subject to G x >= h.
inline LdpResult ldp(const Eigen::Ref<const Eigen::MatrixXd>& G, const Eigen::Ref<const Eigen::VectorXd>& h,
                     int max_outer) {
  const Eigen::Index n = G.cols();
  const Eigen::Index m = G.rows();
  LdpResult out;
  out.x = Eigen::VectorXd::Zero(n);
  out.multipliers = Eigen::VectorXd::Zero(m);
  if (m == 0 || h.maxCoeff() <= 0.0) {
    out.feasible = out.converged = true;
    return out;
  }
  Eigen::MatrixXd E(n + 1, m);
  E.topRows(n) = G.transpose();
  E.row(n) = h.transpose();
  Eigen::VectorXd f = Eigen::VectorXd::Zero(n + 1);
  f(n) = 1.0;
  NnlsResult nn = nnls(E, f, max_outer);
  out.iterations = nn.iterations;
  out.converged = nn.converged;
  out.objective_trace = std::move(nn.objective_trace);
  const Eigen::VectorXd r = E * nn.x - f;
  if (r.norm() <= 1e-14 || r(n) >= 0.0) return out;
  out.feasible = true;
  out.x = -r.head(n) / r(n);
  out.multipliers = nn.x / (-r(n));
  return out;
}

}  // namespace fodforge
