#pragma once

// Multi-shell multi-tissue constrained spherical deconvolution.
//
// min ||F c - b||^2  s.t.  WM amplitude >= -eps on the constraint mesh,
//                          GM >= 0, CSF >= 0.
// The strictly convex QP is mapped to least-distance form through the
// Cholesky factor of the Hessian and solved with Lawson-Hanson.

#include <algorithm>
#include <atomic>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "fodforge/error.hpp"
#include "fodforge/forward_model.hpp"
#include "fodforge/nnls.hpp"
#include "fodforge/sphere_mesh.hpp"
#include "fodforge/volume.hpp"

namespace fodforge {

struct CsdOptions {
  SphereMesh mesh = constraint_mesh();
  double epsilon = 0.0;
  /// Lawson-Hanson outer iterations; each one frees a single constraint, so
  /// noisy voxels with many active directions need well over 100.
  int max_iterations = 500;
  double tolerance = 1e-6;
};

enum class CsdStatus { Converged, NotConverged };

struct CsdResult {
  Eigen::VectorXd coeffs;
  CsdStatus status = CsdStatus::Converged;
  int iterations = 0;
  /// Tikhonov weight added to F^T F (non-zero only for underdetermined systems).
  double damping = 0.0;
  /// Multipliers of the constraint rows (mesh directions, then GM, CSF).
  Eigen::VectorXd multipliers;
  std::vector<double> objective_trace;
};

/// Precomputes the per-operator factorisations; fit() is const and thread-safe.
class CsdSolver {
 public:
  CsdSolver(const ConvolutionOperator& op, CsdOptions opts) : op_(op), opts_(std::move(opts)) {
    if (opts_.mesh.empty()) throw InvalidInput("constraint mesh is empty");
    if (opts_.epsilon < 0.0 || opts_.tolerance < 0.0) throw InvalidInput("CSD tolerances must be non-negative");
    if (opts_.max_iterations < 1) throw InvalidInput("CSD needs at least one iteration");
    const int n = op_.cols();
    const int wm = op_.wm_size();

    constraints_ = Eigen::MatrixXd::Zero(opts_.mesh.size() + 2, n);
    constraints_.topLeftCorner(opts_.mesh.size(), wm) = sh_basis_matrix(opts_.mesh.directions, ShScheme(op_.l_max_wm));
    constraints_(opts_.mesh.size(), op_.gm_index()) = 1.0;
    constraints_(opts_.mesh.size() + 1, op_.csf_index()) = 1.0;
    lower_ = Eigen::VectorXd::Zero(constraints_.rows());
    lower_.head(opts_.mesh.size()).setConstant(-opts_.epsilon);

    Eigen::MatrixXd H = op_.matrix.transpose() * op_.matrix;
    if (op_.rows() < n) damping_ = 1e-6 * op_.matrix.squaredNorm();
    H.diagonal().array() += damping_;
    hessian_ = H;
    Eigen::LLT<Eigen::MatrixXd> llt(H);
    if (llt.info() != Eigen::Success)
      throw InvalidInput("CSD system is rank deficient; the operator needs full column rank");
    R_ = llt.matrixU();
    // G = A R^{-1}
    G_ = R_.triangularView<Eigen::Upper>().solve<Eigen::OnTheRight>(constraints_);
  }

  const Eigen::MatrixXd& constraints() const { return constraints_; }
  const Eigen::VectorXd& lower_bounds() const { return lower_; }
  const Eigen::MatrixXd& hessian() const { return hessian_; }
  double damping() const { return damping_; }

  CsdResult fit(const Eigen::Ref<const Eigen::VectorXd>& signals) const {
    if (signals.size() != op_.rows())
      throw InvalidInput("signal has " + std::to_string(signals.size()) + " volumes, operator expects " +
                         std::to_string(op_.rows()));
    CsdResult res;
    res.damping = damping_;
    // Unconstrained optimum in the whitened coordinates z = R c.
    const Eigen::VectorXd z0 = R_.transpose().triangularView<Eigen::Lower>().solve(op_.matrix.transpose() * signals);
    const Eigen::VectorXd h = lower_ - G_ * z0;
    const LdpResult sol = ldp(G_, h, opts_.max_iterations);
    if (!sol.feasible) throw InternalError("CSD constraint set reported infeasible");
    res.coeffs = R_.triangularView<Eigen::Upper>().solve(z0 + sol.x);
    res.multipliers = sol.multipliers;
    res.iterations = sol.iterations;
    res.objective_trace = sol.objective_trace;
    res.status = sol.converged ? CsdStatus::Converged : CsdStatus::NotConverged;
    return res;
  }

  /// ||H c - F^T b - A^T mu|| at a returned solution.
  double kkt_residual(const CsdResult& r, const Eigen::Ref<const Eigen::VectorXd>& signals) const {
    return (hessian_ * r.coeffs - op_.matrix.transpose() * signals - constraints_.transpose() * r.multipliers).norm();
  }

 private:
  ConvolutionOperator op_;
  CsdOptions opts_;
  Eigen::MatrixXd constraints_;
  Eigen::VectorXd lower_;
  Eigen::MatrixXd hessian_;
  Eigen::MatrixXd R_;
  Eigen::MatrixXd G_;
  double damping_ = 0.0;
};

inline CsdResult fit_mt_csd(const Eigen::Ref<const Eigen::VectorXd>& signals, const ConvolutionOperator& op,
                            const CsdOptions& opts = {}) {
  return CsdSolver(op, opts).fit(signals);
}

struct VoxelwiseFit {
  Volume fod;
  int not_converged = 0;
};

/// Fits every masked voxel independently; zeros elsewhere. Voxels are split
/// into contiguous blocks across `threads` workers, so results do not depend
/// on scheduling.
inline VoxelwiseFit fit_voxelwise(const Volume& dwi, const ConvolutionOperator& op, const Volume& mask,
                                  const CsdOptions& opts = {}, int threads = 1) {
  if (dwi.spatial() != mask.spatial())
    throw InvalidInput("DWI " + dwi.shape_string() + " and mask " + mask.shape_string() + " differ spatially");
  if (dwi.channels() != op.rows())
    throw InvalidInput("DWI has " + std::to_string(dwi.channels()) + " volumes, operator expects " +
                       std::to_string(op.rows()));
  const CsdSolver solver(op, opts);
  VoxelwiseFit out{Volume(dwi.spatial(), op.cols(), VolumeKind::Fod), 0};
  out.fod.voxel_size = dwi.voxel_size;
  const int voxels = dwi.voxel_count();
  std::atomic<int> failures{0};
  auto work = [&](int begin, int end) {
    for (int v = begin; v < end; ++v) {
      if (mask.value(v, 0) < 0.5f) continue;
      const CsdResult r = solver.fit(dwi.voxel(v));
      if (r.status != CsdStatus::Converged) ++failures;
      out.fod.set_voxel(v, r.coeffs);
    }
  };
  threads = std::max(1, threads);
  if (threads == 1) {
    work(0, voxels);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (voxels + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) pool.emplace_back(work, std::min(voxels, t * chunk), std::min(voxels, (t + 1) * chunk));
    for (auto& th : pool) th.join();
  }
  out.not_converged = failures.load();
  return out;
}

}  // namespace fodforge
