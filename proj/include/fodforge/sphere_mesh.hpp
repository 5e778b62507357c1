#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fodforge/error.hpp"
#include "fodforge/sh_basis.hpp"

namespace fodforge {

/// Unit directions with solid-angle quadrature weights and a vertex adjacency.
struct SphereMesh {
  DirectionList directions;
  Eigen::VectorXd weights;
  /// True when vertex i + size()/2 is the antipode of vertex i.
  bool antipodal = false;
  std::vector<std::vector<int>> neighbours;

  int size() const { return static_cast<int>(directions.rows()); }
  bool empty() const { return directions.rows() == 0; }
  Vec3 direction(int i) const { return directions.row(i).transpose(); }
};

namespace detail {

// Fibonacci spiral over the upper hemisphere.
inline DirectionList fibonacci_hemisphere(int count) {
  DirectionList p(count, 3);
  const double golden = std::numbers::pi * (1.0 + std::sqrt(5.0));
  for (int i = 0; i < count; ++i) {
    const double t = i + 0.5;
    const double z = 1.0 - t / count;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    p.row(i) << r * std::cos(golden * t), r * std::sin(golden * t), z;
  }
  return p;
}

// Electrostatic repulsion of point pairs {p, -p}; operates on one
// representative per pair.
inline void repel_antipodal(DirectionList& p, int iterations) {
  const Eigen::Index n = p.rows();
  DirectionList force(n, 3);
  for (int it = 0; it < iterations; ++it) {
    force.setZero();
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::RowVector3d pi = p.row(i);
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const Eigen::RowVector3d pj = p.row(j);
        const Eigen::RowVector3d d1 = pi - pj;
        const Eigen::RowVector3d d2 = pi + pj;
        const double r1 = d1.norm();
        const double r2 = d2.norm();
        const Eigen::RowVector3d f1 = d1 / (r1 * r1 * r1);
        const Eigen::RowVector3d f2 = d2 / (r2 * r2 * r2);
        force.row(i) += f1 + f2;
        force.row(j) += -f1 + f2;
      }
    }
    double max_norm = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::RowVector3d pi = p.row(i);
      force.row(i) -= force.row(i).dot(pi) * pi;
      max_norm = std::max(max_norm, force.row(i).norm());
    }
    if (max_norm == 0.0) break;
    const double step = 0.5 / std::sqrt(static_cast<double>(n)) / (1.0 + 0.02 * it) / max_norm;
    for (Eigen::Index i = 0; i < n; ++i) {
      p.row(i) += step * force.row(i);
      p.row(i).normalize();
    }
  }
}

// Minimum-norm correction of equal weights such that the rule integrates every
// even harmonic up to `degree` exactly. Returns false if any weight would be
// non-positive.
inline bool fit_symmetric_weights(const DirectionList& half, int degree, Eigen::VectorXd& w) {
  const ShScheme scheme(degree);
  const Eigen::MatrixXd A = sh_basis_matrix(half, scheme).transpose();
  const Eigen::Index n = half.rows();
  const Eigen::VectorXd w0 = Eigen::VectorXd::Constant(n, 2.0 * std::numbers::pi / n);
  Eigen::VectorXd target = Eigen::VectorXd::Zero(A.rows());
  target(0) = std::sqrt(4.0 * std::numbers::pi) / 2.0;
  const Eigen::MatrixXd gram = A * A.transpose();
  const Eigen::VectorXd mult = gram.ldlt().solve(target - A * w0);
  w = w0 + A.transpose() * mult;
  return w.minCoeff() > 0.0;
}

inline std::vector<std::vector<int>> build_neighbours(const DirectionList& dirs) {
  const Eigen::Index n = dirs.rows();
  const Eigen::MatrixXd dots = dirs * dirs.transpose();
  std::vector<double> nearest(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    double best = -2.0;
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) best = std::max(best, dots(i, j));
    nearest[static_cast<std::size_t>(i)] = std::acos(std::clamp(best, -1.0, 1.0));
  }
  std::vector<double> sorted = nearest;
  std::nth_element(sorted.begin(), sorted.begin() + n / 2, sorted.end());
  const double radius = 1.6 * sorted[static_cast<std::size_t>(n / 2)];
  const double cos_radius = std::cos(radius);
  std::vector<std::vector<int>> adj(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i && dots(i, j) >= cos_radius) adj[static_cast<std::size_t>(i)].push_back(static_cast<int>(j));
  return adj;
}

}  // namespace detail

/// Checks unit norms and positive weights; throws InvalidInput otherwise.
inline void validate_mesh(const SphereMesh& mesh) {
  if (mesh.weights.size() != mesh.directions.rows())
    throw InvalidInput("mesh weight count does not match direction count");
  for (int i = 0; i < mesh.size(); ++i)
    if (std::abs(mesh.directions.row(i).norm() - 1.0) > 1e-12)
      throw InvalidInput("mesh direction " + std::to_string(i) + " is not unit-norm");
  if (mesh.size() > 0 && mesh.weights.minCoeff() <= 0.0)
    throw InvalidInput("mesh quadrature weights must be positive");
}

/// Antipodally symmetric mesh of `count` vertices (even), built by
/// electrostatic repulsion from a Fibonacci start. Weights sum to 4 pi and
/// integrate even harmonics exactly up to the largest degree the vertex count
/// supports (16 for the 724-point mesh).
inline SphereMesh make_symmetric_mesh(int count, int repulsion_iterations = 300) {
  if (count < 2 || count % 2 != 0)
    throw InvalidInput("symmetric mesh needs an even vertex count >= 2, got " + std::to_string(count));
  const int half = count / 2;
  DirectionList p = detail::fibonacci_hemisphere(half);
  detail::repel_antipodal(p, repulsion_iterations);

  Eigen::VectorXd w_half = Eigen::VectorXd::Constant(half, 2.0 * std::numbers::pi / half);
  for (int degree = 16; degree >= 2; degree -= 2) {
    if (ShScheme::count(degree) > half) continue;
    Eigen::VectorXd fitted;
    if (detail::fit_symmetric_weights(p, degree, fitted)) {
      w_half = fitted;
      break;
    }
  }

  SphereMesh mesh;
  mesh.antipodal = true;
  mesh.directions.resize(count, 3);
  mesh.directions.topRows(half) = p;
  mesh.directions.bottomRows(half) = -p;
  mesh.weights.resize(count);
  mesh.weights.head(half) = w_half;
  mesh.weights.tail(half) = w_half;
  mesh.neighbours = detail::build_neighbours(mesh.directions);
  return mesh;
}

/// Mesh over caller-supplied unit directions with equal weights summing to 4 pi.
inline SphereMesh make_mesh(const DirectionList& directions) {
  SphereMesh mesh;
  mesh.directions = directions;
  for (int i = 0; i < mesh.size(); ++i) mesh.directions.row(i).normalize();
  mesh.weights = Eigen::VectorXd::Constant(mesh.size(), 4.0 * std::numbers::pi / std::max(1, mesh.size()));
  if (mesh.size() > 1) mesh.neighbours = detail::build_neighbours(mesh.directions);
  return mesh;
}

/// The 724-vertex mesh used for quadrature and fixel segmentation.
inline const SphereMesh& dense_mesh() {
  static const SphereMesh mesh = make_symmetric_mesh(724);
  return mesh;
}

/// The 300-vertex mesh carrying the CSD non-negativity constraints.
inline const SphereMesh& constraint_mesh() {
  static const SphereMesh mesh = make_symmetric_mesh(300);
  return mesh;
}

}  // namespace fodforge
