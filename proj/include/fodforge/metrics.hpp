#pragma once

// Voxel-wise FOD comparison metrics.

#include <cmath>
#include <optional>
#include <string>

#include <Eigen/Dense>

#include "fodforge/error.hpp"
#include "fodforge/volume.hpp"

namespace fodforge {

namespace detail {
inline void require_same_length(Eigen::Index a, Eigen::Index b, const char* what) {
  if (a != b)
    throw InvalidInput(std::string(what) + ": length mismatch (" + std::to_string(a) + " vs " + std::to_string(b) + ")");
}
}  // namespace detail

/// Sum of squared coefficient differences.
inline double sse(const Eigen::Ref<const Eigen::VectorXd>& c, const Eigen::Ref<const Eigen::VectorXd>& c_hat) {
  detail::require_same_length(c.size(), c_hat.size(), "sse");
  return (c - c_hat).squaredNorm();
}

/// Angular correlation over the l >= 2 coefficients (index 0 is skipped).
/// Empty when either l >= 2 part is all zero.
inline std::optional<double> acc(const Eigen::Ref<const Eigen::VectorXd>& c, const Eigen::Ref<const Eigen::VectorXd>& c_hat) {
  detail::require_same_length(c.size(), c_hat.size(), "acc");
  if (c.size() < 2) return std::nullopt;
  const auto u = c.tail(c.size() - 1);
  const auto v = c_hat.tail(c_hat.size() - 1);
  const double nu = u.norm(), nv = v.norm();
  if (nu == 0.0 || nv == 0.0) return std::nullopt;
  if (u == v) return 1.0;
  return u.dot(v) / (nu * nv);
}

/// L1 distance between padded peak-amplitude vectors.
inline double pae(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& f_hat) {
  detail::require_same_length(f.size(), f_hat.size(), "pae");
  return (f - f_hat).cwiseAbs().sum();
}

/// L1 distance between padded AFD vectors.
inline double afde(const Eigen::Ref<const Eigen::VectorXd>& f, const Eigen::Ref<const Eigen::VectorXd>& f_hat) {
  detail::require_same_length(f.size(), f_hat.size(), "afde");
  return (f - f_hat).cwiseAbs().sum();
}

/// Share of ROI voxels whose counts agree; empty for an empty ROI.
inline std::optional<double> fixel_accuracy(const Volume& pred_counts, const Volume& true_counts, const Volume& roi) {
  if (pred_counts.spatial() != true_counts.spatial() || pred_counts.spatial() != roi.spatial())
    throw InvalidInput("fixel accuracy: shapes differ (" + pred_counts.shape_string() + ", " + true_counts.shape_string() +
                       ", " + roi.shape_string() + ")");
  long hits = 0, total = 0;
  for (int v = 0; v < roi.voxel_count(); ++v) {
    if (roi.value(v, 0) < 0.5f) continue;
    ++total;
    if (pred_counts.value(v, 0) == true_counts.value(v, 0)) ++hits;
  }
  if (total == 0) return std::nullopt;
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace fodforge
