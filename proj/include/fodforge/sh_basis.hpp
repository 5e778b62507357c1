#pragma once

// Real, antipodally symmetric spherical harmonics.
//
// Convention: Y_{l,0} is the real zonal harmonic, m > 0 maps to sqrt(2) Re(Y_l^m),
// m < 0 maps to sqrt(2) Im(Y_l^{|m|}). The Condon-Shortley phase is included and
// the basis is orthonormal over the unit sphere. Coefficients are ordered by
// ascending l, then ascending m.

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fodforge/error.hpp"

namespace fodforge {

using Vec3 = Eigen::Vector3d;
/// One direction per row.
using DirectionList = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

inline constexpr double kUnitNormTolerance = 1e-6;
/// Gaussian roll-off exp(-a l(l+1)) applied by delta_sh. At l_max 8 this is
/// the smallest value (to 0.01) for which the delta pair has no negative lobes.
inline constexpr double kDeltaApodization = 0.06;

/// Index table for even-order real SH up to l_max.
class ShScheme {
 public:
  ShScheme() = default;
  explicit ShScheme(int l_max) : l_max_(l_max) {
    if (l_max < 0 || l_max % 2 != 0)
      throw InvalidInput("SH order must be even and non-negative, got " + std::to_string(l_max));
    lm_.clear();
    lm_.reserve(static_cast<std::size_t>(count(l_max)));
    for (int l = 0; l <= l_max; l += 2)
      for (int m = -l; m <= l; ++m) lm_.emplace_back(l, m);
  }

  /// (l_max+1)(l_max+2)/2
  static constexpr int count(int l_max) { return (l_max + 1) * (l_max + 2) / 2; }
  /// Inverse of count(); -1 when n is not a valid coefficient count.
  static int l_max_for(int n) {
    for (int l = 0; count(l) <= n; l += 2)
      if (count(l) == n) return l;
    return -1;
  }

  int l_max() const { return l_max_; }
  int size() const { return static_cast<int>(lm_.size()); }

  int index(int l, int m) const {
    if (l < 0 || l > l_max_ || l % 2 != 0 || m < -l || m > l)
      throw InvalidInput("(l, m) = (" + std::to_string(l) + ", " + std::to_string(m) +
                         ") outside scheme with l_max " + std::to_string(l_max_));
    return count(l) - (2 * l + 1) + (l + m);
  }
  std::pair<int, int> degree_order(int j) const {
    if (j < 0 || j >= size()) throw InvalidInput("SH index out of range: " + std::to_string(j));
    return lm_[static_cast<std::size_t>(j)];
  }
  int degree(int j) const { return degree_order(j).first; }

  friend bool operator==(const ShScheme& a, const ShScheme& b) { return a.l_max_ == b.l_max_; }

 private:
  int l_max_ = 0;
  std::vector<std::pair<int, int>> lm_{{0, 0}};
};

namespace detail {

inline void require_unit(const Vec3& d) {
  if (std::abs(d.norm() - 1.0) > kUnitNormTolerance)
    throw InvalidInput("direction is not unit-norm (|d| = " + std::to_string(d.norm()) + ")");
}

// Fully normalised associated Legendre functions (Condon-Shortley phase
// included), so that Ybar_l^m(theta) = plm(l, m) * e^{i m phi} is orthonormal.
// Stored densely as plm[l * (l_max + 1) + m] for 0 <= m <= l.
inline void normalized_legendre(int l_max, double x, std::vector<double>& plm) {
  const int stride = l_max + 1;
  plm.assign(static_cast<std::size_t>(stride * stride), 0.0);
  const double s = std::sqrt(std::max(0.0, 1.0 - x * x));
  double pmm = std::sqrt(1.0 / (4.0 * std::numbers::pi));
  for (int m = 0; m <= l_max; ++m) {
    if (m > 0) pmm *= -s * std::sqrt((2.0 * m + 1.0) / (2.0 * m));
    plm[static_cast<std::size_t>(m * stride + m)] = pmm;
    if (m + 1 > l_max) continue;
    double prev2 = pmm;
    double prev1 = x * std::sqrt(2.0 * m + 3.0) * pmm;
    plm[static_cast<std::size_t>((m + 1) * stride + m)] = prev1;
    for (int l = m + 2; l <= l_max; ++l) {
      const double a = std::sqrt((4.0 * l * l - 1.0) / (static_cast<double>(l * l - m * m)));
      const double b = std::sqrt((static_cast<double>((l - 1) * (l - 1) - m * m)) /
                                 (4.0 * (l - 1) * (l - 1) - 1.0));
      const double cur = a * (x * prev1 - b * prev2);
      plm[static_cast<std::size_t>(l * stride + m)] = cur;
      prev2 = prev1;
      prev1 = cur;
    }
  }
}

// Even-order harmonics satisfy Y(-d) = Y(d); evaluating on a canonical
// hemisphere makes that identity hold bitwise.
inline Vec3 canonical_axis(const Vec3& d) {
  const bool flip = d.z() < 0.0 || (d.z() == 0.0 && (d.y() < 0.0 || (d.y() == 0.0 && d.x() < 0.0)));
  return flip ? Vec3(-d) : d;
}

inline void sh_row(const Vec3& direction, const ShScheme& scheme, std::vector<double>& plm,
                   double* out) {
  const Vec3 d = canonical_axis(direction);
  const int L = scheme.l_max();
  const int stride = L + 1;
  normalized_legendre(L, std::clamp(d.z(), -1.0, 1.0), plm);
  const double phi = std::atan2(d.y(), d.x());
  int j = 0;
  for (int l = 0; l <= L; l += 2) {
    for (int m = -l; m <= l; ++m, ++j) {
      const double p = plm[static_cast<std::size_t>(l * stride + std::abs(m))];
      if (m == 0)
        out[j] = p;
      else if (m > 0)
        out[j] = std::numbers::sqrt2 * p * std::cos(m * phi);
      else
        out[j] = std::numbers::sqrt2 * p * std::sin(-m * phi);
    }
  }
}

}  // namespace detail

/// D x n(l_max) matrix of basis functions evaluated at each direction.
inline Eigen::MatrixXd sh_basis_matrix(const DirectionList& directions, const ShScheme& scheme) {
  Eigen::MatrixXd Y(directions.rows(), scheme.size());
  std::vector<double> plm;
  std::vector<double> row(static_cast<std::size_t>(scheme.size()));
  for (Eigen::Index d = 0; d < directions.rows(); ++d) {
    const Vec3 v = directions.row(d).transpose();
    detail::require_unit(v);
    detail::sh_row(v, scheme, plm, row.data());
    for (int j = 0; j < scheme.size(); ++j) Y(d, j) = row[static_cast<std::size_t>(j)];
  }
  return Y;
}

inline Eigen::RowVectorXd sh_basis_row(const Vec3& direction, const ShScheme& scheme) {
  DirectionList one(1, 3);
  one.row(0) = direction.transpose();
  return sh_basis_matrix(one, scheme).row(0);
}

inline Eigen::VectorXd eval_amplitude(const Eigen::Ref<const Eigen::VectorXd>& coeffs,
                                      const DirectionList& directions, const ShScheme& scheme) {
  if (coeffs.size() != scheme.size())
    throw InvalidInput("coefficient vector has " + std::to_string(coeffs.size()) +
                       " entries, scheme expects " + std::to_string(scheme.size()));
  return sh_basis_matrix(directions, scheme) * coeffs;
}

/// Band-limited antipodal Dirac pair at +/-direction, normalised so its
/// integral over the sphere is 1. Each order l is attenuated by
/// exp(-apodization * l (l + 1)); apodization = 0 gives the plain truncation,
/// whose ringing produces spurious lobes above typical peak thresholds.
inline Eigen::VectorXd delta_sh(const Vec3& direction, const ShScheme& scheme,
                                double apodization = kDeltaApodization) {
  detail::require_unit(direction);
  Eigen::VectorXd c = sh_basis_row(direction, scheme).transpose();
  for (int j = 0; j < scheme.size(); ++j) {
    const int l = scheme.degree(j);
    c(j) *= std::exp(-apodization * l * (l + 1));
  }
  return c;
}

/// Integral of the SH function over the sphere (sqrt(4 pi) c_00).
inline double sh_integral(const Eigen::Ref<const Eigen::VectorXd>& coeffs) {
  return coeffs(0) * std::sqrt(4.0 * std::numbers::pi);
}

}  // namespace fodforge
