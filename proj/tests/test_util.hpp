#pragma once

#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "fodforge/sh_basis.hpp"

namespace fodforge::testing {

inline Vec3 random_unit(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Vec3 v(n(rng), n(rng), n(rng));
  return v.normalized();
}

inline DirectionList random_directions(std::mt19937_64& rng, int count) {
  DirectionList d(count, 3);
  for (int i = 0; i < count; ++i) d.row(i) = random_unit(rng).transpose();
  return d;
}

inline Eigen::VectorXd random_vector(std::mt19937_64& rng, int n, double scale = 1.0) {
  std::normal_distribution<double> g(0.0, scale);
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v(i) = g(rng);
  return v;
}

inline double rel_err(double a, double b, double floor = 1e-300) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace fodforge::testing
