#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "fodforge/error.hpp"
#include "fodforge/sh_basis.hpp"
#include "fodforge/sphere_mesh.hpp"

namespace fodforge {

inline constexpr double kShellTolerance = 75.0;  // s/mm^2
inline constexpr double kB0Threshold = 75.0;     // s/mm^2

struct Shell {
  double nominal_b = 0.0;
  std::vector<int> volumes;  // ascending acquisition order
};

/// Gradient table of a DWI acquisition plus its shell decomposition.
class AcquisitionScheme {
 public:
  AcquisitionScheme() = default;

  AcquisitionScheme(std::vector<Vec3> bvecs, std::vector<double> bvals)
      : bvecs_(std::move(bvecs)), bvals_(std::move(bvals)) {
    if (bvecs_.size() != bvals_.size())
      throw InvalidInput("b-vector and b-value counts differ (" + std::to_string(bvecs_.size()) +
                         " vs " + std::to_string(bvals_.size()) + ")");
    for (std::size_t v = 0; v < bvecs_.size(); ++v) {
      if (bvals_[v] > kB0Threshold && std::abs(bvecs_[v].norm() - 1.0) > 1e-3)
        throw InvalidInput("volume " + std::to_string(v) + " has a non-unit b-vector");
      if (bvals_[v] < 0.0) throw InvalidInput("negative b-value at volume " + std::to_string(v));
    }
    cluster_shells();
  }

  int volumes() const { return static_cast<int>(bvals_.size()); }
  const std::vector<Vec3>& bvecs() const { return bvecs_; }
  const std::vector<double>& bvals() const { return bvals_; }
  const std::vector<Shell>& shells() const { return shells_; }
  int shell_of(int volume) const { return shell_index_.at(static_cast<std::size_t>(volume)); }
  bool is_b0(int volume) const { return bvals_.at(static_cast<std::size_t>(volume)) <= kB0Threshold; }
  bool has_b0_shell() const { return !shells_.empty() && shells_.front().nominal_b == 0.0; }

 private:
  void cluster_shells() {
    std::vector<int> order(bvals_.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return bvals_[a] < bvals_[b]; });

    std::vector<std::vector<int>> groups;
    double last = -1e300;
    bool last_b0 = false;
    for (int v : order) {
      const double b = bvals_[static_cast<std::size_t>(v)];
      const bool b0 = b <= kB0Threshold;
      if (groups.empty() || (b0 != last_b0) || (!b0 && b - last > kShellTolerance)) groups.emplace_back();
      groups.back().push_back(v);
      last = b;
      last_b0 = b0;
    }

    shells_.clear();
    shell_index_.assign(bvals_.size(), -1);
    for (auto& g : groups) {
      Shell s;
      if (bvals_[static_cast<std::size_t>(g.front())] <= kB0Threshold) {
        s.nominal_b = 0.0;
      } else {
        double mean = 0.0;
        for (int v : g) mean += bvals_[static_cast<std::size_t>(v)];
        mean /= static_cast<double>(g.size());
        s.nominal_b = std::round(mean / 50.0) * 50.0;
        for (int v : g)
          if (std::abs(bvals_[static_cast<std::size_t>(v)] - s.nominal_b) > kShellTolerance)
            throw ParseError("b-value " + std::to_string(bvals_[static_cast<std::size_t>(v)]) +
                             " does not fit within +/-75 of shell " + std::to_string(s.nominal_b));
      }
      std::sort(g.begin(), g.end());
      s.volumes = std::move(g);
      shells_.push_back(std::move(s));
    }
    for (std::size_t i = 0; i < shells_.size(); ++i)
      for (int v : shells_[i].volumes) shell_index_[static_cast<std::size_t>(v)] = static_cast<int>(i);
  }

  std::vector<Vec3> bvecs_;
  std::vector<double> bvals_;
  std::vector<Shell> shells_;
  std::vector<int> shell_index_;
};

namespace detail {

inline std::vector<std::vector<double>> parse_rows(const std::string& text, const char* what) {
  std::vector<std::vector<double>> rows;
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    std::istringstream tokens(line);
    std::string tok;
    std::vector<double> row;
    while (tokens >> tok) {
      std::size_t used = 0;
      double value = 0.0;
      try {
        value = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size())
        throw ParseError(std::string(what) + " line " + std::to_string(line_no) + ": non-numeric token '" + tok + "'");
      row.push_back(value);
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

/// Reads FSL-style bvec (3 rows) and bval (1 row) text.
inline AcquisitionScheme parse_scheme(const std::string& bvec_text, const std::string& bval_text) {
  const auto vec_rows = detail::parse_rows(bvec_text, "bvec");
  const auto val_rows = detail::parse_rows(bval_text, "bval");
  if (vec_rows.size() != 3)
    throw ParseError("bvec must have 3 rows, found " + std::to_string(vec_rows.size()));
  if (val_rows.size() != 1)
    throw ParseError("bval must have 1 row, found " + std::to_string(val_rows.size()));
  const std::size_t n = val_rows[0].size();
  for (const auto& r : vec_rows)
    if (r.size() != n)
      throw ParseError("bvec row has " + std::to_string(r.size()) + " columns, bval has " + std::to_string(n));
  std::vector<Vec3> bvecs(n);
  for (std::size_t v = 0; v < n; ++v) {
    bvecs[v] = Vec3(vec_rows[0][v], vec_rows[1][v], vec_rows[2][v]);
    if (val_rows[0][v] > kB0Threshold && bvecs[v].norm() > 0.0) {
      // Text files carry limited precision; restore unit norm if within tolerance.
      if (std::abs(bvecs[v].norm() - 1.0) <= 1e-3) bvecs[v].normalize();
    }
  }
  return AcquisitionScheme(std::move(bvecs), val_rows[0]);
}

/// Serialises to (bvec text, bval text) with 6 significant digits.
inline std::pair<std::string, std::string> serialize_scheme(const AcquisitionScheme& scheme) {
  auto fmt = [](double x) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.6g", x);
    return std::string(buf);
  };
  std::string bvec;
  for (int axis = 0; axis < 3; ++axis) {
    for (int v = 0; v < scheme.volumes(); ++v) {
      if (v) bvec += ' ';
      bvec += fmt(scheme.bvecs()[static_cast<std::size_t>(v)](axis));
    }
    bvec += '\n';
  }
  std::string bval;
  for (int v = 0; v < scheme.volumes(); ++v) {
    if (v) bval += ' ';
    bval += fmt(scheme.bvals()[static_cast<std::size_t>(v)]);
  }
  bval += '\n';
  return {bvec, bval};
}

struct Subsampled {
  AcquisitionScheme scheme;
  std::vector<int> retained;  // ascending original volume indices
};

/// Keeps the first k volumes of every non-zero shell and the first n_b0 b0
/// volumes, by acquisition order.
inline Subsampled subsample_first_k(const AcquisitionScheme& scheme, int k_per_shell, int n_b0) {
  if (k_per_shell < 1) throw InvalidInput("k_per_shell must be positive");
  if (n_b0 < 0) throw InvalidInput("n_b0 must be non-negative");
  std::vector<int> keep;
  int b0_available = 0;
  for (const Shell& s : scheme.shells()) {
    if (s.nominal_b == 0.0) {
      b0_available = static_cast<int>(s.volumes.size());
      if (b0_available < n_b0)
        throw CapacityError("b0 shell has " + std::to_string(b0_available) + " volumes, " +
                            std::to_string(n_b0) + " requested");
      keep.insert(keep.end(), s.volumes.begin(), s.volumes.begin() + n_b0);
    } else {
      if (static_cast<int>(s.volumes.size()) < k_per_shell)
        throw CapacityError("shell b=" + std::to_string(static_cast<int>(s.nominal_b)) + " has " +
                            std::to_string(s.volumes.size()) + " volumes, " + std::to_string(k_per_shell) +
                            " requested");
      keep.insert(keep.end(), s.volumes.begin(), s.volumes.begin() + k_per_shell);
    }
  }
  if (n_b0 > 0 && b0_available == 0) throw CapacityError("scheme has no b0 volumes, " + std::to_string(n_b0) + " requested");
  std::sort(keep.begin(), keep.end());
  std::vector<Vec3> bvecs;
  std::vector<double> bvals;
  for (int v : keep) {
    bvecs.push_back(scheme.bvecs()[static_cast<std::size_t>(v)]);
    bvals.push_back(scheme.bvals()[static_cast<std::size_t>(v)]);
  }
  return {AcquisitionScheme(std::move(bvecs), std::move(bvals)), std::move(keep)};
}

/// Restricts per-volume data columns to the given indices.
template <typename Vector>
Vector select_volumes(const Vector& signal, const std::vector<int>& indices) {
  Vector out(static_cast<Eigen::Index>(indices.size()));
  for (std::size_t i = 0; i < indices.size(); ++i) out(static_cast<Eigen::Index>(i)) = signal(indices[i]);
  return out;
}

/// Orders directions so every prefix is spread out (greedy farthest point,
/// treating d and -d as the same axis).
inline std::vector<Vec3> spread_order(const DirectionList& dirs) {
  const Eigen::Index n = dirs.rows();
  std::vector<Vec3> out;
  std::vector<double> closest(static_cast<std::size_t>(n), 2.0);
  std::vector<bool> used(static_cast<std::size_t>(n), false);
  Eigen::Index next = 0;
  for (Eigen::Index k = 0; k < n; ++k) {
    used[static_cast<std::size_t>(next)] = true;
    const Vec3 chosen = dirs.row(next).transpose();
    out.push_back(chosen);
    Eigen::Index best = -1;
    double best_gap = -1.0;
    for (Eigen::Index j = 0; j < n; ++j) {
      if (used[static_cast<std::size_t>(j)]) continue;
      const double gap = 1.0 - std::abs(chosen.dot(dirs.row(j).transpose()));
      closest[static_cast<std::size_t>(j)] = std::min(closest[static_cast<std::size_t>(j)], gap);
      if (closest[static_cast<std::size_t>(j)] > best_gap) {
        best_gap = closest[static_cast<std::size_t>(j)];
        best = j;
      }
    }
    next = best;
  }
  return out;
}

/// A multi-shell protocol laid out like large connectome acquisitions:
/// `dirs_per_shell` directions per shell (each shell's set rotated relative
/// to the others, prefix-spread), shells interleaved volume by volume, and
/// b0 volumes inserted every `b0_every` volumes.
inline AcquisitionScheme make_interleaved_scheme(const std::vector<double>& shell_bvals, int dirs_per_shell,
                                                 int n_b0, int b0_every) {
  if (dirs_per_shell < 1 || b0_every < 1) throw InvalidInput("invalid interleaved scheme parameters");
  std::vector<std::vector<Vec3>> per_shell;
  for (std::size_t s = 0; s < shell_bvals.size(); ++s) {
    DirectionList d = detail::fibonacci_hemisphere(dirs_per_shell);
    detail::repel_antipodal(d, 200);
    const double angle = 0.7 * static_cast<double>(s + 1);
    const Eigen::Matrix3d rot = (Eigen::AngleAxisd(angle, Vec3(0.3, 0.5, 0.8).normalized())).toRotationMatrix();
    DirectionList rotated = d * rot.transpose();
    for (Eigen::Index i = 0; i < rotated.rows(); ++i) rotated.row(i).normalize();
    per_shell.push_back(spread_order(rotated));
  }
  std::vector<Vec3> bvecs;
  std::vector<double> bvals;
  int b0_left = n_b0;
  const int total_dwi = dirs_per_shell * static_cast<int>(shell_bvals.size());
  int dwi = 0;
  while (dwi < total_dwi || b0_left > 0) {
    const bool want_b0 = b0_left > 0 && (dwi >= total_dwi || static_cast<int>(bvals.size()) % b0_every == 0);
    if (want_b0) {
      bvecs.emplace_back(0.0, 0.0, 0.0);
      bvals.push_back(0.0);
      --b0_left;
      continue;
    }
    const std::size_t s = static_cast<std::size_t>(dwi) % shell_bvals.size();
    const std::size_t i = static_cast<std::size_t>(dwi) / shell_bvals.size();
    bvecs.push_back(per_shell[s][i]);
    bvals.push_back(shell_bvals[s]);
    ++dwi;
  }
  return AcquisitionScheme(std::move(bvecs), std::move(bvals));
}

/// 18 b0 + 90 directions at each of b = 1000, 2000, 3000 (288 volumes).
inline AcquisitionScheme connectome_like_scheme() {
  return make_interleaved_scheme({1000.0, 2000.0, 3000.0}, 90, 18, 16);
}

}  // namespace fodforge
