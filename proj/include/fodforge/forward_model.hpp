#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fodforge/acquisition.hpp"
#include "fodforge/error.hpp"
#include "fodforge/sh_basis.hpp"

namespace fodforge {

enum class Tissue { WM, GM, CSF };

inline const char* tissue_name(Tissue t) {
  switch (t) {
    case Tissue::WM: return "WM";
    case Tissue::GM: return "GM";
    case Tissue::CSF: return "CSF";
  }
  return "?";
}

/// Zonal SH coefficients of an axially symmetric response kernel, one row per
/// shell (ascending b, b0 first), one column per even order l = 0, 2, ...
struct ResponseFunction {
  Tissue tissue = Tissue::WM;
  Eigen::MatrixXd coeffs;

  int shells() const { return static_cast<int>(coeffs.rows()); }
  int l_max() const { return 2 * (static_cast<int>(coeffs.cols()) - 1); }
};

inline void validate_response(const ResponseFunction& r) {
  if (r.coeffs.rows() == 0 || r.coeffs.cols() == 0)
    throw ConfigError(std::string(tissue_name(r.tissue)) + " response is empty");
  if (r.tissue != Tissue::WM && r.coeffs.cols() != 1)
    throw ConfigError(std::string(tissue_name(r.tissue)) + " response must be isotropic (one column)");
  for (Eigen::Index s = 0; s < r.coeffs.rows(); ++s)
    if (!(r.coeffs(s, 0) > 0.0))
      throw ConfigError(std::string(tissue_name(r.tissue)) + " response has non-positive l=0 term on shell " +
                        std::to_string(s));
}

/// Parses a response text file: one row per shell, '#' starts a comment.
inline ResponseFunction parse_response(const std::string& text, Tissue tissue) {
  std::vector<std::vector<double>> rows;
  std::istringstream lines(text);
  std::string line;
  int line_no = 0;
  while (std::getline(lines, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream tokens(line);
    std::string tok;
    std::vector<double> row;
    while (tokens >> tok) {
      std::size_t used = 0;
      double v = 0.0;
      try {
        v = std::stod(tok, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != tok.size())
        throw ParseError("response line " + std::to_string(line_no) + ": non-numeric token '" + tok + "'");
      row.push_back(v);
    }
    if (!row.empty()) rows.push_back(std::move(row));
  }
  if (rows.empty()) throw ParseError("response file has no rows");
  const std::size_t width = rows.front().size();
  for (const auto& r : rows)
    if (r.size() != width) throw ParseError("response rows have inconsistent widths");
  ResponseFunction resp{tissue, Eigen::MatrixXd(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(width))};
  for (std::size_t s = 0; s < rows.size(); ++s)
    for (std::size_t l = 0; l < width; ++l) resp.coeffs(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(l)) = rows[s][l];
  validate_response(resp);
  return resp;
}

inline std::string serialize_response(const ResponseFunction& r) {
  std::string out = std::string("# ") + tissue_name(r.tissue) + " response, one row per shell\n";
  char buf[40];
  for (Eigen::Index s = 0; s < r.coeffs.rows(); ++s) {
    for (Eigen::Index l = 0; l < r.coeffs.cols(); ++l) {
      std::snprintf(buf, sizeof buf, "%.10g", r.coeffs(s, l));
      if (l) out += ' ';
      out += buf;
    }
    out += '\n';
  }
  return out;
}

/// Stacked multi-tissue spherical convolution F: coefficients -> signals.
/// Column layout: [WM n(l_max_wm) | GM | CSF].
struct ConvolutionOperator {
  Eigen::MatrixXd matrix;
  int l_max_wm = 8;
  AcquisitionScheme scheme;

  int rows() const { return static_cast<int>(matrix.rows()); }
  int cols() const { return static_cast<int>(matrix.cols()); }
  int wm_size() const { return ShScheme::count(l_max_wm); }
  int gm_index() const { return wm_size(); }
  int csf_index() const { return wm_size() + 1; }
};

/// Builds F with entries Y_lm(g) sqrt(4 pi / (2l + 1)) rho_{t,s,l}.
inline ConvolutionOperator build_operator(const AcquisitionScheme& scheme,
                                          const std::vector<ResponseFunction>& responses, int l_max_wm) {
  const ShScheme sh(l_max_wm);
  const ResponseFunction* by_tissue[3] = {nullptr, nullptr, nullptr};
  for (const auto& r : responses) by_tissue[static_cast<int>(r.tissue)] = &r;
  for (int t = 0; t < 3; ++t) {
    if (!by_tissue[t]) throw ConfigError(std::string("missing ") + tissue_name(static_cast<Tissue>(t)) + " response");
    validate_response(*by_tissue[t]);
    if (by_tissue[t]->shells() != static_cast<int>(scheme.shells().size()))
      throw ConfigError(std::string(tissue_name(static_cast<Tissue>(t))) + " response has " +
                        std::to_string(by_tissue[t]->shells()) + " shells, scheme has " +
                        std::to_string(scheme.shells().size()));
  }

  ConvolutionOperator op;
  op.l_max_wm = l_max_wm;
  op.scheme = scheme;
  op.matrix = Eigen::MatrixXd::Zero(scheme.volumes(), sh.size() + 2);
  const Eigen::MatrixXd& wm = by_tissue[0]->coeffs;
  std::vector<double> plm;
  std::vector<double> row(static_cast<std::size_t>(sh.size()));
  for (int v = 0; v < scheme.volumes(); ++v) {
    const int s = scheme.shell_of(v);
    if (scheme.is_b0(v)) {
      // Only the l = 0 term survives; the gradient direction is irrelevant.
      op.matrix(v, 0) = wm(s, 0);
    } else {
      detail::sh_row(scheme.bvecs()[static_cast<std::size_t>(v)].normalized(), sh, plm, row.data());
      for (int j = 0; j < sh.size(); ++j) {
        const int l = sh.degree(j);
        const int li = l / 2;
        const double rho = li < wm.cols() ? wm(s, li) : 0.0;
        op.matrix(v, j) = row[static_cast<std::size_t>(j)] * std::sqrt(4.0 * std::numbers::pi / (2.0 * l + 1.0)) * rho;
      }
    }
    op.matrix(v, op.gm_index()) = by_tissue[1]->coeffs(s, 0);
    op.matrix(v, op.csf_index()) = by_tissue[2]->coeffs(s, 0);
  }
  return op;
}

/// Column indices of `op` kept when WM is truncated to l_max_active.
inline std::vector<int> active_columns(const ConvolutionOperator& op, int l_max_active) {
  if (l_max_active < 0 || l_max_active % 2 != 0 || l_max_active > op.l_max_wm)
    throw InvalidInput("active l_max " + std::to_string(l_max_active) + " invalid for operator with l_max " +
                       std::to_string(op.l_max_wm));
  std::vector<int> cols;
  for (int j = 0; j < ShScheme::count(l_max_active); ++j) cols.push_back(j);
  cols.push_back(op.gm_index());
  cols.push_back(op.csf_index());
  return cols;
}

inline ConvolutionOperator restrict_operator(const ConvolutionOperator& op, int l_max_active) {
  const auto cols = active_columns(op, l_max_active);
  ConvolutionOperator out;
  out.l_max_wm = l_max_active;
  out.scheme = op.scheme;
  out.matrix.resize(op.rows(), static_cast<Eigen::Index>(cols.size()));
  for (std::size_t k = 0; k < cols.size(); ++k) out.matrix.col(static_cast<Eigen::Index>(k)) = op.matrix.col(cols[k]);
  return out;
}

/// Embeds coefficients of a restricted operator into the full layout.
inline Eigen::VectorXd zero_pad(const Eigen::Ref<const Eigen::VectorXd>& restricted, const ConvolutionOperator& full,
                                int l_max_active) {
  const auto cols = active_columns(full, l_max_active);
  if (restricted.size() != static_cast<Eigen::Index>(cols.size()))
    throw InvalidInput("restricted coefficient vector has wrong length");
  Eigen::VectorXd out = Eigen::VectorXd::Zero(full.cols());
  for (std::size_t k = 0; k < cols.size(); ++k) out(cols[k]) = restricted(static_cast<Eigen::Index>(k));
  return out;
}

/// Operator rows restricted to a subset of volumes (e.g. after subsampling).
inline ConvolutionOperator select_rows(const ConvolutionOperator& op, const std::vector<int>& volumes,
                                       const AcquisitionScheme& reduced) {
  ConvolutionOperator out;
  out.l_max_wm = op.l_max_wm;
  out.scheme = reduced;
  out.matrix.resize(static_cast<Eigen::Index>(volumes.size()), op.cols());
  for (std::size_t i = 0; i < volumes.size(); ++i) out.matrix.row(static_cast<Eigen::Index>(i)) = op.matrix.row(volumes[i]);
  return out;
}

/// Gauss-Legendre nodes and weights on [-1, 1].
inline void gauss_legendre(int n, Eigen::VectorXd& x, Eigen::VectorXd& w) {
  x.resize(n);
  w.resize(n);
  for (int i = 0; i < (n + 1) / 2; ++i) {
    double z = std::cos(std::numbers::pi * (i + 0.75) / (n + 0.5));
    double dp = 0.0;
    for (int iter = 0; iter < 100; ++iter) {
      double p0 = 1.0, p1 = 0.0;
      for (int k = 1; k <= n; ++k) {
        const double p2 = p1;
        p1 = p0;
        p0 = ((2.0 * k - 1.0) * z * p1 - (k - 1.0) * p2) / k;
      }
      dp = n * (z * p0 - p1) / (z * z - 1.0);
      const double dz = p0 / dp;
      z -= dz;
      if (std::abs(dz) < 1e-15) break;
    }
    x(i) = -z;
    x(n - 1 - i) = z;
    w(i) = w(n - 1 - i) = 2.0 / ((1.0 - z * z) * dp * dp);
  }
}

/// Zonal coefficients rho_l = 2 pi int K(t) sqrt((2l+1)/4pi) P_l(t) dt of an
/// axially symmetric kernel K(t), t = cos(angle to the fibre axis).
template <typename Kernel>
Eigen::RowVectorXd project_zonal(Kernel&& kernel, int l_max, int nodes = 96) {
  Eigen::VectorXd x, w;
  gauss_legendre(nodes, x, w);
  Eigen::RowVectorXd rho = Eigen::RowVectorXd::Zero(l_max / 2 + 1);
  for (int i = 0; i < nodes; ++i) {
    const double k = kernel(x(i));
    double p_prev = 1.0, p = x(i);
    for (int l = 0; l <= l_max; ++l) {
      double pl;
      if (l == 0) {
        pl = 1.0;
      } else if (l == 1) {
        pl = x(i);
      } else {
        const double next = ((2.0 * l - 1.0) * x(i) * p - (l - 1.0) * p_prev) / l;
        p_prev = p;
        p = next;
        pl = p;
      }
      if (l % 2 == 0) rho(l / 2) += 2.0 * std::numbers::pi * w(i) * k * std::sqrt((2.0 * l + 1.0) / (4.0 * std::numbers::pi)) * pl;
    }
  }
  return rho;
}

}  // namespace fodforge
