#pragma once

// Synthetic multi-tissue diffusion phantom with exactly representable
// ground-truth FODs (band-limited deltas).

#include <array>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fodforge/acquisition.hpp"
#include "fodforge/error.hpp"
#include "fodforge/forward_model.hpp"
#include "fodforge/sh_basis.hpp"
#include "fodforge/volume.hpp"

namespace fodforge {

/// Diffusivities (mm^2/s) of the bundled response preset. Every tissue has
/// unit b0 signal.
struct ResponsePreset {
  double wm_axial = 1.7e-3;
  double wm_radial = 0.3e-3;
  double gm = 0.8e-3;
  double csf = 3.0e-3;
};

/// Zonal responses for the given shell b-values (prolate tensor kernel for WM,
/// mono-exponential decay for GM and CSF).
inline std::vector<ResponseFunction> preset_responses(const std::vector<double>& shell_bvals, int l_max_wm = 8,
                                                      const ResponsePreset& p = {}) {
  const auto n = static_cast<Eigen::Index>(shell_bvals.size());
  ResponseFunction wm{Tissue::WM, Eigen::MatrixXd(n, l_max_wm / 2 + 1)};
  ResponseFunction gm{Tissue::GM, Eigen::MatrixXd(n, 1)};
  ResponseFunction csf{Tissue::CSF, Eigen::MatrixXd(n, 1)};
  for (Eigen::Index s = 0; s < n; ++s) {
    const double b = shell_bvals[static_cast<std::size_t>(s)];
    wm.coeffs.row(s) = project_zonal(
        [&](double t) { return std::exp(-b * (p.wm_radial + (p.wm_axial - p.wm_radial) * t * t)); }, l_max_wm);
    gm.coeffs(s, 0) = std::exp(-b * p.gm);
    csf.coeffs(s, 0) = std::exp(-b * p.csf);
  }
  return {wm, gm, csf};
}

inline std::vector<double> shell_bvalues(const AcquisitionScheme& scheme) {
  std::vector<double> b;
  for (const Shell& s : scheme.shells()) b.push_back(s.nominal_b);
  return b;
}

enum class Geometry { SingleFibre, TwoFibre, ThreeFibre, IsotropicGM, IsotropicCSF };
enum class NoiseModel { None, Gaussian, Rician };

struct PhantomRegion {
  std::string name;
  Geometry geometry = Geometry::SingleFibre;
  /// Half-open voxel box {x0, x1, y0, y1, z0, z1}.
  std::array<int, 6> box{0, 1, 0, 1, 0, 1};
  double wm = 1.0, gm = 0.0, csf = 0.0;
  double crossing_angle_deg = 90.0;
  /// In-plane rotation of a single-fibre field, radians per voxel along y.
  double curvature = 0.0;
  bool random_orientation = true;
};

struct PhantomSpec {
  Dims3 dims{32, 32, 8};
  std::vector<PhantomRegion> regions;
  NoiseModel noise = NoiseModel::Rician;
  /// Noise standard deviation relative to the b0 signal.
  double sigma = 0.05;
  std::vector<double> shell_bvals{1000.0, 2000.0, 3000.0};
  int directions_per_shell = 90;
  int n_b0 = 18;
  int b0_every = 16;
  int l_max = 8;
  std::uint64_t seed = 1;

  AcquisitionScheme scheme() const {
    return make_interleaved_scheme(shell_bvals, directions_per_shell, n_b0, b0_every);
  }
};

/// 32x32x8 grid: curved single-fibre, 90-degree crossing, 70-degree
/// three-way crossing, and a GM/CSF quadrant.
inline PhantomSpec default_phantom_spec(std::uint64_t seed = 1) {
  PhantomSpec spec;
  spec.seed = seed;
  spec.regions = {
      {"single", Geometry::SingleFibre, {0, 16, 0, 16, 0, 8}, 0.9, 0.1, 0.0, 90.0, 0.08, true},
      {"crossing2", Geometry::TwoFibre, {16, 32, 0, 16, 0, 8}, 0.9, 0.1, 0.0, 90.0, 0.0, true},
      {"crossing3", Geometry::ThreeFibre, {0, 16, 16, 32, 0, 8}, 0.9, 0.1, 0.0, 70.0, 0.0, true},
      {"grey", Geometry::IsotropicGM, {16, 32, 16, 24, 0, 8}, 0.0, 0.9, 0.1, 90.0, 0.0, false},
      {"csf", Geometry::IsotropicCSF, {16, 32, 24, 32, 0, 8}, 0.0, 0.0, 1.0, 90.0, 0.0, false},
  };
  return spec;
}

struct Phantom {
  PhantomSpec spec;
  AcquisitionScheme scheme;
  Volume fod;       // [dims x 47]
  Volume wm_mask;   // WM fraction >= 0.5
  Volume gm_mask;   // GM fraction >= 0.5
  Volume counts;    // number of fibre populations
  std::vector<int> region_of_voxel;  // -1 outside every region
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline Eigen::Matrix3d random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::Quaterniond q(n(rng), n(rng), n(rng), n(rng));
  q.normalize();
  return q.toRotationMatrix();
}

inline std::vector<Vec3> crossing_directions(Geometry g, double angle_deg) {
  const double a = angle_deg * std::numbers::pi / 180.0;
  switch (g) {
    case Geometry::SingleFibre: return {Vec3::UnitX()};
    case Geometry::TwoFibre: return {Vec3::UnitX(), Vec3(std::cos(a), std::sin(a), 0.0)};
    case Geometry::ThreeFibre: {
      // Three axes around z with equal pairwise angle a.
      const double s2 = 2.0 / 3.0 * (1.0 - std::cos(a));
      const double s = std::sqrt(s2), c = std::sqrt(1.0 - s2);
      std::vector<Vec3> d;
      for (int k = 0; k < 3; ++k) {
        const double phi = 2.0 * std::numbers::pi * k / 3.0;
        d.emplace_back(s * std::cos(phi), s * std::sin(phi), c);
      }
      return d;
    }
    default: return {};
  }
}

}  // namespace detail

inline void validate_spec(const PhantomSpec& spec) {
  for (int d : spec.dims)
    if (d <= 0) throw ConfigError("phantom dims must be positive");
  if (spec.sigma < 0.0) throw InvalidInput("noise sigma must be non-negative");
  for (const auto& r : spec.regions) {
    if (std::abs(r.wm + r.gm + r.csf - 1.0) > 1e-9)
      throw ConfigError("region '" + r.name + "' tissue fractions do not sum to 1");
    if (r.wm < 0 || r.gm < 0 || r.csf < 0) throw ConfigError("region '" + r.name + "' has a negative fraction");
    if (!(r.crossing_angle_deg > 0.0 && r.crossing_angle_deg <= 90.0))
      throw ConfigError("region '" + r.name + "' crossing angle must lie in (0, 90]");
    const auto& b = r.box;
    for (int axis = 0; axis < 3; ++axis)
      if (b[2 * axis] < 0 || b[2 * axis + 1] > spec.dims[static_cast<std::size_t>(axis)] || b[2 * axis] >= b[2 * axis + 1])
        throw ConfigError("region '" + r.name + "' box lies outside the grid or is empty");
    const bool fibre = r.geometry == Geometry::SingleFibre || r.geometry == Geometry::TwoFibre ||
                       r.geometry == Geometry::ThreeFibre;
    if (fibre && r.wm <= 0.0) throw ConfigError("fibre region '" + r.name + "' needs a WM fraction");
    if (!fibre && r.wm != 0.0) throw ConfigError("isotropic region '" + r.name + "' cannot hold WM");
  }
}

inline Phantom build_phantom(const PhantomSpec& spec) {
  validate_spec(spec);
  const ShScheme sh(spec.l_max);
  const int n = sh.size() + 2;
  Phantom ph;
  ph.spec = spec;
  ph.scheme = spec.scheme();
  ph.fod = Volume(spec.dims, n, VolumeKind::Fod);
  ph.fod.meta = {{"l_max_wm", spec.l_max}, {"tissues", {"wm", "gm", "csf"}}};
  ph.wm_mask = Volume(spec.dims, 1, VolumeKind::Mask);
  ph.gm_mask = Volume(spec.dims, 1, VolumeKind::Mask);
  ph.counts = Volume(spec.dims, 1, VolumeKind::Counts);
  ph.region_of_voxel.assign(static_cast<std::size_t>(ph.fod.voxel_count()), -1);

  for (std::size_t ri = 0; ri < spec.regions.size(); ++ri) {
    const PhantomRegion& r = spec.regions[ri];
    std::mt19937_64 rng(detail::splitmix64(spec.seed * 0x100000001b3ull + ri));
    const Eigen::Matrix3d rot = r.random_orientation ? detail::random_rotation(rng) : Eigen::Matrix3d::Identity();
    const std::vector<Vec3> base = detail::crossing_directions(r.geometry, r.crossing_angle_deg);
    for (int z = r.box[4]; z < r.box[5]; ++z)
      for (int y = r.box[2]; y < r.box[3]; ++y)
        for (int x = r.box[0]; x < r.box[1]; ++x) {
          const int v = ph.fod.index(x, y, z);
          if (ph.region_of_voxel[static_cast<std::size_t>(v)] >= 0)
            throw ConfigError("region '" + r.name + "' overlaps region '" +
                              spec.regions[static_cast<std::size_t>(ph.region_of_voxel[static_cast<std::size_t>(v)])].name + "'");
          ph.region_of_voxel[static_cast<std::size_t>(v)] = static_cast<int>(ri);
          Eigen::VectorXd c = Eigen::VectorXd::Zero(n);
          const Eigen::Matrix3d bend =
              Eigen::AngleAxisd(r.curvature * (y - r.box[2]), Vec3::UnitZ()).toRotationMatrix();
          for (const Vec3& d0 : base)
            c.head(sh.size()) += r.wm / static_cast<double>(base.size()) * delta_sh((rot * bend * d0).normalized(), sh);
          c(sh.size()) = r.gm;
          c(sh.size() + 1) = r.csf;
          ph.fod.set_voxel(v, c);
          ph.counts.set(v, 0, static_cast<float>(base.size()));
          ph.wm_mask.set(v, 0, r.wm >= 0.5 ? 1.0f : 0.0f);
          ph.gm_mask.set(v, 0, r.gm >= 0.5 ? 1.0f : 0.0f);
        }
  }
  return ph;
}

inline Volume simulate_dwi(const Volume& fod, const ConvolutionOperator& op, NoiseModel noise, double sigma,
                           std::uint64_t seed) {
  if (sigma < 0.0) throw InvalidInput("noise sigma must be non-negative");
  if (fod.channels() != op.cols())
    throw InvalidInput("FOD has " + std::to_string(fod.channels()) + " channels, operator expects " +
                       std::to_string(op.cols()));
  Volume dwi(fod.spatial(), op.rows(), VolumeKind::Dwi);
  dwi.voxel_size = fod.voxel_size;
  const auto [bvec, bval] = serialize_scheme(op.scheme);
  dwi.meta = {{"bvec", bvec}, {"bval", bval}};
  for (int v = 0; v < fod.voxel_count(); ++v) {
    Eigen::VectorXd s = op.matrix * fod.voxel(v);
    if (noise != NoiseModel::None && sigma > 0.0) {
      // Counter-based stream: each voxel's noise depends only on (seed, voxel).
      std::mt19937_64 rng(detail::splitmix64(seed ^ detail::splitmix64(static_cast<std::uint64_t>(v))));
      std::normal_distribution<double> g(0.0, sigma);
      for (Eigen::Index k = 0; k < s.size(); ++k) {
        if (noise == NoiseModel::Gaussian) {
          s(k) += g(rng);
        } else {
          const double re = s(k) + g(rng), im = g(rng);
          s(k) = std::sqrt(re * re + im * im);
        }
      }
    }
    dwi.set_voxel(v, s);
  }
  return dwi;
}

// JSON form of PhantomSpec.

inline const char* geometry_name(Geometry g) {
  switch (g) {
    case Geometry::SingleFibre: return "single";
    case Geometry::TwoFibre: return "crossing2";
    case Geometry::ThreeFibre: return "crossing3";
    case Geometry::IsotropicGM: return "gm";
    case Geometry::IsotropicCSF: return "csf";
  }
  return "?";
}

inline nlohmann::json to_json(const PhantomSpec& s) {
  nlohmann::json regions = nlohmann::json::array();
  for (const auto& r : s.regions)
    regions.push_back({{"name", r.name},
                       {"geometry", geometry_name(r.geometry)},
                       {"box", r.box},
                       {"fractions", {{"wm", r.wm}, {"gm", r.gm}, {"csf", r.csf}}},
                       {"crossing_angle_deg", r.crossing_angle_deg},
                       {"curvature", r.curvature},
                       {"random_orientation", r.random_orientation}});
  const char* noise = s.noise == NoiseModel::None ? "none" : s.noise == NoiseModel::Gaussian ? "gaussian" : "rician";
  return {{"dims", s.dims},
          {"regions", regions},
          {"noise", {{"model", noise}, {"sigma", s.sigma}}},
          {"scheme",
           {{"shells", s.shell_bvals}, {"directions_per_shell", s.directions_per_shell}, {"b0", s.n_b0}, {"b0_every", s.b0_every}}},
          {"l_max", s.l_max},
          {"seed", s.seed}};
}

inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  try {
    PhantomSpec s;
    s.dims = j.at("dims").get<Dims3>();
    s.regions.clear();
    for (const auto& jr : j.at("regions")) {
      PhantomRegion r;
      r.name = jr.at("name").get<std::string>();
      const std::string g = jr.at("geometry").get<std::string>();
      if (g == "single") r.geometry = Geometry::SingleFibre;
      else if (g == "crossing2") r.geometry = Geometry::TwoFibre;
      else if (g == "crossing3") r.geometry = Geometry::ThreeFibre;
      else if (g == "gm") r.geometry = Geometry::IsotropicGM;
      else if (g == "csf") r.geometry = Geometry::IsotropicCSF;
      else throw ConfigError("unknown geometry '" + g + "'");
      r.box = jr.at("box").get<std::array<int, 6>>();
      const auto& f = jr.at("fractions");
      r.wm = f.value("wm", 0.0);
      r.gm = f.value("gm", 0.0);
      r.csf = f.value("csf", 0.0);
      r.crossing_angle_deg = jr.value("crossing_angle_deg", 90.0);
      r.curvature = jr.value("curvature", 0.0);
      r.random_orientation = jr.value("random_orientation", true);
      s.regions.push_back(r);
    }
    if (j.contains("noise")) {
      const std::string m = j["noise"].value("model", "rician");
      if (m == "none") s.noise = NoiseModel::None;
      else if (m == "gaussian") s.noise = NoiseModel::Gaussian;
      else if (m == "rician") s.noise = NoiseModel::Rician;
      else throw ConfigError("unknown noise model '" + m + "'");
      s.sigma = j["noise"].value("sigma", s.sigma);
    }
    if (j.contains("scheme")) {
      const auto& js = j["scheme"];
      s.shell_bvals = js.value("shells", s.shell_bvals);
      s.directions_per_shell = js.value("directions_per_shell", s.directions_per_shell);
      s.n_b0 = js.value("b0", s.n_b0);
      s.b0_every = js.value("b0_every", s.b0_every);
    }
    s.l_max = j.value("l_max", s.l_max);
    s.seed = j.value("seed", s.seed);
    validate_spec(s);
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid phantom spec: ") + e.what());
  }
}

}  // namespace fodforge
