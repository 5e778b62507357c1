#pragma once

// FOD lobe segmentation on a sphere mesh and the fixel directory format.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fodforge/error.hpp"
#include "fodforge/sh_basis.hpp"
#include "fodforge/sphere_mesh.hpp"
#include "fodforge/volume.hpp"

namespace fodforge {

inline constexpr double kPeakThreshold = 0.10;
inline constexpr int kMaxFixelLabel = 4;

struct Fixel {
  Vec3 direction = Vec3::UnitZ();
  double peak = 0.0;  // f^P
  double afd = 0.0;   // f^A
};

/// Sorted by descending peak amplitude.
using FixelSet = std::vector<Fixel>;

/// Steepest-ascent lobe segmentation with the SH basis cached for one mesh.
class FixelSegmenter {
 public:
  explicit FixelSegmenter(const SphereMesh& mesh = dense_mesh(), int l_max = 8,
                          double peak_threshold = kPeakThreshold)
      : mesh_(mesh), sh_(l_max), threshold_(peak_threshold) {
    if (mesh_.empty()) throw InvalidInput("fixel segmentation needs a non-empty mesh");
    if (mesh_.neighbours.size() != static_cast<std::size_t>(mesh_.size()))
      throw InvalidInput("fixel segmentation needs a mesh with vertex adjacency");
    basis_ = sh_basis_matrix(mesh_.directions, sh_);
  }

  double peak_threshold() const { return threshold_; }
  int coefficients() const { return sh_.size(); }

  FixelSet segment(const Eigen::Ref<const Eigen::VectorXd>& wm_coeffs) const {
    if (wm_coeffs.size() != sh_.size())
      throw InvalidInput("WM coefficient vector has " + std::to_string(wm_coeffs.size()) + " entries, expected " +
                         std::to_string(sh_.size()));
    const int n = mesh_.size();
    const Eigen::VectorXd amp = basis_ * wm_coeffs;

    // Each positive vertex climbs to its local maximum.
    std::vector<int> top(static_cast<std::size_t>(n), -1);
    for (int i = 0; i < n; ++i) {
      if (amp(i) <= 0.0) continue;
      int cur = i;
      while (true) {
        int next = cur;
        for (int j : mesh_.neighbours[static_cast<std::size_t>(cur)])
          if (amp(j) > amp(next)) next = j;
        if (next == cur) break;
        cur = next;
      }
      top[static_cast<std::size_t>(i)] = cur;
    }

    // Seeds above threshold; antipodal seed pairs form one fixel.
    std::vector<int> lobe_of_seed(static_cast<std::size_t>(n), -1);
    std::vector<int> seeds;
    for (int i = 0; i < n; ++i)
      if (top[static_cast<std::size_t>(i)] == i && amp(i) > threshold_) {
        const int partner = antipode(i);
        if (partner >= 0 && lobe_of_seed[static_cast<std::size_t>(partner)] >= 0) {
          lobe_of_seed[static_cast<std::size_t>(i)] = lobe_of_seed[static_cast<std::size_t>(partner)];
        } else {
          lobe_of_seed[static_cast<std::size_t>(i)] = static_cast<int>(seeds.size());
          seeds.push_back(i);
        }
      }

    FixelSet out(seeds.size());
    std::vector<Vec3> sum(seeds.size(), Vec3::Zero());
    for (std::size_t k = 0; k < seeds.size(); ++k) out[k].peak = amp(seeds[k]);
    for (int i = 0; i < n; ++i) {
      const int t = top[static_cast<std::size_t>(i)];
      if (t < 0) continue;
      const int lobe = lobe_of_seed[static_cast<std::size_t>(t)];
      if (lobe < 0) continue;
      const auto k = static_cast<std::size_t>(lobe);
      const double a = amp(i);
      out[k].afd += a * mesh_.weights(i);
      out[k].peak = std::max(out[k].peak, a);
      Vec3 d = mesh_.direction(i);
      if (d.dot(mesh_.direction(seeds[k])) < 0.0) d = -d;
      sum[k] += a * d;
    }
    for (std::size_t k = 0; k < seeds.size(); ++k) out[k].direction = sum[k].normalized();
    std::stable_sort(out.begin(), out.end(), [](const Fixel& a, const Fixel& b) { return a.peak > b.peak; });
    return out;
  }

 private:
  int antipode(int i) const {
    if (!mesh_.antipodal) return -1;
    const int half = mesh_.size() / 2;
    return i < half ? i + half : i - half;
  }

  SphereMesh mesh_;
  ShScheme sh_;
  double threshold_;
  Eigen::MatrixXd basis_;
};

inline FixelSet segment_fixels(const Eigen::Ref<const Eigen::VectorXd>& wm_coeffs, const SphereMesh& mesh = dense_mesh(),
                               double peak_threshold = kPeakThreshold) {
  const int l_max = ShScheme::l_max_for(static_cast<int>(wm_coeffs.size()));
  if (l_max < 0) throw InvalidInput("coefficient count " + std::to_string(wm_coeffs.size()) + " is not an SH size");
  return FixelSegmenter(mesh, l_max, peak_threshold).segment(wm_coeffs);
}

/// Fixel count thresholded to the classifier's label range.
inline int fixel_label(std::size_t count) { return static_cast<int>(std::min<std::size_t>(count, kMaxFixelLabel)); }

struct FixelVectors {
  Eigen::VectorXd peak;
  Eigen::VectorXd afd;
  /// Set when the set held more fixels than pad_len.
  bool truncated = false;
};

inline FixelVectors fixel_vectors(const FixelSet& fs, int pad_len = 5) {
  if (pad_len < 0) throw InvalidInput("pad length must be non-negative");
  FixelSet sorted = fs;
  std::stable_sort(sorted.begin(), sorted.end(), [](const Fixel& a, const Fixel& b) { return a.peak > b.peak; });
  FixelVectors v{Eigen::VectorXd::Zero(pad_len), Eigen::VectorXd::Zero(pad_len), sorted.size() > static_cast<std::size_t>(pad_len)};
  for (int i = 0; i < pad_len && i < static_cast<int>(sorted.size()); ++i) {
    v.peak(i) = sorted[static_cast<std::size_t>(i)].peak;
    v.afd(i) = sorted[static_cast<std::size_t>(i)].afd;
  }
  return v;
}

// Fixel directory: index.json, counts.fodv and fixels.bin, the latter holding
// one record of six little-endian float32 per fixel:
// dx, dy, dz, peak, afd, voxel index.

struct FixelVolume {
  Volume counts;
  std::vector<FixelSet> per_voxel;
  double peak_threshold = kPeakThreshold;
};

inline FixelVolume segment_volume(const Volume& fod, const Volume* mask = nullptr, double peak_threshold = kPeakThreshold) {
  expect_kind(fod, VolumeKind::Fod, "FOD input");
  const int l_max = ShScheme::l_max_for(fod.channels() - 2);
  if (l_max < 0) throw ConfigError("FOD volume has " + std::to_string(fod.channels()) + " channels; expected WM SH + GM + CSF");
  if (mask && mask->spatial() != fod.spatial())
    throw InvalidInput("FOD " + fod.shape_string() + " and mask " + mask->shape_string() + " differ spatially");
  const FixelSegmenter seg(dense_mesh(), l_max, peak_threshold);
  FixelVolume out{Volume(fod.spatial(), 1, VolumeKind::Counts), {}, peak_threshold};
  out.counts.voxel_size = fod.voxel_size;
  out.per_voxel.resize(static_cast<std::size_t>(fod.voxel_count()));
  for (int v = 0; v < fod.voxel_count(); ++v) {
    if (mask && mask->value(v, 0) < 0.5f) continue;
    out.per_voxel[static_cast<std::size_t>(v)] = seg.segment(fod.voxel(v).head(seg.coefficients()));
    out.counts.set(v, 0, static_cast<float>(out.per_voxel[static_cast<std::size_t>(v)].size()));
  }
  return out;
}

inline void write_fixel_dir(const std::string& dir, const FixelVolume& fv) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create fixel directory '" + dir + "': " + ec.message());
  std::string table;
  std::size_t total = 0;
  for (std::size_t v = 0; v < fv.per_voxel.size(); ++v)
    for (const Fixel& f : fv.per_voxel[v]) {
      for (double x : {f.direction.x(), f.direction.y(), f.direction.z(), f.peak, f.afd, static_cast<double>(v)})
        detail::put_f32(table, static_cast<float>(x));
      ++total;
    }
  const auto& d = fv.counts.spatial();
  const nlohmann::json index = {{"format", "fodforge-fixels"},
                                {"version", 1},
                                {"dims", {d[0], d[1], d[2]}},
                                {"fixels", total},
                                {"record", {"dx", "dy", "dz", "peak", "afd", "voxel"}},
                                {"peak_threshold", fv.peak_threshold}};
  detail::write_file((std::filesystem::path(dir) / "index.json").string(), index.dump(2) + "\n");
  write_volume((std::filesystem::path(dir) / "counts.fodv").string(), fv.counts);
  detail::write_file((std::filesystem::path(dir) / "fixels.bin").string(), table);
}

inline FixelVolume read_fixel_dir(const std::string& dir) {
  FixelVolume fv;
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(detail::read_file((std::filesystem::path(dir) / "index.json").string()));
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("invalid fixel index: ") + e.what());
  }
  fv.counts = read_volume((std::filesystem::path(dir) / "counts.fodv").string());
  expect_kind(fv.counts, VolumeKind::Counts, "fixel counts");
  fv.peak_threshold = index.value("peak_threshold", kPeakThreshold);
  const std::string table = detail::read_file((std::filesystem::path(dir) / "fixels.bin").string());
  const std::size_t total = index.value("fixels", std::size_t{0});
  if (table.size() != total * 24) throw ParseError("fixels.bin size does not match index.json");
  fv.per_voxel.resize(static_cast<std::size_t>(fv.counts.voxel_count()));
  const auto* p = reinterpret_cast<const unsigned char*>(table.data());
  for (std::size_t i = 0; i < total; ++i, p += 24) {
    Fixel f;
    f.direction = Vec3(detail::get_f32(p), detail::get_f32(p + 4), detail::get_f32(p + 8));
    f.peak = detail::get_f32(p + 12);
    f.afd = detail::get_f32(p + 16);
    const auto v = static_cast<std::size_t>(detail::get_f32(p + 20));
    if (v >= fv.per_voxel.size()) throw ParseError("fixel voxel index out of range");
    fv.per_voxel[v].push_back(f);
  }
  return fv;
}

}  // namespace fodforge
