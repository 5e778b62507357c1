#pragma once

// ROI summaries of the voxel-wise metric suite.

#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "fodforge/error.hpp"
#include "fodforge/fixel.hpp"
#include "fodforge/metrics.hpp"
#include "fodforge/volume.hpp"

namespace fodforge {

/// Running mean and standard error (sample standard deviation / sqrt(n)).
class MeanSe {
 public:
  void add(double x) { values_.push_back(x); }
  long count() const { return static_cast<long>(values_.size()); }
  double mean() const {
    if (values_.empty()) return 0.0;
    double s = 0.0;
    for (double x : values_) s += x;
    return s / static_cast<double>(values_.size());
  }
  double se() const {
    if (values_.size() < 2) return 0.0;
    const double m = mean();
    double ss = 0.0;
    for (double x : values_) ss += (x - m) * (x - m);
    const double n = static_cast<double>(values_.size());
    return std::sqrt(ss / (n - 1.0) / n);
  }
  nlohmann::json to_json() const { return {{"mean", mean()}, {"se", se()}, {"n", count()}}; }

 private:
  std::vector<double> values_;
};

struct RoiMetrics {
  MeanSe sse, acc_percent, fixel_accuracy, pae, afde;
  long voxels = 0;
  long acc_excluded = 0;

  nlohmann::json to_json() const {
    return {{"voxels", voxels},
            {"sse", sse.to_json()},
            {"acc_percent", acc_percent.to_json()},
            {"fixel_accuracy", fixel_accuracy.to_json()},
            {"pae", pae.to_json()},
            {"afde", afde.to_json()},
            {"acc_excluded", acc_excluded}};
  }
};

inline constexpr int kFixelPadLength = 5;

/// Per-ROI metrics of `pred` against `truth` on the WM SH part. The "mask" ROI
/// is every masked voxel; a Mask-kind `roi` adds "roi" (its intersection with
/// the mask) and a Counts-kind `roi` adds "roi_<k>" for every positive label k.
inline nlohmann::json evaluation_report(const Volume& pred, const Volume& truth, const Volume& mask,
                                        const Volume* roi = nullptr, double peak_threshold = kPeakThreshold) {
  expect_kind(pred, VolumeKind::Fod, "predicted FOD");
  expect_kind(truth, VolumeKind::Fod, "ground-truth FOD");
  expect_kind(mask, VolumeKind::Mask, "mask");
  if (pred.spatial() != truth.spatial() || pred.channels() != truth.channels())
    throw InvalidInput("predicted FOD " + pred.shape_string() + " and ground truth " + truth.shape_string() + " differ");
  if (mask.spatial() != truth.spatial())
    throw InvalidInput("mask " + mask.shape_string() + " and ground truth " + truth.shape_string() + " differ spatially");
  if (roi) {
    if (roi->kind != VolumeKind::Mask && roi->kind != VolumeKind::Counts)
      throw ConfigError(std::string("ROI must be a 'mask' or 'counts' volume, got '") + kind_name(roi->kind) + "'");
    if (roi->spatial() != truth.spatial())
      throw InvalidInput("ROI " + roi->shape_string() + " and ground truth " + truth.shape_string() + " differ spatially");
  }
  const int l_max = ShScheme::l_max_for(truth.channels() - 2);
  if (l_max < 0) throw ConfigError("FOD volume has " + std::to_string(truth.channels()) + " channels; expected WM SH + GM + CSF");
  const FixelSegmenter seg(dense_mesh(), l_max, peak_threshold);
  const int wm = seg.coefficients();

  std::map<std::string, RoiMetrics> rois;
  rois["mask"];
  for (int v = 0; v < truth.voxel_count(); ++v) {
    if (mask.value(v, 0) < 0.5f) continue;
    std::vector<std::string> names{"mask"};
    if (roi) {
      const float r = roi->value(v, 0);
      if (roi->kind == VolumeKind::Mask && r >= 0.5f) names.push_back("roi");
      if (roi->kind == VolumeKind::Counts && r >= 0.5f) names.push_back("roi_" + std::to_string(static_cast<int>(std::lround(r))));
    }
    const Eigen::VectorXd t = truth.voxel(v).head(wm);
    const Eigen::VectorXd p = pred.voxel(v).head(wm);
    const double e = sse(t, p);
    const std::optional<double> a = acc(t, p);
    const FixelSet ft = seg.segment(t), fp = seg.segment(p);
    const FixelVectors vt = fixel_vectors(ft, kFixelPadLength), vp = fixel_vectors(fp, kFixelPadLength);
    const double hit = ft.size() == fp.size() ? 1.0 : 0.0;
    for (const auto& n : names) {
      RoiMetrics& m = rois[n];
      ++m.voxels;
      m.sse.add(e);
      if (a) m.acc_percent.add(100.0 * *a);
      else ++m.acc_excluded;
      m.fixel_accuracy.add(hit);
      m.pae.add(pae(vt.peak, vp.peak));
      m.afde.add(afde(vt.afd, vp.afd));
    }
  }
  nlohmann::json out = {{"metrics", {"sse", "acc_percent", "fixel_accuracy", "pae", "afde"}},
                        {"peak_threshold", peak_threshold},
                        {"pad_length", kFixelPadLength},
                        {"rois", nlohmann::json::object()}};
  for (const auto& [name, m] : rois) out["rois"][name] = m.to_json();
  return out;
}

/// Fixed-width text table of a report, one row per ROI.
inline std::string report_table(const nlohmann::json& report) {
  std::string out;
  char line[256];
  std::snprintf(line, sizeof line, "%-12s %8s %20s %20s %20s %20s %20s\n", "roi", "voxels", "SSE", "ACC (%)",
                "fixel acc", "PAE", "AFDE");
  out += line;
  auto cell = [](const nlohmann::json& m) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.4f +/- %.4f", m.at("mean").get<double>(), m.at("se").get<double>());
    return std::string(buf);
  };
  for (const auto& [name, m] : report.at("rois").items()) {
    std::snprintf(line, sizeof line, "%-12s %8ld %20s %20s %20s %20s %20s\n", name.c_str(), m.at("voxels").get<long>(),
                  cell(m.at("sse")).c_str(), cell(m.at("acc_percent")).c_str(), cell(m.at("fixel_accuracy")).c_str(),
                  cell(m.at("pae")).c_str(), cell(m.at("afde")).c_str());
    out += line;
  }
  return out;
}

}  // namespace fodforge
