#include <gtest/gtest.h>

#include "fodforge/evaluate.hpp"
#include "fodforge/phantom.hpp"

namespace fodforge {
namespace {

PhantomSpec small_spec() {
  PhantomSpec s = default_phantom_spec(3);
  s.dims = {8, 8, 2};
  s.regions = {
      {"single", Geometry::SingleFibre, {0, 4, 0, 8, 0, 2}, 0.9, 0.1, 0.0, 90.0, 0.0, true},
      {"crossing2", Geometry::TwoFibre, {4, 8, 0, 5, 0, 2}, 0.9, 0.1, 0.0, 90.0, 0.0, true},
      {"grey", Geometry::IsotropicGM, {4, 8, 5, 8, 0, 2}, 0.0, 0.9, 0.1, 90.0, 0.0, false},
  };
  return s;
}

Volume all_mask(const Volume& like) {
  Volume m(like.spatial(), 1, VolumeKind::Mask);
  for (int v = 0; v < m.voxel_count(); ++v) m.set(v, 0, 1.0f);
  return m;
}

TEST(Evaluate, IdentityRowIsExact) {
  const Phantom ph = build_phantom(small_spec());
  const nlohmann::json r = evaluation_report(ph.fod, ph.fod, all_mask(ph.fod), &ph.counts);
  ASSERT_TRUE(r.at("rois").contains("mask"));
  for (const auto& [name, m] : r.at("rois").items()) {
    EXPECT_EQ(m.at("sse").at("mean").get<double>(), 0.0) << name;
    EXPECT_EQ(m.at("pae").at("mean").get<double>(), 0.0) << name;
    EXPECT_EQ(m.at("afde").at("mean").get<double>(), 0.0) << name;
    EXPECT_EQ(m.at("fixel_accuracy").at("mean").get<double>(), 1.0) << name;
    if (m.at("acc_percent").at("n").get<long>() > 0) EXPECT_EQ(m.at("acc_percent").at("mean").get<double>(), 100.0) << name;
    for (const char* k : {"sse", "acc_percent", "fixel_accuracy", "pae", "afde"}) EXPECT_EQ(m.at(k).at("se").get<double>(), 0.0);
  }
  // Grey-matter voxels have no WM lobes, so their ACC is undefined and tallied.
  EXPECT_EQ(r.at("rois").at("mask").at("acc_excluded").get<long>(), 8 * 8 * 2 - 4 * 8 * 2 - 4 * 5 * 2);
  EXPECT_EQ(r.at("rois").at("roi_2").at("voxels").get<long>(), 4 * 5 * 2);
}

TEST(Evaluate, SchemaHasEachMetricOncePerRoi) {
  const Phantom ph = build_phantom(small_spec());
  Volume pred = ph.fod;
  for (int v = 0; v < pred.voxel_count(); ++v) pred.set(v, 3, pred.value(v, 3) + 0.1f);
  const nlohmann::json r = evaluation_report(pred, ph.fod, ph.wm_mask, &ph.wm_mask);
  EXPECT_EQ(r.at("rois").size(), 2u);
  for (const auto& [name, m] : r.at("rois").items()) {
    int metric_keys = 0;
    for (const auto& [k, _] : m.items())
      if (k == "sse" || k == "acc_percent" || k == "fixel_accuracy" || k == "pae" || k == "afde") ++metric_keys;
    EXPECT_EQ(metric_keys, 5);
    EXPECT_NEAR(m.at("sse").at("mean").get<double>(), 0.01, 1e-6);
    EXPECT_LT(m.at("acc_percent").at("mean").get<double>(), 100.0);
  }
  EXPECT_FALSE(report_table(r).empty());
}

TEST(Evaluate, ShapeErrorsNameBothShapes) {
  const Phantom ph = build_phantom(small_spec());
  const Volume other(Dims3{4, 4, 4}, 47, VolumeKind::Fod);
  try {
    evaluation_report(other, ph.fod, ph.wm_mask);
    FAIL();
  } catch (const InvalidInput& e) {
    EXPECT_NE(std::string(e.what()).find(other.shape_string()), std::string::npos);
    EXPECT_NE(std::string(e.what()).find(ph.fod.shape_string()), std::string::npos);
  }
  EXPECT_THROW(evaluation_report(ph.fod, ph.fod, ph.fod), ConfigError);
}

TEST(Evaluate, MeanAndStandardError) {
  MeanSe m;
  for (double x : {1.0, 2.0, 3.0, 4.0}) m.add(x);
  EXPECT_DOUBLE_EQ(m.mean(), 2.5);
  EXPECT_NEAR(m.se(), std::sqrt(5.0 / 3.0 / 4.0), 1e-15);
  EXPECT_EQ(MeanSe().se(), 0.0);
}

}  // namespace
}  // namespace fodforge
