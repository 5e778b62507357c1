#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "fodforge/fixel.hpp"
#include "fodforge/metrics.hpp"
#include "test_util.hpp"

namespace fodforge {
namespace {

double angle_deg(const Vec3& a, const Vec3& b) {
  return std::acos(std::min(1.0, std::abs(a.dot(b)))) * 180.0 / std::numbers::pi;
}

const ShScheme kSh(8);

TEST(SegmentFixels, ZeroGivesNothing) { EXPECT_TRUE(segment_fixels(Eigen::VectorXd::Zero(45)).empty()); }

TEST(SegmentFixels, SingleDelta) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const Vec3 d = trial == 0 ? Vec3::UnitZ() : testing::random_unit(rng);
    const FixelSet fs = segment_fixels(delta_sh(d, kSh));
    ASSERT_EQ(fs.size(), 1u) << trial;
    EXPECT_LT(angle_deg(fs[0].direction, d), 5.0);
    EXPECT_NEAR(fs[0].afd, 1.0, 0.05);
    EXPECT_NEAR(fs[0].direction.norm(), 1.0, 1e-12);
  }
}

TEST(SegmentFixels, OrthogonalPair) {
  const FixelSet fs = segment_fixels(0.5 * delta_sh(Vec3::UnitZ(), kSh) + 0.5 * delta_sh(Vec3::UnitX(), kSh));
  ASSERT_EQ(fs.size(), 2u);
  const double a = std::min(angle_deg(fs[0].direction, Vec3::UnitZ()), angle_deg(fs[1].direction, Vec3::UnitZ()));
  const double b = std::min(angle_deg(fs[0].direction, Vec3::UnitX()), angle_deg(fs[1].direction, Vec3::UnitX()));
  EXPECT_LT(a, 5.0);
  EXPECT_LT(b, 5.0);
  EXPECT_NEAR(fs[0].afd + fs[1].afd, 1.0, 0.05);
}

TEST(SegmentFixels, ThreeWayCrossings) {
  std::mt19937_64 rng(22);
  for (double deg : {60.0, 70.0, 90.0}) {
    const double s2 = 2.0 / 3.0 * (1.0 - std::cos(deg * std::numbers::pi / 180.0));
    for (int trial = 0; trial < 5; ++trial) {
      const Eigen::Matrix3d rot = Eigen::Quaterniond(Eigen::Vector4d(testing::random_vector(rng, 4))).normalized().toRotationMatrix();
      Eigen::VectorXd c = Eigen::VectorXd::Zero(45);
      for (int k = 0; k < 3; ++k) {
        const double phi = 2.0 * std::numbers::pi * k / 3.0;
        const Vec3 d(std::sqrt(s2) * std::cos(phi), std::sqrt(s2) * std::sin(phi), std::sqrt(1.0 - s2));
        c += 0.3 * delta_sh((rot * d).normalized(), kSh);
      }
      EXPECT_EQ(segment_fixels(c).size(), 3u) << deg << " deg, trial " << trial;
    }
  }
}

TEST(SegmentFixels, SortedAndScaleMonotone) {
  std::mt19937_64 rng(23);
  for (int trial = 0; trial < 20; ++trial) {
    Eigen::VectorXd c = Eigen::VectorXd::Zero(45);
    for (int k = 0; k < 3; ++k) c += (0.1 + 0.3 * (k + 1) / 3.0) * delta_sh(testing::random_unit(rng), kSh);
    c += testing::random_vector(rng, 45, 0.01);
    const FixelSet fs = segment_fixels(c);
    for (std::size_t i = 1; i < fs.size(); ++i) EXPECT_GE(fs[i - 1].peak, fs[i].peak);
    for (const Fixel& f : fs) {
      EXPECT_GT(f.peak, 0.0);
      EXPECT_GT(f.afd, 0.0);
    }
    EXPECT_GE(segment_fixels(2.0 * c).size(), fs.size());
    EXPECT_EQ(segment_fixels(2.0 * c, dense_mesh(), 0.2).size(), fs.size());
  }
}

TEST(SegmentFixels, Errors) {
  EXPECT_THROW(FixelSegmenter(SphereMesh{}), InvalidInput);
  EXPECT_THROW(segment_fixels(Eigen::VectorXd::Zero(44)), InvalidInput);
}

TEST(FixelLabel, ThresholdsToFour) {
  EXPECT_EQ(fixel_label(0), 0);
  EXPECT_EQ(fixel_label(3), 3);
  EXPECT_EQ(fixel_label(4), 4);
  EXPECT_EQ(fixel_label(6), 4);
}

TEST(FixelVectors, PaddingAndOrder) {
  const FixelVectors empty = fixel_vectors({});
  EXPECT_EQ(empty.peak, Eigen::VectorXd::Zero(5));
  EXPECT_EQ(empty.afd, Eigen::VectorXd::Zero(5));

  const FixelVectors one = fixel_vectors({{Vec3::UnitZ(), 0.4, 0.3}});
  EXPECT_EQ(one.peak, (Eigen::VectorXd(5) << 0.4, 0, 0, 0, 0).finished());
  EXPECT_EQ(one.afd, (Eigen::VectorXd(5) << 0.3, 0, 0, 0, 0).finished());

  const FixelVectors three = fixel_vectors({{Vec3::UnitZ(), 0.2, 0.1}, {Vec3::UnitX(), 0.5, 0.2}, {Vec3::UnitY(), 0.3, 0.3}});
  EXPECT_EQ(three.peak, (Eigen::VectorXd(5) << 0.5, 0.3, 0.2, 0, 0).finished());
  EXPECT_FALSE(three.truncated);

  const FixelVectors cut = fixel_vectors(FixelSet(7, Fixel{Vec3::UnitZ(), 0.2, 0.1}), 5);
  EXPECT_TRUE(cut.truncated);
  EXPECT_EQ(cut.peak.size(), 5);
}

TEST(Metrics, Sse) {
  const Eigen::VectorXd e0 = Eigen::VectorXd::Unit(45, 0);
  EXPECT_EQ(sse(e0, e0), 0.0);
  EXPECT_EQ(sse(e0, Eigen::VectorXd::Zero(45)), 1.0);
  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 20; ++trial) {
    const Eigen::VectorXd a = testing::random_vector(rng, 45), b = testing::random_vector(rng, 45);
    long double ref = 0.0L;
    for (int i = 0; i < 45; ++i) {
      const long double d = static_cast<long double>(a(i)) - static_cast<long double>(b(i));
      ref += d * d;
    }
    EXPECT_LE(testing::rel_err(sse(a, b), static_cast<double>(ref)), 1e-12);
  }
  EXPECT_THROW(sse(e0, Eigen::VectorXd::Zero(44)), InvalidInput);
}

TEST(Metrics, Acc) {
  std::mt19937_64 rng(32);
  const Eigen::VectorXd c = testing::random_vector(rng, 45);
  EXPECT_NEAR(*acc(c, c), 1.0, 1e-12);
  EXPECT_NEAR(*acc(c, 3.7 * c), 1.0, 1e-12);
  const Eigen::VectorXd d = testing::random_vector(rng, 45);
  EXPECT_NEAR(*acc(0.2 * c, 5.0 * d), *acc(c, d), 1e-12);
  Eigen::VectorXd l2 = Eigen::VectorXd::Zero(45), l4 = Eigen::VectorXd::Zero(45);
  l2.segment(1, 5) = testing::random_vector(rng, 5);
  l4.segment(6, 9) = testing::random_vector(rng, 9);
  EXPECT_EQ(*acc(l2, l4), 0.0);
  // l = 0 is excluded.
  Eigen::VectorXd shifted = c;
  shifted(0) += 10.0;
  EXPECT_NEAR(*acc(c, shifted), 1.0, 1e-12);
  EXPECT_FALSE(acc(Eigen::VectorXd::Unit(45, 0), c).has_value());
  EXPECT_THROW(acc(c, Eigen::VectorXd::Zero(15)), InvalidInput);
}

TEST(Metrics, PaeAfde) {
  const Eigen::VectorXd a = (Eigen::VectorXd(5) << 0.5, 0.3, 0, 0, 0).finished();
  const Eigen::VectorXd b = (Eigen::VectorXd(5) << 0.4, 0, 0, 0, 0).finished();
  EXPECT_NEAR(pae(a, b), 0.4, 1e-15);
  EXPECT_NEAR(afde(a, b), 0.4, 1e-15);
  EXPECT_EQ(pae(a, a), 0.0);
  std::mt19937_64 rng(33);
  for (int trial = 0; trial < 50; ++trial) {
    const Eigen::VectorXd x = testing::random_vector(rng, 5), y = testing::random_vector(rng, 5),
                          z = testing::random_vector(rng, 5);
    EXPECT_EQ(pae(x, y), pae(y, x));
    EXPECT_LE(pae(x, z), pae(x, y) + pae(y, z) + 1e-12);
    EXPECT_LE(afde(x, z), afde(x, y) + afde(y, z) + 1e-12);
  }
  EXPECT_THROW(pae(a, Eigen::VectorXd::Zero(4)), InvalidInput);
}

TEST(Metrics, FixelAccuracy) {
  Volume pred({2, 1, 1}, 1, VolumeKind::Counts), truth({2, 1, 1}, 1, VolumeKind::Counts);
  Volume roi({2, 1, 1}, 1, VolumeKind::Mask);
  EXPECT_FALSE(fixel_accuracy(pred, truth, roi).has_value());
  roi.set(0, 0, 1.0f);
  roi.set(1, 0, 1.0f);
  EXPECT_EQ(*fixel_accuracy(pred, truth, roi), 1.0);
  pred.set(0, 0, 2.0f);
  EXPECT_EQ(*fixel_accuracy(pred, truth, roi), 0.5);
  pred.set(1, 0, 3.0f);
  EXPECT_EQ(*fixel_accuracy(pred, truth, roi), 0.0);
  EXPECT_THROW(fixel_accuracy(pred, Volume({3, 1, 1}, 1, VolumeKind::Counts), roi), InvalidInput);
}

TEST(FixelDir, RoundTrip) {
  Volume fod({2, 2, 1}, 47, VolumeKind::Fod);
  Eigen::VectorXd c = Eigen::VectorXd::Zero(47);
  c.head(45) = 0.6 * delta_sh(Vec3::UnitZ(), kSh) + 0.4 * delta_sh(Vec3::UnitY(), kSh);
  fod.set_voxel(1, c);
  c.head(45) = delta_sh(Vec3::UnitX(), kSh);
  fod.set_voxel(3, c);
  const FixelVolume fv = segment_volume(fod);
  EXPECT_EQ(fv.counts.value(1, 0), 2.0f);
  EXPECT_EQ(fv.counts.value(3, 0), 1.0f);
  const auto dir = std::filesystem::temp_directory_path() / "fodforge_fixel_test";
  write_fixel_dir(dir.string(), fv);
  const FixelVolume back = read_fixel_dir(dir.string());
  EXPECT_EQ(back.counts.data(), fv.counts.data());
  ASSERT_EQ(back.per_voxel[1].size(), 2u);
  EXPECT_NEAR(back.per_voxel[1][0].peak, fv.per_voxel[1][0].peak, 1e-6);
  EXPECT_NEAR(back.per_voxel[3][0].afd, fv.per_voxel[3][0].afd, 1e-6);
  std::filesystem::remove_all(dir);
}

}  // namespace
}  // namespace fodforge
