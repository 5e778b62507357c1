#include <cmath>
#include <cstring>
#include <filesystem>
#include <numbers>

#include <gtest/gtest.h>

#include "fodforge/phantom.hpp"
#include "fodforge/volume.hpp"

namespace fodforge {
namespace {

TEST(VolumeFile, RoundTripIsByteIdentical) {
  Volume v({3, 4, 2}, 5, VolumeKind::Fod);
  for (std::size_t i = 0; i < v.data().size(); ++i) v.data()[i] = std::sin(0.37f * static_cast<float>(i));
  v.meta = {{"l_max_wm", 8}};
  v.voxel_size = {1.25, 1.25, 2.0};
  const std::string bytes = encode_volume(v);
  EXPECT_EQ(bytes.size(), 9 + (bytes.size() - 9 - v.data().size() * 4) + v.data().size() * 4);
  const Volume back = decode_volume(bytes);
  EXPECT_EQ(back.spatial(), v.spatial());
  EXPECT_EQ(back.channels(), 5);
  EXPECT_EQ(back.kind, VolumeKind::Fod);
  EXPECT_EQ(back.data(), v.data());
  EXPECT_EQ(encode_volume(back), bytes);

  const auto path = std::filesystem::temp_directory_path() / "fodforge_volume_test.fodv";
  write_volume(path.string(), v);
  EXPECT_EQ(encode_volume(read_volume(path.string())), bytes);
  std::filesystem::remove(path);
}

TEST(VolumeFile, LayoutIsXFastest) {
  Volume v({2, 3, 1}, 2, VolumeKind::Dwi);
  v.set(v.index(1, 2, 0), 1, 7.0f);
  const std::string bytes = encode_volume(v);
  const std::size_t payload = bytes.size() - 6 * 2 * 4;
  const std::size_t off = payload + 4 * (static_cast<std::size_t>(1 + 2 * 2) + 6 * 1);
  float f;
  std::memcpy(&f, bytes.data() + off, 4);
  EXPECT_EQ(f, 7.0f);
}

TEST(VolumeFile, Errors) {
  EXPECT_THROW(decode_volume("NOPE"), ParseError);
  EXPECT_THROW(decode_volume("FODV1\x02\x00\x00\x00{}"), ParseError);
  std::string bytes = encode_volume(Volume({2, 2, 2}, 1, VolumeKind::Mask));
  EXPECT_THROW(decode_volume(bytes.substr(0, bytes.size() - 1)), ParseError);
  EXPECT_THROW(read_volume("/nonexistent/dir/x.fodv"), IoError);
  EXPECT_THROW(write_volume("/nonexistent/dir/x.fodv", Volume({1, 1, 1}, 1, VolumeKind::Mask)), IoError);
  EXPECT_THROW(expect_kind(Volume({1, 1, 1}, 1, VolumeKind::Mask), VolumeKind::Fod, "--fod"), ConfigError);
}

class PhantomTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() { ph_ = new Phantom(build_phantom(default_phantom_spec(4))); }
  static void TearDownTestSuite() { delete ph_; }
  static Phantom* ph_;
};
Phantom* PhantomTest::ph_ = nullptr;

TEST_F(PhantomTest, ShapesAndCounts) {
  EXPECT_EQ(ph_->fod.spatial(), (Dims3{32, 32, 8}));
  EXPECT_EQ(ph_->fod.channels(), 47);
  EXPECT_EQ(ph_->scheme.volumes(), 288);
  EXPECT_EQ(ph_->counts.value(ph_->counts.index(20, 3, 2), 0), 2.0f);
  EXPECT_EQ(ph_->counts.value(ph_->counts.index(3, 20, 2), 0), 3.0f);
  EXPECT_EQ(ph_->counts.value(ph_->counts.index(3, 3, 2), 0), 1.0f);
  EXPECT_EQ(ph_->counts.value(ph_->counts.index(20, 20, 2), 0), 0.0f);
}

TEST_F(PhantomTest, PureCsfVoxel) {
  const Eigen::VectorXd c = ph_->fod.voxel(ph_->fod.index(20, 28, 1));
  EXPECT_EQ(c.head(45).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_EQ(c(45), 0.0);
  EXPECT_EQ(c(46), 1.0);
  EXPECT_EQ(ph_->wm_mask.value(ph_->fod.index(20, 28, 1), 0), 0.0f);
}

TEST_F(PhantomTest, AfdEqualsWmFraction) {
  for (int v = 0; v < ph_->fod.voxel_count(); v += 13) {
    const int r = ph_->region_of_voxel[static_cast<std::size_t>(v)];
    ASSERT_GE(r, 0);
    const double wm = ph_->spec.regions[static_cast<std::size_t>(r)].wm;
    EXPECT_NEAR(sh_integral(ph_->fod.voxel(v).head(45)), wm, 1e-6);
  }
}

TEST_F(PhantomTest, IsotropicVoxelsGiveShellConstantSignal) {
  const ConvolutionOperator op = build_operator(ph_->scheme, preset_responses(shell_bvalues(ph_->scheme)), 8);
  const Volume dwi = simulate_dwi(ph_->fod, op, NoiseModel::None, 0.0, 1);
  const int v = dwi.index(25, 18, 3);
  for (const Shell& s : ph_->scheme.shells())
    for (int i : s.volumes) EXPECT_NEAR(dwi.value(v, i), dwi.value(v, s.volumes.front()), 1e-6);
}

TEST_F(PhantomTest, NoiseDeterminismAndRicianFloor) {
  const ConvolutionOperator op = build_operator(ph_->scheme, preset_responses(shell_bvalues(ph_->scheme)), 8);
  const Volume clean = simulate_dwi(ph_->fod, op, NoiseModel::None, 0.0, 9);
  EXPECT_EQ(simulate_dwi(ph_->fod, op, NoiseModel::Rician, 0.0, 9).data(), clean.data());
  const Volume a = simulate_dwi(ph_->fod, op, NoiseModel::Rician, 0.05, 9);
  EXPECT_EQ(simulate_dwi(ph_->fod, op, NoiseModel::Rician, 0.05, 9).data(), a.data());
  EXPECT_NE(simulate_dwi(ph_->fod, op, NoiseModel::Rician, 0.05, 10).data(), a.data());
  // Rician bias: mean noisy b0 is not below the noiseless b0.
  double noisy = 0.0, truth = 0.0;
  long n = 0;
  for (int v = 0; v < a.voxel_count(); ++v)
    for (int i : ph_->scheme.shells().front().volumes) {
      noisy += a.value(v, i);
      truth += clean.value(v, i);
      ++n;
    }
  ASSERT_GE(n, 10000);
  EXPECT_GE(noisy / n, truth / n - 3.0 * 0.05 / std::sqrt(static_cast<double>(n)));
  EXPECT_THROW(simulate_dwi(ph_->fod, op, NoiseModel::Gaussian, -1.0, 0), InvalidInput);
}

TEST_F(PhantomTest, SeedChangesOrientation) {
  const Phantom other = build_phantom(default_phantom_spec(5));
  EXPECT_NE(other.fod.data(), ph_->fod.data());
  EXPECT_EQ(build_phantom(default_phantom_spec(4)).fod.data(), ph_->fod.data());
}

TEST(PhantomSpecJson, RoundTripAndErrors) {
  const PhantomSpec s = default_phantom_spec(7);
  const PhantomSpec back = phantom_spec_from_json(to_json(s));
  EXPECT_EQ(to_json(back), to_json(s));

  nlohmann::json bad = to_json(s);
  bad["regions"][0]["fractions"]["wm"] = 0.5;
  EXPECT_THROW(phantom_spec_from_json(bad), ConfigError);
  bad = to_json(s);
  bad["regions"][1]["box"] = {0, 17, 0, 16, 0, 8};
  EXPECT_THROW(build_phantom(phantom_spec_from_json(bad)), ConfigError);
  bad = to_json(s);
  bad["regions"][1]["crossing_angle_deg"] = 120.0;
  EXPECT_THROW(phantom_spec_from_json(bad), ConfigError);
  bad = to_json(s);
  bad.erase("dims");
  EXPECT_THROW(phantom_spec_from_json(bad), ConfigError);
}

TEST(Responses, PresetIsPositiveAndDecaying) {
  const auto r = preset_responses({0, 1000, 2000, 3000}, 8);
  ASSERT_EQ(r.size(), 3u);
  for (int s = 0; s < 4; ++s) EXPECT_GT(r[0].coeffs(s, 0), 0.0);
  EXPECT_NEAR(r[0].coeffs(0, 0), std::sqrt(4.0 * std::numbers::pi), 1e-12);
  EXPECT_GT(r[2].coeffs(0, 0), r[2].coeffs(1, 0));
}

}  // namespace
}  // namespace fodforge
