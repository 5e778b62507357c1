#include <set>

#include <gtest/gtest.h>

#include "fodforge/acquisition.hpp"

namespace fodforge {
namespace {

TEST(ParseScheme, ConnectomeLikeLayout) {
  const AcquisitionScheme full = connectome_like_scheme();
  const auto [bvec, bval] = serialize_scheme(full);
  const AcquisitionScheme s = parse_scheme(bvec, bval);
  EXPECT_EQ(s.volumes(), 288);
  ASSERT_EQ(s.shells().size(), 4u);
  const double expected[] = {0, 1000, 2000, 3000};
  const std::size_t sizes[] = {18, 90, 90, 90};
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(s.shells()[i].nominal_b, expected[i]);
    EXPECT_EQ(s.shells()[i].volumes.size(), sizes[i]);
  }
}

TEST(ParseScheme, SingleB0Column) {
  const AcquisitionScheme s = parse_scheme("0\n0\n0\n", "0\n");
  EXPECT_EQ(s.volumes(), 1);
  ASSERT_EQ(s.shells().size(), 1u);
  EXPECT_EQ(s.shells()[0].nominal_b, 0.0);
}

TEST(ParseScheme, SingleShellWithoutB0) {
  std::string x, y, z, b;
  for (int i = 0; i < 12; ++i) {
    const double a = 0.5 * i;
    x += std::to_string(std::cos(a)) + " ";
    y += std::to_string(std::sin(a)) + " ";
    z += "0 ";
    b += "1000 ";
  }
  const AcquisitionScheme s = parse_scheme(x + "\n" + y + "\n" + z + "\n", b + "\n");
  ASSERT_EQ(s.shells().size(), 1u);
  EXPECT_EQ(s.shells()[0].nominal_b, 1000.0);
  EXPECT_EQ(s.shells()[0].volumes.size(), 12u);
  EXPECT_FALSE(s.has_b0_shell());
}

TEST(ParseScheme, ClustersJitteredShells) {
  const AcquisitionScheme s = parse_scheme("0 1 0 1\n0 0 1 0\n1 0 0 0\n", "5 995 1010 2005\n");
  ASSERT_EQ(s.shells().size(), 3u);
  EXPECT_EQ(s.shells()[1].nominal_b, 1000.0);
  EXPECT_EQ(s.shells()[1].volumes, (std::vector<int>{1, 2}));
  EXPECT_EQ(s.shells()[2].nominal_b, 2000.0);
}

TEST(ParseScheme, Errors) {
  EXPECT_THROW(parse_scheme("0 0\n0 0\n", "0 0\n"), ParseError);
  EXPECT_THROW(parse_scheme("0 0\n0 0\n1 1\n", "0\n"), ParseError);
  EXPECT_THROW(parse_scheme("0 x\n0 0\n1 1\n", "0 0\n"), ParseError);
  EXPECT_THROW(parse_scheme("0\n0\n1\n", "1e3z\n"), ParseError);
}

TEST(SubsampleFirstK, ThirtyVolumeProtocol) {
  const AcquisitionScheme full = connectome_like_scheme();
  const Subsampled sub = subsample_first_k(full, 9, 3);
  EXPECT_EQ(sub.scheme.volumes(), 30);
  EXPECT_EQ(sub.retained.size(), 30u);
  EXPECT_TRUE(std::is_sorted(sub.retained.begin(), sub.retained.end()));
  EXPECT_EQ(std::set<int>(sub.retained.begin(), sub.retained.end()).size(), 30u);
  ASSERT_EQ(sub.scheme.shells().size(), 4u);
  EXPECT_EQ(sub.scheme.shells()[0].volumes.size(), 3u);
  for (int s = 1; s < 4; ++s) {
    EXPECT_EQ(sub.scheme.shells()[static_cast<std::size_t>(s)].volumes.size(), 9u);
    // Retained DWIs are the first nine of their shell.
    const auto& orig = full.shells()[static_cast<std::size_t>(s)].volumes;
    for (int k = 0; k < 9; ++k)
      EXPECT_NE(std::find(sub.retained.begin(), sub.retained.end(), orig[static_cast<std::size_t>(k)]), sub.retained.end());
  }
}

TEST(SubsampleFirstK, IdentityAndOnePerShell) {
  const AcquisitionScheme full = connectome_like_scheme();
  const Subsampled all = subsample_first_k(full, 90, 18);
  EXPECT_EQ(all.scheme.volumes(), 288);
  for (int v = 0; v < 288; ++v) EXPECT_EQ(all.retained[static_cast<std::size_t>(v)], v);

  const Subsampled one = subsample_first_k(full, 1, 0);
  EXPECT_EQ(one.scheme.volumes(), 3);
  EXPECT_EQ(one.scheme.shells().size(), 3u);
}

TEST(SubsampleFirstK, Idempotent) {
  const AcquisitionScheme full = connectome_like_scheme();
  const Subsampled a = subsample_first_k(full, 9, 3);
  const Subsampled b = subsample_first_k(a.scheme, 9, 3);
  EXPECT_EQ(serialize_scheme(a.scheme), serialize_scheme(b.scheme));
}

TEST(SubsampleFirstK, CapacityErrorNamesShell) {
  const AcquisitionScheme full = connectome_like_scheme();
  try {
    subsample_first_k(full, 91, 3);
    FAIL();
  } catch (const CapacityError& e) {
    EXPECT_NE(std::string(e.what()).find("b=1000"), std::string::npos);
  }
  EXPECT_THROW(subsample_first_k(full, 9, 19), CapacityError);
}

TEST(Serialize, RoundTripPreservesShellTable) {
  const AcquisitionScheme full = connectome_like_scheme();
  const auto [bvec, bval] = serialize_scheme(full);
  const AcquisitionScheme back = parse_scheme(bvec, bval);
  ASSERT_EQ(back.shells().size(), full.shells().size());
  for (std::size_t i = 0; i < full.shells().size(); ++i) {
    EXPECT_EQ(back.shells()[i].nominal_b, full.shells()[i].nominal_b);
    EXPECT_EQ(back.shells()[i].volumes, full.shells()[i].volumes);
  }
}

TEST(SpreadOrder, PrefixesAreSpread) {
  // The first 9 directions of each shell should not cluster.
  const AcquisitionScheme full = connectome_like_scheme();
  for (std::size_t s = 1; s < 4; ++s) {
    const auto& vols = full.shells()[s].volumes;
    double min_angle = 10.0;
    for (int i = 0; i < 9; ++i)
      for (int j = i + 1; j < 9; ++j) {
        const double c = std::abs(full.bvecs()[static_cast<std::size_t>(vols[static_cast<std::size_t>(i)])].dot(
            full.bvecs()[static_cast<std::size_t>(vols[static_cast<std::size_t>(j)])]));
        min_angle = std::min(min_angle, std::acos(std::min(1.0, c)));
      }
    EXPECT_GT(min_angle, 0.5);  // radians
  }
}

}  // namespace
}  // namespace fodforge
