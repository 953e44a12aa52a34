// SPDX-License-Identifier: Apache-2.0
#include <random>
#include <set>

#include <gtest/gtest.h>

#include "cdistill/geometry.hpp"
#include "oracles.hpp"

namespace cdistill {
namespace {

SensorRig identity_rig(int width = 4, int height = 4) {
  SensorRig rig;
  rig.intrinsics = {1.0, 1.0, 0.0, 0.0, width, height};
  return rig;
}

Points one_point(double x, double y, double z) {
  Points p(1, 3);
  p << x, y, z;
  return p;
}

TEST(ProjectPoints, OpticalAxisOfIdentityRig) {
  const Projection p = project_points(one_point(0, 0, 1), identity_rig());
  EXPECT_EQ(p.coords(0, 0), 0.0);
  EXPECT_EQ(p.coords(0, 1), 0.0);
  EXPECT_EQ(p.depth[0], 1.0);
  EXPECT_TRUE(p.visible[0]);
}

TEST(ProjectPoints, BehindCameraIsInvisible) {
  const Projection p = project_points(one_point(0, 0, -1), identity_rig());
  EXPECT_FALSE(p.visible[0]);
  EXPECT_TRUE(std::isnan(p.coords(0, 0)));
}

TEST(ProjectPoints, PinholeFormula) {
  SensorRig rig;
  rig.intrinsics = {100.0, 100.0, 50.0, 50.0, 200, 100};
  const Projection p = project_points(one_point(1, 0, 2), rig);
  EXPECT_DOUBLE_EQ(p.coords(0, 0), 100.0);
  EXPECT_DOUBLE_EQ(p.coords(0, 1), 50.0);
  EXPECT_TRUE(p.visible[0]);
}

TEST(ProjectPoints, RejectsNonFinite) {
  try {
    project_points(one_point(0, std::nan(""), 1), identity_rig());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kInput);
  }
}

TEST(RigInvariants, Reject) {
  SensorRig rig = identity_rig();
  rig.intrinsics.fx = 0.0;
  EXPECT_THROW(rig.validate(), Error);
  rig = identity_rig();
  rig.intrinsics.cx = 4.0;
  EXPECT_THROW(rig.validate(), Error);
  rig = identity_rig();
  rig.lidar_to_camera.rotation(0, 0) = -1.0;  // reflection
  EXPECT_THROW(rig.validate(), Error);
  rig = identity_rig();
  rig.lidar_to_camera.rotation(0, 1) = 1e-6;
  EXPECT_THROW(rig.validate(), Error);
  EXPECT_NO_THROW(identity_rig().validate());
}

TEST(MatchCorrespondences, AllBehindCamera) {
  Points p(3, 3);
  p << 0, 0, -1, 0.5, 0.5, -2, 0, 0, 0;
  EXPECT_TRUE(match_correspondences(p, identity_rig()).empty());
  EXPECT_TRUE(match_correspondences(Points(0, 3), identity_rig()).empty());
}

TEST(MatchCorrespondences, NearestDepthWins) {
  Points p(2, 3);
  p << 2.5, 2.5, 5.0,   // pixel (0, 0) at depth 5
      1.0, 1.0, 2.0;    // same pixel at depth 2
  const CorrespondenceSet c = match_correspondences(p, identity_rig());
  ASSERT_EQ(c.count(), 1u);
  EXPECT_EQ(c.point_indices[0], 1);
  const auto brute = oracle::correspondences(p, identity_rig());
  ASSERT_EQ(brute.size(), 1u);
  EXPECT_EQ(brute[0].point, 1);
}

TEST(MatchCorrespondences, GridOfSixteenWithTenInFrustum) {
  // 4x4 grid on the identity rig; six points are moved out of the frustum
  // (behind the camera or past the image edge).
  Points p(16, 3);
  int n = 0;
  for (int r = 0; r < 4; ++r) {
    for (int c = 0; c < 4; ++c) p.row(n++) << c + 0.5, r + 0.5, 1.0;
  }
  for (int i : {0, 5, 10}) p(i, 2) = -1.0;
  for (int i : {3, 7, 12}) p(i, 0) += 4.0;
  int inside = 0;
  for (int i = 0; i < 16; ++i) {
    const double z = p(i, 2), u = p(i, 0) / z, v = p(i, 1) / z;
    if (z > kMinVisibleDepth && u >= 0 && u < 4 && v >= 0 && v < 4) ++inside;
  }
  ASSERT_EQ(inside, 10);
  EXPECT_EQ(match_correspondences(p, identity_rig()).count(), 10u);
  EXPECT_EQ(oracle::correspondences(p, identity_rig()).size(), 10u);
}

TEST(MatchCorrespondences, AgreesWithBruteForceOnRandomInstances) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 150; ++trial) {
    const SensorRig rig = oracle::random_rig(rng, 6 + trial % 5, 8 + trial % 7);
    const Points pts = oracle::random_cloud(rng, 5 + trial % 60);
    const CorrespondenceSet c = match_correspondences(pts, rig);
    const auto brute = oracle::correspondences(pts, rig);
    ASSERT_EQ(c.count(), brute.size()) << "trial " << trial;
    for (size_t i = 0; i < brute.size(); ++i) {
      EXPECT_EQ(c.pixel_rows[i], brute[i].row);
      EXPECT_EQ(c.pixel_cols[i], brute[i].col);
      EXPECT_EQ(c.point_indices[i], brute[i].point);
    }
  }
}

TEST(MatchCorrespondences, StructuralInvariantsUnderFuzz) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    const int h = 5 + trial % 9, w = 7 + trial % 11;
    const SensorRig rig = oracle::random_rig(rng, h, w);
    const Points pts = oracle::random_cloud(rng, 80);
    const CorrespondenceSet c = match_correspondences(pts, rig);
    ASSERT_EQ(c.pixel_rows.size(), c.count());
    ASSERT_EQ(c.pixel_cols.size(), c.count());
    std::set<int> points, pixels;
    for (size_t i = 0; i < c.count(); ++i) {
      EXPECT_GE(c.pixel_rows[i], 0);
      EXPECT_LT(c.pixel_rows[i], h);
      EXPECT_GE(c.pixel_cols[i], 0);
      EXPECT_LT(c.pixel_cols[i], w);
      points.insert(c.point_indices[i]);
      pixels.insert(c.pixel_index(i, w));
      if (i > 0) EXPECT_LT(c.pixel_index(i - 1, w), c.pixel_index(i, w));
    }
    EXPECT_EQ(points.size(), c.count());
    EXPECT_EQ(pixels.size(), c.count());
  }
}

TEST(MatchCorrespondences, DeduplicationIsIdempotent) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const SensorRig rig = oracle::random_rig(rng, 8, 12);
    const Points pts = oracle::random_cloud(rng, 120);
    const CorrespondenceSet c = match_correspondences(pts, rig);
    Points kept(static_cast<Index>(c.count()), 3);
    for (size_t i = 0; i < c.count(); ++i) kept.row(static_cast<Index>(i)) = pts.row(c.point_indices[i]);
    const CorrespondenceSet again = match_correspondences(kept, rig);
    ASSERT_EQ(again.count(), c.count());
    for (size_t i = 0; i < c.count(); ++i) {
      EXPECT_EQ(again.point_indices[i], static_cast<int>(i));
      EXPECT_EQ(again.pixel_rows[i], c.pixel_rows[i]);
      EXPECT_EQ(again.pixel_cols[i], c.pixel_cols[i]);
    }
  }
}

TEST(MatchCorrespondences, RemovingPointsNeverIncreasesCount) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const SensorRig rig = oracle::random_rig(rng, 8, 12);
    Points pts = oracle::random_cloud(rng, 100);
    size_t previous = match_correspondences(pts, rig).count();
    while (pts.rows() > 0) {
      pts.conservativeResize(pts.rows() - 7 > 0 ? pts.rows() - 7 : 0, 3);
      const size_t now = match_correspondences(pts, rig).count();
      EXPECT_LE(now, previous);
      previous = now;
    }
  }
}

TEST(BackProject, RoundTripOfVisiblePoints) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const SensorRig rig = oracle::random_rig(rng, 20, 30);
    const Points pts = oracle::random_cloud(rng, 60);
    const Projection p = project_points(pts, rig);
    for (Index i = 0; i < pts.rows(); ++i) {
      if (!p.visible[static_cast<size_t>(i)]) continue;
      const Eigen::Vector3d back = back_project(p.coords(i, 0), p.coords(i, 1), p.depth[i], rig);
      EXPECT_LT((back - pts.row(i).transpose()).norm(), 1e-6);
    }
  }
}

TEST(GatherMatchedFeatures, EmptyCorrespondences) {
  const RowMatrix map = RowMatrix::Random(12, 5);
  const RowMatrix pts = RowMatrix::Random(4, 5);
  const MatchedFeatures mf = gather_matched_features(map, 3, 4, pts, CorrespondenceSet{});
  EXPECT_EQ(mf.count(), 0);
  EXPECT_EQ(mf.pixel_features.cols(), 5);
  EXPECT_EQ(mf.point_features.cols(), 5);
}

TEST(GatherMatchedFeatures, ConstantMap) {
  const RowMatrix map = RowMatrix::Constant(12, 3, 0.25);
  const RowMatrix pts = RowMatrix::Random(2, 3);
  CorrespondenceSet c;
  c.pixel_rows = {0, 2};
  c.pixel_cols = {1, 3};
  c.point_indices = {1, 0};
  const MatchedFeatures mf = gather_matched_features(map, 3, 4, pts, c);
  EXPECT_TRUE((mf.pixel_features.array() == 0.25).all());
}

TEST(GatherMatchedFeatures, MatchesNaiveGather) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = 4 + trial % 3, w = 5 + trial % 4, d = 3, n = 15;
    const RowMatrix map = RowMatrix::Random(h * w, d);
    const RowMatrix pts = RowMatrix::Random(n, d);
    CorrespondenceSet c;
    std::uniform_int_distribution<int> pr(0, h - 1), pc(0, w - 1), pp(0, n - 1);
    for (int i = 0; i < 6; ++i) {
      c.pixel_rows.push_back(pr(rng));
      c.pixel_cols.push_back(pc(rng));
      c.point_indices.push_back(pp(rng));
    }
    const MatchedFeatures mf = gather_matched_features(map, h, w, pts, c);
    for (int i = 0; i < 6; ++i) {
      for (int k = 0; k < d; ++k) {
        EXPECT_EQ(mf.pixel_features(i, k), map(c.pixel_rows[i] * w + c.pixel_cols[i], k));
        EXPECT_EQ(mf.point_features(i, k), pts(c.point_indices[i], k));
      }
    }
  }
}

TEST(GatherMatchedFeatures, ShapeMismatchRejected) {
  CorrespondenceSet c;
  c.pixel_rows = {0};
  c.pixel_cols = {0};
  c.point_indices = {0};
  EXPECT_THROW(gather_matched_features(RowMatrix::Zero(12, 3), 3, 4, RowMatrix::Zero(2, 4), c), Error);
  c.pixel_rows = {5};
  EXPECT_THROW(gather_matched_features(RowMatrix::Zero(12, 3), 3, 4, RowMatrix::Zero(2, 3), c), Error);
}

}  // namespace
}  // namespace cdistill
