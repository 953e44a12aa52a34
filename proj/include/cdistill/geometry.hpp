// SPDX-License-Identifier: Apache-2.0
//
// Calibrated LiDAR-to-camera projection and pixel/point correspondence
// matching. Pixel coordinates follow the convention that pixel (r, c) covers
// u in [c, c + 1) and v in [r, r + 1); continuous coordinates are floored.
#pragma once

#include <vector>

#include <Eigen/Core>

#include "cdistill/common.hpp"

namespace cdistill {

struct CameraIntrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const;
};

struct RigidTransform {
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  void validate() const;
  Eigen::Vector3d apply(const Eigen::Vector3d& p) const { return rotation * p + translation; }
  RigidTransform inverse() const;
};

struct SensorRig {
  CameraIntrinsics intrinsics;
  RigidTransform lidar_to_camera;

  void validate() const { intrinsics.validate(); lidar_to_camera.validate(); }
};

/// Points closer to the image plane than this are never visible.
inline constexpr double kMinVisibleDepth = 1e-3;

struct Projection {
  RowMatrix coords;          // N x 2, (u, v); NaN where depth <= kMinVisibleDepth
  Eigen::VectorXd depth;     // camera-frame z
  std::vector<bool> visible;
};

Projection project_points(const Points& points, const SensorRig& rig);

/// Pixel/point pairs, ordered by ascending (row, col). Each pixel keeps only
/// the point with the smallest camera depth.
struct CorrespondenceSet {
  std::vector<int> pixel_rows;
  std::vector<int> pixel_cols;
  std::vector<int> point_indices;

  size_t count() const { return point_indices.size(); }
  bool empty() const { return point_indices.empty(); }
  int pixel_index(size_t i, int width) const { return pixel_rows[i] * width + pixel_cols[i]; }
};

CorrespondenceSet match_correspondences(const Points& points, const SensorRig& rig);

/// Paired feature matrices, row i of each belonging to correspondence i.
struct MatchedFeatures {
  RowMatrix pixel_features;  // G, M x D
  RowMatrix point_features;  // F, M x D

  Index count() const { return pixel_features.rows(); }
  void validate() const;
};

/// feature_map is (height * width) x D in row-major pixel order.
MatchedFeatures gather_matched_features(const RowMatrix& feature_map, int height, int width,
                                        const RowMatrix& point_features,
                                        const CorrespondenceSet& corr);

/// Inverse of the pinhole projection: pixel coordinate and depth back to the
/// LiDAR frame.
Eigen::Vector3d back_project(double u, double v, double depth, const SensorRig& rig);

}  // namespace cdistill
