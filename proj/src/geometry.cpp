// SPDX-License-Identifier: Apache-2.0
#include "cdistill/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/LU>

namespace cdistill {

void CameraIntrinsics::validate() const {
  if (!(fx > 0.0) || !(fy > 0.0)) fail(ErrorKind::kConfig, "camera focal lengths must be positive");
  if (width <= 0 || height <= 0) fail(ErrorKind::kConfig, "image size must be positive");
  if (!(cx >= 0.0 && cx < width) || !(cy >= 0.0 && cy < height)) {
    fail(ErrorKind::kConfig, "principal point must lie inside the image");
  }
}

void RigidTransform::validate() const {
  if (!rotation.allFinite() || !translation.allFinite()) {
    fail(ErrorKind::kConfig, "rigid transform has non-finite entries");
  }
  const double ortho = (rotation.transpose() * rotation - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (ortho > 1e-9 || std::abs(rotation.determinant() - 1.0) > 1e-9) {
    fail(ErrorKind::kConfig, "rotation is not a proper orthonormal matrix");
  }
}

RigidTransform RigidTransform::inverse() const {
  RigidTransform inv;
  inv.rotation = rotation.transpose();
  inv.translation = -(inv.rotation * translation);
  return inv;
}

Projection project_points(const Points& points, const SensorRig& rig) {
  if (!points.allFinite()) fail(ErrorKind::kInput, "point cloud contains non-finite coordinates");
  const auto& k = rig.intrinsics;
  const Index n = points.rows();
  Projection out;
  out.coords = RowMatrix::Constant(n, 2, std::numeric_limits<double>::quiet_NaN());
  out.depth.resize(n);
  out.visible.assign(static_cast<size_t>(n), false);
  for (Index i = 0; i < n; ++i) {
    const Eigen::Vector3d q = rig.lidar_to_camera.apply(points.row(i).transpose());
    out.depth[i] = q.z();
    if (!(q.z() > kMinVisibleDepth)) continue;
    const double u = k.fx * q.x() / q.z() + k.cx;
    const double v = k.fy * q.y() / q.z() + k.cy;
    out.coords(i, 0) = u;
    out.coords(i, 1) = v;
    const double col = std::floor(u);
    const double row = std::floor(v);
    out.visible[static_cast<size_t>(i)] = col >= 0.0 && col < k.width && row >= 0.0 && row < k.height;
  }
  return out;
}

CorrespondenceSet match_correspondences(const Points& points, const SensorRig& rig) {
  const Projection proj = project_points(points, rig);
  const int width = rig.intrinsics.width;
  const int height = rig.intrinsics.height;
  // pixel -> best point so far
  std::vector<int> best(static_cast<size_t>(width) * height, -1);
  for (Index i = 0; i < points.rows(); ++i) {
    if (!proj.visible[static_cast<size_t>(i)]) continue;
    const int col = static_cast<int>(std::floor(proj.coords(i, 0)));
    const int row = static_cast<int>(std::floor(proj.coords(i, 1)));
    int& slot = best[static_cast<size_t>(row) * width + col];
    // Equal depths keep the lower point index.
    if (slot < 0 || proj.depth[i] < proj.depth[slot]) slot = static_cast<int>(i);
  }
  CorrespondenceSet corr;
  for (int r = 0; r < height; ++r) {
    for (int c = 0; c < width; ++c) {
      const int p = best[static_cast<size_t>(r) * width + c];
      if (p < 0) continue;
      corr.pixel_rows.push_back(r);
      corr.pixel_cols.push_back(c);
      corr.point_indices.push_back(p);
    }
  }
  return corr;
}

void MatchedFeatures::validate() const {
  if (pixel_features.rows() != point_features.rows() || pixel_features.cols() != point_features.cols()) {
    fail(ErrorKind::kInput, "matched feature matrices must share shape");
  }
  if (!pixel_features.allFinite() || !point_features.allFinite()) {
    fail(ErrorKind::kNumerical, "matched features contain non-finite values");
  }
}

MatchedFeatures gather_matched_features(const RowMatrix& feature_map, int height, int width,
                                        const RowMatrix& point_features,
                                        const CorrespondenceSet& corr) {
  if (feature_map.rows() != static_cast<Index>(height) * width) {
    fail(ErrorKind::kInput, "feature map row count does not match height * width");
  }
  if (feature_map.cols() != point_features.cols()) {
    std::ostringstream os;
    os << "feature width mismatch: pixel " << feature_map.cols() << " vs point " << point_features.cols();
    fail(ErrorKind::kInput, os.str());
  }
  const Index m = static_cast<Index>(corr.count());
  MatchedFeatures mf;
  mf.pixel_features.resize(m, feature_map.cols());
  mf.point_features.resize(m, point_features.cols());
  for (Index i = 0; i < m; ++i) {
    const int r = corr.pixel_rows[i];
    const int c = corr.pixel_cols[i];
    const int p = corr.point_indices[i];
    if (r < 0 || r >= height || c < 0 || c >= width || p < 0 || p >= point_features.rows()) {
      fail(ErrorKind::kInput, "correspondence index out of bounds");
    }
    mf.pixel_features.row(i) = feature_map.row(static_cast<Index>(r) * width + c);
    mf.point_features.row(i) = point_features.row(p);
  }
  return mf;
}

Eigen::Vector3d back_project(double u, double v, double depth, const SensorRig& rig) {
  const auto& k = rig.intrinsics;
  const Eigen::Vector3d q((u - k.cx) / k.fx * depth, (v - k.cy) / k.fy * depth, depth);
  return rig.lidar_to_camera.inverse().apply(q);
}

}  // namespace cdistill
