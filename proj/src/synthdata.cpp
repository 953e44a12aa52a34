// SPDX-License-Identifier: Apache-2.0
#include "cdistill/synthdata.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace cdistill {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// enums

std::string to_string(Condition c) {
  switch (c) {
    case Condition::kDayClear: return "day_clear";
    case Condition::kDayRain: return "day_rain";
    case Condition::kNight: return "night";
  }
  return "?";
}

Condition condition_from_string(const std::string& s) {
  for (Condition c : kAllConditions) {
    if (to_string(c) == s) return c;
  }
  fail(ErrorKind::kConfig, "unknown condition '" + s + "'");
}

std::string to_string(ImageCorruption k) {
  switch (k) {
    case ImageCorruption::kNight: return "night";
    case ImageCorruption::kRain: return "rain";
    case ImageCorruption::kFog: return "fog";
    case ImageCorruption::kGaussian: return "gaussian";
    case ImageCorruption::kMotionBlur: return "motion_blur";
  }
  return "?";
}

ImageCorruption image_corruption_from_string(const std::string& s) {
  for (ImageCorruption k : kAllImageCorruptions) {
    if (to_string(k) == s) return k;
  }
  fail(ErrorKind::kConfig, "unknown image corruption '" + s + "'");
}

std::string to_string(LidarCorruption k) {
  return k == LidarCorruption::kGaussianNoise ? "gaussian_noise" : "density_decrease";
}

LidarCorruption lidar_corruption_from_string(const std::string& s) {
  if (s == "gaussian_noise") return LidarCorruption::kGaussianNoise;
  if (s == "density_decrease") return LidarCorruption::kDensityDecrease;
  fail(ErrorKind::kConfig, "unknown lidar corruption '" + s + "'");
}

std::string to_string(Split s) { return s == Split::kTrain ? "train" : "val"; }

namespace {

std::string kind_name(PrimitiveKind k) {
  switch (k) {
    case PrimitiveKind::kSphere: return "sphere";
    case PrimitiveKind::kBox: return "box";
    case PrimitiveKind::kVerticalCylinder: return "vertical_cylinder";
  }
  return "?";
}

}  // namespace

// ---------------------------------------------------------------------------
// scenes

WorldConfig default_world_config() {
  WorldConfig w;
  w.classes = {
      {PrimitiveKind::kBox, {3.8, 1.8, 1.5}, {0.75, 0.15, 0.12}},               // vehicle
      {PrimitiveKind::kVerticalCylinder, {0.7, 0.7, 1.8}, {0.15, 0.25, 0.70}},  // pedestrian
      {PrimitiveKind::kSphere, {2.6, 2.6, 2.6}, {0.15, 0.60, 0.20}},            // vegetation
      {PrimitiveKind::kBox, {2.5, 5.0, 4.0}, {0.62, 0.56, 0.45}},               // building
      {PrimitiveKind::kVerticalCylinder, {0.4, 0.4, 4.0}, {0.85, 0.75, 0.10}},  // pole
      {PrimitiveKind::kSphere, {1.2, 1.2, 1.2}, {0.70, 0.20, 0.70}},            // barrier
  };
  w.class_mixture = {0.28, 0.16, 0.18, 0.12, 0.14, 0.12};
  return w;
}

void WorldConfig::validate() const {
  if (!(x_min < x_max) || !(y_min < y_max)) fail(ErrorKind::kConfig, "world bounds are degenerate");
  if (min_primitives < 1 || max_primitives < min_primitives) {
    fail(ErrorKind::kConfig, "primitive count range must satisfy 1 <= min <= max");
  }
  if (classes.empty() || class_mixture.size() != classes.size()) {
    fail(ErrorKind::kConfig, "class mixture must have one weight per class");
  }
  double total = 0.0;
  for (double w : class_mixture) {
    if (!(w >= 0.0)) fail(ErrorKind::kConfig, "class mixture weights must be non-negative");
    total += w;
  }
  if (!(total > 0.0)) fail(ErrorKind::kConfig, "class mixture must have positive mass");
  if (!(size_jitter >= 0.0 && size_jitter < 1.0)) fail(ErrorKind::kConfig, "size_jitter must be in [0, 1)");
  if (!(ambient_min > 0.0 && ambient_min <= ambient_max && ambient_max <= 1.0)) {
    fail(ErrorKind::kConfig, "ambient range must lie in (0, 1]");
  }
}

SceneSpec generate_scene(uint64_t seed, const WorldConfig& world) {
  world.validate();
  Rng rng(derive_seed(seed, "scene"));
  std::uniform_int_distribution<int> count_dist(world.min_primitives, world.max_primitives);
  std::discrete_distribution<int> class_dist(world.class_mixture.begin(), world.class_mixture.end());
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  SceneSpec scene;
  scene.seed = seed;
  scene.ground_plane_height = world.ground_plane_height;
  scene.ambient_light = uniform(world.ambient_min, world.ambient_max);
  const int count = count_dist(rng);
  for (int i = 0; i < count; ++i) {
    const int cls = class_dist(rng);
    const ClassTemplate& t = world.classes[static_cast<size_t>(cls)];
    Primitive p;
    p.class_id = cls + 1;
    p.kind = t.kind;
    const double scale = uniform(1.0 - world.size_jitter, 1.0 + world.size_jitter);
    p.size = t.size * scale;
    if (t.kind != PrimitiveKind::kBox) p.size.y() = p.size.x();
    if (t.kind == PrimitiveKind::kSphere) p.size.z() = p.size.x();
    for (int c = 0; c < 3; ++c) {
      p.albedo[c] = std::clamp(t.albedo[c] + uniform(-world.albedo_jitter, world.albedo_jitter), 0.0, 1.0);
    }
    p.center.x() = uniform(world.x_min, world.x_max);
    p.center.y() = uniform(world.y_min, world.y_max);
    p.center.z() = world.ground_plane_height + 0.5 * p.size.z();
    scene.primitives.push_back(p);
  }
  return scene;
}

// ---------------------------------------------------------------------------
// ray casting

namespace {

struct Hit {
  double t = std::numeric_limits<double>::infinity();
  Eigen::Vector3d normal = Eigen::Vector3d::UnitZ();
  int class_id = -1;
  Eigen::Vector3d albedo = Eigen::Vector3d::Zero();
};

constexpr double kRayEpsilon = 1e-9;

double ray_sphere(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Primitive& p, Eigen::Vector3d* n) {
  const double r = 0.5 * p.size.x();
  const Eigen::Vector3d oc = o - p.center;
  const double a = d.squaredNorm();
  const double b = 2.0 * d.dot(oc);
  const double c = oc.squaredNorm() - r * r;
  const double disc = b * b - 4.0 * a * c;
  if (disc < 0.0) return -1.0;
  const double sq = std::sqrt(disc);
  double t = (-b - sq) / (2.0 * a);
  if (t <= kRayEpsilon) t = (-b + sq) / (2.0 * a);
  if (t <= kRayEpsilon) return -1.0;
  *n = (o + t * d - p.center) / r;
  return t;
}

double ray_box(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Primitive& p, Eigen::Vector3d* n) {
  const Eigen::Vector3d lo = p.center - 0.5 * p.size;
  const Eigen::Vector3d hi = p.center + 0.5 * p.size;
  double t_near = -std::numeric_limits<double>::infinity();
  double t_far = std::numeric_limits<double>::infinity();
  int near_axis = -1;
  int far_axis = -1;
  for (int k = 0; k < 3; ++k) {
    if (std::abs(d[k]) < 1e-15) {
      if (o[k] < lo[k] || o[k] > hi[k]) return -1.0;
      continue;
    }
    double t0 = (lo[k] - o[k]) / d[k];
    double t1 = (hi[k] - o[k]) / d[k];
    if (t0 > t1) std::swap(t0, t1);
    if (t0 > t_near) { t_near = t0; near_axis = k; }
    if (t1 < t_far) { t_far = t1; far_axis = k; }
  }
  if (t_near > t_far) return -1.0;
  double t = t_near;
  int axis = near_axis;
  if (t <= kRayEpsilon) { t = t_far; axis = far_axis; }
  if (t <= kRayEpsilon || axis < 0) return -1.0;
  *n = Eigen::Vector3d::Zero();
  (*n)[axis] = d[axis] > 0.0 ? -1.0 : 1.0;
  return t;
}

double ray_cylinder(const Eigen::Vector3d& o, const Eigen::Vector3d& d, const Primitive& p, Eigen::Vector3d* n) {
  const double r = 0.5 * p.size.x();
  const double z_lo = p.center.z() - 0.5 * p.size.z();
  const double z_hi = p.center.z() + 0.5 * p.size.z();
  double best = -1.0;
  auto consider = [&](double t, const Eigen::Vector3d& normal) {
    if (t > kRayEpsilon && (best < 0.0 || t < best)) { best = t; *n = normal; }
  };
  const double ox = o.x() - p.center.x();
  const double oy = o.y() - p.center.y();
  const double a = d.x() * d.x() + d.y() * d.y();
  if (a > 1e-15) {
    const double b = 2.0 * (ox * d.x() + oy * d.y());
    const double c = ox * ox + oy * oy - r * r;
    const double disc = b * b - 4.0 * a * c;
    if (disc >= 0.0) {
      const double sq = std::sqrt(disc);
      for (double t : {(-b - sq) / (2.0 * a), (-b + sq) / (2.0 * a)}) {
        const double z = o.z() + t * d.z();
        if (z >= z_lo && z <= z_hi) {
          consider(t, Eigen::Vector3d((ox + t * d.x()) / r, (oy + t * d.y()) / r, 0.0));
        }
      }
    }
  }
  if (std::abs(d.z()) > 1e-15) {
    for (double zc : {z_lo, z_hi}) {
      const double t = (zc - o.z()) / d.z();
      const double x = ox + t * d.x();
      const double y = oy + t * d.y();
      if (x * x + y * y <= r * r) consider(t, Eigen::Vector3d(0.0, 0.0, zc == z_hi ? 1.0 : -1.0));
    }
  }
  return best;
}

Hit cast(const SceneSpec& scene, const Eigen::Vector3d& o, const Eigen::Vector3d& d, const RenderConfig& render) {
  Hit hit;
  if (d.z() < 0.0 && o.z() > scene.ground_plane_height) {
    hit.t = (scene.ground_plane_height - o.z()) / d.z();
    hit.normal = Eigen::Vector3d::UnitZ();
    hit.class_id = 0;
    hit.albedo = render.ground_albedo;
  }
  for (const Primitive& p : scene.primitives) {
    Eigen::Vector3d n;
    double t = -1.0;
    switch (p.kind) {
      case PrimitiveKind::kSphere: t = ray_sphere(o, d, p, &n); break;
      case PrimitiveKind::kBox: t = ray_box(o, d, p, &n); break;
      case PrimitiveKind::kVerticalCylinder: t = ray_cylinder(o, d, p, &n); break;
    }
    if (t > 0.0 && t < hit.t) {
      hit.t = t;
      hit.normal = n;
      hit.class_id = p.class_id;
      hit.albedo = p.albedo;
    }
  }
  return hit;
}

}  // namespace

void RenderConfig::validate() const {
  if (lidar_azimuth_bins < 1 || lidar_elevation_bins < 1) fail(ErrorKind::kConfig, "lidar grid must be non-empty");
  if (!(azimuth_min_deg < azimuth_max_deg) || !(elevation_min_deg < elevation_max_deg)) {
    fail(ErrorKind::kConfig, "lidar angular ranges are degenerate");
  }
  if (!(lidar_max_range > 0.0) || !(camera_max_depth > 0.0)) fail(ErrorKind::kConfig, "ranges must be positive");
  if (!(light_direction.norm() > 0.0)) fail(ErrorKind::kConfig, "light direction must be non-zero");
  if (!(lambert_floor >= 0.0 && lambert_floor <= 1.0)) fail(ErrorKind::kConfig, "lambert_floor must be in [0, 1]");
}

SensorRig default_rig(int height, int width) {
  SensorRig rig;
  rig.intrinsics.width = width;
  rig.intrinsics.height = height;
  rig.intrinsics.fx = 0.5 * width;  // 90 degree horizontal field of view
  rig.intrinsics.fy = 0.5 * width;
  rig.intrinsics.cx = 0.5 * width - 0.5;
  rig.intrinsics.cy = 0.5 * height - 0.5;
  // camera axes: x right, y down, z forward
  rig.lidar_to_camera.rotation << 0, -1, 0,
                                  0, 0, -1,
                                  1, 0, 0;
  // LiDAR sits 5 cm above the camera.
  rig.lidar_to_camera.translation = Eigen::Vector3d(0.0, -0.05, 0.0);
  return rig;
}

void Sample::validate(int num_classes) const {
  const Index pixels = static_cast<Index>(height) * width;
  if (image.rows() != pixels || image.cols() != 3 || image_clean.rows() != pixels || image_clean.cols() != 3) {
    fail(ErrorKind::kInput, sample_id + ": image shape mismatch");
  }
  if (image.minCoeff() < 0.0 || image.maxCoeff() > 1.0) fail(ErrorKind::kInput, sample_id + ": image outside [0,1]");
  if (points.rows() == 0) fail(ErrorKind::kInput, sample_id + ": empty point cloud");
  if (point_labels.size() != static_cast<size_t>(points.rows())) fail(ErrorKind::kInput, sample_id + ": label count");
  for (int l : point_labels) {
    if (l < 0 || l > num_classes) fail(ErrorKind::kInput, sample_id + ": label out of range");
  }
  if (pixel_depth.size() != pixels || pixel_depth.minCoeff() < 0.0) fail(ErrorKind::kInput, sample_id + ": depth");
}

RenderedSample render_sample(const SceneSpec& scene, const SensorRig& rig, const RenderConfig& render) {
  rig.validate();
  render.validate();
  const auto& k = rig.intrinsics;
  const int h = k.height;
  const int w = k.width;
  const Eigen::Vector3d light = render.light_direction.normalized();
  const Eigen::Matrix3d cam_to_world = rig.lidar_to_camera.rotation.transpose();
  const Eigen::Vector3d cam_origin = -(cam_to_world * rig.lidar_to_camera.translation);

  RenderedSample out;
  Sample& s = out.sample;
  s.condition = Condition::kDayClear;
  s.rig = rig;
  s.height = h;
  s.width = w;
  s.image.resize(static_cast<Index>(h) * w, 3);
  s.pixel_depth = Eigen::VectorXd::Zero(static_cast<Index>(h) * w);
  out.pixel_class.assign(static_cast<size_t>(h) * w, -1);

  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Index px = static_cast<Index>(r) * w + c;
      // camera-frame direction with unit z, so the hit parameter is the depth
      const Eigen::Vector3d d_cam((c + 0.5 - k.cx) / k.fx, (r + 0.5 - k.cy) / k.fy, 1.0);
      const Eigen::Vector3d d = cam_to_world * d_cam;
      const Hit hit = cast(scene, cam_origin, d, render);
      if (hit.class_id < 0 || hit.t > render.camera_max_depth) {
        s.image.row(px) = (render.sky_color * scene.ambient_light).transpose();
        continue;
      }
      Eigen::Vector3d n = hit.normal;
      if (n.dot(d) > 0.0) n = -n;
      const double lambert = render.lambert_floor + (1.0 - render.lambert_floor) * std::max(0.0, n.dot(light));
      s.image.row(px) = (hit.albedo * (scene.ambient_light * lambert)).cwiseMin(1.0).transpose();
      s.pixel_depth[px] = hit.t;
      out.pixel_class[static_cast<size_t>(px)] = hit.class_id;
    }
  }
  s.image_clean = s.image;

  std::vector<Eigen::Vector3d> pts;
  const double deg = std::numbers::pi / 180.0;
  const Eigen::Vector3d lidar_origin = Eigen::Vector3d::Zero();
  for (int e = 0; e < render.lidar_elevation_bins; ++e) {
    const double phi = (render.elevation_min_deg +
                        (e + 0.5) * (render.elevation_max_deg - render.elevation_min_deg) /
                            render.lidar_elevation_bins) * deg;
    for (int a = 0; a < render.lidar_azimuth_bins; ++a) {
      const double theta = (render.azimuth_min_deg +
                            (a + 0.5) * (render.azimuth_max_deg - render.azimuth_min_deg) /
                                render.lidar_azimuth_bins) * deg;
      const Eigen::Vector3d d(std::cos(phi) * std::cos(theta), std::cos(phi) * std::sin(theta), std::sin(phi));
      const Hit hit = cast(scene, lidar_origin, d, render);
      if (hit.class_id < 0 || hit.t > render.lidar_max_range) continue;
      pts.push_back(lidar_origin + hit.t * d);
      s.point_labels.push_back(hit.class_id);
    }
  }
  s.points.resize(static_cast<Index>(pts.size()), 3);
  for (size_t i = 0; i < pts.size(); ++i) s.points.row(static_cast<Index>(i)) = pts[i].transpose();
  return out;
}

// ---------------------------------------------------------------------------
// corruptions

RowMatrix corrupt_image(const RowMatrix& image, int height, int width, ImageCorruption kind, int severity,
                        uint64_t seed, const Eigen::VectorXd* depth) {
  if (severity < 0 || severity > kMaxImageSeverity) {
    fail(ErrorKind::kConfig, "image corruption severity must be in [0, 5]");
  }
  const Index pixels = static_cast<Index>(height) * width;
  if (image.rows() != pixels || image.cols() != 3) fail(ErrorKind::kInput, "image shape mismatch");
  if (severity == 0) return image;
  const double s = severity;
  Rng rng(derive_seed(seed, "corrupt/" + to_string(kind)));
  RowMatrix out = image;
  switch (kind) {
    case ImageCorruption::kNight: {
      const double gamma = 1.0 + 0.6 * s;
      const double gain = 1.0 / (1.0 + 0.5 * s);
      std::normal_distribution<double> noise(0.0, 0.02 * s);
      for (Index i = 0; i < out.size(); ++i) {
        out.data()[i] = gain * std::pow(image.data()[i], gamma) + noise(rng);
      }
      break;
    }
    case ImageCorruption::kRain: {
      const double contrast = 1.0 - 0.08 * s;
      const Eigen::RowVector3d mean = image.colwise().mean();
      out = ((image.rowwise() - mean) * contrast).rowwise() + mean;
      const int streaks = static_cast<int>(std::lround(s * pixels / 150.0));
      const int length = 3 + severity;
      std::uniform_int_distribution<int> row_dist(0, height - 1);
      std::uniform_int_distribution<int> col_dist(0, width - 1);
      constexpr double kStreakAlpha = 0.6;
      constexpr double kStreakLevel = 0.85;
      for (int k = 0; k < streaks; ++k) {
        const int r0 = row_dist(rng);
        const int c0 = col_dist(rng);
        for (int j = 0; j < length; ++j) {
          const int r = r0 + j;
          const int c = c0 + j / 4;  // slight slant
          if (r >= height || c >= width) break;
          const Index px = static_cast<Index>(r) * width + c;
          out.row(px) = out.row(px) * (1.0 - kStreakAlpha) + Eigen::RowVector3d::Constant(kStreakAlpha * kStreakLevel);
        }
      }
      break;
    }
    case ImageCorruption::kFog: {
      for (Index px = 0; px < pixels; ++px) {
        const bool has_depth = depth != nullptr && (*depth)[px] > 0.0;
        const double w = has_depth ? 1.0 - std::exp(-0.3 * s * (*depth)[px] / kFogDepthScale)
                                   : 1.0 - std::exp(-0.3 * s);
        out.row(px) = image.row(px) * (1.0 - w) + Eigen::RowVector3d::Constant(0.7 * w);
      }
      break;
    }
    case ImageCorruption::kGaussian: {
      std::normal_distribution<double> noise(0.0, 0.04 * s);
      for (Index i = 0; i < out.size(); ++i) out.data()[i] = image.data()[i] + noise(rng);
      break;
    }
    case ImageCorruption::kMotionBlur: {
      // horizontal box filter, replicated borders
      const int half = severity;
      for (int r = 0; r < height; ++r) {
        for (int c = 0; c < width; ++c) {
          Eigen::RowVector3d acc = Eigen::RowVector3d::Zero();
          for (int dc = -half; dc <= half; ++dc) {
            const int cc = std::clamp(c + dc, 0, width - 1);
            acc += image.row(static_cast<Index>(r) * width + cc);
          }
          out.row(static_cast<Index>(r) * width + c) = acc / (2.0 * half + 1.0);
        }
      }
      break;
    }
  }
  return out.cwiseMax(0.0).cwiseMin(1.0);
}

CorruptedCloud corrupt_lidar(const Points& points, LidarCorruption kind, int severity, uint64_t seed) {
  if (severity < 0 || severity > kMaxLidarSeverity) {
    fail(ErrorKind::kConfig, "lidar corruption severity must be in [0, 2]");
  }
  CorruptedCloud out;
  const Index n = points.rows();
  if (severity == 0) {
    out.points = points;
    out.source_index.resize(static_cast<size_t>(n));
    std::iota(out.source_index.begin(), out.source_index.end(), 0);
    return out;
  }
  Rng rng(derive_seed(seed, "lidar/" + to_string(kind)));
  if (kind == LidarCorruption::kGaussianNoise) {
    std::normal_distribution<double> noise(0.0, 0.02 * severity);
    out.points = points;
    for (Index i = 0; i < out.points.size(); ++i) out.points.data()[i] += noise(rng);
    out.source_index.resize(static_cast<size_t>(n));
    std::iota(out.source_index.begin(), out.source_index.end(), 0);
    return out;
  }
  const double keep_fraction = 1.0 - 0.25 * severity;
  const auto keep = static_cast<size_t>(std::lround(keep_fraction * static_cast<double>(n)));
  std::vector<int> order(static_cast<size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  order.resize(keep);
  std::sort(order.begin(), order.end());
  out.source_index = order;
  out.points.resize(static_cast<Index>(keep), 3);
  for (size_t i = 0; i < keep; ++i) out.points.row(static_cast<Index>(i)) = points.row(order[i]);
  return out;
}

// ---------------------------------------------------------------------------
// datasets

void DatasetConfig::validate() const {
  if (train < 0 || val < 0) fail(ErrorKind::kConfig, "sample counts must be non-negative");
  if (!(night_fraction >= 0.0) || !(rain_fraction >= 0.0) || night_fraction + rain_fraction > 1.0) {
    fail(ErrorKind::kConfig, "condition fractions must be non-negative and sum to at most 1");
  }
  if (night_severity < 1 || night_severity > kMaxImageSeverity || rain_severity < 1 ||
      rain_severity > kMaxImageSeverity) {
    fail(ErrorKind::kConfig, "condition severities must be in [1, 5]");
  }
  if (image_height <= 0 || image_width <= 0) fail(ErrorKind::kConfig, "image size must be positive");
  world.validate();
  render.validate();
}

std::string DatasetConfig::canonical() const {
  json j;
  j["seed"] = seed;
  j["train"] = train;
  j["val"] = val;
  j["night_fraction"] = night_fraction;
  j["rain_fraction"] = rain_fraction;
  j["night_severity"] = night_severity;
  j["rain_severity"] = rain_severity;
  j["image_height"] = image_height;
  j["image_width"] = image_width;
  json classes = json::array();
  for (size_t i = 0; i < world.classes.size(); ++i) {
    const auto& t = world.classes[i];
    classes.push_back({{"kind", kind_name(t.kind)},
                       {"size", {t.size.x(), t.size.y(), t.size.z()}},
                       {"albedo", {t.albedo.x(), t.albedo.y(), t.albedo.z()}},
                       {"weight", world.class_mixture[i]}});
  }
  j["world"] = {{"x", {world.x_min, world.x_max}},
                {"y", {world.y_min, world.y_max}},
                {"ground", world.ground_plane_height},
                {"primitives", {world.min_primitives, world.max_primitives}},
                {"classes", classes},
                {"size_jitter", world.size_jitter},
                {"albedo_jitter", world.albedo_jitter},
                {"ambient", {world.ambient_min, world.ambient_max}}};
  j["render"] = {{"lidar_grid", {render.lidar_azimuth_bins, render.lidar_elevation_bins}},
                 {"azimuth_deg", {render.azimuth_min_deg, render.azimuth_max_deg}},
                 {"elevation_deg", {render.elevation_min_deg, render.elevation_max_deg}},
                 {"lidar_max_range", render.lidar_max_range},
                 {"camera_max_depth", render.camera_max_depth},
                 {"lambert_floor", render.lambert_floor}};
  return j.dump();
}

std::vector<SampleRecord> DatasetManifest::split(Split s) const {
  std::vector<SampleRecord> out;
  std::copy_if(records.begin(), records.end(), std::back_inserter(out),
               [s](const SampleRecord& r) { return r.split == s; });
  return out;
}

void DatasetManifest::recount() {
  counts.clear();
  for (Split sp : {Split::kTrain, Split::kVal}) {
    for (Condition c : kAllConditions) counts[to_string(sp) + "/" + to_string(c)] = 0;
  }
  for (const auto& r : records) ++counts[to_string(r.split) + "/" + to_string(r.condition)];
  counts["total"] = static_cast<int>(records.size());
}

std::vector<Condition> assign_conditions(int n, double night_fraction, double rain_fraction, uint64_t seed) {
  const int nights = static_cast<int>(std::lround(n * night_fraction));
  const int rains = std::min(n - nights, static_cast<int>(std::lround(n * rain_fraction)));
  std::vector<Condition> conditions(static_cast<size_t>(n), Condition::kDayClear);
  std::fill_n(conditions.begin(), nights, Condition::kNight);
  std::fill_n(conditions.begin() + nights, rains, Condition::kDayRain);
  Rng rng(derive_seed(seed, "conditions"));
  std::shuffle(conditions.begin(), conditions.end(), rng);
  return conditions;
}

Sample make_sample(const DatasetConfig& config, const std::string& sample_id, Condition condition) {
  const uint64_t sample_seed = derive_seed(config.seed, sample_id);
  const SceneSpec scene = generate_scene(sample_seed, config.world);
  const SensorRig rig = default_rig(config.image_height, config.image_width);
  Sample s = render_sample(scene, rig, config.render).sample;
  s.sample_id = sample_id;
  s.condition = condition;
  if (condition == Condition::kNight) {
    s.image = corrupt_image(s.image_clean, s.height, s.width, ImageCorruption::kNight, config.night_severity,
                            sample_seed);
  } else if (condition == Condition::kDayRain) {
    s.image = corrupt_image(s.image_clean, s.height, s.width, ImageCorruption::kRain, config.rain_severity,
                            sample_seed);
  }
  return s;
}

namespace {

json rig_to_json(const SensorRig& rig) {
  const auto& k = rig.intrinsics;
  json r = json::array();
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r.push_back(rig.lidar_to_camera.rotation(i, j));
  const auto& t = rig.lidar_to_camera.translation;
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width}, {"height", k.height},
          {"rotation", r}, {"translation", {t.x(), t.y(), t.z()}}};
}

SensorRig rig_from_json(const json& j) {
  SensorRig rig;
  rig.intrinsics.fx = j.at("fx");
  rig.intrinsics.fy = j.at("fy");
  rig.intrinsics.cx = j.at("cx");
  rig.intrinsics.cy = j.at("cy");
  rig.intrinsics.width = j.at("width");
  rig.intrinsics.height = j.at("height");
  const auto& r = j.at("rotation");
  for (int i = 0; i < 3; ++i)
    for (int k = 0; k < 3; ++k) rig.lidar_to_camera.rotation(i, k) = r.at(static_cast<size_t>(i * 3 + k));
  const auto& t = j.at("translation");
  rig.lidar_to_camera.translation = Eigen::Vector3d(t.at(0), t.at(1), t.at(2));
  rig.validate();
  return rig;
}

std::span<const double> as_span(const RowMatrix& m) { return {m.data(), static_cast<size_t>(m.size())}; }

}  // namespace

void save_sample(const Sample& s, const fs::path& dir) {
  fs::create_directories(dir);
  const int n = static_cast<int>(s.points.rows());
  json meta;
  meta["sample_id"] = s.sample_id;
  meta["condition"] = to_string(s.condition);
  meta["height"] = s.height;
  meta["width"] = s.width;
  meta["num_points"] = n;
  meta["rig"] = rig_to_json(s.rig);
  meta["arrays"] = {
      {"image.f32", {{"dtype", "float32"}, {"shape", {s.height, s.width, 3}}}},
      {"image_clean.f32", {{"dtype", "float32"}, {"shape", {s.height, s.width, 3}}}},
      {"points.f32", {{"dtype", "float32"}, {"shape", {n, 3}}}},
      {"depth.f32", {{"dtype", "float32"}, {"shape", {s.height, s.width}}, {"invalid", 0.0}}},
      {"labels.u16", {{"dtype", "uint16"}, {"shape", {n}}}},
  };
  meta["byte_order"] = "little";
  write_text(dir / "meta.json", meta.dump(2) + "\n");
  write_f32(dir / "image.f32", as_span(s.image));
  write_f32(dir / "image_clean.f32", as_span(s.image_clean));
  write_f32(dir / "points.f32", {s.points.data(), static_cast<size_t>(s.points.size())});
  write_f32(dir / "depth.f32", {s.pixel_depth.data(), static_cast<size_t>(s.pixel_depth.size())});
  write_u16(dir / "labels.u16", s.point_labels);
}

Sample load_sample(const fs::path& dir) {
  json meta;
  try {
    meta = json::parse(read_text(dir / "meta.json"));
  } catch (const json::exception& e) {
    fail(ErrorKind::kIo, dir.string() + "/meta.json: " + e.what());
  }
  Sample s;
  s.sample_id = meta.at("sample_id");
  s.condition = condition_from_string(meta.at("condition"));
  s.height = meta.at("height");
  s.width = meta.at("width");
  s.rig = rig_from_json(meta.at("rig"));
  const int n = meta.at("num_points");
  const Index pixels = static_cast<Index>(s.height) * s.width;
  auto load_matrix = [&](const char* name, Index rows, Index cols) {
    const auto v = read_f32(dir / name, static_cast<size_t>(rows * cols));
    RowMatrix m(rows, cols);
    std::copy(v.begin(), v.end(), m.data());
    return m;
  };
  s.image = load_matrix("image.f32", pixels, 3);
  s.image_clean = load_matrix("image_clean.f32", pixels, 3);
  const RowMatrix pts = load_matrix("points.f32", n, 3);
  s.points = pts;
  const auto depth = read_f32(dir / "depth.f32", static_cast<size_t>(pixels));
  s.pixel_depth = Eigen::Map<const Eigen::VectorXd>(depth.data(), pixels);
  s.point_labels = read_u16(dir / "labels.u16", static_cast<size_t>(n));
  return s;
}

void save_manifest(const DatasetManifest& m, const fs::path& root) {
  json j;
  j["format"] = "cdistill-dataset/1";
  j["config_hash"] = m.config_hash;
  j["num_classes"] = m.num_classes;
  j["counts"] = m.counts;
  json recs = json::array();
  for (const auto& r : m.records) {
    recs.push_back({{"sample_id", r.sample_id},
                    {"condition", to_string(r.condition)},
                    {"split", to_string(r.split)},
                    {"path", r.path},
                    {"files", {"meta.json", "image.f32", "image_clean.f32", "points.f32", "depth.f32", "labels.u16"}}});
  }
  j["samples"] = recs;
  write_text(root / "manifest.json", j.dump(2) + "\n");
}

DatasetManifest load_manifest(const fs::path& root) {
  const fs::path path = root / "manifest.json";
  if (!fs::exists(path)) fail(ErrorKind::kPrerequisite, "no dataset manifest at " + path.string());
  DatasetManifest m;
  try {
    const json j = json::parse(read_text(path));
    m.config_hash = j.at("config_hash");
    m.num_classes = j.at("num_classes");
    for (const auto& r : j.at("samples")) {
      SampleRecord rec;
      rec.sample_id = r.at("sample_id");
      rec.condition = condition_from_string(r.at("condition"));
      const std::string split = r.at("split");
      rec.split = split == "train" ? Split::kTrain : Split::kVal;
      rec.path = r.at("path");
      m.records.push_back(rec);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kIo, path.string() + ": " + e.what());
  }
  m.recount();
  return m;
}

DatasetManifest build_dataset(const DatasetConfig& config, const fs::path& root) {
  config.validate();
  DatasetManifest manifest;
  manifest.config_hash = sha256_hex(config.canonical());
  manifest.num_classes = config.world.num_classes();
  for (Split sp : {Split::kTrain, Split::kVal}) {
    const int n = sp == Split::kTrain ? config.train : config.val;
    const auto conditions =
        assign_conditions(n, config.night_fraction, config.rain_fraction, derive_seed(config.seed, to_string(sp)));
    for (int i = 0; i < n; ++i) {
      std::ostringstream id;
      id << to_string(sp) << "_" << std::setw(5) << std::setfill('0') << i;
      manifest.records.push_back({id.str(), conditions[static_cast<size_t>(i)], sp, "samples/" + id.str()});
    }
  }
  manifest.recount();

  if (fs::exists(root) && !fs::is_empty(root) && !fs::exists(root / "manifest.json")) {
    fail(ErrorKind::kIo, "refusing to overwrite non-dataset directory " + root.string());
  }
  const fs::path staging = fs::path(root.string() + ".partial");
  std::error_code ec;
  fs::remove_all(staging, ec);
  try {
    fs::create_directories(staging / "samples");
    parallel_for(manifest.records.size(), [&](size_t i) {
      const auto& rec = manifest.records[i];
      const Sample s = make_sample(config, rec.sample_id, rec.condition);
      s.validate(config.world.num_classes());
      save_sample(s, staging / rec.path);
    });
    save_manifest(manifest, staging);
    fs::remove_all(root);
    fs::rename(staging, root);
  } catch (const fs::filesystem_error& e) {
    fs::remove_all(staging, ec);
    fail(ErrorKind::kIo, std::string("dataset build failed: ") + e.what());
  } catch (...) {
    fs::remove_all(staging, ec);
    throw;
  }
  return manifest;
}

Dataset load_dataset(const fs::path& root) {
  Dataset ds;
  ds.root = root;
  ds.manifest = load_manifest(root);
  for (const auto& rec : ds.manifest.records) {
    Sample s = load_sample(root / rec.path);
    s.condition = rec.condition;
    (rec.split == Split::kTrain ? ds.train : ds.val).push_back(std::move(s));
  }
  return ds;
}

}  // namespace cdistill
