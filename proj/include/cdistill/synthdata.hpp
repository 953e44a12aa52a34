// SPDX-License-Identifier: Apache-2.0
//
// Procedural paired camera/LiDAR scenes. World coordinates coincide with the
// LiDAR frame: x forward, y left, z up.
#pragma once

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "cdistill/common.hpp"
#include "cdistill/geometry.hpp"

namespace cdistill {

enum class PrimitiveKind { kSphere, kBox, kVerticalCylinder };

struct Primitive {
  int class_id = 1;
  PrimitiveKind kind = PrimitiveKind::kSphere;
  Eigen::Vector3d center = Eigen::Vector3d::Zero();
  Eigen::Vector3d size = Eigen::Vector3d::Ones();  // full extents; diameter for round shapes
  Eigen::Vector3d albedo = Eigen::Vector3d::Constant(0.5);
};

struct SceneSpec {
  uint64_t seed = 0;
  std::vector<Primitive> primitives;
  double ground_plane_height = -1.8;
  double ambient_light = 1.0;
};

struct ClassTemplate {
  PrimitiveKind kind;
  Eigen::Vector3d size;
  Eigen::Vector3d albedo;
};

struct WorldConfig {
  double x_min = 5.0, x_max = 22.0;
  double y_min = -9.0, y_max = 9.0;
  double ground_plane_height = -1.8;
  int min_primitives = 3;
  int max_primitives = 7;
  std::vector<double> class_mixture;   // weight per class id 1..C
  std::vector<ClassTemplate> classes;  // template per class id 1..C
  double size_jitter = 0.2;            // relative, uniform
  double albedo_jitter = 0.08;         // absolute, uniform per channel
  double ambient_min = 0.75;
  double ambient_max = 1.0;

  int num_classes() const { return static_cast<int>(classes.size()); }
  void validate() const;
};

/// Six object classes: vehicle, pedestrian, vegetation, building, pole, barrier.
WorldConfig default_world_config();

SceneSpec generate_scene(uint64_t seed, const WorldConfig& world);

struct RenderConfig {
  int lidar_azimuth_bins = 64;
  int lidar_elevation_bins = 16;
  double azimuth_min_deg = -50.0, azimuth_max_deg = 50.0;
  double elevation_min_deg = -26.0, elevation_max_deg = 4.0;
  double lidar_max_range = 40.0;
  double camera_max_depth = 60.0;
  Eigen::Vector3d light_direction = Eigen::Vector3d(0.3, 0.5, 1.0);  // toward the light
  Eigen::Vector3d sky_color = Eigen::Vector3d(0.55, 0.70, 0.90);
  Eigen::Vector3d ground_albedo = Eigen::Vector3d(0.36, 0.35, 0.33);
  double lambert_floor = 0.3;  // shading = floor + (1 - floor) * max(0, n.l)

  void validate() const;
};

/// Forward-looking camera at the LiDAR origin: 90 degree horizontal field of
/// view, principal point on the central pixel's centre.
SensorRig default_rig(int height, int width);

enum class Condition { kDayClear, kDayRain, kNight };
inline constexpr std::array<Condition, 3> kAllConditions = {Condition::kDayClear, Condition::kDayRain,
                                                            Condition::kNight};
std::string to_string(Condition c);
Condition condition_from_string(const std::string& s);

struct Sample {
  std::string sample_id;
  Condition condition = Condition::kDayClear;
  SensorRig rig;
  int height = 0;
  int width = 0;
  RowMatrix image;        // (H*W) x 3, what the camera delivered
  RowMatrix image_clean;  // (H*W) x 3, same as image for day_clear
  Points points;
  std::vector<int> point_labels;
  Eigen::VectorXd pixel_depth;  // camera z per pixel, 0 where no surface

  bool depth_valid(Index pixel) const { return pixel_depth[pixel] > 0.0; }
  void validate(int num_classes) const;
};

struct RenderedSample {
  Sample sample;
  std::vector<int> pixel_class;  // class hit by each pixel's centre ray, -1 for sky
};

RenderedSample render_sample(const SceneSpec& scene, const SensorRig& rig, const RenderConfig& render);

enum class ImageCorruption { kNight, kRain, kFog, kGaussian, kMotionBlur };
inline constexpr std::array<ImageCorruption, 5> kAllImageCorruptions = {
    ImageCorruption::kNight, ImageCorruption::kRain, ImageCorruption::kFog, ImageCorruption::kGaussian,
    ImageCorruption::kMotionBlur};
std::string to_string(ImageCorruption k);
ImageCorruption image_corruption_from_string(const std::string& s);

inline constexpr int kMaxImageSeverity = 5;
inline constexpr double kFogDepthScale = 10.0;

/// `depth` is only consulted by fog; pixels with depth <= 0 use the
/// depth-free weight.
RowMatrix corrupt_image(const RowMatrix& image, int height, int width, ImageCorruption kind, int severity,
                        uint64_t seed, const Eigen::VectorXd* depth = nullptr);

enum class LidarCorruption { kGaussianNoise, kDensityDecrease };
std::string to_string(LidarCorruption k);
LidarCorruption lidar_corruption_from_string(const std::string& s);

inline constexpr int kMaxLidarSeverity = 2;

struct CorruptedCloud {
  Points points;
  std::vector<int> source_index;  // row in the input cloud
};

CorruptedCloud corrupt_lidar(const Points& points, LidarCorruption kind, int severity, uint64_t seed);

struct DatasetConfig {
  uint64_t seed = 7;
  int train = 256;
  int val = 64;
  double night_fraction = 0.12;
  double rain_fraction = 0.19;
  int night_severity = 3;
  int rain_severity = 3;
  int image_height = 48;
  int image_width = 96;
  WorldConfig world = default_world_config();
  RenderConfig render;

  void validate() const;
  /// Canonical text used for the generation hash.
  std::string canonical() const;
};

enum class Split { kTrain, kVal };
std::string to_string(Split s);

struct SampleRecord {
  std::string sample_id;
  Condition condition = Condition::kDayClear;
  Split split = Split::kTrain;
  std::string path;  // relative to the dataset root
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  std::string config_hash;
  int num_classes = 0;
  std::map<std::string, int> counts;  // "<split>/<condition>" and "total"

  std::vector<SampleRecord> split(Split s) const;
  void recount();
};

/// Condition labels for `n` samples of a split, in sample order.
std::vector<Condition> assign_conditions(int n, double night_fraction, double rain_fraction, uint64_t seed);

/// Writes the dataset under `root` (replacing a previous dataset there).
DatasetManifest build_dataset(const DatasetConfig& config, const std::filesystem::path& root);

/// Generates one sample in memory exactly as build_dataset would.
Sample make_sample(const DatasetConfig& config, const std::string& sample_id, Condition condition);

void save_sample(const Sample& sample, const std::filesystem::path& dir);
Sample load_sample(const std::filesystem::path& dir);
DatasetManifest load_manifest(const std::filesystem::path& root);
void save_manifest(const DatasetManifest& manifest, const std::filesystem::path& root);

struct Dataset {
  std::filesystem::path root;
  DatasetManifest manifest;
  std::vector<Sample> train;
  std::vector<Sample> val;
};

Dataset load_dataset(const std::filesystem::path& root);

}  // namespace cdistill
