// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "cdistill/distill.hpp"
#include "cdistill/encoders.hpp"
#include "cdistill/synthdata.hpp"

namespace cdistill {

struct StageConfig {
  int epochs = 1;
  int batch_size = 8;
  double peak_lr = 2e-3;
  double floor_lr = 1e-5;
  double warmup_fraction = 0.1;
  double weight_decay = 3e-2;

  void validate(const std::string& name) const;
};

struct AugmentConfig {
  bool rotate_z = true;
  bool flip_xy = true;
};

struct LidarCorruptionSpec {
  LidarCorruption kind = LidarCorruption::kGaussianNoise;
  int severity = 0;
};

struct RunConfig {
  uint64_t seed = 7;
  Encoder2DConfig encoder_2d;
  Encoder3DConfig encoder_3d;
  StageConfig stage1{30, 8, 2e-3, 1e-5, 0.1, 3e-2};
  StageConfig stage2{1, 8, 2e-4, 1e-5, 0.1, 0.0};
  AugmentConfig augment;
  bool skip_stage1 = false;
  bool stage1_full_data = false;
  bool joint_one_stage = false;
  /// Corrupts the LiDAR that provides stage-2 anchors (sensitivity study).
  std::optional<LidarCorruptionSpec> stage2_lidar_corruption;
  std::string config_hash;

  void validate() const;
};

// ---------------------------------------------------------------------------
// optimisation

struct AdamWHparams {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

struct OptimizerState {
  std::vector<RowMatrix> first_moment;
  std::vector<RowMatrix> second_moment;
  int64_t step = 0;
  AdamWHparams hparams;
};

OptimizerState make_optimizer_state(const std::vector<const RowMatrix*>& params, const AdamWHparams& hparams);

/// AdamW: p <- p - rate * wd * p - rate * m_hat / (sqrt(v_hat) + eps).
void optimizer_step(const std::vector<NamedTensor>& params, const std::vector<const RowMatrix*>& grads,
                    OptimizerState& state, double rate);

/// Linear warmup from 0 to peak over warmup_steps, then cosine decay to floor
/// at total_steps.
double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak, double floor);

// ---------------------------------------------------------------------------
// data selection and augmentation

bool used_in_stage1(Condition c, bool full_data);
DatasetManifest filter_stage1_data(const DatasetManifest& manifest, bool full_data);

struct LidarAugmentation {
  double theta = 0.0;
  bool flip_x = false;
  bool flip_y = false;
};

LidarAugmentation draw_augmentation(uint64_t seed, const AugmentConfig& config);
Points apply_augmentation(const Points& points, const LidarAugmentation& aug);
/// Rotation about z by theta ~ U[0, 2 pi), then independent x / y sign flips.
Points augment_lidar(const Points& points, uint64_t seed, const AugmentConfig& config = {});

// ---------------------------------------------------------------------------
// checkpoints

struct Checkpoint {
  std::string stage = "init";  // init | stage1 | stage2 | joint
  int64_t step = 0;
  uint64_t seed = 0;
  std::string config_hash;
  EncoderParams2D encoder_2d;
  EncoderParams3D encoder_3d;
  OptimizerState optimizer_2d;
  OptimizerState optimizer_3d;
};

Checkpoint init_checkpoint(const RunConfig& config);

/// Writes `checkpoint.json` plus float32 arrays into `dir` via a temporary
/// sibling directory and a rename.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// training

struct LogEntry {
  int64_t step = 0;
  std::string stage;
  double lr = 0.0;
  double loss = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<LogEntry> log;
};

struct TrainOptions {
  /// Where the last good checkpoint is written if training diverges.
  std::optional<std::filesystem::path> failure_checkpoint_dir;
  /// Called after every optimiser step.
  std::function<void(const LogEntry&, const Checkpoint&)> on_step;
  /// Called with the training-set indices of each batch before it is used.
  std::function<void(int epoch, const std::vector<size_t>& batch)> on_batch;
};

/// Trains the 3D encoder and head against frozen 2D features of clean images.
TrainResult train_stage1(const RunConfig& config, const std::vector<Sample>& train, const Checkpoint& start,
                         const TrainOptions& options = {});

/// Trains the 2D encoder on delivered (possibly degraded) images against
/// frozen 3D anchors.
TrainResult train_stage2(const RunConfig& config, const std::vector<Sample>& train, const Checkpoint& start,
                         const TrainOptions& options = {});

/// Both encoders trainable, no stop-gradient. Uses the stage-1 schedule.
TrainResult train_joint(const RunConfig& config, const std::vector<Sample>& train, const Checkpoint& start,
                        const TrainOptions& options = {});

/// Sample order for one epoch; a pure function of (seed, stage, epoch).
std::vector<size_t> epoch_order(uint64_t seed, const std::string& stage, int epoch, size_t n);

void append_train_log(const std::vector<LogEntry>& log, const std::filesystem::path& csv);

}  // namespace cdistill
