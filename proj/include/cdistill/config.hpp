// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: one JSON document (comments allowed) with the
// sections dataset, encoder, trainer, probe, ablation and output. Every key
// is optional and falls back to the default shown by `cdistill config-defaults`;
// unknown keys are rejected with the line they appear on.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdistill/evalsuite.hpp"
#include "cdistill/synthdata.hpp"
#include "cdistill/trainer.hpp"

namespace cdistill {

struct AblationConfig {
  std::vector<int> stage2_epochs{1, 2, 4};
  std::vector<LidarCorruptionSpec> lidar_corruptions{{LidarCorruption::kGaussianNoise, 1},
                                                     {LidarCorruption::kGaussianNoise, 2},
                                                     {LidarCorruption::kDensityDecrease, 1},
                                                     {LidarCorruption::kDensityDecrease, 2}};

  void validate() const;
};

struct OutputConfig {
  std::string root = "cdistill_out";
  /// Validation samples rendered as PCA images by diagnose.
  int pca_samples = 3;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  RunConfig run;
  ProbeConfig probe;
  /// Corrupted-validation views use severities 1..corruption_severity.
  int corruption_severity = 3;
  AblationConfig ablation;
  OutputConfig output;

  /// sha256 of the canonical, fully-resolved document.
  std::string hash;

  void validate() const;
};

ExperimentConfig parse_config(const std::string& text, const std::string& source = "<config>");
ExperimentConfig load_config(const std::filesystem::path& path);

/// Fully-resolved document (every key, defaults filled in).
nlohmann::ordered_json config_to_json(const ExperimentConfig& config);

/// Content hash of the dataset section alone.
std::string dataset_hash(const DatasetConfig& config);

}  // namespace cdistill
