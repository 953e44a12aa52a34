// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <string>
#include <vector>

#include <unistd.h>

#include "cdistill/common.hpp"
#include "cdistill/config.hpp"
#include "cdistill/synthdata.hpp"

namespace cdistill::test {

class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("cdistill_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline DatasetConfig tiny_dataset_config() {
  DatasetConfig c;
  c.seed = 5;
  c.train = 8;
  c.val = 4;
  c.image_height = 16;
  c.image_width = 32;
  c.render.lidar_azimuth_bins = 48;
  c.render.lidar_elevation_bins = 12;
  return c;
}

/// Small enough to train both stages in a second or two.
inline ExperimentConfig tiny_experiment_config() {
  ExperimentConfig c;
  c.dataset = tiny_dataset_config();
  c.run.encoder_2d = {8, 16, 1, 8};
  c.run.encoder_3d = {16, 1, 12, 4, 8};
  c.run.stage1.epochs = 2;
  c.run.stage1.batch_size = 4;
  c.run.stage2.batch_size = 4;
  c.probe.epochs = 2;
  c.probe.batch_size = 4;
  c.probe.finetune_epochs = 1;
  c.probe.depth_pixels_per_sample = 32;
  c.corruption_severity = 1;
  c.ablation.stage2_epochs = {1, 2};
  c.output.pca_samples = 1;
  return c;
}

/// Hash over relative paths and contents of every regular file under root.
inline std::string tree_hash(const std::filesystem::path& root) {
  std::vector<std::string> entries;
  for (const auto& e : std::filesystem::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    entries.push_back(std::filesystem::relative(e.path(), root).string() + ":" + sha256_file(e.path()));
  }
  std::sort(entries.begin(), entries.end());
  std::string joined;
  for (const auto& s : entries) joined += s + "\n";
  return sha256_hex(joined);
}

}  // namespace cdistill::test
