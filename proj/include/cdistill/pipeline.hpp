// SPDX-License-Identifier: Apache-2.0
//
// Content-addressed experiment workspace. Layout under the output root:
//
//   datasets/<dataset hash>/          generated samples + manifest.json
//   checkpoints/<kind>-<key>/         checkpoint.json, *.f32, train_log.csv
//   evals/<key>/                      metrics.json, metrics.csv
//   diagnostics/<key>/                report.json, metrics.json, pca_*.ppm
//   ablations/<suite>/                table.csv, table.json
//   runs/<run id>/                    manifest.json (+ metrics.json for `run`)
//
// Keys hash everything that determines an artifact, so repeated requests are
// served from disk.
#pragma once

#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "cdistill/config.hpp"

namespace cdistill {

/// Exclusive `<root>/.lock` held for the lifetime of the object. A lock left
/// by a process that no longer exists is taken over.
class RootLock {
 public:
  explicit RootLock(const std::filesystem::path& root);
  ~RootLock();
  RootLock(const RootLock&) = delete;
  RootLock& operator=(const RootLock&) = delete;

 private:
  std::filesystem::path path_;
};

/// Output root: --root flag, else CD_OUTPUT_ROOT, else output.root.
std::filesystem::path resolve_output_root(const ExperimentConfig& config, const std::string& flag);

std::string provenance_string();

struct RunManifest {
  std::string run_id;
  std::string command;
  std::string config_hash;
  std::string provenance;
  std::vector<std::pair<std::string, std::filesystem::path>> artifacts;
  std::vector<std::pair<std::string, double>> timings;  // seconds

  void add(const std::string& name, const std::filesystem::path& path) { artifacts.emplace_back(name, path); }
  /// Writes runs/<run_id>/manifest.json after checking every artifact exists.
  std::filesystem::path write(const std::filesystem::path& root) const;
  /// The final stdout line: `ARTIFACTS {...}`.
  std::string artifacts_line(const std::filesystem::path& manifest_path) const;
};

/// Next free `<hash prefix>-<counter>` id under runs/.
std::string allocate_run_id(const std::filesystem::path& root, const std::string& config_hash);

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

enum class TrainKind { kStage1, kStage2, kJoint };
std::string to_string(TrainKind k);

struct EvalOutcome {
  std::filesystem::path dir;
  std::vector<MetricRecord> records;
};

struct DiagnoseOutcome {
  std::filesystem::path dir;
  nlohmann::ordered_json report;
  std::vector<MetricRecord> records;
};

struct AblationRow {
  std::string metric;   // group/condition/name
  std::string variant;
  double value = 0.0;
  double delta = 0.0;   // value - reference value
  std::string direction;  // higher_better | lower_better | none
};

struct AblationTable {
  std::string suite;
  std::string reference;
  std::vector<std::string> variants;  // reference first
  std::vector<AblationRow> rows;
  bool complete = false;
  std::string error;
  std::filesystem::path csv;
  std::filesystem::path json;
};

inline const std::vector<std::string> kAblationSuites = {"stage1_data", "no_stage1", "joint",
                                                         "epochs",      "corruption", "lidar_corruption"};

/// Reads a metrics.json written by write_metrics back into records.
std::vector<MetricRecord> read_metrics(const std::filesystem::path& metrics_json);

class Workspace {
 public:
  Workspace(ExperimentConfig config, std::filesystem::path root);

  const ExperimentConfig& config() const { return config_; }
  const std::filesystem::path& root() const { return root_; }

  std::filesystem::path dataset_dir() const;
  /// Generates the dataset unless an intact copy exists, then loads it once.
  const Dataset& dataset();

  std::filesystem::path init_checkpoint(const RunConfig& run);
  /// Trains from `from` (defaults: init for stage 1 and joint; the stage-1
  /// result, or init under skip_stage1, for stage 2).
  std::filesystem::path train(TrainKind kind, const RunConfig& run,
                              std::optional<std::filesystem::path> from = std::nullopt);
  /// Default two-stage result of `run` (stage 1 skipped under skip_stage1).
  std::filesystem::path collaborative(const RunConfig& run);

  /// Probes the checkpoint's 2D encoder on every configured view.
  EvalOutcome evaluate(const std::filesystem::path& checkpoint, ProbeTask task, bool finetune);
  DiagnoseOutcome diagnose(const std::filesystem::path& after,
                           std::optional<std::filesystem::path> before = std::nullopt);

  AblationTable ablate(const std::string& suite);

  std::vector<EvalView> views() const { return corruption_views(config_.corruption_severity); }

 private:
  std::string train_key(TrainKind kind, const RunConfig& run, const Checkpoint& start) const;

  ExperimentConfig config_;
  std::filesystem::path root_;
  std::unique_ptr<Dataset> dataset_;
};

}  // namespace cdistill
