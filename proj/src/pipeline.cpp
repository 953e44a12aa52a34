// SPDX-License-Identifier: Apache-2.0
#include "cdistill/pipeline.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <functional>
#include <iomanip>
#include <iostream>
#include <sstream>

#ifndef CDISTILL_VERSION
#define CDISTILL_VERSION "0.0.0"
#endif
#ifndef CDISTILL_GIT_DESCRIBE
#define CDISTILL_GIT_DESCRIBE "unknown"
#endif

namespace cdistill {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// lock, run manifests

RootLock::RootLock(const fs::path& root) : path_(root / ".lock") {
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) fail(ErrorKind::kIo, "cannot create output root " + root.string() + ": " + ec.message());
  for (int attempt = 0; attempt < 2; ++attempt) {
    const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd >= 0) {
      const std::string pid = std::to_string(::getpid()) + "\n";
      const bool ok = ::write(fd, pid.data(), pid.size()) == static_cast<ssize_t>(pid.size());
      ::close(fd);
      if (!ok) fail(ErrorKind::kIo, "cannot write " + path_.string());
      return;
    }
    if (errno != EEXIST) fail(ErrorKind::kIo, "cannot create " + path_.string() + ": " + std::strerror(errno));
    long holder = 0;
    try {
      holder = std::stol(read_text(path_));
    } catch (const std::exception&) {
      holder = 0;
    }
    if (holder > 0 && (::kill(static_cast<pid_t>(holder), 0) == 0 || errno == EPERM)) {
      fail(ErrorKind::kPrerequisite,
           "output root " + root.string() + " is in use by process " + std::to_string(holder));
    }
    fs::remove(path_, ec);
  }
  fail(ErrorKind::kPrerequisite, "could not acquire " + path_.string());
}

RootLock::~RootLock() {
  std::error_code ec;
  fs::remove(path_, ec);
}

fs::path resolve_output_root(const ExperimentConfig& config, const std::string& flag) {
  if (!flag.empty()) return flag;
  if (const char* env = std::getenv("CD_OUTPUT_ROOT"); env != nullptr && *env != '\0') return env;
  return config.output.root;
}

std::string provenance_string() {
  return std::string("cdistill ") + CDISTILL_VERSION + " (" + CDISTILL_GIT_DESCRIBE + ")";
}

fs::path RunManifest::write(const fs::path& root) const {
  ojson j;
  j["run_id"] = run_id;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["provenance"] = provenance;
  ojson arts = ojson::object();
  for (const auto& [name, path] : artifacts) {
    if (!fs::exists(path)) fail(ErrorKind::kIo, "artifact '" + name + "' is missing: " + path.string());
    arts[name] = path.string();
  }
  j["artifacts"] = arts;
  ojson times = ojson::object();
  for (const auto& [name, s] : timings) times[name] = s;
  j["timings_seconds"] = times;
  const fs::path dir = root / "runs" / run_id;
  fs::create_directories(dir);
  write_text(dir / "manifest.json", j.dump(2) + "\n");
  return dir / "manifest.json";
}

std::string RunManifest::artifacts_line(const fs::path& manifest_path) const {
  ojson j;
  j["run_id"] = run_id;
  j["manifest"] = manifest_path.string();
  ojson arts = ojson::object();
  for (const auto& [name, path] : artifacts) arts[name] = path.string();
  j["artifacts"] = arts;
  return "ARTIFACTS " + j.dump();
}

std::string allocate_run_id(const fs::path& root, const std::string& config_hash) {
  const fs::path runs = root / "runs";
  fs::create_directories(runs);
  const std::string prefix = config_hash.substr(0, 12);
  for (int n = 0;; ++n) {
    std::ostringstream id;
    id << prefix << "-" << std::setw(3) << std::setfill('0') << n;
    std::error_code ec;
    if (fs::create_directory(runs / id.str(), ec)) return id.str();
    if (ec) fail(ErrorKind::kIo, "cannot create run directory under " + runs.string() + ": " + ec.message());
  }
}

std::string to_string(TrainKind k) {
  switch (k) {
    case TrainKind::kStage1:
      return "stage1";
    case TrainKind::kStage2:
      return "stage2";
    case TrainKind::kJoint:
      return "joint";
  }
  return "?";
}

std::vector<MetricRecord> read_metrics(const fs::path& metrics_json) {
  std::vector<MetricRecord> out;
  try {
    const ojson j = ojson::parse(read_text(metrics_json));
    for (const auto& [group, conditions] : j.at("metrics").items()) {
      for (const auto& [condition, metrics] : conditions.items()) {
        for (const auto& [metric, value] : metrics.items()) out.push_back({group, condition, metric, value.get<double>()});
      }
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::kIo, "unreadable metrics file " + metrics_json.string() + ": " + e.what());
  }
  return out;
}

// ---------------------------------------------------------------------------
// workspace

namespace {

std::string short_key(const ojson& j) { return sha256_hex(j.dump()).substr(0, 16); }

void log_line(const std::string& msg) { std::cerr << "cdistill: " << msg << "\n"; }

std::string seconds_text(double s) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << s << " s";
  return os.str();
}

ojson encoder_json(const RunConfig& run) {
  const auto& a = run.encoder_2d;
  const auto& b = run.encoder_3d;
  return {{"encoder_2d", {a.patch_size, a.hidden, a.blocks, a.feature_dim}},
          {"encoder_3d", {b.hidden, b.blocks, b.point_dim, b.knn, b.feature_dim}}};
}

ojson stage_key_json(const StageConfig& s) {
  return {s.epochs, s.batch_size, s.peak_lr, s.floor_lr, s.warmup_fraction, s.weight_decay};
}

bool checkpoint_complete(const fs::path& dir) {
  return fs::exists(dir / "checkpoint.json") && fs::exists(dir / "train_log.csv");
}

}  // namespace

Workspace::Workspace(ExperimentConfig config, fs::path root) : config_(std::move(config)), root_(std::move(root)) {
  config_.validate();
  fs::create_directories(root_);
}

fs::path Workspace::dataset_dir() const {
  return root_ / "datasets" / dataset_hash(config_.dataset).substr(0, 16);
}

const Dataset& Workspace::dataset() {
  if (dataset_) return *dataset_;
  const fs::path dir = dataset_dir();
  const std::string hash = dataset_hash(config_.dataset);
  bool intact = false;
  if (fs::exists(dir / "manifest.json")) {
    try {
      intact = load_manifest(dir).config_hash == hash;
    } catch (const Error&) {
      intact = false;
    }
  }
  if (!intact) {
    Timer t;
    fs::path tmp = dir;
    tmp += ".tmp";
    fs::remove_all(tmp);
    build_dataset(config_.dataset, tmp);
    fs::remove_all(dir);
    fs::rename(tmp, dir);
    log_line("generated dataset " + dir.filename().string() + " in " + seconds_text(t.seconds()));
  }
  dataset_ = std::make_unique<Dataset>(load_dataset(dir));
  return *dataset_;
}

fs::path Workspace::init_checkpoint(const RunConfig& run) {
  ojson k = encoder_json(run);
  k["seed"] = run.seed;
  const std::string key = short_key(k);
  const fs::path dir = root_ / "checkpoints" / ("init-" + key);
  if (!checkpoint_complete(dir)) {
    RunConfig r = run;
    r.config_hash = key;
    save_checkpoint(::cdistill::init_checkpoint(r), dir);
    append_train_log({}, dir / "train_log.csv");
  }
  return dir;
}

std::string Workspace::train_key(TrainKind kind, const RunConfig& run, const Checkpoint& start) const {
  ojson k;
  k["kind"] = to_string(kind);
  k["dataset"] = dataset_hash(config_.dataset);
  k["seed"] = run.seed;
  k["encoders"] = encoder_json(run);
  k["start"] = {start.stage, start.encoder_2d.hash(), start.encoder_3d.hash()};
  if (kind == TrainKind::kStage2) {
    k["stage2"] = stage_key_json(run.stage2);
    if (run.stage2_lidar_corruption) {
      k["lidar"] = {to_string(run.stage2_lidar_corruption->kind), run.stage2_lidar_corruption->severity};
    }
  } else {
    k["stage1"] = stage_key_json(run.stage1);
    k["augment"] = {run.augment.rotate_z, run.augment.flip_xy};
    if (kind == TrainKind::kStage1) k["full_data"] = run.stage1_full_data;
  }
  return short_key(k);
}

fs::path Workspace::train(TrainKind kind, const RunConfig& run, std::optional<fs::path> from) {
  run.validate();
  if (!from) {
    if (kind == TrainKind::kStage2 && !run.skip_stage1) {
      from = train(TrainKind::kStage1, run);
    } else {
      from = init_checkpoint(run);
    }
  }
  const Checkpoint start = load_checkpoint(*from);
  const std::string key = train_key(kind, run, start);
  const std::string name = to_string(kind) + "-" + key;
  const fs::path dir = root_ / "checkpoints" / name;
  if (checkpoint_complete(dir)) return dir;

  const Dataset& ds = dataset();
  RunConfig r = run;
  r.config_hash = key;
  TrainOptions options;
  options.failure_checkpoint_dir = root_ / "checkpoints" / (name + ".failed");
  Timer t;
  TrainResult result;
  switch (kind) {
    case TrainKind::kStage1:
      result = train_stage1(r, ds.train, start, options);
      break;
    case TrainKind::kStage2:
      result = train_stage2(r, ds.train, start, options);
      break;
    case TrainKind::kJoint:
      result = train_joint(r, ds.train, start, options);
      break;
  }
  save_checkpoint(result.checkpoint, dir);
  std::error_code ec;
  fs::remove(dir / "train_log.csv", ec);
  append_train_log(result.log, dir / "train_log.csv");
  log_line("trained " + name + " (" + std::to_string(result.log.size()) + " steps) in " + seconds_text(t.seconds()));
  return dir;
}

fs::path Workspace::collaborative(const RunConfig& run) { return train(TrainKind::kStage2, run); }

EvalOutcome Workspace::evaluate(const fs::path& checkpoint, ProbeTask task, bool finetune) {
  const Checkpoint ckpt = load_checkpoint(checkpoint);
  const std::string mode = finetune ? "finetune" : "linear";
  ojson k;
  k["dataset"] = dataset_hash(config_.dataset);
  k["encoder_2d"] = {ckpt.encoder_2d.patch_size, ckpt.encoder_2d.hash()};
  k["task"] = to_string(task);
  k["mode"] = mode;
  k["probe"] = config_to_json(config_)["probe"];
  const std::string key = short_key(k);
  EvalOutcome out;
  out.dir = root_ / "evals" / (to_string(task) + "-" + mode + "-" + key);
  if (fs::exists(out.dir / "metrics.json")) {
    out.records = read_metrics(out.dir / "metrics.json");
    return out;
  }

  const Dataset& ds = dataset();
  Timer t;
  const std::vector<EvalView> vs = views();
  const ProbeResult result = run_probe(task, ckpt.encoder_2d, ds.train, ds.val, config_.probe, finetune, vs);
  if (!finetune && result.encoder.hash() != ckpt.encoder_2d.hash()) {
    fail(ErrorKind::kNumerical, "frozen probe modified the encoder");
  }
  const std::string metric = task == ProbeTask::kSegmentation ? "miou" : "rmse";
  for (const auto& v : vs) {
    add_condition_metrics(&out.records, to_string(task) + "/" + mode + "/" + v.name, metric, result.views.at(v.name));
  }
  fs::path tmp = out.dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  write_metrics(tmp, "eval-" + key, config_.hash, out.records);
  fs::remove_all(out.dir);
  fs::rename(tmp, out.dir);
  log_line("probed " + out.dir.filename().string() + " in " + seconds_text(t.seconds()));
  return out;
}

namespace {

ojson shift_json(const ShiftReport& r) {
  ojson j;
  ojson d = ojson::object();
  for (const auto& [k, v] : r.distance) d[k] = v;
  j["centroid_distance"] = d;
  j["missing"] = r.missing;
  ojson s = ojson::object();
  for (const auto& [k, v] : r.samples) s[k] = v;
  j["samples"] = s;
  return j;
}

struct SideStats {
  ShiftReport shift;
  double collapse = 0.0;
  std::optional<double> matched;
};

SideStats side_stats(const Checkpoint& c, const std::vector<Sample>& val) {
  SideStats s;
  s.shift = feature_shift_stats(c.encoder_2d, val);
  s.collapse = collapse_metric(c.encoder_2d, val);
  std::vector<Sample> clear;
  for (const auto& x : val) {
    if (x.condition == Condition::kDayClear) clear.push_back(x);
  }
  if (!clear.empty()) s.matched = matched_feature_distance(c.encoder_2d, c.encoder_3d, clear);
  return s;
}

void side_records(std::vector<MetricRecord>* out, const std::string& side, const SideStats& s) {
  const std::string group = "diagnostics/" + side;
  for (const auto& [k, v] : s.shift.distance) out->push_back({group, k, "centroid_distance", v});
  out->push_back({group, "full", "collapse", s.collapse});
  if (s.matched) out->push_back({group, "day_clear", "matched_distance", *s.matched});
}

ojson side_json(const Checkpoint& c, const SideStats& s) {
  ojson j;
  j["stage"] = c.stage;
  j["encoder_2d_hash"] = c.encoder_2d.hash();
  j["encoder_3d_hash"] = c.encoder_3d.hash();
  j["shift"] = shift_json(s.shift);
  j["collapse"] = s.collapse;
  j["matched_distance"] = s.matched ? ojson(*s.matched) : ojson(nullptr);
  return j;
}

}  // namespace

DiagnoseOutcome Workspace::diagnose(const fs::path& after, std::optional<fs::path> before) {
  const Checkpoint a = load_checkpoint(after);
  std::optional<Checkpoint> b;
  if (before) b = load_checkpoint(*before);
  ojson k;
  k["dataset"] = dataset_hash(config_.dataset);
  k["after"] = {a.encoder_2d.hash(), a.encoder_3d.hash()};
  k["before"] = b ? ojson{b->encoder_2d.hash(), b->encoder_3d.hash()} : ojson(nullptr);
  k["pca_samples"] = config_.output.pca_samples;
  const std::string key = short_key(k);
  DiagnoseOutcome out;
  out.dir = root_ / "diagnostics" / key;
  if (fs::exists(out.dir / "report.json")) {
    out.report = ojson::parse(read_text(out.dir / "report.json"));
    out.records = read_metrics(out.dir / "metrics.json");
    return out;
  }

  const Dataset& ds = dataset();
  if (ds.val.empty()) fail(ErrorKind::kPrerequisite, "diagnostics need validation samples");
  fs::path tmp = out.dir;
  tmp += ".tmp";
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  const SideStats sa = side_stats(a, ds.val);
  out.report["after"] = side_json(a, sa);
  side_records(&out.records, "after", sa);
  if (b) {
    const SideStats sb = side_stats(*b, ds.val);
    out.report["before"] = side_json(*b, sb);
    side_records(&out.records, "before", sb);
    const ShiftComparison cmp = compare_shift(sb.shift, sa.shift);
    ojson rel = ojson::object();
    for (const auto& [name, v] : cmp.relative_change) {
      rel[name] = v;
      out.records.push_back({"diagnostics/change", name, "relative_change", v});
    }
    out.report["relative_change"] = rel;
  }

  ojson images = ojson::array();
  const int n = std::min<int>(config_.output.pca_samples, static_cast<int>(ds.val.size()));
  for (int i = 0; i < n; ++i) {
    const Sample& s = ds.val[static_cast<size_t>(i)];
    const std::string image_name = "image_" + s.sample_id + ".ppm";
    write_ppm(tmp / image_name, s.image, s.height, s.width);
    images.push_back(image_name);
    const auto render = [&](const Checkpoint& c, const std::string& side) {
      const std::string name = "pca_" + side + "_" + s.sample_id + ".ppm";
      write_ppm(tmp / name, render_feature_pca(forward_2d(c.encoder_2d, s.image, s.height, s.width)), s.height,
                s.width);
      images.push_back(name);
    };
    render(a, "after");
    if (b) render(*b, "before");
  }
  out.report["images"] = images;

  write_metrics(tmp, "diagnose-" + key, config_.hash, out.records);
  write_text(tmp / "report.json", out.report.dump(2) + "\n");
  fs::remove_all(out.dir);
  fs::rename(tmp, out.dir);
  return out;
}

// ---------------------------------------------------------------------------
// ablations

namespace {

using MetricMap = std::vector<std::pair<std::string, double>>;

std::string direction_of(const std::string& metric) {
  const auto ends = [&](const std::string& suffix) {
    return metric.size() >= suffix.size() && metric.compare(metric.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  if (ends("/miou")) return "higher_better";
  if (ends("/rmse") || ends("/centroid_distance") || ends("/matched_distance")) return "lower_better";
  return "none";
}

void append_records(MetricMap* out, const std::vector<MetricRecord>& records, const std::string& group_prefix,
                    const std::string& metric, const std::string& condition = "") {
  for (const auto& r : records) {
    if (r.metric != metric || r.group.rfind(group_prefix, 0) != 0) continue;
    if (!condition.empty() && r.condition != condition) continue;
    out->emplace_back(r.group + "/" + r.condition + "/" + r.metric, r.value);
  }
}

void write_table(const AblationTable& t) {
  std::ostringstream csv;
  csv << "suite,metric,variant,value,delta,sign,direction\n" << std::setprecision(12);
  ojson rows = ojson::array();
  for (const auto& r : t.rows) {
    const std::string sign = r.delta > 0.0 ? "+" : (r.delta < 0.0 ? "-" : "0");
    csv << t.suite << "," << r.metric << "," << r.variant << "," << r.value << "," << r.delta << "," << sign << ","
        << r.direction << "\n";
    rows.push_back({{"metric", r.metric},
                    {"variant", r.variant},
                    {"value", r.value},
                    {"delta", r.delta},
                    {"sign", sign},
                    {"direction", r.direction}});
  }
  ojson j;
  j["suite"] = t.suite;
  j["reference"] = t.reference;
  j["variants"] = t.variants;
  j["complete"] = t.complete;
  if (!t.error.empty()) j["error"] = t.error;
  j["rows"] = rows;
  fs::create_directories(t.csv.parent_path());
  write_text(t.csv, csv.str());
  write_text(t.json, j.dump(2) + "\n");
}

// Rebuilds rows from the completed variants: one row per (metric, variant),
// ordered by the reference's metric order.
void rebuild_rows(AblationTable* t, const std::vector<std::pair<std::string, MetricMap>>& done) {
  t->rows.clear();
  t->variants.clear();
  for (const auto& [name, m] : done) t->variants.push_back(name);
  if (done.empty()) return;
  for (const auto& [metric, ref] : done.front().second) {
    for (const auto& [name, m] : done) {
      for (const auto& [mk, v] : m) {
        if (mk == metric) {
          t->rows.push_back({metric, name, v, v - ref, direction_of(metric)});
          break;
        }
      }
    }
  }
}

}  // namespace

AblationTable Workspace::ablate(const std::string& suite) {
  if (std::find(kAblationSuites.begin(), kAblationSuites.end(), suite) == kAblationSuites.end()) {
    fail(ErrorKind::kConfig, "unknown ablation suite '" + suite + "'");
  }
  AblationTable table;
  table.suite = suite;
  table.csv = root_ / "ablations" / suite / "table.csv";
  table.json = root_ / "ablations" / suite / "table.json";

  const RunConfig& base = config_.run;
  const auto downstream = [&](const fs::path& ckpt) {
    MetricMap m;
    append_records(&m, evaluate(ckpt, ProbeTask::kSegmentation, false).records, "seg/linear/delivered", "miou");
    append_records(&m, evaluate(ckpt, ProbeTask::kDepth, false).records, "depth/linear/delivered", "rmse");
    const auto diag = diagnose(ckpt).records;
    append_records(&m, diag, "diagnostics/after", "centroid_distance");
    append_records(&m, diag, "diagnostics/after", "matched_distance");
    append_records(&m, diag, "diagnostics/after", "collapse");
    return m;
  };
  // Delivered images per condition, corrupted views pooled.
  const auto corrupted = [&](const fs::path& ckpt) {
    MetricMap m;
    const auto add = [&](const std::vector<MetricRecord>& records, const std::string& task, const std::string& metric) {
      append_records(&m, records, task + "/linear/delivered", metric);
      for (const auto& r : records) {
        if (r.metric != metric || r.condition != "full" || r.group.rfind(task + "/linear/", 0) != 0 ||
            r.group == task + "/linear/delivered") {
          continue;
        }
        m.emplace_back(r.group + "/" + r.condition + "/" + r.metric, r.value);
      }
    };
    add(evaluate(ckpt, ProbeTask::kSegmentation, false).records, "seg", "miou");
    add(evaluate(ckpt, ProbeTask::kDepth, false).records, "depth", "rmse");
    return m;
  };

  std::vector<std::pair<std::string, std::function<MetricMap()>>> variants;
  if (suite == "stage1_data") {
    RunConfig full = base;
    full.stage1_full_data = true;
    variants.emplace_back("day_clear", [&, base] { return downstream(collaborative(base)); });
    variants.emplace_back("full_data", [&, full] { return downstream(collaborative(full)); });
  } else if (suite == "no_stage1") {
    RunConfig skip = base;
    skip.skip_stage1 = true;
    variants.emplace_back("with_stage1", [&, base] { return downstream(collaborative(base)); });
    variants.emplace_back("without_stage1", [&, skip] { return downstream(collaborative(skip)); });
  } else if (suite == "joint") {
    RunConfig joint = base;
    joint.joint_one_stage = true;
    variants.emplace_back("two_stage", [&, base] { return downstream(collaborative(base)); });
    variants.emplace_back("joint", [&, joint] { return downstream(train(TrainKind::kJoint, joint)); });
  } else if (suite == "epochs") {
    std::vector<int> epochs{base.stage2.epochs};
    for (int e : config_.ablation.stage2_epochs) {
      if (std::find(epochs.begin(), epochs.end(), e) == epochs.end()) epochs.push_back(e);
    }
    for (int e : epochs) {
      RunConfig r = base;
      r.stage2.epochs = e;
      variants.emplace_back("stage2_epochs=" + std::to_string(e), [&, r] { return downstream(collaborative(r)); });
    }
  } else if (suite == "corruption") {
    variants.emplace_back("baseline", [&, base] { return corrupted(init_checkpoint(base)); });
    variants.emplace_back("cd", [&, base] { return corrupted(collaborative(base)); });
  } else {
    variants.emplace_back("clean_anchors", [&, base] { return downstream(collaborative(base)); });
    for (const auto& spec : config_.ablation.lidar_corruptions) {
      RunConfig r = base;
      r.stage2_lidar_corruption = spec;
      variants.emplace_back(to_string(spec.kind) + "@" + std::to_string(spec.severity),
                            [&, r] { return downstream(collaborative(r)); });
    }
  }
  table.reference = variants.front().first;

  std::vector<std::pair<std::string, MetricMap>> done;
  write_table(table);
  for (const auto& [name, run] : variants) {
    try {
      done.emplace_back(name, run());
    } catch (const std::exception& e) {
      rebuild_rows(&table, done);
      table.error = "variant '" + name + "' failed: " + e.what();
      write_table(table);
      throw;
    }
    rebuild_rows(&table, done);
    write_table(table);
  }
  table.complete = true;
  write_table(table);
  return table;
}

}  // namespace cdistill
