// SPDX-License-Identifier: Apache-2.0
#include "cdistill/config.hpp"

#include <algorithm>
#include <set>
#include <sstream>

namespace cdistill {

namespace fs = std::filesystem;
using json = nlohmann::json;
using ojson = nlohmann::ordered_json;

void AblationConfig::validate() const {
  if (stage2_epochs.empty()) fail(ErrorKind::kConfig, "ablation.stage2_epochs must not be empty");
  for (int e : stage2_epochs) {
    if (e < 1) fail(ErrorKind::kConfig, "ablation.stage2_epochs entries must be >= 1");
  }
  for (const auto& l : lidar_corruptions) {
    if (l.severity < 1 || l.severity > kMaxLidarSeverity) {
      fail(ErrorKind::kConfig, "ablation.lidar_corruptions severities must be in [1, 2]");
    }
  }
}

void ExperimentConfig::validate() const {
  dataset.validate();
  run.validate();
  probe.validate();
  ablation.validate();
  if (corruption_severity < 1 || corruption_severity > kMaxImageSeverity) {
    fail(ErrorKind::kConfig, "probe.corruption_severity must be in [1, 5]");
  }
  if (dataset.image_height % run.encoder_2d.patch_size != 0 || dataset.image_width % run.encoder_2d.patch_size != 0) {
    fail(ErrorKind::kConfig, "image size must be divisible by encoder.encoder_2d.patch_size");
  }
  if (output.root.empty()) fail(ErrorKind::kConfig, "output.root must not be empty");
  if (output.pca_samples < 0) fail(ErrorKind::kConfig, "output.pca_samples must be >= 0");
}

namespace {

int line_of_offset(const std::string& text, size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

// Strict view of one JSON object: every key must be consumed.
class Reader {
 public:
  Reader(const json& obj, std::string path, const std::string& text, const std::string& source)
      : obj_(obj), path_(std::move(path)), text_(text), source_(source) {
    if (!obj_.is_object()) {
      const size_t dot = path_.rfind('.');
      const std::string key = dot == std::string::npos ? path_ : path_.substr(dot + 1);
      raise(key, path_.empty() ? "top level" : path_, "must be an object");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    const auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      error(key, "has the wrong type");
    }
  }

  bool has(const std::string& key) const { return obj_.contains(key); }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return obj_.at(key);
  }

  Reader child(const std::string& key) {
    seen_.insert(key);
    static const json empty = json::object();
    const auto it = obj_.find(key);
    return Reader(it == obj_.end() ? empty : *it, qualified(key), text_, source_);
  }

  void finish() const {
    for (const auto& [key, value] : obj_.items()) {
      if (!seen_.count(key)) error(key, "is not a recognised key");
    }
  }

  [[noreturn]] void error(const std::string& key, const std::string& what) const { raise(key, qualified(key), what); }

 private:
  [[noreturn]] void raise(const std::string& key, const std::string& name, const std::string& what) const {
    std::ostringstream os;
    os << source_;
    const size_t at = text_.find("\"" + key + "\"");
    if (at != std::string::npos) os << ":" << line_of_offset(text_, at);
    os << ": '" << name << "' " << what;
    fail(ErrorKind::kConfig, os.str());
  }

  std::string qualified(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  const json& obj_;
  std::string path_;
  const std::string& text_;
  const std::string& source_;
  std::set<std::string> seen_;
};

void read_stage(Reader r, StageConfig& s) {
  r.get("epochs", s.epochs);
  r.get("batch_size", s.batch_size);
  r.get("peak_lr", s.peak_lr);
  r.get("floor_lr", s.floor_lr);
  r.get("warmup_fraction", s.warmup_fraction);
  r.get("weight_decay", s.weight_decay);
  r.finish();
}

LidarCorruptionSpec read_lidar_spec(Reader r) {
  LidarCorruptionSpec spec;
  std::string kind = to_string(spec.kind);
  r.get("kind", kind);
  r.get("severity", spec.severity);
  try {
    spec.kind = lidar_corruption_from_string(kind);
  } catch (const Error&) {
    r.error("kind", "must be gaussian_noise or density_decrease");
  }
  r.finish();
  return spec;
}

ojson stage_json(const StageConfig& s) {
  return {{"epochs", s.epochs},
          {"batch_size", s.batch_size},
          {"peak_lr", s.peak_lr},
          {"floor_lr", s.floor_lr},
          {"warmup_fraction", s.warmup_fraction},
          {"weight_decay", s.weight_decay}};
}

ojson lidar_json(const LidarCorruptionSpec& l) { return {{"kind", to_string(l.kind)}, {"severity", l.severity}}; }

}  // namespace

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  json doc;
  try {
    doc = json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    std::ostringstream os;
    os << source << ":" << line_of_offset(text, e.byte > 0 ? e.byte - 1 : 0) << ": malformed config: " << e.what();
    fail(ErrorKind::kConfig, os.str());
  }

  ExperimentConfig c;
  Reader top(doc, "", text, source);

  {
    Reader d = top.child("dataset");
    auto& ds = c.dataset;
    d.get("seed", ds.seed);
    d.get("train", ds.train);
    d.get("val", ds.val);
    d.get("night_fraction", ds.night_fraction);
    d.get("rain_fraction", ds.rain_fraction);
    d.get("night_severity", ds.night_severity);
    d.get("rain_severity", ds.rain_severity);
    d.get("image_height", ds.image_height);
    d.get("image_width", ds.image_width);
    d.get("min_primitives", ds.world.min_primitives);
    d.get("max_primitives", ds.world.max_primitives);
    d.finish();
  }
  {
    Reader e = top.child("encoder");
    int feature_dim = c.run.encoder_2d.feature_dim;
    e.get("feature_dim", feature_dim);
    c.run.encoder_2d.feature_dim = feature_dim;
    c.run.encoder_3d.feature_dim = feature_dim;
    Reader e2 = e.child("encoder_2d");
    e2.get("patch_size", c.run.encoder_2d.patch_size);
    e2.get("hidden", c.run.encoder_2d.hidden);
    e2.get("blocks", c.run.encoder_2d.blocks);
    e2.finish();
    Reader e3 = e.child("encoder_3d");
    e3.get("hidden", c.run.encoder_3d.hidden);
    e3.get("blocks", c.run.encoder_3d.blocks);
    e3.get("point_dim", c.run.encoder_3d.point_dim);
    e3.get("knn", c.run.encoder_3d.knn);
    e3.finish();
    e.finish();
  }
  {
    Reader t = top.child("trainer");
    t.get("seed", c.run.seed);
    read_stage(t.child("stage1"), c.run.stage1);
    read_stage(t.child("stage2"), c.run.stage2);
    Reader a = t.child("augment");
    a.get("rotate_z", c.run.augment.rotate_z);
    a.get("flip_xy", c.run.augment.flip_xy);
    a.finish();
    t.get("skip_stage1", c.run.skip_stage1);
    t.get("stage1_full_data", c.run.stage1_full_data);
    t.get("joint_one_stage", c.run.joint_one_stage);
    if (t.has("stage2_lidar_corruption") && !t.raw("stage2_lidar_corruption").is_null()) {
      c.run.stage2_lidar_corruption = read_lidar_spec(t.child("stage2_lidar_corruption"));
    }
    t.finish();
  }
  {
    Reader p = top.child("probe");
    auto& pc = c.probe;
    p.get("epochs", pc.epochs);
    p.get("batch_size", pc.batch_size);
    p.get("lr", pc.lr);
    p.get("finetune_epochs", pc.finetune_epochs);
    p.get("finetune_lr", pc.finetune_lr);
    p.get("weight_decay", pc.weight_decay);
    p.get("depth_pixels_per_sample", pc.depth_pixels_per_sample);
    p.get("seed", pc.seed);
    p.get("corruption_severity", c.corruption_severity);
    p.finish();
  }
  {
    Reader a = top.child("ablation");
    a.get("stage2_epochs", c.ablation.stage2_epochs);
    if (a.has("lidar_corruptions")) {
      const json& list = a.raw("lidar_corruptions");
      if (!list.is_array()) a.error("lidar_corruptions", "must be an array");
      c.ablation.lidar_corruptions.clear();
      for (size_t i = 0; i < list.size(); ++i) {
        c.ablation.lidar_corruptions.push_back(
            read_lidar_spec(Reader(list[i], "ablation.lidar_corruptions[" + std::to_string(i) + "]", text, source)));
      }
    }
    a.finish();
  }
  {
    Reader o = top.child("output");
    o.get("root", c.output.root);
    o.get("pca_samples", c.output.pca_samples);
    o.finish();
  }
  top.finish();

  try {
    c.validate();
  } catch (const Error& e) {
    fail(ErrorKind::kConfig, source + ": " + e.what());
  }
  c.hash = sha256_hex(config_to_json(c).dump());
  c.run.config_hash = c.hash;
  return c;
}

ExperimentConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) fail(ErrorKind::kConfig, "config file not found: " + path.string());
  return parse_config(read_text(path), path.string());
}

ojson config_to_json(const ExperimentConfig& c) {
  ojson j;
  const auto& d = c.dataset;
  j["dataset"] = {{"seed", d.seed},
                  {"train", d.train},
                  {"val", d.val},
                  {"night_fraction", d.night_fraction},
                  {"rain_fraction", d.rain_fraction},
                  {"night_severity", d.night_severity},
                  {"rain_severity", d.rain_severity},
                  {"image_height", d.image_height},
                  {"image_width", d.image_width},
                  {"min_primitives", d.world.min_primitives},
                  {"max_primitives", d.world.max_primitives}};
  const auto& e2 = c.run.encoder_2d;
  const auto& e3 = c.run.encoder_3d;
  j["encoder"] = {{"feature_dim", e2.feature_dim},
                  {"encoder_2d", {{"patch_size", e2.patch_size}, {"hidden", e2.hidden}, {"blocks", e2.blocks}}},
                  {"encoder_3d",
                   {{"hidden", e3.hidden}, {"blocks", e3.blocks}, {"point_dim", e3.point_dim}, {"knn", e3.knn}}}};
  ojson t;
  t["seed"] = c.run.seed;
  t["stage1"] = stage_json(c.run.stage1);
  t["stage2"] = stage_json(c.run.stage2);
  t["augment"] = {{"rotate_z", c.run.augment.rotate_z}, {"flip_xy", c.run.augment.flip_xy}};
  t["skip_stage1"] = c.run.skip_stage1;
  t["stage1_full_data"] = c.run.stage1_full_data;
  t["joint_one_stage"] = c.run.joint_one_stage;
  t["stage2_lidar_corruption"] =
      c.run.stage2_lidar_corruption ? lidar_json(*c.run.stage2_lidar_corruption) : ojson(nullptr);
  j["trainer"] = t;
  const auto& p = c.probe;
  j["probe"] = {{"epochs", p.epochs},
                {"batch_size", p.batch_size},
                {"lr", p.lr},
                {"finetune_epochs", p.finetune_epochs},
                {"finetune_lr", p.finetune_lr},
                {"weight_decay", p.weight_decay},
                {"depth_pixels_per_sample", p.depth_pixels_per_sample},
                {"seed", p.seed},
                {"corruption_severity", c.corruption_severity}};
  ojson lidar = ojson::array();
  for (const auto& l : c.ablation.lidar_corruptions) lidar.push_back(lidar_json(l));
  j["ablation"] = {{"stage2_epochs", c.ablation.stage2_epochs}, {"lidar_corruptions", lidar}};
  j["output"] = {{"root", c.output.root}, {"pca_samples", c.output.pca_samples}};
  return j;
}

std::string dataset_hash(const DatasetConfig& config) { return sha256_hex(config.canonical()); }

}  // namespace cdistill
