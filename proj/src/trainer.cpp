// SPDX-License-Identifier: Apache-2.0
#include "cdistill/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <numeric>
#include <sstream>

#include <json.hpp>

namespace cdistill {

namespace fs = std::filesystem;
using nlohmann::json;

void StageConfig::validate(const std::string& name) const {
  if (epochs < 1) fail(ErrorKind::kConfig, name + ": epochs must be >= 1");
  if (batch_size < 1) fail(ErrorKind::kConfig, name + ": batch_size must be >= 1");
  if (!(peak_lr > 0.0) || !(floor_lr > 0.0) || floor_lr > peak_lr) {
    fail(ErrorKind::kConfig, name + ": learning rates must satisfy 0 < floor_lr <= peak_lr");
  }
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) {
    fail(ErrorKind::kConfig, name + ": warmup_fraction must be in [0, 1)");
  }
  if (!(weight_decay >= 0.0)) fail(ErrorKind::kConfig, name + ": weight_decay must be >= 0");
}

void RunConfig::validate() const {
  encoder_2d.validate();
  encoder_3d.validate();
  if (encoder_2d.feature_dim != encoder_3d.feature_dim) {
    fail(ErrorKind::kConfig, "3D head width must equal the 2D feature width");
  }
  stage1.validate("stage1");
  stage2.validate("stage2");
  if (joint_one_stage && (skip_stage1 || stage1_full_data)) {
    fail(ErrorKind::kConfig, "joint_one_stage excludes skip_stage1 and stage1_full_data");
  }
  if (skip_stage1 && stage1_full_data) fail(ErrorKind::kConfig, "skip_stage1 excludes stage1_full_data");
  if (stage2_lidar_corruption &&
      (stage2_lidar_corruption->severity < 0 || stage2_lidar_corruption->severity > kMaxLidarSeverity)) {
    fail(ErrorKind::kConfig, "stage2 lidar corruption severity must be in [0, 2]");
  }
}

// ---------------------------------------------------------------------------
// optimisation

OptimizerState make_optimizer_state(const std::vector<const RowMatrix*>& params, const AdamWHparams& hparams) {
  OptimizerState s;
  s.hparams = hparams;
  for (const auto* p : params) {
    s.first_moment.push_back(RowMatrix::Zero(p->rows(), p->cols()));
    s.second_moment.push_back(RowMatrix::Zero(p->rows(), p->cols()));
  }
  return s;
}

void optimizer_step(const std::vector<NamedTensor>& params, const std::vector<const RowMatrix*>& grads,
                    OptimizerState& state, double rate) {
  if (params.size() != grads.size() || params.size() != state.first_moment.size()) {
    fail(ErrorKind::kInput, "optimizer_step: parameter/gradient/state count mismatch");
  }
  for (size_t k = 0; k < params.size(); ++k) {
    if (grads[k]->rows() != params[k].value->rows() || grads[k]->cols() != params[k].value->cols() ||
        state.first_moment[k].rows() != params[k].value->rows() ||
        state.first_moment[k].cols() != params[k].value->cols()) {
      fail(ErrorKind::kInput, "optimizer_step: shape mismatch for " + params[k].name);
    }
    if (!grads[k]->allFinite()) {
      Index bad = 0;
      for (; bad < grads[k]->size() && std::isfinite(grads[k]->data()[bad]); ++bad) {}
      std::ostringstream os;
      os << "non-finite gradient in " << params[k].name << " at flat index " << bad << " (value "
         << grads[k]->data()[bad] << ", step " << state.step << ")";
      fail(ErrorKind::kNumerical, os.str());
    }
  }
  const auto& h = state.hparams;
  ++state.step;
  const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.step));
  for (size_t k = 0; k < params.size(); ++k) {
    RowMatrix& p = *params[k].value;
    const RowMatrix& g = *grads[k];
    RowMatrix& m = state.first_moment[k];
    RowMatrix& v = state.second_moment[k];
    m = h.beta1 * m + (1.0 - h.beta1) * g;
    v = h.beta2 * v + (1.0 - h.beta2) * g.cwiseProduct(g);
    if (h.weight_decay != 0.0) p *= (1.0 - rate * h.weight_decay);
    p.array() -= rate * (m.array() / bc1) / ((v.array() / bc2).sqrt() + h.eps);
  }
}

double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps, double peak, double floor) {
  if (total_steps <= 0) return floor;
  step = std::clamp<int64_t>(step, 0, total_steps);
  if (step < warmup_steps) return peak * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress =
      static_cast<double>(step - warmup_steps) / static_cast<double>(std::max<int64_t>(1, total_steps - warmup_steps));
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---------------------------------------------------------------------------
// data selection and augmentation

bool used_in_stage1(Condition c, bool full_data) { return full_data || c == Condition::kDayClear; }

DatasetManifest filter_stage1_data(const DatasetManifest& manifest, bool full_data) {
  DatasetManifest out = manifest;
  out.records.clear();
  for (const auto& r : manifest.records) {
    if (used_in_stage1(r.condition, full_data)) out.records.push_back(r);
  }
  if (out.records.empty()) fail(ErrorKind::kPrerequisite, "no day_clear samples available for stage 1");
  out.recount();
  return out;
}

LidarAugmentation draw_augmentation(uint64_t seed, const AugmentConfig& config) {
  Rng rng(derive_seed(seed, "augment"));
  std::uniform_real_distribution<double> angle(0.0, 2.0 * std::numbers::pi);
  std::bernoulli_distribution coin(0.5);
  LidarAugmentation a;
  // Draw all variates regardless of toggles so enabling one does not shift another.
  const double theta = angle(rng);
  const bool fx = coin(rng);
  const bool fy = coin(rng);
  if (config.rotate_z) a.theta = theta;
  if (config.flip_xy) {
    a.flip_x = fx;
    a.flip_y = fy;
  }
  return a;
}

Points apply_augmentation(const Points& points, const LidarAugmentation& aug) {
  Eigen::Matrix3d r = Eigen::Matrix3d::Identity();
  if (aug.theta != 0.0) {
    const double c = std::cos(aug.theta);
    const double s = std::sin(aug.theta);
    r << c, -s, 0, s, c, 0, 0, 0, 1;
  }
  Eigen::Matrix3d flip = Eigen::Matrix3d::Identity();
  if (aug.flip_x) flip(0, 0) = -1.0;
  if (aug.flip_y) flip(1, 1) = -1.0;
  const Eigen::Matrix3d m = flip * r;
  // row vectors: p' = p * m^T
  return points * m.transpose();
}

Points augment_lidar(const Points& points, uint64_t seed, const AugmentConfig& config) {
  return apply_augmentation(points, draw_augmentation(seed, config));
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

AdamWHparams adam_for(const StageConfig& s) {
  AdamWHparams h;
  h.weight_decay = s.weight_decay;
  return h;
}

json shapes_json(const std::vector<NamedTensor>& tensors) {
  json arr = json::array();
  for (const auto& t : tensors) arr.push_back({{"name", t.name}, {"shape", {t.value->rows(), t.value->cols()}}});
  return arr;
}

std::vector<double> flatten(const std::vector<const RowMatrix*>& tensors) {
  std::vector<double> out;
  for (const auto* t : tensors) out.insert(out.end(), t->data(), t->data() + t->size());
  return out;
}

void unflatten(const std::vector<double>& flat, const std::vector<RowMatrix*>& tensors) {
  size_t off = 0;
  for (auto* t : tensors) {
    std::copy(flat.begin() + static_cast<std::ptrdiff_t>(off),
              flat.begin() + static_cast<std::ptrdiff_t>(off + t->size()), t->data());
    off += static_cast<size_t>(t->size());
  }
}

Linear linear_from_shapes(const json& w, const json& b) {
  Linear l;
  l.weight = RowMatrix::Zero(w.at("shape").at(0).get<Index>(), w.at("shape").at(1).get<Index>());
  l.bias = RowMatrix::Zero(b.at("shape").at(0).get<Index>(), b.at("shape").at(1).get<Index>());
  return l;
}

// Tensor lists are (embed, blocks..., out_proj[, head]) pairs of weight/bias;
// tail_linears counts the linears after the blocks.
template <typename Params>
Params params_from_shapes(const json& shapes, int tail_linears) {
  const size_t n = shapes.size();
  if (n % 2 != 0 || n < static_cast<size_t>(2 * (1 + tail_linears))) {
    fail(ErrorKind::kIo, "checkpoint tensor list is malformed");
  }
  Params p;
  std::vector<Linear> linears;
  for (size_t i = 0; i < n; i += 2) linears.push_back(linear_from_shapes(shapes[i], shapes[i + 1]));
  const size_t n_blocks = (linears.size() - 1 - static_cast<size_t>(tail_linears)) / 2;
  if ((linears.size() - 1 - static_cast<size_t>(tail_linears)) % 2 != 0) {
    fail(ErrorKind::kIo, "checkpoint block structure is malformed");
  }
  size_t k = 0;
  if constexpr (std::is_same_v<Params, EncoderParams2D>) {
    p.patch_embed = linears[k++];
  } else {
    p.point_embed = linears[k++];
  }
  for (size_t b = 0; b < n_blocks; ++b) {
    ResidualBlock blk{linears[k], linears[k + 1]};
    k += 2;
    p.blocks.push_back(blk);
  }
  p.out_proj = linears[k++];
  if constexpr (std::is_same_v<Params, EncoderParams3D>) p.head = linears[k++];
  return p;
}

std::vector<RowMatrix*> mutable_ptrs(std::vector<NamedTensor> t) {
  std::vector<RowMatrix*> out;
  for (auto& x : t) out.push_back(x.value);
  return out;
}

std::vector<const RowMatrix*> moment_ptrs(const std::vector<RowMatrix>& m) {
  std::vector<const RowMatrix*> out;
  for (const auto& x : m) out.push_back(&x);
  return out;
}

json optimizer_json(const OptimizerState& s, const std::string& prefix) {
  return {{"step", s.step},
          {"beta1", s.hparams.beta1},
          {"beta2", s.hparams.beta2},
          {"eps", s.hparams.eps},
          {"weight_decay", s.hparams.weight_decay},
          {"first_moment", prefix + "_m.f32"},
          {"second_moment", prefix + "_v.f32"}};
}

OptimizerState optimizer_from_json(const json& j, const fs::path& dir, const std::vector<const RowMatrix*>& shapes) {
  OptimizerState s = make_optimizer_state(shapes, {});
  s.step = j.at("step");
  s.hparams.beta1 = j.at("beta1");
  s.hparams.beta2 = j.at("beta2");
  s.hparams.eps = j.at("eps");
  s.hparams.weight_decay = j.at("weight_decay");
  Index total = 0;
  for (const auto* t : shapes) total += t->size();
  std::vector<RowMatrix*> m, v;
  for (auto& x : s.first_moment) m.push_back(&x);
  for (auto& x : s.second_moment) v.push_back(&x);
  unflatten(read_f32(dir / j.at("first_moment").get<std::string>(), static_cast<size_t>(total)), m);
  unflatten(read_f32(dir / j.at("second_moment").get<std::string>(), static_cast<size_t>(total)), v);
  return s;
}

}  // namespace

Checkpoint init_checkpoint(const RunConfig& config) {
  config.validate();
  Checkpoint c;
  c.seed = config.seed;
  c.config_hash = config.config_hash;
  c.encoder_2d = init_encoder_2d(config.encoder_2d, derive_seed(config.seed, "init/encoder_2d"));
  c.encoder_3d = init_encoder_3d(config.encoder_3d, derive_seed(config.seed, "init/encoder_3d"));
  c.optimizer_2d = make_optimizer_state(c.encoder_2d.const_tensors(), adam_for(config.stage2));
  c.optimizer_3d = make_optimizer_state(c.encoder_3d.const_tensors(), adam_for(config.stage1));
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  Checkpoint& c = const_cast<Checkpoint&>(ckpt);  // tensors() is non-const; nothing is modified
  json j;
  j["format"] = "cdistill-checkpoint/1";
  j["stage"] = c.stage;
  j["step"] = c.step;
  j["seed"] = c.seed;
  j["config_hash"] = c.config_hash;
  j["group_order"] = {"encoder_2d", "encoder_3d"};
  j["encoder_2d"] = {{"patch_size", c.encoder_2d.patch_size},
                     {"tensors", shapes_json(c.encoder_2d.tensors())},
                     {"file", "params_2d.f32"},
                     {"hash", c.encoder_2d.hash()}};
  j["encoder_3d"] = {{"knn", c.encoder_3d.knn},
                     {"tensors", shapes_json(c.encoder_3d.tensors())},
                     {"file", "params_3d.f32"},
                     {"hash", c.encoder_3d.hash()}};
  j["optimizer_2d"] = optimizer_json(c.optimizer_2d, "adam2d");
  j["optimizer_3d"] = optimizer_json(c.optimizer_3d, "adam3d");
  j["dtype"] = "float32";
  j["byte_order"] = "little";

  const fs::path tmp = fs::path(dir.string() + ".tmp");
  std::error_code ec;
  fs::remove_all(tmp, ec);
  fs::create_directories(tmp);
  write_f32(tmp / "params_2d.f32", flatten(c.encoder_2d.const_tensors()));
  write_f32(tmp / "params_3d.f32", flatten(c.encoder_3d.const_tensors()));
  write_f32(tmp / "adam2d_m.f32", flatten(moment_ptrs(c.optimizer_2d.first_moment)));
  write_f32(tmp / "adam2d_v.f32", flatten(moment_ptrs(c.optimizer_2d.second_moment)));
  write_f32(tmp / "adam3d_m.f32", flatten(moment_ptrs(c.optimizer_3d.first_moment)));
  write_f32(tmp / "adam3d_v.f32", flatten(moment_ptrs(c.optimizer_3d.second_moment)));
  write_text(tmp / "checkpoint.json", j.dump(2) + "\n");
  fs::remove_all(dir, ec);
  if (dir.has_parent_path()) fs::create_directories(dir.parent_path());
  fs::rename(tmp, dir);
}

Checkpoint load_checkpoint(const fs::path& dir) {
  const fs::path meta = dir / "checkpoint.json";
  if (!fs::exists(meta)) fail(ErrorKind::kPrerequisite, "no checkpoint at " + dir.string());
  Checkpoint c;
  try {
    const json j = json::parse(read_text(meta));
    if (j.at("format") != "cdistill-checkpoint/1") fail(ErrorKind::kIo, "unsupported checkpoint format");
    c.stage = j.at("stage");
    c.step = j.at("step");
    c.seed = j.at("seed");
    c.config_hash = j.at("config_hash");
    c.encoder_2d = params_from_shapes<EncoderParams2D>(j.at("encoder_2d").at("tensors"), 1);
    c.encoder_2d.patch_size = j.at("encoder_2d").at("patch_size");
    c.encoder_3d = params_from_shapes<EncoderParams3D>(j.at("encoder_3d").at("tensors"), 2);
    c.encoder_3d.knn = j.at("encoder_3d").at("knn");
    const auto load_params = [&](const json& e, std::vector<RowMatrix*> tensors) {
      Index total = 0;
      for (auto* t : tensors) total += t->size();
      unflatten(read_f32(dir / e.at("file").get<std::string>(), static_cast<size_t>(total)), tensors);
    };
    load_params(j.at("encoder_2d"), mutable_ptrs(c.encoder_2d.tensors()));
    load_params(j.at("encoder_3d"), mutable_ptrs(c.encoder_3d.tensors()));
    if (c.encoder_2d.hash() != j.at("encoder_2d").at("hash") || c.encoder_3d.hash() != j.at("encoder_3d").at("hash")) {
      fail(ErrorKind::kIo, "checkpoint parameter hash mismatch in " + dir.string());
    }
    c.optimizer_2d = optimizer_from_json(j.at("optimizer_2d"), dir, c.encoder_2d.const_tensors());
    c.optimizer_3d = optimizer_from_json(j.at("optimizer_3d"), dir, c.encoder_3d.const_tensors());
  } catch (const json::exception& e) {
    fail(ErrorKind::kIo, meta.string() + ": " + e.what());
  }
  return c;
}

// ---------------------------------------------------------------------------
// training

std::vector<size_t> epoch_order(uint64_t seed, const std::string& stage, int epoch, size_t n) {
  std::vector<size_t> order(n);
  std::iota(order.begin(), order.end(), size_t{0});
  Rng rng(derive_seed(derive_seed(seed, "shuffle/" + stage), static_cast<uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void append_train_log(const std::vector<LogEntry>& log, const fs::path& csv) {
  const bool fresh = !fs::exists(csv);
  std::ofstream out(csv, std::ios::app);
  if (!out) fail(ErrorKind::kIo, "cannot open " + csv.string());
  if (fresh) out << "step,stage,lr,loss\n";
  out << std::setprecision(10);
  for (const auto& e : log) out << e.step << "," << e.stage << "," << e.lr << "," << e.loss << "\n";
}

namespace {

struct SampleGrad {
  bool used = false;
  double loss = 0.0;
  EncoderParams2D g2;
  EncoderParams3D g3;
};

struct LoopSpec {
  std::string name;
  StageConfig schedule;
  bool train_2d = false;
  bool train_3d = false;
  size_t n = 0;
  // Fills grads (pre-zeroed) for one sample; leaves used=false to skip it.
  std::function<void(const Checkpoint&, size_t sample, int epoch, SampleGrad&)> kernel;
};

template <typename Params>
void add_scaled(Params& acc, const Params& g, double scale) {
  auto a = acc.tensors();
  const auto b = g.const_tensors();
  for (size_t k = 0; k < a.size(); ++k) *a[k].value += scale * *b[k];
}

TrainResult run_loop(const RunConfig& config, const Checkpoint& start, const LoopSpec& spec,
                     const TrainOptions& options) {
  TrainResult result;
  Checkpoint& ckpt = result.checkpoint;
  ckpt = start;
  ckpt.config_hash = config.config_hash;
  if (spec.train_2d) ckpt.optimizer_2d = make_optimizer_state(ckpt.encoder_2d.const_tensors(), adam_for(spec.schedule));
  if (spec.train_3d) ckpt.optimizer_3d = make_optimizer_state(ckpt.encoder_3d.const_tensors(), adam_for(spec.schedule));

  const std::string frozen_2d = ckpt.encoder_2d.hash();
  const std::string frozen_3d = ckpt.encoder_3d.hash();
  const size_t bs = static_cast<size_t>(spec.schedule.batch_size);
  const int64_t per_epoch = static_cast<int64_t>((spec.n + bs - 1) / bs);
  const int64_t total = per_epoch * spec.schedule.epochs;
  const auto warmup = static_cast<int64_t>(std::floor(spec.schedule.warmup_fraction * static_cast<double>(total)));
  int64_t step = 0;
  // Parameters that most recently produced a finite loss.
  Checkpoint last_good = ckpt;

  for (int epoch = 0; epoch < spec.schedule.epochs; ++epoch) {
    const auto order = epoch_order(config.seed, spec.name, epoch, spec.n);
    for (size_t begin = 0; begin < spec.n; begin += bs) {
      const std::vector<size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(begin),
                                      order.begin() + static_cast<std::ptrdiff_t>(std::min(spec.n, begin + bs)));
      if (options.on_batch) options.on_batch(epoch, batch);
      std::vector<SampleGrad> per(batch.size());
      try {
        parallel_for(batch.size(), [&](size_t i) {
          per[i].g2 = ckpt.encoder_2d.zeros_like();
          per[i].g3 = ckpt.encoder_3d.zeros_like();
          spec.kernel(ckpt, batch[i], epoch, per[i]);
        });
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::kNumerical && options.failure_checkpoint_dir) {
          save_checkpoint(last_good, *options.failure_checkpoint_dir);
        }
        throw;
      }
      const double lr = cosine_lr(step + 1, total, warmup, spec.schedule.peak_lr, spec.schedule.floor_lr);
      ++step;
      size_t used = 0;
      double loss = 0.0;
      EncoderParams2D g2 = ckpt.encoder_2d.zeros_like();
      EncoderParams3D g3 = ckpt.encoder_3d.zeros_like();
      for (const auto& sg : per) {
        if (!sg.used) continue;
        ++used;
        loss += sg.loss;
      }
      if (used == 0) continue;  // every sample lacked correspondences
      for (const auto& sg : per) {
        if (!sg.used) continue;
        if (spec.train_2d) add_scaled(g2, sg.g2, 1.0 / static_cast<double>(used));
        if (spec.train_3d) add_scaled(g3, sg.g3, 1.0 / static_cast<double>(used));
      }
      loss /= static_cast<double>(used);
      if (!std::isfinite(loss)) {
        if (options.failure_checkpoint_dir) save_checkpoint(last_good, *options.failure_checkpoint_dir);
        std::ostringstream os;
        os << spec.name << ": loss became non-finite at step " << step;
        fail(ErrorKind::kNumerical, os.str());
      }
      last_good = ckpt;
      try {
        if (spec.train_2d) optimizer_step(ckpt.encoder_2d.tensors(), g2.const_tensors(), ckpt.optimizer_2d, lr);
        if (spec.train_3d) optimizer_step(ckpt.encoder_3d.tensors(), g3.const_tensors(), ckpt.optimizer_3d, lr);
      } catch (const Error&) {
        if (options.failure_checkpoint_dir) save_checkpoint(last_good, *options.failure_checkpoint_dir);
        throw;
      }
      ckpt.step = step;
      LogEntry entry{step, spec.name, lr, loss};
      result.log.push_back(entry);
      if (options.on_step) options.on_step(entry, ckpt);
    }
    if (!spec.train_2d && ckpt.encoder_2d.hash() != frozen_2d) {
      fail(ErrorKind::kNumerical, spec.name + ": frozen 2D encoder changed");
    }
    if (!spec.train_3d && ckpt.encoder_3d.hash() != frozen_3d) {
      fail(ErrorKind::kNumerical, spec.name + ": frozen 3D encoder changed");
    }
  }
  ckpt.stage = spec.name;
  ckpt.step = step;
  return result;
}

std::vector<int> correspondence_pixels(const CorrespondenceSet& corr, int width) {
  std::vector<int> px(corr.count());
  for (size_t i = 0; i < corr.count(); ++i) px[i] = corr.pixel_index(i, width);
  return px;
}

RowMatrix gather_rows(const RowMatrix& m, const std::vector<int>& rows) {
  RowMatrix out(static_cast<Index>(rows.size()), m.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

RowMatrix scatter_rows(const RowMatrix& grads, const std::vector<int>& rows, Index n) {
  RowMatrix out = RowMatrix::Zero(n, grads.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(rows[i]) += grads.row(static_cast<Index>(i));
  return out;
}

uint64_t augment_seed(uint64_t seed, int epoch, const std::string& sample_id) {
  return derive_seed(derive_seed(seed, "augment/" + sample_id), static_cast<uint64_t>(epoch));
}

}  // namespace

TrainResult train_stage1(const RunConfig& config, const std::vector<Sample>& train, const Checkpoint& start,
                         const TrainOptions& options) {
  config.validate();
  std::vector<const Sample*> selected;
  for (const auto& s : train) {
    if (used_in_stage1(s.condition, config.stage1_full_data)) selected.push_back(&s);
  }
  if (selected.empty()) fail(ErrorKind::kPrerequisite, "stage 1 has no eligible samples");

  // The 2D side is frozen, so anchors of the clean images are fixed.
  struct Cached {
    CorrespondenceSet corr;
    RowMatrix anchors;
  };
  std::vector<Cached> cache(selected.size());
  parallel_for(selected.size(), [&](size_t i) {
    const Sample& s = *selected[i];
    cache[i].corr = match_correspondences(s.points, s.rig);
    if (cache[i].corr.empty()) return;
    const Upsampler up(s.height, s.width, start.encoder_2d.patch_size);
    const RowMatrix grid = forward_2d_grid(start.encoder_2d, s.image_clean, s.height, s.width).grid_features;
    cache[i].anchors = up.sample(grid, correspondence_pixels(cache[i].corr, s.width));
  });

  LoopSpec spec;
  spec.name = "stage1";
  spec.schedule = config.stage1;
  spec.train_3d = true;
  spec.n = selected.size();
  spec.kernel = [&](const Checkpoint& ckpt, size_t i, int epoch, SampleGrad& out) {
    const Sample& s = *selected[i];
    const Cached& c = cache[i];
    if (c.corr.empty()) return;
    const Points cloud = augment_lidar(s.points, augment_seed(config.seed, epoch, s.sample_id), config.augment);
    const Forward3D fwd = forward_3d_cached(ckpt.encoder_3d, cloud);
    const MatchedFeatures mf{c.anchors, gather_rows(fwd.features, c.corr.point_indices)};
    const StageLoss l = stage_loss(StageId::kStage1, mf);
    backward_3d(ckpt.encoder_3d, fwd, scatter_rows(l.point_grad, c.corr.point_indices, cloud.rows()), &out.g3);
    out.loss = l.loss;
    out.used = true;
  };
  return run_loop(config, start, spec, options);
}

TrainResult train_stage2(const RunConfig& config, const std::vector<Sample>& train, const Checkpoint& start,
                         const TrainOptions& options) {
  config.validate();
  if (train.empty()) fail(ErrorKind::kPrerequisite, "stage 2 has no samples");
  struct Cached {
    CorrespondenceSet corr;
    std::vector<int> pixels;
    RowMatrix anchors;
  };
  std::vector<Cached> cache(train.size());
  parallel_for(train.size(), [&](size_t i) {
    const Sample& s = train[i];
    Points cloud = s.points;
    if (config.stage2_lidar_corruption && config.stage2_lidar_corruption->severity > 0) {
      cloud = corrupt_lidar(s.points, config.stage2_lidar_corruption->kind, config.stage2_lidar_corruption->severity,
                            derive_seed(config.seed, "stage2_lidar/" + s.sample_id))
                  .points;
    }
    cache[i].corr = match_correspondences(cloud, s.rig);
    if (cache[i].corr.empty()) return;
    cache[i].pixels = correspondence_pixels(cache[i].corr, s.width);
    cache[i].anchors = gather_rows(forward_3d(start.encoder_3d, cloud), cache[i].corr.point_indices);
  });

  LoopSpec spec;
  spec.name = "stage2";
  spec.schedule = config.stage2;
  spec.train_2d = true;
  spec.n = train.size();
  spec.kernel = [&](const Checkpoint& ckpt, size_t i, int, SampleGrad& out) {
    const Sample& s = train[i];
    const Cached& c = cache[i];
    if (c.corr.empty()) return;
    const Upsampler up(s.height, s.width, ckpt.encoder_2d.patch_size);
    const Forward2D fwd = forward_2d_grid(ckpt.encoder_2d, s.image, s.height, s.width);
    const MatchedFeatures mf{up.sample(fwd.grid_features, c.pixels), c.anchors};
    const StageLoss l = stage_loss(StageId::kStage2, mf);
    RowMatrix grid_grad = RowMatrix::Zero(fwd.grid_features.rows(), fwd.grid_features.cols());
    up.scatter(l.pixel_grad, c.pixels, &grid_grad);
    backward_2d(ckpt.encoder_2d, fwd, grid_grad, &out.g2);
    out.loss = l.loss;
    out.used = true;
  };
  return run_loop(config, start, spec, options);
}

TrainResult train_joint(const RunConfig& config, const std::vector<Sample>& train, const Checkpoint& start,
                        const TrainOptions& options) {
  config.validate();
  if (train.empty()) fail(ErrorKind::kPrerequisite, "joint training has no samples");
  std::vector<CorrespondenceSet> corr(train.size());
  parallel_for(train.size(), [&](size_t i) { corr[i] = match_correspondences(train[i].points, train[i].rig); });

  LoopSpec spec;
  spec.name = "joint";
  spec.schedule = config.stage1;
  spec.train_2d = true;
  spec.train_3d = true;
  spec.n = train.size();
  spec.kernel = [&](const Checkpoint& ckpt, size_t i, int epoch, SampleGrad& out) {
    const Sample& s = train[i];
    const CorrespondenceSet& c = corr[i];
    if (c.empty()) return;
    const std::vector<int> pixels = correspondence_pixels(c, s.width);
    const Upsampler up(s.height, s.width, ckpt.encoder_2d.patch_size);
    const Forward2D f2 = forward_2d_grid(ckpt.encoder_2d, s.image, s.height, s.width);
    const Points cloud = augment_lidar(s.points, augment_seed(config.seed, epoch, s.sample_id), config.augment);
    const Forward3D f3 = forward_3d_cached(ckpt.encoder_3d, cloud);
    const MatchedFeatures mf{up.sample(f2.grid_features, pixels), gather_rows(f3.features, c.point_indices)};
    const StageLoss l = joint_loss(mf);
    RowMatrix grid_grad = RowMatrix::Zero(f2.grid_features.rows(), f2.grid_features.cols());
    up.scatter(l.pixel_grad, pixels, &grid_grad);
    backward_2d(ckpt.encoder_2d, f2, grid_grad, &out.g2);
    backward_3d(ckpt.encoder_3d, f3, scatter_rows(l.point_grad, c.point_indices, cloud.rows()), &out.g3);
    out.loss = l.loss;
    out.used = true;
  };
  return run_loop(config, start, spec, options);
}

}  // namespace cdistill
