// SPDX-License-Identifier: Apache-2.0
#include "cdistill/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numeric>
#include <sstream>

#include <Eigen/Eigenvalues>
#include <json.hpp>

#include "cdistill/distill.hpp"
#include "cdistill/geometry.hpp"
#include "cdistill/trainer.hpp"

namespace cdistill {

namespace fs = std::filesystem;

std::string to_string(ProbeTask t) { return t == ProbeTask::kSegmentation ? "seg" : "depth"; }

ProbeTask probe_task_from_string(const std::string& s) {
  if (s == "seg" || s == "segmentation") return ProbeTask::kSegmentation;
  if (s == "depth") return ProbeTask::kDepth;
  fail(ErrorKind::kConfig, "unknown probe task '" + s + "' (expected seg or depth)");
}

RowMatrix ProbeHead::standardize(const RowMatrix& features) const {
  return (features.rowwise() - feature_mean.row(0)).array().rowwise() * feature_scale.row(0).array();
}

void ProbeHead::validate(int feature_dim) const {
  if (linear.in_features() != feature_dim) fail(ErrorKind::kInput, "probe head width does not match the encoder");
  if (feature_mean.rows() != 1 || feature_mean.cols() != feature_dim || feature_scale.rows() != 1 ||
      feature_scale.cols() != feature_dim) {
    fail(ErrorKind::kInput, "probe head standardization has the wrong shape");
  }
  if (linear.bias.rows() != 1 || linear.bias.cols() != linear.out_features()) {
    fail(ErrorKind::kInput, "probe head bias has the wrong shape");
  }
  if (task == ProbeTask::kDepth && outputs() != 1) fail(ErrorKind::kInput, "depth head must have one output");
  if (!linear.weight.allFinite() || !linear.bias.allFinite()) fail(ErrorKind::kNumerical, "probe head is non-finite");
}

void ProbeConfig::validate() const {
  if (epochs < 1 || finetune_epochs < 1) fail(ErrorKind::kConfig, "probe: epochs must be >= 1");
  if (batch_size < 1) fail(ErrorKind::kConfig, "probe: batch_size must be >= 1");
  if (!(lr > 0.0) || !(finetune_lr > 0.0)) fail(ErrorKind::kConfig, "probe: learning rates must be > 0");
  if (!(weight_decay >= 0.0)) fail(ErrorKind::kConfig, "probe: weight_decay must be >= 0");
  if (depth_pixels_per_sample < 1) fail(ErrorKind::kConfig, "probe: depth_pixels_per_sample must be >= 1");
}

std::vector<int> project_labels(const Sample& sample) {
  std::vector<int> labels(static_cast<size_t>(sample.height) * static_cast<size_t>(sample.width), -1);
  const CorrespondenceSet corr = match_correspondences(sample.points, sample.rig);
  for (size_t i = 0; i < corr.count(); ++i) {
    labels[static_cast<size_t>(corr.pixel_index(i, sample.width))] =
        sample.point_labels[static_cast<size_t>(corr.point_indices[i])];
  }
  return labels;
}

MiouResult miou(const Confusion& confusion) {
  const size_t c = confusion.size();
  MiouResult r;
  r.per_class.assign(c, std::numeric_limits<double>::quiet_NaN());
  std::vector<int64_t> col(c, 0);
  for (const auto& row : confusion) {
    if (row.size() != c) fail(ErrorKind::kInput, "confusion matrix must be square");
    for (size_t j = 0; j < c; ++j) {
      if (row[j] < 0) fail(ErrorKind::kInput, "confusion counts must be nonnegative");
      col[j] += row[j];
    }
  }
  double sum = 0.0;
  for (size_t k = 0; k < c; ++k) {
    const int64_t tp = confusion[k][k];
    const int64_t fn = std::accumulate(confusion[k].begin(), confusion[k].end(), int64_t{0}) - tp;
    const int64_t fp = col[k] - tp;
    const int64_t denom = tp + fp + fn;
    if (denom == 0) continue;
    r.per_class[k] = static_cast<double>(tp) / static_cast<double>(denom);
    sum += r.per_class[k];
    ++r.classes_counted;
  }
  if (r.classes_counted == 0) fail(ErrorKind::kNumerical, "mIoU is undefined: no class occurs");
  r.mean = sum / r.classes_counted;
  return r;
}

// ---------------------------------------------------------------------------
// losses

double cross_entropy(const RowMatrix& logits, const std::vector<int>& labels, RowMatrix* logit_grad) {
  const Index n = logits.rows();
  if (static_cast<size_t>(n) != labels.size()) fail(ErrorKind::kInput, "cross_entropy: label count mismatch");
  if (n == 0) fail(ErrorKind::kInput, "cross_entropy: no rows");
  if (logit_grad) logit_grad->setZero(n, logits.cols());
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int y = labels[static_cast<size_t>(i)];
    if (y < 0 || y >= logits.cols()) fail(ErrorKind::kInput, "cross_entropy: label out of range");
    const double mx = logits.row(i).maxCoeff();
    const Eigen::RowVectorXd e = (logits.row(i).array() - mx).exp();
    const double z = e.sum();
    total += std::log(z) + mx - logits(i, y);
    if (logit_grad) {
      logit_grad->row(i) = e / (z * static_cast<double>(n));
      (*logit_grad)(i, y) -= 1.0 / static_cast<double>(n);
    }
  }
  return total / static_cast<double>(n);
}

double mean_squared_error(const RowMatrix& predictions, const Eigen::VectorXd& targets, RowMatrix* pred_grad) {
  const Index n = predictions.rows();
  if (predictions.cols() != 1 || targets.size() != n) fail(ErrorKind::kInput, "mean_squared_error: shape mismatch");
  if (n == 0) fail(ErrorKind::kInput, "mean_squared_error: no rows");
  const Eigen::VectorXd diff = predictions.col(0) - targets;
  if (pred_grad) *pred_grad = (2.0 / static_cast<double>(n)) * diff;
  return diff.squaredNorm() / static_cast<double>(n);
}

namespace {

constexpr std::array<const char*, 4> kConditionKeys = {"day_clear", "day_rain", "night", "full"};

// `features` are already standardized.
RowMatrix apply_linear(const ProbeHead& head, const RowMatrix& features) {
  return (features * head.linear.weight).rowwise() + head.linear.bias.row(0);
}

RowMatrix apply_head(const ProbeHead& head, const RowMatrix& features) {
  return apply_linear(head, head.standardize(features));
}

// Loss at head outputs; fills d loss / d outputs.
double head_loss(ProbeTask task, const RowMatrix& outputs, const std::vector<int>& labels,
                 const Eigen::VectorXd& depths, RowMatrix* grad) {
  return task == ProbeTask::kSegmentation ? cross_entropy(outputs, labels, grad)
                                          : mean_squared_error(outputs, depths, grad);
}

void head_backward(const RowMatrix& features, const RowMatrix& out_grad, Linear* grad) {
  grad->weight.noalias() += features.transpose() * out_grad;
  grad->bias += out_grad.colwise().sum();
}

Linear zeros_like(const Linear& l) {
  return {RowMatrix::Zero(l.weight.rows(), l.weight.cols()), RowMatrix::Zero(1, l.bias.cols())};
}

}  // namespace

double probe_sample_loss(const ProbeHead& head, const EncoderParams2D& encoder, const RowMatrix& image, int height,
                         int width, const std::vector<int>& pixels, const std::vector<int>& labels,
                         const Eigen::VectorXd& depths, Linear* head_grad, EncoderParams2D* encoder_grad) {
  const Upsampler up(height, width, encoder.patch_size);
  const Forward2D fwd = forward_2d_grid(encoder, image, height, width);
  const RowMatrix feats = head.standardize(up.sample(fwd.grid_features, pixels));
  const RowMatrix out = apply_linear(head, feats);
  const bool want = head_grad || encoder_grad;
  RowMatrix g;
  const double loss = head_loss(head.task, out, labels, depths, want ? &g : nullptr);
  if (head_grad) head_backward(feats, g, head_grad);
  if (encoder_grad) {
    const RowMatrix feat_grad =
        (g * head.linear.weight.transpose()).array().rowwise() * head.feature_scale.row(0).array();
    RowMatrix grid_grad = RowMatrix::Zero(fwd.grid_features.rows(), fwd.grid_features.cols());
    up.scatter(feat_grad, pixels, &grid_grad);
    backward_2d(encoder, fwd, grid_grad, encoder_grad);
  }
  return loss;
}

// ---------------------------------------------------------------------------
// probing

std::vector<EvalView> corruption_views(int max_severity) {
  if (max_severity < 0 || max_severity > kMaxImageSeverity) {
    fail(ErrorKind::kConfig, "corruption severities must be in [0, 5]");
  }
  std::vector<EvalView> views{{"delivered", std::nullopt, 0}};
  for (ImageCorruption k : kAllImageCorruptions) {
    for (int s = 1; s <= max_severity; ++s) views.push_back({to_string(k) + "@" + std::to_string(s), k, s});
  }
  return views;
}

RowMatrix view_image(const Sample& sample, const EvalView& view, uint64_t seed) {
  if (!view.corruption) return sample.image;
  return corrupt_image(sample.image_clean, sample.height, sample.width, *view.corruption, view.severity,
                       derive_seed(seed, "view/" + view.name + "/" + sample.sample_id), &sample.pixel_depth);
}

namespace {

struct ProbeTarget {
  std::vector<int> pixels;
  std::vector<int> labels;
  Eigen::VectorXd depths;
};

ProbeTarget probe_target(ProbeTask task, const Sample& s, const ProbeConfig& config) {
  ProbeTarget t;
  if (task == ProbeTask::kSegmentation) {
    const std::vector<int> labels = project_labels(s);
    for (size_t p = 0; p < labels.size(); ++p) {
      if (labels[p] < 0) continue;
      t.pixels.push_back(static_cast<int>(p));
      t.labels.push_back(labels[p]);
    }
    return t;
  }
  std::vector<int> valid;
  for (Index p = 0; p < s.pixel_depth.size(); ++p) {
    if (s.depth_valid(p)) valid.push_back(static_cast<int>(p));
  }
  const size_t keep = std::min(valid.size(), static_cast<size_t>(config.depth_pixels_per_sample));
  if (keep < valid.size()) {
    Rng rng(derive_seed(config.seed, "depth_pixels/" + s.sample_id));
    std::shuffle(valid.begin(), valid.end(), rng);
    valid.resize(keep);
    std::sort(valid.begin(), valid.end());
  }
  t.pixels = valid;
  t.depths.resize(static_cast<Index>(valid.size()));
  for (size_t i = 0; i < valid.size(); ++i) t.depths[static_cast<Index>(i)] = s.pixel_depth[valid[i]];
  return t;
}

std::vector<NamedTensor> head_tensors(ProbeHead& head) {
  return {{"probe.weight", &head.linear.weight}, {"probe.bias", &head.linear.bias}};
}

}  // namespace

ConditionMetrics evaluate_probe(const ProbeHead& head, const EncoderParams2D& encoder, const std::vector<Sample>& val,
                                const EvalView& view, uint64_t seed) {
  head.validate(encoder.feature_dim());
  const int c = head.outputs();
  struct Acc {
    Confusion confusion;
    double sq = 0.0;
    int64_t pixels = 0;
    bool used = false;
  };
  std::vector<Acc> per(val.size());
  parallel_for(val.size(), [&](size_t i) {
    const Sample& s = val[i];
    Acc& a = per[i];
    const Upsampler up(s.height, s.width, encoder.patch_size);
    const RowMatrix grid = forward_2d_grid(encoder, view_image(s, view, seed), s.height, s.width).grid_features;
    const RowMatrix out = up.upsample(apply_head(head, grid));
    if (head.task == ProbeTask::kSegmentation) {
      a.confusion.assign(static_cast<size_t>(c), std::vector<int64_t>(static_cast<size_t>(c), 0));
      const std::vector<int> labels = project_labels(s);
      for (size_t p = 0; p < labels.size(); ++p) {
        if (labels[p] < 0) continue;
        Index pred = 0;
        out.row(static_cast<Index>(p)).maxCoeff(&pred);
        ++a.confusion[static_cast<size_t>(labels[p])][static_cast<size_t>(pred)];
        ++a.pixels;
      }
    } else {
      for (Index p = 0; p < s.pixel_depth.size(); ++p) {
        if (!s.depth_valid(p)) continue;
        const double d = out(p, 0) - s.pixel_depth[p];
        a.sq += d * d;
        ++a.pixels;
      }
    }
    a.used = a.pixels > 0;
  });

  ConditionMetrics m;
  for (const char* key : kConditionKeys) {
    const std::string k = key;
    Acc pooled;
    pooled.confusion.assign(static_cast<size_t>(c), std::vector<int64_t>(static_cast<size_t>(c), 0));
    int samples = 0;
    for (size_t i = 0; i < val.size(); ++i) {
      if (!per[i].used || (k != "full" && to_string(val[i].condition) != k)) continue;
      ++samples;
      pooled.pixels += per[i].pixels;
      pooled.sq += per[i].sq;
      if (head.task == ProbeTask::kSegmentation) {
        for (int r = 0; r < c; ++r) {
          for (int q = 0; q < c; ++q) pooled.confusion[r][q] += per[i].confusion[r][q];
        }
      }
    }
    if (samples == 0) continue;  // condition absent from this split
    m.samples[k] = samples;
    m.pixels[k] = pooled.pixels;
    m.value[k] = head.task == ProbeTask::kSegmentation
                     ? miou(pooled.confusion).mean
                     : std::sqrt(pooled.sq / static_cast<double>(pooled.pixels));
  }
  return m;
}

ProbeResult run_probe(ProbeTask task, const EncoderParams2D& encoder, const std::vector<Sample>& train,
                      const std::vector<Sample>& val, const ProbeConfig& config, bool finetune,
                      const std::vector<EvalView>& views) {
  config.validate();
  if (train.empty()) fail(ErrorKind::kPrerequisite, "probe: empty training split");
  if (val.empty()) fail(ErrorKind::kPrerequisite, "probe: empty validation split");
  const int d = encoder.feature_dim();

  std::vector<ProbeTarget> targets(train.size());
  parallel_for(train.size(), [&](size_t i) { targets[i] = probe_target(task, train[i], config); });
  for (size_t i = 0; i < train.size(); ++i) {
    if (task == ProbeTask::kDepth && targets[i].pixels.empty()) {
      std::cerr << "warning: " << train[i].sample_id << " has no valid depth pixels; skipped\n";
    }
  }

  ProbeResult result;
  result.encoder = encoder;
  ProbeHead& head = result.head;
  head.task = task;
  int outputs = 1;
  if (task == ProbeTask::kSegmentation) {
    int max_label = 0;
    for (const auto& s : train) {
      for (int l : s.point_labels) max_label = std::max(max_label, l);
    }
    for (const auto& s : val) {
      for (int l : s.point_labels) max_label = std::max(max_label, l);
    }
    outputs = max_label + 1;
  }
  head.linear = {RowMatrix::Zero(d, outputs), RowMatrix::Zero(1, outputs)};
  if (task == ProbeTask::kDepth) {
    double sum = 0.0;
    int64_t n = 0;
    for (const auto& t : targets) {
      sum += t.depths.sum();
      n += t.depths.size();
    }
    if (n == 0) fail(ErrorKind::kPrerequisite, "probe: no valid depth pixels in the training split");
    head.linear.bias(0, 0) = sum / static_cast<double>(n);
  }

  // Features at the target pixels; reused as probe inputs when the encoder is frozen.
  std::vector<RowMatrix> cached(train.size());
  parallel_for(train.size(), [&](size_t i) {
    if (targets[i].pixels.empty()) return;
    const Sample& s = train[i];
    const Upsampler up(s.height, s.width, encoder.patch_size);
    cached[i] = up.sample(forward_2d_grid(encoder, s.image, s.height, s.width).grid_features, targets[i].pixels);
  });
  {
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(d);
    Eigen::RowVectorXd sq = Eigen::RowVectorXd::Zero(d);
    double n = 0.0;
    for (const auto& c : cached) {
      if (c.rows() == 0) continue;
      sum += c.colwise().sum();
      n += static_cast<double>(c.rows());
    }
    if (n == 0.0) fail(ErrorKind::kPrerequisite, "probe: no training pixels");
    const Eigen::RowVectorXd mean = sum / n;
    for (const auto& c : cached) {
      if (c.rows() == 0) continue;
      sq += (c.rowwise() - mean).cwiseProduct(c.rowwise() - mean).colwise().sum();
    }
    head.feature_mean = mean;
    head.feature_scale = (sq / n).cwiseSqrt().unaryExpr([](double sd) { return 1.0 / std::max(sd, 1e-6); });
    if (!finetune) {
      for (auto& c : cached) {
        if (c.rows() > 0) c = head.standardize(c);
      }
    } else {
      cached.clear();
    }
  }

  const int epochs = finetune ? config.finetune_epochs : config.epochs;
  const double peak = finetune ? config.finetune_lr : config.lr;
  AdamWHparams hp;
  hp.weight_decay = config.weight_decay;
  OptimizerState head_opt = make_optimizer_state({&head.linear.weight, &head.linear.bias}, hp);
  OptimizerState enc_opt = make_optimizer_state(result.encoder.const_tensors(), hp);
  const size_t bs = static_cast<size_t>(config.batch_size);
  const int64_t per_epoch = static_cast<int64_t>((train.size() + bs - 1) / bs);
  const int64_t total = per_epoch * epochs;
  const std::string stream = "probe_" + to_string(task) + (finetune ? "_ft" : "_lp");
  int64_t step = 0;

  for (int epoch = 0; epoch < epochs; ++epoch) {
    const auto order = epoch_order(config.seed, stream, epoch, train.size());
    for (size_t begin = 0; begin < order.size(); begin += bs) {
      const size_t end = std::min(order.size(), begin + bs);
      struct Grad {
        bool used = false;
        double loss = 0.0;
        Linear head;
        EncoderParams2D enc;
      };
      std::vector<Grad> per(end - begin);
      parallel_for(per.size(), [&](size_t j) {
        const size_t i = order[begin + j];
        const ProbeTarget& t = targets[i];
        if (t.pixels.empty()) return;
        Grad& g = per[j];
        g.head = zeros_like(head.linear);
        if (finetune) {
          g.enc = result.encoder.zeros_like();
          const Sample& s = train[i];
          g.loss = probe_sample_loss(head, result.encoder, s.image, s.height, s.width, t.pixels, t.labels, t.depths,
                                     &g.head, &g.enc);
        } else {
          RowMatrix og;
          g.loss = head_loss(task, apply_linear(head, cached[i]), t.labels, t.depths, &og);
          head_backward(cached[i], og, &g.head);
        }
        g.used = true;
      });
      const double rate = cosine_lr(step + 1, total, 0, peak, peak * 0.01);
      ++step;
      size_t used = 0;
      for (const auto& g : per) used += g.used ? 1 : 0;
      if (used == 0) continue;
      Linear hg = zeros_like(head.linear);
      EncoderParams2D eg = result.encoder.zeros_like();
      double loss = 0.0;
      const double w = 1.0 / static_cast<double>(used);
      for (const auto& g : per) {
        if (!g.used) continue;
        loss += w * g.loss;
        hg.weight += w * g.head.weight;
        hg.bias += w * g.head.bias;
        if (finetune) {
          auto dst = eg.tensors();
          const auto src = g.enc.const_tensors();
          for (size_t k = 0; k < dst.size(); ++k) *dst[k].value += w * *src[k];
        }
      }
      if (!std::isfinite(loss)) fail(ErrorKind::kNumerical, "probe loss became non-finite");
      optimizer_step(head_tensors(head), {&hg.weight, &hg.bias}, head_opt, rate);
      if (finetune) optimizer_step(result.encoder.tensors(), eg.const_tensors(), enc_opt, rate);
      result.loss_trace.push_back(loss);
    }
  }

  for (const auto& v : views) result.views[v.name] = evaluate_probe(head, result.encoder, val, v, config.seed);
  return result;
}

ProbeResult probe_segmentation(const EncoderParams2D& encoder, const std::vector<Sample>& train,
                               const std::vector<Sample>& val, const ProbeConfig& config, bool finetune) {
  return run_probe(ProbeTask::kSegmentation, encoder, train, val, config, finetune, {{"delivered", {}, 0}});
}

ProbeResult probe_depth(const EncoderParams2D& encoder, const std::vector<Sample>& train,
                        const std::vector<Sample>& val, const ProbeConfig& config, bool finetune) {
  return run_probe(ProbeTask::kDepth, encoder, train, val, config, finetune, {{"delivered", {}, 0}});
}

// ---------------------------------------------------------------------------
// diagnostics

double matched_feature_distance(const EncoderParams2D& enc2d, const EncoderParams3D& enc3d,
                                const std::vector<Sample>& samples) {
  std::vector<double> loss(samples.size(), std::numeric_limits<double>::quiet_NaN());
  parallel_for(samples.size(), [&](size_t i) {
    const Sample& s = samples[i];
    const CorrespondenceSet corr = match_correspondences(s.points, s.rig);
    if (corr.empty()) return;
    const RowMatrix map = forward_2d(enc2d, s.image_clean, s.height, s.width);
    const MatchedFeatures mf = gather_matched_features(map, s.height, s.width, forward_3d(enc3d, s.points), corr);
    loss[i] = distill_loss(mf.pixel_features, mf.point_features).loss;
  });
  double sum = 0.0;
  int n = 0;
  for (double l : loss) {
    if (std::isnan(l)) continue;
    sum += l;
    ++n;
  }
  if (n == 0) fail(ErrorKind::kPrerequisite, "matched_feature_distance: no sample has correspondences");
  return sum / n;
}

RowMatrix pooled_descriptors(const EncoderParams2D& enc2d, const std::vector<Sample>& samples) {
  RowMatrix out(static_cast<Index>(samples.size()), enc2d.feature_dim());
  parallel_for(samples.size(), [&](size_t i) {
    const Sample& s = samples[i];
    out.row(static_cast<Index>(i)) = l2_normalize_rows(forward_2d(enc2d, s.image, s.height, s.width)).colwise().mean();
  });
  return out;
}

ShiftReport centroid_shift(const RowMatrix& descriptors, const std::vector<Condition>& conditions) {
  if (static_cast<size_t>(descriptors.rows()) != conditions.size()) {
    fail(ErrorKind::kInput, "centroid_shift: one condition per descriptor required");
  }
  ShiftReport r;
  std::map<Condition, Eigen::RowVectorXd> centroid;
  for (Condition c : kAllConditions) {
    Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(descriptors.cols());
    int n = 0;
    for (size_t i = 0; i < conditions.size(); ++i) {
      if (conditions[i] != c) continue;
      sum += descriptors.row(static_cast<Index>(i));
      ++n;
    }
    r.samples[to_string(c)] = n;
    if (n == 0) {
      r.missing.push_back(to_string(c));
      continue;
    }
    centroid[c] = sum / n;
  }
  const auto pair = [&](Condition other, const std::string& key) {
    if (centroid.count(Condition::kDayClear) && centroid.count(other)) {
      r.distance[key] = (centroid[Condition::kDayClear] - centroid[other]).norm();
    }
  };
  pair(Condition::kNight, "clear_night");
  pair(Condition::kDayRain, "clear_rain");
  return r;
}

ShiftReport feature_shift_stats(const EncoderParams2D& enc2d, const std::vector<Sample>& samples) {
  std::vector<Condition> conditions;
  for (const auto& s : samples) conditions.push_back(s.condition);
  return centroid_shift(pooled_descriptors(enc2d, samples), conditions);
}

ShiftComparison compare_shift(const ShiftReport& before, const ShiftReport& after) {
  ShiftComparison c{before, after, {}};
  for (const auto& [k, b] : before.distance) {
    const auto it = after.distance.find(k);
    if (it == after.distance.end() || b <= 0.0) continue;
    c.relative_change[k] = (it->second - b) / b;
  }
  return c;
}

double collapse_from_descriptors(const RowMatrix& descriptors) {
  if (descriptors.rows() == 0 || descriptors.cols() == 0) fail(ErrorKind::kInput, "collapse: no descriptors");
  const Eigen::RowVectorXd mean = descriptors.colwise().mean();
  const RowMatrix centered = descriptors.rowwise() - mean;
  const Eigen::RowVectorXd var = centered.cwiseProduct(centered).colwise().mean();
  return var.cwiseSqrt().mean();
}

double collapse_metric(const EncoderParams2D& enc2d, const std::vector<Sample>& samples) {
  return collapse_from_descriptors(pooled_descriptors(enc2d, samples));
}

RowMatrix render_feature_pca(const RowMatrix& feature_map) {
  if (feature_map.cols() < 3) fail(ErrorKind::kInput, "render_feature_pca needs at least three feature channels");
  if (feature_map.rows() == 0) fail(ErrorKind::kInput, "render_feature_pca: empty map");
  const Eigen::RowVectorXd mean = feature_map.colwise().mean();
  const RowMatrix centered = feature_map.rowwise() - mean;
  const Eigen::MatrixXd cov = centered.transpose() * centered / static_cast<double>(feature_map.rows());
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  const Index d = cov.rows();
  const double top = std::max(eig.eigenvalues()(d - 1), 0.0);
  RowMatrix rgb = RowMatrix::Constant(feature_map.rows(), 3, 0.5);
  for (int ch = 0; ch < 3; ++ch) {
    const Index k = d - 1 - ch;
    const double lambda = eig.eigenvalues()(k);
    if (!(lambda > 1e-12 * top) || top <= 1e-300) continue;
    Eigen::VectorXd v = eig.eigenvectors().col(k);
    Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0) v = -v;
    const Eigen::VectorXd proj = centered * v;
    const double lo = proj.minCoeff();
    const double hi = proj.maxCoeff();
    if (!(hi - lo > 0.0)) continue;
    rgb.col(ch) = (proj.array() - lo) / (hi - lo);
  }
  return rgb;
}

void write_ppm(const fs::path& path, const RowMatrix& rgb, int height, int width) {
  if (rgb.rows() != static_cast<Index>(height) * width || rgb.cols() != 3) {
    fail(ErrorKind::kInput, "write_ppm: image shape mismatch");
  }
  std::ostringstream os;
  os << "P6\n" << width << " " << height << "\n255\n";
  std::string bytes = os.str();
  for (Index i = 0; i < rgb.rows(); ++i) {
    for (int c = 0; c < 3; ++c) {
      const double v = std::clamp(rgb(i, c), 0.0, 1.0);
      bytes.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  }
  write_text(path, bytes);
}

// ---------------------------------------------------------------------------
// reporting

void add_condition_metrics(std::vector<MetricRecord>* out, const std::string& group, const std::string& metric,
                           const ConditionMetrics& m) {
  for (const char* key : kConditionKeys) {
    const auto it = m.value.find(key);
    if (it == m.value.end()) continue;
    out->push_back({group, key, metric, it->second});
    out->push_back({group, key, "samples", static_cast<double>(m.samples.at(key))});
  }
}

void write_metrics(const fs::path& dir, const std::string& run_id, const std::string& config_hash,
                   const std::vector<MetricRecord>& records) {
  nlohmann::ordered_json j;
  j["run_id"] = run_id;
  j["config_hash"] = config_hash;
  nlohmann::ordered_json groups = nlohmann::ordered_json::object();
  std::ostringstream csv;
  csv << "run_id,condition,metric,value\n" << std::setprecision(12);
  for (const auto& r : records) {
    groups[r.group][r.condition][r.metric] = r.value;
    csv << run_id << "," << r.condition << "," << r.group << "/" << r.metric << "," << r.value << "\n";
  }
  j["metrics"] = groups;
  fs::create_directories(dir);
  write_text(dir / "metrics.json", j.dump(2) + "\n");
  write_text(dir / "metrics.csv", csv.str());
}

}  // namespace cdistill
