// SPDX-License-Identifier: Apache-2.0
//
// Loss closures for grad_check over each trainable objective, built on a
// single sample. Shared by the unit tests and the acceptance binary.
#pragma once

#include <memory>
#include <random>
#include <string>
#include <vector>

#include "cdistill/distill.hpp"
#include "cdistill/encoders.hpp"
#include "cdistill/evalsuite.hpp"
#include "cdistill/trainer.hpp"

namespace cdistill::gradcase {

struct Case {
  std::string name;
  std::vector<NamedTensor> params;
  LossClosure loss;
  std::shared_ptr<void> state;  // keeps the perturbed parameters alive
};

inline void copy_out(const std::vector<const RowMatrix*>& from, std::vector<RowMatrix>* to) {
  for (size_t i = 0; i < from.size(); ++i) (*to)[i] = *from[i];
}

inline std::vector<NamedTensor> concat(std::vector<NamedTensor> a, const std::vector<NamedTensor>& b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

inline std::vector<int> pixels_of(const CorrespondenceSet& c, int width) {
  std::vector<int> px(c.count());
  for (size_t i = 0; i < c.count(); ++i) px[i] = c.pixel_index(i, width);
  return px;
}

inline RowMatrix rows_of(const RowMatrix& m, const std::vector<int>& rows) {
  RowMatrix out(static_cast<Index>(rows.size()), m.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = m.row(rows[i]);
  return out;
}

inline RowMatrix scatter(const RowMatrix& g, const std::vector<int>& rows, Index n) {
  RowMatrix out = RowMatrix::Zero(n, g.cols());
  for (size_t i = 0; i < rows.size(); ++i) out.row(rows[i]) += g.row(static_cast<Index>(i));
  return out;
}

/// Stage 1: the 3D encoder and head are the parameters, 2D anchors fixed.
inline Case stage1(const Checkpoint& start, const Sample& s) {
  struct State {
    Checkpoint ckpt;
    Sample sample;
    CorrespondenceSet corr;
    RowMatrix anchors;
  };
  auto st = std::make_shared<State>(State{start, s, match_correspondences(s.points, s.rig), {}});
  st->anchors = rows_of(forward_2d(st->ckpt.encoder_2d, s.image_clean, s.height, s.width), pixels_of(st->corr, s.width));
  Case c{"stage1", st->ckpt.encoder_3d.tensors(), {}, st};
  c.loss = [st](std::vector<RowMatrix>* grads) {
    const Forward3D fwd = forward_3d_cached(st->ckpt.encoder_3d, st->sample.points);
    const StageLoss l = stage_loss(StageId::kStage1, {st->anchors, rows_of(fwd.features, st->corr.point_indices)});
    if (grads) {
      EncoderParams3D g = st->ckpt.encoder_3d.zeros_like();
      backward_3d(st->ckpt.encoder_3d, fwd, scatter(l.point_grad, st->corr.point_indices, fwd.features.rows()), &g);
      copy_out(g.const_tensors(), grads);
    }
    return l.loss;
  };
  return c;
}

/// Stage 2: the 2D encoder on the delivered image, 3D anchors fixed.
inline Case stage2(const Checkpoint& start, const Sample& s) {
  struct State {
    Checkpoint ckpt;
    Sample sample;
    std::vector<int> pixels;
    RowMatrix anchors;
  };
  const CorrespondenceSet corr = match_correspondences(s.points, s.rig);
  auto st = std::make_shared<State>(State{start, s, pixels_of(corr, s.width), {}});
  st->anchors = rows_of(forward_3d(st->ckpt.encoder_3d, s.points), corr.point_indices);
  Case c{"stage2", st->ckpt.encoder_2d.tensors(), {}, st};
  c.loss = [st](std::vector<RowMatrix>* grads) {
    const Sample& smp = st->sample;
    const Upsampler up(smp.height, smp.width, st->ckpt.encoder_2d.patch_size);
    const Forward2D fwd = forward_2d_grid(st->ckpt.encoder_2d, smp.image, smp.height, smp.width);
    const StageLoss l = stage_loss(StageId::kStage2, {up.sample(fwd.grid_features, st->pixels), st->anchors});
    if (grads) {
      RowMatrix grid_grad = RowMatrix::Zero(fwd.grid_features.rows(), fwd.grid_features.cols());
      up.scatter(l.pixel_grad, st->pixels, &grid_grad);
      EncoderParams2D g = st->ckpt.encoder_2d.zeros_like();
      backward_2d(st->ckpt.encoder_2d, fwd, grid_grad, &g);
      copy_out(g.const_tensors(), grads);
    }
    return l.loss;
  };
  return c;
}

/// Probe head plus the encoder it reads, as in fine-tuning.
inline Case probe(ProbeTask task, const EncoderParams2D& encoder, const Sample& s, uint64_t seed) {
  struct State {
    ProbeHead head;
    EncoderParams2D encoder;
    Sample sample;
    std::vector<int> pixels;
    std::vector<int> labels;
    Eigen::VectorXd depths;
  };
  auto st = std::make_shared<State>();
  st->encoder = encoder;
  st->sample = s;
  const int d = encoder.feature_dim();
  const int outputs = task == ProbeTask::kSegmentation ? 7 : 1;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const auto random = [&](Index r, Index c, double scale, double offset) {
    RowMatrix m(r, c);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = offset + scale * u(rng);
    return m;
  };
  st->head.task = task;
  st->head.feature_mean = random(1, d, 0.1, 0.0);
  st->head.feature_scale = random(1, d, 0.3, 1.0);
  st->head.linear = {random(d, outputs, 0.3, 0.0), random(1, outputs, 0.1, 0.0)};
  if (task == ProbeTask::kSegmentation) {
    const std::vector<int> labels = project_labels(s);
    for (size_t p = 0; p < labels.size(); ++p) {
      if (labels[p] >= 0) {
        st->pixels.push_back(static_cast<int>(p));
        st->labels.push_back(labels[p]);
      }
    }
  } else {
    std::vector<double> depth;
    for (Index p = 0; p < s.pixel_depth.size(); p += 3) {
      if (s.depth_valid(p)) {
        st->pixels.push_back(static_cast<int>(p));
        depth.push_back(s.pixel_depth[p]);
      }
    }
    st->depths = Eigen::Map<const Eigen::VectorXd>(depth.data(), static_cast<Index>(depth.size()));
  }
  std::vector<NamedTensor> params{{"head/weight", &st->head.linear.weight}, {"head/bias", &st->head.linear.bias}};
  Case c{task == ProbeTask::kSegmentation ? "probe_cross_entropy" : "probe_mse",
         concat(params, st->encoder.tensors()), {}, st};
  c.loss = [st](std::vector<RowMatrix>* grads) {
    const Sample& smp = st->sample;
    if (!grads) {
      return probe_sample_loss(st->head, st->encoder, smp.image, smp.height, smp.width, st->pixels, st->labels,
                               st->depths, nullptr, nullptr);
    }
    Linear hg{RowMatrix::Zero(st->head.linear.weight.rows(), st->head.linear.weight.cols()),
              RowMatrix::Zero(1, st->head.linear.bias.cols())};
    EncoderParams2D eg = st->encoder.zeros_like();
    const double loss = probe_sample_loss(st->head, st->encoder, smp.image, smp.height, smp.width, st->pixels,
                                          st->labels, st->depths, &hg, &eg);
    (*grads)[0] = hg.weight;
    (*grads)[1] = hg.bias;
    const auto enc = eg.const_tensors();
    for (size_t i = 0; i < enc.size(); ++i) (*grads)[i + 2] = *enc[i];
    return loss;
  };
  return c;
}

}  // namespace cdistill::gradcase
