// SPDX-License-Identifier: Apache-2.0
#include "cdistill/distill.hpp"

#include <algorithm>
#include <cmath>

namespace cdistill {

Eigen::VectorXd l2_normalize(const Eigen::VectorXd& v, double eps) {
  return v / std::max(v.norm(), eps);
}

RowMatrix l2_normalize_rows(const RowMatrix& m, double eps) {
  RowMatrix out(m.rows(), m.cols());
  for (Index i = 0; i < m.rows(); ++i) out.row(i) = m.row(i) / std::max(m.row(i).norm(), eps);
  return out;
}

std::string to_string(StageId s) { return s == StageId::kStage1 ? "stage1" : "stage2"; }

namespace {

struct PairTerms {
  double loss = 0.0;
  RowMatrix grad_a;  // d loss / d a (pre-normalization)
  RowMatrix grad_b;
};

// Backpropagates through v / max(|v|, eps).
Eigen::RowVectorXd normalize_backward(const Eigen::RowVectorXd& v, const Eigen::RowVectorXd& g) {
  const double norm = v.norm();
  if (norm > kNormalizeEps) {
    const Eigen::RowVectorXd unit = v / norm;
    return (g - unit * unit.dot(g)) / norm;
  }
  return g / kNormalizeEps;
}

PairTerms pair_terms(const RowMatrix& a, const RowMatrix& b, bool want_a, bool want_b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) fail(ErrorKind::kInput, "distill_loss: shape mismatch");
  const Index m = a.rows();
  if (m == 0) fail(ErrorKind::kInput, "distill_loss: empty batch");
  if (!a.allFinite() || !b.allFinite()) fail(ErrorKind::kNumerical, "distill_loss: non-finite features");
  PairTerms t;
  if (want_a) t.grad_a = RowMatrix::Zero(m, a.cols());
  if (want_b) t.grad_b = RowMatrix::Zero(m, b.cols());
  const double inv_m = 1.0 / static_cast<double>(m);
  double sum = 0.0;
  for (Index i = 0; i < m; ++i) {
    const Eigen::RowVectorXd ra = a.row(i);
    const Eigen::RowVectorXd rb = b.row(i);
    const Eigen::RowVectorXd na = ra / std::max(ra.norm(), kNormalizeEps);
    const Eigen::RowVectorXd nb = rb / std::max(rb.norm(), kNormalizeEps);
    const Eigen::RowVectorXd diff = na - nb;
    const double dist = std::sqrt(diff.squaredNorm() + kDistanceEps * kDistanceEps);
    sum += dist;
    const Eigen::RowVectorXd d_diff = diff * (inv_m / dist);
    if (want_a) t.grad_a.row(i) = normalize_backward(ra, d_diff);
    if (want_b) t.grad_b.row(i) = normalize_backward(rb, -d_diff);
  }
  t.loss = sum * inv_m;
  return t;
}

}  // namespace

DistillResult distill_loss(const RowMatrix& anchor, const RowMatrix& student) {
  PairTerms t = pair_terms(anchor, student, false, true);
  return {t.loss, std::move(t.grad_b)};
}

StageLoss stage_loss(StageId stage, const MatchedFeatures& mf) {
  mf.validate();
  StageLoss out;
  if (stage == StageId::kStage1) {
    DistillResult r = distill_loss(mf.pixel_features, mf.point_features);
    out.loss = r.loss;
    out.point_grad = std::move(r.student_grad);
    out.pixel_grad = RowMatrix::Zero(mf.pixel_features.rows(), mf.pixel_features.cols());
  } else {
    DistillResult r = distill_loss(mf.point_features, mf.pixel_features);
    out.loss = r.loss;
    out.pixel_grad = std::move(r.student_grad);
    out.point_grad = RowMatrix::Zero(mf.point_features.rows(), mf.point_features.cols());
  }
  return out;
}

StageLoss joint_loss(const MatchedFeatures& mf) {
  mf.validate();
  PairTerms t = pair_terms(mf.pixel_features, mf.point_features, true, true);
  return {t.loss, std::move(t.grad_a), std::move(t.grad_b)};
}

}  // namespace cdistill
