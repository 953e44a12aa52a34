// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "cdistill/common.hpp"
#include "cdistill/geometry.hpp"

namespace cdistill {

inline constexpr double kNormalizeEps = 1e-8;
/// Smoothing inside the per-pair distance, sqrt(|x|^2 + eps^2).
inline constexpr double kDistanceEps = 1e-12;

Eigen::VectorXd l2_normalize(const Eigen::VectorXd& v, double eps = kNormalizeEps);
RowMatrix l2_normalize_rows(const RowMatrix& m, double eps = kNormalizeEps);

/// Mean over rows of the distance between l2-normalized rows. The anchor is
/// a constant: only `student_grad` is produced.
struct DistillResult {
  double loss = 0.0;
  RowMatrix student_grad;  // d loss / d student (pre-normalization rows)
};

DistillResult distill_loss(const RowMatrix& anchor, const RowMatrix& student);

enum class StageId { kStage1, kStage2 };
std::string to_string(StageId s);

/// Gradients with respect to both sides of the matched pair. In the staged
/// losses the anchor side is exactly zero.
struct StageLoss {
  double loss = 0.0;
  RowMatrix pixel_grad;  // d loss / d G
  RowMatrix point_grad;  // d loss / d F
};

/// stage1: anchor G, student F. stage2: anchor F, student G.
StageLoss stage_loss(StageId stage, const MatchedFeatures& mf);

/// Same objective with no stop-gradient on either side.
StageLoss joint_loss(const MatchedFeatures& mf);

}  // namespace cdistill
