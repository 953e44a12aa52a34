// SPDX-License-Identifier: Apache-2.0
//
// Small differentiable feature extractors.
//
// The 2D encoder splits the image into non-overlapping patches, embeds each
// patch with a linear map, refines it with residual MLP blocks and projects to
// the distillation width D. Patch features are bilinearly upsampled
// (half-pixel centres, edge clamped) to one feature per pixel.
//
// The 3D encoder embeds raw xyz, mixes each point with the mean of its k
// nearest neighbours (itself included) before every residual MLP block, then
// projects to D3 and through the linear head to D.
//
// Backward passes are written by hand; grad_check compares them against
// central differences.
#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cdistill/common.hpp"

namespace cdistill {

struct Linear {
  RowMatrix weight;  // in x out
  RowMatrix bias;    // 1 x out

  Index in_features() const { return weight.rows(); }
  Index out_features() const { return weight.cols(); }
};

struct ResidualBlock {
  Linear fc1;
  Linear fc2;
};

struct NamedTensor {
  std::string name;
  RowMatrix* value;
};

struct Encoder2DConfig {
  int patch_size = 8;
  int hidden = 64;
  int blocks = 2;
  int feature_dim = 32;

  void validate() const;
};

struct Encoder3DConfig {
  int hidden = 64;
  int blocks = 2;
  int point_dim = 48;  // D3, before the head
  int knn = 8;
  int feature_dim = 32;

  void validate() const;
};

struct EncoderParams2D {
  int patch_size = 8;
  Linear patch_embed;
  std::vector<ResidualBlock> blocks;
  Linear out_proj;

  int feature_dim() const { return static_cast<int>(out_proj.out_features()); }
  /// Parameter tensors in checkpoint order.
  std::vector<NamedTensor> tensors();
  std::vector<const RowMatrix*> const_tensors() const;
  Index parameter_count() const;
  EncoderParams2D zeros_like() const;
  std::string hash() const;
};

struct EncoderParams3D {
  int knn = 8;
  Linear point_embed;
  std::vector<ResidualBlock> blocks;
  Linear out_proj;
  Linear head;

  int feature_dim() const { return static_cast<int>(head.out_features()); }
  std::vector<NamedTensor> tensors();
  std::vector<const RowMatrix*> const_tensors() const;
  Index parameter_count() const;
  EncoderParams3D zeros_like() const;
  std::string hash() const;
};

EncoderParams2D init_encoder_2d(const Encoder2DConfig& config, uint64_t seed);
EncoderParams3D init_encoder_3d(const Encoder3DConfig& config, uint64_t seed);

double silu(double x);
double silu_grad(double x);

// ---------------------------------------------------------------------------
// 2D

/// Bilinear weights mapping a (grid_h x grid_w) patch grid to (height x width)
/// pixels. Separable: each pixel reads two rows and two columns.
class Upsampler {
 public:
  Upsampler(int height, int width, int patch_size);

  int height() const { return height_; }
  int width() const { return width_; }
  int grid_height() const { return grid_h_; }
  int grid_width() const { return grid_w_; }

  RowMatrix upsample(const RowMatrix& grid_features) const;
  RowMatrix sample(const RowMatrix& grid_features, std::span<const int> pixels) const;
  /// Adds the transpose of sample() applied to pixel_grads into grid_grads.
  void scatter(const RowMatrix& pixel_grads, std::span<const int> pixels, RowMatrix* grid_grads) const;

 private:
  struct Tap {
    int lo;
    int hi;
    double w_hi;
  };
  int height_, width_, grid_h_, grid_w_;
  std::vector<Tap> row_taps_;
  std::vector<Tap> col_taps_;
};

struct Forward2D {
  int grid_h = 0;
  int grid_w = 0;
  RowMatrix patches;                 // P x (ps*ps*3)
  std::vector<RowMatrix> states;     // residual stream before each block, then after the last
  std::vector<RowMatrix> pre;        // fc1 outputs per block
  std::vector<RowMatrix> act;        // silu(pre)
  RowMatrix grid_features;           // P x D
};

/// Subtracted from every pixel value before the patch embedding.
inline constexpr double kPixelCentre = 0.5;

/// Row-major (patch_row, patch_col) patches, channel-last pixel order within a patch.
RowMatrix extract_patches(const RowMatrix& image, int height, int width, int patch_size);

Forward2D forward_2d_grid(const EncoderParams2D& params, const RowMatrix& image, int height, int width);
/// Full-resolution feature map, (height * width) x D.
RowMatrix forward_2d(const EncoderParams2D& params, const RowMatrix& image, int height, int width);
/// Accumulates parameter gradients given d(loss)/d(grid_features).
void backward_2d(const EncoderParams2D& params, const Forward2D& fwd, const RowMatrix& grid_grad,
                 EncoderParams2D* grads);

// ---------------------------------------------------------------------------
// 3D

/// k nearest neighbours (including the point itself), ties broken by index.
/// Row-major N x k_eff with k_eff = min(k, N).
struct KnnGraph {
  int k = 0;
  std::vector<int> neighbors;
};

KnnGraph knn_graph(const Points& points, int k);

/// Coordinates are multiplied by this (metres to tens of metres) before the
/// point embedding.
inline constexpr double kPointScale = 0.1;

struct Forward3D {
  KnnGraph graph;
  RowMatrix input;
  std::vector<RowMatrix> states;      // embed output, then each block output
  std::vector<RowMatrix> aggregated;  // neighbourhood means per block
  std::vector<RowMatrix> pre;
  std::vector<RowMatrix> act;
  RowMatrix point_features;           // N x D3 (before head)
  RowMatrix features;                 // N x D
};

Forward3D forward_3d_cached(const EncoderParams3D& params, const Points& points);
RowMatrix forward_3d(const EncoderParams3D& params, const Points& points);
void backward_3d(const EncoderParams3D& params, const Forward3D& fwd, const RowMatrix& feature_grad,
                 EncoderParams3D* grads);

// ---------------------------------------------------------------------------
// gradient checking

struct GroupError {
  std::string name;
  double max_relative_error = 0.0;
  int probes = 0;
};

struct GradReport {
  std::vector<GroupError> groups;
  double tolerance = 0.0;
  double max_relative_error = 0.0;
  bool pass = false;
};

/// Evaluates the loss at the current parameter values. When `grads` is
/// non-null it receives the analytic gradient, one matrix per parameter in
/// the same order and shape.
using LossClosure = std::function<double(std::vector<RowMatrix>* grads)>;

/// Relative error |a - n| / max(|a|, |n|, kGradCheckFloor).
inline constexpr double kGradCheckFloor = 1e-6;
inline constexpr double kGradCheckStep = 1e-5;

/// Probes `probe_count` coordinates (all of them if there are fewer), spread
/// round-robin across parameter groups. Parameters are restored afterwards.
GradReport grad_check(const std::vector<NamedTensor>& params, const LossClosure& loss, int probe_count,
                      double tolerance, uint64_t seed = 0);

}  // namespace cdistill
