// SPDX-License-Identifier: Apache-2.0
#include "cdistill/encoders.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace cdistill {

void Encoder2DConfig::validate() const {
  if (patch_size < 1 || hidden < 1 || blocks < 0 || feature_dim < 1) {
    fail(ErrorKind::kConfig, "2D encoder sizes must be positive");
  }
}

void Encoder3DConfig::validate() const {
  if (hidden < 1 || blocks < 0 || point_dim < 1 || feature_dim < 1) {
    fail(ErrorKind::kConfig, "3D encoder sizes must be positive");
  }
  if (knn < 1) fail(ErrorKind::kConfig, "knn must be >= 1");
}

namespace {

Linear init_linear(Index in, Index out, uint64_t seed) {
  Rng rng(seed);
  const double fan = static_cast<double>(in);
  std::uniform_real_distribution<double> wdist(-std::sqrt(6.0 / fan), std::sqrt(6.0 / fan));
  std::uniform_real_distribution<double> bdist(-1.0 / std::sqrt(fan), 1.0 / std::sqrt(fan));
  Linear l;
  l.weight.resize(in, out);
  l.bias.resize(1, out);
  for (Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = wdist(rng);
  for (Index i = 0; i < l.bias.size(); ++i) l.bias.data()[i] = bdist(rng);
  return l;
}

Linear zeros_linear(const Linear& l) {
  return {RowMatrix::Zero(l.weight.rows(), l.weight.cols()), RowMatrix::Zero(1, l.bias.cols())};
}

void push_linear(std::vector<NamedTensor>& out, const std::string& name, Linear& l) {
  out.push_back({name + ".weight", &l.weight});
  out.push_back({name + ".bias", &l.bias});
}

// y = x W + b
RowMatrix apply(const Linear& l, const RowMatrix& x) {
  RowMatrix y = x * l.weight;
  y.rowwise() += l.bias.row(0);
  return y;
}

// Accumulates dW, db and returns dx.
RowMatrix apply_backward(const Linear& l, const RowMatrix& x, const RowMatrix& dy, Linear* g) {
  g->weight.noalias() += x.transpose() * dy;
  g->bias.row(0) += dy.colwise().sum();
  return dy * l.weight.transpose();
}

RowMatrix silu_matrix(const RowMatrix& x) { return x.unaryExpr([](double v) { return silu(v); }); }

RowMatrix silu_grad_matrix(const RowMatrix& x) { return x.unaryExpr([](double v) { return silu_grad(v); }); }

std::vector<const RowMatrix*> to_const(std::vector<NamedTensor> named) {
  std::vector<const RowMatrix*> out;
  out.reserve(named.size());
  for (const auto& t : named) out.push_back(t.value);
  return out;
}

Index count_params(const std::vector<const RowMatrix*>& tensors) {
  Index n = 0;
  for (const auto* t : tensors) n += t->size();
  return n;
}

}  // namespace

double silu(double x) { return x / (1.0 + std::exp(-x)); }

double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// ---------------------------------------------------------------------------
// parameter containers

std::vector<NamedTensor> EncoderParams2D::tensors() {
  std::vector<NamedTensor> out;
  push_linear(out, "enc2d.patch_embed", patch_embed);
  for (size_t b = 0; b < blocks.size(); ++b) {
    push_linear(out, "enc2d.block" + std::to_string(b) + ".fc1", blocks[b].fc1);
    push_linear(out, "enc2d.block" + std::to_string(b) + ".fc2", blocks[b].fc2);
  }
  push_linear(out, "enc2d.out_proj", out_proj);
  return out;
}

std::vector<const RowMatrix*> EncoderParams2D::const_tensors() const {
  return to_const(const_cast<EncoderParams2D*>(this)->tensors());
}

Index EncoderParams2D::parameter_count() const { return count_params(const_tensors()); }

EncoderParams2D EncoderParams2D::zeros_like() const {
  EncoderParams2D z;
  z.patch_size = patch_size;
  z.patch_embed = zeros_linear(patch_embed);
  for (const auto& b : blocks) z.blocks.push_back({zeros_linear(b.fc1), zeros_linear(b.fc2)});
  z.out_proj = zeros_linear(out_proj);
  return z;
}

std::string EncoderParams2D::hash() const {
  const auto t = const_tensors();
  return tensor_hash(t);
}

std::vector<NamedTensor> EncoderParams3D::tensors() {
  std::vector<NamedTensor> out;
  push_linear(out, "enc3d.point_embed", point_embed);
  for (size_t b = 0; b < blocks.size(); ++b) {
    push_linear(out, "enc3d.block" + std::to_string(b) + ".fc1", blocks[b].fc1);
    push_linear(out, "enc3d.block" + std::to_string(b) + ".fc2", blocks[b].fc2);
  }
  push_linear(out, "enc3d.out_proj", out_proj);
  push_linear(out, "head3d", head);
  return out;
}

std::vector<const RowMatrix*> EncoderParams3D::const_tensors() const {
  return to_const(const_cast<EncoderParams3D*>(this)->tensors());
}

Index EncoderParams3D::parameter_count() const { return count_params(const_tensors()); }

EncoderParams3D EncoderParams3D::zeros_like() const {
  EncoderParams3D z;
  z.knn = knn;
  z.point_embed = zeros_linear(point_embed);
  for (const auto& b : blocks) z.blocks.push_back({zeros_linear(b.fc1), zeros_linear(b.fc2)});
  z.out_proj = zeros_linear(out_proj);
  z.head = zeros_linear(head);
  return z;
}

std::string EncoderParams3D::hash() const {
  const auto t = const_tensors();
  return tensor_hash(t);
}

EncoderParams2D init_encoder_2d(const Encoder2DConfig& c, uint64_t seed) {
  c.validate();
  EncoderParams2D p;
  p.patch_size = c.patch_size;
  const Index in = static_cast<Index>(c.patch_size) * c.patch_size * 3;
  p.patch_embed = init_linear(in, c.hidden, derive_seed(seed, "enc2d.patch_embed"));
  for (int b = 0; b < c.blocks; ++b) {
    const std::string name = "enc2d.block" + std::to_string(b);
    p.blocks.push_back({init_linear(c.hidden, c.hidden, derive_seed(seed, name + ".fc1")),
                        init_linear(c.hidden, c.hidden, derive_seed(seed, name + ".fc2"))});
  }
  p.out_proj = init_linear(c.hidden, c.feature_dim, derive_seed(seed, "enc2d.out_proj"));
  return p;
}

EncoderParams3D init_encoder_3d(const Encoder3DConfig& c, uint64_t seed) {
  c.validate();
  EncoderParams3D p;
  p.knn = c.knn;
  p.point_embed = init_linear(3, c.hidden, derive_seed(seed, "enc3d.point_embed"));
  for (int b = 0; b < c.blocks; ++b) {
    const std::string name = "enc3d.block" + std::to_string(b);
    p.blocks.push_back({init_linear(c.hidden, c.hidden, derive_seed(seed, name + ".fc1")),
                        init_linear(c.hidden, c.hidden, derive_seed(seed, name + ".fc2"))});
  }
  p.out_proj = init_linear(c.hidden, c.point_dim, derive_seed(seed, "enc3d.out_proj"));
  p.head = init_linear(c.point_dim, c.feature_dim, derive_seed(seed, "head3d"));
  return p;
}

// ---------------------------------------------------------------------------
// 2D encoder

Upsampler::Upsampler(int height, int width, int patch_size) : height_(height), width_(width) {
  if (patch_size < 1 || height % patch_size != 0 || width % patch_size != 0) {
    std::ostringstream os;
    os << "image " << height << "x" << width << " is not divisible by patch size " << patch_size;
    fail(ErrorKind::kConfig, os.str());
  }
  grid_h_ = height / patch_size;
  grid_w_ = width / patch_size;
  auto taps = [patch_size](int n_out, int n_in) {
    std::vector<Tap> t(static_cast<size_t>(n_out));
    for (int o = 0; o < n_out; ++o) {
      const double src = std::max(0.0, (o + 0.5) / patch_size - 0.5);
      const int lo = std::min(static_cast<int>(std::floor(src)), n_in - 1);
      const int hi = std::min(lo + 1, n_in - 1);
      t[static_cast<size_t>(o)] = {lo, hi, hi == lo ? 0.0 : src - lo};
    }
    return t;
  };
  row_taps_ = taps(height, grid_h_);
  col_taps_ = taps(width, grid_w_);
}

RowMatrix Upsampler::upsample(const RowMatrix& grid) const {
  std::vector<int> all(static_cast<size_t>(height_) * width_);
  std::iota(all.begin(), all.end(), 0);
  return sample(grid, all);
}

RowMatrix Upsampler::sample(const RowMatrix& grid, std::span<const int> pixels) const {
  if (grid.rows() != static_cast<Index>(grid_h_) * grid_w_) fail(ErrorKind::kInput, "grid feature shape mismatch");
  RowMatrix out(static_cast<Index>(pixels.size()), grid.cols());
  for (size_t i = 0; i < pixels.size(); ++i) {
    const Tap& ry = row_taps_[static_cast<size_t>(pixels[i] / width_)];
    const Tap& rx = col_taps_[static_cast<size_t>(pixels[i] % width_)];
    const double w00 = (1.0 - ry.w_hi) * (1.0 - rx.w_hi);
    const double w01 = (1.0 - ry.w_hi) * rx.w_hi;
    const double w10 = ry.w_hi * (1.0 - rx.w_hi);
    const double w11 = ry.w_hi * rx.w_hi;
    out.row(static_cast<Index>(i)) = w00 * grid.row(ry.lo * grid_w_ + rx.lo) + w01 * grid.row(ry.lo * grid_w_ + rx.hi) +
                                     w10 * grid.row(ry.hi * grid_w_ + rx.lo) + w11 * grid.row(ry.hi * grid_w_ + rx.hi);
  }
  return out;
}

void Upsampler::scatter(const RowMatrix& pixel_grads, std::span<const int> pixels, RowMatrix* grid_grads) const {
  for (size_t i = 0; i < pixels.size(); ++i) {
    const Tap& ry = row_taps_[static_cast<size_t>(pixels[i] / width_)];
    const Tap& rx = col_taps_[static_cast<size_t>(pixels[i] % width_)];
    const auto g = pixel_grads.row(static_cast<Index>(i));
    grid_grads->row(ry.lo * grid_w_ + rx.lo) += (1.0 - ry.w_hi) * (1.0 - rx.w_hi) * g;
    grid_grads->row(ry.lo * grid_w_ + rx.hi) += (1.0 - ry.w_hi) * rx.w_hi * g;
    grid_grads->row(ry.hi * grid_w_ + rx.lo) += ry.w_hi * (1.0 - rx.w_hi) * g;
    grid_grads->row(ry.hi * grid_w_ + rx.hi) += ry.w_hi * rx.w_hi * g;
  }
}

RowMatrix extract_patches(const RowMatrix& image, int height, int width, int ps) {
  if (image.rows() != static_cast<Index>(height) * width || image.cols() != 3) {
    fail(ErrorKind::kInput, "image shape mismatch");
  }
  if (ps < 1 || height % ps != 0 || width % ps != 0) {
    fail(ErrorKind::kConfig, "image size is not divisible by the patch size");
  }
  const int gh = height / ps;
  const int gw = width / ps;
  RowMatrix patches(static_cast<Index>(gh) * gw, static_cast<Index>(ps) * ps * 3);
  for (int pr = 0; pr < gh; ++pr) {
    for (int pc = 0; pc < gw; ++pc) {
      const Index row = static_cast<Index>(pr) * gw + pc;
      Index k = 0;
      for (int dy = 0; dy < ps; ++dy) {
        for (int dx = 0; dx < ps; ++dx) {
          const Index px = static_cast<Index>(pr * ps + dy) * width + (pc * ps + dx);
          for (int ch = 0; ch < 3; ++ch) patches(row, k++) = image(px, ch);
        }
      }
    }
  }
  return patches;
}

Forward2D forward_2d_grid(const EncoderParams2D& params, const RowMatrix& image, int height, int width) {
  Forward2D f;
  f.patches = extract_patches(image, height, width, params.patch_size).array() - kPixelCentre;
  f.grid_h = height / params.patch_size;
  f.grid_w = width / params.patch_size;
  f.states.push_back(apply(params.patch_embed, f.patches));
  for (const auto& block : params.blocks) {
    const RowMatrix& h = f.states.back();
    f.pre.push_back(apply(block.fc1, h));
    f.act.push_back(silu_matrix(f.pre.back()));
    f.states.push_back(h + apply(block.fc2, f.act.back()));
  }
  f.grid_features = apply(params.out_proj, f.states.back());
  return f;
}

RowMatrix forward_2d(const EncoderParams2D& params, const RowMatrix& image, int height, int width) {
  const Upsampler up(height, width, params.patch_size);
  return up.upsample(forward_2d_grid(params, image, height, width).grid_features);
}

void backward_2d(const EncoderParams2D& params, const Forward2D& f, const RowMatrix& grid_grad,
                 EncoderParams2D* grads) {
  RowMatrix dh = apply_backward(params.out_proj, f.states.back(), grid_grad, &grads->out_proj);
  for (size_t b = params.blocks.size(); b-- > 0;) {
    const auto& block = params.blocks[b];
    const RowMatrix ds = apply_backward(block.fc2, f.act[b], dh, &grads->blocks[b].fc2);
    const RowMatrix dz = ds.cwiseProduct(silu_grad_matrix(f.pre[b]));
    dh += apply_backward(block.fc1, f.states[b], dz, &grads->blocks[b].fc1);
  }
  apply_backward(params.patch_embed, f.patches, dh, &grads->patch_embed);
}

// ---------------------------------------------------------------------------
// 3D encoder

KnnGraph knn_graph(const Points& points, int k) {
  const Index n = points.rows();
  KnnGraph g;
  g.k = static_cast<int>(std::min<Index>(k, n));
  g.neighbors.resize(static_cast<size_t>(n * g.k));
  std::vector<std::pair<double, int>> dist(static_cast<size_t>(n));
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) {
      dist[static_cast<size_t>(j)] = {(points.row(i) - points.row(j)).squaredNorm(), static_cast<int>(j)};
    }
    std::partial_sort(dist.begin(), dist.begin() + g.k, dist.end());
    for (int m = 0; m < g.k; ++m) g.neighbors[static_cast<size_t>(i * g.k + m)] = dist[static_cast<size_t>(m)].second;
  }
  return g;
}

namespace {

RowMatrix aggregate(const KnnGraph& g, const RowMatrix& h) {
  RowMatrix a = RowMatrix::Zero(h.rows(), h.cols());
  const double inv_k = 1.0 / g.k;
  for (Index i = 0; i < h.rows(); ++i) {
    for (int m = 0; m < g.k; ++m) a.row(i) += h.row(g.neighbors[static_cast<size_t>(i * g.k + m)]);
    a.row(i) *= inv_k;
  }
  return a;
}

RowMatrix aggregate_backward(const KnnGraph& g, const RowMatrix& da) {
  RowMatrix dh = RowMatrix::Zero(da.rows(), da.cols());
  const double inv_k = 1.0 / g.k;
  for (Index i = 0; i < da.rows(); ++i) {
    for (int m = 0; m < g.k; ++m) dh.row(g.neighbors[static_cast<size_t>(i * g.k + m)]) += inv_k * da.row(i);
  }
  return dh;
}

}  // namespace

Forward3D forward_3d_cached(const EncoderParams3D& params, const Points& points) {
  if (points.rows() < 1) fail(ErrorKind::kInput, "3D encoder needs at least one point");
  if (!points.allFinite()) fail(ErrorKind::kInput, "point cloud contains non-finite coordinates");
  Forward3D f;
  f.graph = knn_graph(points, params.knn);
  f.input = points * kPointScale;
  f.states.push_back(apply(params.point_embed, f.input));
  for (const auto& block : params.blocks) {
    f.aggregated.push_back(aggregate(f.graph, f.states.back()));
    const RowMatrix& a = f.aggregated.back();
    f.pre.push_back(apply(block.fc1, a));
    f.act.push_back(silu_matrix(f.pre.back()));
    f.states.push_back(a + apply(block.fc2, f.act.back()));
  }
  f.point_features = apply(params.out_proj, f.states.back());
  f.features = apply(params.head, f.point_features);
  return f;
}

RowMatrix forward_3d(const EncoderParams3D& params, const Points& points) {
  return forward_3d_cached(params, points).features;
}

void backward_3d(const EncoderParams3D& params, const Forward3D& f, const RowMatrix& feature_grad,
                 EncoderParams3D* grads) {
  const RowMatrix dp = apply_backward(params.head, f.point_features, feature_grad, &grads->head);
  RowMatrix dh = apply_backward(params.out_proj, f.states.back(), dp, &grads->out_proj);
  for (size_t b = params.blocks.size(); b-- > 0;) {
    const auto& block = params.blocks[b];
    const RowMatrix ds = apply_backward(block.fc2, f.act[b], dh, &grads->blocks[b].fc2);
    const RowMatrix dz = ds.cwiseProduct(silu_grad_matrix(f.pre[b]));
    const RowMatrix da = dh + apply_backward(block.fc1, f.aggregated[b], dz, &grads->blocks[b].fc1);
    dh = aggregate_backward(f.graph, da);
  }
  apply_backward(params.point_embed, f.input, dh, &grads->point_embed);
}

// ---------------------------------------------------------------------------
// gradient check

GradReport grad_check(const std::vector<NamedTensor>& params, const LossClosure& loss, int probe_count,
                      double tolerance, uint64_t seed) {
  GradReport report;
  report.tolerance = tolerance;
  std::vector<RowMatrix> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) analytic.push_back(RowMatrix::Zero(p.value->rows(), p.value->cols()));
  const double base = loss(&analytic);
  if (!std::isfinite(base)) fail(ErrorKind::kNumerical, "grad_check: loss is not finite");

  Index total = 0;
  for (const auto& p : params) total += p.value->size();

  // (group, coordinate) probes
  std::vector<std::pair<size_t, Index>> probes;
  if (probe_count >= total) {
    for (size_t g = 0; g < params.size(); ++g)
      for (Index i = 0; i < params[g].value->size(); ++i) probes.emplace_back(g, i);
  } else {
    Rng rng(derive_seed(seed, "grad_check"));
    std::vector<std::vector<Index>> pools(params.size());
    for (size_t g = 0; g < params.size(); ++g) {
      pools[g].resize(static_cast<size_t>(params[g].value->size()));
      std::iota(pools[g].begin(), pools[g].end(), 0);
      std::shuffle(pools[g].begin(), pools[g].end(), rng);
    }
    std::vector<size_t> cursor(params.size(), 0);
    while (static_cast<int>(probes.size()) < probe_count) {
      for (size_t g = 0; g < params.size() && static_cast<int>(probes.size()) < probe_count; ++g) {
        if (cursor[g] < pools[g].size()) probes.emplace_back(g, pools[g][cursor[g]++]);
      }
    }
  }

  report.groups.resize(params.size());
  for (size_t g = 0; g < params.size(); ++g) report.groups[g].name = params[g].name;
  for (const auto& [g, i] : probes) {
    double& x = params[g].value->data()[i];
    const double saved = x;
    x = saved + kGradCheckStep;
    const double up = loss(nullptr);
    x = saved - kGradCheckStep;
    const double down = loss(nullptr);
    x = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) fail(ErrorKind::kNumerical, "grad_check: loss is not finite");
    const double numeric = (up - down) / (2.0 * kGradCheckStep);
    const double a = analytic[g].data()[i];
    const double err = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
    auto& ge = report.groups[g];
    ge.max_relative_error = std::max(ge.max_relative_error, err);
    ++ge.probes;
    report.max_relative_error = std::max(report.max_relative_error, err);
  }
  report.pass = report.max_relative_error <= tolerance;
  return report;
}

}  // namespace cdistill
