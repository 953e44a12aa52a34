// SPDX-License-Identifier: Apache-2.0
#include <random>

#include <gtest/gtest.h>

#include "cdistill/encoders.hpp"
#include "cdistill/trainer.hpp"
#include "gradcases.hpp"
#include "oracles.hpp"
#include "support.hpp"

namespace cdistill {
namespace {

Encoder2DConfig small_2d() { return {4, 12, 2, 6}; }
Encoder3DConfig small_3d() { return {10, 2, 9, 5, 6}; }

RowMatrix random_image(std::mt19937_64& rng, int h, int w) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RowMatrix img(static_cast<Index>(h) * w, 3);
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = u(rng);
  return img;
}

TEST(Init, DeterministicAndSeedSensitive) {
  const EncoderParams2D a = init_encoder_2d(small_2d(), 3), b = init_encoder_2d(small_2d(), 3);
  EXPECT_EQ(a.hash(), b.hash());
  EXPECT_NE(a.hash(), init_encoder_2d(small_2d(), 4).hash());
  EXPECT_EQ(init_encoder_3d(small_3d(), 3).hash(), init_encoder_3d(small_3d(), 3).hash());
  EXPECT_NE(init_encoder_3d(small_3d(), 3).hash(), init_encoder_3d(small_3d(), 9).hash());
}

TEST(Init, ShapesAndParameterCount) {
  const EncoderParams2D p = init_encoder_2d(small_2d(), 1);
  EXPECT_EQ(p.patch_embed.in_features(), 4 * 4 * 3);
  EXPECT_EQ(p.blocks.size(), 2u);
  EXPECT_EQ(p.feature_dim(), 6);
  Index n = 0;
  for (const RowMatrix* t : p.const_tensors()) n += t->size();
  EXPECT_EQ(p.parameter_count(), n);
  EXPECT_EQ(p.parameter_count(), 48 * 12 + 12 + 2 * (12 * 12 + 12 + 12 * 12 + 12) + 12 * 6 + 6);

  const EncoderParams3D q = init_encoder_3d(small_3d(), 1);
  EXPECT_EQ(q.point_embed.in_features(), 3);
  EXPECT_EQ(q.out_proj.out_features(), 9);
  EXPECT_EQ(q.head.in_features(), 9);
  EXPECT_EQ(q.feature_dim(), 6);
  EXPECT_EQ(q.knn, 5);
}

TEST(Init, RejectsBadConfig) {
  Encoder2DConfig c = small_2d();
  c.patch_size = 0;
  EXPECT_THROW(init_encoder_2d(c, 0), Error);
  Encoder3DConfig d = small_3d();
  d.knn = 0;
  EXPECT_THROW(init_encoder_3d(d, 0), Error);
}

TEST(Forward2D, MatchesLoopReference) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 6; ++trial) {
    const int h = 4 * (2 + trial % 3), w = 4 * (3 + trial % 4);
    const EncoderParams2D p = init_encoder_2d(small_2d(), static_cast<uint64_t>(trial));
    const RowMatrix img = random_image(rng, h, w);
    const RowMatrix got = forward_2d(p, img, h, w);
    const RowMatrix want = oracle::forward_2d(p, img, h, w);
    ASSERT_EQ(got.rows(), want.rows());
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-10) << h << "x" << w;
  }
}

TEST(Forward2D, RejectsIndivisibleImage) {
  const EncoderParams2D p = init_encoder_2d(small_2d(), 0);
  EXPECT_THROW(forward_2d(p, RowMatrix::Zero(10 * 8, 3), 10, 8), Error);
  EXPECT_THROW(forward_2d(p, RowMatrix::Zero(8 * 8, 2), 8, 8), Error);
}

TEST(ExtractPatches, ChannelLastLayout) {
  RowMatrix img(4 * 4, 3);
  for (Index i = 0; i < img.size(); ++i) img.data()[i] = static_cast<double>(i);
  const RowMatrix p = extract_patches(img, 4, 4, 2);
  ASSERT_EQ(p.rows(), 4);
  ASSERT_EQ(p.cols(), 12);
  // patch (0, 1): pixels (0,2) (0,3) (1,2) (1,3)
  EXPECT_EQ(p(1, 0), img(2, 0));
  EXPECT_EQ(p(1, 5), img(3, 2));
  EXPECT_EQ(p(1, 6), img(6, 0));
  EXPECT_EQ(p(1, 11), img(7, 2));
}

TEST(Upsampler, ConstantGridStaysConstant) {
  const Upsampler up(8, 12, 4);
  const RowMatrix grid = RowMatrix::Constant(6, 2, 1.5);
  EXPECT_LT((up.upsample(grid).array() - 1.5).abs().maxCoeff(), 1e-12);
}

TEST(Upsampler, SampleMatchesUpsampleAndScatterIsAdjoint) {
  std::mt19937_64 rng(4);
  const Upsampler up(12, 16, 4);
  const RowMatrix grid = RowMatrix::Random(12, 3);
  const RowMatrix full = up.upsample(grid);
  std::vector<int> pixels{0, 5, 17, 100, 191, 47, 47};
  const RowMatrix s = up.sample(grid, pixels);
  for (size_t i = 0; i < pixels.size(); ++i) {
    EXPECT_LT((s.row(static_cast<Index>(i)) - full.row(pixels[i])).norm(), 1e-12);
  }
  const RowMatrix g = RowMatrix::Random(static_cast<Index>(pixels.size()), 3);
  RowMatrix back = RowMatrix::Zero(12, 3);
  up.scatter(g, pixels, &back);
  // <sample(grid), g> == <grid, scatter(g)>
  EXPECT_NEAR((s.array() * g.array()).sum(), (grid.array() * back.array()).sum(), 1e-10);
}

TEST(Knn, MatchesSortReferenceIncludingTies) {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 40; ++trial) {
    const Points pts = oracle::random_cloud(rng, 3 + trial);
    const int k = 1 + trial % 9;
    const KnnGraph g = knn_graph(pts, k);
    const auto want = oracle::knn(pts, k);
    ASSERT_EQ(g.k, static_cast<int>(want[0].size()));
    for (size_t i = 0; i < want.size(); ++i) {
      for (int m = 0; m < g.k; ++m) EXPECT_EQ(g.neighbors[i * static_cast<size_t>(g.k) + m], want[i][static_cast<size_t>(m)]);
    }
  }
}

TEST(Knn, SinglePointAndEmptyCloud) {
  Points one(1, 3);
  one << 1, 2, 3;
  const KnnGraph g = knn_graph(one, 8);
  EXPECT_EQ(g.k, 1);
  EXPECT_EQ(g.neighbors, std::vector<int>{0});
  EXPECT_TRUE(knn_graph(Points(0, 3), 8).neighbors.empty());
}

TEST(Forward3D, MatchesLoopReference) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 6; ++trial) {
    const EncoderParams3D p = init_encoder_3d(small_3d(), static_cast<uint64_t>(trial));
    const Points pts = oracle::random_cloud(rng, 20 + 7 * trial);
    const RowMatrix got = forward_3d(p, pts);
    const RowMatrix want = oracle::forward_3d(p, pts);
    EXPECT_LT((got - want).cwiseAbs().maxCoeff(), 1e-10);
  }
}

TEST(Forward3D, PermutationEquivariantWithoutTies) {
  std::mt19937_64 rng(2);
  std::normal_distribution<double> n(0.0, 5.0);
  Points pts(30, 3);
  for (Index i = 0; i < pts.size(); ++i) pts.data()[i] = n(rng);
  std::vector<int> perm(30);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Points shuffled(30, 3);
  for (int i = 0; i < 30; ++i) shuffled.row(i) = pts.row(perm[static_cast<size_t>(i)]);
  const EncoderParams3D p = init_encoder_3d(small_3d(), 5);
  const RowMatrix a = forward_3d(p, pts), b = forward_3d(p, shuffled);
  for (int i = 0; i < 30; ++i) EXPECT_LT((b.row(i) - a.row(perm[static_cast<size_t>(i)])).norm(), 1e-12);
}

TEST(Forward3D, RejectsNonFinitePoints) {
  Points pts = Points::Zero(4, 3);
  pts(2, 1) = std::numeric_limits<double>::infinity();
  EXPECT_THROW(forward_3d(init_encoder_3d(small_3d(), 0), pts), Error);
}

TEST(GradCheck, Backward2DOnLinearFunctional) {
  std::mt19937_64 rng(6);
  EncoderParams2D p = init_encoder_2d(small_2d(), 2);
  const RowMatrix img = random_image(rng, 8, 12);
  const RowMatrix weights = RowMatrix::Random(6, 6);
  const auto loss = [&](std::vector<RowMatrix>* grads) {
    const Forward2D f = forward_2d_grid(p, img, 8, 12);
    if (grads) {
      EncoderParams2D g = p.zeros_like();
      backward_2d(p, f, weights, &g);
      gradcase::copy_out(g.const_tensors(), grads);
    }
    return (f.grid_features.array() * weights.array()).sum();
  };
  const GradReport r = grad_check(p.tensors(), loss, 400, 1e-6, 1);
  EXPECT_TRUE(r.pass) << r.max_relative_error;
  for (const auto& g : r.groups) EXPECT_GT(g.probes, 0) << g.name;
}

TEST(GradCheck, Backward3DOnQuadraticFunctional) {
  std::mt19937_64 rng(7);
  EncoderParams3D p = init_encoder_3d(small_3d(), 2);
  const Points pts = oracle::random_cloud(rng, 25);
  const auto loss = [&](std::vector<RowMatrix>* grads) {
    const Forward3D f = forward_3d_cached(p, pts);
    if (grads) {
      EncoderParams3D g = p.zeros_like();
      backward_3d(p, f, f.features, &g);
      gradcase::copy_out(g.const_tensors(), grads);
    }
    return 0.5 * f.features.squaredNorm();
  };
  const GradReport r = grad_check(p.tensors(), loss, 400, 1e-6, 1);
  EXPECT_TRUE(r.pass) << r.max_relative_error;
}

TEST(GradCheck, DetectsWrongGradient) {
  RowMatrix w = RowMatrix::Random(3, 3);
  const auto loss = [&](std::vector<RowMatrix>* grads) {
    if (grads) (*grads)[0] = 3.0 * w;  // true gradient is 2w
    return w.squaredNorm();
  };
  const GradReport r = grad_check({{"w", &w}}, loss, 9, 1e-4);
  EXPECT_FALSE(r.pass);
  EXPECT_NEAR(r.max_relative_error, 1.0 / 3.0, 1e-6);
}

TEST(GradCheck, RestoresParameters) {
  EncoderParams2D p = init_encoder_2d(small_2d(), 2);
  const std::string before = p.hash();
  std::mt19937_64 rng(1);
  const RowMatrix img = random_image(rng, 8, 8);
  grad_check(p.tensors(), [&](std::vector<RowMatrix>*) { return forward_2d(p, img, 8, 8).sum(); }, 50, 1.0);
  EXPECT_EQ(p.hash(), before);
}

class LossGradients : public ::testing::Test {
 protected:
  void SetUp() override {
    ExperimentConfig cfg = test::tiny_experiment_config();
    start_ = init_checkpoint(cfg.run);
    sample_ = make_sample(cfg.dataset, "train_00001", Condition::kNight);
  }
  Checkpoint start_;
  Sample sample_;
};

TEST_F(LossGradients, StageOne) {
  gradcase::Case c = gradcase::stage1(start_, sample_);
  const GradReport r = grad_check(c.params, c.loss, 250, 1e-4, 3);
  EXPECT_TRUE(r.pass) << r.max_relative_error;
}

TEST_F(LossGradients, StageTwo) {
  gradcase::Case c = gradcase::stage2(start_, sample_);
  const GradReport r = grad_check(c.params, c.loss, 250, 1e-4, 3);
  EXPECT_TRUE(r.pass) << r.max_relative_error;
}

TEST_F(LossGradients, ProbeCrossEntropyAndMse) {
  for (ProbeTask t : {ProbeTask::kSegmentation, ProbeTask::kDepth}) {
    gradcase::Case c = gradcase::probe(t, start_.encoder_2d, sample_, 4);
    const GradReport r = grad_check(c.params, c.loss, 250, 1e-4, 3);
    EXPECT_TRUE(r.pass) << c.name << " " << r.max_relative_error;
  }
}

}  // namespace
}  // namespace cdistill
