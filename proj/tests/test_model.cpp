// Model module tests: patch embedding and positional tables, token masking,
// masked reconstruction, the pose heatmap decoder and regression heads,
// dual-stream fusion, and checkpoint round trips. Everything runs on a tiny
// configuration except the pure-arithmetic full-size token accounting.

#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <queue>
#include <set>
#include <vector>

#include <json.hpp>
#include <rvp/model.hpp>

#include "testutil.hpp"

using rvp::MaePose;
using rvp::MaskPlan;
using rvp::ModelConfig;
using rvp::Tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.t_in = 4;
  c.img_h = 32;
  c.img_w = 32;
  c.patch_t = 2;
  c.patch_hw = 16;
  c.embed_dim = 12;
  c.encoder_depth = 2;
  c.encoder_heads = 2;
  c.recon_dim = 18;
  c.recon_depth = 1;
  c.recon_heads = 3;
  c.mask_ratio = 0.5;
  c.joints = 13;
  c.heatmap_size = 8;
  c.pose_channels = {6, 5, 4};
  c.heatmap_sigma = 1.0;
  return c;
}

Tensor random_clip(const ModelConfig& c, uint64_t seed, int64_t batch = 0) {
  rvp::Rng rng(seed);
  if (batch == 0) return Tensor::randn({c.t_in, c.img_h, c.img_w}, rng);
  return Tensor::randn({batch, 1, c.t_in, c.img_h, c.img_w}, rng);
}

// Mutable view of a named parameter (Tensor copies alias their storage).
Tensor param(MaePose& m, const std::string& name) {
  for (auto& e : m.params().entries())
    if (e.name == name) return e.value;
  ADD_FAILURE() << "missing param " << name;
  return Tensor();
}

void fill(Tensor t, float v) {
  for (int64_t i = 0; i < t.numel(); ++i) t.data()[i] = v;
}

bool all_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int64_t i = 0; i < a.numel(); ++i)
    if (a.data()[i] != b.data()[i]) return false;
  return true;
}

bool grad_finite_and_nonzero(const Tensor& t) {
  if (!t.has_grad()) return false;
  const Tensor g_t = t.grad();
  bool any = false;
  for (int64_t i = 0; i < t.numel(); ++i) {
    const float g = g_t.data()[i];
    if (!std::isfinite(g)) return false;
    if (g != 0.0f) any = true;
  }
  return any;
}

}  // namespace

TEST(ModelConfig, ValidatesAndRoundTripsThroughJson) {
  ModelConfig c = tiny_config();
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(c.grid_t(), 2);
  EXPECT_EQ(c.n_tokens(), 8);
  EXPECT_EQ(c.out_frames(), 1);
  EXPECT_EQ(c.patch_pixels(), 512);

  nlohmann::json j = c;
  ModelConfig back = j.get<ModelConfig>();
  EXPECT_EQ(back.t_in, c.t_in);
  EXPECT_EQ(back.embed_dim, c.embed_dim);
  EXPECT_EQ(back.pose_channels, c.pose_channels);
  EXPECT_EQ(back.per_patch_norm, c.per_patch_norm);
  EXPECT_DOUBLE_EQ(back.mask_ratio, c.mask_ratio);

  ModelConfig bad = c;
  bad.t_in = 5;
  EXPECT_THROW(bad.validate(), rvp::config_error);
  bad = c;
  bad.img_w = 33;
  EXPECT_THROW(bad.validate(), rvp::config_error);
  bad = c;
  bad.mask_ratio = 1.0;
  EXPECT_THROW(bad.validate(), rvp::config_error);
  bad = c;
  bad.encoder_heads = 5;
  EXPECT_THROW(bad.validate(), rvp::config_error);
  bad = c;
  bad.heatmap_size = 16;
  EXPECT_THROW(bad.validate(), rvp::config_error);
  bad = c;
  bad.t_in = 2;  // grid_t would be 1, breaking the temporal pair pooling
  EXPECT_THROW(bad.validate(), rvp::config_error);
}

TEST(ModelConfig, FullSizeTokenArithmetic) {
  ModelConfig c;  // defaults are the full-size model
  c.validate();
  EXPECT_EQ(c.grid_t(), 10);
  EXPECT_EQ(c.grid_h(), 14);
  EXPECT_EQ(c.grid_w(), 14);
  EXPECT_EQ(c.n_tokens(), 1960);
  EXPECT_EQ(c.out_frames(), 5);
  EXPECT_EQ(c.heatmap_size, 56);
}

TEST(Mask, FullSizeCountsAndDeterminism) {
  MaskPlan p = rvp::sample_mask(1960, 0.9, 1234);
  EXPECT_EQ(p.masked.size(), 1764u);
  EXPECT_EQ(p.visible.size(), 196u);
  EXPECT_TRUE(std::is_sorted(p.masked.begin(), p.masked.end()));
  EXPECT_TRUE(std::is_sorted(p.visible.begin(), p.visible.end()));

  std::set<int64_t> all(p.masked.begin(), p.masked.end());
  all.insert(p.visible.begin(), p.visible.end());
  EXPECT_EQ(all.size(), 1960u);
  EXPECT_EQ(*all.begin(), 0);
  EXPECT_EQ(*all.rbegin(), 1959);

  MaskPlan q = rvp::sample_mask(1960, 0.9, 1234);
  EXPECT_EQ(p.masked, q.masked);
  EXPECT_EQ(p.visible, q.visible);

  MaskPlan r = rvp::sample_mask(1960, 0.9, 1235);
  EXPECT_NE(p.masked, r.masked);
}

TEST(Mask, RejectsDegenerateRatios) {
  EXPECT_THROW(rvp::sample_mask(8, 0.05, 1), rvp::config_error);
  EXPECT_THROW(rvp::sample_mask(8, 0.97, 1), rvp::config_error);
  EXPECT_THROW(rvp::sample_mask(0, 0.5, 1), rvp::config_error);
  MaskPlan p = rvp::sample_mask(8, 0.5, 1);
  EXPECT_EQ(p.masked.size(), 4u);
}

TEST(PosEmbed, ZeroClipYieldsExactlyThePositionTable) {
  MaePose m(tiny_config(), 3);
  Tensor clip = Tensor::zeros({4, 32, 32});
  Tensor tok = m.embed_patches(clip);
  ASSERT_EQ(tok.ndim(), 3);
  EXPECT_EQ(tok.dim(0), 1);
  EXPECT_EQ(tok.dim(1), 8);
  EXPECT_EQ(tok.dim(2), 12);
  const Tensor& pos = m.pos_embed();
  for (int64_t i = 0; i < pos.numel(); ++i)
    EXPECT_EQ(tok.data()[i], pos.data()[i]) << "token channel " << i;
}

TEST(PosEmbed, SeparableTableStructure) {
  // dim 20 is not divisible by 6: each axis gets 2*(20/6) = 6 channels and
  // the last two channels stay zero everywhere.
  Tensor pos = rvp::build_pos_embed_3d(2, 3, 4, 20);
  ASSERT_EQ(pos.dim(0), 24);
  ASSERT_EQ(pos.dim(1), 20);
  for (int64_t n = 0; n < 24; ++n) {
    EXPECT_EQ(pos.data()[n * 20 + 18], 0.0f);
    EXPECT_EQ(pos.data()[n * 20 + 19], 0.0f);
  }
  // Position 0 on every axis: sin(0) = 0, cos(0) = 1, interleaved.
  for (int64_t a = 0; a < 3; ++a)
    for (int64_t i = 0; i < 3; ++i) {
      EXPECT_EQ(pos.data()[a * 6 + 2 * i], 0.0f);
      EXPECT_EQ(pos.data()[a * 6 + 2 * i + 1], 1.0f);
    }
  // Tokens sharing a w coordinate share the w block; different w differs.
  auto row = [&](int64_t t, int64_t h, int64_t w) {
    return pos.data() + ((t * 3 + h) * 4 + w) * 20;
  };
  for (int64_t i = 0; i < 6; ++i) {
    EXPECT_EQ(row(0, 1, 2)[12 + i], row(1, 2, 2)[12 + i]);
    EXPECT_EQ(row(0, 1, 2)[i], row(0, 2, 3)[i]);
  }
  bool w_differs = false;
  for (int64_t i = 0; i < 6 && !w_differs; ++i)
    w_differs = row(0, 0, 1)[12 + i] != row(0, 0, 2)[12 + i];
  EXPECT_TRUE(w_differs);
  // First sin channel is sin(p) at unit frequency.
  EXPECT_NEAR(row(0, 0, 3)[12], std::sin(3.0), 1e-6);
  EXPECT_NEAR(row(1, 0, 0)[0], std::sin(1.0), 1e-6);
}

TEST(Embed, AcceptsSingleClipAndBatchedForms) {
  ModelConfig c = tiny_config();
  MaePose m(c, 5);
  Tensor single = random_clip(c, 11);
  Tensor tok1 = m.embed_patches(single);
  EXPECT_EQ(tok1.dim(0), 1);

  Tensor batch = random_clip(c, 12, 2);
  Tensor tok2 = m.embed_patches(batch);
  EXPECT_EQ(tok2.dim(0), 2);
  EXPECT_EQ(tok2.dim(1), 8);
  EXPECT_EQ(tok2.dim(2), 12);

  Tensor wrong = Tensor::zeros({4, 32, 16});
  EXPECT_THROW(m.embed_patches(wrong), rvp::dimension_error);
}

TEST(Encode, MaskPlanSelectsVisibleTokensOnly) {
  ModelConfig c = tiny_config();
  MaePose m(c, 5);
  Tensor tok = m.embed_patches(random_clip(c, 21));
  MaskPlan plan = rvp::sample_mask(c.n_tokens(), c.mask_ratio, 7);

  Tensor vis_feat = m.encode(tok, &plan);
  EXPECT_EQ(vis_feat.dim(1), int64_t(plan.visible.size()));

  Tensor full_feat = m.encode(tok);
  EXPECT_EQ(full_feat.dim(1), c.n_tokens());

  MaskPlan wrong = rvp::sample_mask(16, 0.5, 7);
  EXPECT_THROW(m.encode(tok, &wrong), rvp::dimension_error);
  Tensor bad = Tensor::zeros({1, 8, 13});
  EXPECT_THROW(m.encode(bad), rvp::dimension_error);
}

TEST(Reconstruct, ShapesAndMaskTokenGradient) {
  ModelConfig c = tiny_config();
  MaePose m(c, 9);
  Tensor clip = random_clip(c, 31);
  MaskPlan plan = rvp::sample_mask(c.n_tokens(), c.mask_ratio, 8);
  Tensor feat = m.encode(m.embed_patches(clip), &plan);
  Tensor pred = m.reconstruct(feat, plan);
  ASSERT_EQ(pred.ndim(), 3);
  EXPECT_EQ(pred.dim(0), 1);
  EXPECT_EQ(pred.dim(1), int64_t(plan.masked.size()));
  EXPECT_EQ(pred.dim(2), c.patch_pixels());

  Tensor loss = m.recon_loss(pred, clip, plan);
  loss.backward();
  EXPECT_TRUE(grad_finite_and_nonzero(param(m, "rec.token")));
  EXPECT_TRUE(grad_finite_and_nonzero(param(m, "patch.w")));
  EXPECT_TRUE(grad_finite_and_nonzero(param(m, "enc.0.wq")));
}

TEST(Reconstruct, ZeroHeadPredictsZeroEverywhere) {
  ModelConfig c = tiny_config();
  MaePose m(c, 9);
  fill(param(m, "rec.head.w"), 0.0f);
  fill(param(m, "rec.head.b"), 0.0f);
  MaskPlan plan = rvp::sample_mask(c.n_tokens(), c.mask_ratio, 8);
  Tensor feat = m.encode(m.embed_patches(random_clip(c, 31)), &plan);
  Tensor pred = m.reconstruct(feat, plan);
  for (int64_t i = 0; i < pred.numel(); ++i) EXPECT_EQ(pred.data()[i], 0.0f);
}

TEST(ReconLoss, IgnoresVisiblePatchPixelsExactly) {
  ModelConfig c = tiny_config();
  MaePose m(c, 13);
  MaskPlan plan = rvp::sample_mask(c.n_tokens(), c.mask_ratio, 17);

  Tensor clip = random_clip(c, 41);
  Tensor feat = m.encode(m.embed_patches(clip), &plan);
  Tensor pred = m.reconstruct(feat, plan).detach();
  const float base = m.recon_loss(pred, clip, plan).data()[0];

  // Overwrite every pixel belonging to a visible patch.
  Tensor poked = Tensor::zeros(clip.shape());
  std::copy(clip.data(), clip.data() + clip.numel(), poked.data());
  const int64_t gh = c.grid_h(), gw = c.grid_w();
  for (int64_t n : plan.visible) {
    const int64_t t = n / (gh * gw), h = (n / gw) % gh, w = n % gw;
    for (int64_t a = 0; a < c.patch_t; ++a)
      for (int64_t i = 0; i < c.patch_hw; ++i)
        for (int64_t j = 0; j < c.patch_hw; ++j)
          poked.data()[(t * c.patch_t + a) * c.img_h * c.img_w +
                       (h * c.patch_hw + i) * c.img_w + (w * c.patch_hw + j)] =
              999.0f;
  }
  EXPECT_FALSE(all_equal(clip, poked));
  const float after = m.recon_loss(pred, poked, plan).data()[0];
  EXPECT_EQ(base, after);

  // Sanity: poking one masked pixel does change the loss.
  const int64_t n0 = plan.masked[0];
  const int64_t t0 = n0 / (gh * gw), h0 = (n0 / gw) % gh, w0 = n0 % gw;
  poked.data()[t0 * c.patch_t * c.img_h * c.img_w +
               h0 * c.patch_hw * c.img_w + w0 * c.patch_hw] = 999.0f;
  EXPECT_NE(base, m.recon_loss(pred, poked, plan).data()[0]);
}

TEST(ReconLoss, ConstantOffsetGivesItsSquare) {
  ModelConfig c = tiny_config();
  MaePose m(c, 13);
  MaskPlan plan = rvp::sample_mask(c.n_tokens(), c.mask_ratio, 17);

  // Pixels on the 1/64 grid keep target+0.125 exactly representable, so the
  // squared error is exact in f32.
  Tensor clip = Tensor::zeros({c.t_in, c.img_h, c.img_w});
  for (int64_t i = 0; i < clip.numel(); ++i)
    clip.data()[i] = float((i * 7) % 33) / 64.0f;

  Tensor target = rvp::index_select(m.patchify(clip), 1, plan.masked);
  Tensor pred = rvp::add_scalar(target, 0.125f);
  EXPECT_FLOAT_EQ(m.recon_loss(pred, clip, plan).data()[0], 0.015625f);

  Tensor pred2 = rvp::add_scalar(target, 0.1f);
  EXPECT_NEAR(m.recon_loss(pred2, clip, plan).data()[0], 0.01, 1e-6);
}

TEST(ReconLoss, PerPatchNormZeroCentersTargets) {
  ModelConfig c = tiny_config();
  c.per_patch_norm = true;
  MaePose m(c, 13);
  MaskPlan plan = rvp::sample_mask(c.n_tokens(), c.mask_ratio, 17);
  Tensor clip = random_clip(c, 43);

  // Zero predictions: the loss is the mean square of normalized targets,
  // which is var/(var+eps) per patch, just under 1.
  Tensor pred = Tensor::zeros({1, int64_t(plan.masked.size()), c.patch_pixels()});
  const float loss = m.recon_loss(pred, clip, plan).data()[0];
  EXPECT_GT(loss, 0.9f);
  EXPECT_LT(loss, 1.0f);

  ModelConfig raw = tiny_config();
  MaePose m2(raw, 13);
  const float loss_raw = m2.recon_loss(pred, clip, plan).data()[0];
  EXPECT_NE(loss, loss_raw);
}

TEST(Heatmaps, DecoderShapeAndGradientReachEveryStage) {
  ModelConfig c = tiny_config();
  MaePose m(c, 19);
  Tensor feat = m.encode(m.embed_patches(random_clip(c, 51)));
  Tensor hm = m.decode_heatmaps(feat);
  ASSERT_EQ(hm.ndim(), 5);
  EXPECT_EQ(hm.dim(0), 1);
  EXPECT_EQ(hm.dim(1), c.out_frames());
  EXPECT_EQ(hm.dim(2), c.joints);
  EXPECT_EQ(hm.dim(3), c.heatmap_size);
  EXPECT_EQ(hm.dim(4), c.heatmap_size);

  rvp::Rng rng(5);
  Tensor labels = Tensor::zeros({c.out_frames(), c.joints, 2});
  for (int64_t i = 0; i < labels.numel(); ++i)
    labels.data()[i] = float(rng.uniform(0.1, 0.9));
  Tensor target = rvp::gaussian_targets(labels, c.heatmap_size, c.heatmap_sigma);
  target = rvp::reshape(target, hm.shape());
  Tensor loss = rvp::heatmap_loss(hm, target, c.fg_weight);
  loss.backward();

  for (const char* name :
       {"patch.w", "patch.b", "enc.0.wq", "enc.0.bv", "enc.0.mlp1.w",
        "enc.1.wo", "enc.norm.g", "pose.c1.w", "pose.c1.b", "pose.c2.w",
        "pose.c3.w", "pose.out.w", "pose.out.b"})
    EXPECT_TRUE(grad_finite_and_nonzero(param(m, name))) << name;
  EXPECT_FALSE(param(m, "rec.token").has_grad());
}

TEST(Heatmaps, FullSizeDecoderFrameCount) {
  // The temporal stride-2 convolution halves ten slices to five.
  ModelConfig c;
  EXPECT_EQ(c.out_frames(), 5);
}

TEST(GaussianTargets, PeakIntegralAndClamping) {
  Tensor labels = Tensor::zeros({1, 2, 2});
  // Joint 0 exactly on a grid cell: (x,y) = (14/56, 28/56).
  labels.data()[0] = 14.0f / 56.0f;
  labels.data()[1] = 28.0f / 56.0f;
  // Joint 1 centred.
  labels.data()[2] = 0.5f;
  labels.data()[3] = 0.5f;
  bool clamped = true;
  Tensor t = rvp::gaussian_targets(labels, 56, 2.0, &clamped);
  EXPECT_FALSE(clamped);
  ASSERT_EQ(t.shape(), (rvp::Shape{1, 2, 56, 56}));
  EXPECT_EQ(t.data()[28 * 56 + 14], 1.0f);

  double sum = 0;
  const float* joint1 = t.data() + 56 * 56;
  for (int64_t i = 0; i < 56 * 56; ++i) sum += double(joint1[i]);
  const double expected = 2.0 * M_PI * 2.0 * 2.0;
  EXPECT_NEAR(sum, expected, 0.02 * expected);

  Tensor out_of_range = Tensor::zeros({1, 1, 2});
  out_of_range.data()[0] = 1.5f;
  out_of_range.data()[1] = -0.25f;
  Tensor u = rvp::gaussian_targets(out_of_range, 8, 1.0, &clamped);
  EXPECT_TRUE(clamped);
  // Clamped to (1, 0): continuous peak (row 0, col 8), nearest cell (0, 7).
  int64_t best = 0;
  for (int64_t i = 1; i < 64; ++i)
    if (u.data()[i] > u.data()[best]) best = i;
  EXPECT_EQ(best / 8, 0);
  EXPECT_EQ(best % 8, 7);
}

TEST(GaussianTargets, ZeroSigmaPlacesASingleHotPixel) {
  Tensor labels = Tensor::zeros({1, 1, 2});
  labels.data()[0] = 0.3f;  // col = round(2.4) = 2
  labels.data()[1] = 0.7f;  // row = round(5.6) = 6
  Tensor t = rvp::gaussian_targets(labels, 8, 0.0);
  double sum = 0;
  for (int64_t i = 0; i < 64; ++i) sum += double(t.data()[i]);
  EXPECT_EQ(sum, 1.0);
  EXPECT_EQ(t.data()[6 * 8 + 2], 1.0f);

  EXPECT_THROW(rvp::gaussian_targets(Tensor::zeros({1, 1, 3}), 8, 1.0),
               rvp::dimension_error);
  EXPECT_THROW(rvp::gaussian_targets(labels, 0, 1.0), rvp::config_error);
}

TEST(HeatmapLoss, WeightsForegroundCells) {
  Tensor target = Tensor::zeros({1, 1, 2, 2});
  target.data()[0] = 0.5f;        // foreground, weight fg
  target.data()[1] = 0.0078125f;  // below the 0.01 cutoff, weight 1
  Tensor pred = Tensor::zeros({1, 1, 2, 2});

  const double fg = 10.0;
  const double expect = (fg * 0.25 + 0.0078125 * 0.0078125 + 0.0 + 0.0) / 4.0;
  EXPECT_FLOAT_EQ(rvp::heatmap_loss(pred, target, fg).data()[0], float(expect));

  // fg_weight = 1 reduces to plain MSE.
  rvp::Rng rng(3);
  Tensor p2 = Tensor::randn({2, 3, 4, 4}, rng);
  Tensor t2 = Tensor::randn({2, 3, 4, 4}, rng);
  Tensor d = rvp::sub(p2, t2);
  const float mse = rvp::mean_all(rvp::mul(d, d)).data()[0];
  EXPECT_FLOAT_EQ(rvp::heatmap_loss(p2, t2, 1.0).data()[0], mse);

  EXPECT_THROW(rvp::heatmap_loss(pred, Tensor::zeros({1, 1, 2, 3}), fg),
               rvp::dimension_error);
}

TEST(Skeleton, ArgmaxDecodingPinnedAndDegenerateCases) {
  Tensor h = Tensor::zeros({1, 1, 56, 56});
  h.data()[28 * 56 + 14] = 1.0f;
  Tensor s = rvp::heatmaps_to_skeleton(h);
  ASSERT_EQ(s.shape(), (rvp::Shape{1, 1, 2}));
  EXPECT_FLOAT_EQ(s.data()[0], 0.25f);
  EXPECT_FLOAT_EQ(s.data()[1], 0.5f);

  // A constant map decodes to the first cell.
  Tensor flat = Tensor::full({1, 1, 8, 8}, 0.7f);
  Tensor s2 = rvp::heatmaps_to_skeleton(flat);
  EXPECT_EQ(s2.data()[0], 0.0f);
  EXPECT_EQ(s2.data()[1], 0.0f);

  // Any strictly increasing transform leaves the decoding unchanged.
  rvp::Rng rng(9);
  Tensor maps = Tensor::randn({2, 3, 8, 8}, rng);
  Tensor warped = rvp::add_scalar(rvp::scale(maps, 3.0f), 1.25f);
  EXPECT_TRUE(all_equal(rvp::heatmaps_to_skeleton(maps),
                        rvp::heatmaps_to_skeleton(warped)));

  EXPECT_THROW(rvp::heatmaps_to_skeleton(Tensor::zeros({8, 8})),
               rvp::dimension_error);
}

TEST(Skeleton, GaussianRoundTripStaysWithinOneCell) {
  rvp::Rng rng(17);
  const int64_t S = 56;
  Tensor labels = Tensor::zeros({4, 13, 2});
  for (int64_t i = 0; i < labels.numel(); ++i)
    labels.data()[i] = float(rng.next_double());
  Tensor maps = rvp::gaussian_targets(labels, S, 2.0);
  Tensor back = rvp::heatmaps_to_skeleton(maps);
  for (int64_t i = 0; i < labels.numel(); ++i)
    EXPECT_NEAR(back.data()[i], labels.data()[i], 1.0 / double(S) + 1e-6)
        << "joint coord " << i;
}

TEST(Heads, RegressionOutputsLiveInTheUnitSquare) {
  ModelConfig c = tiny_config();
  MaePose m(c, 23);
  Tensor feat = m.encode(m.embed_patches(random_clip(c, 61)));

  for (Tensor out : {m.mlp_head(feat), m.gcn_head(feat)}) {
    ASSERT_EQ(out.ndim(), 4);
    EXPECT_EQ(out.dim(0), 1);
    EXPECT_EQ(out.dim(1), c.out_frames());
    EXPECT_EQ(out.dim(2), c.joints);
    EXPECT_EQ(out.dim(3), 2);
    for (int64_t i = 0; i < out.numel(); ++i) {
      EXPECT_GT(out.data()[i], 0.0f);
      EXPECT_LT(out.data()[i], 1.0f);
    }
  }

  Tensor loss = rvp::mean_all(m.mlp_head(feat));
  loss.backward();
  EXPECT_TRUE(grad_finite_and_nonzero(param(m, "mlp.1.w")));
  EXPECT_TRUE(grad_finite_and_nonzero(param(m, "patch.w")));
}

TEST(Gcn, NormalizedAdjacencyMatchesHandComputation) {
  // Path graph 0-1-2 with self loops: degrees 2, 3, 2.
  Tensor a = rvp::normalized_adjacency({{{0, 1}}, {{1, 2}}}, 3);
  const double s2 = 1.0 / std::sqrt(2.0), s3 = 1.0 / std::sqrt(3.0);
  EXPECT_NEAR(a.data()[0], 0.5, 1e-6);
  EXPECT_NEAR(a.data()[1], s2 * s3, 1e-6);
  EXPECT_EQ(a.data()[2], 0.0f);
  EXPECT_NEAR(a.data()[4], 1.0 / 3.0, 1e-6);
  EXPECT_NEAR(a.data()[5], s3 * s2, 1e-6);
  EXPECT_NEAR(a.data()[8], 0.5, 1e-6);
  for (int64_t i = 0; i < 3; ++i)
    for (int64_t j = 0; j < 3; ++j)
      EXPECT_FLOAT_EQ(a.data()[i * 3 + j], a.data()[j * 3 + i]);

  // No edges: A+I = I normalizes to the identity.
  Tensor id = rvp::normalized_adjacency({}, 4);
  for (int64_t i = 0; i < 4; ++i)
    for (int64_t j = 0; j < 4; ++j)
      EXPECT_EQ(id.data()[i * 4 + j], i == j ? 1.0f : 0.0f);

  EXPECT_THROW(rvp::normalized_adjacency({{{0, 3}}}, 3), rvp::config_error);
  EXPECT_THROW(rvp::normalized_adjacency({{{1, 1}}}, 3), rvp::config_error);
}

TEST(Gcn, SkeletonEdgesSpanAllThirteenJoints) {
  const auto& edges = rvp::skeleton_edges();
  EXPECT_EQ(edges.size(), 12u);
  std::vector<std::vector<int>> adj(13);
  for (const auto& e : edges) {
    adj[size_t(e[0])].push_back(e[1]);
    adj[size_t(e[1])].push_back(e[0]);
  }
  std::vector<char> seen(13, 0);
  std::queue<int> q;
  q.push(0);
  seen[0] = 1;
  int count = 0;
  while (!q.empty()) {
    int v = q.front();
    q.pop();
    ++count;
    for (int w : adj[size_t(v)])
      if (!seen[size_t(w)]) {
        seen[size_t(w)] = 1;
        q.push(w);
      }
  }
  // 13 nodes reached over 12 edges: a connected spanning tree.
  EXPECT_EQ(count, 13);
}

TEST(Gcn, AdjacencyChoiceChangesTheOutput) {
  ModelConfig c = tiny_config();
  MaePose m(c, 29);
  Tensor feat = m.encode(m.embed_patches(random_clip(c, 71)));
  Tensor skel = m.gcn_head(feat);
  Tensor iso = m.gcn_head_with_adjacency(feat, rvp::normalized_adjacency({}, 13));
  EXPECT_EQ(skel.shape(), iso.shape());
  EXPECT_FALSE(all_equal(skel, iso));
  EXPECT_THROW(m.gcn_head_with_adjacency(feat, Tensor::zeros({12, 12})),
               rvp::dimension_error);
}

TEST(Fusion, ZeroProjectionStartsAsIdentityOnTheQueryStream) {
  ModelConfig c = tiny_config();
  c.dual_stream = true;
  MaePose m(c, 37);
  Tensor rd = m.embed_patches(random_clip(c, 81));
  Tensor ra = m.embed_patches_aux(random_clip(c, 82));
  EXPECT_EQ(ra.shape(), rd.shape());

  Tensor fused = m.fuse_dual(rd, ra);
  EXPECT_EQ(fused.shape(), rd.shape());
  EXPECT_TRUE(all_equal(fused, rd));

  // A nonzero projection makes the second stream matter.
  fill(param(m, "fuse.wo"), 0.01f);
  Tensor fused2 = m.fuse_dual(rd, ra);
  EXPECT_FALSE(all_equal(fused2, rd));
  Tensor fused3 = m.fuse_dual(rd, m.embed_patches_aux(random_clip(c, 83)));
  EXPECT_FALSE(all_equal(fused2, fused3));

  EXPECT_THROW(m.fuse_dual(rd, Tensor::zeros({1, 4, 12})),
               rvp::dimension_error);
}

TEST(Fusion, GradientsReachBothPatchEmbedders) {
  ModelConfig c = tiny_config();
  c.dual_stream = true;
  MaePose m(c, 37);
  fill(param(m, "fuse.wo"), 0.01f);
  Tensor rd = m.embed_patches(random_clip(c, 81));
  Tensor ra = m.embed_patches_aux(random_clip(c, 82));
  Tensor fused = m.fuse_dual(rd, ra);
  Tensor loss = rvp::mean_all(rvp::mul(fused, fused));
  loss.backward();
  EXPECT_TRUE(grad_finite_and_nonzero(param(m, "patch.w")));
  EXPECT_TRUE(grad_finite_and_nonzero(param(m, "patch2.w")));
  EXPECT_TRUE(grad_finite_and_nonzero(param(m, "fuse.wq")));
  EXPECT_TRUE(grad_finite_and_nonzero(param(m, "fuse.wk")));
}

TEST(Fusion, RequiresDualStreamConfig) {
  MaePose m(tiny_config(), 37);
  Tensor clip = random_clip(tiny_config(), 81);
  EXPECT_THROW(m.embed_patches_aux(clip), rvp::config_error);
  Tensor tok = m.embed_patches(clip);
  EXPECT_THROW(m.fuse_dual(tok, tok), rvp::config_error);
}

TEST(ParamStore, DecayGroupsAndLayerExponents) {
  ModelConfig c = tiny_config();
  MaePose m(c, 41);
  const auto& store = m.params();

  EXPECT_TRUE(store.at("rec.token").no_decay);
  EXPECT_TRUE(store.at("enc.0.ln1.g").no_decay);
  EXPECT_TRUE(store.at("patch.b").no_decay);
  EXPECT_FALSE(store.at("patch.w").no_decay);
  EXPECT_FALSE(store.at("enc.0.wq").no_decay);

  // Layer-wise decay: patch embed deepest, blocks count down, heads at 0.
  EXPECT_EQ(store.at("patch.w").decay_exponent, int(c.encoder_depth) + 1);
  EXPECT_EQ(store.at("enc.0.wq").decay_exponent, int(c.encoder_depth));
  EXPECT_EQ(store.at("enc.1.wq").decay_exponent, int(c.encoder_depth) - 1);
  EXPECT_EQ(store.at("enc.norm.g").decay_exponent, 1);
  EXPECT_EQ(store.at("pose.c1.w").decay_exponent, 0);
  EXPECT_EQ(store.at("rec.head.w").decay_exponent, 0);
  EXPECT_EQ(store.at("mlp.1.w").decay_exponent, 0);

  EXPECT_THROW(store.at("nonexistent"), rvp::config_error);
  EXPECT_GT(store.total_size(), 0);
}

TEST(Checkpoint, SaveLoadRoundTripIsBitExact) {
  const std::filesystem::path dir = "ckpt_roundtrip_test";
  std::filesystem::remove_all(dir);
  ModelConfig c = tiny_config();
  MaePose m(c, 43);
  m.save(dir);

  MaePose back = MaePose::load(dir);
  EXPECT_EQ(back.params().entries().size(), m.params().entries().size());
  for (const auto& e : m.params().entries())
    EXPECT_TRUE(all_equal(e.value, back.params().at(e.name).value)) << e.name;

  Tensor clip = random_clip(c, 91);
  EXPECT_TRUE(all_equal(m.encode(m.embed_patches(clip)),
                        back.encode(back.embed_patches(clip))));
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, LoadRejectsMissingAndMismatchedTensors) {
  const std::filesystem::path dir = "ckpt_corrupt_test";
  std::filesystem::remove_all(dir);
  MaePose m(tiny_config(), 47);
  m.save(dir);

  // Point one parameter at a file with a different shape.
  nlohmann::json manifest;
  {
    std::ifstream in(dir / "manifest.json");
    in >> manifest;
  }
  nlohmann::json tampered = manifest;
  tampered["params"]["patch.w"] = tampered["params"]["patch.b"];
  {
    std::ofstream out(dir / "manifest.json");
    out << tampered.dump(2);
  }
  EXPECT_THROW(MaePose::load(dir), rvp::data_error);

  {
    std::ofstream out(dir / "manifest.json");
    out << manifest.dump(2);
  }
  std::filesystem::remove(dir / "rec_token.rvt");
  EXPECT_THROW(MaePose::load(dir), rvp::data_error);

  EXPECT_THROW(MaePose::load("no_such_checkpoint_dir"), rvp::data_error);
  std::filesystem::remove_all(dir);
}

TEST(Checkpoint, LoadMatchingWarmStartsASupersetModel) {
  const std::filesystem::path dir = "ckpt_matching_test";
  std::filesystem::remove_all(dir);
  ModelConfig c = tiny_config();
  MaePose pre(c, 53);
  pre.save(dir);

  // Same architecture, different init: everything matches.
  MaePose ft(c, 54);
  Tensor clip = random_clip(c, 95);
  EXPECT_FALSE(all_equal(pre.encode(pre.embed_patches(clip)),
                         ft.encode(ft.embed_patches(clip))));
  const int64_t n = ft.load_matching(dir);
  EXPECT_EQ(n, int64_t(pre.params().entries().size()));
  EXPECT_TRUE(all_equal(pre.encode(pre.embed_patches(clip)),
                        ft.encode(ft.embed_patches(clip))));

  // Dual-stream model: the fusion and second-stream params stay fresh.
  ModelConfig cd = c;
  cd.dual_stream = true;
  MaePose dual(cd, 55);
  const int64_t loaded = dual.load_matching(dir);
  EXPECT_EQ(loaded, n);
  EXPECT_LT(size_t(loaded), dual.params().entries().size());
  std::filesystem::remove_all(dir);
}

TEST(Model, BatchElementsAreIndependent) {
  ModelConfig c = tiny_config();
  MaePose m(c, 59);
  Tensor a = random_clip(c, 101);
  Tensor b = random_clip(c, 102);

  Tensor batch = Tensor::zeros({2, 1, c.t_in, c.img_h, c.img_w});
  std::copy(a.data(), a.data() + a.numel(), batch.data());
  std::copy(b.data(), b.data() + b.numel(), batch.data() + a.numel());

  Tensor feat = m.encode(m.embed_patches(batch));
  Tensor fa = m.encode(m.embed_patches(a));
  Tensor fb = m.encode(m.embed_patches(b));
  const int64_t per = fa.numel();
  for (int64_t i = 0; i < per; ++i) {
    EXPECT_EQ(feat.data()[i], fa.data()[i]);
    EXPECT_EQ(feat.data()[per + i], fb.data()[i]);
  }
}

TEST(Model, SameSeedBuildsIdenticalModels) {
  ModelConfig c = tiny_config();
  MaePose m1(c, 61), m2(c, 61), m3(c, 62);
  Tensor clip = random_clip(c, 111);
  Tensor f1 = m1.encode(m1.embed_patches(clip));
  Tensor f2 = m2.encode(m2.embed_patches(clip));
  Tensor f3 = m3.encode(m3.embed_patches(clip));
  EXPECT_TRUE(all_equal(f1, f2));
  EXPECT_FALSE(all_equal(f1, f3));

  Tensor h1 = m1.decode_heatmaps(f1);
  Tensor h2 = m2.decode_heatmaps(f2);
  EXPECT_TRUE(all_equal(h1, h2));
}
