#pragma once

// Masked-autoencoder video transformer for radar pose estimation: 3D patch
// embedding, high-ratio token masking, a ViT encoder shared between
// pre-training and fine-tuning, a pixel reconstruction decoder, a heatmap
// pose decoder, coordinate-regression ablation heads, and dual-stream
// fusion. Checkpoints are a manifest JSON plus one tensor file per
// parameter.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <json.hpp>

#include <rvp/errors.hpp>
#include <rvp/ops.hpp>
#include <rvp/rng.hpp>
#include <rvp/scene.hpp>
#include <rvp/serialize.hpp>
#include <rvp/tensor.hpp>

namespace rvp {

struct ModelConfig {
  int64_t t_in = 20;
  int64_t img_h = 224, img_w = 224;
  int64_t patch_t = 2, patch_hw = 16;
  int64_t embed_dim = 384;
  int64_t encoder_depth = 12, encoder_heads = 6;
  int64_t recon_dim = 512, recon_depth = 4, recon_heads = 16;
  double mask_ratio = 0.9;
  int64_t joints = 13;
  int64_t heatmap_size = 56;
  std::array<int64_t, 3> pose_channels = {256, 128, 64};
  double heatmap_sigma = 2.0;
  double fg_weight = 10.0;
  bool per_patch_norm = false;
  bool dual_stream = false;

  int64_t grid_t() const { return t_in / patch_t; }
  int64_t grid_h() const { return img_h / patch_hw; }
  int64_t grid_w() const { return img_w / patch_hw; }
  int64_t n_tokens() const { return grid_t() * grid_h() * grid_w(); }
  int64_t patch_pixels() const { return patch_t * patch_hw * patch_hw; }
  // Output frame count of the temporal stride-2 convolution in the pose
  // decoder; equals grid_t/2 for the even grid_t the config requires.
  int64_t out_frames() const { return grid_t() / 2; }

  void validate() const {
    if (t_in <= 0 || img_h <= 0 || img_w <= 0)
      throw config_error("model: input dims must be positive");
    if (patch_t <= 0 || patch_hw <= 0)
      throw config_error("model: patch dims must be positive");
    if (t_in % patch_t != 0)
      throw config_error("model: t_in must be divisible by patch_t");
    if (img_h % patch_hw != 0 || img_w % patch_hw != 0)
      throw config_error("model: frame size must be divisible by patch_hw");
    if (grid_t() % 2 != 0)
      throw config_error("model: grid_t must be even for temporal pooling");
    if (!(mask_ratio > 0.0 && mask_ratio < 1.0))
      throw config_error("model: mask_ratio must lie in (0,1)");
    if (embed_dim < 6 || recon_dim < 6)
      throw config_error("model: embedding dims must be at least 6");
    if (encoder_heads <= 0 || embed_dim % encoder_heads != 0)
      throw config_error("model: encoder_heads must divide embed_dim");
    if (recon_heads <= 0 || recon_dim % recon_heads != 0)
      throw config_error("model: recon_heads must divide recon_dim");
    if (encoder_depth <= 0 || recon_depth <= 0)
      throw config_error("model: depths must be positive");
    if (joints <= 0) throw config_error("model: joints must be positive");
    if (heatmap_size != 4 * grid_h() || heatmap_size != 4 * grid_w())
      throw config_error("model: heatmap_size must equal 4x the token grid");
    for (int64_t c : pose_channels)
      if (c <= 0) throw config_error("model: pose_channels must be positive");
    if (heatmap_sigma < 0)
      throw config_error("model: heatmap_sigma must be non-negative");
    if (fg_weight <= 0) throw config_error("model: fg_weight must be positive");
  }
};

inline void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"t_in", c.t_in},
                     {"img_h", c.img_h},
                     {"img_w", c.img_w},
                     {"patch_t", c.patch_t},
                     {"patch_hw", c.patch_hw},
                     {"embed_dim", c.embed_dim},
                     {"encoder_depth", c.encoder_depth},
                     {"encoder_heads", c.encoder_heads},
                     {"recon_dim", c.recon_dim},
                     {"recon_depth", c.recon_depth},
                     {"recon_heads", c.recon_heads},
                     {"mask_ratio", c.mask_ratio},
                     {"joints", c.joints},
                     {"heatmap_size", c.heatmap_size},
                     {"pose_channels", c.pose_channels},
                     {"heatmap_sigma", c.heatmap_sigma},
                     {"fg_weight", c.fg_weight},
                     {"per_patch_norm", c.per_patch_norm},
                     {"dual_stream", c.dual_stream}};
}

inline void from_json(const nlohmann::json& j, ModelConfig& c) {
  j.at("t_in").get_to(c.t_in);
  j.at("img_h").get_to(c.img_h);
  j.at("img_w").get_to(c.img_w);
  j.at("patch_t").get_to(c.patch_t);
  j.at("patch_hw").get_to(c.patch_hw);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("encoder_depth").get_to(c.encoder_depth);
  j.at("encoder_heads").get_to(c.encoder_heads);
  j.at("recon_dim").get_to(c.recon_dim);
  j.at("recon_depth").get_to(c.recon_depth);
  j.at("recon_heads").get_to(c.recon_heads);
  j.at("mask_ratio").get_to(c.mask_ratio);
  j.at("joints").get_to(c.joints);
  j.at("heatmap_size").get_to(c.heatmap_size);
  j.at("pose_channels").get_to(c.pose_channels);
  j.at("heatmap_sigma").get_to(c.heatmap_sigma);
  j.at("fg_weight").get_to(c.fg_weight);
  j.at("per_patch_norm").get_to(c.per_patch_norm);
  j.at("dual_stream").get_to(c.dual_stream);
}

struct MaskPlan {
  std::vector<int64_t> visible;  // sorted token indices fed to the encoder
  std::vector<int64_t> masked;   // sorted token indices to reconstruct
  uint64_t seed = 0;
};

inline MaskPlan sample_mask(int64_t n_tokens, double mask_ratio, uint64_t seed) {
  if (n_tokens <= 0) throw config_error("sample_mask: need tokens");
  const int64_t n_masked = llround(mask_ratio * double(n_tokens));
  if (n_masked <= 0 || n_masked >= n_tokens)
    throw config_error("sample_mask: ratio leaves no masked or visible tokens");
  Rng rng(derive_seed(seed, "mask"));
  const std::vector<int> picks =
      rng.sample_without_replacement(int(n_tokens), int(n_masked));
  std::vector<char> is_masked(static_cast<size_t>(n_tokens), 0);
  for (int p : picks) is_masked[size_t(p)] = 1;
  MaskPlan plan;
  plan.seed = seed;
  plan.masked.reserve(static_cast<size_t>(n_masked));
  plan.visible.reserve(static_cast<size_t>(n_tokens - n_masked));
  for (int64_t i = 0; i < n_tokens; ++i)
    (is_masked[size_t(i)] ? plan.masked : plan.visible).push_back(i);
  return plan;
}

// Fixed separable 3D sinusoidal table [gt*gh*gw, dim]: each axis gets
// 2*(dim/6) channels of interleaved sin/cos at geometric frequencies, any
// remainder channels stay zero. Token order is (t, h, w) row-major.
inline Tensor build_pos_embed_3d(int64_t gt, int64_t gh, int64_t gw,
                                 int64_t dim) {
  if (gt <= 0 || gh <= 0 || gw <= 0 || dim < 6)
    throw config_error("pos_embed: bad grid or dim");
  const int64_t share = 2 * (dim / 6);
  const int64_t half = share / 2;
  auto axis_table = [&](int64_t n) {
    std::vector<double> tab(static_cast<size_t>(n * share));
    for (int64_t p = 0; p < n; ++p)
      for (int64_t i = 0; i < half; ++i) {
        const double omega = std::pow(10000.0, -double(i) / double(half));
        tab[size_t(p * share + 2 * i)] = std::sin(double(p) * omega);
        tab[size_t(p * share + 2 * i + 1)] = std::cos(double(p) * omega);
      }
    return tab;
  };
  const std::vector<double> tt = axis_table(gt);
  const std::vector<double> th = axis_table(gh);
  const std::vector<double> tw = axis_table(gw);
  Tensor pos = Tensor::zeros({gt * gh * gw, dim});
  float* out = pos.data();
  int64_t idx = 0;
  for (int64_t t = 0; t < gt; ++t)
    for (int64_t h = 0; h < gh; ++h)
      for (int64_t w = 0; w < gw; ++w, ++idx) {
        float* row = out + idx * dim;
        for (int64_t i = 0; i < share; ++i) {
          row[i] = float(tt[size_t(t * share + i)]);
          row[share + i] = float(th[size_t(h * share + i)]);
          row[2 * share + i] = float(tw[size_t(w * share + i)]);
        }
      }
  return pos;
}

struct ParamEntry {
  std::string name;
  Tensor value;
  bool no_decay = false;
  // Exponent for layer-wise learning-rate decay: heads and decoders 0, the
  // final encoder norm 1, encoder block i gets depth-i, patch embed depth+1.
  int decay_exponent = 0;
};

class ParamStore {
 public:
  Tensor add(std::string name, Tensor t, bool no_decay, int decay_exponent) {
    if (index_.count(name))
      throw config_error("model: duplicate parameter " + name);
    t.set_requires_grad(true);
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), t, no_decay, decay_exponent});
    return entries_.back().value;
  }
  const std::vector<ParamEntry>& entries() const { return entries_; }
  std::vector<ParamEntry>& entries() { return entries_; }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  const ParamEntry& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
      throw config_error("model: unknown parameter " + name);
    return entries_[it->second];
  }
  int64_t total_size() const {
    int64_t n = 0;
    for (const ParamEntry& e : entries_) n += e.value.numel();
    return n;
  }
  void zero_grads() {
    for (ParamEntry& e : entries_) e.value.zero_grad();
  }

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, size_t> index_;
};

// Symmetrically normalized adjacency D^{-1/2} (A+I) D^{-1/2} over n nodes.
inline Tensor normalized_adjacency(const std::vector<std::array<int, 2>>& edges,
                                   int64_t n) {
  Tensor a = Tensor::zeros({n, n});
  float* p = a.data();
  for (const auto& e : edges) {
    if (e[0] < 0 || e[0] >= n || e[1] < 0 || e[1] >= n || e[0] == e[1])
      throw config_error("adjacency: edge out of range");
    p[e[0] * n + e[1]] = 1.0f;
    p[e[1] * n + e[0]] = 1.0f;
  }
  for (int64_t i = 0; i < n; ++i) p[i * n + i] = 1.0f;
  std::vector<double> dinv(static_cast<size_t>(n));
  for (int64_t i = 0; i < n; ++i) {
    double deg = 0;
    for (int64_t j = 0; j < n; ++j) deg += double(p[i * n + j]);
    dinv[size_t(i)] = 1.0 / std::sqrt(deg);
  }
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < n; ++j)
      p[i * n + j] = float(double(p[i * n + j]) * dinv[size_t(i)] * dinv[size_t(j)]);
  return a;
}

namespace detail {

struct LnParams {
  Tensor g, b;
};

struct AttnParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct BlockParams {
  LnParams ln1, ln2;
  AttnParams at;
  Tensor w1, b1, w2, b2;
};

inline Tensor attention(const AttnParams& p, const Tensor& q_in,
                        const Tensor& kv_in, int64_t heads) {
  const int64_t B = q_in.dim(0), Nq = q_in.dim(1), D = q_in.dim(2);
  const int64_t Nk = kv_in.dim(1);
  const int64_t hd = D / heads;
  Tensor q = linear(q_in, p.wq, p.bq);
  Tensor k = linear(kv_in, p.wk, p.bk);
  Tensor v = linear(kv_in, p.wv, p.bv);
  q = permute(reshape(q, {B, Nq, heads, hd}), {0, 2, 1, 3});
  k = permute(reshape(k, {B, Nk, heads, hd}), {0, 2, 1, 3});
  v = permute(reshape(v, {B, Nk, heads, hd}), {0, 2, 1, 3});
  Tensor scores = scale(matmul(q, transpose(k, 2, 3)),
                        1.0f / std::sqrt(float(hd)));
  Tensor ctx = matmul(softmax(scores, 3), v);
  ctx = reshape(permute(ctx, {0, 2, 1, 3}), {B, Nq, D});
  return linear(ctx, p.wo, p.bo);
}

inline Tensor vit_block(const BlockParams& blk, Tensor x, int64_t heads) {
  Tensor h = layer_norm(x, blk.ln1.g, blk.ln1.b);
  x = add(x, attention(blk.at, h, h, heads));
  Tensor m = layer_norm(x, blk.ln2.g, blk.ln2.b);
  m = linear(gelu(linear(m, blk.w1, blk.b1)), blk.w2, blk.b2);
  return add(x, m);
}

// Adds a [rows, dim] table to every batch element of x [B, rows, dim].
inline Tensor add_table(const Tensor& x, const Tensor& table) {
  const int64_t B = x.dim(0);
  Tensor flat = reshape(x, {B, x.dim(1) * x.dim(2)});
  Tensor out = add(flat, reshape(table, {table.numel()}));
  return reshape(out, x.shape());
}

}  // namespace detail

class MaePose {
 public:
  explicit MaePose(const ModelConfig& cfg, uint64_t seed = 1) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(derive_seed(seed, "model-init"));
    const int64_t D = cfg_.embed_dim, Dd = cfg_.recon_dim;
    const int exp_embed = int(cfg_.encoder_depth) + 1;

    patch_w_ = weight("patch.w", {D, 1, cfg_.patch_t, cfg_.patch_hw, cfg_.patch_hw},
                      rng, exp_embed);
    patch_b_ = bias("patch.b", {D}, exp_embed);
    if (cfg_.dual_stream) {
      patch2_w_ = weight("patch2.w",
                         {D, 1, cfg_.patch_t, cfg_.patch_hw, cfg_.patch_hw}, rng,
                         exp_embed);
      patch2_b_ = bias("patch2.b", {D}, exp_embed);
    }
    enc_pos_ = build_pos_embed_3d(cfg_.grid_t(), cfg_.grid_h(), cfg_.grid_w(), D);

    enc_blocks_.resize(static_cast<size_t>(cfg_.encoder_depth));
    for (int64_t i = 0; i < cfg_.encoder_depth; ++i) {
      const int e = int(cfg_.encoder_depth - i);
      enc_blocks_[size_t(i)] =
          make_block("enc." + std::to_string(i), D, 4 * D, rng, e);
    }
    enc_norm_ = make_ln("enc.norm", D, 1);

    rec_embed_w_ = weight("rec.embed.w", {D, Dd}, rng, 0);
    rec_embed_b_ = bias("rec.embed.b", {Dd}, 0);
    rec_token_ = store_.add("rec.token", Tensor::randn({Dd}, rng, 0.02f),
                            /*no_decay=*/true, 0);
    rec_pos_ = build_pos_embed_3d(cfg_.grid_t(), cfg_.grid_h(), cfg_.grid_w(), Dd);
    rec_blocks_.resize(static_cast<size_t>(cfg_.recon_depth));
    for (int64_t i = 0; i < cfg_.recon_depth; ++i)
      rec_blocks_[size_t(i)] =
          make_block("rec." + std::to_string(i), Dd, 4 * Dd, rng, 0);
    rec_norm_ = make_ln("rec.norm", Dd, 0);
    rec_head_w_ = weight("rec.head.w", {Dd, cfg_.patch_pixels()}, rng, 0);
    rec_head_b_ = bias("rec.head.b", {cfg_.patch_pixels()}, 0);

    const auto [c0, c1, c2] = cfg_.pose_channels;
    pose_c1_w_ = weight("pose.c1.w", {c0, D, 3, 1, 1}, rng, 0);
    pose_c1_b_ = bias("pose.c1.b", {c0}, 0);
    pose_c2_w_ = weight("pose.c2.w", {c1, c0, 1, 3, 3}, rng, 0);
    pose_c2_b_ = bias("pose.c2.b", {c1}, 0);
    pose_c3_w_ = weight("pose.c3.w", {c2, c1, 1, 3, 3}, rng, 0);
    pose_c3_b_ = bias("pose.c3.b", {c2}, 0);
    pose_out_w_ = weight("pose.out.w", {cfg_.joints, c2, 1, 1, 1}, rng, 0);
    pose_out_b_ = bias("pose.out.b", {cfg_.joints}, 0);

    mlp_w1_ = weight("mlp.1.w", {D, 512}, rng, 0);
    mlp_b1_ = bias("mlp.1.b", {512}, 0);
    mlp_w2_ = weight("mlp.2.w", {512, 512}, rng, 0);
    mlp_b2_ = bias("mlp.2.b", {512}, 0);
    mlp_w3_ = weight("mlp.out.w", {512, cfg_.joints * 2}, rng, 0);
    mlp_b3_ = bias("mlp.out.b", {cfg_.joints * 2}, 0);

    gcn_in_w_ = weight("gcn.in.w", {D, cfg_.joints * 64}, rng, 0);
    gcn_in_b_ = bias("gcn.in.b", {cfg_.joints * 64}, 0);
    gcn_w1_ = weight("gcn.g1.w", {64, 64}, rng, 0);
    gcn_b1_ = bias("gcn.g1.b", {64}, 0);
    gcn_w2_ = weight("gcn.g2.w", {64, 64}, rng, 0);
    gcn_b2_ = bias("gcn.g2.b", {64}, 0);
    gcn_out_w_ = weight("gcn.out.w", {64, 2}, rng, 0);
    gcn_out_b_ = bias("gcn.out.b", {2}, 0);
    if (cfg_.joints == kNumJoints) {
      std::vector<std::array<int, 2>> edges(skeleton_edges().begin(),
                                            skeleton_edges().end());
      gcn_adj_ = normalized_adjacency(edges, cfg_.joints);
    } else {
      gcn_adj_ = normalized_adjacency({}, cfg_.joints);
    }

    if (cfg_.dual_stream) {
      fuse_ln_q_ = make_ln("fuse.ln_q", D, 0);
      fuse_ln_kv_ = make_ln("fuse.ln_kv", D, 0);
      fuse_at_.wq = weight("fuse.wq", {D, D}, rng, 0);
      fuse_at_.bq = bias("fuse.bq", {D}, 0);
      fuse_at_.wk = weight("fuse.wk", {D, D}, rng, 0);
      fuse_at_.bk = bias("fuse.bk", {D}, 0);
      fuse_at_.wv = weight("fuse.wv", {D, D}, rng, 0);
      fuse_at_.bv = bias("fuse.bv", {D}, 0);
      // Zero output projection makes fusion start as the identity on the
      // query stream.
      fuse_at_.wo = store_.add("fuse.wo", Tensor::zeros({D, D}), false, 0);
      fuse_at_.bo = bias("fuse.bo", {D}, 0);
    }
  }

  const ModelConfig& config() const { return cfg_; }
  ParamStore& params() { return store_; }
  const ParamStore& params() const { return store_; }
  const Tensor& pos_embed() const { return enc_pos_; }

  // Clip [T,H,W] or [B,1,T,H,W] -> tokens [B,N,D] with positions added.
  Tensor embed_patches(const Tensor& clip) const {
    return embed_with(patch_w_, patch_b_, clip);
  }

  // Second-stream embedding for dual-stream fusion.
  Tensor embed_patches_aux(const Tensor& clip) const {
    if (!cfg_.dual_stream)
      throw config_error("model: aux embedding needs dual_stream");
    return embed_with(patch2_w_, patch2_b_, clip);
  }

  // One residual cross-attention block: queries from the first stream,
  // keys/values from the second.
  Tensor fuse_dual(const Tensor& q_tokens, const Tensor& kv_tokens) const {
    if (!cfg_.dual_stream) throw config_error("model: fusion needs dual_stream");
    if (q_tokens.shape() != kv_tokens.shape())
      throw dimension_error("fuse_dual: stream shapes differ");
    Tensor q = layer_norm(q_tokens, fuse_ln_q_.g, fuse_ln_q_.b);
    Tensor kv = layer_norm(kv_tokens, fuse_ln_kv_.g, fuse_ln_kv_.b);
    return add(q_tokens, detail::attention(fuse_at_, q, kv, cfg_.encoder_heads));
  }

  // Tokens [B,N,D] -> features [B,N,D]; with a mask plan only the visible
  // tokens enter the blocks and [B,Nv,D] comes back.
  Tensor encode(const Tensor& tokens, const MaskPlan* plan = nullptr) const {
    if (tokens.ndim() != 3 || tokens.dim(2) != cfg_.embed_dim)
      throw dimension_error("encode: tokens must be [B,N,embed_dim]");
    Tensor x = tokens;
    if (plan) {
      if (int64_t(plan->visible.size() + plan->masked.size()) != tokens.dim(1))
        throw dimension_error("encode: mask plan does not cover the tokens");
      x = index_select(x, 1, plan->visible);
    }
    for (const auto& blk : enc_blocks_)
      x = detail::vit_block(blk, x, cfg_.encoder_heads);
    return layer_norm(x, enc_norm_.g, enc_norm_.b);
  }

  // Visible-token features [B,Nv,D] -> predicted pixels [B,Nm,patch_pixels].
  Tensor reconstruct(const Tensor& features, const MaskPlan& plan) const {
    const int64_t B = features.dim(0);
    const int64_t nv = int64_t(plan.visible.size());
    const int64_t nm = int64_t(plan.masked.size());
    if (features.ndim() != 3 || features.dim(1) != nv)
      throw dimension_error("reconstruct: features do not match the plan");
    Tensor vis = linear(features, rec_embed_w_, rec_embed_b_);
    Tensor msk = add(Tensor::zeros({B, nm, cfg_.recon_dim}), rec_token_);
    Tensor seq = concat({vis, msk}, 1);
    // Restore original token order so each position picks up its own
    // positional embedding.
    std::vector<int64_t> inv(static_cast<size_t>(nv + nm));
    for (int64_t i = 0; i < nv; ++i) inv[size_t(plan.visible[size_t(i)])] = i;
    for (int64_t j = 0; j < nm; ++j)
      inv[size_t(plan.masked[size_t(j)])] = nv + j;
    seq = index_select(seq, 1, inv);
    seq = detail::add_table(seq, rec_pos_);
    for (const auto& blk : rec_blocks_)
      seq = detail::vit_block(blk, seq, cfg_.recon_heads);
    seq = layer_norm(seq, rec_norm_.g, rec_norm_.b);
    seq = linear(seq, rec_head_w_, rec_head_b_);
    return index_select(seq, 1, plan.masked);
  }

  // Clip [B,1,T,H,W] -> per-token pixel targets [B,N,patch_pixels].
  Tensor patchify(const Tensor& clip) const {
    const Tensor c5 = as_clip5(clip);
    const int64_t B = c5.dim(0);
    const int64_t gt = cfg_.grid_t(), gh = cfg_.grid_h(), gw = cfg_.grid_w();
    const int64_t pt = cfg_.patch_t, ps = cfg_.patch_hw;
    const int64_t pp = cfg_.patch_pixels();
    Tensor out = Tensor::zeros({B, cfg_.n_tokens(), pp});
    const float* src = c5.data();
    float* dst = out.data();
    const int64_t hw = cfg_.img_h * cfg_.img_w;
    for (int64_t b = 0; b < B; ++b) {
      int64_t n = 0;
      for (int64_t t = 0; t < gt; ++t)
        for (int64_t h = 0; h < gh; ++h)
          for (int64_t w = 0; w < gw; ++w, ++n) {
            float* q = dst + (b * cfg_.n_tokens() + n) * pp;
            for (int64_t a = 0; a < pt; ++a)
              for (int64_t i = 0; i < ps; ++i)
                for (int64_t j = 0; j < ps; ++j)
                  q[(a * ps + i) * ps + j] =
                      src[b * cfg_.t_in * hw + (t * pt + a) * hw +
                          (h * ps + i) * cfg_.img_w + (w * ps + j)];
          }
    }
    return out;
  }

  // MSE between predictions and raw pixel targets over masked patches only.
  Tensor recon_loss(const Tensor& pred, const Tensor& clip,
                    const MaskPlan& plan) const {
    const int64_t nm = int64_t(plan.masked.size());
    if (pred.ndim() != 3 || pred.dim(1) != nm ||
        pred.dim(2) != cfg_.patch_pixels())
      throw dimension_error("recon_loss: prediction shape mismatch");
    Tensor targets = patchify(clip);
    Tensor tgt = index_select(targets, 1, plan.masked);
    if (cfg_.per_patch_norm) tgt = normalize_patches(tgt);
    Tensor d = sub(pred, tgt);
    return mean_all(mul(d, d));
  }

  // Features [B,N,D] -> heatmaps [B, out_frames, joints, S, S].
  Tensor decode_heatmaps(const Tensor& features) const {
    if (features.ndim() != 3 || features.dim(1) != cfg_.n_tokens() ||
        features.dim(2) != cfg_.embed_dim)
      throw dimension_error("decode_heatmaps: features must be [B,N,embed_dim]");
    const int64_t B = features.dim(0);
    const int64_t gt = cfg_.grid_t(), gh = cfg_.grid_h(), gw = cfg_.grid_w();
    Tensor x = reshape(features, {B, gt, gh, gw, cfg_.embed_dim});
    x = permute(x, {0, 4, 1, 2, 3});
    x = conv3d(x, pose_c1_w_, pose_c1_b_, {2, 1, 1}, {1, 0, 0});
    x = nearest_upsample2x_spatial(x);
    x = gelu(conv3d(x, pose_c2_w_, pose_c2_b_, {1, 1, 1}, {0, 1, 1}));
    x = nearest_upsample2x_spatial(x);
    x = gelu(conv3d(x, pose_c3_w_, pose_c3_b_, {1, 1, 1}, {0, 1, 1}));
    x = conv3d(x, pose_out_w_, pose_out_b_, {1, 1, 1}, {0, 0, 0});
    return permute(x, {0, 2, 1, 3, 4});
  }

  // Features [B,N,D] -> coordinates [B, out_frames, joints, 2] in [0,1].
  Tensor mlp_head(const Tensor& features) const {
    Tensor x = pooled_frames(features);
    x = gelu(linear(x, mlp_w1_, mlp_b1_));
    x = gelu(linear(x, mlp_w2_, mlp_b2_));
    x = sigmoid(linear(x, mlp_w3_, mlp_b3_));
    return reshape(x, {x.dim(0), cfg_.out_frames(), cfg_.joints, 2});
  }

  Tensor gcn_head(const Tensor& features) const {
    return gcn_head_with_adjacency(features, gcn_adj_);
  }

  Tensor gcn_head_with_adjacency(const Tensor& features, const Tensor& adj) const {
    if (adj.ndim() != 2 || adj.dim(0) != cfg_.joints || adj.dim(1) != cfg_.joints)
      throw dimension_error("gcn_head: adjacency must be [joints,joints]");
    Tensor x = pooled_frames(features);
    const int64_t B = x.dim(0), F = cfg_.out_frames();
    x = linear(x, gcn_in_w_, gcn_in_b_);
    x = reshape(x, {B, F, cfg_.joints, 64});
    x = gelu(linear(matmul(adj, x), gcn_w1_, gcn_b1_));
    x = gelu(linear(matmul(adj, x), gcn_w2_, gcn_b2_));
    return sigmoid(linear(x, gcn_out_w_, gcn_out_b_));
  }

  void save(const std::filesystem::path& dir) const {
    std::filesystem::create_directories(dir);
    nlohmann::json j;
    j["format"] = "maepose-checkpoint";
    j["config"] = cfg_;
    nlohmann::json files = nlohmann::json::object();
    for (const ParamEntry& e : store_.entries()) {
      const std::string file = file_name(e.name);
      write_tensor(dir / file, e.value);
      files[e.name] = file;
    }
    j["params"] = files;
    std::ofstream out(dir / "manifest.json");
    if (!out) throw data_error("checkpoint: cannot write manifest");
    out << j.dump(2) << "\n";
  }

  static MaePose load(const std::filesystem::path& dir) {
    const nlohmann::json j = read_manifest(dir);
    MaePose model(j.at("config").get<ModelConfig>(), 0);
    const auto& files = j.at("params");
    if (files.size() != model.store_.entries().size())
      throw data_error("checkpoint: parameter count mismatch");
    for (ParamEntry& e : model.store_.entries())
      model.load_param(dir, files, e, /*strict=*/true);
    return model;
  }

  // Copies every checkpoint parameter whose name and shape match this model;
  // returns how many were loaded. Used to warm-start fine-tuning.
  int64_t load_matching(const std::filesystem::path& dir) {
    const nlohmann::json j = read_manifest(dir);
    const auto& files = j.at("params");
    int64_t loaded = 0;
    for (ParamEntry& e : store_.entries())
      if (files.contains(e.name) && load_param(dir, files, e, /*strict=*/false))
        ++loaded;
    return loaded;
  }

 private:
  Tensor weight(const std::string& name, Shape shape, Rng& rng, int exp) {
    return store_.add(name, Tensor::randn(std::move(shape), rng, 0.02f),
                      /*no_decay=*/false, exp);
  }
  Tensor bias(const std::string& name, Shape shape, int exp) {
    return store_.add(name, Tensor::zeros(std::move(shape)), /*no_decay=*/true,
                      exp);
  }
  detail::LnParams make_ln(const std::string& prefix, int64_t d, int exp) {
    detail::LnParams ln;
    ln.g = store_.add(prefix + ".g", Tensor::full({d}, 1.0f), true, exp);
    ln.b = store_.add(prefix + ".b", Tensor::zeros({d}), true, exp);
    return ln;
  }
  detail::BlockParams make_block(const std::string& prefix, int64_t d,
                                 int64_t hidden, Rng& rng, int exp) {
    detail::BlockParams blk;
    blk.ln1 = make_ln(prefix + ".ln1", d, exp);
    blk.ln2 = make_ln(prefix + ".ln2", d, exp);
    blk.at.wq = weight(prefix + ".wq", {d, d}, rng, exp);
    blk.at.bq = bias(prefix + ".bq", {d}, exp);
    blk.at.wk = weight(prefix + ".wk", {d, d}, rng, exp);
    blk.at.bk = bias(prefix + ".bk", {d}, exp);
    blk.at.wv = weight(prefix + ".wv", {d, d}, rng, exp);
    blk.at.bv = bias(prefix + ".bv", {d}, exp);
    blk.at.wo = weight(prefix + ".wo", {d, d}, rng, exp);
    blk.at.bo = bias(prefix + ".bo", {d}, exp);
    blk.w1 = weight(prefix + ".mlp1.w", {d, hidden}, rng, exp);
    blk.b1 = bias(prefix + ".mlp1.b", {hidden}, exp);
    blk.w2 = weight(prefix + ".mlp2.w", {hidden, d}, rng, exp);
    blk.b2 = bias(prefix + ".mlp2.b", {d}, exp);
    return blk;
  }

  Tensor as_clip5(const Tensor& clip) const {
    Tensor c = clip;
    if (c.ndim() == 3)
      c = reshape(c, {1, 1, c.dim(0), c.dim(1), c.dim(2)});
    if (c.ndim() != 5 || c.dim(1) != 1 || c.dim(2) != cfg_.t_in ||
        c.dim(3) != cfg_.img_h || c.dim(4) != cfg_.img_w)
      throw dimension_error("model: clip must be [B,1," +
                            std::to_string(cfg_.t_in) + "," +
                            std::to_string(cfg_.img_h) + "," +
                            std::to_string(cfg_.img_w) + "]");
    return c;
  }

  Tensor embed_with(const Tensor& w, const Tensor& b, const Tensor& clip) const {
    Tensor c5 = as_clip5(clip);
    const int64_t B = c5.dim(0);
    Tensor x = conv3d(c5, w, b, {cfg_.patch_t, cfg_.patch_hw, cfg_.patch_hw},
                      {0, 0, 0});
    x = reshape(x, {B, cfg_.embed_dim, cfg_.n_tokens()});
    x = permute(x, {0, 2, 1});
    return detail::add_table(x, enc_pos_);
  }

  // [B,N,D] -> [B, out_frames, D]: spatial mean per temporal slice, then
  // average adjacent slice pairs.
  Tensor pooled_frames(const Tensor& features) const {
    if (features.ndim() != 3 || features.dim(1) != cfg_.n_tokens() ||
        features.dim(2) != cfg_.embed_dim)
      throw dimension_error("model: features must be [B,N,embed_dim]");
    const int64_t B = features.dim(0);
    Tensor x = reshape(features, {B, cfg_.grid_t(),
                                  cfg_.grid_h() * cfg_.grid_w(), cfg_.embed_dim});
    x = mean_axis(x, 2);
    x = reshape(x, {B, cfg_.out_frames(), 2, cfg_.embed_dim});
    return mean_axis(x, 2);
  }

  Tensor normalize_patches(const Tensor& t) const {
    const int64_t rows = t.dim(0) * t.dim(1), pp = t.dim(2);
    Tensor out = Tensor::zeros(t.shape());
    const float* src = t.data();
    float* dst = out.data();
    for (int64_t r = 0; r < rows; ++r) {
      const float* p = src + r * pp;
      double mu = 0;
      for (int64_t i = 0; i < pp; ++i) mu += double(p[i]);
      mu /= double(pp);
      double var = 0;
      for (int64_t i = 0; i < pp; ++i) {
        const double c = double(p[i]) - mu;
        var += c * c;
      }
      var /= double(pp);
      const double inv = 1.0 / std::sqrt(var + 1e-6);
      float* q = dst + r * pp;
      for (int64_t i = 0; i < pp; ++i)
        q[i] = float((double(p[i]) - mu) * inv);
    }
    return out;
  }

  static std::string file_name(const std::string& param) {
    std::string f = param;
    std::replace(f.begin(), f.end(), '.', '_');
    return f + ".rvt";
  }

  static nlohmann::json read_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw data_error("checkpoint: missing manifest in " + dir.string());
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw data_error(std::string("checkpoint: bad manifest: ") + e.what());
    }
    if (j.value("format", "") != "maepose-checkpoint")
      throw data_error("checkpoint: unrecognized manifest format");
    return j;
  }

  bool load_param(const std::filesystem::path& dir, const nlohmann::json& files,
                  ParamEntry& e, bool strict) {
    if (!files.contains(e.name)) {
      if (strict) throw data_error("checkpoint: missing parameter " + e.name);
      return false;
    }
    const Tensor t = read_tensor(dir / files.at(e.name).get<std::string>());
    if (t.shape() != e.value.shape()) {
      if (strict)
        throw data_error("checkpoint: shape mismatch for " + e.name + ": " +
                         shape_str(t.shape()) + " vs " +
                         shape_str(e.value.shape()));
      return false;
    }
    std::copy(t.data(), t.data() + t.numel(), e.value.data());
    return true;
  }

  ModelConfig cfg_;
  ParamStore store_;
  Tensor patch_w_, patch_b_, patch2_w_, patch2_b_;
  Tensor enc_pos_, rec_pos_;
  std::vector<detail::BlockParams> enc_blocks_, rec_blocks_;
  detail::LnParams enc_norm_, rec_norm_;
  Tensor rec_embed_w_, rec_embed_b_, rec_token_, rec_head_w_, rec_head_b_;
  Tensor pose_c1_w_, pose_c1_b_, pose_c2_w_, pose_c2_b_;
  Tensor pose_c3_w_, pose_c3_b_, pose_out_w_, pose_out_b_;
  Tensor mlp_w1_, mlp_b1_, mlp_w2_, mlp_b2_, mlp_w3_, mlp_b3_;
  Tensor gcn_in_w_, gcn_in_b_, gcn_w1_, gcn_b1_, gcn_w2_, gcn_b2_;
  Tensor gcn_out_w_, gcn_out_b_, gcn_adj_;
  detail::LnParams fuse_ln_q_, fuse_ln_kv_;
  detail::AttnParams fuse_at_;
};

// Unnormalized Gaussian target maps [F,K,size,size] from labels [F,K,2] in
// [0,1]^2, with (row, col) peak at (y*size, x*size). Out-of-range labels are
// clamped and reported through `clamped`. sigma = 0 places a single hot
// pixel at the nearest cell.
inline Tensor gaussian_targets(const Tensor& labels, int64_t size, double sigma,
                               bool* clamped = nullptr) {
  if (labels.ndim() != 3 || labels.dim(2) != 2)
    throw dimension_error("gaussian_targets: labels must be [F,K,2]");
  if (size <= 0) throw config_error("gaussian_targets: size must be positive");
  const int64_t F = labels.dim(0), K = labels.dim(1);
  Tensor out = Tensor::zeros({F, K, size, size});
  const float* lp = labels.data();
  float* op = out.data();
  bool any_clamped = false;
  for (int64_t f = 0; f < F; ++f)
    for (int64_t k = 0; k < K; ++k) {
      double x = double(lp[(f * K + k) * 2 + 0]);
      double y = double(lp[(f * K + k) * 2 + 1]);
      if (x < 0 || x > 1 || y < 0 || y > 1) {
        any_clamped = true;
        x = std::clamp(x, 0.0, 1.0);
        y = std::clamp(y, 0.0, 1.0);
      }
      const double u = y * double(size);
      const double v = x * double(size);
      float* map = op + (f * K + k) * size * size;
      if (sigma <= 0) {
        const int64_t i = std::clamp<int64_t>(llround(u), 0, size - 1);
        const int64_t j = std::clamp<int64_t>(llround(v), 0, size - 1);
        map[i * size + j] = 1.0f;
        continue;
      }
      const double inv = 1.0 / (2.0 * sigma * sigma);
      for (int64_t i = 0; i < size; ++i)
        for (int64_t j = 0; j < size; ++j) {
          const double di = double(i) - u, dj = double(j) - v;
          map[i * size + j] = float(std::exp(-(di * di + dj * dj) * inv));
        }
    }
  if (clamped) *clamped = any_clamped;
  return out;
}

// Mean of w*(pred-target)^2 with w = fg_weight where target > 0.01, else 1.
inline Tensor heatmap_loss(const Tensor& pred, const Tensor& target,
                           double fg_weight) {
  if (pred.shape() != target.shape())
    throw dimension_error("heatmap_loss: shape mismatch");
  Tensor w = Tensor::zeros(target.shape());
  const float* tp = target.data();
  float* wp = w.data();
  const int64_t n = target.numel();
  for (int64_t i = 0; i < n; ++i)
    wp[i] = tp[i] > 0.01f ? float(fg_weight) : 1.0f;
  Tensor d = sub(pred, target);
  return mean_all(mul(mul(d, d), w));
}

// Heatmaps [F,K,H,W] -> normalized coordinates [F,K,2] via row-major
// first-hit argmax: x = col/W, y = row/H.
inline Tensor heatmaps_to_skeleton(const Tensor& h) {
  if (h.ndim() != 4) throw dimension_error("heatmaps_to_skeleton: need [F,K,H,W]");
  const int64_t F = h.dim(0), K = h.dim(1), H = h.dim(2), W = h.dim(3);
  Tensor out = Tensor::zeros({F, K, 2});
  const float* hp = h.data();
  float* op = out.data();
  for (int64_t f = 0; f < F; ++f)
    for (int64_t k = 0; k < K; ++k) {
      const float* map = hp + (f * K + k) * H * W;
      int64_t best = 0;
      for (int64_t i = 1; i < H * W; ++i)
        if (map[i] > map[best]) best = i;
      if (!std::isfinite(map[best]))
        throw numeric_error("heatmaps_to_skeleton: non-finite heatmap");
      op[(f * K + k) * 2 + 0] = float(double(best % W) / double(W));
      op[(f * K + k) * 2 + 1] = float(double(best / W) / double(H));
    }
  return out;
}

}  // namespace rvp
