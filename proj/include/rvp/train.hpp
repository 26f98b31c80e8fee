#pragma once

// Two-stage training: self-supervised masked reconstruction and supervised
// pose fine-tuning. One epoch loop covers both stages; they differ in the
// loss, the validation metric, the optimizer's moment schedule, and which
// parameters are optimized. Early stopping restores the best-epoch weights.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include <rvp/dataset.hpp>
#include <rvp/errors.hpp>
#include <rvp/metrics.hpp>
#include <rvp/model.hpp>
#include <rvp/ops.hpp>
#include <rvp/rng.hpp>

namespace rvp {

enum class TrainStage { pretrain, finetune };
enum class HeadKind { heatmap, mlp, gcn };
enum class InitKind { random, pretrained };

inline std::string to_string(TrainStage s) {
  return s == TrainStage::pretrain ? "pretrain" : "finetune";
}
inline std::string to_string(HeadKind h) {
  switch (h) {
    case HeadKind::heatmap: return "heatmap";
    case HeadKind::mlp: return "mlp";
    case HeadKind::gcn: return "gcn";
  }
  return "heatmap";
}
inline std::string to_string(InitKind k) {
  return k == InitKind::random ? "random" : "pretrained";
}

inline TrainStage stage_from_string(const std::string& s) {
  if (s == "pretrain") return TrainStage::pretrain;
  if (s == "finetune") return TrainStage::finetune;
  throw config_error("unknown train stage '" + s + "'");
}
inline HeadKind head_from_string(const std::string& s) {
  if (s == "heatmap") return HeadKind::heatmap;
  if (s == "mlp") return HeadKind::mlp;
  if (s == "gcn") return HeadKind::gcn;
  throw config_error("unknown head '" + s + "'");
}
inline InitKind init_from_string(const std::string& s) {
  if (s == "random") return InitKind::random;
  if (s == "pretrained") return InitKind::pretrained;
  throw config_error("unknown init '" + s + "'");
}

struct TrainConfig {
  TrainStage stage = TrainStage::pretrain;
  int64_t epochs = 100;
  int64_t batch_size = 8;
  double base_lr = 0.0;  // 0 picks the stage default below
  double weight_decay = 0.05;
  int64_t warmup_epochs = 5;
  double layerwise_decay = 0.75;  // fine-tune only; pre-training uses 1
  int64_t early_stop_patience = 10;
  InitKind init = InitKind::random;
  std::string init_checkpoint;
  HeadKind head = HeadKind::heatmap;
  uint64_t seed = 1;

  double resolved_lr() const {
    if (base_lr > 0.0) return base_lr;
    return stage == TrainStage::pretrain ? 1.5e-4 : 1e-3;
  }

  void validate() const {
    if (epochs < 1) throw config_error("train: epochs must be positive");
    if (batch_size < 1) throw config_error("train: batch_size must be positive");
    if (base_lr < 0.0) throw config_error("train: base_lr must be non-negative");
    if (weight_decay < 0.0)
      throw config_error("train: weight_decay must be non-negative");
    if (warmup_epochs < 0 || warmup_epochs > epochs)
      throw config_error("train: warmup_epochs must lie in [0, epochs]");
    if (!(layerwise_decay > 0.0 && layerwise_decay <= 1.0))
      throw config_error("train: layerwise_decay must lie in (0,1]");
    if (early_stop_patience < 1 || early_stop_patience > epochs)
      throw config_error("train: patience must lie in [1, epochs]");
    if (init == InitKind::pretrained && init_checkpoint.empty())
      throw config_error("train: pretrained init needs a checkpoint path");
  }
};

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"stage", to_string(c.stage)},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"base_lr", c.base_lr},
                     {"weight_decay", c.weight_decay},
                     {"warmup_epochs", c.warmup_epochs},
                     {"layerwise_decay", c.layerwise_decay},
                     {"early_stop_patience", c.early_stop_patience},
                     {"init", to_string(c.init)},
                     {"init_checkpoint", c.init_checkpoint},
                     {"head", to_string(c.head)},
                     {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  c.stage = stage_from_string(j.at("stage").get<std::string>());
  j.at("epochs").get_to(c.epochs);
  j.at("batch_size").get_to(c.batch_size);
  j.at("base_lr").get_to(c.base_lr);
  j.at("weight_decay").get_to(c.weight_decay);
  j.at("warmup_epochs").get_to(c.warmup_epochs);
  j.at("layerwise_decay").get_to(c.layerwise_decay);
  j.at("early_stop_patience").get_to(c.early_stop_patience);
  c.init = init_from_string(j.at("init").get<std::string>());
  j.at("init_checkpoint").get_to(c.init_checkpoint);
  c.head = head_from_string(j.at("head").get<std::string>());
  j.at("seed").get_to(c.seed);
}

// Linear warmup to the base rate, then cosine decay to zero at `epochs`.
inline double scheduled_lr(const TrainConfig& tc, int64_t epoch) {
  const double base = tc.resolved_lr();
  if (epoch < tc.warmup_epochs)
    return base * double(epoch + 1) / double(tc.warmup_epochs);
  if (tc.epochs == tc.warmup_epochs) return base;
  const double t =
      double(epoch - tc.warmup_epochs) / double(tc.epochs - tc.warmup_epochs);
  return base * 0.5 * (1.0 + std::cos(M_PI * t));
}

struct EpochLog {
  int64_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_mpjpe = -1.0;  // metres; -1 outside fine-tuning
  double lr = 0.0;          // scheduled base rate this epoch
};

struct TrainLog {
  std::string stage;
  std::string head;
  std::vector<EpochLog> epochs;
  int64_t stop_epoch = 0;  // epochs actually run
  int64_t best_epoch = 0;
  double best_val = 0.0;  // val loss (pretrain) or val MPJPE (finetune)
  bool stopped_early = false;
  // Per-group learning-rate scale: layerwise_decay^exponent by exponent.
  std::map<int, double> group_scale;
};

inline void write_train_log_jsonl(std::ostream& out, const TrainLog& log) {
  nlohmann::json head{{"event", "start"},
                      {"stage", log.stage},
                      {"head", log.head},
                      {"group_scale", nlohmann::json::object()}};
  for (const auto& [exp, scale] : log.group_scale)
    head["group_scale"][std::to_string(exp)] = scale;
  out << head.dump() << "\n";
  for (const EpochLog& e : log.epochs) {
    nlohmann::json j{{"event", "epoch"},
                     {"epoch", e.epoch},
                     {"train_loss", e.train_loss},
                     {"val_loss", e.val_loss},
                     {"lr", e.lr}};
    if (e.val_mpjpe >= 0.0) j["val_mpjpe"] = e.val_mpjpe;
    out << j.dump() << "\n";
  }
  out << nlohmann::json{{"event", "stop"},
                        {"stop_epoch", log.stop_epoch},
                        {"best_epoch", log.best_epoch},
                        {"best_val", log.best_val},
                        {"stopped_early", log.stopped_early}}
             .dump()
      << "\n";
}

struct AdamWParams {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.05;
  double layerwise_decay = 1.0;
};

// Decoupled weight decay; the layer-wise factor scales a group's entire
// step, decay term included. Weight decay skips no_decay parameters.
class AdamW {
 public:
  AdamW(ParamStore& store, std::vector<size_t> selected, AdamWParams p)
      : store_(&store), sel_(std::move(selected)), p_(p) {
    state_.resize(sel_.size());
    for (size_t i = 0; i < sel_.size(); ++i) {
      const int64_t n = store_->entries().at(sel_[i]).value.numel();
      state_[i].m.assign(size_t(n), 0.0f);
      state_[i].v.assign(size_t(n), 0.0f);
    }
  }

  const std::vector<size_t>& selected() const { return sel_; }
  int64_t step_count() const { return t_; }

  void step(double lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(p_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(p_.beta2, double(t_));
    for (size_t i = 0; i < sel_.size(); ++i) {
      ParamEntry& e = store_->entries().at(sel_[i]);
      if (!e.value.has_grad()) continue;
      const double group_lr =
          lr * std::pow(p_.layerwise_decay, double(e.decay_exponent));
      float* w = e.value.data();
      const std::vector<float>& g = e.value.grad_vec();
      std::vector<float>& m = state_[i].m;
      std::vector<float>& v = state_[i].v;
      for (size_t k = 0; k < g.size(); ++k) {
        const double gk = double(g[k]);
        const double mk = p_.beta1 * double(m[k]) + (1.0 - p_.beta1) * gk;
        const double vk = p_.beta2 * double(v[k]) + (1.0 - p_.beta2) * gk * gk;
        m[k] = float(mk);
        v[k] = float(vk);
        double upd = (mk / bc1) / (std::sqrt(vk / bc2) + p_.eps);
        if (!e.no_decay) upd += p_.weight_decay * double(w[k]);
        w[k] = float(double(w[k]) - group_lr * upd);
      }
    }
  }

 private:
  struct Moments {
    std::vector<float> m, v;
  };
  ParamStore* store_;
  std::vector<size_t> sel_;
  AdamWParams p_;
  std::vector<Moments> state_;
  int64_t t_ = 0;
};

// Which parameters each stage optimizes. Pre-training trains the embedders,
// encoder, and reconstruction decoder; fine-tuning drops the reconstruction
// decoder and trains exactly one head.
inline std::vector<size_t> select_train_params(const ParamStore& store,
                                               TrainStage stage, HeadKind head) {
  auto wants = [&](const std::string& name) {
    auto has = [&](const char* prefix) { return name.rfind(prefix, 0) == 0; };
    if (has("patch.") || has("patch2.") || has("fuse.") || has("enc."))
      return true;
    if (stage == TrainStage::pretrain) return has("rec.");
    switch (head) {
      case HeadKind::heatmap: return has("pose.");
      case HeadKind::mlp: return has("mlp.");
      case HeadKind::gcn: return has("gcn.");
    }
    return false;
  };
  std::vector<size_t> sel;
  for (size_t i = 0; i < store.entries().size(); ++i)
    if (wants(store.entries()[i].name)) sel.push_back(i);
  return sel;
}

// Clips preloaded for one split subset. `ra` stays empty outside dual mode.
struct FoldData {
  std::vector<Tensor> rd, ra, labels;
  std::vector<std::string> names;
  std::vector<std::string> actions;
  std::vector<int64_t> clip_ids;  // manifest indices, stable mask seeds
};

// Loads the subset's spectrogram videos and labels into memory. Refuses any
// clip belonging to `test_person` unless allow_test_person is set, which is
// the leakage guard both training stages run behind.
inline FoldData load_fold_clips(const std::filesystem::path& dir,
                                const DatasetManifest& m,
                                const std::vector<size_t>& indices,
                                const std::string& modality, int test_person,
                                bool allow_test_person = false) {
  if (modality != "rd" && modality != "ra" && modality != "dual")
    throw config_error("unknown modality '" + modality + "'");
  FoldData d;
  for (size_t i : indices) {
    const ClipRecord& rec = m.clips.at(i);
    if (!allow_test_person && rec.person == test_person)
      throw data_error("clip " + rec.name + " belongs to the held-out person " +
                       std::to_string(test_person));
    d.rd.push_back(load_clip_video(dir, rec, modality == "ra" ? "ra" : "rd"));
    if (modality == "dual") d.ra.push_back(load_clip_video(dir, rec, "ra"));
    d.labels.push_back(load_clip_labels(dir, rec));
    d.names.push_back(rec.name);
    d.actions.push_back(rec.action_name);
    d.clip_ids.push_back(int64_t(i));
  }
  return d;
}

namespace detail {

inline Tensor clip_tokens(const MaePose& model, const FoldData& d, size_t j) {
  Tensor tok = model.embed_patches(d.rd[j]);
  if (model.config().dual_stream) {
    if (d.ra.empty())
      throw config_error("dual-stream model needs the dual modality");
    tok = model.fuse_dual(tok, model.embed_patches_aux(d.ra[j]));
  }
  return tok;
}

inline Tensor supervision_labels(const MaePose& model, const FoldData& d,
                                 size_t j) {
  const ModelConfig& mc = model.config();
  const std::vector<int64_t> idx =
      label_frame_indices(mc.t_in, mc.out_frames());
  return index_select(d.labels[j], 0, idx);
}

inline Tensor finetune_loss(const MaePose& model, const Tensor& feat,
                            const Tensor& labels_sel, HeadKind head) {
  const ModelConfig& mc = model.config();
  if (head == HeadKind::heatmap) {
    Tensor hm = model.decode_heatmaps(feat);
    Tensor tgt = gaussian_targets(labels_sel, mc.heatmap_size, mc.heatmap_sigma);
    tgt = reshape(tgt, hm.shape());
    return heatmap_loss(hm, tgt, mc.fg_weight);
  }
  Tensor coords =
      head == HeadKind::mlp ? model.mlp_head(feat) : model.gcn_head(feat);
  Tensor d = sub(coords, reshape(labels_sel, coords.shape()));
  return mean_all(mul(d, d));
}

inline Tensor predict_skeleton(const MaePose& model, const Tensor& feat,
                               HeadKind head) {
  const ModelConfig& mc = model.config();
  if (head == HeadKind::heatmap) {
    Tensor hm = model.decode_heatmaps(feat).detach();
    return heatmaps_to_skeleton(reshape(
        hm, {mc.out_frames(), mc.joints, mc.heatmap_size, mc.heatmap_size}));
  }
  Tensor coords =
      (head == HeadKind::mlp ? model.mlp_head(feat) : model.gcn_head(feat))
          .detach();
  return reshape(coords, {mc.out_frames(), mc.joints, 2});
}

inline void check_finite(double loss, const char* phase, int64_t epoch,
                         const std::string& clip) {
  if (std::isfinite(loss)) return;
  throw numeric_error(std::string("non-finite ") + phase + " loss " +
                      std::to_string(loss) + " at epoch " +
                      std::to_string(epoch) + ", clip " + clip);
}

struct ParamSnapshot {
  std::vector<std::vector<float>> values;

  void capture(const ParamStore& store) {
    values.clear();
    values.reserve(store.entries().size());
    for (const ParamEntry& e : store.entries())
      values.emplace_back(e.value.data(), e.value.data() + e.value.numel());
  }
  void restore(ParamStore& store) const {
    for (size_t i = 0; i < values.size(); ++i)
      std::copy(values[i].begin(), values[i].end(),
                store.entries()[i].value.data());
  }
};

}  // namespace detail

// Mean validation loss; for fine-tuning also the validation MPJPE in
// metres. Masks for validation reconstruction are fixed per clip so the
// metric is comparable across epochs.
inline EpochLog validate_model(const MaePose& model, const FoldData& val,
                               const TrainConfig& tc, double span_x,
                               double span_y) {
  if (val.rd.empty()) throw data_error("validation split is empty");
  EpochLog out;
  MetricsAccumulator acc;
  double loss_sum = 0.0;
  for (size_t j = 0; j < val.rd.size(); ++j) {
    Tensor tok = detail::clip_tokens(model, val, j);
    if (tc.stage == TrainStage::pretrain) {
      MaskPlan plan =
          sample_mask(model.config().n_tokens(), model.config().mask_ratio,
                      derive_seed(tc.seed, "val-mask", uint64_t(val.clip_ids[j])));
      Tensor feat = model.encode(tok, &plan);
      Tensor pred = model.reconstruct(feat, plan);
      const double l = double(model.recon_loss(pred, val.rd[j], plan).data()[0]);
      detail::check_finite(l, "validation", -1, val.names[j]);
      loss_sum += l;
    } else {
      Tensor feat = model.encode(tok);
      Tensor labels_sel = detail::supervision_labels(model, val, j);
      const double l =
          double(detail::finetune_loss(model, feat, labels_sel, tc.head)
                     .data()[0]);
      detail::check_finite(l, "validation", -1, val.names[j]);
      loss_sum += l;
      Tensor pred = detail::predict_skeleton(model, feat, tc.head);
      acc.add(val.actions[j], pose_metrics(pred, labels_sel, span_x, span_y));
    }
  }
  out.val_loss = loss_sum / double(val.rd.size());
  if (tc.stage == TrainStage::finetune) out.val_mpjpe = acc.mpjpe();
  return out;
}

// Runs one training stage over preloaded train/val data. The model is
// updated in place and ends at the best-validation epoch's weights.
inline TrainLog train_model(MaePose& model, const FoldData& train,
                            const FoldData& val, const TrainConfig& tc,
                            double span_x, double span_y) {
  tc.validate();
  if (train.rd.empty()) throw data_error("training split is empty");
  if (model.config().dual_stream != !train.ra.empty())
    throw config_error("modality does not match the model's stream count");

  TrainLog log;
  log.stage = to_string(tc.stage);
  log.head = tc.stage == TrainStage::finetune ? to_string(tc.head) : "";

  AdamWParams ap;
  ap.beta1 = 0.9;
  ap.beta2 = tc.stage == TrainStage::pretrain ? 0.95 : 0.999;
  ap.weight_decay = tc.weight_decay;
  ap.layerwise_decay =
      tc.stage == TrainStage::finetune ? tc.layerwise_decay : 1.0;
  AdamW opt(model.params(),
            select_train_params(model.params(), tc.stage, tc.head), ap);
  for (size_t i : opt.selected()) {
    const int exp = model.params().entries()[i].decay_exponent;
    log.group_scale[exp] = std::pow(ap.layerwise_decay, double(exp));
  }

  detail::ParamSnapshot best;
  best.capture(model.params());
  double best_val = std::numeric_limits<double>::infinity();
  int64_t bad_epochs = 0;

  const size_t n = train.rd.size();
  for (int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const double lr = scheduled_lr(tc, epoch);
    Rng order_rng = derive_rng(tc.seed, "order", uint64_t(epoch));
    const std::vector<int> order =
        order_rng.sample_without_replacement(int(n), int(n));

    model.params().zero_grads();
    double train_sum = 0.0;
    size_t done = 0;
    while (done < n) {
      const size_t group = std::min<size_t>(size_t(tc.batch_size), n - done);
      for (size_t b = 0; b < group; ++b) {
        const size_t j = size_t(order[done + b]);
        Tensor tok = detail::clip_tokens(model, train, j);
        Tensor loss;
        if (tc.stage == TrainStage::pretrain) {
          MaskPlan plan = sample_mask(
              model.config().n_tokens(), model.config().mask_ratio,
              derive_seed(tc.seed, "mask", uint64_t(epoch),
                          uint64_t(train.clip_ids[j])));
          Tensor feat = model.encode(tok, &plan);
          loss = model.recon_loss(model.reconstruct(feat, plan), train.rd[j],
                                  plan);
        } else {
          Tensor feat = model.encode(tok);
          loss = detail::finetune_loss(
              model, feat, detail::supervision_labels(model, train, j),
              tc.head);
        }
        const double l = double(loss.data()[0]);
        detail::check_finite(l, "training", epoch, train.names[j]);
        train_sum += l;
        scale(loss, 1.0f / float(group)).backward();
      }
      opt.step(lr);
      model.params().zero_grads();
      done += group;
    }

    EpochLog el = validate_model(model, val, tc, span_x, span_y);
    el.epoch = epoch;
    el.train_loss = train_sum / double(n);
    el.lr = lr;
    log.epochs.push_back(el);
    log.stop_epoch = epoch + 1;

    const double metric =
        tc.stage == TrainStage::finetune ? el.val_mpjpe : el.val_loss;
    if (metric < best_val) {
      best_val = metric;
      log.best_epoch = epoch;
      best.capture(model.params());
      bad_epochs = 0;
    } else if (++bad_epochs >= tc.early_stop_patience) {
      log.stopped_early = true;
      break;
    }
  }

  best.restore(model.params());
  model.params().zero_grads();
  log.best_val = best_val;
  return log;
}

// Convenience wrapper: loads the split's clips from disk (running the
// leakage guard), applies pretrained initialization, and trains.
inline TrainLog train_on_split(MaePose& model,
                               const std::filesystem::path& dir,
                               const DatasetManifest& m, const FoldSplit& split,
                               const TrainConfig& tc,
                               const std::string& modality) {
  tc.validate();
  if (tc.init == InitKind::pretrained) {
    const nlohmann::json manifest = [&] {
      std::ifstream in(std::filesystem::path(tc.init_checkpoint) /
                       "manifest.json");
      if (!in)
        throw data_error("pretrained checkpoint missing at " +
                         tc.init_checkpoint);
      nlohmann::json j;
      in >> j;
      return j;
    }();
    const ModelConfig saved = manifest.at("config").get<ModelConfig>();
    const ModelConfig& mine = model.config();
    if (saved.t_in != mine.t_in || saved.img_h != mine.img_h ||
        saved.img_w != mine.img_w || saved.patch_t != mine.patch_t ||
        saved.patch_hw != mine.patch_hw || saved.embed_dim != mine.embed_dim ||
        saved.encoder_depth != mine.encoder_depth ||
        saved.encoder_heads != mine.encoder_heads)
      throw data_error("pretrained checkpoint architecture does not match");
    model.load_matching(tc.init_checkpoint);
  }
  FoldData train = load_fold_clips(dir, m, split.train, modality,
                                   split.test_person);
  FoldData val =
      load_fold_clips(dir, m, split.val, modality, split.test_person);
  return train_model(model, train, val, tc, m.scene.span_x(),
                     m.scene.span_y());
}

}  // namespace rvp
