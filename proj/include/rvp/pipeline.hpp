#pragma once

// Experiment plumbing behind the rvp command-line tool: config resolution
// with defaults < file < flags precedence, hash-named run directories,
// per-fold evaluation reports, cross-method statistics documents, and the
// runners that chain simulate / process / train / evaluate / report.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <json.hpp>

#include <rvp/dataset.hpp>
#include <rvp/errors.hpp>
#include <rvp/metrics.hpp>
#include <rvp/model.hpp>
#include <rvp/rng.hpp>
#include <rvp/stats.hpp>
#include <rvp/train.hpp>

namespace rvp {

// ---------------------------------------------------------------------------
// Experiment configuration

struct ExperimentConfig {
  std::string dataset_dir;
  std::string out_dir = "runs";
  std::string checkpoint;  // evaluate: model to load
  std::string modality = "rd";
  double val_fraction = 0.2;
  uint64_t seed = 1;
  std::vector<int> folds;  // test persons; empty means every person

  SceneConfig scene;
  RadarConfig radar;
  DspConfig dsp;
  ModelConfig model;
  TrainConfig pretrain;
  TrainConfig finetune;

  // Checks the fields shared by every subcommand. Stage-specific
  // requirements (an existing dataset, a checkpoint for pretrained init)
  // are enforced by the runner that needs them.
  void validate() const {
    if (modality != "rd" && modality != "ra" && modality != "dual")
      throw config_error("config: modality must be rd, ra, or dual");
    if (model.dual_stream != (modality == "dual"))
      throw config_error(
          "config: dual_stream models pair with the dual modality and "
          "single-stream models with rd or ra");
    if (!(val_fraction > 0.0 && val_fraction < 0.5))
      throw config_error("config: val_fraction must lie in (0, 0.5)");
    model.validate();
    TrainConfig pre = pretrain;
    pre.stage = TrainStage::pretrain;
    pre.validate();
    TrainConfig fin = finetune;
    fin.stage = TrainStage::finetune;
    if (fin.init == InitKind::pretrained && fin.init_checkpoint.empty())
      fin.init_checkpoint = "(assigned per fold)";
    fin.validate();
  }
};

inline void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  j = nlohmann::json{{"dataset_dir", c.dataset_dir},
                     {"out_dir", c.out_dir},
                     {"checkpoint", c.checkpoint},
                     {"modality", c.modality},
                     {"val_fraction", c.val_fraction},
                     {"seed", c.seed},
                     {"folds", c.folds},
                     {"scene", c.scene},
                     {"radar", c.radar},
                     {"dsp", c.dsp},
                     {"model", c.model},
                     {"pretrain", c.pretrain},
                     {"finetune", c.finetune}};
}

inline void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  j.at("dataset_dir").get_to(c.dataset_dir);
  j.at("out_dir").get_to(c.out_dir);
  j.at("checkpoint").get_to(c.checkpoint);
  j.at("modality").get_to(c.modality);
  j.at("val_fraction").get_to(c.val_fraction);
  j.at("seed").get_to(c.seed);
  j.at("folds").get_to(c.folds);
  j.at("scene").get_to(c.scene);
  j.at("radar").get_to(c.radar);
  j.at("dsp").get_to(c.dsp);
  j.at("model").get_to(c.model);
  j.at("pretrain").get_to(c.pretrain);
  j.at("finetune").get_to(c.finetune);
  c.pretrain.stage = TrainStage::pretrain;
  c.finetune.stage = TrainStage::finetune;
}

// Sets one field addressed by a dotted path ("finetune.head") in a config
// document. Every path segment except the last must already be an object.
inline void apply_override(nlohmann::json& doc, const std::string& key,
                           const nlohmann::json& value) {
  nlohmann::json* node = &doc;
  size_t start = 0;
  for (size_t dot = key.find('.'); dot != std::string::npos;
       dot = key.find('.', start)) {
    const std::string part = key.substr(start, dot - start);
    if (!node->contains(part) || !(*node)[part].is_object())
      throw config_error("config: unknown override path '" + key + "'");
    node = &(*node)[part];
    start = dot + 1;
  }
  const std::string leaf = key.substr(start);
  if (!node->contains(leaf))
    throw config_error("config: unknown override key '" + key + "'");
  if ((*node)[leaf].is_object())
    throw config_error("config: override '" + key + "' addresses a section");
  (*node)[leaf] = value;
}

// defaults < config file < flag overrides, merged as JSON so a partial file
// is fine; the result parses into a fully populated ExperimentConfig and is
// also the document persisted (and hashed) for the run.
inline nlohmann::json resolve_config_json(
    const nlohmann::json* file_doc,
    const std::vector<std::pair<std::string, nlohmann::json>>& overrides) {
  nlohmann::json doc = ExperimentConfig{};
  if (file_doc) {
    if (!file_doc->is_object())
      throw config_error("config: the config file must hold a JSON object");
    doc.update(*file_doc, /*merge_objects=*/true);
  }
  for (const auto& [key, value] : overrides) apply_override(doc, key, value);
  return doc;
}

inline nlohmann::json load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw config_error("config: cannot open " + path.string());
  nlohmann::json doc;
  try {
    in >> doc;
  } catch (const nlohmann::json::exception& e) {
    throw config_error("config: " + path.string() + ": " + e.what());
  }
  return doc;
}

inline ExperimentConfig parse_config(const nlohmann::json& resolved) {
  ExperimentConfig cfg;
  try {
    cfg = resolved.get<ExperimentConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw config_error(std::string("config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Run directories

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string config_hash(const nlohmann::json& resolved) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(fnv1a64(resolved.dump())));
  return buf;
}

inline std::string run_dir_name(const std::string& subcommand,
                                const nlohmann::json& resolved,
                                uint64_t seed) {
  return subcommand + "-" + config_hash(resolved).substr(0, 12) + "-s" +
         std::to_string(seed);
}

// Creates out_dir/<sub>-<hash>-s<seed> and persists the resolved config
// inside it, so the run is reproducible from its own directory alone.
inline std::filesystem::path prepare_run_dir(
    const std::filesystem::path& out_dir, const std::string& subcommand,
    const nlohmann::json& resolved, uint64_t seed) {
  const std::filesystem::path dir =
      out_dir / run_dir_name(subcommand, resolved, seed);
  std::filesystem::create_directories(dir);
  std::ofstream out(dir / "config.json");
  out << resolved.dump(2) << '\n';
  if (!out) throw data_error("run: cannot write " + (dir / "config.json").string());
  return dir;
}

// JSON-lines progress log: one self-contained object per line, mirrored to
// stderr so headless runs stay observable.
class JsonlLogger {
 public:
  JsonlLogger() = default;
  explicit JsonlLogger(const std::filesystem::path& path, bool echo = true)
      : out_(path), echo_(echo) {
    if (!out_) throw data_error("log: cannot open " + path.string());
  }

  void event(const nlohmann::json& j) {
    const std::string line = j.dump();
    if (out_.is_open()) out_ << line << '\n' << std::flush;
    if (echo_) std::cerr << line << '\n';
  }

 private:
  std::ofstream out_;
  bool echo_ = false;
};

// ---------------------------------------------------------------------------
// Fold reports

using JointTrack = std::vector<std::vector<std::array<double, 2>>>;

struct FoldClipEval {
  int64_t clip_id = -1;
  std::string name;
  std::string action;
  JointTrack pred;  // [frames][joints][2], normalized coordinates
  JointTrack gt;
};

struct FoldReport {
  int test_person = -1;
  double mpjpe_m = 0;  // metres
  double pck_05 = 0;   // fraction of joints within 0.05 m
  std::map<std::string, double> per_action_mpjpe;
  std::vector<FoldClipEval> clips;

  void validate() const {
    if (!(mpjpe_m >= 0) || !std::isfinite(mpjpe_m))
      throw data_error("fold report: mpjpe must be finite and non-negative");
    if (!(pck_05 >= 0.0 && pck_05 <= 1.0))
      throw data_error("fold report: pck must lie in [0, 1]");
    for (const auto& [action, v] : per_action_mpjpe)
      if (!(v >= 0) || !std::isfinite(v))
        throw data_error("fold report: per-action mpjpe invalid for " + action);
    if (clips.empty()) throw data_error("fold report: no clips");
  }
};

inline void to_json(nlohmann::json& j, const FoldClipEval& c) {
  j = nlohmann::json{{"clip_id", c.clip_id},
                     {"name", c.name},
                     {"action", c.action},
                     {"pred", c.pred},
                     {"gt", c.gt}};
}

inline void from_json(const nlohmann::json& j, FoldClipEval& c) {
  j.at("clip_id").get_to(c.clip_id);
  j.at("name").get_to(c.name);
  j.at("action").get_to(c.action);
  j.at("pred").get_to(c.pred);
  j.at("gt").get_to(c.gt);
}

inline void to_json(nlohmann::json& j, const FoldReport& r) {
  j = nlohmann::json{{"test_person", r.test_person},
                     {"mpjpe_m", r.mpjpe_m},
                     {"pck_05", r.pck_05},
                     {"per_action_mpjpe", r.per_action_mpjpe},
                     {"clips", r.clips}};
}

inline void from_json(const nlohmann::json& j, FoldReport& r) {
  j.at("test_person").get_to(r.test_person);
  j.at("mpjpe_m").get_to(r.mpjpe_m);
  j.at("pck_05").get_to(r.pck_05);
  j.at("per_action_mpjpe").get_to(r.per_action_mpjpe);
  j.at("clips").get_to(r.clips);
}

inline void write_fold_report(const std::filesystem::path& path,
                              const FoldReport& r) {
  r.validate();
  std::ofstream out(path);
  if (!out) throw data_error("fold report: cannot write " + path.string());
  out << nlohmann::json(r).dump(2) << '\n';
}

inline FoldReport read_fold_report(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw data_error("fold report: cannot open " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw data_error("fold report: " + path.string() + ": " + e.what());
  }
  FoldReport r;
  try {
    r = j.get<FoldReport>();
  } catch (const nlohmann::json::exception& e) {
    throw data_error("fold report: " + path.string() + ": " + e.what());
  }
  r.validate();
  return r;
}

namespace detail {

inline JointTrack coords_to_track(const Tensor& t) {
  if (t.ndim() != 3 || t.dim(2) != 2)
    throw dimension_error("coords_to_track: expected [F, K, 2]");
  JointTrack out(size_t(t.dim(0)));
  const float* p = t.data();
  for (auto& frame : out) {
    frame.resize(size_t(t.dim(1)));
    for (auto& joint : frame) {
      joint[0] = double(p[0]);
      joint[1] = double(p[1]);
      p += 2;
    }
  }
  return out;
}

}  // namespace detail

// Runs the model over every listed clip of the held-out person and collects
// predictions, ground truth, and the fold-level metrics.
inline FoldReport evaluate_fold(const MaePose& model,
                                const std::filesystem::path& dataset_dir,
                                const DatasetManifest& m,
                                const std::vector<size_t>& clip_indices,
                                const std::string& modality, HeadKind head,
                                int test_person) {
  const FoldData data =
      load_fold_clips(dataset_dir, m, clip_indices, modality, test_person,
                      /*allow_test_person=*/true);
  if (data.rd.empty()) throw data_error("evaluate: no clips to evaluate");

  FoldReport rep;
  rep.test_person = test_person;
  MetricsAccumulator acc;
  const double sx = m.scene.span_x();
  const double sy = m.scene.span_y();
  for (size_t j = 0; j < data.rd.size(); ++j) {
    const Tensor tokens = detail::clip_tokens(model, data, j);
    const Tensor feat = model.encode(tokens);
    const Tensor pred = detail::predict_skeleton(model, feat, head);
    const Tensor gt = detail::supervision_labels(model, data, j);
    acc.add(data.actions[j], pose_metrics(pred, gt, sx, sy));

    FoldClipEval clip;
    clip.clip_id = int64_t(data.clip_ids[j]);
    clip.name = data.names[j];
    clip.action = data.actions[j];
    clip.pred = detail::coords_to_track(pred);
    clip.gt = detail::coords_to_track(gt);
    rep.clips.push_back(std::move(clip));
  }
  rep.mpjpe_m = acc.mpjpe();
  rep.pck_05 = acc.pck();
  rep.per_action_mpjpe = acc.action_mpjpe();
  rep.validate();
  return rep;
}

// ---------------------------------------------------------------------------
// Aggregates and cross-method statistics

struct Aggregate {
  int n_folds = 0;
  double mpjpe_mean = 0, mpjpe_std = 0;
  double pck_mean = 0, pck_std = 0;
};

inline void to_json(nlohmann::json& j, const Aggregate& a) {
  j = nlohmann::json{{"n_folds", a.n_folds},
                     {"mpjpe_mean", a.mpjpe_mean},
                     {"mpjpe_std", a.mpjpe_std},
                     {"pck_mean", a.pck_mean},
                     {"pck_std", a.pck_std}};
}

namespace detail {

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  const double n = double(v.size());
  double mean = 0;
  for (double x : v) mean += x;
  mean /= n;
  if (v.size() < 2) return {mean, 0.0};
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return {mean, std::sqrt(ss / (n - 1))};
}

}  // namespace detail

inline Aggregate aggregate_folds(const std::vector<FoldReport>& folds) {
  if (folds.empty()) throw data_error("aggregate: no fold reports");
  std::vector<double> mpjpe, pck;
  for (const auto& f : folds) {
    mpjpe.push_back(f.mpjpe_m);
    pck.push_back(f.pck_05);
  }
  Aggregate a;
  a.n_folds = int(folds.size());
  std::tie(a.mpjpe_mean, a.mpjpe_std) = detail::mean_std(mpjpe);
  std::tie(a.pck_mean, a.pck_std) = detail::mean_std(pck);
  return a;
}

// Loads every fold_*.json in a directory, ordered by test person.
inline std::vector<FoldReport> read_fold_reports(
    const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir))
    throw data_error("report: not a directory: " + dir.string());
  std::vector<FoldReport> folds;
  std::vector<std::filesystem::path> paths;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("fold_", 0) == 0 && entry.path().extension() == ".json")
      paths.push_back(entry.path());
  }
  std::sort(paths.begin(), paths.end());
  for (const auto& p : paths) folds.push_back(read_fold_report(p));
  if (folds.empty())
    throw data_error("report: no fold_*.json files in " + dir.string());
  std::sort(folds.begin(), folds.end(),
            [](const FoldReport& a, const FoldReport& b) {
              return a.test_person < b.test_person;
            });
  for (size_t i = 1; i < folds.size(); ++i)
    if (folds[i].test_person == folds[i - 1].test_person)
      throw data_error("report: duplicate fold for person " +
                       std::to_string(folds[i].test_person) + " in " +
                       dir.string());
  return folds;
}

struct MethodFolds {
  std::string name;
  std::vector<FoldReport> folds;
};

struct StatsDoc {
  std::vector<std::string> methods;
  std::vector<int> fold_persons;
  std::vector<std::vector<double>> matrix;  // [fold][method] MPJPE in metres
  std::vector<Aggregate> aggregates;        // per method
  StatsReport stats;
};

// Assembles the per-fold MPJPE matrix across methods (identical fold sets
// required) and runs the omnibus-gated pairwise comparison on it.
inline StatsDoc build_stats_doc(const std::vector<MethodFolds>& methods,
                                double alpha = 0.05) {
  if (methods.size() < 2)
    throw config_error("report: need at least two methods to compare");
  StatsDoc doc;
  for (const auto& m : methods) {
    if (m.folds.empty()) throw data_error("report: method " + m.name + " is empty");
    doc.methods.push_back(m.name);
    doc.aggregates.push_back(aggregate_folds(m.folds));
  }
  for (const auto& f : methods[0].folds) doc.fold_persons.push_back(f.test_person);
  for (const auto& m : methods) {
    if (m.folds.size() != doc.fold_persons.size())
      throw data_error("report: method " + m.name + " has a different fold count");
    for (size_t i = 0; i < m.folds.size(); ++i)
      if (m.folds[i].test_person != doc.fold_persons[i])
        throw data_error("report: method " + m.name +
                         " covers different test persons");
  }
  doc.matrix.assign(doc.fold_persons.size(),
                    std::vector<double>(methods.size(), 0.0));
  for (size_t mi = 0; mi < methods.size(); ++mi)
    for (size_t fi = 0; fi < methods[mi].folds.size(); ++fi)
      doc.matrix[fi][mi] = methods[mi].folds[fi].mpjpe_m;
  doc.stats = compare_methods(doc.matrix, alpha);
  return doc;
}

inline void to_json(nlohmann::json& j, const StatsDoc& d) {
  const char* family = "none";
  if (!d.stats.pairwise.empty())
    family = d.stats.all_methods_normal ? "paired_t" : "wilcoxon";
  nlohmann::json pairs = nlohmann::json::array();
  for (const auto& p : d.stats.pairwise)
    pairs.push_back({{"method_a", d.methods[size_t(p.method_a)]},
                     {"method_b", d.methods[size_t(p.method_b)]},
                     {"test", p.test},
                     {"statistic", p.statistic},
                     {"p_raw", p.p_raw},
                     {"p_adjusted", p.p_adjusted},
                     {"effect", p.effect},
                     {"significant", p.significant}});
  j = nlohmann::json{{"metric", "mpjpe_m"},
                     {"methods", d.methods},
                     {"fold_persons", d.fold_persons},
                     {"matrix", d.matrix},
                     {"aggregates", d.aggregates},
                     {"alpha", d.stats.alpha},
                     {"friedman",
                      {{"statistic", d.stats.friedman_statistic},
                       {"p", d.stats.friedman_p},
                       {"significant", d.stats.friedman_significant},
                       {"mean_ranks", d.stats.mean_ranks}}},
                     {"shapiro_p", d.stats.method_shapiro_p},
                     {"family", family},
                     {"pairwise", pairs}};
}

// Fixed-width mean±std table plus the omnibus and pairwise lines, built
// with snprintf so the text is deterministic.
inline std::string format_stats_table(const StatsDoc& d) {
  std::string out;
  char line[256];
  size_t widest = 6;
  for (const auto& m : d.methods) widest = std::max(widest, m.size());
  const int w = int(widest);
  // Every cell below holds exactly one two-byte sign, so a fixed byte
  // width of 22 lines the columns up at 21 characters.
  std::snprintf(line, sizeof line, "%-*s  %-22s  %-22s  %s\n", w, "method",
                "mpjpe_m (mean\xC2\xB1std)", "pck@0.05 (mean\xC2\xB1std)",
                "mean rank");
  out += line;
  for (size_t i = 0; i < d.methods.size(); ++i) {
    const Aggregate& a = d.aggregates[i];
    char mp[40], pc[40];
    std::snprintf(mp, sizeof mp, "%.4f \xC2\xB1 %.4f", a.mpjpe_mean, a.mpjpe_std);
    std::snprintf(pc, sizeof pc, "%.3f \xC2\xB1 %.3f", a.pck_mean, a.pck_std);
    std::snprintf(line, sizeof line, "%-*s  %-22s  %-22s  %.2f\n", w,
                  d.methods[i].c_str(), mp, pc, d.stats.mean_ranks[i]);
    out += line;
  }
  std::snprintf(line, sizeof line,
                "Friedman: statistic = %.4f, p = %.4g (%ssignificant at "
                "alpha %.2f)\n",
                d.stats.friedman_statistic, d.stats.friedman_p,
                d.stats.friedman_significant ? "" : "not ", d.stats.alpha);
  out += line;
  if (d.stats.pairwise.empty()) {
    out += "Pairwise comparisons: skipped (omnibus not significant)\n";
    return out;
  }
  const bool t_family = d.stats.all_methods_normal;
  std::snprintf(line, sizeof line,
                "Pairwise (%s, Bonferroni over %zu pair%s):\n",
                t_family ? "paired t" : "Wilcoxon signed-rank",
                d.stats.pairwise.size(),
                d.stats.pairwise.size() == 1 ? "" : "s");
  out += line;
  for (const auto& p : d.stats.pairwise) {
    std::snprintf(line, sizeof line,
                  "  %s vs %s: statistic = %.4f, p_raw = %.4g, p_adj = %.4g, "
                  "%s = %.3f%s\n",
                  d.methods[size_t(p.method_a)].c_str(),
                  d.methods[size_t(p.method_b)].c_str(), p.statistic, p.p_raw,
                  p.p_adjusted, t_family ? "d" : "r", p.effect,
                  p.significant ? " *" : "");
    out += line;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Runners (one per subcommand, minus report which takes method directories)

namespace detail {

inline DatasetManifest load_processed_manifest(
    const std::filesystem::path& dir) {
  if (dir.empty()) throw config_error("run: dataset_dir is empty");
  DatasetManifest m = load_manifest(dir);
  if (!m.processed)
    throw data_error("run: dataset has no spectrogram clips; run process first");
  return m;
}

inline std::vector<int> fold_persons(const ExperimentConfig& cfg,
                                     const DatasetManifest& m) {
  if (!cfg.folds.empty()) return cfg.folds;
  std::set<int> persons;
  for (const auto& c : m.clips) persons.insert(c.person);
  return std::vector<int>(persons.begin(), persons.end());
}

inline int single_fold(const ExperimentConfig& cfg, const char* sub) {
  if (cfg.folds.size() != 1)
    throw config_error(std::string(sub) +
                       ": exactly one fold (test person) is required");
  return cfg.folds[0];
}

inline void write_train_log(const std::filesystem::path& path,
                            const TrainLog& log) {
  std::ofstream out(path);
  if (!out) throw data_error("run: cannot write " + path.string());
  write_train_log_jsonl(out, log);
}

}  // namespace detail

inline std::filesystem::path run_simulate(const ExperimentConfig& cfg,
                                          const nlohmann::json& resolved) {
  if (cfg.dataset_dir.empty())
    throw config_error("simulate: dataset_dir is required");
  const std::filesystem::path dir = cfg.dataset_dir;
  simulate_dataset(dir, cfg.scene, cfg.radar,
                   derive_seed(cfg.seed, "simulate"));
  std::ofstream out(dir / "config.json");
  out << resolved.dump(2) << '\n';
  return dir;
}

inline std::filesystem::path run_process(const ExperimentConfig& cfg) {
  if (cfg.dataset_dir.empty())
    throw config_error("process: dataset_dir is required");
  process_dataset(cfg.dataset_dir, cfg.dsp);
  return cfg.dataset_dir;
}

inline std::filesystem::path run_pretrain(const ExperimentConfig& cfg,
                                          const nlohmann::json& resolved) {
  const DatasetManifest m = detail::load_processed_manifest(cfg.dataset_dir);
  const int person = detail::single_fold(cfg, "pretrain");
  const auto run_dir =
      prepare_run_dir(cfg.out_dir, "pretrain", resolved, cfg.seed);
  JsonlLogger log(run_dir / "log.jsonl");
  log.event({{"event", "run"},
             {"subcommand", "pretrain"},
             {"test_person", person},
             {"dir", run_dir.string()}});

  const FoldSplit split = make_lopo_split(
      m, person, cfg.val_fraction, derive_seed(cfg.seed, "split", person));
  MaePose model(cfg.model, derive_seed(cfg.seed, "model-pre", person));
  TrainConfig tc = cfg.pretrain;
  tc.stage = TrainStage::pretrain;
  tc.seed = derive_seed(cfg.seed, "pretrain", person);
  const TrainLog tl =
      train_on_split(model, cfg.dataset_dir, m, split, tc, cfg.modality);
  detail::write_train_log(run_dir / "train_log.jsonl", tl);
  model.save(run_dir / "checkpoint");
  log.event({{"event", "done"},
             {"best_epoch", tl.best_epoch},
             {"best_val", tl.best_val},
             {"stopped_early", tl.stopped_early}});
  return run_dir;
}

inline std::filesystem::path run_finetune(const ExperimentConfig& cfg,
                                          const nlohmann::json& resolved) {
  const DatasetManifest m = detail::load_processed_manifest(cfg.dataset_dir);
  const int person = detail::single_fold(cfg, "finetune");
  TrainConfig tc = cfg.finetune;
  tc.stage = TrainStage::finetune;
  if (tc.init == InitKind::pretrained && tc.init_checkpoint.empty())
    throw config_error(
        "finetune: pretrained init needs finetune.init_checkpoint");
  const auto run_dir =
      prepare_run_dir(cfg.out_dir, "finetune", resolved, cfg.seed);
  JsonlLogger log(run_dir / "log.jsonl");
  log.event({{"event", "run"},
             {"subcommand", "finetune"},
             {"test_person", person},
             {"head", to_string(tc.head)},
             {"dir", run_dir.string()}});

  const FoldSplit split = make_lopo_split(
      m, person, cfg.val_fraction, derive_seed(cfg.seed, "split", person));
  MaePose model(cfg.model, derive_seed(cfg.seed, "model-ft", person));
  tc.seed = derive_seed(cfg.seed, "finetune", person);
  const TrainLog tl =
      train_on_split(model, cfg.dataset_dir, m, split, tc, cfg.modality);
  detail::write_train_log(run_dir / "train_log.jsonl", tl);
  model.save(run_dir / "checkpoint");
  log.event({{"event", "done"},
             {"best_epoch", tl.best_epoch},
             {"best_val_mpjpe", tl.best_val},
             {"stopped_early", tl.stopped_early}});
  return run_dir;
}

inline std::filesystem::path run_evaluate(const ExperimentConfig& cfg,
                                          const nlohmann::json& resolved) {
  const DatasetManifest m = detail::load_processed_manifest(cfg.dataset_dir);
  const int person = detail::single_fold(cfg, "evaluate");
  if (cfg.checkpoint.empty())
    throw config_error("evaluate: checkpoint is required");
  MaePose model = MaePose::load(cfg.checkpoint);
  if (model.config().dual_stream != (cfg.modality == "dual"))
    throw config_error(
        "evaluate: checkpoint stream layout does not match the modality");

  const auto run_dir =
      prepare_run_dir(cfg.out_dir, "evaluate", resolved, cfg.seed);
  JsonlLogger log(run_dir / "log.jsonl");
  log.event({{"event", "run"},
             {"subcommand", "evaluate"},
             {"test_person", person},
             {"checkpoint", cfg.checkpoint},
             {"dir", run_dir.string()}});

  const FoldSplit split = make_lopo_split(
      m, person, cfg.val_fraction, derive_seed(cfg.seed, "split", person));
  const FoldReport rep =
      evaluate_fold(model, cfg.dataset_dir, m, split.test, cfg.modality,
                    cfg.finetune.head, person);
  write_fold_report(
      run_dir / ("fold_" + std::to_string(person) + ".json"), rep);
  log.event({{"event", "fold"},
             {"test_person", person},
             {"mpjpe_m", rep.mpjpe_m},
             {"pck_05", rep.pck_05}});
  return run_dir;
}

// Chains the per-fold pipeline for every test person: optional masked
// pre-training, fine-tuning, and held-out evaluation, then aggregates.
// Folds run sequentially; every stage seed derives from (root seed, stage
// tag, person), so a fold's results do not depend on which folds ran.
inline std::filesystem::path run_lopo(const ExperimentConfig& cfg,
                                      const nlohmann::json& resolved) {
  const DatasetManifest m = detail::load_processed_manifest(cfg.dataset_dir);
  const std::vector<int> persons = detail::fold_persons(cfg, m);
  if (persons.empty()) throw data_error("lopo: dataset has no persons");
  const auto run_dir = prepare_run_dir(cfg.out_dir, "lopo", resolved, cfg.seed);
  const auto folds_dir = run_dir / "folds";
  std::filesystem::create_directories(folds_dir);
  JsonlLogger log(run_dir / "log.jsonl");
  log.event({{"event", "run"},
             {"subcommand", "lopo"},
             {"folds", persons},
             {"head", to_string(cfg.finetune.head)},
             {"init", to_string(cfg.finetune.init)},
             {"modality", cfg.modality},
             {"dir", run_dir.string()}});

  std::vector<FoldReport> reports;
  for (int person : persons) {
    const auto fold_dir = run_dir / ("fold_" + std::to_string(person));
    std::filesystem::create_directories(fold_dir);
    const FoldSplit split = make_lopo_split(
        m, person, cfg.val_fraction, derive_seed(cfg.seed, "split", person));

    TrainConfig ft = cfg.finetune;
    ft.stage = TrainStage::finetune;
    ft.seed = derive_seed(cfg.seed, "finetune", person);
    if (ft.init == InitKind::pretrained && ft.init_checkpoint.empty()) {
      MaePose pre(cfg.model, derive_seed(cfg.seed, "model-pre", person));
      TrainConfig pt = cfg.pretrain;
      pt.stage = TrainStage::pretrain;
      pt.seed = derive_seed(cfg.seed, "pretrain", person);
      const TrainLog plog =
          train_on_split(pre, cfg.dataset_dir, m, split, pt, cfg.modality);
      detail::write_train_log(fold_dir / "pretrain_log.jsonl", plog);
      pre.save(fold_dir / "pretrain_checkpoint");
      ft.init_checkpoint = (fold_dir / "pretrain_checkpoint").string();
      log.event({{"event", "pretrain"},
                 {"test_person", person},
                 {"best_epoch", plog.best_epoch},
                 {"best_val", plog.best_val}});
    }

    MaePose model(cfg.model, derive_seed(cfg.seed, "model-ft", person));
    const TrainLog flog =
        train_on_split(model, cfg.dataset_dir, m, split, ft, cfg.modality);
    detail::write_train_log(fold_dir / "train_log.jsonl", flog);
    model.save(fold_dir / "checkpoint");

    const FoldReport rep = evaluate_fold(
        model, cfg.dataset_dir, m, split.test, cfg.modality, ft.head, person);
    write_fold_report(
        folds_dir / ("fold_" + std::to_string(person) + ".json"), rep);
    reports.push_back(rep);
    log.event({{"event", "fold"},
               {"test_person", person},
               {"best_epoch", flog.best_epoch},
               {"best_val_mpjpe", flog.best_val},
               {"mpjpe_m", rep.mpjpe_m},
               {"pck_05", rep.pck_05}});
  }

  const Aggregate agg = aggregate_folds(reports);
  {
    std::ofstream out(run_dir / "aggregate.json");
    out << nlohmann::json(agg).dump(2) << '\n';
    if (!out)
      throw data_error("lopo: cannot write " +
                       (run_dir / "aggregate.json").string());
  }
  log.event({{"event", "done"},
             {"n_folds", agg.n_folds},
             {"mpjpe_mean", agg.mpjpe_mean},
             {"mpjpe_std", agg.mpjpe_std},
             {"pck_mean", agg.pck_mean},
             {"pck_std", agg.pck_std}});
  return run_dir;
}

// methods: (name, fold-report directory) pairs, CLI order preserved.
inline std::filesystem::path run_report(
    const std::vector<std::pair<std::string, std::string>>& methods,
    const std::filesystem::path& out_dir, const nlohmann::json& resolved,
    uint64_t seed, std::string* table_out = nullptr) {
  std::vector<MethodFolds> loaded;
  for (const auto& [name, dir] : methods)
    loaded.push_back({name, read_fold_reports(dir)});
  const StatsDoc doc = build_stats_doc(loaded);

  const auto run_dir = prepare_run_dir(out_dir, "report", resolved, seed);
  {
    std::ofstream out(run_dir / "stats.json");
    out << nlohmann::json(doc).dump(2) << '\n';
    if (!out)
      throw data_error("report: cannot write " +
                       (run_dir / "stats.json").string());
  }
  const std::string table = format_stats_table(doc);
  {
    std::ofstream out(run_dir / "table.txt");
    out << table;
  }
  if (table_out) *table_out = table;
  return run_dir;
}

}  // namespace rvp
