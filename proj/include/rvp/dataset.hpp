#pragma once

// On-disk dataset: a manifest plus one tensor file per clip for raw IQ,
// labels, and the two processed spectrogram videos. `simulate_dataset`
// writes scenes/IQ/labels, `process_dataset` adds the videos, and the
// leave-one-person-out split machinery hands out index sets over the
// manifest's clip list.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include <rvp/dsp.hpp>
#include <rvp/errors.hpp>
#include <rvp/radar.hpp>
#include <rvp/scene.hpp>
#include <rvp/serialize.hpp>

namespace rvp {

using nlohmann::json;

inline void to_json(json& j, const RadarConfig& c) {
  j = json{{"start_freq", c.start_freq},
           {"slope", c.slope},
           {"adc_rate", c.adc_rate},
           {"n_adc", c.n_adc},
           {"n_chirps", c.n_chirps},
           {"chirp_interval", c.chirp_interval},
           {"n_antennas", c.n_antennas},
           {"frame_interval", c.frame_interval},
           {"noise_std", c.noise_std}};
}

inline void from_json(const json& j, RadarConfig& c) {
  j.at("start_freq").get_to(c.start_freq);
  j.at("slope").get_to(c.slope);
  j.at("adc_rate").get_to(c.adc_rate);
  j.at("n_adc").get_to(c.n_adc);
  j.at("n_chirps").get_to(c.n_chirps);
  j.at("chirp_interval").get_to(c.chirp_interval);
  j.at("n_antennas").get_to(c.n_antennas);
  j.at("frame_interval").get_to(c.frame_interval);
  j.at("noise_std").get_to(c.noise_std);
}

inline void to_json(json& j, const SceneConfig& c) {
  j = json{{"x_min", c.x_min},
           {"x_max", c.x_max},
           {"y_min", c.y_min},
           {"y_max", c.y_max},
           {"n_persons", c.n_persons},
           {"n_actions", c.n_actions},
           {"clips_per_pair", c.clips_per_pair},
           {"frames_per_clip", c.frames_per_clip},
           {"frame_interval", c.frame_interval},
           {"interference", c.interference},
           {"torso_amp", c.torso_amp},
           {"limb_amp", c.limb_amp},
           {"bystander_scatterers", c.bystander_scatterers},
           {"bystander_amp", c.bystander_amp},
           {"bystander_spread", c.bystander_spread}};
}

inline void from_json(const json& j, SceneConfig& c) {
  j.at("x_min").get_to(c.x_min);
  j.at("x_max").get_to(c.x_max);
  j.at("y_min").get_to(c.y_min);
  j.at("y_max").get_to(c.y_max);
  j.at("n_persons").get_to(c.n_persons);
  j.at("n_actions").get_to(c.n_actions);
  j.at("clips_per_pair").get_to(c.clips_per_pair);
  j.at("frames_per_clip").get_to(c.frames_per_clip);
  j.at("frame_interval").get_to(c.frame_interval);
  j.at("interference").get_to(c.interference);
  j.at("torso_amp").get_to(c.torso_amp);
  j.at("limb_amp").get_to(c.limb_amp);
  j.at("bystander_scatterers").get_to(c.bystander_scatterers);
  j.at("bystander_amp").get_to(c.bystander_amp);
  j.at("bystander_spread").get_to(c.bystander_spread);
}

inline void to_json(json& j, const DspConfig& c) {
  j = json{{"angle_fft", c.angle_fft}, {"out_h", c.out_h}, {"out_w", c.out_w}};
}

inline void from_json(const json& j, DspConfig& c) {
  j.at("angle_fft").get_to(c.angle_fft);
  j.at("out_h").get_to(c.out_h);
  j.at("out_w").get_to(c.out_w);
}

struct ClipRecord {
  std::string name;
  int person = 0;
  int action = 0;
  int clip_index = 0;
  bool interference = false;
  std::string action_name;
  std::string iq_file;      // [T, chirps, adc, antennas, 2]
  std::string labels_file;  // [T, 13, 2]
  std::string rd_file;      // [T, out_h, out_w], set by process_dataset
  std::string ra_file;
  bool rd_degenerate = false;
  bool ra_degenerate = false;
};

inline void to_json(json& j, const ClipRecord& r) {
  j = json{{"name", r.name},
           {"person", r.person},
           {"action", r.action},
           {"clip_index", r.clip_index},
           {"interference", r.interference},
           {"action_name", r.action_name},
           {"iq_file", r.iq_file},
           {"labels_file", r.labels_file},
           {"rd_file", r.rd_file},
           {"ra_file", r.ra_file},
           {"rd_degenerate", r.rd_degenerate},
           {"ra_degenerate", r.ra_degenerate}};
}

inline void from_json(const json& j, ClipRecord& r) {
  j.at("name").get_to(r.name);
  j.at("person").get_to(r.person);
  j.at("action").get_to(r.action);
  j.at("clip_index").get_to(r.clip_index);
  j.at("interference").get_to(r.interference);
  j.at("action_name").get_to(r.action_name);
  j.at("iq_file").get_to(r.iq_file);
  j.at("labels_file").get_to(r.labels_file);
  j.at("rd_file").get_to(r.rd_file);
  j.at("ra_file").get_to(r.ra_file);
  j.at("rd_degenerate").get_to(r.rd_degenerate);
  j.at("ra_degenerate").get_to(r.ra_degenerate);
}

struct DatasetManifest {
  uint64_t seed = 0;
  bool processed = false;
  SceneConfig scene;
  RadarConfig radar;
  DspConfig dsp;  // meaningful once processed
  std::vector<ClipRecord> clips;
};

inline void to_json(json& j, const DatasetManifest& m) {
  j = json{{"seed", m.seed},       {"processed", m.processed},
           {"scene", m.scene},     {"radar", m.radar},
           {"dsp", m.dsp},         {"clips", m.clips}};
}

inline void from_json(const json& j, DatasetManifest& m) {
  j.at("seed").get_to(m.seed);
  j.at("processed").get_to(m.processed);
  j.at("scene").get_to(m.scene);
  j.at("radar").get_to(m.radar);
  j.at("dsp").get_to(m.dsp);
  j.at("clips").get_to(m.clips);
}

inline void save_manifest(const std::filesystem::path& dir,
                          const DatasetManifest& m) {
  std::ofstream out(dir / "manifest.json");
  if (!out) throw data_error("cannot write " + (dir / "manifest.json").string());
  out << json(m).dump(2) << "\n";
}

inline DatasetManifest load_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw data_error("cannot open " + path.string());
  json j;
  try {
    in >> j;
    return j.get<DatasetManifest>();
  } catch (const json::exception& e) {
    throw data_error("malformed manifest " + path.string() + ": " + e.what());
  }
}

// Packs one clip's IQ frames as [T, chirps, adc, antennas, 2] with the
// real/imag pair innermost.
inline Tensor iq_frames_to_tensor(const RadarConfig& rc,
                                  const std::vector<std::vector<c32>>& frames) {
  const int64_t T = int64_t(frames.size());
  Tensor t({T, rc.n_chirps, rc.n_adc, rc.n_antennas, 2});
  float* dst = t.data();
  for (const auto& frame : frames) {
    if (int64_t(frame.size()) != rc.samples_per_frame())
      throw dimension_error("iq frame size mismatch");
    for (const c32& v : frame) {
      *dst++ = v.real();
      *dst++ = v.imag();
    }
  }
  return t;
}

inline std::vector<std::vector<c32>> iq_tensor_to_frames(const RadarConfig& rc,
                                                         const Tensor& t) {
  if (t.ndim() != 5 || t.dim(1) != rc.n_chirps || t.dim(2) != rc.n_adc ||
      t.dim(3) != rc.n_antennas || t.dim(4) != 2)
    throw data_error("iq tensor does not match the radar configuration");
  std::vector<std::vector<c32>> frames(static_cast<size_t>(t.dim(0)));
  const float* src = t.data();
  for (auto& frame : frames) {
    frame.resize(static_cast<size_t>(rc.samples_per_frame()));
    for (c32& v : frame) {
      v = c32(src[0], src[1]);
      src += 2;
    }
  }
  return frames;
}

// Generates scenes and writes IQ + labels + manifest under dir. Noise is
// baked into the stored IQ; everything downstream is deterministic.
inline DatasetManifest simulate_dataset(const std::filesystem::path& dir,
                                        const SceneConfig& sc,
                                        const RadarConfig& rc, uint64_t seed) {
  sc.validate();
  rc.validate();
  if (std::abs(sc.frame_interval - rc.frame_interval) > 1e-12)
    throw config_error("scene and radar frame intervals disagree");
  namespace fs = std::filesystem;
  fs::create_directories(dir / "iq");
  fs::create_directories(dir / "labels");
  DatasetManifest m;
  m.seed = seed;
  m.scene = sc;
  m.radar = rc;
  const std::vector<ClipScene> scenes = generate_scenes(sc, seed);
  for (const ClipScene& cs : scenes) {
    ClipRecord rec;
    rec.name = clip_name(cs);
    rec.person = cs.person;
    rec.action = cs.action;
    rec.clip_index = cs.clip_index;
    rec.interference = cs.interference;
    rec.action_name = cs.action_name;
    rec.iq_file = "iq/" + rec.name + ".rvt";
    rec.labels_file = "labels/" + rec.name + ".rvt";

    Rng noise = derive_rng(seed, "noise", cs.person, cs.action, cs.clip_index);
    std::vector<std::vector<c32>> frames;
    frames.reserve(cs.frames.size());
    for (const auto& scatterers : cs.frames)
      frames.push_back(synth_frame(rc, scatterers, noise));
    write_tensor(dir / rec.iq_file, iq_frames_to_tensor(rc, frames));

    Tensor labels({int64_t(cs.frames.size()), kNumJoints, 2});
    std::copy(cs.labels.begin(), cs.labels.end(), labels.data());
    write_tensor(dir / rec.labels_file, labels);
    m.clips.push_back(std::move(rec));
  }
  save_manifest(dir, m);
  return m;
}

// Reads stored IQ and writes the rd/ra spectrogram videos next to it.
inline DatasetManifest process_dataset(const std::filesystem::path& dir,
                                       const DspConfig& dc) {
  DatasetManifest m = load_manifest(dir);
  dc.validate(m.radar);
  std::filesystem::create_directories(dir / "clips");
  for (ClipRecord& rec : m.clips) {
    const Tensor iq = read_tensor(dir / rec.iq_file);
    const auto frames = iq_tensor_to_frames(m.radar, iq);
    std::vector<FrameMaps> maps;
    maps.reserve(frames.size());
    for (const auto& f : frames)
      maps.push_back(iq_to_maps(m.radar, f.data(), dc.angle_fft));
    std::vector<const float*> rd_ptrs, ra_ptrs;
    for (const FrameMaps& fm : maps) {
      rd_ptrs.push_back(fm.rd.data());
      ra_ptrs.push_back(fm.ra.data());
    }
    rec.rd_file = "clips/" + rec.name + "_rd.rvt";
    rec.ra_file = "clips/" + rec.name + "_ra.rvt";
    write_tensor(dir / rec.rd_file,
                 maps_to_clip(rd_ptrs, m.radar.n_adc, m.radar.n_chirps, dc.out_h,
                              dc.out_w, &rec.rd_degenerate));
    write_tensor(dir / rec.ra_file,
                 maps_to_clip(ra_ptrs, m.radar.n_adc, dc.angle_fft, dc.out_h,
                              dc.out_w, &rec.ra_degenerate));
  }
  m.dsp = dc;
  m.processed = true;
  save_manifest(dir, m);
  return m;
}

inline Tensor load_clip_video(const std::filesystem::path& dir,
                              const ClipRecord& rec,
                              const std::string& representation) {
  std::string file;
  if (representation == "rd")
    file = rec.rd_file;
  else if (representation == "ra")
    file = rec.ra_file;
  else
    throw config_error("unknown representation '" + representation + "'");
  if (file.empty())
    throw data_error("clip " + rec.name + " has not been processed yet");
  return read_tensor(dir / file);
}

inline Tensor load_clip_labels(const std::filesystem::path& dir,
                               const ClipRecord& rec) {
  Tensor t = read_tensor(dir / rec.labels_file);
  if (t.ndim() != 3 || t.dim(1) != kNumJoints || t.dim(2) != 2)
    throw data_error("labels for " + rec.name + " have the wrong shape");
  return t;
}

// Which input frames the pose decoder's temporally downsampled outputs line
// up with: output step i covers input frames [4i, 4i+3], so supervision
// uses the frame one step into that window.
inline std::vector<int64_t> label_frame_indices(int64_t t_in, int64_t t_out) {
  if (t_out < 1 || t_in < 4 * t_out)
    throw dimension_error("label_frame_indices: incompatible frame counts");
  const int64_t step = t_in / t_out;
  std::vector<int64_t> idx(static_cast<size_t>(t_out));
  for (int64_t i = 0; i < t_out; ++i)
    idx[static_cast<size_t>(i)] = std::min(t_in - 1, i * step + step / 2 - 1);
  return idx;
}

struct FoldSplit {
  int test_person = 0;
  std::vector<size_t> train, val, test;  // indices into manifest.clips
};

// Leave-one-person-out split with a validation subset carved out of the
// remaining persons' clips. Validation picks are stratified per
// (person, action) cell by largest-remainder quotas; when every cell holds
// a single clip the strata pool to whole persons so validation does not eat
// an entire cell.
inline FoldSplit make_lopo_split(const DatasetManifest& m, int test_person,
                                 double val_fraction, uint64_t seed,
                                 std::vector<std::string>* warnings = nullptr) {
  if (val_fraction <= 0.0 || val_fraction >= 0.5)
    throw config_error("val_fraction must lie in (0, 0.5)");
  bool person_exists = false;
  for (const ClipRecord& r : m.clips) person_exists |= r.person == test_person;
  if (!person_exists)
    throw config_error("test person " + std::to_string(test_person) +
                       " has no clips");
  FoldSplit split;
  split.test_person = test_person;

  std::map<std::pair<int, int>, std::vector<size_t>> cells;
  for (size_t i = 0; i < m.clips.size(); ++i) {
    const ClipRecord& r = m.clips[i];
    if (r.person == test_person) {
      split.test.push_back(i);
    } else {
      cells[{r.person, r.action}].push_back(i);
    }
  }
  if (cells.empty()) throw config_error("no training persons left in the fold");

  bool all_singleton = true;
  for (const auto& [key, idx] : cells) all_singleton &= idx.size() == 1;
  if (all_singleton) {
    if (warnings)
      warnings->push_back(
          "every (person, action) cell holds a single clip; pooling "
          "validation strata per person");
    std::map<std::pair<int, int>, std::vector<size_t>> pooled;
    for (const auto& [key, idx] : cells)
      for (size_t i : idx) pooled[{key.first, 0}].push_back(i);
    cells = std::move(pooled);
  }

  size_t n_train_total = 0;
  for (const auto& [key, idx] : cells) n_train_total += idx.size();
  size_t target = static_cast<size_t>(std::llround(val_fraction * double(n_train_total)));
  target = std::max<size_t>(1, std::min(target, n_train_total - 1));

  struct CellQuota {
    std::pair<int, int> key;
    size_t base;
    double remainder;
  };
  std::vector<CellQuota> quotas;
  size_t assigned = 0;
  for (const auto& [key, idx] : cells) {
    const double exact = val_fraction * double(idx.size());
    CellQuota q{key, static_cast<size_t>(exact), exact - double(static_cast<size_t>(exact))};
    // Validation normally leaves at least one clip per cell in train.
    q.base = std::min(q.base, idx.size() - 1);
    assigned += q.base;
    quotas.push_back(q);
  }
  std::sort(quotas.begin(), quotas.end(), [](const CellQuota& a, const CellQuota& b) {
    if (a.remainder != b.remainder) return a.remainder > b.remainder;
    return a.key < b.key;
  });
  bool progress = true;
  while (assigned < target && progress) {
    progress = false;
    for (CellQuota& q : quotas) {
      if (assigned >= target) break;
      if (q.base < cells[q.key].size() - 1) {
        ++q.base;
        ++assigned;
        progress = true;
      }
    }
  }
  if (assigned == 0) {
    // Every cell holds one clip, so someone has to give theirs up.
    quotas.front().base = 1;
  }

  Rng rng = derive_rng(seed, "split", test_person);
  std::map<std::pair<int, int>, size_t> take;
  for (const CellQuota& q : quotas) take[q.key] = q.base;
  for (auto& [key, idx] : cells) {
    std::vector<int> picks =
        rng.sample_without_replacement(int(idx.size()), int(take[key]));
    std::sort(picks.begin(), picks.end());
    size_t p = 0;
    for (size_t i = 0; i < idx.size(); ++i) {
      if (p < picks.size() && size_t(picks[p]) == i) {
        split.val.push_back(idx[i]);
        ++p;
      } else {
        split.train.push_back(idx[i]);
      }
    }
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.val.begin(), split.val.end());
  std::sort(split.test.begin(), split.test.end());

  // Leakage guard: the three sets must partition the manifest.
  std::vector<char> seen(m.clips.size(), 0);
  for (size_t i : split.train) seen[i] += 1;
  for (size_t i : split.val) seen[i] += 1;
  for (size_t i : split.test) seen[i] += 1;
  for (size_t i = 0; i < seen.size(); ++i)
    if (seen[i] != 1)
      throw data_error("split does not partition the dataset at clip " +
                       std::to_string(i));
  for (size_t i : split.train)
    if (m.clips[i].person == test_person)
      throw data_error("test person leaked into the training set");
  for (size_t i : split.val)
    if (m.clips[i].person == test_person)
      throw data_error("test person leaked into the validation set");
  return split;
}

inline std::vector<int> manifest_persons(const DatasetManifest& m) {
  std::vector<int> persons;
  for (const ClipRecord& r : m.clips)
    if (std::find(persons.begin(), persons.end(), r.person) == persons.end())
      persons.push_back(r.person);
  std::sort(persons.begin(), persons.end());
  return persons;
}

}  // namespace rvp
