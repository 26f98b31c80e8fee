#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <rvp/dataset.hpp>

using namespace rvp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() /
           ("rvp_test_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

RadarConfig small_radar() {
  RadarConfig rc;
  rc.n_adc = 64;
  rc.n_chirps = 31;
  return rc;
}

SceneConfig small_scene(int persons, int actions, int clips, int frames = 4) {
  SceneConfig sc;
  sc.n_persons = persons;
  sc.n_actions = actions;
  sc.clips_per_pair = clips;
  sc.frames_per_clip = frames;
  return sc;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in),
                     std::istreambuf_iterator<char>());
}

}  // namespace

TEST(DatasetJson, ConfigsRoundTripExactly) {
  RadarConfig rc;
  rc.noise_std = 0.37;
  rc.slope = 61.25e12;
  RadarConfig rc2 = json(rc).get<RadarConfig>();
  EXPECT_EQ(rc.slope, rc2.slope);
  EXPECT_EQ(rc.noise_std, rc2.noise_std);
  EXPECT_EQ(rc.n_chirps, rc2.n_chirps);

  SceneConfig sc;
  sc.interference = true;
  sc.bystander_spread = 0.21;
  SceneConfig sc2 = json(sc).get<SceneConfig>();
  EXPECT_EQ(sc.interference, sc2.interference);
  EXPECT_EQ(sc.bystander_spread, sc2.bystander_spread);
  EXPECT_EQ(sc.n_persons, sc2.n_persons);

  DspConfig dc;
  dc.out_h = 96;
  DspConfig dc2 = json(dc).get<DspConfig>();
  EXPECT_EQ(dc.out_h, dc2.out_h);
  EXPECT_EQ(dc.angle_fft, dc2.angle_fft);
}

TEST(DatasetJson, ManifestRoundTripsThroughDisk) {
  TempDir tmp("manifest");
  DatasetManifest m;
  m.seed = 99;
  m.processed = true;
  ClipRecord r;
  r.name = "p0_walk_c0";
  r.person = 0;
  r.action_name = "walk";
  r.iq_file = "iq/p0_walk_c0.rvt";
  r.rd_degenerate = true;
  m.clips.push_back(r);
  save_manifest(tmp.path, m);
  const DatasetManifest m2 = load_manifest(tmp.path);
  EXPECT_EQ(m2.seed, 99u);
  EXPECT_TRUE(m2.processed);
  ASSERT_EQ(m2.clips.size(), 1u);
  EXPECT_EQ(m2.clips[0].name, "p0_walk_c0");
  EXPECT_TRUE(m2.clips[0].rd_degenerate);
  EXPECT_EQ(m2.clips[0].iq_file, r.iq_file);
}

TEST(DatasetJson, MalformedManifestIsRejected) {
  TempDir tmp("badmanifest");
  std::ofstream(tmp.path / "manifest.json") << "{\"seed\": 1}";
  EXPECT_THROW(load_manifest(tmp.path), data_error);
  EXPECT_THROW(load_manifest(tmp.path / "missing"), data_error);
}

TEST(Dataset, IqTensorRoundTripIsExact) {
  const RadarConfig rc = small_radar();
  Rng rng(3);
  std::vector<std::vector<c32>> frames(2);
  for (auto& f : frames) {
    f.resize(static_cast<size_t>(rc.samples_per_frame()));
    for (c32& v : f) v = c32(rng.next_float(), rng.next_float());
  }
  const Tensor t = iq_frames_to_tensor(rc, frames);
  EXPECT_EQ(t.shape(), (Shape{2, 31, 64, 8, 2}));
  const auto back = iq_tensor_to_frames(rc, t);
  ASSERT_EQ(back.size(), frames.size());
  for (size_t i = 0; i < frames.size(); ++i) EXPECT_EQ(back[i], frames[i]);
  RadarConfig other = rc;
  other.n_chirps = 7;
  EXPECT_THROW(iq_tensor_to_frames(other, t), data_error);
}

TEST(Dataset, SimulateThenProcessProducesLoadableClips) {
  TempDir tmp("simproc");
  const RadarConfig rc = small_radar();
  const SceneConfig sc = small_scene(2, 1, 1);
  DatasetManifest m = simulate_dataset(tmp.path, sc, rc, 11);
  ASSERT_EQ(m.clips.size(), 2u);
  EXPECT_FALSE(m.processed);
  for (const ClipRecord& r : m.clips) {
    EXPECT_TRUE(fs::exists(tmp.path / r.iq_file)) << r.name;
    EXPECT_TRUE(fs::exists(tmp.path / r.labels_file)) << r.name;
    EXPECT_THROW(load_clip_video(tmp.path, r, "rd"), data_error);
  }

  DspConfig dc;
  dc.out_h = 16;
  dc.out_w = 16;
  const DatasetManifest p = process_dataset(tmp.path, dc);
  EXPECT_TRUE(p.processed);
  for (const ClipRecord& r : p.clips) {
    const Tensor rd = load_clip_video(tmp.path, r, "rd");
    const Tensor ra = load_clip_video(tmp.path, r, "ra");
    EXPECT_EQ(rd.shape(), (Shape{4, 16, 16}));
    EXPECT_EQ(ra.shape(), (Shape{4, 16, 16}));
    EXPECT_FALSE(r.rd_degenerate);
    for (int64_t i = 0; i < rd.numel(); ++i) {
      ASSERT_GE(rd.data()[i], 0.0f);
      ASSERT_LE(rd.data()[i], 1.0f);
    }
    const Tensor labels = load_clip_labels(tmp.path, r);
    EXPECT_EQ(labels.shape(), (Shape{4, kNumJoints, 2}));
  }
  EXPECT_THROW(load_clip_video(tmp.path, p.clips[0], "rgb"), config_error);
}

TEST(Dataset, StoredLabelsMatchGeneratedScenes) {
  TempDir tmp("labels");
  const RadarConfig rc = small_radar();
  const SceneConfig sc = small_scene(2, 2, 1);
  simulate_dataset(tmp.path, sc, rc, 77);
  const DatasetManifest m = load_manifest(tmp.path);
  const auto scenes = generate_scenes(sc, 77);
  ASSERT_EQ(scenes.size(), m.clips.size());
  for (size_t i = 0; i < scenes.size(); ++i) {
    EXPECT_EQ(clip_name(scenes[i]), m.clips[i].name);
    const Tensor labels = load_clip_labels(tmp.path, m.clips[i]);
    ASSERT_EQ(size_t(labels.numel()), scenes[i].labels.size());
    for (int64_t k = 0; k < labels.numel(); ++k)
      EXPECT_EQ(labels.data()[k], scenes[i].labels[static_cast<size_t>(k)]);
  }
}

TEST(Dataset, RegenerationIsByteIdentical) {
  TempDir a("regen_a"), b("regen_b");
  const RadarConfig rc = small_radar();
  const SceneConfig sc = small_scene(1, 1, 1);
  simulate_dataset(a.path, sc, rc, 5);
  simulate_dataset(b.path, sc, rc, 5);
  const DatasetManifest m = load_manifest(a.path);
  EXPECT_EQ(file_bytes(a.path / "manifest.json"), file_bytes(b.path / "manifest.json"));
  for (const ClipRecord& r : m.clips) {
    EXPECT_EQ(file_bytes(a.path / r.iq_file), file_bytes(b.path / r.iq_file));
    EXPECT_EQ(file_bytes(a.path / r.labels_file), file_bytes(b.path / r.labels_file));
  }
}

TEST(Dataset, MismatchedFrameIntervalsAreRejected) {
  TempDir tmp("mismatch");
  RadarConfig rc = small_radar();
  SceneConfig sc = small_scene(1, 1, 1);
  sc.frame_interval = 0.05;
  EXPECT_THROW(simulate_dataset(tmp.path, sc, rc, 1), config_error);
}

TEST(Split, LopoPartitionsWithoutLeakage) {
  DatasetManifest m;
  m.scene = small_scene(4, 2, 3);
  for (int p = 0; p < 4; ++p)
    for (int a = 0; a < 2; ++a)
      for (int c = 0; c < 3; ++c) {
        ClipRecord r;
        r.person = p;
        r.action = a;
        r.clip_index = c;
        r.name = "p" + std::to_string(p) + "_a" + std::to_string(a) + "_c" +
                 std::to_string(c);
        m.clips.push_back(r);
      }
  const FoldSplit split = make_lopo_split(m, 2, 1.0 / 3.0, 42);
  EXPECT_EQ(split.test.size(), 6u);
  EXPECT_EQ(split.val.size(), 6u);
  EXPECT_EQ(split.train.size(), 12u);
  for (size_t i : split.test) EXPECT_EQ(m.clips[i].person, 2);
  for (size_t i : split.train) EXPECT_NE(m.clips[i].person, 2);
  for (size_t i : split.val) EXPECT_NE(m.clips[i].person, 2);
  // One validation clip per (person, action) cell under a 1/3 fraction.
  std::map<std::pair<int, int>, int> val_per_cell;
  for (size_t i : split.val) val_per_cell[{m.clips[i].person, m.clips[i].action}]++;
  EXPECT_EQ(val_per_cell.size(), 6u);
  for (const auto& [cell, n] : val_per_cell) EXPECT_EQ(n, 1);

  const FoldSplit again = make_lopo_split(m, 2, 1.0 / 3.0, 42);
  EXPECT_EQ(split.val, again.val);
  EXPECT_EQ(split.train, again.train);
  const FoldSplit other = make_lopo_split(m, 2, 1.0 / 3.0, 43);
  EXPECT_NE(split.val, other.val);
}

TEST(Split, SingletonCellsPoolPerPersonWithWarning) {
  DatasetManifest m;
  for (int p = 0; p < 3; ++p)
    for (int a = 0; a < 2; ++a) {
      ClipRecord r;
      r.person = p;
      r.action = a;
      r.name = "p" + std::to_string(p) + "_a" + std::to_string(a);
      m.clips.push_back(r);
    }
  std::vector<std::string> warnings;
  const FoldSplit split = make_lopo_split(m, 0, 0.25, 7, &warnings);
  ASSERT_EQ(warnings.size(), 1u);
  EXPECT_NE(warnings[0].find("pooling"), std::string::npos);
  EXPECT_EQ(split.test.size(), 2u);
  EXPECT_EQ(split.val.size(), 1u);
  EXPECT_EQ(split.train.size(), 3u);
  // Each remaining person still trains on at least one clip.
  std::set<int> train_persons;
  for (size_t i : split.train) train_persons.insert(m.clips[i].person);
  EXPECT_EQ(train_persons.size(), 2u);
}

TEST(Split, RejectsBadArguments) {
  DatasetManifest m;
  ClipRecord r;
  r.person = 0;
  m.clips.push_back(r);
  EXPECT_THROW(make_lopo_split(m, 5, 0.2, 1), config_error);
  EXPECT_THROW(make_lopo_split(m, 0, 0.0, 1), config_error);
  EXPECT_THROW(make_lopo_split(m, 0, 0.7, 1), config_error);
  // Only one person means no training persons remain.
  EXPECT_THROW(make_lopo_split(m, 0, 0.2, 1), config_error);
}

TEST(Split, LabelFrameIndicesAlignWithDecoderStride) {
  EXPECT_EQ(label_frame_indices(20, 5), (std::vector<int64_t>{1, 5, 9, 13, 17}));
  EXPECT_EQ(label_frame_indices(8, 2), (std::vector<int64_t>{1, 5}));
  EXPECT_EQ(label_frame_indices(4, 1), (std::vector<int64_t>{1}));
  EXPECT_THROW(label_frame_indices(4, 2), dimension_error);
}

TEST(Split, ManifestPersonsAreSortedUnique) {
  DatasetManifest m;
  for (int p : {3, 1, 3, 0, 1}) {
    ClipRecord r;
    r.person = p;
    m.clips.push_back(r);
  }
  EXPECT_EQ(manifest_persons(m), (std::vector<int>{0, 1, 3}));
}
