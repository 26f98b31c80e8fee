#pragma once

// Synthetic room scenes. A clip is one person performing one action for a
// couple of seconds; each frame is the 13-joint skeleton projected onto the
// horizontal room plane plus, optionally, a bystander clutter cluster.
// Joints double as the radar scatterers, so the pose labels are exactly the
// normalized scatterer positions.

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <rvp/errors.hpp>
#include <rvp/radar.hpp>
#include <rvp/rng.hpp>

namespace rvp {

constexpr int kNumJoints = 13;

enum JointId : int {
  kNose = 0,
  kLeftShoulder = 1,
  kLeftElbow = 2,
  kLeftWrist = 3,
  kRightShoulder = 4,
  kRightElbow = 5,
  kRightWrist = 6,
  kLeftHip = 7,
  kRightHip = 8,
  kLeftKnee = 9,
  kRightKnee = 10,
  kLeftAnkle = 11,
  kRightAnkle = 12,
};

inline const std::array<const char*, kNumJoints>& joint_names() {
  static const std::array<const char*, kNumJoints> names = {
      "nose",       "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
      "r_elbow",    "r_wrist",    "l_hip",   "r_hip",   "l_knee",
      "r_knee",     "l_ankle",    "r_ankle"};
  return names;
}

// Tree over the joints: shoulders hang off the nose, arms off the
// shoulders, hips off the same-side shoulders, legs off the hips.
inline const std::array<std::array<int, 2>, 12>& skeleton_edges() {
  static const std::array<std::array<int, 2>, 12> edges = {{
      {kNose, kLeftShoulder},
      {kNose, kRightShoulder},
      {kLeftShoulder, kLeftElbow},
      {kLeftElbow, kLeftWrist},
      {kRightShoulder, kRightElbow},
      {kRightElbow, kRightWrist},
      {kLeftShoulder, kLeftHip},
      {kRightShoulder, kRightHip},
      {kLeftHip, kLeftKnee},
      {kLeftKnee, kLeftAnkle},
      {kRightHip, kRightKnee},
      {kRightKnee, kRightAnkle},
  }};
  return edges;
}

inline const std::vector<std::string>& action_catalog() {
  static const std::vector<std::string> kActions = {
      "walk", "wave", "circle", "sidestep", "spin", "still"};
  return kActions;
}

struct SceneConfig {
  // Room extent in metres; the radar sits at the origin facing +y, so y is
  // downrange distance.
  double x_min = -1.5, x_max = 1.5;
  double y_min = 1.0, y_max = 4.0;
  int n_persons = 9;
  int n_actions = 3;
  int clips_per_pair = 2;  // clips per (person, action)
  int frames_per_clip = 20;
  double frame_interval = 0.1;  // s, must match the radar frame rate
  bool interference = false;    // add a bystander cluster to every clip
  double torso_amp = 3.0;
  double limb_amp = 1.0;
  int bystander_scatterers = 5;
  double bystander_amp = 1.0;
  double bystander_spread = 0.15;  // m, cluster extent around its centre

  double span_x() const { return x_max - x_min; }
  double span_y() const { return y_max - y_min; }

  void validate() const {
    if (span_x() < 0.5 || span_y() < 0.5)
      throw config_error("scene: room must span at least 0.5 m per axis");
    if (y_min < 0.3) throw config_error("scene: room starts too close to the radar");
    if (n_persons < 1) throw config_error("scene: need at least one person");
    if (n_actions < 1 || n_actions > int(action_catalog().size()))
      throw config_error("scene: n_actions out of range");
    if (clips_per_pair < 1) throw config_error("scene: clips_per_pair must be positive");
    if (frames_per_clip < 2) throw config_error("scene: need at least two frames");
    if (frame_interval <= 0) throw config_error("scene: frame_interval must be positive");
    if (torso_amp <= 0 || limb_amp <= 0 || bystander_amp < 0)
      throw config_error("scene: reflectivities must be positive");
  }
};

struct ClipScene {
  int person = 0;
  int action = 0;
  int clip_index = 0;
  bool interference = false;
  std::string action_name;
  // frames[f] holds the 13 joints first (JointId order), then any bystander
  // scatterers.
  std::vector<std::vector<Scatterer>> frames;
  // Normalized joint positions, [frames_per_clip, 13, 2] row-major, inner
  // pair is (x, y) mapped through the room extents into [0, 1].
  std::vector<float> labels;
};

inline std::string clip_name(const ClipScene& c) {
  return "p" + std::to_string(c.person) + "_" + c.action_name + "_c" +
         std::to_string(c.clip_index) + (c.interference ? "_bys" : "");
}

namespace detail {

struct Vec2 {
  double x = 0, y = 0;
};
inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }

struct PersonParams {
  double shoulder_w, hip_w;
  double arm_swing;          // m, fore-aft wrist swing while walking
  double gait_hz, stride;    // leg cycle rate and fore-aft ankle travel
  double speed;              // walking speed, m/s
  double wave_amp, wave_hz;  // lateral arm extension while waving
  double turn_rate;          // rev/s while spinning
  double side_amp, side_hz;  // sidestep shuffle
  double circle_radius;
  double amp_scale;          // per-person reflectivity factor
};

inline PersonParams sample_person(Rng rng) {
  PersonParams p;
  p.shoulder_w = rng.uniform(0.36, 0.46);
  p.hip_w = rng.uniform(0.28, 0.36);
  p.arm_swing = rng.uniform(0.10, 0.18);
  p.gait_hz = rng.uniform(1.5, 2.0);
  p.stride = rng.uniform(0.30, 0.45);
  p.speed = rng.uniform(0.55, 0.95);
  p.wave_amp = rng.uniform(0.22, 0.34);
  p.wave_hz = rng.uniform(1.1, 1.7);
  p.turn_rate = rng.uniform(0.35, 0.60);
  p.side_amp = rng.uniform(0.22, 0.38);
  p.side_hz = rng.uniform(0.5, 0.8);
  p.circle_radius = rng.uniform(0.35, 0.55);
  p.amp_scale = rng.uniform(0.85, 1.15);
  return p;
}

// Skeleton layout around a body centre. Fore-aft quantities follow the
// heading; lateral quantities use the right-hand normal.
struct PoseParams {
  Vec2 c;
  double theta = 0;      // heading, 0 faces +y
  double leg_swing = 0;  // m fore-aft, left ankle forward when positive
  double leg_side = 0;   // m of extra lateral ankle split
  double arm_swing_l = 0, arm_swing_r = 0;  // m fore-aft at the wrist
  double arm_out_l = 0, arm_out_r = 0;      // m of lateral reach beyond rest
};

inline std::array<Vec2, kNumJoints> body_pose(const PersonParams& p,
                                              const PoseParams& q) {
  const Vec2 f{std::sin(q.theta), std::cos(q.theta)};
  const Vec2 l{std::cos(q.theta), -std::sin(q.theta)};
  std::array<Vec2, kNumJoints> j;
  j[kNose] = q.c + 0.11 * f;
  j[kLeftShoulder] = q.c - 0.5 * p.shoulder_w * l;
  j[kRightShoulder] = q.c + 0.5 * p.shoulder_w * l;
  j[kLeftWrist] = j[kLeftShoulder] - (0.10 + q.arm_out_l) * l +
                  (q.arm_swing_l - 0.05) * f;
  j[kLeftElbow] = j[kLeftShoulder] - (0.06 + 0.5 * q.arm_out_l) * l +
                  (0.5 * q.arm_swing_l - 0.04) * f;
  j[kRightWrist] = j[kRightShoulder] + (0.10 + q.arm_out_r) * l +
                   (q.arm_swing_r - 0.05) * f;
  j[kRightElbow] = j[kRightShoulder] + (0.06 + 0.5 * q.arm_out_r) * l +
                   (0.5 * q.arm_swing_r - 0.04) * f;
  j[kLeftHip] = q.c - 0.5 * p.hip_w * l - 0.02 * f;
  j[kRightHip] = q.c + 0.5 * p.hip_w * l - 0.02 * f;
  j[kLeftKnee] = j[kLeftHip] + 0.5 * q.leg_swing * f - 0.5 * q.leg_side * l;
  j[kRightKnee] = j[kRightHip] - 0.5 * q.leg_swing * f + 0.5 * q.leg_side * l;
  j[kLeftAnkle] = j[kLeftHip] + q.leg_swing * f - (0.02 + q.leg_side) * l;
  j[kRightAnkle] = j[kRightHip] - q.leg_swing * f + (0.02 + q.leg_side) * l;
  return j;
}

struct MotionProgram {
  std::function<std::array<Vec2, kNumJoints>(double)> joints;
  std::function<Vec2(double)> center;
};

inline Vec2 sample_point(const SceneConfig& sc, double margin, Rng& rng) {
  return {rng.uniform(sc.x_min + margin, sc.x_max - margin),
          rng.uniform(sc.y_min + margin, sc.y_max - margin)};
}

inline bool in_inner_box(const SceneConfig& sc, Vec2 v, double margin) {
  return v.x >= sc.x_min + margin && v.x <= sc.x_max - margin &&
         v.y >= sc.y_min + margin && v.y <= sc.y_max - margin;
}

inline MotionProgram make_program(const SceneConfig& sc, const PersonParams& p,
                                  const std::string& action, Rng& rng) {
  const double margin = 0.55;
  const double duration = sc.frames_per_clip * sc.frame_interval;
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double sway_phase = rng.uniform(0.0, 2.0 * M_PI);

  if (action == "walk") {
    Vec2 start{0, 0}, dir{0, 1};
    for (int attempt = 0; attempt < 200; ++attempt) {
      start = sample_point(sc, margin, rng);
      const double h = rng.uniform(0.0, 2.0 * M_PI);
      dir = {std::sin(h), std::cos(h)};
      if (in_inner_box(sc, start + (p.speed * duration) * dir, margin)) break;
    }
    const double theta = std::atan2(dir.x, dir.y);
    return {[=](double t) {
              PoseParams q;
              q.c = start + (p.speed * t) * dir;
              q.theta = theta;
              const double s = std::sin(2.0 * M_PI * p.gait_hz * t + phase);
              q.leg_swing = 0.5 * p.stride * s;
              q.arm_swing_l = -p.arm_swing * s;
              q.arm_swing_r = p.arm_swing * s;
              return body_pose(p, q);
            },
            [=](double t) { return start + (p.speed * t) * dir; }};
  }
  if (action == "wave") {
    const Vec2 c0 = sample_point(sc, margin, rng);
    const double theta = rng.uniform(0.0, 2.0 * M_PI);
    const Vec2 l{std::cos(theta), -std::sin(theta)};
    return {[=](double t) {
              PoseParams q;
              q.c = c0 + (0.02 * std::sin(2.0 * M_PI * 0.4 * t + sway_phase)) * l;
              q.theta = theta;
              const double w = 2.0 * M_PI * p.wave_hz * t + phase;
              q.arm_out_r = 0.15 + 0.5 * p.wave_amp * (1.0 + std::sin(w));
              q.arm_swing_r = 0.10 * std::cos(w);
              return body_pose(p, q);
            },
            [=](double) { return c0; }};
  }
  if (action == "circle") {
    Vec2 center = sample_point(sc, margin + p.circle_radius, rng);
    const double dir_sign = rng.next_double() < 0.5 ? 1.0 : -1.0;
    const double omega = dir_sign * p.speed / p.circle_radius;
    return {[=](double t) {
              const double a = phase + omega * t;
              PoseParams q;
              q.c = center + p.circle_radius * Vec2{std::cos(a), std::sin(a)};
              const Vec2 v = (p.circle_radius * omega) * Vec2{-std::sin(a), std::cos(a)};
              q.theta = std::atan2(v.x, v.y);
              const double s = std::sin(2.0 * M_PI * p.gait_hz * t + phase);
              q.leg_swing = 0.4 * p.stride * s;
              q.arm_swing_l = -0.7 * p.arm_swing * s;
              q.arm_swing_r = 0.7 * p.arm_swing * s;
              return body_pose(p, q);
            },
            [=](double t) {
              const double a = phase + omega * t;
              return center + p.circle_radius * Vec2{std::cos(a), std::sin(a)};
            }};
  }
  if (action == "sidestep") {
    const Vec2 c0 = sample_point(sc, margin + p.side_amp, rng);
    const double theta = rng.uniform(0.0, 2.0 * M_PI);
    const Vec2 l{std::cos(theta), -std::sin(theta)};
    return {[=](double t) {
              const double s = std::sin(2.0 * M_PI * p.side_hz * t + phase);
              PoseParams q;
              q.c = c0 + (p.side_amp * s) * l;
              q.theta = theta;
              q.leg_side = 0.5 * p.side_amp *
                           (1.0 + std::sin(2.0 * M_PI * 2.0 * p.side_hz * t + phase));
              q.arm_out_l = q.arm_out_r = 0.03;
              return body_pose(p, q);
            },
            [=](double t) {
              const double s = std::sin(2.0 * M_PI * p.side_hz * t + phase);
              return c0 + (p.side_amp * s) * l;
            }};
  }
  if (action == "spin") {
    const Vec2 c0 = sample_point(sc, margin, rng);
    const double omega = 2.0 * M_PI * p.turn_rate;
    return {[=](double t) {
              PoseParams q;
              q.c = c0;
              q.theta = phase + omega * t;
              q.arm_out_l = q.arm_out_r = 0.06;
              return body_pose(p, q);
            },
            [=](double) { return c0; }};
  }
  if (action == "still") {
    const Vec2 c0 = sample_point(sc, margin, rng);
    const double theta = rng.uniform(0.0, 2.0 * M_PI);
    const Vec2 f{std::sin(theta), std::cos(theta)};
    return {[=](double t) {
              PoseParams q;
              q.c = c0 + (0.015 * std::sin(2.0 * M_PI * 0.25 * t + sway_phase)) * f;
              q.theta = theta;
              return body_pose(p, q);
            },
            [=](double) { return c0; }};
  }
  throw config_error("scene: unknown action '" + action + "'");
}

struct BystanderProgram {
  std::function<std::vector<Vec2>(double)> points;
};

inline BystanderProgram make_bystander(const SceneConfig& sc,
                                       const MotionProgram& person, Rng& rng) {
  const double margin = 0.45;
  const double duration = sc.frames_per_clip * sc.frame_interval;
  const double speed = rng.uniform(0.30, 0.50);
  Vec2 start{0, 0}, dir{0, 1};
  for (int attempt = 0; attempt < 200; ++attempt) {
    start = sample_point(sc, margin, rng);
    const double h = rng.uniform(0.0, 2.0 * M_PI);
    dir = {std::sin(h), std::cos(h)};
    const Vec2 end = start + (speed * duration) * dir;
    if (!in_inner_box(sc, end, margin)) continue;
    const Vec2 p0 = person.center(0.0) - start;
    const Vec2 p1 = person.center(duration) - end;
    if (std::hypot(p0.x, p0.y) >= 0.9 && std::hypot(p1.x, p1.y) >= 0.9) break;
  }
  const int n = sc.bystander_scatterers;
  std::vector<Vec2> offsets(static_cast<size_t>(n));
  std::vector<double> osc_amp(static_cast<size_t>(n)), osc_hz(static_cast<size_t>(n)),
      osc_phase(static_cast<size_t>(n)), osc_dir(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    offsets[static_cast<size_t>(i)] = {rng.normal(0.0, sc.bystander_spread),
                                       rng.normal(0.0, sc.bystander_spread)};
    osc_amp[static_cast<size_t>(i)] = rng.uniform(0.03, 0.06);
    osc_hz[static_cast<size_t>(i)] = rng.uniform(0.8, 1.6);
    osc_phase[static_cast<size_t>(i)] = rng.uniform(0.0, 2.0 * M_PI);
    osc_dir[static_cast<size_t>(i)] = rng.uniform(0.0, 2.0 * M_PI);
  }
  return {[=](double t) {
    const Vec2 c = start + (speed * t) * dir;
    std::vector<Vec2> pts(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
      const size_t u = static_cast<size_t>(i);
      const double osc = osc_amp[u] * std::sin(2.0 * M_PI * osc_hz[u] * t + osc_phase[u]);
      pts[u] = c + offsets[u] + osc * Vec2{std::cos(osc_dir[u]), std::sin(osc_dir[u])};
    }
    return pts;
  }};
}

inline Vec2 clamp_to_room(const SceneConfig& sc, Vec2 v) {
  v.x = std::min(std::max(v.x, sc.x_min + 0.02), sc.x_max - 0.02);
  v.y = std::min(std::max(v.y, sc.y_min + 0.02), sc.y_max - 0.02);
  return v;
}

}  // namespace detail

// Deterministic scene synthesis. Person geometry depends only on
// (seed, person); clip motion depends on (seed, person, action, clip), so a
// dataset regenerated with interference enabled replays the same clips with
// a bystander added.
inline std::vector<ClipScene> generate_scenes(const SceneConfig& sc,
                                              uint64_t seed) {
  sc.validate();
  using detail::Vec2;
  const double fd_dt = 1e-3;
  std::vector<ClipScene> clips;
  clips.reserve(static_cast<size_t>(sc.n_persons) * static_cast<size_t>(sc.n_actions) *
                static_cast<size_t>(sc.clips_per_pair));
  for (int person = 0; person < sc.n_persons; ++person) {
    const detail::PersonParams pp =
        detail::sample_person(derive_rng(seed, "person", person));
    for (int action = 0; action < sc.n_actions; ++action) {
      const std::string& name = action_catalog()[static_cast<size_t>(action)];
      for (int clip = 0; clip < sc.clips_per_pair; ++clip) {
        Rng crng = derive_rng(seed, "clip", person, action, clip);
        detail::MotionProgram prog = detail::make_program(sc, pp, name, crng);
        detail::BystanderProgram bys;
        if (sc.interference) {
          Rng brng = derive_rng(seed, "bystander", person, action, clip);
          bys = detail::make_bystander(sc, prog, brng);
        }
        ClipScene cs;
        cs.person = person;
        cs.action = action;
        cs.clip_index = clip;
        cs.interference = sc.interference;
        cs.action_name = name;
        cs.frames.resize(static_cast<size_t>(sc.frames_per_clip));
        cs.labels.reserve(static_cast<size_t>(sc.frames_per_clip) * kNumJoints * 2);
        for (int f = 0; f < sc.frames_per_clip; ++f) {
          const double t = f * sc.frame_interval;
          const auto pos = prog.joints(t);
          const auto pos_lo = prog.joints(t - fd_dt);
          const auto pos_hi = prog.joints(t + fd_dt);
          std::vector<Scatterer>& frame = cs.frames[static_cast<size_t>(f)];
          frame.reserve(static_cast<size_t>(kNumJoints) +
                        (sc.interference ? static_cast<size_t>(sc.bystander_scatterers) : 0));
          for (int j = 0; j < kNumJoints; ++j) {
            const size_t u = static_cast<size_t>(j);
            const Vec2 pj = detail::clamp_to_room(sc, pos[u]);
            const bool torso = j == kNose || j == kLeftShoulder ||
                               j == kRightShoulder || j == kLeftHip ||
                               j == kRightHip;
            Scatterer s;
            s.x = pj.x;
            s.y = pj.y;
            s.vx = (pos_hi[u].x - pos_lo[u].x) / (2.0 * fd_dt);
            s.vy = (pos_hi[u].y - pos_lo[u].y) / (2.0 * fd_dt);
            s.amp = (torso ? sc.torso_amp : sc.limb_amp) * pp.amp_scale;
            frame.push_back(s);
            const double lx = (pj.x - sc.x_min) / sc.span_x();
            const double ly = (pj.y - sc.y_min) / sc.span_y();
            cs.labels.push_back(float(std::min(std::max(lx, 0.0), 1.0 - 1e-6)));
            cs.labels.push_back(float(std::min(std::max(ly, 0.0), 1.0 - 1e-6)));
          }
          if (sc.interference) {
            const auto pts = bys.points(t);
            const auto pts_lo = bys.points(t - fd_dt);
            const auto pts_hi = bys.points(t + fd_dt);
            for (size_t i = 0; i < pts.size(); ++i) {
              const Vec2 pb = detail::clamp_to_room(sc, pts[i]);
              Scatterer s;
              s.x = pb.x;
              s.y = pb.y;
              s.vx = (pts_hi[i].x - pts_lo[i].x) / (2.0 * fd_dt);
              s.vy = (pts_hi[i].y - pts_lo[i].y) / (2.0 * fd_dt);
              s.amp = sc.bystander_amp;
              frame.push_back(s);
            }
          }
        }
        clips.push_back(std::move(cs));
      }
    }
  }
  return clips;
}

}  // namespace rvp
