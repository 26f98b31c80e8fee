#pragma once

// Pose error metrics over normalized [0,1]^2 joint coordinates. MPJPE maps
// errors into metres through the per-axis room spans; PCK counts joints
// within a normalized distance threshold (inclusive).

#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include <rvp/errors.hpp>
#include <rvp/tensor.hpp>

namespace rvp {

struct PoseMetrics {
  double mpjpe_m = 0;   // metres
  double pck = 0;       // fraction in [0, 1]
  int64_t n_joints = 0; // joints aggregated
};

inline PoseMetrics pose_metrics(const float* pred, const float* gt,
                                int64_t n_poses, int64_t n_joints, double sx,
                                double sy, double pck_thresh = 0.05) {
  if (n_poses < 1 || n_joints < 1)
    throw dimension_error("pose_metrics: empty input");
  if (sx <= 0 || sy <= 0)
    throw config_error("pose_metrics: spans must be positive");
  PoseMetrics m;
  m.n_joints = n_poses * n_joints;
  double err_sum = 0;
  int64_t hits = 0;
  for (int64_t i = 0; i < n_poses * n_joints; ++i) {
    const double dx = double(pred[2 * i]) - double(gt[2 * i]);
    const double dy = double(pred[2 * i + 1]) - double(gt[2 * i + 1]);
    err_sum += std::sqrt(dx * sx * dx * sx + dy * sy * dy * sy);
    if (std::sqrt(dx * dx + dy * dy) <= pck_thresh) ++hits;
  }
  m.mpjpe_m = err_sum / double(m.n_joints);
  m.pck = double(hits) / double(m.n_joints);
  return m;
}

// pred/gt shaped [N, J, 2] (or anything whose trailing dim is 2).
inline PoseMetrics pose_metrics(const Tensor& pred, const Tensor& gt, double sx,
                                double sy, double pck_thresh = 0.05) {
  if (pred.shape() != gt.shape())
    throw dimension_error("pose_metrics: shape mismatch " + shape_str(pred.shape()) +
                          " vs " + shape_str(gt.shape()));
  if (pred.ndim() < 2 || pred.dim(pred.ndim() - 1) != 2)
    throw dimension_error("pose_metrics: trailing dim must be 2");
  const int64_t n_joints = pred.dim(pred.ndim() - 2);
  const int64_t n_poses = pred.numel() / (2 * n_joints);
  return pose_metrics(pred.data(), gt.data(), n_poses, n_joints, sx, sy,
                      pck_thresh);
}

// Running aggregate that also tracks per-action means.
struct MetricsAccumulator {
  double err_sum = 0;
  int64_t hits = 0;
  int64_t count = 0;
  std::map<std::string, std::pair<double, int64_t>> per_action;

  void add(const std::string& action, const PoseMetrics& m) {
    err_sum += m.mpjpe_m * double(m.n_joints);
    hits += int64_t(std::llround(m.pck * double(m.n_joints)));
    count += m.n_joints;
    auto& slot = per_action[action];
    slot.first += m.mpjpe_m * double(m.n_joints);
    slot.second += m.n_joints;
  }
  double mpjpe() const {
    if (count == 0) throw numeric_error("metrics: nothing accumulated");
    return err_sum / double(count);
  }
  double pck() const {
    if (count == 0) throw numeric_error("metrics: nothing accumulated");
    return double(hits) / double(count);
  }
  std::map<std::string, double> action_mpjpe() const {
    std::map<std::string, double> out;
    for (const auto& [name, slot] : per_action)
      out[name] = slot.first / double(slot.second);
    return out;
  }
};

}  // namespace rvp
