#pragma once

#include <algorithm>
#include <limits>
#include <string>
#include <vector>

#include "mocpose/common.hpp"
#include "mocpose/geometry.hpp"

namespace mocpose {

// mean over points of || T_pred(x) - T_gt(x) ||
inline double add_metric(const Pose& pred, const Pose& gt, const std::vector<Vec3>& pts) {
  if (pts.empty()) throw std::invalid_argument("add_metric: empty point set");
  double acc = 0.0;
  for (const auto& p : pts) acc += (pred.apply(p) - gt.apply(p)).norm();
  return acc / static_cast<double>(pts.size());
}

// closest-point variant for symmetric objects
inline double adds_metric(const Pose& pred, const Pose& gt, const std::vector<Vec3>& pts) {
  if (pts.empty()) throw std::invalid_argument("adds_metric: empty point set");
  std::vector<Vec3> pred_pts, gt_pts;
  pred_pts.reserve(pts.size());
  gt_pts.reserve(pts.size());
  for (const auto& p : pts) {
    pred_pts.push_back(pred.apply(p));
    gt_pts.push_back(gt.apply(p));
  }
  double acc = 0.0;
  for (const auto& a : pred_pts) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& b : gt_pts) best = std::min(best, (a - b).norm());
    acc += best;
  }
  return acc / static_cast<double>(pts.size());
}

// maximum pairwise distance; exact O(n^2)
inline double diameter(const std::vector<Vec3>& pts) {
  if (pts.size() < 2) throw std::invalid_argument("diameter: need at least 2 points");
  double best = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = i + 1; j < pts.size(); ++j)
      best = std::max(best, (pts[i] - pts[j]).norm());
  return best;
}

// strict 10%-of-diameter test; symmetric objects score on the closest-point distance
inline bool pose_correct(double add_value, double diam, bool symmetric, double add_s_value) {
  if (!(diam > 0)) throw std::invalid_argument("pose_correct: diameter must be positive");
  double d = symmetric ? add_s_value : add_value;
  return d < 0.1 * diam;
}

// Area under accuracy(tau) = fraction{d < tau} for tau in [0, max_threshold],
// normalized by max_threshold. The step function integrates exactly to
// mean_i max(0, max - d_i) / max.
inline double auc(const std::vector<double>& distances, double max_threshold = 0.10) {
  if (distances.empty()) throw std::invalid_argument("auc: empty distance list");
  if (!(max_threshold > 0)) throw std::invalid_argument("auc: threshold must be positive");
  double acc = 0.0;
  for (double d : distances) {
    if (d < 0) throw std::invalid_argument("auc: negative distance");
    acc += std::max(0.0, max_threshold - d);
  }
  return acc / (max_threshold * static_cast<double>(distances.size()));
}

struct EvalRecord {
  std::string object;
  double add = 0.0;
  double add_s = 0.0;
  bool correct = false;
  Pose pose_pred;
  Pose pose_gt;
};

inline EvalRecord evaluate_pose(const std::string& object, const Pose& pred, const Pose& gt,
                                const std::vector<Vec3>& pts, bool symmetric) {
  EvalRecord rec;
  rec.object = object;
  rec.add = add_metric(pred, gt, pts);
  rec.add_s = adds_metric(pred, gt, pts);
  rec.correct = pose_correct(rec.add, diameter(pts), symmetric, rec.add_s);
  rec.pose_pred = pred;
  rec.pose_gt = gt;
  return rec;
}

}  // namespace mocpose
