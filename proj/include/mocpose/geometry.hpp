#pragma once

// Camera convention used throughout: right-handed frame, +Z forward (points
// visible at Z > 0), pixel origin at the top-left corner, u along +X and
// v along +Y.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <string>
#include <vector>

#include "mocpose/common.hpp"
#include "mocpose/rng.hpp"

namespace mocpose {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

// Rigid transform mapping model-frame points into the camera frame.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.transpose();
    inv.translation = -inv.rotation * translation;
    return inv;
  }

  // this ∘ other: apply `other` first.
  Pose compose(const Pose& other) const {
    Pose out;
    out.rotation = rotation * other.rotation;
    out.translation = rotation * other.translation + translation;
    return out;
  }

  bool rotation_is_orthonormal(double tol = 1e-9) const {
    Mat3 err = rotation.transpose() * rotation - Mat3::Identity();
    return err.cwiseAbs().maxCoeff() <= tol && std::abs(rotation.determinant() - 1.0) <= tol;
  }
};

// geodesic angle between two rotations, radians
inline double rotation_angle(const Mat3& a, const Mat3& b) {
  double c = ((a.transpose() * b).trace() - 1.0) * 0.5;
  c = std::clamp(c, -1.0, 1.0);
  return std::acos(c);
}

struct CameraIntrinsics {
  double fx = 0, fy = 0;
  double cx = 0, cy = 0;
  int width = 0, height = 0;

  void validate() const {
    if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera: focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ConfigError("camera: image size must be positive");
  }
};

struct ObjectModel {
  std::string name;
  std::vector<Vec3> points;            // model frame, meters
  std::vector<int> keypoint_indices;   // N indices into points

  std::vector<Vec3> keypoints() const {
    std::vector<Vec3> out;
    out.reserve(keypoint_indices.size());
    for (int idx : keypoint_indices) out.push_back(points.at(static_cast<std::size_t>(idx)));
    return out;
  }
};

// -----------------------------------------------------------------------------
// projection

inline Vec2 project_point(const Pose& pose, const CameraIntrinsics& cam, const Vec3& p) {
  Vec3 c = pose.apply(p);
  if (!(c.z() > 0.0)) throw NumericError("point behind camera");
  return {cam.fx * c.x() / c.z() + cam.cx, cam.fy * c.y() / c.z() + cam.cy};
}

inline std::vector<Vec2> project(const Pose& pose, const CameraIntrinsics& cam,
                                 const std::vector<Vec3>& pts) {
  std::vector<Vec2> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back(project_point(pose, cam, p));
  return out;
}

// pixel + depth -> camera-frame point
inline Vec3 unproject(const CameraIntrinsics& cam, const Vec2& px, double depth) {
  return {(px.x() - cam.cx) / cam.fx * depth, (px.y() - cam.cy) / cam.fy * depth, depth};
}

// -----------------------------------------------------------------------------
// farthest point sampling

// Greedy max-min selection. The seed point is the one farthest from the
// centroid; all ties break toward the lowest index.
inline std::vector<int> fps_select(const std::vector<Vec3>& points, int n) {
  const int total = static_cast<int>(points.size());
  if (total == 0 || n > total) throw std::invalid_argument("fps_select: insufficient points");
  if (n <= 0) throw std::invalid_argument("fps_select: n must be positive");

  Vec3 centroid = Vec3::Zero();
  for (const auto& p : points) centroid += p;
  centroid /= static_cast<double>(total);

  int seed = 0;
  double best = -1.0;
  for (int i = 0; i < total; ++i) {
    double d = (points[static_cast<std::size_t>(i)] - centroid).squaredNorm();
    if (d > best) {
      best = d;
      seed = i;
    }
  }

  std::vector<int> selected{seed};
  std::vector<double> min_d(static_cast<std::size_t>(total));
  for (int i = 0; i < total; ++i)
    min_d[static_cast<std::size_t>(i)] =
        (points[static_cast<std::size_t>(i)] - points[static_cast<std::size_t>(seed)]).squaredNorm();

  while (static_cast<int>(selected.size()) < n) {
    int pick = -1;
    double far = -1.0;
    for (int i = 0; i < total; ++i) {
      double d = min_d[static_cast<std::size_t>(i)];
      if (d > far) {
        far = d;
        pick = i;
      }
    }
    selected.push_back(pick);
    for (int i = 0; i < total; ++i) {
      double d = (points[static_cast<std::size_t>(i)] - points[static_cast<std::size_t>(pick)]).squaredNorm();
      if (d < min_d[static_cast<std::size_t>(i)]) min_d[static_cast<std::size_t>(i)] = d;
    }
  }
  return selected;
}

// -----------------------------------------------------------------------------
// synthetic objects and poses

enum class ObjectKind { Box, SphereCloud, Blob };

inline ObjectKind object_kind_from_string(const std::string& s) {
  if (s == "box") return ObjectKind::Box;
  if (s == "sphere-cloud") return ObjectKind::SphereCloud;
  if (s == "blob") return ObjectKind::Blob;
  throw ConfigError("unknown object kind: " + s);
}

inline std::string to_string(ObjectKind k) {
  switch (k) {
    case ObjectKind::Box: return "box";
    case ObjectKind::SphereCloud: return "sphere-cloud";
    case ObjectKind::Blob: return "blob";
  }
  return "?";
}

// Synthetic stand-in for a CAD model: a bounded point cloud. `radius` bounds
// the model's extent from its frame origin. Keypoint indices are left empty;
// callers select them with fps_select.
inline ObjectModel synth_object(ObjectKind kind, int n_points, double radius, Rng rng,
                                const std::string& name = "") {
  if (n_points < 4) throw std::invalid_argument("synth_object: need at least 4 points");
  ObjectModel model;
  model.name = name.empty() ? to_string(kind) : name;
  model.points.reserve(static_cast<std::size_t>(n_points));

  switch (kind) {
    case ObjectKind::Box: {
      // slightly anisotropic box; the first 8 points are always the corners
      const double hx = radius * 0.78, hy = radius * 0.55, hz = radius * 0.91;
      for (int corner = 0; corner < 8 && corner < n_points; ++corner) {
        model.points.push_back({(corner & 1) ? hx : -hx,
                                (corner & 2) ? hy : -hy,
                                (corner & 4) ? hz : -hz});
      }
      while (static_cast<int>(model.points.size()) < n_points) {
        // uniform over the box surface: pick a face weighted by area
        const double ax = hy * hz, ay = hx * hz, az = hx * hy;
        double areas[3] = {ax, ay, az};
        std::size_t axis = rng.categorical(areas);
        double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
        Vec3 p{rng.uniform(-hx, hx), rng.uniform(-hy, hy), rng.uniform(-hz, hz)};
        p[static_cast<int>(axis)] = sign * (axis == 0 ? hx : axis == 1 ? hy : hz);
        model.points.push_back(p);
      }
      break;
    }
    case ObjectKind::SphereCloud: {
      for (int i = 0; i < n_points; ++i) {
        Vec3 dir{rng.normal(), rng.normal(), rng.normal()};
        double n = dir.norm();
        if (n < 1e-12) dir = Vec3::UnitZ(); else dir /= n;
        model.points.push_back(radius * dir);
      }
      break;
    }
    case ObjectKind::Blob: {
      // anisotropic gaussian cloud squashed into the radius bound; a random
      // cloud is non-coplanar with probability one
      Mat3 shape = Mat3::Zero();
      shape.diagonal() = Vec3{1.0, 0.7, 0.55};
      for (int i = 0; i < n_points; ++i) {
        Vec3 g{rng.normal(), rng.normal(), rng.normal()};
        Vec3 p = shape * g * (radius / 2.2);
        double n = p.norm();
        if (n > radius) p *= radius / n;
        model.points.push_back(p);
      }
      break;
    }
  }
  return model;
}

struct TranslationBounds {
  Vec2 x{-0.05, 0.05};
  Vec2 y{-0.05, 0.05};
  Vec2 z{0.9, 1.1};
};

// Rotation uniform on SO(3) via normalized 4-normal quaternions; translation
// uniform in the bounds box.
inline Pose random_pose(Rng rng, const TranslationBounds& bounds) {
  Eigen::Vector4d q{rng.normal(), rng.normal(), rng.normal(), rng.normal()};
  while (q.norm() < 1e-9) q = {rng.normal(), rng.normal(), rng.normal(), rng.normal()};
  q.normalize();
  Eigen::Quaterniond quat(q[0], q[1], q[2], q[3]);
  Pose pose;
  pose.rotation = quat.toRotationMatrix();
  pose.translation = {rng.uniform(bounds.x[0], bounds.x[1]),
                      rng.uniform(bounds.y[0], bounds.y[1]),
                      rng.uniform(bounds.z[0], bounds.z[1])};
  return pose;
}

// -----------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const Pose& p) {
  std::vector<double> r(9);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) r[static_cast<std::size_t>(i * 3 + j)] = p.rotation(i, j);
  return {{"R", r}, {"t", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

inline Pose pose_from_json(const nlohmann::json& j) {
  Pose p;
  const auto& r = j.at("R");
  if (r.size() != 9) throw DataError("pose: R must have 9 entries");
  for (int i = 0; i < 3; ++i)
    for (int jj = 0; jj < 3; ++jj) p.rotation(i, jj) = r.at(static_cast<std::size_t>(i * 3 + jj)).get<double>();
  const auto& t = j.at("t");
  if (t.size() != 3) throw DataError("pose: t must have 3 entries");
  for (int i = 0; i < 3; ++i) p.translation[i] = t.at(static_cast<std::size_t>(i)).get<double>();
  return p;
}

inline nlohmann::json to_json(const CameraIntrinsics& c) {
  return {{"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx}, {"cy", c.cy},
          {"width", c.width}, {"height", c.height}};
}

inline CameraIntrinsics camera_from_json(const nlohmann::json& j) {
  CameraIntrinsics c;
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.validate();
  return c;
}

inline nlohmann::json to_json(const ObjectModel& m) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : m.points) pts.push_back({p.x(), p.y(), p.z()});
  return {{"name", m.name}, {"points", pts}, {"keypoint_indices", m.keypoint_indices}};
}

inline ObjectModel object_from_json(const nlohmann::json& j) {
  ObjectModel m;
  m.name = j.at("name").get<std::string>();
  for (const auto& p : j.at("points")) {
    if (p.size() != 3) throw DataError("object: points must be 3-vectors");
    m.points.push_back({p.at(0).get<double>(), p.at(1).get<double>(), p.at(2).get<double>()});
  }
  m.keypoint_indices = j.at("keypoint_indices").get<std::vector<int>>();
  if (m.points.empty()) throw DataError("object: points empty");
  for (int idx : m.keypoint_indices)
    if (idx < 0 || idx >= static_cast<int>(m.points.size()))
      throw DataError("object: keypoint index out of range");
  return m;
}

}  // namespace mocpose
