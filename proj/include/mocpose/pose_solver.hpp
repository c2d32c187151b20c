#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "mocpose/common.hpp"
#include "mocpose/geometry.hpp"
#include "mocpose/rng.hpp"

namespace mocpose {

struct CorrespondenceSet {
  std::vector<Vec3> pts3d;  // model frame
  std::vector<Vec2> pts2d;  // pixels
  std::vector<double> weights;  // optional; refinement only

  int size() const { return static_cast<int>(pts3d.size()); }

  void validate() const {
    if (pts3d.size() != pts2d.size())
      throw std::invalid_argument("correspondences: 2D/3D length mismatch");
    if (!weights.empty() && weights.size() != pts3d.size())
      throw std::invalid_argument("correspondences: weights length mismatch");
    if (pts3d.size() < 4) throw std::invalid_argument("correspondences: need at least 4 points");
    for (const auto& p : pts3d)
      if (!p.allFinite()) throw std::invalid_argument("correspondences: non-finite 3D point");
    for (const auto& p : pts2d)
      if (!p.allFinite()) throw std::invalid_argument("correspondences: non-finite 2D point");
  }

  CorrespondenceSet subset(const std::vector<int>& idx) const {
    CorrespondenceSet out;
    out.pts3d.reserve(idx.size());
    out.pts2d.reserve(idx.size());
    for (int i : idx) {
      out.pts3d.push_back(pts3d[static_cast<std::size_t>(i)]);
      out.pts2d.push_back(pts2d[static_cast<std::size_t>(i)]);
      if (!weights.empty()) out.weights.push_back(weights[static_cast<std::size_t>(i)]);
    }
    return out;
  }
};

namespace detail {

inline Mat3 rodrigues(const Vec3& w) {
  double theta = w.norm();
  Mat3 wx;
  wx << 0, -w.z(), w.y(), w.z(), 0, -w.x(), -w.y(), w.x(), 0;
  if (theta < 1e-12) return Mat3::Identity() + wx;
  return Mat3::Identity() + std::sin(theta) / theta * wx +
         (1.0 - std::cos(theta)) / (theta * theta) * wx * wx;
}

// Kabsch alignment w -> p: returns (R, t) with R w + t ~ p
inline Pose kabsch(const std::vector<Vec3>& w, const std::vector<Vec3>& p) {
  Vec3 wc = Vec3::Zero(), pc = Vec3::Zero();
  const double n = static_cast<double>(w.size());
  for (std::size_t i = 0; i < w.size(); ++i) {
    wc += w[i];
    pc += p[i];
  }
  wc /= n;
  pc /= n;
  Mat3 h = Mat3::Zero();
  for (std::size_t i = 0; i < w.size(); ++i) h += (w[i] - wc) * (p[i] - pc).transpose();
  Eigen::JacobiSVD<Mat3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 u = svd.matrixU(), v = svd.matrixV();
  Mat3 d = Mat3::Identity();
  d(2, 2) = (v * u.transpose()).determinant() < 0 ? -1.0 : 1.0;
  Pose pose;
  pose.rotation = v * d * u.transpose();
  pose.translation = pc - pose.rotation * wc;
  return pose;
}

inline double reprojection_rmse(const Pose& pose, const CorrespondenceSet& corr,
                                const CameraIntrinsics& cam) {
  double acc = 0.0;
  for (int i = 0; i < corr.size(); ++i) {
    Vec3 c = pose.apply(corr.pts3d[static_cast<std::size_t>(i)]);
    if (!(c.z() > 0)) return std::numeric_limits<double>::infinity();
    double u = cam.fx * c.x() / c.z() + cam.cx;
    double v = cam.fy * c.y() / c.z() + cam.cy;
    acc += (Vec2(u, v) - corr.pts2d[static_cast<std::size_t>(i)]).squaredNorm();
  }
  return std::sqrt(acc / (2.0 * corr.size()));
}

struct BetaCandidate {
  Eigen::VectorXd beta;
};

// Gauss-Newton on the control-point distance constraints
inline void refine_betas(const Eigen::MatrixXd& kernel, const std::vector<double>& rho,
                         const std::vector<std::pair<int, int>>& pairs, int m_ctrl,
                         Eigen::VectorXd& beta) {
  const int n_pairs = static_cast<int>(pairs.size());
  const int dim = static_cast<int>(beta.size());
  for (int iter = 0; iter < 10; ++iter) {
    Eigen::MatrixXd jac(n_pairs, dim);
    Eigen::VectorXd res(n_pairs);
    Eigen::MatrixXd ctrl(3, m_ctrl);
    Eigen::VectorXd x = kernel.leftCols(dim) * beta;
    for (int j = 0; j < m_ctrl; ++j) ctrl.col(j) = x.segment(3 * j, 3);
    for (int pi = 0; pi < n_pairs; ++pi) {
      auto [a, b] = pairs[static_cast<std::size_t>(pi)];
      Vec3 diff = ctrl.col(a) - ctrl.col(b);
      res[pi] = diff.squaredNorm() - rho[static_cast<std::size_t>(pi)];
      for (int l = 0; l < dim; ++l) {
        Vec3 vl_diff = kernel.col(l).segment(3 * a, 3) - kernel.col(l).segment(3 * b, 3);
        jac(pi, l) = 2.0 * diff.dot(vl_diff);
      }
    }
    Eigen::MatrixXd jtj = jac.transpose() * jac;
    jtj.diagonal().array() += 1e-12;
    Eigen::VectorXd delta = jtj.ldlt().solve(-jac.transpose() * res);
    beta += delta;
    if (delta.norm() < 1e-14) break;
  }
}

}  // namespace detail

// Closed-form pose from >= 4 correspondences via the control-point
// parameterization: four control points in the general case, three when the
// cloud is (near-)planar. Candidate kernel combinations are scored by
// reprojection error.
inline Pose epnp(const CorrespondenceSet& corr, const CameraIntrinsics& cam) {
  corr.validate();
  const int n = corr.size();

  Vec3 centroid = Vec3::Zero();
  for (const auto& p : corr.pts3d) centroid += p;
  centroid /= static_cast<double>(n);

  Mat3 cov = Mat3::Zero();
  for (const auto& p : corr.pts3d) cov += (p - centroid) * (p - centroid).transpose();
  cov /= static_cast<double>(n);
  Eigen::SelfAdjointEigenSolver<Mat3> eig(cov);  // eigenvalues ascending
  Vec3 ext = eig.eigenvalues().cwiseMax(0.0).cwiseSqrt();

  if (!(ext[1] > 1e-9 * std::max(ext[2], 1e-300)) || ext[2] <= 0.0)
    throw NumericError("epnp: degenerate configuration");
  const bool planar = ext[0] < 1e-6 * ext[2];
  const int m_ctrl = planar ? 3 : 4;

  // world control points: centroid plus scaled principal axes (largest first)
  std::vector<Vec3> ctrl_w;
  ctrl_w.push_back(centroid);
  for (int j = 0; j < m_ctrl - 1; ++j) {
    int axis = 2 - j;
    ctrl_w.push_back(centroid + ext[axis] * eig.eigenvectors().col(axis));
  }

  // barycentric coordinates
  Eigen::MatrixXd basis(3, m_ctrl - 1);
  for (int j = 1; j < m_ctrl; ++j) basis.col(j - 1) = ctrl_w[static_cast<std::size_t>(j)] - ctrl_w[0];
  Eigen::MatrixXd alphas(n, m_ctrl);
  for (int i = 0; i < n; ++i) {
    Vec3 rel = corr.pts3d[static_cast<std::size_t>(i)] - ctrl_w[0];
    Eigen::VectorXd a =
        basis.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(rel);
    for (int j = 1; j < m_ctrl; ++j) alphas(i, j) = a[j - 1];
    alphas(i, 0) = 1.0 - a.sum();
  }

  // homogeneous system on the camera-frame control points
  Eigen::MatrixXd m_mat = Eigen::MatrixXd::Zero(2 * n, 3 * m_ctrl);
  for (int i = 0; i < n; ++i) {
    const double u = corr.pts2d[static_cast<std::size_t>(i)][0];
    const double v = corr.pts2d[static_cast<std::size_t>(i)][1];
    for (int j = 0; j < m_ctrl; ++j) {
      const double a = alphas(i, j);
      m_mat(2 * i, 3 * j) = a * cam.fx;
      m_mat(2 * i, 3 * j + 2) = a * (cam.cx - u);
      m_mat(2 * i + 1, 3 * j + 1) = a * cam.fy;
      m_mat(2 * i + 1, 3 * j + 2) = a * (cam.cy - v);
    }
  }
  Eigen::MatrixXd mtm = m_mat.transpose() * m_mat;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> ker(mtm);
  const int kernel_dim = planar ? 2 : 4;
  Eigen::MatrixXd kernel = ker.eigenvectors().leftCols(kernel_dim);

  // control-point distance constraints
  std::vector<std::pair<int, int>> pairs;
  for (int a = 0; a < m_ctrl; ++a)
    for (int b = a + 1; b < m_ctrl; ++b) pairs.emplace_back(a, b);
  std::vector<double> rho;
  rho.reserve(pairs.size());
  for (auto [a, b] : pairs)
    rho.push_back((ctrl_w[static_cast<std::size_t>(a)] - ctrl_w[static_cast<std::size_t>(b)]).squaredNorm());

  auto dist_v = [&](int col, int a, int b) {
    return (kernel.col(col).segment(3 * a, 3) - kernel.col(col).segment(3 * b, 3)).eval();
  };

  // column 0 of `kernel` is the most-null direction
  std::vector<detail::BetaCandidate> candidates;
  {  // case 1
    double num = 0.0, den = 0.0;
    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
      auto [a, b] = pairs[pi];
      double dv = dist_v(0, a, b).norm();
      num += dv * std::sqrt(rho[pi]);
      den += dv * dv;
    }
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(kernel_dim);
    beta[0] = den > 0 ? num / den : 0.0;
    candidates.push_back({beta});
  }
  if (pairs.size() >= 3) {  // case 2: two most-null columns
    const int c1 = 0, c2 = 1;
    Eigen::MatrixXd l(static_cast<Eigen::Index>(pairs.size()), 3);
    Eigen::VectorXd r(static_cast<Eigen::Index>(pairs.size()));
    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
      auto [a, b] = pairs[pi];
      Vec3 d1 = dist_v(c1, a, b), d2 = dist_v(c2, a, b);
      l(static_cast<Eigen::Index>(pi), 0) = d1.squaredNorm();
      l(static_cast<Eigen::Index>(pi), 1) = 2.0 * d1.dot(d2);
      l(static_cast<Eigen::Index>(pi), 2) = d2.squaredNorm();
      r[static_cast<Eigen::Index>(pi)] = rho[pi];
    }
    Eigen::Vector3d b3 = l.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(r);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(kernel_dim);
    beta[c1] = std::sqrt(std::abs(b3[0]));
    beta[c2] = std::sqrt(std::abs(b3[2])) * (b3[1] < 0 ? -1.0 : 1.0);
    candidates.push_back({beta});
  }
  if (!planar && pairs.size() >= 6) {  // case 3: three most-null columns
    const int c1 = 0, c2 = 1, c3 = 2;
    Eigen::MatrixXd l(static_cast<Eigen::Index>(pairs.size()), 6);
    Eigen::VectorXd r(static_cast<Eigen::Index>(pairs.size()));
    for (std::size_t pi = 0; pi < pairs.size(); ++pi) {
      auto [a, b] = pairs[pi];
      Vec3 d1 = dist_v(c1, a, b), d2 = dist_v(c2, a, b), d3 = dist_v(c3, a, b);
      l(static_cast<Eigen::Index>(pi), 0) = d1.squaredNorm();
      l(static_cast<Eigen::Index>(pi), 1) = 2.0 * d1.dot(d2);
      l(static_cast<Eigen::Index>(pi), 2) = d2.squaredNorm();
      l(static_cast<Eigen::Index>(pi), 3) = 2.0 * d1.dot(d3);
      l(static_cast<Eigen::Index>(pi), 4) = 2.0 * d2.dot(d3);
      l(static_cast<Eigen::Index>(pi), 5) = d3.squaredNorm();
      r[static_cast<Eigen::Index>(pi)] = rho[pi];
    }
    Eigen::VectorXd b6 = l.bdcSvd(Eigen::ComputeThinU | Eigen::ComputeThinV).solve(r);
    Eigen::VectorXd beta = Eigen::VectorXd::Zero(kernel_dim);
    beta[c1] = std::sqrt(std::abs(b6[0]));
    beta[c2] = std::sqrt(std::abs(b6[2])) * (b6[1] < 0 ? -1.0 : 1.0);
    beta[c3] = std::sqrt(std::abs(b6[5])) * (b6[3] < 0 ? -1.0 : 1.0);
    candidates.push_back({beta});
  }

  Pose best;
  double best_err = std::numeric_limits<double>::infinity();
  bool found = false;
  for (auto& cand : candidates) {
    detail::refine_betas(kernel, rho, pairs, m_ctrl, cand.beta);
    Eigen::VectorXd x = kernel * cand.beta;

    std::vector<Vec3> ctrl_c(static_cast<std::size_t>(m_ctrl));
    for (int j = 0; j < m_ctrl; ++j) ctrl_c[static_cast<std::size_t>(j)] = x.segment(3 * j, 3);
    std::vector<Vec3> pts_c(static_cast<std::size_t>(n));
    int neg = 0;
    for (int i = 0; i < n; ++i) {
      Vec3 p = Vec3::Zero();
      for (int j = 0; j < m_ctrl; ++j) p += alphas(i, j) * ctrl_c[static_cast<std::size_t>(j)];
      pts_c[static_cast<std::size_t>(i)] = p;
      if (p.z() < 0) ++neg;
    }
    if (neg > n / 2) {
      for (auto& p : pts_c) p = -p;
    }

    Pose pose = detail::kabsch(corr.pts3d, pts_c);
    double err = detail::reprojection_rmse(pose, corr, cam);
    if (err < best_err) {
      best_err = err;
      best = pose;
      found = true;
    }
  }
  if (!found || !std::isfinite(best_err)) throw NumericError("epnp: degenerate configuration");
  return best;
}

// Gauss-Newton on the reprojection residuals with step halving; rotation
// updates compose on the left as axis-angle increments. RMSE never increases
// across accepted iterations; on persistent failure the best pose so far is
// returned and *diverged is set.
inline Pose refine(const Pose& initial, const CorrespondenceSet& corr, const CameraIntrinsics& cam,
                   int max_iters = 30, double tol = 1e-12, bool* diverged = nullptr) {
  corr.validate();
  if (diverged) *diverged = false;
  const int n = corr.size();
  Pose pose = initial;
  double rmse = detail::reprojection_rmse(pose, corr, cam);
  if (!std::isfinite(rmse)) throw NumericError("refine: initial pose not in front of camera");

  for (int iter = 0; iter < max_iters; ++iter) {
    Eigen::MatrixXd jac(2 * n, 6);
    Eigen::VectorXd res(2 * n);
    for (int i = 0; i < n; ++i) {
      const double w = corr.weights.empty() ? 1.0 : std::sqrt(corr.weights[static_cast<std::size_t>(i)]);
      Vec3 pc = pose.apply(corr.pts3d[static_cast<std::size_t>(i)]);
      const double z = pc.z();
      const double u = cam.fx * pc.x() / z + cam.cx;
      const double v = cam.fy * pc.y() / z + cam.cy;
      res[2 * i] = w * (u - corr.pts2d[static_cast<std::size_t>(i)][0]);
      res[2 * i + 1] = w * (v - corr.pts2d[static_cast<std::size_t>(i)][1]);

      Eigen::Matrix<double, 2, 3> duv_dp;
      duv_dp << cam.fx / z, 0, -cam.fx * pc.x() / (z * z),
                0, cam.fy / z, -cam.fy * pc.y() / (z * z);
      Vec3 rx = pose.rotation * corr.pts3d[static_cast<std::size_t>(i)];
      Mat3 skew;
      skew << 0, -rx.z(), rx.y(), rx.z(), 0, -rx.x(), -rx.y(), rx.x(), 0;
      jac.block<2, 3>(2 * i, 0) = w * (duv_dp * (-skew));
      jac.block<2, 3>(2 * i, 3) = w * duv_dp;
    }

    Eigen::Matrix<double, 6, 6> jtj = jac.transpose() * jac;
    jtj.diagonal().array() += 1e-12;
    Eigen::Matrix<double, 6, 1> delta = jtj.ldlt().solve(-jac.transpose() * res);
    if (!delta.allFinite()) break;

    double alpha = 1.0;
    bool accepted = false;
    for (int half = 0; half < 12; ++half) {
      Pose cand;
      cand.rotation = detail::rodrigues(alpha * delta.head<3>()) * pose.rotation;
      cand.translation = pose.translation + alpha * delta.tail<3>();
      double cand_rmse = detail::reprojection_rmse(cand, corr, cam);
      if (cand_rmse <= rmse) {
        double gain = rmse - cand_rmse;
        pose = cand;
        rmse = cand_rmse;
        accepted = true;
        if (gain < tol) return pose;
        break;
      }
      alpha *= 0.5;
    }
    if (!accepted) {
      if (diverged) *diverged = true;
      return pose;
    }
    if (delta.norm() < 1e-14) break;
  }
  return pose;
}

// Consensus search over random subsets, then refit and polish on the inliers.
// Ties keep the earliest iteration, so results are reproducible per seed.
inline std::pair<Pose, std::vector<bool>> ransac_pnp(const CorrespondenceSet& corr,
                                                     const CameraIntrinsics& cam, int iters,
                                                     double inlier_px, Rng rng,
                                                     int subset_size = 6) {
  corr.validate();
  const int n = corr.size();
  subset_size = std::min(std::max(subset_size, 4), n);

  auto reproj_ok = [&](const Pose& pose, int i) {
    Vec3 c = pose.apply(corr.pts3d[static_cast<std::size_t>(i)]);
    if (!(c.z() > 0)) return false;
    double u = cam.fx * c.x() / c.z() + cam.cx;
    double v = cam.fy * c.y() / c.z() + cam.cy;
    return (Vec2(u, v) - corr.pts2d[static_cast<std::size_t>(i)]).norm() < inlier_px;
  };

  std::vector<int> scratch(static_cast<std::size_t>(n));
  std::iota(scratch.begin(), scratch.end(), 0);

  Pose best_pose;
  int best_count = -1;
  for (int it = 0; it < iters; ++it) {
    Rng rit = rng.child(static_cast<std::uint64_t>(it));
    for (int j = 0; j < subset_size; ++j) {
      std::size_t pick = j + rit.uniform_index(static_cast<std::uint64_t>(n - j));
      std::swap(scratch[static_cast<std::size_t>(j)], scratch[pick]);
    }
    std::vector<int> idx(scratch.begin(), scratch.begin() + subset_size);

    Pose pose;
    try {
      pose = epnp(corr.subset(idx), cam);
    } catch (const std::exception&) {
      continue;
    }
    int count = 0;
    for (int i = 0; i < n; ++i)
      if (reproj_ok(pose, i)) ++count;
    if (count > best_count) {
      best_count = count;
      best_pose = pose;
    }
  }
  if (best_count < 4) throw NumericError("ransac_pnp: no consensus");

  std::vector<int> inliers;
  for (int i = 0; i < n; ++i)
    if (reproj_ok(best_pose, i)) inliers.push_back(i);

  CorrespondenceSet in_corr = corr.subset(inliers);
  Pose pose = best_pose;
  try {
    pose = epnp(in_corr, cam);
  } catch (const std::exception&) {
    pose = best_pose;
  }
  if (detail::reprojection_rmse(pose, in_corr, cam) >
      detail::reprojection_rmse(best_pose, in_corr, cam))
    pose = best_pose;
  pose = refine(pose, in_corr, cam);

  std::vector<bool> mask(static_cast<std::size_t>(n), false);
  for (int i = 0; i < n; ++i) mask[static_cast<std::size_t>(i)] = reproj_ok(pose, i);
  return {pose, mask};
}

}  // namespace mocpose
