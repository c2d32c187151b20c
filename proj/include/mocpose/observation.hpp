#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <vector>

#include "mocpose/common.hpp"
#include "mocpose/geometry.hpp"
#include "mocpose/rng.hpp"

namespace mocpose {

// One draw of all N keypoint coordinates, in pixels. Column 0 is u (x),
// column 1 is v (y).
using KeypointSample = Eigen::Matrix<double, Eigen::Dynamic, 2>;

// Per-keypoint probability grids over the image plane at a fixed stride.
// Cell (r, c) covers pixels [c*stride, (c+1)*stride) x [r*stride, (r+1)*stride);
// its center is ((c+0.5)*stride, (r+0.5)*stride).
struct HeatmapStack {
  int rows = 0;
  int cols = 0;
  int stride = 4;
  std::vector<Eigen::ArrayXXd> grids;

  int count() const { return static_cast<int>(grids.size()); }
  int image_height() const { return rows * stride; }
  int image_width() const { return cols * stride; }
};

// Single-channel splat rendering of the visible object points, values in [0,1].
struct ObservationImage {
  Eigen::ArrayXXd grid;  // rows x cols

  int rows() const { return static_cast<int>(grid.rows()); }
  int cols() const { return static_cast<int>(grid.cols()); }
};

namespace detail {

inline Eigen::ArrayXXd gaussian_bump(int rows, int cols, int stride, double u_px, double v_px,
                                     double sigma_px) {
  Eigen::ArrayXXd g(rows, cols);
  const double inv = 1.0 / (2.0 * sigma_px * sigma_px);
  for (int r = 0; r < rows; ++r) {
    const double cy = (r + 0.5) * stride;
    for (int c = 0; c < cols; ++c) {
      const double cx = (c + 0.5) * stride;
      g(r, c) = std::exp(-((cx - u_px) * (cx - u_px) + (cy - v_px) * (cy - v_px)) * inv);
    }
  }
  return g;
}

inline void normalize_grid(Eigen::ArrayXXd& g) {
  if ((g < 0.0).any()) throw std::invalid_argument("invalid heatmap: negative entries");
  double s = g.sum();
  if (s > 0.0) {
    g /= s;
  } else {
    g.setConstant(1.0 / static_cast<double>(g.size()));  // fully indeterminate keypoint
  }
}

inline Eigen::ArrayXXd separable_blur(const Eigen::ArrayXXd& g, double sigma_cells) {
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma_cells)));
  Eigen::VectorXd kernel(2 * radius + 1);
  for (int i = -radius; i <= radius; ++i)
    kernel[i + radius] = std::exp(-0.5 * (i / sigma_cells) * (i / sigma_cells));
  kernel /= kernel.sum();

  const int rows = static_cast<int>(g.rows()), cols = static_cast<int>(g.cols());
  Eigen::ArrayXXd tmp = Eigen::ArrayXXd::Zero(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        int cc = c + k;
        if (cc >= 0 && cc < cols) acc += g(r, cc) * kernel[k + radius];
      }
      tmp(r, c) = acc;
    }
  Eigen::ArrayXXd out = Eigen::ArrayXXd::Zero(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double acc = 0.0;
      for (int k = -radius; k <= radius; ++k) {
        int rr = r + k;
        if (rr >= 0 && rr < rows) acc += tmp(rr, c) * kernel[k + radius];
      }
      out(r, c) = acc;
    }
  return out;
}

// shift by a fractional number of cells, zero-padded
inline Eigen::ArrayXXd bilinear_shift(const Eigen::ArrayXXd& g, double dx_cells, double dy_cells) {
  const int rows = static_cast<int>(g.rows()), cols = static_cast<int>(g.cols());
  Eigen::ArrayXXd out = Eigen::ArrayXXd::Zero(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) {
      double sr = r - dy_cells, sc = c - dx_cells;
      int r0 = static_cast<int>(std::floor(sr)), c0 = static_cast<int>(std::floor(sc));
      double fr = sr - r0, fc = sc - c0;
      double acc = 0.0;
      for (int dr = 0; dr <= 1; ++dr)
        for (int dc = 0; dc <= 1; ++dc) {
          int rr = r0 + dr, cc = c0 + dc;
          if (rr < 0 || rr >= rows || cc < 0 || cc >= cols) continue;
          double w = (dr ? fr : 1.0 - fr) * (dc ? fc : 1.0 - fc);
          acc += g(rr, cc) * w;
        }
      out(r, c) = acc;
    }
  return out;
}

}  // namespace detail

// -----------------------------------------------------------------------------
// ground-truth heatmaps

struct HeatmapGeometry {
  int image_height = 128;
  int image_width = 128;
  int stride = 4;
};

inline HeatmapStack render_gt_heatmaps(const KeypointSample& kps2d, double sigma_px,
                                       const HeatmapGeometry& geom) {
  if (!(sigma_px > 0.0)) throw std::invalid_argument("render_gt_heatmaps: sigma must be positive");
  HeatmapStack stack;
  stack.stride = geom.stride;
  stack.rows = geom.image_height / geom.stride;
  stack.cols = geom.image_width / geom.stride;
  stack.grids.reserve(static_cast<std::size_t>(kps2d.rows()));
  for (Eigen::Index j = 0; j < kps2d.rows(); ++j) {
    Eigen::ArrayXXd g = detail::gaussian_bump(stack.rows, stack.cols, stack.stride,
                                              kps2d(j, 0), kps2d(j, 1), sigma_px);
    detail::normalize_grid(g);
    stack.grids.push_back(std::move(g));
  }
  return stack;
}

inline HeatmapStack normalize(const HeatmapStack& stack) {
  HeatmapStack out = stack;
  for (auto& g : out.grids) detail::normalize_grid(g);
  return out;
}

// -----------------------------------------------------------------------------
// synthetic corruption standing in for a trained initializer

struct CorruptionConfig {
  double blur_sigma_px = 0.0;    // widens the true mode
  double jitter_sigma_px = 0.0;  // displaces the true mode
  int spurious_modes = 0;        // extra false modes per keypoint
  double spurious_mass = 0.0;    // total mass moved onto false modes, in [0,1)
  double spurious_sigma_px = 6.0;
  double dropout_prob = 0.0;     // chance a keypoint's evidence is wiped out

  void validate() const {
    if (blur_sigma_px < 0 || jitter_sigma_px < 0 || spurious_sigma_px <= 0)
      throw ConfigError("corruption: sigmas must be nonnegative");
    if (spurious_modes < 0) throw ConfigError("corruption: spurious_modes must be >= 0");
    if (spurious_mass < 0 || spurious_mass >= 1)
      throw ConfigError("corruption: spurious_mass must be in [0,1)");
    if (dropout_prob < 0 || dropout_prob >= 1)
      throw ConfigError("corruption: dropout_prob must be in [0,1)");
  }
};

inline HeatmapStack corrupt_heatmaps(const HeatmapStack& gt, const CorruptionConfig& cfg, Rng rng) {
  cfg.validate();
  HeatmapStack out = gt;
  for (int j = 0; j < gt.count(); ++j) {
    Rng r = rng.child(static_cast<std::uint64_t>(j));
    Eigen::ArrayXXd g = gt.grids[static_cast<std::size_t>(j)];

    if (cfg.blur_sigma_px > 0.0)
      g = detail::separable_blur(g, cfg.blur_sigma_px / gt.stride);

    if (cfg.jitter_sigma_px > 0.0) {
      double dx = r.normal() * cfg.jitter_sigma_px / gt.stride;
      double dy = r.normal() * cfg.jitter_sigma_px / gt.stride;
      g = detail::bilinear_shift(g, dx, dy);
    }

    if (cfg.dropout_prob > 0.0 && r.uniform() < cfg.dropout_prob) {
      // near-uniform rather than exactly flat, so downstream argmaxes are not
      // pinned to the first cell
      for (Eigen::Index i = 0; i < g.size(); ++i)
        g(i) = 1.0 + 0.01 * r.uniform();
    }

    if (cfg.spurious_modes > 0 && cfg.spurious_mass > 0.0) {
      detail::normalize_grid(g);
      g *= (1.0 - cfg.spurious_mass);
      const double per_mode = cfg.spurious_mass / cfg.spurious_modes;
      for (int s = 0; s < cfg.spurious_modes; ++s) {
        double u = r.uniform(0.0, gt.cols * static_cast<double>(gt.stride));
        double v = r.uniform(0.0, gt.rows * static_cast<double>(gt.stride));
        Eigen::ArrayXXd bump =
            detail::gaussian_bump(gt.rows, gt.cols, gt.stride, u, v, cfg.spurious_sigma_px);
        double bs = bump.sum();
        if (bs > 0.0) g += bump * (per_mode / bs);
      }
    }

    detail::normalize_grid(g);
    out.grids[static_cast<std::size_t>(j)] = std::move(g);
  }
  return out;
}

// -----------------------------------------------------------------------------
// sampling coordinates from the heatmap distribution

inline void require_normalized(const HeatmapStack& stack, double tol = 1e-6) {
  for (const auto& g : stack.grids) {
    if ((g < 0.0).any() || std::abs(g.sum() - 1.0) > tol)
      throw std::invalid_argument("heatmap stack is not normalized");
  }
}

// Draw `count` keypoint sets. Per keypoint: categorical cell draw, then
// uniform jitter inside the cell, mapped back as pixel = (cell + jitter) * stride.
inline std::vector<KeypointSample> sample_coords(const HeatmapStack& stack, int count, Rng rng) {
  require_normalized(stack);
  std::vector<KeypointSample> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int s = 0; s < count; ++s) {
    KeypointSample sample(stack.count(), 2);
    Rng rs = rng.child(static_cast<std::uint64_t>(s));
    for (int j = 0; j < stack.count(); ++j) {
      Rng rj = rs.child(static_cast<std::uint64_t>(j));
      const auto& g = stack.grids[static_cast<std::size_t>(j)];
      double u = rj.uniform();
      double acc = 0.0;
      int hit = static_cast<int>(g.size()) - 1;
      for (Eigen::Index i = 0; i < g.size(); ++i) {
        acc += g(i);  // column-major scan; order is fixed and documented by tests
        if (u < acc) {
          hit = static_cast<int>(i);
          break;
        }
      }
      int r = hit % stack.rows;
      int c = hit / stack.rows;
      sample(j, 0) = (c + rj.uniform()) * stack.stride;
      sample(j, 1) = (r + rj.uniform()) * stack.stride;
    }
    out.push_back(std::move(sample));
  }
  return out;
}

// squared L2 difference summed over every grid
inline double heatmap_loss(const HeatmapStack& pred, const HeatmapStack& gt) {
  if (pred.count() != gt.count() || pred.rows != gt.rows || pred.cols != gt.cols)
    throw std::invalid_argument("heatmap_loss: shape mismatch");
  double total = 0.0;
  for (int j = 0; j < pred.count(); ++j)
    total += (pred.grids[static_cast<std::size_t>(j)] - gt.grids[static_cast<std::size_t>(j)])
                 .square()
                 .sum();
  return total;
}

// -----------------------------------------------------------------------------
// appearance observation

struct ObservationConfig {
  int width = 64;
  int height = 64;
  int occluders = 0;
  double occluder_min_frac = 0.15;
  double occluder_max_frac = 0.35;
  double splat_gain = 0.6;
};

inline ObservationImage render_observation(const ObjectModel& model, const Pose& pose,
                                           const CameraIntrinsics& cam,
                                           const ObservationConfig& cfg, Rng rng) {
  ObservationImage obs;
  obs.grid = Eigen::ArrayXXd::Zero(cfg.height, cfg.width);
  const double sx = static_cast<double>(cfg.width) / cam.width;
  const double sy = static_cast<double>(cfg.height) / cam.height;

  for (const auto& p : model.points) {
    Vec3 c = pose.apply(p);
    if (!(c.z() > 0.0)) continue;
    double u = (cam.fx * c.x() / c.z() + cam.cx) * sx;
    double v = (cam.fy * c.y() / c.z() + cam.cy) * sy;
    int c0 = static_cast<int>(std::floor(u - 0.5)), r0 = static_cast<int>(std::floor(v - 0.5));
    double fc = (u - 0.5) - c0, fr = (v - 0.5) - r0;
    for (int dr = 0; dr <= 1; ++dr)
      for (int dc = 0; dc <= 1; ++dc) {
        int rr = r0 + dr, cc = c0 + dc;
        if (rr < 0 || rr >= cfg.height || cc < 0 || cc >= cfg.width) continue;
        obs.grid(rr, cc) += cfg.splat_gain * (dr ? fr : 1.0 - fr) * (dc ? fc : 1.0 - fc);
      }
  }

  for (int k = 0; k < cfg.occluders; ++k) {
    double w = rng.uniform(cfg.occluder_min_frac, cfg.occluder_max_frac) * cfg.width;
    double h = rng.uniform(cfg.occluder_min_frac, cfg.occluder_max_frac) * cfg.height;
    double x0 = (cfg.width - w) <= 0.0 ? 0.0 : rng.uniform(0.0, cfg.width - w);
    double y0 = (cfg.height - h) <= 0.0 ? 0.0 : rng.uniform(0.0, cfg.height - h);
    int c0 = static_cast<int>(std::floor(x0)), c1 = static_cast<int>(std::ceil(x0 + w));
    int r0 = static_cast<int>(std::floor(y0)), r1 = static_cast<int>(std::ceil(y0 + h));
    for (int r = std::max(0, r0); r < std::min(cfg.height, r1); ++r)
      for (int c = std::max(0, c0); c < std::min(cfg.width, c1); ++c) obs.grid(r, c) = 0.0;
  }

  obs.grid = obs.grid.min(1.0).max(0.0);
  return obs;
}

// -----------------------------------------------------------------------------
// serialization

namespace detail {
inline void write_i32(std::ostream& os, std::int32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((static_cast<std::uint32_t>(v) >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline std::int32_t read_i32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return static_cast<std::int32_t>(v);
}
inline void write_f32(std::ostream& os, float f) {
  std::uint32_t v;
  std::memcpy(&v, &f, 4);
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  os.write(reinterpret_cast<const char*>(b), 4);
}
inline float read_f32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  float f;
  std::memcpy(&f, &v, 4);
  return f;
}
}  // namespace detail

// Flat binary layout: N, rows, cols, stride as little-endian int32, then
// row-major float32 entries per grid.
inline void save_heatmaps(const HeatmapStack& stack, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write heatmap file: " + path.string());
  detail::write_i32(os, stack.count());
  detail::write_i32(os, stack.rows);
  detail::write_i32(os, stack.cols);
  detail::write_i32(os, stack.stride);
  for (const auto& g : stack.grids)
    for (int r = 0; r < stack.rows; ++r)
      for (int c = 0; c < stack.cols; ++c) detail::write_f32(os, static_cast<float>(g(r, c)));
  if (!os) throw DataError("failed writing heatmap file: " + path.string());
}

inline HeatmapStack load_heatmaps(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read heatmap file: " + path.string());
  HeatmapStack stack;
  std::int32_t n = detail::read_i32(is);
  stack.rows = detail::read_i32(is);
  stack.cols = detail::read_i32(is);
  stack.stride = detail::read_i32(is);
  if (!is || n < 0 || stack.rows <= 0 || stack.cols <= 0 || stack.stride <= 0)
    throw DataError("malformed heatmap file: " + path.string());
  stack.grids.resize(static_cast<std::size_t>(n));
  for (auto& g : stack.grids) {
    g.resize(stack.rows, stack.cols);
    for (int r = 0; r < stack.rows; ++r)
      for (int c = 0; c < stack.cols; ++c) g(r, c) = detail::read_f32(is);
  }
  if (!is) throw DataError("truncated heatmap file: " + path.string());
  return stack;
}

inline nlohmann::json heatmaps_to_json(const HeatmapStack& stack) {
  nlohmann::json grids = nlohmann::json::array();
  for (const auto& g : stack.grids) {
    std::vector<double> flat;
    flat.reserve(static_cast<std::size_t>(g.size()));
    for (int r = 0; r < stack.rows; ++r)
      for (int c = 0; c < stack.cols; ++c) flat.push_back(g(r, c));
    grids.push_back(flat);
  }
  return {{"n", stack.count()}, {"rows", stack.rows}, {"cols", stack.cols},
          {"stride", stack.stride}, {"grids", grids}};
}

inline void save_observation(const ObservationImage& obs, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write observation file: " + path.string());
  detail::write_i32(os, obs.rows());
  detail::write_i32(os, obs.cols());
  for (int r = 0; r < obs.rows(); ++r)
    for (int c = 0; c < obs.cols(); ++c) detail::write_f32(os, static_cast<float>(obs.grid(r, c)));
}

inline ObservationImage load_observation(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot read observation file: " + path.string());
  std::int32_t rows = detail::read_i32(is), cols = detail::read_i32(is);
  if (!is || rows <= 0 || cols <= 0) throw DataError("malformed observation file: " + path.string());
  ObservationImage obs;
  obs.grid.resize(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) obs.grid(r, c) = detail::read_f32(is);
  if (!is) throw DataError("truncated observation file: " + path.string());
  return obs;
}

}  // namespace mocpose
