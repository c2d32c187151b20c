#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numbers>
#include <vector>

#include "mocpose/common.hpp"
#include "mocpose/observation.hpp"
#include "mocpose/rng.hpp"

namespace mocpose {

// One Cauchy kernel with a diagonal (per-axis) scale.
struct CauchyKernel {
  double weight = 1.0;
  Vec2 loc = Vec2::Zero();     // pixels
  Vec2 scale = Vec2::Ones();   // pixels, strictly positive
};

struct KeypointMixture {
  std::vector<CauchyKernel> kernels;

  int size() const { return static_cast<int>(kernels.size()); }
};

// Mixture-of-Cauchy characterization of the keypoint coordinate distribution.
// One independent 2D mixture per keypoint; the joint over all N keypoints is
// the product.
struct CauchyMixture {
  std::vector<KeypointMixture> per_keypoint;

  int keypoints() const { return static_cast<int>(per_keypoint.size()); }
  int kernels() const { return per_keypoint.empty() ? 0 : per_keypoint.front().size(); }

  void validate(double tol = 1e-9) const {
    for (const auto& kp : per_keypoint) {
      if (kp.kernels.empty()) throw std::invalid_argument("mixture: keypoint with no kernels");
      double total = 0.0;
      for (const auto& k : kp.kernels) {
        total += k.weight;
        if (!(k.scale[0] > 0.0) || !(k.scale[1] > 0.0))
          throw std::invalid_argument("mixture: nonpositive scale");
      }
      if (std::abs(total - 1.0) > tol)
        throw std::invalid_argument("mixture: weights do not sum to 1");
    }
  }
};

// One-hot kernel selection per keypoint.
struct KernelIndicator {
  std::vector<int> selected;
};

namespace detail {

inline double log_cauchy_axis(double x, double loc, double scale) {
  double d = (x - loc) / scale;
  return -std::log(std::numbers::pi * scale) - std::log1p(d * d);
}

// log of the 2D kernel density (independent axes)
inline double log_kernel(const CauchyKernel& k, const Vec2& x) {
  return log_cauchy_axis(x[0], k.loc[0], k.scale[0]) + log_cauchy_axis(x[1], k.loc[1], k.scale[1]);
}

inline double coord_quantile(std::vector<double> v, double q) {
  std::sort(v.begin(), v.end());
  double pos = q * (static_cast<double>(v.size()) - 1);
  std::size_t lo = static_cast<std::size_t>(pos);
  std::size_t hi = std::min(lo + 1, v.size() - 1);
  double f = pos - static_cast<double>(lo);
  return v[lo] * (1.0 - f) + v[hi] * f;
}

}  // namespace detail

// log density of one keypoint's mixture at a point
inline double log_density_point(const KeypointMixture& mix, const Vec2& x) {
  double m = -std::numeric_limits<double>::infinity();
  std::vector<double> terms(mix.kernels.size());
  for (std::size_t u = 0; u < mix.kernels.size(); ++u) {
    terms[u] = std::log(mix.kernels[u].weight) + detail::log_kernel(mix.kernels[u], x);
    m = std::max(m, terms[u]);
  }
  double acc = 0.0;
  for (double t : terms) acc += std::exp(t - m);
  return m + std::log(acc);
}

// joint log density over all keypoints of one sample
inline double log_density(const CauchyMixture& mix, const KeypointSample& x) {
  if (x.rows() != mix.keypoints())
    throw std::invalid_argument("log_density: keypoint count mismatch");
  double acc = 0.0;
  for (int j = 0; j < mix.keypoints(); ++j)
    acc += log_density_point(mix.per_keypoint[static_cast<std::size_t>(j)],
                             Vec2(x(j, 0), x(j, 1)));
  return acc;
}

// Draw one keypoint set together with the kernel indicators that produced it.
inline std::pair<KeypointSample, KernelIndicator> sample_with_indicator(const CauchyMixture& mix,
                                                                        Rng rng) {
  KeypointSample sample(mix.keypoints(), 2);
  KernelIndicator ind;
  ind.selected.resize(static_cast<std::size_t>(mix.keypoints()));
  for (int j = 0; j < mix.keypoints(); ++j) {
    Rng rj = rng.child(static_cast<std::uint64_t>(j));
    const auto& kp = mix.per_keypoint[static_cast<std::size_t>(j)];
    std::vector<double> w(kp.kernels.size());
    for (std::size_t u = 0; u < kp.kernels.size(); ++u) w[u] = kp.kernels[u].weight;
    int u = static_cast<int>(rj.categorical(w));
    ind.selected[static_cast<std::size_t>(j)] = u;
    const auto& k = kp.kernels[static_cast<std::size_t>(u)];
    sample(j, 0) = rj.cauchy(k.loc[0], k.scale[0]);
    sample(j, 1) = rj.cauchy(k.loc[1], k.scale[1]);
  }
  return {std::move(sample), std::move(ind)};
}

// selected kernel locations / scales as N x 2 arrays
inline KeypointSample mixture_locations(const CauchyMixture& mix, const KernelIndicator& ind) {
  KeypointSample out(mix.keypoints(), 2);
  for (int j = 0; j < mix.keypoints(); ++j) {
    const auto& k = mix.per_keypoint[static_cast<std::size_t>(j)]
                        .kernels[static_cast<std::size_t>(ind.selected[static_cast<std::size_t>(j)])];
    out(j, 0) = k.loc[0];
    out(j, 1) = k.loc[1];
  }
  return out;
}

inline KeypointSample mixture_scales(const CauchyMixture& mix, const KernelIndicator& ind) {
  KeypointSample out(mix.keypoints(), 2);
  for (int j = 0; j < mix.keypoints(); ++j) {
    const auto& k = mix.per_keypoint[static_cast<std::size_t>(j)]
                        .kernels[static_cast<std::size_t>(ind.selected[static_cast<std::size_t>(j)])];
    out(j, 0) = k.scale[0];
    out(j, 1) = k.scale[1];
  }
  return out;
}

// most-responsible kernel per keypoint for a given draw
inline KernelIndicator responsibility_argmax(const CauchyMixture& mix, const KeypointSample& x) {
  KernelIndicator ind;
  ind.selected.resize(static_cast<std::size_t>(mix.keypoints()));
  for (int j = 0; j < mix.keypoints(); ++j) {
    const auto& kp = mix.per_keypoint[static_cast<std::size_t>(j)];
    int best = 0;
    double best_l = -std::numeric_limits<double>::infinity();
    for (int u = 0; u < kp.size(); ++u) {
      const auto& k = kp.kernels[static_cast<std::size_t>(u)];
      double l = std::log(std::max(k.weight, 1e-300)) + detail::log_kernel(k, Vec2(x(j, 0), x(j, 1)));
      if (l > best_l) {
        best_l = l;
        best = u;
      }
    }
    ind.selected[static_cast<std::size_t>(j)] = best;
  }
  return ind;
}

// per-axis quantile of a keypoint mixture marginal, by bisection on the CDF
inline double mixture_axis_quantile(const KeypointMixture& mix, int axis, double q) {
  auto cdf = [&](double x) {
    double acc = 0.0;
    for (const auto& k : mix.kernels)
      acc += k.weight * (std::atan((x - k.loc[axis]) / k.scale[axis]) / std::numbers::pi + 0.5);
    return acc;
  };
  double lo = mix.kernels.front().loc[axis], hi = lo;
  for (const auto& k : mix.kernels) {
    lo = std::min(lo, k.loc[axis] - 1e6 * k.scale[axis]);
    hi = std::max(hi, k.loc[axis] + 1e6 * k.scale[axis]);
  }
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (cdf(mid) < q) lo = mid; else hi = mid;
  }
  return 0.5 * (lo + hi);
}

// -----------------------------------------------------------------------------
// EM fitting

struct EmOptions {
  int max_iters = 100;
  double tol = 1e-8;          // absolute log-likelihood change
  double scale_floor = 1e-6;  // pixels
};

struct EmKeypointReport {
  std::vector<double> loglik;  // one entry per E-step
  int reseeds = 0;
};

struct EmResult {
  CauchyMixture mixture;
  std::vector<EmKeypointReport> reports;  // per keypoint

  int total_reseeds() const {
    int n = 0;
    for (const auto& r : reports) n += r.reseeds;
    return n;
  }
};

namespace detail {

inline KeypointMixture em_fit_keypoint(const std::vector<Vec2>& pts, int u_kernels,
                                       const EmOptions& opt, Rng rng, EmKeypointReport& report) {
  const int v_count = static_cast<int>(pts.size());

  // Robust seeding: quantile-trim the points, then spread the initial
  // locations with distance-weighted draws. Squared-distance weighting would
  // chase the heavy Cauchy tails.
  std::vector<double> xs, ys;
  xs.reserve(pts.size());
  ys.reserve(pts.size());
  for (const auto& p : pts) {
    xs.push_back(p[0]);
    ys.push_back(p[1]);
  }
  const double x_lo = coord_quantile(xs, 0.05), x_hi = coord_quantile(xs, 0.95);
  const double y_lo = coord_quantile(ys, 0.05), y_hi = coord_quantile(ys, 0.95);
  std::vector<int> trimmed;
  for (int i = 0; i < v_count; ++i) {
    const auto& p = pts[static_cast<std::size_t>(i)];
    if (p[0] >= x_lo && p[0] <= x_hi && p[1] >= y_lo && p[1] <= y_hi) trimmed.push_back(i);
  }
  if (static_cast<int>(trimmed.size()) < u_kernels) {
    trimmed.resize(static_cast<std::size_t>(v_count));
    for (int i = 0; i < v_count; ++i) trimmed[static_cast<std::size_t>(i)] = i;
  }

  auto mad_scale = [&](const std::vector<double>& v) {
    std::vector<double> sel;
    sel.reserve(trimmed.size());
    for (int i : trimmed) sel.push_back(v[static_cast<std::size_t>(i)]);
    double med = coord_quantile(sel, 0.5);
    for (auto& s : sel) s = std::abs(s - med);
    // the MAD of a Cauchy is exactly its scale
    return std::max(coord_quantile(sel, 0.5), 0.5);
  };
  const Vec2 scale0{mad_scale(xs), mad_scale(ys)};

  KeypointMixture mix;
  mix.kernels.resize(static_cast<std::size_t>(u_kernels));
  {
    std::vector<Vec2> centers;
    centers.push_back(pts[static_cast<std::size_t>(trimmed[rng.uniform_index(trimmed.size())])]);
    while (static_cast<int>(centers.size()) < u_kernels) {
      std::vector<double> w(trimmed.size());
      for (std::size_t i = 0; i < trimmed.size(); ++i) {
        const auto& p = pts[static_cast<std::size_t>(trimmed[i])];
        double best = std::numeric_limits<double>::infinity();
        for (const auto& c : centers) best = std::min(best, (p - c).norm());
        w[i] = best;
      }
      double total = 0.0;
      for (double x : w) total += x;
      std::size_t pick = total > 0.0 ? rng.categorical(w) : rng.uniform_index(trimmed.size());
      centers.push_back(pts[static_cast<std::size_t>(trimmed[pick])]);
    }
    for (int u = 0; u < u_kernels; ++u) {
      mix.kernels[static_cast<std::size_t>(u)].weight = 1.0 / u_kernels;
      mix.kernels[static_cast<std::size_t>(u)].loc = centers[static_cast<std::size_t>(u)];
      mix.kernels[static_cast<std::size_t>(u)].scale = scale0;
    }
  }

  Eigen::MatrixXd resp(v_count, u_kernels);
  double prev_ll = -std::numeric_limits<double>::infinity();

  for (int iter = 0; iter < opt.max_iters; ++iter) {
    // E-step and log-likelihood
    double ll = 0.0;
    for (int v = 0; v < v_count; ++v) {
      double m = -std::numeric_limits<double>::infinity();
      for (int u = 0; u < u_kernels; ++u) {
        const auto& k = mix.kernels[static_cast<std::size_t>(u)];
        double l = std::log(std::max(k.weight, 1e-300)) + log_kernel(k, pts[static_cast<std::size_t>(v)]);
        resp(v, u) = l;
        m = std::max(m, l);
      }
      double z = 0.0;
      for (int u = 0; u < u_kernels; ++u) z += std::exp(resp(v, u) - m);
      for (int u = 0; u < u_kernels; ++u) resp(v, u) = std::exp(resp(v, u) - m) / z;
      ll += m + std::log(z);
    }
    report.loglik.push_back(ll);

    // degenerate kernels are re-seeded at a random sample and the iteration restarted
    bool reseeded = false;
    for (int u = 0; u < u_kernels; ++u) {
      double nk = resp.col(u).sum();
      if (nk < 1e-8) {
        auto& k = mix.kernels[static_cast<std::size_t>(u)];
        k.loc = pts[static_cast<std::size_t>(rng.uniform_index(pts.size()))];
        k.scale = scale0;
        k.weight = 1.0 / v_count;
        reseeded = true;
        report.reseeds += 1;
      }
    }
    if (reseeded) {
      // renormalize weights after the reset
      double total = 0.0;
      for (const auto& k : mix.kernels) total += k.weight;
      for (auto& k : mix.kernels) k.weight /= total;
      prev_ll = -std::numeric_limits<double>::infinity();
      continue;
    }

    if (std::abs(ll - prev_ll) < opt.tol) break;
    prev_ll = ll;

    // M-step via the latent-precision weights of the t(nu=1) representation
    for (int u = 0; u < u_kernels; ++u) {
      auto& k = mix.kernels[static_cast<std::size_t>(u)];
      double nk = resp.col(u).sum();
      for (int a = 0; a < 2; ++a) {
        double srw = 0.0, srwx = 0.0;
        std::vector<double> w(static_cast<std::size_t>(v_count));
        for (int v = 0; v < v_count; ++v) {
          double d = (pts[static_cast<std::size_t>(v)][a] - k.loc[a]) / k.scale[a];
          double wv = 2.0 / (1.0 + d * d);
          w[static_cast<std::size_t>(v)] = wv;
          srw += resp(v, u) * wv;
          srwx += resp(v, u) * wv * pts[static_cast<std::size_t>(v)][a];
        }
        double mu = srw > 0.0 ? srwx / srw : k.loc[a];
        double s2 = 0.0;
        for (int v = 0; v < v_count; ++v) {
          double d = pts[static_cast<std::size_t>(v)][a] - mu;
          s2 += resp(v, u) * w[static_cast<std::size_t>(v)] * d * d;
        }
        k.loc[a] = mu;
        k.scale[a] = std::max(std::sqrt(s2 / nk), opt.scale_floor);
      }
      k.weight = nk / v_count;
    }
  }

  return mix;
}

}  // namespace detail

inline EmResult em_fit_detailed(const std::vector<KeypointSample>& samples, int u_kernels,
                                const EmOptions& opt, Rng rng) {
  if (u_kernels < 1) throw std::invalid_argument("em_fit: need at least one kernel");
  if (static_cast<int>(samples.size()) < u_kernels)
    throw std::invalid_argument("em_fit: fewer samples than kernels");
  if (samples.empty()) throw std::invalid_argument("em_fit: no samples");
  const int n_kp = static_cast<int>(samples.front().rows());
  for (const auto& s : samples)
    if (s.rows() != n_kp) throw std::invalid_argument("em_fit: inconsistent sample shapes");

  EmResult result;
  result.mixture.per_keypoint.resize(static_cast<std::size_t>(n_kp));
  result.reports.resize(static_cast<std::size_t>(n_kp));

  parallel_for(static_cast<std::size_t>(n_kp), [&](std::size_t j) {
    std::vector<Vec2> pts;
    pts.reserve(samples.size());
    for (const auto& s : samples) pts.push_back(Vec2(s(static_cast<Eigen::Index>(j), 0),
                                                     s(static_cast<Eigen::Index>(j), 1)));
    result.mixture.per_keypoint[j] = detail::em_fit_keypoint(
        pts, u_kernels, opt, rng.child(static_cast<std::uint64_t>(j)), result.reports[j]);
  });
  return result;
}

inline CauchyMixture em_fit(const std::vector<KeypointSample>& samples, int u_kernels,
                            const EmOptions& opt, Rng rng) {
  return em_fit_detailed(samples, u_kernels, opt, rng).mixture;
}

// -----------------------------------------------------------------------------
// JSON

inline nlohmann::json to_json(const CauchyMixture& mix) {
  nlohmann::json per_kp = nlohmann::json::array();
  for (const auto& kp : mix.per_keypoint) {
    nlohmann::json kernels = nlohmann::json::array();
    for (const auto& k : kp.kernels)
      kernels.push_back({{"pi", k.weight},
                         {"mu", {k.loc[0], k.loc[1]}},
                         {"gamma", {k.scale[0], k.scale[1]}}});
    per_kp.push_back(kernels);
  }
  return per_kp;
}

inline CauchyMixture mixture_from_json(const nlohmann::json& j) {
  CauchyMixture mix;
  for (const auto& kp : j) {
    KeypointMixture m;
    for (const auto& k : kp) {
      CauchyKernel ck;
      ck.weight = k.at("pi").get<double>();
      ck.loc = {k.at("mu").at(0).get<double>(), k.at("mu").at(1).get<double>()};
      ck.scale = {k.at("gamma").at(0).get<double>(), k.at("gamma").at(1).get<double>()};
      m.kernels.push_back(ck);
    }
    mix.per_keypoint.push_back(std::move(m));
  }
  mix.validate(1e-6);
  return mix;
}

}  // namespace mocpose
