#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <nlohmann/json.hpp>
#include <numbers>
#include <vector>

#include "mocpose/cauchy_mixture.hpp"
#include "mocpose/common.hpp"
#include "mocpose/observation.hpp"
#include "mocpose/rng.hpp"

namespace mocpose {

enum class ScheduleKind { Linear, Cosine };

inline ScheduleKind schedule_kind_from_string(const std::string& s) {
  if (s == "linear") return ScheduleKind::Linear;
  if (s == "cosine") return ScheduleKind::Cosine;
  throw ConfigError("unknown schedule kind: " + s);
}

inline std::string to_string(ScheduleKind k) {
  return k == ScheduleKind::Linear ? "linear" : "cosine";
}

struct ScheduleParams {
  double beta_start = 0.01;  // linear only
  double beta_end = 0.30;    // linear only
  double cosine_offset = 0.008;
};

// Variance schedule {beta_k, alpha_k, alpha_bar_k}, k = 1..K.
struct DiffusionSchedule {
  int steps = 0;
  ScheduleKind kind = ScheduleKind::Cosine;
  ScheduleParams params;
  Eigen::VectorXd beta;       // index k-1
  Eigen::VectorXd alpha;      // 1 - beta
  Eigen::VectorXd alpha_bar;  // running product

  // alpha_bar extended with the k = 0 convention alpha_bar_0 = 1
  double alpha_bar_at(int k) const {
    if (k == 0) return 1.0;
    check_step(k);
    return alpha_bar[k - 1];
  }

  double beta_at(int k) const {
    check_step(k);
    return beta[k - 1];
  }

  void check_step(int k) const {
    if (k < 1 || k > steps) throw std::invalid_argument("diffusion step out of range");
  }

  // true when the forward endpoint has effectively forgotten d_0
  bool terminal_is_indeterminate(double thresh = 1e-3) const {
    return steps >= 1 && alpha_bar[steps - 1] < thresh;
  }

  void validate() const {
    if (steps < 1) throw ConfigError("schedule: steps must be >= 1");
    double prod = 1.0;
    for (int k = 0; k < steps; ++k) {
      if (!(beta[k] > 0.0) || !(beta[k] < 1.0)) throw ConfigError("schedule: beta out of (0,1)");
      prod *= alpha[k];
      if (std::abs(prod - alpha_bar[k]) > 1e-12 * std::max(1.0, std::abs(prod)))
        throw ConfigError("schedule: alpha_bar is not the running product");
      if (k > 0 && !(alpha_bar[k] < alpha_bar[k - 1]))
        throw ConfigError("schedule: alpha_bar must be strictly decreasing");
    }
  }
};

inline DiffusionSchedule make_schedule(int steps, ScheduleKind kind,
                                       const ScheduleParams& params = {}) {
  if (steps < 1) throw ConfigError("make_schedule: steps must be >= 1");
  DiffusionSchedule s;
  s.steps = steps;
  s.kind = kind;
  s.params = params;
  s.beta.resize(steps);

  if (kind == ScheduleKind::Linear) {
    for (int k = 0; k < steps; ++k) {
      double t = steps == 1 ? 0.0 : static_cast<double>(k) / (steps - 1);
      s.beta[k] = params.beta_start + (params.beta_end - params.beta_start) * t;
    }
  } else {
    const double off = params.cosine_offset;
    auto f = [&](double k) {
      double x = ((k / steps) + off) / (1.0 + off) * (std::numbers::pi / 2.0);
      double c = std::cos(x);
      return c * c;
    };
    const double f0 = f(0.0);
    double prev = 1.0;
    for (int k = 1; k <= steps; ++k) {
      double ab = f(static_cast<double>(k)) / f0;
      double b = 1.0 - ab / prev;
      s.beta[k - 1] = std::min(std::max(b, 1e-8), 0.999);
      prev *= (1.0 - s.beta[k - 1]);
    }
  }

  s.alpha = Eigen::VectorXd::Ones(steps) - s.beta;
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (int k = 0; k < steps; ++k) {
    prod *= s.alpha[k];
    s.alpha_bar[k] = prod;
  }
  s.validate();
  return s;
}

inline nlohmann::json to_json(const DiffusionSchedule& s) {
  std::vector<double> ab(s.alpha_bar.data(), s.alpha_bar.data() + s.steps);
  std::vector<double> b(s.beta.data(), s.beta.data() + s.steps);
  return {{"steps", s.steps},
          {"kind", to_string(s.kind)},
          {"beta_start", s.params.beta_start},
          {"beta_end", s.params.beta_end},
          {"cosine_offset", s.params.cosine_offset},
          {"beta", b},
          {"alpha_bar", ab}};
}

inline DiffusionSchedule schedule_from_json(const nlohmann::json& j) {
  ScheduleParams p;
  p.beta_start = j.at("beta_start").get<double>();
  p.beta_end = j.at("beta_end").get<double>();
  p.cosine_offset = j.at("cosine_offset").get<double>();
  DiffusionSchedule s = make_schedule(j.at("steps").get<int>(),
                                      schedule_kind_from_string(j.at("kind").get<std::string>()), p);
  // audit: the serialized alpha_bar must match the reconstruction
  const auto& ab = j.at("alpha_bar");
  if (static_cast<int>(ab.size()) != s.steps) throw DataError("schedule: alpha_bar length mismatch");
  for (int k = 0; k < s.steps; ++k)
    if (std::abs(ab.at(k).get<double>() - s.alpha_bar[k]) > 1e-9)
      throw DataError("schedule: alpha_bar mismatch on load");
  return s;
}

// -----------------------------------------------------------------------------
// forward processes

// d_k = sqrt(ab_k) d_0 + sqrt(1 - ab_k) eps
inline KeypointSample forward_gaussian(const KeypointSample& d0, int k, const KeypointSample& eps,
                                       const DiffusionSchedule& sched) {
  sched.check_step(k);
  if (eps.rows() != d0.rows()) throw std::invalid_argument("forward_gaussian: shape mismatch");
  const double ab = sched.alpha_bar_at(k);
  return std::sqrt(ab) * d0 + std::sqrt(1.0 - ab) * eps;
}

// One forward evaluation with everything needed to reproduce it.
struct ForwardDraw {
  int step = 0;
  KeypointSample sample;    // the diffused coordinates
  KeypointSample eps;       // the noise draw used
  KernelIndicator indicator;  // empty for the plain Gaussian process
};

// d_k = sqrt(ab) d_0 + (1 - sqrt(ab)) mu + sqrt(1 - ab) eps with mu and the
// noise scale selected by the per-keypoint kernel indicator.
inline KeypointSample forward_moc_eval(const KeypointSample& d0, int k, const CauchyMixture& mix,
                                       const KeypointSample& eps, const KernelIndicator& ind,
                                       const DiffusionSchedule& sched) {
  sched.check_step(k);
  const double ab = sched.alpha_bar_at(k);
  const double sab = std::sqrt(ab);
  KeypointSample mu = mixture_locations(mix, ind);
  return sab * d0 + (1.0 - sab) * mu + std::sqrt(1.0 - ab) * eps;
}

inline ForwardDraw forward_moc(const KeypointSample& d0, int k, const CauchyMixture& mix,
                               const KeypointSample& eps, const KernelIndicator& ind,
                               const DiffusionSchedule& sched) {
  ForwardDraw draw;
  draw.step = k;
  draw.eps = eps;
  draw.indicator = ind;
  draw.sample = forward_moc_eval(d0, k, mix, eps, ind, sched);
  return draw;
}

// draw (indicator, eps) from the mixture: eps ~ Cauchy(0, gamma_selected) per axis
inline std::pair<KeypointSample, KernelIndicator> draw_moc_noise(const CauchyMixture& mix, Rng rng) {
  KernelIndicator ind;
  ind.selected.resize(static_cast<std::size_t>(mix.keypoints()));
  KeypointSample eps(mix.keypoints(), 2);
  for (int j = 0; j < mix.keypoints(); ++j) {
    Rng rj = rng.child(static_cast<std::uint64_t>(j));
    const auto& kp = mix.per_keypoint[static_cast<std::size_t>(j)];
    std::vector<double> w(kp.kernels.size());
    for (std::size_t u = 0; u < kp.kernels.size(); ++u) w[u] = kp.kernels[u].weight;
    int u = static_cast<int>(rj.categorical(w));
    ind.selected[static_cast<std::size_t>(j)] = u;
    const auto& kern = kp.kernels[static_cast<std::size_t>(u)];
    eps(j, 0) = rj.cauchy(0.0, kern.scale[0]);
    eps(j, 1) = rj.cauchy(0.0, kern.scale[1]);
  }
  return {std::move(eps), std::move(ind)};
}

inline ForwardDraw forward_moc(const KeypointSample& d0, int k, const CauchyMixture& mix, Rng rng,
                               const DiffusionSchedule& sched) {
  auto [eps, ind] = draw_moc_noise(mix, rng);
  return forward_moc(d0, k, mix, eps, ind, sched);
}

// Full supervision trajectory: one (eps, indicator) pair is drawn and shared
// across all K steps, so consecutive samples are consistent targets.
inline std::vector<ForwardDraw> trajectory(const KeypointSample& d0, const CauchyMixture& mix,
                                           const DiffusionSchedule& sched, Rng rng) {
  auto [eps, ind] = draw_moc_noise(mix, rng);
  std::vector<ForwardDraw> out;
  out.reserve(static_cast<std::size_t>(sched.steps));
  for (int k = 1; k <= sched.steps; ++k) out.push_back(forward_moc(d0, k, mix, eps, ind, sched));
  return out;
}

// Gaussian counterpart used by the no-mixture ablation; noise_scale sets the
// standard deviation in the caller's coordinate units.
inline std::vector<ForwardDraw> trajectory_gaussian(const KeypointSample& d0,
                                                    const DiffusionSchedule& sched, Rng rng,
                                                    double noise_scale = 1.0) {
  KeypointSample eps(d0.rows(), 2);
  for (Eigen::Index j = 0; j < d0.rows(); ++j) {
    Rng rj = rng.child(static_cast<std::uint64_t>(j));
    eps(j, 0) = rj.normal() * noise_scale;
    eps(j, 1) = rj.normal() * noise_scale;
  }
  std::vector<ForwardDraw> out;
  out.reserve(static_cast<std::size_t>(sched.steps));
  for (int k = 1; k <= sched.steps; ++k) {
    ForwardDraw d;
    d.step = k;
    d.eps = eps;
    d.sample = forward_gaussian(d0, k, eps, sched);
    out.push_back(std::move(d));
  }
  return out;
}

// -----------------------------------------------------------------------------
// accelerated inference machinery

// S+1 step indices from K down to 0, evenly spaced with rounded endpoints.
inline std::vector<int> substep_sequence(int steps, int inference_steps) {
  if (inference_steps < 1 || inference_steps > steps)
    throw std::invalid_argument("substep_sequence: need 1 <= S <= K");
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(inference_steps) + 1);
  for (int j = 0; j <= inference_steps; ++j) {
    double pos = static_cast<double>(steps) * (inference_steps - j) / inference_steps;
    out.push_back(static_cast<int>(std::lround(pos)));
  }
  return out;
}

// Treat d_k and d_{k-1} as evaluations of the mixture forward map sharing
// (d_0, eps, indicator) and solve the per-coordinate 2x2 system for them.
inline std::pair<KeypointSample, KeypointSample> solve_x0_eps(
    const KeypointSample& d_k, const KeypointSample& d_km1, int k, const KernelIndicator& ind,
    const CauchyMixture& mix, const DiffusionSchedule& sched) {
  if (k < 2) throw std::invalid_argument("solve_x0_eps: needs k >= 2");
  sched.check_step(k);
  const double a_k = std::sqrt(sched.alpha_bar_at(k));
  const double a_m = std::sqrt(sched.alpha_bar_at(k - 1));
  if (std::abs(a_k - a_m) < 1e-12) throw NumericError("solve_x0_eps: degenerate step pair");
  const double b_k = std::sqrt(1.0 - sched.alpha_bar_at(k));
  const double b_m = std::sqrt(1.0 - sched.alpha_bar_at(k - 1));
  const double det = a_k * b_m - a_m * b_k;
  if (std::abs(det) < 1e-15) throw NumericError("solve_x0_eps: singular system");

  KeypointSample mu = mixture_locations(mix, ind);
  KeypointSample r1 = d_k - (1.0 - a_k) * mu;
  KeypointSample r2 = d_km1 - (1.0 - a_m) * mu;
  KeypointSample d0 = (r1 * b_m - r2 * b_k) / det;
  KeypointSample eps = (r2 * a_k - r1 * a_m) / det;
  return {std::move(d0), std::move(eps)};
}

}  // namespace mocpose
