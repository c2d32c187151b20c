#include <catch2/catch_amalgamated.hpp>
#include <numbers>

#include "mocpose/cauchy_mixture.hpp"

using namespace mocpose;

namespace {

CauchyMixture single_kernel(Vec2 mu, Vec2 gamma) {
  CauchyMixture mix;
  KeypointMixture kp;
  kp.kernels.push_back({1.0, mu, gamma});
  mix.per_keypoint.push_back(kp);
  return mix;
}

std::vector<KeypointSample> wrap_points(const std::vector<Vec2>& pts) {
  std::vector<KeypointSample> out;
  for (const auto& p : pts) {
    KeypointSample s(1, 2);
    s << p[0], p[1];
    out.push_back(s);
  }
  return out;
}

double sample_median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("single-kernel fit forces unit weight") {
  Rng rng(1);
  std::vector<Vec2> pts;
  for (int i = 0; i < 100; ++i) pts.push_back({rng.cauchy(3.0, 1.0), rng.cauchy(-2.0, 0.5)});
  auto mix = em_fit(wrap_points(pts), 1, {}, Rng(2));
  REQUIRE(mix.kernels() == 1);
  CHECK(mix.per_keypoint[0].kernels[0].weight == Catch::Approx(1.0).margin(1e-12));
}

TEST_CASE("single-kernel location tracks the coordinate-wise median of symmetric data") {
  Rng rng(5);
  std::vector<Vec2> pts;
  const Vec2 center{5.0, 5.0};
  for (int i = 0; i < 1000; ++i) {
    Vec2 d{rng.cauchy(0.0, 2.0), rng.cauchy(0.0, 2.0)};
    pts.push_back(center + d);
    pts.push_back(center - d);  // exact mirror: medians land on the center
  }
  auto mix = em_fit(wrap_points(pts), 1, {}, Rng(6));
  std::vector<double> xs, ys;
  for (const auto& p : pts) {
    xs.push_back(p[0]);
    ys.push_back(p[1]);
  }
  CHECK(std::abs(mix.per_keypoint[0].kernels[0].loc[0] - sample_median(xs)) < 0.1);
  CHECK(std::abs(mix.per_keypoint[0].kernels[0].loc[1] - sample_median(ys)) < 0.1);
}

TEST_CASE("two planted kernels are recovered") {
  Rng rng(9);
  std::vector<Vec2> pts;
  const int n = 2000;
  for (int i = 0; i < n; ++i) {
    bool first = rng.uniform() < 0.4;
    Vec2 mu = first ? Vec2{10, 10} : Vec2{50, 50};
    pts.push_back({rng.cauchy(mu[0], 1.0), rng.cauchy(mu[1], 1.0)});
  }
  auto mix = em_fit(wrap_points(pts), 2, {}, Rng(10));
  auto kernels = mix.per_keypoint[0].kernels;
  std::sort(kernels.begin(), kernels.end(),
            [](const CauchyKernel& a, const CauchyKernel& b) { return a.loc[0] < b.loc[0]; });
  CHECK((kernels[0].loc - Vec2{10, 10}).norm() < 0.5);
  CHECK((kernels[1].loc - Vec2{50, 50}).norm() < 0.5);
  CHECK(kernels[0].weight == Catch::Approx(0.4).margin(0.05));
  CHECK(kernels[1].weight == Catch::Approx(0.6).margin(0.05));
}

TEST_CASE("fitting with fewer samples than kernels fails") {
  std::vector<Vec2> pts{{0, 0}, {1, 1}};
  REQUIRE_THROWS_WITH(em_fit(wrap_points(pts), 3, {}, Rng(1)),
                      Catch::Matchers::ContainsSubstring("fewer samples"));
}

TEST_CASE("EM log-likelihood is non-decreasing on random instances") {
  Rng rng(1234);
  for (int inst = 0; inst < 100; ++inst) {
    Rng ri = rng.child(static_cast<std::uint64_t>(inst));
    int v = 50 + static_cast<int>(ri.uniform_index(150));
    int u = 1 + static_cast<int>(ri.uniform_index(3));
    std::vector<Vec2> pts;
    int modes = 1 + static_cast<int>(ri.uniform_index(3));
    std::vector<Vec2> centers;
    for (int m = 0; m < modes; ++m)
      centers.push_back({ri.uniform(-30, 30), ri.uniform(-30, 30)});
    for (int i = 0; i < v; ++i) {
      const Vec2& c = centers[ri.uniform_index(static_cast<std::uint64_t>(modes))];
      if (ri.uniform() < 0.5)
        pts.push_back({c[0] + ri.normal() * 2.0, c[1] + ri.normal() * 2.0});
      else
        pts.push_back({ri.cauchy(c[0], 1.5), ri.cauchy(c[1], 1.5)});
    }
    auto result = em_fit_detailed(wrap_points(pts), u, {}, ri.child(99));
    REQUIRE(result.total_reseeds() == 0);
    const auto& trace = result.reports[0].loglik;
    REQUIRE(trace.size() >= 2);
    for (std::size_t t = 1; t < trace.size(); ++t) CHECK(trace[t] >= trace[t - 1] - 1e-10);
  }
}

TEST_CASE("degenerate scale draws collapse onto the location") {
  auto mix = single_kernel({12.0, -3.0}, {1e-9, 1e-9});
  auto [sample, ind] = sample_with_indicator(mix, Rng(3));
  CHECK(std::abs(sample(0, 0) - 12.0) < 1e-6);
  CHECK(std::abs(sample(0, 1) + 3.0) < 1e-6);
  CHECK(ind.selected[0] == 0);
}

TEST_CASE("a zero-weight kernel is never selected") {
  CauchyMixture mix;
  KeypointMixture kp;
  kp.kernels.push_back({1.0, {0, 0}, {1, 1}});
  kp.kernels.push_back({0.0, {100, 100}, {1, 1}});
  mix.per_keypoint.push_back(kp);
  Rng rng(4);
  for (int i = 0; i < 200; ++i) {
    auto [sample, ind] = sample_with_indicator(mix, rng.child(static_cast<std::uint64_t>(i)));
    CHECK(ind.selected[0] == 0);
  }
}

TEST_CASE("indicator frequencies follow the weights") {
  CauchyMixture mix;
  KeypointMixture kp;
  kp.kernels.push_back({0.3, {0, 0}, {1, 1}});
  kp.kernels.push_back({0.7, {10, 10}, {1, 1}});
  mix.per_keypoint.push_back(kp);
  Rng rng(8);
  const int n = 100000;
  int first = 0;
  for (int i = 0; i < n; ++i) {
    auto [sample, ind] = sample_with_indicator(mix, rng.child(static_cast<std::uint64_t>(i)));
    if (ind.selected[0] == 0) ++first;
  }
  CHECK(std::abs(first / static_cast<double>(n) - 0.3) < 0.01);
}

TEST_CASE("single-kernel marginals match the cauchy median and IQR") {
  const double gamma = 2.0;
  auto mix = single_kernel({7.0, -1.0}, {gamma, gamma});
  Rng rng(21);
  const int n = 100000;
  std::vector<double> xs;
  xs.reserve(n);
  for (int i = 0; i < n; ++i) {
    auto [sample, ind] = sample_with_indicator(mix, rng.child(static_cast<std::uint64_t>(i)));
    xs.push_back(sample(0, 0));
  }
  std::sort(xs.begin(), xs.end());
  double med = xs[n / 2];
  double q1 = xs[n / 4], q3 = xs[3 * n / 4];
  CHECK(std::abs(med - 7.0) < 0.05 * gamma);
  CHECK(std::abs((q3 - q1) - 2.0 * gamma) < 0.05 * 2.0 * gamma);
}

TEST_CASE("log density peaks at the documented value") {
  auto mix = single_kernel({4.0, 6.0}, {1.0, 1.0});
  KeypointSample x(1, 2);
  x << 4.0, 6.0;
  CHECK(log_density(mix, x) == Catch::Approx(2.0 * std::log(1.0 / std::numbers::pi)).epsilon(1e-12));
}

TEST_CASE("density decays monotonically along an axis") {
  auto mix = single_kernel({0.0, 0.0}, {2.0, 1.0});
  double prev = std::numeric_limits<double>::infinity();
  for (double step = 0.0; step < 20.0; step += 0.5) {
    KeypointSample x(1, 2);
    x << step, 0.0;
    double ld = log_density(mix, x);
    CHECK(ld < prev + 1e-15);
    prev = ld;
  }
}

TEST_CASE("mixture density dominates each weighted kernel") {
  CauchyMixture mix;
  KeypointMixture kp;
  kp.kernels.push_back({0.25, {0, 0}, {1, 2}});
  kp.kernels.push_back({0.75, {5, -3}, {2, 1}});
  mix.per_keypoint.push_back(kp);
  Rng rng(31);
  for (int i = 0; i < 200; ++i) {
    KeypointSample x(1, 2);
    x << rng.uniform(-10, 10), rng.uniform(-10, 10);
    double mix_density = std::exp(log_density(mix, x));
    for (const auto& k : kp.kernels) {
      double kd = k.weight * std::exp(detail::log_kernel(k, Vec2(x(0, 0), x(0, 1))));
      CHECK(mix_density >= kd - 1e-15);
    }
  }
}

TEST_CASE("mixture density integrates to one") {
  // tan-substitution midpoint quadrature handles the heavy tails exactly where
  // a uniform grid cannot
  CauchyMixture mix;
  KeypointMixture kp;
  kp.kernels.push_back({0.35, {10, 10}, {1.0, 2.0}});
  kp.kernels.push_back({0.65, {13, 8}, {2.0, 1.0}});
  mix.per_keypoint.push_back(kp);

  const Vec2 center{11.5, 9.0};
  const Vec2 span{6.0, 6.0};
  const int n = 1200;
  const double dtheta = std::numbers::pi / n;
  double integral = 0.0;
  std::vector<double> xs(n), wx(n), ys(n), wy(n);
  for (int i = 0; i < n; ++i) {
    double theta = -std::numbers::pi / 2 + (i + 0.5) * dtheta;
    double t = std::tan(theta), sec2 = 1.0 + t * t;
    xs[static_cast<std::size_t>(i)] = center[0] + span[0] * t;
    wx[static_cast<std::size_t>(i)] = span[0] * sec2 * dtheta;
    ys[static_cast<std::size_t>(i)] = center[1] + span[1] * t;
    wy[static_cast<std::size_t>(i)] = span[1] * sec2 * dtheta;
  }
  for (int i = 0; i < n; ++i) {
    double row = 0.0;
    for (int j = 0; j < n; ++j)
      row += std::exp(log_density_point(kp, Vec2(xs[static_cast<std::size_t>(i)],
                                                 ys[static_cast<std::size_t>(j)]))) *
             wy[static_cast<std::size_t>(j)];
    integral += row * wx[static_cast<std::size_t>(i)];
  }
  CHECK(integral == Catch::Approx(1.0).margin(0.01));
}

TEST_CASE("mixture JSON round-trips") {
  CauchyMixture mix;
  for (int j = 0; j < 3; ++j) {
    KeypointMixture kp;
    kp.kernels.push_back({0.5, {1.0 + j, 2.0}, {0.5, 0.7}});
    kp.kernels.push_back({0.5, {-1.0, 4.0 - j}, {1.5, 2.0}});
    mix.per_keypoint.push_back(kp);
  }
  auto back = mixture_from_json(to_json(mix));
  REQUIRE(back.keypoints() == 3);
  for (int j = 0; j < 3; ++j)
    for (int u = 0; u < 2; ++u) {
      const auto& a = mix.per_keypoint[static_cast<std::size_t>(j)].kernels[static_cast<std::size_t>(u)];
      const auto& b = back.per_keypoint[static_cast<std::size_t>(j)].kernels[static_cast<std::size_t>(u)];
      CHECK(a.weight == b.weight);
      CHECK((a.loc - b.loc).norm() == 0.0);
      CHECK((a.scale - b.scale).norm() == 0.0);
    }
}

TEST_CASE("responsibility argmax picks the generating kernel for separated modes") {
  CauchyMixture mix;
  KeypointMixture kp;
  kp.kernels.push_back({0.5, {0, 0}, {1, 1}});
  kp.kernels.push_back({0.5, {60, 60}, {1, 1}});
  mix.per_keypoint.push_back(kp);
  KeypointSample near_first(1, 2), near_second(1, 2);
  near_first << 1.0, -0.5;
  near_second << 59.0, 61.0;
  CHECK(responsibility_argmax(mix, near_first).selected[0] == 0);
  CHECK(responsibility_argmax(mix, near_second).selected[0] == 1);
}
