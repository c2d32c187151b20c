#include <catch2/catch_amalgamated.hpp>

#include "mocpose/metrics.hpp"

using namespace mocpose;

namespace {

std::vector<Vec3> random_cloud(Rng& rng, int n) {
  std::vector<Vec3> pts;
  for (int i = 0; i < n; ++i) pts.push_back({rng.normal(), rng.normal(), rng.normal()});
  return pts;
}

Pose random_rigid(Rng rng) {
  TranslationBounds b;
  b.x = {-1, 1};
  b.y = {-1, 1};
  b.z = {-1, 1};
  return random_pose(rng, b);
}

}  // namespace

TEST_CASE("add is zero at equality and tracks rigid offsets") {
  Rng rng(1);
  auto pts = random_cloud(rng, 20);
  Pose gt = random_rigid(rng.child(1));
  CHECK(add_metric(gt, gt, pts) == 0.0);

  Pose shifted = gt;
  shifted.translation += Vec3{0.03, 0, 0};
  CHECK(add_metric(shifted, gt, pts) == Catch::Approx(0.03).epsilon(1e-12));
}

TEST_CASE("add matches the naive loop oracle") {
  Rng rng(2);
  auto pts = random_cloud(rng, 25);
  Pose a = random_rigid(rng.child(1)), b = random_rigid(rng.child(2));
  double naive = 0.0;
  for (const auto& p : pts) naive += ((a.rotation * p + a.translation) -
                                      (b.rotation * p + b.translation)).norm();
  naive /= static_cast<double>(pts.size());
  CHECK(add_metric(a, b, pts) == Catch::Approx(naive).epsilon(1e-12));
  REQUIRE_THROWS_AS(add_metric(a, b, {}), std::invalid_argument);
}

TEST_CASE("adds vanishes under a symmetry rotation where add does not") {
  // unit square centered at the origin in the xy plane
  std::vector<Vec3> square{{0.5, 0.5, 0}, {-0.5, 0.5, 0}, {-0.5, -0.5, 0}, {0.5, -0.5, 0}};
  Pose gt;
  gt.translation = {0, 0, 1};
  Pose rotated = gt;
  rotated.rotation = Eigen::AngleAxisd(std::numbers::pi, Vec3::UnitZ()).toRotationMatrix();
  CHECK(adds_metric(rotated, gt, square) < 1e-12);
  CHECK(add_metric(rotated, gt, square) > 0.5);
}

TEST_CASE("adds never exceeds add") {
  Rng rng(3);
  for (int trial = 0; trial < 1000; ++trial) {
    Rng rt = rng.child(static_cast<std::uint64_t>(trial));
    auto pts = random_cloud(rt, 8);
    Pose a = random_rigid(rt.child(1)), b = random_rigid(rt.child(2));
    CHECK(adds_metric(a, b, pts) <= add_metric(a, b, pts) + 1e-12);
  }
}

TEST_CASE("adds matches a brute-force closest-point oracle") {
  Rng rng(4);
  auto pts = random_cloud(rng, 15);
  Pose a = random_rigid(rng.child(1)), b = random_rigid(rng.child(2));
  double naive = 0.0;
  for (const auto& p : pts) {
    Vec3 ap = a.rotation * p + a.translation;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& q : pts) best = std::min(best, (ap - (b.rotation * q + b.translation)).norm());
    naive += best;
  }
  naive /= static_cast<double>(pts.size());
  CHECK(adds_metric(a, b, pts) == Catch::Approx(naive).epsilon(1e-12));
}

TEST_CASE("metric invariance under point permutations") {
  Rng rng(5);
  auto pts = random_cloud(rng, 12);
  Pose a = random_rigid(rng.child(1)), b = random_rigid(rng.child(2));
  auto shuffled = pts;
  Rng rs = rng.child(3);
  for (std::size_t i = shuffled.size(); i > 1; --i)
    std::swap(shuffled[i - 1], shuffled[rs.uniform_index(i)]);
  CHECK(add_metric(a, b, pts) == Catch::Approx(add_metric(a, b, shuffled)).epsilon(1e-12));
  CHECK(adds_metric(a, b, pts) == Catch::Approx(adds_metric(a, b, shuffled)).epsilon(1e-12));
}

TEST_CASE("diameter on known shapes and against the brute-force oracle") {
  CHECK(diameter({{0, 0, 0}, {1, 0, 0}}) == 1.0);

  std::vector<Vec3> cube;
  for (int i = 0; i < 8; ++i)
    cube.push_back({i & 1 ? 0.5 : -0.5, i & 2 ? 0.5 : -0.5, i & 4 ? 0.5 : -0.5});
  CHECK(diameter(cube) == Catch::Approx(std::sqrt(3.0)).epsilon(1e-12));

  Rng rng(6);
  auto pts = random_cloud(rng, 40);
  double naive = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i)
    for (std::size_t j = 0; j < pts.size(); ++j)
      naive = std::max(naive, (pts[i] - pts[j]).norm());
  CHECK(diameter(pts) == naive);

  REQUIRE_THROWS_AS(diameter({{0, 0, 0}}), std::invalid_argument);
}

TEST_CASE("correctness threshold is strict") {
  CHECK(pose_correct(0.0, 1.0, false, 0.0));
  CHECK_FALSE(pose_correct(0.1, 1.0, false, 0.1));  // exactly 10% fails
  CHECK(pose_correct(0.0999999, 1.0, false, 0.5));
  // symmetric objects score on add_s
  CHECK(pose_correct(0.5, 1.0, true, 0.05));
  CHECK_FALSE(pose_correct(0.05, 1.0, true, 0.5));
  REQUIRE_THROWS_AS(pose_correct(0.0, 0.0, false, 0.0), std::invalid_argument);
}

TEST_CASE("auc handles the documented endpoint cases") {
  CHECK(auc({0.0, 0.0, 0.0}) == 1.0);
  CHECK(auc({0.2, 0.5, 0.11}) == 0.0);
  CHECK(auc({0.05}) == Catch::Approx(0.5).epsilon(1e-12));
  REQUIRE_THROWS_AS(auc({}), std::invalid_argument);
  REQUIRE_THROWS_AS(auc({-0.1}), std::invalid_argument);
}

TEST_CASE("auc matches a sorted step-function oracle") {
  Rng rng(7);
  for (int trial = 0; trial < 50; ++trial) {
    Rng rt = rng.child(static_cast<std::uint64_t>(trial));
    std::vector<double> d;
    int n = 1 + static_cast<int>(rt.uniform_index(30));
    for (int i = 0; i < n; ++i) d.push_back(rt.uniform(0.0, 0.2));

    // integrate accuracy(tau) over [0, T] by walking the sorted distances
    const double T = 0.10;
    std::vector<double> sorted = d;
    std::sort(sorted.begin(), sorted.end());
    double area = 0.0, prev = 0.0;
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      double cut = std::min(sorted[i], T);
      if (cut > prev) area += (cut - prev) * (static_cast<double>(i) / n);
      prev = std::max(prev, cut);
      if (prev >= T) break;
    }
    if (prev < T) area += (T - prev) * 1.0;
    area /= T;
    CHECK(auc(d, T) == Catch::Approx(area).margin(1e-12));
  }
}

TEST_CASE("auc of constant distances has the documented closed form") {
  for (double d : {0.0, 0.02, 0.05, 0.09, 0.1, 0.3}) {
    std::vector<double> v(7, d);
    CHECK(auc(v) == Catch::Approx(std::max(0.0, 1.0 - d / 0.10)).margin(1e-12));
  }
}

TEST_CASE("auc is monotone under pointwise increase") {
  Rng rng(8);
  std::vector<double> d;
  for (int i = 0; i < 20; ++i) d.push_back(rng.uniform(0.0, 0.15));
  auto worse = d;
  for (auto& x : worse) x += 0.01;
  CHECK(auc(worse) <= auc(d));
}

TEST_CASE("evaluate_pose fills a consistent record") {
  Rng rng(9);
  auto pts = random_cloud(rng, 30);
  Pose gt = random_rigid(rng.child(1));
  Pose pred = gt;
  pred.translation += Vec3{0.001, 0, 0};
  auto rec = evaluate_pose("thing", pred, gt, pts, false);
  CHECK(rec.add == Catch::Approx(0.001).epsilon(1e-9));
  CHECK(rec.add_s <= rec.add);
  CHECK(rec.correct == (rec.add < 0.1 * diameter(pts)));
}
