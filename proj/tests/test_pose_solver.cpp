#include <catch2/catch_amalgamated.hpp>

#include "mocpose/pose_solver.hpp"

using namespace mocpose;

namespace {

CameraIntrinsics toy_cam() { return CameraIntrinsics{600, 600, 320, 240, 640, 480}; }

CorrespondenceSet project_object(const ObjectModel& obj, const Pose& pose,
                                 const CameraIntrinsics& cam) {
  CorrespondenceSet corr;
  corr.pts3d = obj.points;
  corr.pts2d = project(pose, cam, obj.points);
  return corr;
}

Pose sample_pose(Rng rng) {
  TranslationBounds b;
  b.x = {-0.1, 0.1};
  b.y = {-0.1, 0.1};
  b.z = {0.8, 1.4};
  return random_pose(rng, b);
}

}  // namespace

TEST_CASE("epnp recovers a box pose exactly from noiseless projections") {
  auto obj = synth_object(ObjectKind::Box, 8, 0.1, Rng(1));
  Pose gt = sample_pose(Rng(2));
  auto corr = project_object(obj, gt, toy_cam());
  Pose est = epnp(corr, toy_cam());
  CHECK(rotation_angle(est.rotation, gt.rotation) < 1e-6);
  CHECK((est.translation - gt.translation).norm() < 1e-6);
  CHECK(est.rotation_is_orthonormal(1e-9));
}

TEST_CASE("epnp recovers a pure z translation") {
  auto obj = synth_object(ObjectKind::Box, 8, 0.1, Rng(3));
  Pose gt;
  gt.translation = {0, 0, 1.0};
  auto corr = project_object(obj, gt, toy_cam());
  Pose est = epnp(corr, toy_cam());
  CHECK((est.translation - Vec3{0, 0, 1.0}).norm() < 1e-6);
  CHECK(rotation_angle(est.rotation, Mat3::Identity()) < 1e-6);
}

TEST_CASE("epnp refuses fewer than four points") {
  CorrespondenceSet corr;
  corr.pts3d = {{0, 0, 0}, {1, 0, 0}, {0, 1, 0}};
  corr.pts2d = {{0, 0}, {1, 0}, {0, 1}};
  REQUIRE_THROWS_WITH(epnp(corr, toy_cam()), Catch::Matchers::ContainsSubstring("at least 4"));
}

TEST_CASE("epnp rejects collinear configurations") {
  CorrespondenceSet corr;
  for (int i = 0; i < 6; ++i) {
    corr.pts3d.push_back({0.01 * i, 0, 0});
    corr.pts2d.push_back({100.0 + i, 100.0});
  }
  REQUIRE_THROWS_WITH(epnp(corr, toy_cam()),
                      Catch::Matchers::ContainsSubstring("degenerate configuration"));
}

TEST_CASE("epnp handles planar point sets") {
  Rng rng(5);
  CorrespondenceSet corr;
  Pose gt = sample_pose(Rng(6));
  for (int i = 0; i < 12; ++i) {
    Vec3 p{rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), 0.0};  // z = 0 plane
    corr.pts3d.push_back(p);
  }
  corr.pts2d = project(gt, toy_cam(), corr.pts3d);
  Pose est = epnp(corr, toy_cam());
  CHECK(rotation_angle(est.rotation, gt.rotation) < 1e-4);
  CHECK((est.translation - gt.translation).norm() < 1e-4);
}

TEST_CASE("noiseless round-trip over random poses and objects") {
  Rng rng(7);
  for (int trial = 0; trial < 100; ++trial) {
    Rng rt = rng.child(static_cast<std::uint64_t>(trial));
    auto kind = trial % 3 == 0   ? ObjectKind::Box
                : trial % 3 == 1 ? ObjectKind::SphereCloud
                                 : ObjectKind::Blob;
    int n = 12 + static_cast<int>(rt.uniform_index(80));
    auto obj = synth_object(kind, n, 0.12, rt.child(1));
    Pose gt = sample_pose(rt.child(2));
    auto corr = project_object(obj, gt, toy_cam());
    Pose est = refine(epnp(corr, toy_cam()), corr, toy_cam());
    CHECK(rotation_angle(est.rotation, gt.rotation) < 1e-5);
    CHECK((est.translation - gt.translation).norm() < 1e-5);
  }
}

TEST_CASE("refine is a fixed point at the ground truth") {
  auto obj = synth_object(ObjectKind::Blob, 24, 0.12, Rng(8));
  Pose gt = sample_pose(Rng(9));
  auto corr = project_object(obj, gt, toy_cam());
  Pose out = refine(gt, corr, toy_cam());
  CHECK(rotation_angle(out.rotation, gt.rotation) < 1e-9);
  CHECK((out.translation - gt.translation).norm() < 1e-9);
}

TEST_CASE("refine recovers from a 2-degree rotation perturbation") {
  auto obj = synth_object(ObjectKind::Blob, 30, 0.12, Rng(10));
  Pose gt = sample_pose(Rng(11));
  auto corr = project_object(obj, gt, toy_cam());

  Pose start = gt;
  Vec3 axis = Vec3{0.3, -0.5, 0.81}.normalized();
  start.rotation = detail::rodrigues(axis * (2.0 * std::numbers::pi / 180.0)) * gt.rotation;
  Pose out = refine(start, corr, toy_cam(), 50);
  CHECK(rotation_angle(out.rotation, gt.rotation) < 1e-6);
  CHECK((out.translation - gt.translation).norm() < 1e-6);
}

TEST_CASE("refine never increases the reprojection rmse") {
  Rng rng(12);
  for (int trial = 0; trial < 30; ++trial) {
    Rng rt = rng.child(static_cast<std::uint64_t>(trial));
    auto obj = synth_object(ObjectKind::Blob, 20, 0.12, rt.child(1));
    Pose gt = sample_pose(rt.child(2));
    auto corr = project_object(obj, gt, toy_cam());
    // noisy observations and a perturbed start
    for (auto& p : corr.pts2d) p += Vec2{rt.normal(), rt.normal()};
    Pose start = gt;
    start.translation += Vec3{rt.normal(), rt.normal(), rt.normal()} * 0.01;
    double before = detail::reprojection_rmse(start, corr, toy_cam());
    Pose out = refine(start, corr, toy_cam());
    double after = detail::reprojection_rmse(out, corr, toy_cam());
    CHECK(after <= before + 1e-12);
  }
}

TEST_CASE("ransac marks everything inlier on clean data and is seed-stable") {
  auto obj = synth_object(ObjectKind::Blob, 40, 0.12, Rng(13));
  Pose gt = sample_pose(Rng(14));
  auto corr = project_object(obj, gt, toy_cam());
  auto [pose, mask] = ransac_pnp(corr, toy_cam(), 100, 2.0, Rng(15));
  for (bool b : mask) CHECK(b);
  CHECK(rotation_angle(pose.rotation, gt.rotation) < 1e-6);

  auto [pose2, mask2] = ransac_pnp(corr, toy_cam(), 100, 2.0, Rng(15));
  CHECK((pose2.rotation - pose.rotation).cwiseAbs().maxCoeff() == 0.0);
  CHECK((pose2.translation - pose.translation).norm() == 0.0);
  CHECK(mask2 == mask);
}

TEST_CASE("ransac tolerates 20 percent gross outliers on 128 points") {
  Rng rng(16);
  auto obj = synth_object(ObjectKind::Blob, 128, 0.12, rng.child(1));
  Pose gt = sample_pose(rng.child(2));
  auto corr = project_object(obj, gt, toy_cam());
  Rng noise = rng.child(3);
  for (int i = 0; i < 128; ++i) {
    if (noise.uniform() < 0.2) {
      corr.pts2d[static_cast<std::size_t>(i)] =
          Vec2{noise.uniform(0, 640), noise.uniform(0, 480)};
    }
  }
  auto [pose, mask] = ransac_pnp(corr, toy_cam(), 200, 4.0, rng.child(4));
  CHECK(rotation_angle(pose.rotation, gt.rotation) < 0.01);
  CHECK((pose.translation - gt.translation).norm() < 0.01);
}

TEST_CASE("ransac reports no consensus for pure noise") {
  Rng rng(17);
  CorrespondenceSet corr;
  for (int i = 0; i < 24; ++i) {
    corr.pts3d.push_back({rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1)});
    corr.pts2d.push_back({rng.uniform(0, 640), rng.uniform(0, 480)});
  }
  REQUIRE_THROWS_WITH(ransac_pnp(corr, toy_cam(), 10, 0.01, rng.child(1)),
                      Catch::Matchers::ContainsSubstring("no consensus"));
}

TEST_CASE("median pose error grows with observation noise") {
  Rng rng(18);
  std::vector<double> sigmas{0.0, 0.5, 1.0, 2.0};
  std::vector<double> medians;
  for (double sigma : sigmas) {
    std::vector<double> errs;
    for (int trial = 0; trial < 500; ++trial) {
      Rng rt = rng.child(static_cast<std::uint64_t>(trial) * 17 + static_cast<std::uint64_t>(sigma * 1000));
      auto obj = synth_object(ObjectKind::Blob, 32, 0.12, rt.child(1));
      Pose gt = sample_pose(rt.child(2));
      auto corr = project_object(obj, gt, toy_cam());
      Rng noise = rt.child(3);
      for (auto& p : corr.pts2d) p += Vec2{noise.normal(), noise.normal()} * sigma;
      Pose est = refine(epnp(corr, toy_cam()), corr, toy_cam());
      errs.push_back(rotation_angle(est.rotation, gt.rotation) +
                     (est.translation - gt.translation).norm());
    }
    std::sort(errs.begin(), errs.end());
    medians.push_back(errs[errs.size() / 2]);
  }
  for (std::size_t i = 1; i < medians.size(); ++i) CHECK(medians[i] >= medians[i - 1] - 1e-12);
}

TEST_CASE("returned rotations are orthonormal with unit determinant") {
  Rng rng(19);
  for (int trial = 0; trial < 40; ++trial) {
    Rng rt = rng.child(static_cast<std::uint64_t>(trial));
    auto obj = synth_object(ObjectKind::SphereCloud, 24, 0.12, rt.child(1));
    Pose gt = sample_pose(rt.child(2));
    auto corr = project_object(obj, gt, toy_cam());
    Rng noise = rt.child(3);
    for (auto& p : corr.pts2d) p += Vec2{noise.normal(), noise.normal()} * 1.5;
    Pose est = epnp(corr, toy_cam());
    CHECK(est.rotation_is_orthonormal(1e-9));
  }
}

TEST_CASE("poses serialize as row-major JSON") {
  Pose p = sample_pose(Rng(20));
  auto j = to_json(p);
  REQUIRE(j.at("R").size() == 9);
  CHECK(j.at("R").at(1).get<double>() == p.rotation(0, 1));
  Pose back = pose_from_json(j);
  CHECK((back.rotation - p.rotation).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.translation - p.translation).norm() == 0.0);
}
