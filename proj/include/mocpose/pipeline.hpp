#pragma once

#include <Eigen/Dense>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <nlohmann/json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mocpose/cauchy_mixture.hpp"
#include "mocpose/common.hpp"
#include "mocpose/denoiser.hpp"
#include "mocpose/diffusion.hpp"
#include "mocpose/geometry.hpp"
#include "mocpose/metrics.hpp"
#include "mocpose/observation.hpp"
#include "mocpose/pose_solver.hpp"
#include "mocpose/rng.hpp"

namespace mocpose {

using nlohmann::json;

// -----------------------------------------------------------------------------
// configuration

struct ObjectConfig {
  std::string kind = "blob";
  int n_points = 300;
  double radius = 0.16;  // meters
  std::string name = "toy";
};

struct GeometryConfig {
  ObjectConfig object;
  int n_keypoints = 16;
  CameraIntrinsics camera{130.0, 130.0, 64.0, 64.0, 128, 128};
  TranslationBounds translation;
  int heatmap_stride = 4;
  double heatmap_sigma_px = 6.0;
  ObservationConfig observation{64, 64, 1, 0.15, 0.35, 0.6};
};

struct MocConfig {
  int kernels = 9;    // U
  int samples = 512;  // V
  int em_max_iters = 100;
  double em_tol = 1e-8;
};

struct ScheduleConfig {
  int steps = 100;  // K
  std::string kind = "cosine";
  double beta_start = 0.01;
  double beta_end = 0.30;
  double cosine_offset = 0.008;

  DiffusionSchedule build() const {
    ScheduleParams p;
    p.beta_start = beta_start;
    p.beta_end = beta_end;
    p.cosine_offset = cosine_offset;
    return make_schedule(steps, schedule_kind_from_string(kind), p);
  }
};

struct DenoiserSection {
  int d_model = 64;
  int heads = 4;
  int ffn_dim = 128;
  int patch = 8;
  bool paper_scale = false;  // widens the embedding to 128 / ffn 256
};

struct TrainingSection {
  int epochs = 30;
  double learning_rate = 4e-5;
  int trajectories = 5;     // M
  int pairs_per_scene = 4;
  std::string forward = "moc";
  bool appearance = true;
};

struct InferenceSection {
  int samples = 5;  // M
  int steps = 10;   // S
  std::string mode = "strided";
  // EM budget for the per-scene mixture refit that strided jumps need; kept
  // separate from the training budget because it sits on the inference path
  int em_iters = 15;
  double em_tol = 1e-4;
};

struct PnpSection {
  int ransac_iters = 200;
  double inlier_px = 8.0;
  int subset = 6;
  int refine_iters = 30;
  double refine_tol = 1e-12;
};

struct MetricsSection {
  bool symmetric = false;
  double auc_max_m = 0.10;
};

struct DatasetSection {
  int train = 500;
  int val = 0;
  int test = 100;
};

struct PipelineConfig {
  std::uint64_t seed = 1;
  GeometryConfig geometry;
  CorruptionConfig corruption{2.0, 5.0, 2, 0.35, 6.0, 0.25};
  MocConfig moc;
  ScheduleConfig schedule;
  DenoiserSection denoiser;
  TrainingSection training;
  InferenceSection inference;
  PnpSection pnp;
  MetricsSection metrics;
  DatasetSection dataset;

  void validate() const {
    geometry.camera.validate();
    corruption.validate();
    if (geometry.n_keypoints < 4) throw ConfigError("geometry: need at least 4 keypoints for PnP");
    if (geometry.object.n_points < geometry.n_keypoints)
      throw ConfigError("geometry: object must have at least n_keypoints points");
    if (geometry.camera.width % geometry.heatmap_stride != 0 ||
        geometry.camera.height % geometry.heatmap_stride != 0)
      throw ConfigError("geometry: image size must be divisible by the heatmap stride");
    if (moc.kernels < 1 || moc.samples < moc.kernels) throw ConfigError("moc: invalid sizes");
    if (inference.samples < 1 || inference.steps < 1 || inference.steps > schedule.steps)
      throw ConfigError("inference: invalid sample/step counts");
    chain_mode_from_string(inference.mode);
    forward_kind_from_string(training.forward);
    schedule.build();  // throws on bad params
    if (dataset.train < 0 || dataset.val < 0 || dataset.test < 0)
      throw ConfigError("dataset: negative scene counts");
  }

  DenoiserConfig denoiser_config() const {
    DenoiserConfig d;
    d.n_keypoints = geometry.n_keypoints;
    d.image_width = geometry.camera.width;
    d.image_height = geometry.camera.height;
    d.obs_width = geometry.observation.width;
    d.obs_height = geometry.observation.height;
    d.patch = denoiser.patch;
    d.d_model = denoiser.paper_scale ? 128 : denoiser.d_model;
    d.ffn_dim = denoiser.paper_scale ? 256 : denoiser.ffn_dim;
    d.heads = denoiser.heads;
    d.use_appearance = training.appearance;
    d.init_seed = seed;
    d.validate();
    return d;
  }

  TrainingConfig training_config() const {
    TrainingConfig t;
    t.epochs = training.epochs;
    t.learning_rate = training.learning_rate;
    t.trajectories = training.trajectories;
    t.pairs_per_scene = training.pairs_per_scene;
    t.moc_kernels = moc.kernels;
    t.moc_samples = moc.samples;
    t.em.max_iters = moc.em_max_iters;
    t.em.tol = moc.em_tol;
    t.forward = forward_kind_from_string(training.forward);
    t.seed = seed;
    t.validate();
    return t;
  }
};

inline json to_json(const PipelineConfig& c) {
  return json{
      {"seed", c.seed},
      {"geometry",
       {{"object",
         {{"kind", c.geometry.object.kind},
          {"n_points", c.geometry.object.n_points},
          {"radius", c.geometry.object.radius},
          {"name", c.geometry.object.name}}},
        {"n_keypoints", c.geometry.n_keypoints},
        {"camera", to_json(c.geometry.camera)},
        {"translation",
         {{"x", {c.geometry.translation.x[0], c.geometry.translation.x[1]}},
          {"y", {c.geometry.translation.y[0], c.geometry.translation.y[1]}},
          {"z", {c.geometry.translation.z[0], c.geometry.translation.z[1]}}}},
        {"heatmap_stride", c.geometry.heatmap_stride},
        {"heatmap_sigma_px", c.geometry.heatmap_sigma_px},
        {"observation",
         {{"width", c.geometry.observation.width},
          {"height", c.geometry.observation.height},
          {"occluders", c.geometry.observation.occluders},
          {"occluder_min_frac", c.geometry.observation.occluder_min_frac},
          {"occluder_max_frac", c.geometry.observation.occluder_max_frac},
          {"splat_gain", c.geometry.observation.splat_gain}}}}},
      {"corruption",
       {{"blur_sigma_px", c.corruption.blur_sigma_px},
        {"jitter_sigma_px", c.corruption.jitter_sigma_px},
        {"spurious_modes", c.corruption.spurious_modes},
        {"spurious_mass", c.corruption.spurious_mass},
        {"spurious_sigma_px", c.corruption.spurious_sigma_px},
        {"dropout_prob", c.corruption.dropout_prob}}},
      {"moc",
       {{"kernels", c.moc.kernels},
        {"samples", c.moc.samples},
        {"em_max_iters", c.moc.em_max_iters},
        {"em_tol", c.moc.em_tol}}},
      {"schedule",
       {{"steps", c.schedule.steps},
        {"kind", c.schedule.kind},
        {"beta_start", c.schedule.beta_start},
        {"beta_end", c.schedule.beta_end},
        {"cosine_offset", c.schedule.cosine_offset}}},
      {"denoiser",
       {{"d_model", c.denoiser.d_model},
        {"heads", c.denoiser.heads},
        {"ffn_dim", c.denoiser.ffn_dim},
        {"patch", c.denoiser.patch},
        {"paper_scale", c.denoiser.paper_scale}}},
      {"training",
       {{"epochs", c.training.epochs},
        {"learning_rate", c.training.learning_rate},
        {"trajectories", c.training.trajectories},
        {"pairs_per_scene", c.training.pairs_per_scene},
        {"forward", c.training.forward},
        {"appearance", c.training.appearance}}},
      {"inference",
       {{"samples", c.inference.samples},
        {"steps", c.inference.steps},
        {"mode", c.inference.mode},
        {"em_iters", c.inference.em_iters},
        {"em_tol", c.inference.em_tol}}},
      {"pnp",
       {{"ransac_iters", c.pnp.ransac_iters},
        {"inlier_px", c.pnp.inlier_px},
        {"subset", c.pnp.subset},
        {"refine_iters", c.pnp.refine_iters},
        {"refine_tol", c.pnp.refine_tol}}},
      {"metrics", {{"symmetric", c.metrics.symmetric}, {"auc_max_m", c.metrics.auc_max_m}}},
      {"dataset",
       {{"train", c.dataset.train}, {"val", c.dataset.val}, {"test", c.dataset.test}}}};
}

inline PipelineConfig config_from_json(const json& j) {
  PipelineConfig c;
  try {
    c.seed = j.value("seed", c.seed);
    if (j.contains("geometry")) {
      const auto& g = j.at("geometry");
      if (g.contains("object")) {
        const auto& o = g.at("object");
        c.geometry.object.kind = o.value("kind", c.geometry.object.kind);
        c.geometry.object.n_points = o.value("n_points", c.geometry.object.n_points);
        c.geometry.object.radius = o.value("radius", c.geometry.object.radius);
        c.geometry.object.name = o.value("name", c.geometry.object.name);
      }
      c.geometry.n_keypoints = g.value("n_keypoints", c.geometry.n_keypoints);
      if (g.contains("camera")) c.geometry.camera = camera_from_json(g.at("camera"));
      if (g.contains("translation")) {
        const auto& t = g.at("translation");
        auto axis = [&](const char* name, Vec2 dflt) {
          if (!t.contains(name)) return dflt;
          return Vec2{t.at(name).at(0).get<double>(), t.at(name).at(1).get<double>()};
        };
        c.geometry.translation.x = axis("x", c.geometry.translation.x);
        c.geometry.translation.y = axis("y", c.geometry.translation.y);
        c.geometry.translation.z = axis("z", c.geometry.translation.z);
      }
      c.geometry.heatmap_stride = g.value("heatmap_stride", c.geometry.heatmap_stride);
      c.geometry.heatmap_sigma_px = g.value("heatmap_sigma_px", c.geometry.heatmap_sigma_px);
      if (g.contains("observation")) {
        const auto& o = g.at("observation");
        c.geometry.observation.width = o.value("width", c.geometry.observation.width);
        c.geometry.observation.height = o.value("height", c.geometry.observation.height);
        c.geometry.observation.occluders = o.value("occluders", c.geometry.observation.occluders);
        c.geometry.observation.occluder_min_frac =
            o.value("occluder_min_frac", c.geometry.observation.occluder_min_frac);
        c.geometry.observation.occluder_max_frac =
            o.value("occluder_max_frac", c.geometry.observation.occluder_max_frac);
        c.geometry.observation.splat_gain = o.value("splat_gain", c.geometry.observation.splat_gain);
      }
    }
    if (j.contains("corruption")) {
      const auto& k = j.at("corruption");
      c.corruption.blur_sigma_px = k.value("blur_sigma_px", c.corruption.blur_sigma_px);
      c.corruption.jitter_sigma_px = k.value("jitter_sigma_px", c.corruption.jitter_sigma_px);
      c.corruption.spurious_modes = k.value("spurious_modes", c.corruption.spurious_modes);
      c.corruption.spurious_mass = k.value("spurious_mass", c.corruption.spurious_mass);
      c.corruption.spurious_sigma_px = k.value("spurious_sigma_px", c.corruption.spurious_sigma_px);
      c.corruption.dropout_prob = k.value("dropout_prob", c.corruption.dropout_prob);
    }
    if (j.contains("moc")) {
      const auto& m = j.at("moc");
      c.moc.kernels = m.value("kernels", c.moc.kernels);
      c.moc.samples = m.value("samples", c.moc.samples);
      c.moc.em_max_iters = m.value("em_max_iters", c.moc.em_max_iters);
      c.moc.em_tol = m.value("em_tol", c.moc.em_tol);
    }
    if (j.contains("schedule")) {
      const auto& s = j.at("schedule");
      c.schedule.steps = s.value("steps", c.schedule.steps);
      c.schedule.kind = s.value("kind", c.schedule.kind);
      c.schedule.beta_start = s.value("beta_start", c.schedule.beta_start);
      c.schedule.beta_end = s.value("beta_end", c.schedule.beta_end);
      c.schedule.cosine_offset = s.value("cosine_offset", c.schedule.cosine_offset);
    }
    if (j.contains("denoiser")) {
      const auto& d = j.at("denoiser");
      c.denoiser.d_model = d.value("d_model", c.denoiser.d_model);
      c.denoiser.heads = d.value("heads", c.denoiser.heads);
      c.denoiser.ffn_dim = d.value("ffn_dim", c.denoiser.ffn_dim);
      c.denoiser.patch = d.value("patch", c.denoiser.patch);
      c.denoiser.paper_scale = d.value("paper_scale", c.denoiser.paper_scale);
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      c.training.epochs = t.value("epochs", c.training.epochs);
      c.training.learning_rate = t.value("learning_rate", c.training.learning_rate);
      c.training.trajectories = t.value("trajectories", c.training.trajectories);
      c.training.pairs_per_scene = t.value("pairs_per_scene", c.training.pairs_per_scene);
      c.training.forward = t.value("forward", c.training.forward);
      c.training.appearance = t.value("appearance", c.training.appearance);
    }
    if (j.contains("inference")) {
      const auto& i = j.at("inference");
      c.inference.samples = i.value("samples", c.inference.samples);
      c.inference.steps = i.value("steps", c.inference.steps);
      c.inference.mode = i.value("mode", c.inference.mode);
      c.inference.em_iters = i.value("em_iters", c.inference.em_iters);
      c.inference.em_tol = i.value("em_tol", c.inference.em_tol);
    }
    if (j.contains("pnp")) {
      const auto& p = j.at("pnp");
      c.pnp.ransac_iters = p.value("ransac_iters", c.pnp.ransac_iters);
      c.pnp.inlier_px = p.value("inlier_px", c.pnp.inlier_px);
      c.pnp.subset = p.value("subset", c.pnp.subset);
      c.pnp.refine_iters = p.value("refine_iters", c.pnp.refine_iters);
      c.pnp.refine_tol = p.value("refine_tol", c.pnp.refine_tol);
    }
    if (j.contains("metrics")) {
      const auto& m = j.at("metrics");
      c.metrics.symmetric = m.value("symmetric", c.metrics.symmetric);
      c.metrics.auc_max_m = m.value("auc_max_m", c.metrics.auc_max_m);
    }
    if (j.contains("dataset")) {
      const auto& d = j.at("dataset");
      c.dataset.train = d.value("train", c.dataset.train);
      c.dataset.val = d.value("val", c.dataset.val);
      c.dataset.test = d.value("test", c.dataset.test);
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  c.validate();
  return c;
}

// dotted-path override, e.g. "training.epochs=40"; values parse as JSON when
// possible and fall back to strings
inline void apply_override(json& j, const std::string& setting) {
  auto eq = setting.find('=');
  if (eq == std::string::npos) throw ConfigError("--set expects key=value, got: " + setting);
  std::string key = setting.substr(0, eq);
  std::string value = setting.substr(eq + 1);
  json* node = &j;
  std::size_t pos = 0;
  while (true) {
    auto dot = key.find('.', pos);
    std::string part = key.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (part.empty()) throw ConfigError("--set: empty path segment in " + key);
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
      break;
    }
    node = &(*node)[part];
    pos = dot + 1;
  }
}

// -----------------------------------------------------------------------------
// atomic file helpers

inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw DataError("cannot write " + tmp.string());
    os << text;
  }
  std::filesystem::rename(tmp, path);
}

// -----------------------------------------------------------------------------
// dataset

struct SceneMeta {
  int id = 0;
  std::string split;
  Pose pose;
  KeypointSample kps2d;
  std::string heatmap_file;
  std::string obs_file;
};

struct Dataset {
  std::filesystem::path dir;
  PipelineConfig config;
  ObjectModel object;
  CameraIntrinsics camera;
  std::vector<SceneMeta> scenes;

  std::vector<const SceneMeta*> split(const std::string& name) const {
    std::vector<const SceneMeta*> out;
    for (const auto& s : scenes)
      if (s.split == name) out.push_back(&s);
    return out;
  }

  HeatmapStack scene_heatmaps(const SceneMeta& s) const {
    return normalize(load_heatmaps(dir / s.heatmap_file));
  }

  ObservationImage scene_observation(const SceneMeta& s) const {
    return load_observation(dir / s.obs_file);
  }
};

inline ObjectModel build_object(const PipelineConfig& cfg) {
  Rng rng = Rng(cfg.seed).child(seed_tag::kObject);
  ObjectModel obj = synth_object(object_kind_from_string(cfg.geometry.object.kind),
                                 cfg.geometry.object.n_points, cfg.geometry.object.radius, rng,
                                 cfg.geometry.object.name);
  obj.keypoint_indices = fps_select(obj.points, cfg.geometry.n_keypoints);
  return obj;
}

namespace detail {

// poses are redrawn until every keypoint projects inside the image with margin
inline Pose draw_scene_pose(const PipelineConfig& cfg, const ObjectModel& obj, Rng rng) {
  const auto kps = obj.keypoints();
  for (std::uint64_t attempt = 0; attempt < 200; ++attempt) {
    Pose pose = random_pose(rng.child(attempt), cfg.geometry.translation);
    bool ok = true;
    for (const auto& p : kps) {
      Vec3 c = pose.apply(p);
      if (!(c.z() > 0.05)) {
        ok = false;
        break;
      }
      double u = cfg.geometry.camera.fx * c.x() / c.z() + cfg.geometry.camera.cx;
      double v = cfg.geometry.camera.fy * c.y() / c.z() + cfg.geometry.camera.cy;
      if (u < 2.0 || u > cfg.geometry.camera.width - 2.0 || v < 2.0 ||
          v > cfg.geometry.camera.height - 2.0) {
        ok = false;
        break;
      }
    }
    if (ok) return pose;
  }
  throw ConfigError("gen-data: translation bounds keep the object outside the camera frustum");
}

inline std::string scene_file_stem(int id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "s%06d", id);
  return buf;
}

}  // namespace detail

inline Dataset cmd_gen_data(const PipelineConfig& cfg, const std::filesystem::path& out_dir) {
  cfg.validate();
  std::filesystem::create_directories(out_dir / "scenes");

  Dataset ds;
  ds.dir = out_dir;
  ds.config = cfg;
  ds.object = build_object(cfg);
  ds.camera = cfg.geometry.camera;

  const int total = cfg.dataset.train + cfg.dataset.val + cfg.dataset.test;
  ds.scenes.resize(static_cast<std::size_t>(total));
  Rng root(cfg.seed);

  HeatmapGeometry hgeom{cfg.geometry.camera.height, cfg.geometry.camera.width,
                        cfg.geometry.heatmap_stride};
  const auto kps3d = ds.object.keypoints();

  parallel_for(static_cast<std::size_t>(total), [&](std::size_t i) {
    SceneMeta meta;
    meta.id = static_cast<int>(i);
    meta.split = static_cast<int>(i) < cfg.dataset.train ? "train"
                 : static_cast<int>(i) < cfg.dataset.train + cfg.dataset.val ? "val"
                                                                             : "test";
    Rng rs = root.child(seed_tag::kScene).child(i);
    meta.pose = detail::draw_scene_pose(cfg, ds.object, rs.child(seed_tag::kPose));

    auto projected = project(meta.pose, cfg.geometry.camera, kps3d);
    meta.kps2d.resize(static_cast<Eigen::Index>(projected.size()), 2);
    for (std::size_t k = 0; k < projected.size(); ++k) {
      meta.kps2d(static_cast<Eigen::Index>(k), 0) = projected[k][0];
      meta.kps2d(static_cast<Eigen::Index>(k), 1) = projected[k][1];
    }

    HeatmapStack gt = render_gt_heatmaps(meta.kps2d, cfg.geometry.heatmap_sigma_px, hgeom);
    HeatmapStack noisy = corrupt_heatmaps(gt, cfg.corruption, rs.child(seed_tag::kCorrupt));
    ObservationImage obs = render_observation(ds.object, meta.pose, cfg.geometry.camera,
                                              cfg.geometry.observation, rs.child(seed_tag::kObserve));

    std::string stem = detail::scene_file_stem(meta.id);
    meta.heatmap_file = "scenes/" + stem + ".hm";
    meta.obs_file = "scenes/" + stem + ".obs";
    save_heatmaps(noisy, out_dir / meta.heatmap_file);
    save_observation(obs, out_dir / meta.obs_file);
    ds.scenes[i] = std::move(meta);
  });

  json scenes = json::array();
  for (const auto& s : ds.scenes) {
    json kps = json::array();
    for (Eigen::Index k = 0; k < s.kps2d.rows(); ++k)
      kps.push_back({s.kps2d(k, 0), s.kps2d(k, 1)});
    scenes.push_back({{"id", s.id},
                      {"split", s.split},
                      {"pose", to_json(s.pose)},
                      {"kps2d", kps},
                      {"heatmap", s.heatmap_file},
                      {"obs", s.obs_file}});
  }
  json manifest = {{"schema", 1},
                   {"config", to_json(cfg)},
                   {"object", to_json(ds.object)},
                   {"camera", to_json(ds.camera)},
                   {"scenes", scenes}};
  write_text_atomic(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return ds;
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw DataError("cannot read manifest: " + (dir / "manifest.json").string());
  json manifest;
  try {
    is >> manifest;
  } catch (const json::exception& e) {
    throw DataError(std::string("manifest parse error: ") + e.what());
  }

  Dataset ds;
  ds.dir = dir;
  ds.config = config_from_json(manifest.at("config"));
  ds.object = object_from_json(manifest.at("object"));
  ds.camera = camera_from_json(manifest.at("camera"));
  const auto kps3d = ds.object.keypoints();

  for (const auto& s : manifest.at("scenes")) {
    SceneMeta meta;
    meta.id = s.at("id").get<int>();
    meta.split = s.at("split").get<std::string>();
    meta.pose = pose_from_json(s.at("pose"));
    const auto& kps = s.at("kps2d");
    meta.kps2d.resize(static_cast<Eigen::Index>(kps.size()), 2);
    for (std::size_t k = 0; k < kps.size(); ++k) {
      meta.kps2d(static_cast<Eigen::Index>(k), 0) = kps.at(k).at(0).get<double>();
      meta.kps2d(static_cast<Eigen::Index>(k), 1) = kps.at(k).at(1).get<double>();
    }
    meta.heatmap_file = s.at("heatmap").get<std::string>();
    meta.obs_file = s.at("obs").get<std::string>();

    // ground-truth keypoints must match the projected model keypoints
    auto projected = project(meta.pose, ds.camera, kps3d);
    for (std::size_t k = 0; k < projected.size(); ++k) {
      if (std::abs(projected[k][0] - meta.kps2d(static_cast<Eigen::Index>(k), 0)) > 1e-9 ||
          std::abs(projected[k][1] - meta.kps2d(static_cast<Eigen::Index>(k), 1)) > 1e-9)
        throw DataError("dataset scene " + std::to_string(meta.id) +
                        ": stored keypoints do not match the projected pose");
    }
    ds.scenes.push_back(std::move(meta));
  }
  return ds;
}

// -----------------------------------------------------------------------------
// training command

struct TrainOutput {
  std::filesystem::path checkpoint;
  TrainReport report;
};

inline json checkpoint_sidecar(const PipelineConfig& cfg, const DenoiserConfig& dcfg,
                               int epochs_done) {
  return {{"denoiser",
           {{"n_keypoints", dcfg.n_keypoints},
            {"image_width", dcfg.image_width},
            {"image_height", dcfg.image_height},
            {"obs_width", dcfg.obs_width},
            {"obs_height", dcfg.obs_height},
            {"patch", dcfg.patch},
            {"d_model", dcfg.d_model},
            {"heads", dcfg.heads},
            {"ffn_dim", dcfg.ffn_dim},
            {"use_appearance", dcfg.use_appearance},
            {"init_seed", dcfg.init_seed}}},
          {"forward", cfg.training.forward},
          {"schedule", to_json(cfg.schedule.build())},
          {"config", to_json(cfg)},
          {"epochs_done", epochs_done}};
}

inline DenoiserConfig denoiser_config_from_sidecar(const json& j) {
  const auto& d = j.at("denoiser");
  DenoiserConfig dcfg;
  dcfg.n_keypoints = d.at("n_keypoints").get<int>();
  dcfg.image_width = d.at("image_width").get<int>();
  dcfg.image_height = d.at("image_height").get<int>();
  dcfg.obs_width = d.at("obs_width").get<int>();
  dcfg.obs_height = d.at("obs_height").get<int>();
  dcfg.patch = d.at("patch").get<int>();
  dcfg.d_model = d.at("d_model").get<int>();
  dcfg.heads = d.at("heads").get<int>();
  dcfg.ffn_dim = d.at("ffn_dim").get<int>();
  dcfg.use_appearance = d.at("use_appearance").get<bool>();
  dcfg.init_seed = d.at("init_seed").get<std::uint64_t>();
  dcfg.validate();
  return dcfg;
}

inline TrainOutput cmd_train(const PipelineConfig& cfg_in, const std::filesystem::path& data_dir,
                             const std::filesystem::path& out_checkpoint,
                             const std::optional<std::filesystem::path>& resume = {}) {
  Dataset ds = load_dataset(data_dir);
  PipelineConfig cfg = cfg_in;
  cfg.validate();

  DiffusionSchedule sched = cfg.schedule.build();
  if (!sched.terminal_is_indeterminate())
    throw ConfigError("training schedule: alpha_bar at the final step must be < 1e-3");

  std::vector<TrainScene> scenes;
  for (const SceneMeta* s : ds.split("train")) {
    TrainScene t;
    t.d0 = s->kps2d;
    t.obs = ds.scene_observation(*s);
    t.heatmaps = ds.scene_heatmaps(*s);
    scenes.push_back(std::move(t));
  }
  if (scenes.empty()) throw DataError("cmd_train: dataset has no train split");

  DenoiserConfig dcfg = cfg.denoiser_config();
  if (dcfg.n_keypoints != static_cast<int>(ds.object.keypoint_indices.size()))
    throw DataError("cmd_train: config n_keypoints does not match dataset object");

  DenoiserModel model = DenoiserModel::create(dcfg);
  Trainer trainer(model, sched, cfg.training_config());
  if (resume) load_checkpoint(*resume, model, &trainer);

  TrainReport report = trainer.train(scenes);

  std::filesystem::path tmp = out_checkpoint;
  tmp += ".tmp";
  save_checkpoint(tmp, model, &trainer);
  std::filesystem::rename(tmp, out_checkpoint);

  write_text_atomic(out_checkpoint.string() + ".json",
                    checkpoint_sidecar(cfg, dcfg, trainer.epoch_done).dump(2) + "\n");
  std::ostringstream csv;
  csv << "epoch,mean_loss\n";
  for (std::size_t e = 0; e < trainer.loss_trace.size(); ++e)
    csv << e << "," << trainer.loss_trace[e] << "\n";
  write_text_atomic(out_checkpoint.string() + ".loss.csv", csv.str());

  return {out_checkpoint, report};
}

// -----------------------------------------------------------------------------
// evaluation command

struct EvalFlags {
  std::optional<std::string> mode;      // full | strided | naive
  bool baseline_initializer_only = false;
  bool oracle_denoiser = false;
  bool force_no_appearance = false;
};

struct EvalSummary {
  std::string variant;
  int scenes = 0;
  int pnp_failures = 0;
  double accuracy = 0.0;   // percent correct under the 10%-diameter test
  double auc_add = 0.0;    // AUC over the metric used for correctness
  double auc_add_s = 0.0;  // AUC over the closest-point distances
  double mean_add = 0.0;
  double mean_add_s = 0.0;
  double wall_seconds = 0.0;  // not written to report files
};

struct EvalOutput {
  std::vector<EvalRecord> records;
  EvalSummary summary;
  json report;
};

inline KeypointSample heatmap_argmax_coords(const HeatmapStack& heat) {
  KeypointSample out(heat.count(), 2);
  for (int j = 0; j < heat.count(); ++j) {
    const auto& g = heat.grids[static_cast<std::size_t>(j)];
    Eigen::Index r = 0, c = 0;
    g.maxCoeff(&r, &c);
    out(j, 0) = (static_cast<double>(c) + 0.5) * heat.stride;
    out(j, 1) = (static_cast<double>(r) + 0.5) * heat.stride;
  }
  return out;
}

inline EvalOutput run_eval(const std::filesystem::path& checkpoint,
                           const std::filesystem::path& data_dir, const EvalFlags& flags) {
  Dataset ds = load_dataset(data_dir);
  const PipelineConfig& cfg = ds.config;

  json sidecar;
  DenoiserModel model = [&]() {
    std::ifstream is(checkpoint.string() + ".json");
    if (!is) throw DataError("cannot read checkpoint sidecar: " + checkpoint.string() + ".json");
    is >> sidecar;
    DenoiserConfig dcfg = denoiser_config_from_sidecar(sidecar);
    if (flags.force_no_appearance) dcfg.use_appearance = false;
    DenoiserModel m = DenoiserModel::create(dcfg);
    load_checkpoint(checkpoint, m);
    return m;
  }();

  // compatibility between the checkpoint and the dataset
  if (model.cfg.n_keypoints != static_cast<int>(ds.object.keypoint_indices.size()))
    throw DataError("eval: checkpoint n_keypoints=" + std::to_string(model.cfg.n_keypoints) +
                    " does not match dataset n_keypoints=" +
                    std::to_string(ds.object.keypoint_indices.size()));
  if (model.cfg.image_width != ds.camera.width || model.cfg.image_height != ds.camera.height)
    throw DataError("eval: checkpoint image size does not match dataset camera size");

  DiffusionSchedule sched = schedule_from_json(sidecar.at("schedule"));
  ForwardKind forward = forward_kind_from_string(sidecar.at("forward").get<std::string>());
  ChainMode mode = chain_mode_from_string(flags.mode.value_or(cfg.inference.mode));
  if (forward == ForwardKind::Gaussian && mode == ChainMode::Strided)
    throw ConfigError("eval: strided jumps need the mixture forward; use --mode full or naive");

  const auto kps3d = ds.object.keypoints();
  const auto test_scenes = ds.split("test");
  if (test_scenes.empty()) throw DataError("eval: dataset has no test split");

  std::vector<int> steps = mode == ChainMode::Full
                               ? substep_sequence(sched.steps, sched.steps)
                               : substep_sequence(sched.steps, cfg.inference.steps);

  std::vector<EvalRecord> records(test_scenes.size());
  std::vector<char> failed(test_scenes.size(), 0);
  Rng root(cfg.seed);

  auto t0 = std::chrono::steady_clock::now();
  parallel_for(test_scenes.size(), [&](std::size_t i) {
    const SceneMeta& scene = *test_scenes[i];
    Rng rs = root.child(seed_tag::kChain).child(static_cast<std::uint64_t>(scene.id));
    HeatmapStack heat = ds.scene_heatmaps(scene);

    KeypointSample pred2d;
    if (flags.oracle_denoiser) {
      pred2d = scene.kps2d;
    } else if (flags.baseline_initializer_only) {
      pred2d = heatmap_argmax_coords(heat);
    } else {
      DecoderContext ctx =
          make_decoder_context(model, encode_appearance(model, ds.scene_observation(scene)));
      std::vector<KeypointSample> init;
      if (forward == ForwardKind::Gaussian) {
        // this variant denoises from unit gaussian noise in normalized space
        init.reserve(static_cast<std::size_t>(cfg.inference.samples));
        for (int m = 0; m < cfg.inference.samples; ++m) {
          Rng rm = rs.child(1).child(static_cast<std::uint64_t>(m));
          Eigen::MatrixXd z(model.cfg.n_keypoints, 2);
          for (int jj = 0; jj < model.cfg.n_keypoints; ++jj) {
            z(jj, 0) = rm.normal();
            z(jj, 1) = rm.normal();
          }
          init.push_back(model.denormalize_coords(z));
        }
      } else {
        init = sample_coords(heat, cfg.inference.samples, rs.child(1));
      }
      CauchyMixture mix;
      const CauchyMixture* mix_ptr = nullptr;
      if (mode == ChainMode::Strided) {
        EmOptions em;
        em.max_iters = cfg.inference.em_iters;
        em.tol = cfg.inference.em_tol;
        mix = em_fit(sample_coords(heat, cfg.moc.samples, rs.child(2)), cfg.moc.kernels, em,
                     rs.child(3));
        mix_ptr = &mix;
      }
      pred2d = reverse_chain(model, ctx, init, sched, steps, mix_ptr, mode).d0;
    }

    CorrespondenceSet corr;
    corr.pts3d = kps3d;
    corr.pts2d.reserve(static_cast<std::size_t>(pred2d.rows()));
    for (Eigen::Index k = 0; k < pred2d.rows(); ++k)
      corr.pts2d.push_back({pred2d(k, 0), pred2d(k, 1)});

    EvalRecord rec;
    try {
      auto [pose, mask] = ransac_pnp(corr, ds.camera, cfg.pnp.ransac_iters, cfg.pnp.inlier_px,
                                     rs.child(4), cfg.pnp.subset);
      rec = evaluate_pose(ds.object.name, pose, scene.pose, ds.object.points,
                          cfg.metrics.symmetric);
    } catch (const NumericError&) {
      // no consensus: count as a miss at a fixed large distance
      rec.object = ds.object.name;
      rec.add = rec.add_s = 1.0;
      rec.correct = false;
      rec.pose_gt = scene.pose;
      failed[i] = 1;
    }
    records[i] = std::move(rec);
  });
  auto t1 = std::chrono::steady_clock::now();

  EvalSummary summary;
  summary.variant = flags.oracle_denoiser ? "oracle"
                    : flags.baseline_initializer_only ? "initializer-only"
                                                      : to_string(mode);
  summary.scenes = static_cast<int>(records.size());
  std::vector<double> d_add, d_add_s, d_scoring;
  int correct = 0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    d_add.push_back(r.add);
    d_add_s.push_back(r.add_s);
    d_scoring.push_back(cfg.metrics.symmetric ? r.add_s : r.add);
    if (r.correct) ++correct;
    if (failed[i]) ++summary.pnp_failures;
  }
  summary.accuracy = 100.0 * correct / static_cast<double>(records.size());
  summary.auc_add = auc(d_scoring, cfg.metrics.auc_max_m);
  summary.auc_add_s = auc(d_add_s, cfg.metrics.auc_max_m);
  summary.mean_add = Eigen::Map<Eigen::VectorXd>(d_add.data(), static_cast<Eigen::Index>(d_add.size())).mean();
  summary.mean_add_s =
      Eigen::Map<Eigen::VectorXd>(d_add_s.data(), static_cast<Eigen::Index>(d_add_s.size())).mean();
  summary.wall_seconds = std::chrono::duration<double>(t1 - t0).count();

  json jrecords = json::array();
  for (const auto& r : records)
    jrecords.push_back({{"object", r.object},
                        {"add", r.add},
                        {"add_s", r.add_s},
                        {"correct", r.correct},
                        {"pose_pred", to_json(r.pose_pred)},
                        {"pose_gt", to_json(r.pose_gt)}});
  json report = {{"variant", summary.variant},
                 {"scenes", summary.scenes},
                 {"pnp_failures", summary.pnp_failures},
                 {"accuracy", summary.accuracy},
                 {"auc_add", summary.auc_add},
                 {"auc_add_s", summary.auc_add_s},
                 {"mean_add", summary.mean_add},
                 {"mean_add_s", summary.mean_add_s},
                 {"records", jrecords}};

  EvalOutput out;
  out.records = std::move(records);
  out.summary = summary;
  out.report = std::move(report);
  return out;
}

inline void write_eval_report(const EvalOutput& out, const std::filesystem::path& prefix) {
  write_text_atomic(prefix.string() + ".json", out.report.dump(2) + "\n");
  std::ostringstream csv;
  csv << "object,add,add_s,correct\n";
  for (const auto& r : out.records)
    csv << r.object << "," << r.add << "," << r.add_s << "," << (r.correct ? 1 : 0) << "\n";
  csv << "summary(" << out.summary.variant << "),accuracy=" << out.summary.accuracy
      << ",auc_add=" << out.summary.auc_add << ",auc_add_s=" << out.summary.auc_add_s << "\n";
  write_text_atomic(prefix.string() + ".csv", csv.str());
}

inline EvalOutput cmd_eval(const std::filesystem::path& checkpoint,
                           const std::filesystem::path& data_dir, const EvalFlags& flags,
                           const std::filesystem::path& out_prefix) {
  EvalOutput out = run_eval(checkpoint, data_dir, flags);
  write_eval_report(out, out_prefix);
  return out;
}

// -----------------------------------------------------------------------------
// single-scene inference

struct InferOutput {
  Pose pose;
  KeypointSample d0;
  json dump;  // populated when dump_steps
};

inline InferOutput cmd_infer(const std::filesystem::path& checkpoint,
                             const std::filesystem::path& data_dir, int scene_id,
                             bool dump_steps = false) {
  Dataset ds = load_dataset(data_dir);
  const PipelineConfig& cfg = ds.config;

  json sidecar;
  {
    std::ifstream is(checkpoint.string() + ".json");
    if (!is) throw DataError("cannot read checkpoint sidecar: " + checkpoint.string() + ".json");
    is >> sidecar;
  }
  DenoiserConfig dcfg = denoiser_config_from_sidecar(sidecar);
  DenoiserModel model = DenoiserModel::create(dcfg);
  load_checkpoint(checkpoint, model);
  DiffusionSchedule sched = schedule_from_json(sidecar.at("schedule"));
  ForwardKind forward = forward_kind_from_string(sidecar.at("forward").get<std::string>());

  const SceneMeta* scene = nullptr;
  for (const auto& s : ds.scenes)
    if (s.id == scene_id) scene = &s;
  if (scene == nullptr) throw DataError("infer: no scene with id " + std::to_string(scene_id));

  HeatmapStack heat = ds.scene_heatmaps(*scene);
  Rng rs = Rng(cfg.seed).child(seed_tag::kChain).child(static_cast<std::uint64_t>(scene->id));

  ChainMode mode = chain_mode_from_string(cfg.inference.mode);
  if (forward == ForwardKind::Gaussian && mode == ChainMode::Strided) mode = ChainMode::Naive;
  std::vector<int> steps = mode == ChainMode::Full
                               ? substep_sequence(sched.steps, sched.steps)
                               : substep_sequence(sched.steps, cfg.inference.steps);

  DecoderContext ctx =
      make_decoder_context(model, encode_appearance(model, ds.scene_observation(*scene)));
  std::vector<KeypointSample> init = sample_coords(heat, cfg.inference.samples, rs.child(1));

  CauchyMixture mix;
  const CauchyMixture* mix_ptr = nullptr;
  if (mode == ChainMode::Strided) {
    EmOptions em;
    em.max_iters = cfg.inference.em_iters;
    em.tol = cfg.inference.em_tol;
    mix = em_fit(sample_coords(heat, cfg.moc.samples, rs.child(2)), cfg.moc.kernels, em,
                 rs.child(3));
    mix_ptr = &mix;
  }
  ChainResult chain = reverse_chain(model, ctx, init, sched, steps, mix_ptr, mode, dump_steps);

  CorrespondenceSet corr;
  corr.pts3d = ds.object.keypoints();
  for (Eigen::Index k = 0; k < chain.d0.rows(); ++k)
    corr.pts2d.push_back({chain.d0(k, 0), chain.d0(k, 1)});
  auto [pose, mask] = ransac_pnp(corr, ds.camera, cfg.pnp.ransac_iters, cfg.pnp.inlier_px,
                                 rs.child(4), cfg.pnp.subset);

  InferOutput out;
  out.pose = pose;
  out.d0 = chain.d0;
  if (dump_steps) {
    json chains = json::array();
    for (const auto& states : chain.states) {
      json per_chain = json::array();
      for (const auto& st : states) {
        json coords = json::array();
        for (Eigen::Index k = 0; k < st.rows(); ++k) coords.push_back({st(k, 0), st(k, 1)});
        per_chain.push_back(coords);
      }
      chains.push_back(per_chain);
    }
    json mean_d0 = json::array();
    for (Eigen::Index k = 0; k < chain.d0.rows(); ++k)
      mean_d0.push_back({chain.d0(k, 0), chain.d0(k, 1)});
    out.dump = {{"scene", scene->id},
                {"steps", steps},
                {"chains", chains},
                {"mean_d0", mean_d0},
                {"pose", to_json(pose)}};
  }
  return out;
}

// -----------------------------------------------------------------------------
// report aggregation

inline json cmd_report(const std::vector<std::filesystem::path>& report_files) {
  json combined = json::array();
  for (const auto& path : report_files) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot read report: " + path.string());
    json r;
    try {
      is >> r;
    } catch (const json::exception& e) {
      throw DataError("report parse error in " + path.string() + ": " + e.what());
    }
    combined.push_back({{"file", path.string()},
                        {"variant", r.value("variant", std::string("?"))},
                        {"scenes", r.value("scenes", 0)},
                        {"accuracy", r.value("accuracy", 0.0)},
                        {"auc_add", r.value("auc_add", 0.0)},
                        {"auc_add_s", r.value("auc_add_s", 0.0)}});
  }
  return combined;
}

}  // namespace mocpose
