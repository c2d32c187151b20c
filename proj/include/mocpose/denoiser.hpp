#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mocpose/autodiff_nn.hpp"
#include "mocpose/cauchy_mixture.hpp"
#include "mocpose/common.hpp"
#include "mocpose/diffusion.hpp"
#include "mocpose/observation.hpp"
#include "mocpose/rng.hpp"

namespace mocpose {

enum class ForwardKind { Moc, Gaussian };

inline ForwardKind forward_kind_from_string(const std::string& s) {
  if (s == "moc") return ForwardKind::Moc;
  if (s == "gaussian") return ForwardKind::Gaussian;
  throw ConfigError("unknown forward kind: " + s);
}

inline std::string to_string(ForwardKind k) {
  return k == ForwardKind::Moc ? "moc" : "gaussian";
}

struct DenoiserConfig {
  int n_keypoints = 16;
  int image_width = 128;
  int image_height = 128;
  int obs_width = 64;
  int obs_height = 64;
  int patch = 8;
  int d_model = 64;   // 128 mirrors the reference setup
  int heads = 4;
  int ffn_dim = 128;
  bool use_appearance = true;
  std::uint64_t init_seed = 1;

  static constexpr int kDepth = 3;  // encoder and decoder are both 3 layers

  int n_patches() const { return (obs_height / patch) * (obs_width / patch); }

  void validate() const {
    if (n_keypoints < 1) throw ConfigError("denoiser: n_keypoints must be >= 1");
    if (obs_width % patch != 0 || obs_height % patch != 0)
      throw ConfigError("denoiser: observation dims must be divisible by the patch size");
    if (d_model % heads != 0) throw ConfigError("denoiser: d_model must be divisible by heads");
    if (d_model % 2 != 0) throw ConfigError("denoiser: d_model must be even");
    if (image_width < 2 || image_height < 2) throw ConfigError("denoiser: bad image size");
  }
};

// Transformer encoder-decoder operating on keypoint coordinates, conditioned
// on the appearance encoding and a sinusoidal step embedding prepended as one
// extra sequence position. Coordinates are mapped to [-1, 1] inside and back
// to pixels at the boundary.
struct DenoiserModel {
  DenoiserConfig cfg;
  ad::ParamStore params;
  ad::Linear patch_embed;
  ad::Mat obs_pos;   // fixed positional encodings for the patch sequence
  ad::Mat seq_pos;   // fixed positional encodings for step + keypoint tokens
  std::vector<ad::TransformerLayer> encoder;
  ad::LayerNorm enc_final;
  ad::Linear coord_embed;
  std::vector<ad::TransformerLayer> decoder;
  ad::LayerNorm dec_final;
  ad::Linear out_head;

  static DenoiserModel create(const DenoiserConfig& cfg) {
    cfg.validate();
    DenoiserModel m;
    m.cfg = cfg;
    Rng rng = Rng(cfg.init_seed).child(seed_tag::kInit);
    m.patch_embed = ad::Linear::create(m.params, "patch", cfg.patch * cfg.patch, cfg.d_model, rng);
    for (int l = 0; l < DenoiserConfig::kDepth; ++l)
      m.encoder.push_back(ad::TransformerLayer::create(m.params, "enc.L" + std::to_string(l),
                                                       cfg.d_model, cfg.heads, cfg.ffn_dim,
                                                       /*with_cross=*/false, rng));
    m.enc_final = ad::LayerNorm::create(m.params, "enc.final", cfg.d_model);
    m.coord_embed = ad::Linear::create(m.params, "coord", 2, cfg.d_model, rng);
    for (int l = 0; l < DenoiserConfig::kDepth; ++l)
      m.decoder.push_back(ad::TransformerLayer::create(m.params, "dec.L" + std::to_string(l),
                                                       cfg.d_model, cfg.heads, cfg.ffn_dim,
                                                       /*with_cross=*/true, rng));
    m.dec_final = ad::LayerNorm::create(m.params, "dec.final", cfg.d_model);
    m.out_head = ad::Linear::create(m.params, "head", cfg.d_model, 2, rng);
    m.obs_pos = ad::positional_encoding(cfg.n_patches(), cfg.d_model);
    m.seq_pos = ad::positional_encoding(cfg.n_keypoints + 1, cfg.d_model);
    return m;
  }

  Eigen::MatrixXd normalize_coords(const KeypointSample& px) const {
    Eigen::MatrixXd out(px.rows(), 2);
    out.col(0) = px.col(0) / (cfg.image_width / 2.0) - Eigen::VectorXd::Ones(px.rows());
    out.col(1) = px.col(1) / (cfg.image_height / 2.0) - Eigen::VectorXd::Ones(px.rows());
    return out;
  }

  KeypointSample denormalize_coords(const Eigen::MatrixXd& n) const {
    KeypointSample out(n.rows(), 2);
    out.col(0) = (n.col(0) + Eigen::VectorXd::Ones(n.rows())) * (cfg.image_width / 2.0);
    out.col(1) = (n.col(1) + Eigen::VectorXd::Ones(n.rows())) * (cfg.image_height / 2.0);
    return out;
  }
};

namespace detail {

inline Eigen::MatrixXd patch_matrix(const ObservationImage& obs, int patch) {
  const int pr = obs.rows() / patch, pc = obs.cols() / patch;
  Eigen::MatrixXd m(pr * pc, patch * patch);
  for (int r = 0; r < pr; ++r)
    for (int c = 0; c < pc; ++c)
      for (int y = 0; y < patch; ++y)
        for (int x = 0; x < patch; ++x)
          m(r * pc + c, y * patch + x) = obs.grid(r * patch + y, c * patch + x);
  return m;
}

}  // namespace detail

// Appearance encoding: per-patch affine embedding plus positional encodings,
// then the encoder stack. One call per sample; the result conditions every
// reverse step.
inline ad::Tensor encode_appearance(const DenoiserModel& model, const ObservationImage& obs) {
  if (obs.rows() != model.cfg.obs_height || obs.cols() != model.cfg.obs_width)
    throw std::invalid_argument("encode_appearance: observation dims mismatch");
  if (!model.cfg.use_appearance)
    return ad::Tensor::constant(ad::Mat::Zero(model.cfg.n_patches(), model.cfg.d_model));
  ad::Tensor x = model.patch_embed.forward(
      ad::Tensor::constant(detail::patch_matrix(obs, model.cfg.patch)));
  x = ad::add(x, ad::Tensor::constant(model.obs_pos));
  for (const auto& layer : model.encoder) x = layer.forward(x);
  return model.enc_final.forward(x);
}

// Per-layer cross-attention keys/values; computed once per appearance
// encoding and shared by every reverse step in the same graph.
struct DecoderContext {
  ad::Tensor f_enc;
  std::vector<std::pair<ad::Tensor, ad::Tensor>> kv;
};

inline DecoderContext make_decoder_context(const DenoiserModel& model, ad::Tensor f_enc) {
  DecoderContext ctx;
  ctx.f_enc = f_enc;
  ctx.kv.reserve(model.decoder.size());
  for (const auto& layer : model.decoder) ctx.kv.push_back(layer.cross_attn.context_kv(f_enc));
  return ctx;
}

// One reverse step in normalized coordinate space (graph-building form).
inline ad::Tensor reverse_step_tensor(const DenoiserModel& model, const DecoderContext& ctx,
                                      const KeypointSample& d_k, int k) {
  if (d_k.rows() != model.cfg.n_keypoints)
    throw std::invalid_argument("reverse_step: keypoint count mismatch");
  if (k < 1) throw std::invalid_argument("reverse_step: step must be >= 1");
  ad::Tensor e = model.coord_embed.forward(ad::Tensor::constant(model.normalize_coords(d_k)));
  ad::Tensor step = ad::Tensor::constant(ad::sinusoidal_embedding(k, model.cfg.d_model));
  ad::Tensor seq = ad::concat_rows(step, e);
  seq = ad::add(seq, ad::Tensor::constant(model.seq_pos));
  for (std::size_t l = 0; l < model.decoder.size(); ++l)
    seq = model.decoder[l].forward(seq, &ctx.kv[l].first, &ctx.kv[l].second);
  seq = model.dec_final.forward(seq);
  return model.out_head.forward(ad::slice_rows(seq, 1, model.cfg.n_keypoints));
}

// Boundary form: pixels in, pixels out.
inline KeypointSample reverse_step(const DenoiserModel& model, const DecoderContext& ctx,
                                   const KeypointSample& d_k, int k) {
  return model.denormalize_coords(reverse_step_tensor(model, ctx, d_k, k).value());
}

// Exact stepwise training objective: sum over trajectories and steps of the
// squared pixel-space error against the next supervision sample, with the
// step-0 target being d_0 itself.
inline ad::Tensor l_diff(const DenoiserModel& model, const DecoderContext& ctx,
                         const std::vector<std::vector<ForwardDraw>>& trajectories,
                         const KeypointSample& d0) {
  ad::Mat scales(model.cfg.n_keypoints, 2);
  scales.col(0).setConstant(model.cfg.image_width / 2.0);
  scales.col(1).setConstant(model.cfg.image_height / 2.0);
  ad::Tensor scales_t = ad::Tensor::constant(scales);
  ad::Tensor offsets_t = ad::Tensor::constant(scales);  // center equals half-extent

  ad::Tensor total;
  for (const auto& traj : trajectories) {
    for (std::size_t s = 0; s < traj.size(); ++s) {
      const ForwardDraw& draw = traj[s];
      const KeypointSample& target = s == 0 ? d0 : traj[s - 1].sample;
      if (s > 0 && traj[s - 1].step != draw.step - 1)
        throw std::invalid_argument("l_diff: trajectory steps must be consecutive");
      ad::Tensor pred_n = reverse_step_tensor(model, ctx, draw.sample, draw.step);
      ad::Tensor pred_px = ad::add(ad::hadamard(pred_n, scales_t), offsets_t);
      ad::Tensor term = ad::mse_loss(pred_px, ad::Tensor::constant(target));
      total = total.defined() ? ad::add(total, term) : term;
    }
  }
  if (!total.defined()) throw std::invalid_argument("l_diff: no trajectories");
  return total;
}

// -----------------------------------------------------------------------------
// reverse chains

enum class ChainMode { Full, Strided, Naive };

inline ChainMode chain_mode_from_string(const std::string& s) {
  if (s == "full") return ChainMode::Full;
  if (s == "strided") return ChainMode::Strided;
  if (s == "naive") return ChainMode::Naive;
  throw ConfigError("unknown chain mode: " + s);
}

inline std::string to_string(ChainMode m) {
  switch (m) {
    case ChainMode::Full: return "full";
    case ChainMode::Strided: return "strided";
    case ChainMode::Naive: return "naive";
  }
  return "?";
}

struct ChainResult {
  KeypointSample d0;  // mean of the per-chain outputs
  std::vector<std::vector<KeypointSample>> states;  // per chain, per visited step
};

// Runs the reverse process along `steps` (a substep_sequence) for each initial
// sample and averages the final predictions. Strided jumps reconstruct
// (d_0, eps) from consecutive model evaluations and re-evaluate the forward
// map at the next strided step; the kernel indicator is fixed per chain as the
// most responsible kernel of its initial sample.
inline ChainResult reverse_chain(const DenoiserModel& model, const DecoderContext& ctx,
                                 const std::vector<KeypointSample>& init_samples,
                                 const DiffusionSchedule& sched, const std::vector<int>& steps,
                                 const CauchyMixture* mix, ChainMode mode,
                                 bool collect_states = false) {
  if (init_samples.empty()) throw std::invalid_argument("reverse_chain: no initial samples");
  if (steps.size() < 2 || steps.front() != sched.steps || steps.back() != 0)
    throw std::invalid_argument("reverse_chain: steps must run from K to 0");
  ChainResult result;
  KeypointSample mean = KeypointSample::Zero(init_samples.front().rows(), 2);

  for (const auto& init : init_samples) {
    KeypointSample x = init;
    KernelIndicator ind;
    if (mode == ChainMode::Strided) {
      if (mix == nullptr)
        throw std::invalid_argument("reverse_chain: strided mode requires a fitted mixture");
      ind = responsibility_argmax(*mix, x);
    }
    std::vector<KeypointSample> states;
    if (collect_states) states.push_back(x);

    for (std::size_t j = 0; j + 1 < steps.size(); ++j) {
      const int k = steps[j];
      const int k_next = steps[j + 1];
      KeypointSample y = reverse_step(model, ctx, x, k);
      if (k_next == k - 1 || mode == ChainMode::Naive) {
        x = y;
      } else {
        auto [d0_est, eps_est] = solve_x0_eps(x, y, k, ind, *mix, sched);
        x = k_next == 0 ? d0_est : forward_moc_eval(d0_est, k_next, *mix, eps_est, ind, sched);
      }
      if (collect_states) states.push_back(x);
    }
    mean += x;
    if (collect_states) result.states.push_back(std::move(states));
  }
  result.d0 = mean / static_cast<double>(init_samples.size());
  return result;
}

// -----------------------------------------------------------------------------
// training

struct TrainingConfig {
  int epochs = 30;
  double learning_rate = 4e-5;
  int trajectories = 5;     // sample sets per scene
  int pairs_per_scene = 4;  // (trajectory, step) pairs per optimizer step
  int moc_kernels = 9;
  int moc_samples = 512;
  EmOptions em;
  ForwardKind forward = ForwardKind::Moc;
  std::uint64_t seed = 1;

  void validate() const {
    if (epochs < 1 || trajectories < 1 || pairs_per_scene < 1)
      throw ConfigError("training: counts must be >= 1");
    if (!(learning_rate > 0)) throw ConfigError("training: learning rate must be positive");
    if (moc_kernels < 1 || moc_samples < moc_kernels)
      throw ConfigError("training: mixture sizes invalid");
  }
};

struct TrainScene {
  KeypointSample d0;      // ground-truth keypoint pixels
  ObservationImage obs;
  HeatmapStack heatmaps;  // normalized
};

struct TrainReport {
  std::vector<double> epoch_loss;  // mean per-pair loss in normalized coordinates
};

namespace detail {

// closed-form forward sample for a cached noise draw
inline KeypointSample forward_at(const TrainScene& scene, const CauchyMixture* mix,
                                 const KeypointSample& eps, const KernelIndicator& ind,
                                 ForwardKind kind, int k, const DiffusionSchedule& sched,
                                 const DenoiserModel& model) {
  if (k == 0) return scene.d0;
  if (kind == ForwardKind::Moc) return forward_moc_eval(scene.d0, k, *mix, eps, ind, sched);
  // gaussian forward runs in normalized coordinates: unit noise there is the
  // standard-diffusion regime
  Eigen::MatrixXd d0n = model.normalize_coords(scene.d0);
  Eigen::MatrixXd dkn = std::sqrt(sched.alpha_bar_at(k)) * d0n +
                        std::sqrt(1.0 - sched.alpha_bar_at(k)) * eps;
  return model.denormalize_coords(dkn);
}

}  // namespace detail

struct Trainer {
  DenoiserModel& model;
  const DiffusionSchedule& sched;
  TrainingConfig cfg;
  ad::AdamState adam;
  int epoch_done = 0;
  std::vector<double> loss_trace;

  Trainer(DenoiserModel& model_, const DiffusionSchedule& sched_, const TrainingConfig& cfg_)
      : model(model_), sched(sched_), cfg(cfg_) {
    cfg.validate();
    ad::AdamConfig ac;
    ac.lr = cfg.learning_rate;
    adam = ad::AdamState::init(model.params, ac);
  }

  // Fit per-scene mixtures once; noise draws are refreshed every epoch.
  std::vector<CauchyMixture> fit_mixtures(const std::vector<TrainScene>& scenes) const {
    std::vector<CauchyMixture> out(scenes.size());
    if (cfg.forward != ForwardKind::Moc) return out;
    Rng root(cfg.seed);
    parallel_for(scenes.size(), [&](std::size_t s) {
      Rng rs = root.child(seed_tag::kMocFit).child(s);
      auto samples = sample_coords(scenes[s].heatmaps, cfg.moc_samples, rs.child(1));
      out[s] = em_fit(samples, cfg.moc_kernels, cfg.em, rs.child(2));
    });
    return out;
  }

  // One epoch over all scenes in a seeded shuffle; one Adam step per scene.
  double run_epoch(const std::vector<TrainScene>& scenes,
                   const std::vector<CauchyMixture>& mixtures, int epoch) {
    Rng re = Rng(cfg.seed).child(seed_tag::kEpoch).child(static_cast<std::uint64_t>(epoch));
    std::vector<std::size_t> order(scenes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    {
      Rng rs = re.child(0x5348ull);
      for (std::size_t i = order.size(); i > 1; --i)
        std::swap(order[i - 1], order[rs.uniform_index(i)]);
    }

    double total = 0.0;
    long count = 0;
    for (std::size_t s : order) {
      const TrainScene& scene = scenes[s];
      Rng r_se = re.child(s);

      // per-trajectory noise, shared across the steps of that trajectory
      std::vector<KeypointSample> eps(static_cast<std::size_t>(cfg.trajectories));
      std::vector<KernelIndicator> ind(static_cast<std::size_t>(cfg.trajectories));
      for (int i = 0; i < cfg.trajectories; ++i) {
        Rng rt = r_se.child(seed_tag::kTrajectory).child(static_cast<std::uint64_t>(i));
        if (cfg.forward == ForwardKind::Moc) {
          auto [e, id] = draw_moc_noise(mixtures[s], rt);
          eps[static_cast<std::size_t>(i)] = std::move(e);
          ind[static_cast<std::size_t>(i)] = std::move(id);
        } else {
          KeypointSample e(model.cfg.n_keypoints, 2);
          for (int j = 0; j < model.cfg.n_keypoints; ++j) {
            Rng rj = rt.child(static_cast<std::uint64_t>(j));
            e(j, 0) = rj.normal();
            e(j, 1) = rj.normal();
          }
          eps[static_cast<std::size_t>(i)] = std::move(e);
        }
      }

      DecoderContext ctx = make_decoder_context(model, encode_appearance(model, scene.obs));
      ad::Tensor loss;
      Rng rp = r_se.child(0x5041ull);
      for (int p = 0; p < cfg.pairs_per_scene; ++p) {
        int i = static_cast<int>(rp.uniform_index(static_cast<std::uint64_t>(cfg.trajectories)));
        int k = 1 + static_cast<int>(rp.uniform_index(static_cast<std::uint64_t>(sched.steps)));
        const CauchyMixture* mix = cfg.forward == ForwardKind::Moc ? &mixtures[s] : nullptr;
        KeypointSample d_k = detail::forward_at(scene, mix, eps[static_cast<std::size_t>(i)],
                                                ind[static_cast<std::size_t>(i)], cfg.forward, k,
                                                sched, model);
        KeypointSample target = detail::forward_at(scene, mix, eps[static_cast<std::size_t>(i)],
                                                   ind[static_cast<std::size_t>(i)], cfg.forward,
                                                   k - 1, sched, model);
        ad::Tensor pred = reverse_step_tensor(model, ctx, d_k, k);
        ad::Tensor term =
            ad::mse_loss(pred, ad::Tensor::constant(model.normalize_coords(target)));
        loss = loss.defined() ? ad::add(loss, term) : term;
      }
      loss = ad::scale(loss, 1.0 / cfg.pairs_per_scene);

      double lv = loss.value()(0, 0);
      if (!std::isfinite(lv))
        throw NumericError("training diverged: non-finite loss at epoch " + std::to_string(epoch) +
                           ", scene " + std::to_string(s));
      model.params.zero_grad();
      ad::backward(loss);
      ad::adam_step(model.params, adam);
      total += lv;
      count += 1;
    }
    return total / static_cast<double>(count);
  }

  TrainReport train(const std::vector<TrainScene>& scenes) {
    if (scenes.empty()) throw std::invalid_argument("train: empty dataset");
    for (const auto& s : scenes) require_normalized(s.heatmaps);
    auto mixtures = fit_mixtures(scenes);
    TrainReport report;
    report.epoch_loss = loss_trace;
    for (int e = epoch_done; e < cfg.epochs; ++e) {
      double mean_loss = run_epoch(scenes, mixtures, e);
      report.epoch_loss.push_back(mean_loss);
      loss_trace.push_back(mean_loss);
      epoch_done = e + 1;
    }
    return report;
  }
};

// -----------------------------------------------------------------------------
// checkpoints

inline void save_checkpoint(const std::filesystem::path& path, const DenoiserModel& model,
                            const Trainer* trainer = nullptr) {
  std::vector<std::pair<std::string, ad::Mat>> entries;
  for (std::size_t i = 0; i < model.params.size(); ++i)
    entries.emplace_back("param." + model.params.names[i], model.params.tensors[i].value());
  if (trainer != nullptr) {
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      entries.emplace_back("adam.m." + model.params.names[i], trainer->adam.m[i]);
      entries.emplace_back("adam.v." + model.params.names[i], trainer->adam.v[i]);
    }
    ad::Mat meta(1, 3);
    meta(0, 0) = static_cast<double>(trainer->adam.step);
    meta(0, 1) = static_cast<double>(trainer->epoch_done);
    meta(0, 2) = static_cast<double>(trainer->loss_trace.size());
    entries.emplace_back("trainer.meta", meta);
    ad::Mat trace(1, std::max<std::size_t>(trainer->loss_trace.size(), 1));
    trace.setZero();
    for (std::size_t i = 0; i < trainer->loss_trace.size(); ++i)
      trace(0, static_cast<Eigen::Index>(i)) = trainer->loss_trace[i];
    entries.emplace_back("trainer.loss_trace", trace);
  }
  ad::save_named_tensors(path, entries);
}

// Loads parameters into a freshly built model; optimizer state is restored
// when present and a trainer is supplied.
inline void load_checkpoint(const std::filesystem::path& path, DenoiserModel& model,
                            Trainer* trainer = nullptr) {
  auto entries = ad::load_named_tensors(path);
  auto find = [&](const std::string& name) -> const ad::Mat* {
    for (const auto& [n, m] : entries)
      if (n == name) return &m;
    return nullptr;
  };
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const ad::Mat* m = find("param." + model.params.names[i]);
    if (m == nullptr) throw DataError("checkpoint missing parameter " + model.params.names[i]);
    if (m->rows() != model.params.tensors[i].rows() || m->cols() != model.params.tensors[i].cols())
      throw DataError("checkpoint shape mismatch for " + model.params.names[i]);
    model.params.tensors[i].mutable_value() = *m;
  }
  if (trainer != nullptr) {
    const ad::Mat* meta = find("trainer.meta");
    if (meta != nullptr) {
      trainer->adam.step = static_cast<long>((*meta)(0, 0));
      trainer->epoch_done = static_cast<int>((*meta)(0, 1));
      std::size_t trace_len = static_cast<std::size_t>((*meta)(0, 2));
      const ad::Mat* trace = find("trainer.loss_trace");
      trainer->loss_trace.clear();
      for (std::size_t i = 0; i < trace_len && trace != nullptr; ++i)
        trainer->loss_trace.push_back((*trace)(0, static_cast<Eigen::Index>(i)));
      for (std::size_t i = 0; i < model.params.size(); ++i) {
        const ad::Mat* m = find("adam.m." + model.params.names[i]);
        const ad::Mat* v = find("adam.v." + model.params.names[i]);
        if (m == nullptr || v == nullptr) throw DataError("checkpoint missing optimizer state");
        trainer->adam.m[i] = *m;
        trainer->adam.v[i] = *v;
      }
    }
  }
}

}  // namespace mocpose
