// Command-line front end: synthetic dataset generation, denoiser training,
// evaluation, single-scene inference, and report aggregation.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "mocpose/mocpose.hpp"

namespace {

mocpose::PipelineConfig load_config(const std::string& config_path,
                                    const std::vector<std::string>& overrides) {
  nlohmann::json j = nlohmann::json::object();
  if (!config_path.empty()) {
    std::ifstream is(config_path);
    if (!is) throw mocpose::ConfigError("cannot read config file: " + config_path);
    try {
      is >> j;
    } catch (const nlohmann::json::exception& e) {
      throw mocpose::ConfigError(std::string("config parse error: ") + e.what());
    }
  }
  for (const auto& s : overrides) mocpose::apply_override(j, s);
  return mocpose::config_from_json(j);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mocpose: heatmap-conditioned keypoint denoising and 6D pose recovery"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "pipeline config JSON (defaults apply when omitted)");
  app.add_option("--set", overrides, "override config entries, e.g. --set training.epochs=40");

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  std::string gen_out;
  gen->add_option("--out", gen_out, "output directory")->required();

  auto* train = app.add_subcommand("train", "train the denoiser");
  std::string train_data, train_out, train_resume, train_forward;
  bool train_no_appearance = false;
  train->add_option("--data", train_data, "dataset directory")->required();
  train->add_option("--out", train_out, "output checkpoint path")->required();
  train->add_option("--resume", train_resume, "resume from an existing checkpoint");
  train->add_option("--forward", train_forward, "forward process: moc or gaussian");
  train->add_flag("--no-appearance", train_no_appearance, "train with the appearance encoding zeroed");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the test split");
  std::string eval_ck, eval_data, eval_out, eval_mode, eval_baseline;
  bool eval_oracle = false, eval_no_appearance = false;
  eval->add_option("--checkpoint", eval_ck, "checkpoint path")->required();
  eval->add_option("--data", eval_data, "dataset directory")->required();
  eval->add_option("--out", eval_out, "report path prefix (.json/.csv)")->required();
  eval->add_option("--mode", eval_mode, "reverse chain mode: full, strided, naive");
  eval->add_option("--baseline", eval_baseline, "baseline variant: initializer-only");
  eval->add_flag("--oracle-denoiser", eval_oracle, "bypass the model with ground-truth keypoints");
  eval->add_flag("--no-appearance", eval_no_appearance, "zero the appearance encoding at eval time");

  auto* infer = app.add_subcommand("infer", "run inference on one scene");
  std::string infer_ck, infer_data, infer_pose_out, infer_dump;
  int infer_index = 0;
  infer->add_option("--checkpoint", infer_ck, "checkpoint path")->required();
  infer->add_option("--data", infer_data, "dataset directory")->required();
  infer->add_option("--index", infer_index, "scene id")->required();
  infer->add_option("--out", infer_pose_out, "pose JSON output path")->required();
  infer->add_option("--dump-steps", infer_dump, "write the per-step keypoint states to this JSON");

  auto* report = app.add_subcommand("report", "aggregate eval reports");
  std::vector<std::string> report_inputs;
  std::string report_out;
  report->add_option("--inputs", report_inputs, "eval report JSON files")->required();
  report->add_option("--out", report_out, "combined summary output (JSON)");

  CLI11_PARSE(app, argc, argv);

  try {
    mocpose::PipelineConfig cfg = load_config(config_path, overrides);

    if (gen->parsed()) {
      mocpose::cmd_gen_data(cfg, gen_out);
      std::cout << "wrote dataset to " << gen_out << "\n";
    } else if (train->parsed()) {
      if (!train_forward.empty()) cfg.training.forward = train_forward;
      if (train_no_appearance) cfg.training.appearance = false;
      std::optional<std::filesystem::path> resume;
      if (!train_resume.empty()) resume = train_resume;
      auto out = mocpose::cmd_train(cfg, train_data, train_out, resume);
      std::cout << "checkpoint: " << out.checkpoint.string() << "\n";
      if (!out.report.epoch_loss.empty())
        std::cout << "final epoch loss: " << out.report.epoch_loss.back() << "\n";
    } else if (eval->parsed()) {
      mocpose::EvalFlags flags;
      if (!eval_mode.empty()) flags.mode = eval_mode;
      if (!eval_baseline.empty()) {
        if (eval_baseline != "initializer-only")
          throw mocpose::ConfigError("unknown baseline: " + eval_baseline);
        flags.baseline_initializer_only = true;
      }
      flags.oracle_denoiser = eval_oracle;
      flags.force_no_appearance = eval_no_appearance;
      auto out = mocpose::cmd_eval(eval_ck, eval_data, flags, eval_out);
      std::cout << "variant=" << out.summary.variant << " scenes=" << out.summary.scenes
                << " accuracy=" << out.summary.accuracy << " auc_add=" << out.summary.auc_add
                << " auc_add_s=" << out.summary.auc_add_s << "\n";
    } else if (infer->parsed()) {
      auto out = mocpose::cmd_infer(infer_ck, infer_data, infer_index, !infer_dump.empty());
      mocpose::write_text_atomic(infer_pose_out, mocpose::to_json(out.pose).dump(2) + "\n");
      if (!infer_dump.empty())
        mocpose::write_text_atomic(infer_dump, out.dump.dump(2) + "\n");
      std::cout << "pose written to " << infer_pose_out << "\n";
    } else if (report->parsed()) {
      std::vector<std::filesystem::path> files(report_inputs.begin(), report_inputs.end());
      nlohmann::json combined = mocpose::cmd_report(files);
      std::string text = combined.dump(2) + "\n";
      if (!report_out.empty()) mocpose::write_text_atomic(report_out, text);
      std::cout << text;
    }
  } catch (const mocpose::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const mocpose::DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  }
  return 0;
}
