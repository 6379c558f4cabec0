#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "denseclip/harness.hpp"
#include "json.hpp"

using namespace denseclip;
using nlohmann::json;
using nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

void write_json(const fs::path& path, const ordered_json& j) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

ordered_json nan_as_null(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

int cmd_synth(const fs::path& spec_path, const fs::path& out, Index n, std::uint64_t seed) {
  TaskSpec spec = spec_path.empty() ? TaskSpec{} : task_spec_from_json(read_json(spec_path));
  if (const char* env = std::getenv("DENSECLIP_SEED"); env && *env) spec.seed = std::stoull(env);
  spec.validate();
  Dataset data{spec, generate(spec, n, seed)};
  save_dataset(out, data);
  std::cout << "wrote " << n << " samples to " << out << '\n';
  return 0;
}

int cmd_train(const fs::path& data_dir, const fs::path& config_path, const fs::path& ckpt, const fs::path& report_path) {
  const Dataset data = load_dataset(data_dir);
  const json cfg = config_path.empty() ? json::object() : read_json(config_path);
  PipelineConfig pc = cfg.contains("pipeline") ? pipeline_config_from_json(cfg.at("pipeline")) : PipelineConfig{};
  OptimConfig oc = cfg.contains("optim") ? optim_config_from_json(cfg.at("optim")) : OptimConfig{};
  apply_seed_override(pc, oc);
  pc.classes = data.spec.classes;
  pc.image.image_height = data.spec.height;
  pc.image.image_width = data.spec.width;
  const auto [train_set, eval_set] =
      split(data.samples, cfg.value("train_fraction", 0.5), cfg.value("split_seed", std::uint64_t{0}));

  DensePredPipeline pipe(pc, ClassTokenTable::synthetic(pc.classes, pc.context_length));
  const RunReport report = train(pipe, train_set, eval_set, oc);
  if (!ckpt.empty()) pipe.save(ckpt);
  if (!report_path.empty()) write_json(report_path, to_json(report));
  std::cout << "final loss " << report.final_loss() << ", eval mIoU " << report.eval_miou << ", "
            << report.wall_seconds << " s\n";
  return 0;
}

int cmd_eval(const fs::path& data_dir, const fs::path& ckpt, const fs::path& report_path) {
  const Dataset data = load_dataset(data_dir);
  DensePredPipeline pipe = DensePredPipeline::load(ckpt);
  const PipelineConfig& pc = pipe.config();
  if (pc.task != TaskMode::Segmentation) throw ConfigError("eval needs a segmentation checkpoint");
  if (pc.language && pc.prompt != PromptMode::PreModel && !pipe.has_text_cache()) pipe.cache_text_embeddings();
  pipe.reset_counters();
  const MiouResult r = evaluate_miou(pipe, data.samples);
  ordered_json j;
  j["samples"] = data.samples.size();
  j["miou"] = r.mean;
  ordered_json per_class = ordered_json::array();
  for (double v : r.per_class) per_class.push_back(nan_as_null(v));
  j["per_class"] = per_class;
  j["text_forwards_infer"] = pipe.text_forward_count();
  if (!report_path.empty()) write_json(report_path, j);
  std::cout << "mIoU " << r.mean << " over " << data.samples.size() << " samples\n";
  return 0;
}

int cmd_gradcheck(double tol, double pipeline_tol, bool verbose) {
  const GradSuiteResult r = run_gradient_suite(tol, pipeline_tol);
  int failed = 0;
  for (const auto& e : r.entries) {
    if (!e.passed) ++failed;
    if (verbose || !e.passed) {
      std::cout << (e.passed ? "ok   " : "FAIL ") << e.name << "  rel " << e.max_rel_error << " (tol " << e.tolerance
                << ")\n";
    }
  }
  std::cout << r.entries.size() << " checks, " << failed << " failed, " << r.seconds << " s\n";
  return r.passed() ? 0 : 1;
}

int cmd_ablate(const fs::path& data_dir, const fs::path& suite_path, const fs::path& out) {
  const Dataset data = load_dataset(data_dir);
  const AblationSuite suite = ablation_suite_from_json(suite_path.empty() ? json::object() : read_json(suite_path));
  const auto rows = run_ablation(suite, data);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_ablation_csv(rows, out);
  for (const auto& r : rows) {
    std::cout << r.name << ": " << (r.ok ? "mIoU " + std::to_string(r.miou) : "failed (" + r.error + ")") << '\n';
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Language-guided dense prediction on synthetic tasks"};
  app.require_subcommand(1);

  fs::path spec_path, out_dir, data_dir, config_path, ckpt, report, suite_path, csv_out;
  Index n = 64;
  std::uint64_t seed = 0;
  double tol = 1e-5, pipeline_tol = 1e-4;
  bool verbose = false;

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset");
  synth->add_option("--spec", spec_path, "Task spec JSON (defaults when omitted)");
  synth->add_option("--out", out_dir, "Output directory")->required();
  synth->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
  synth->add_option("--seed", seed, "Sample stream seed");

  auto* train_cmd = app.add_subcommand("train", "Train a pipeline");
  train_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  train_cmd->add_option("--config", config_path, "Run JSON with pipeline, optim, train_fraction, split_seed");
  train_cmd->add_option("--out", ckpt, "Checkpoint directory");
  train_cmd->add_option("--report", report, "Report JSON path");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--data", data_dir, "Dataset directory")->required();
  eval_cmd->add_option("--ckpt", ckpt, "Checkpoint directory")->required();
  eval_cmd->add_option("--report", report, "Report JSON path");

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  grad->add_option("--tol", tol, "Per-op relative tolerance");
  grad->add_option("--pipeline-tol", pipeline_tol, "End-to-end relative tolerance");
  grad->add_flag("-v,--verbose", verbose, "Print every check");

  auto* ablate = app.add_subcommand("ablate", "Run an ablation suite");
  ablate->add_option("--data", data_dir, "Dataset directory")->required();
  ablate->add_option("--suite", suite_path, "Suite JSON (standard rows when omitted)");
  ablate->add_option("--out", csv_out, "CSV output path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*synth) return cmd_synth(spec_path, out_dir, n, seed);
    if (*train_cmd) return cmd_train(data_dir, config_path, ckpt, report);
    if (*eval_cmd) return cmd_eval(data_dir, ckpt, report);
    if (*grad) return cmd_gradcheck(tol, pipeline_tol, verbose);
    if (*ablate) return cmd_ablate(data_dir, suite_path, csv_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
