#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "denseclip/datagen.hpp"
#include "denseclip/pipeline.hpp"
#include "json.hpp"

namespace denseclip {

struct LrMultipliers {
  double image_encoder = 0.1;
  double text_encoder = 0.0;
  double other = 1.0;
};

struct OptimConfig {
  double lr = 1.5e-2;
  double weight_decay = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  LrMultipliers multipliers;
  std::optional<double> clip_norm;
  Index steps = 150;
  Index batch_size = 64;  // only used when the train split exceeds 64 samples
  std::uint64_t seed = 0;

  double multiplier(ParamGroup group) const;
  void validate() const;
};

nlohmann::ordered_json to_json(const OptimConfig& cfg);
OptimConfig optim_config_from_json(const nlohmann::json& j, const OptimConfig& defaults = {});

struct AdamState {
  struct Moments {
    Matrix m, v;
  };
  std::map<std::string, Moments> moments;  // keyed by parameter name
  std::int64_t step = 0;
};

// One decoupled-decay AdamW update. Parameters that do not require grad or
// whose group multiplier is 0 are skipped.
void adamw_step(const ParamList& params, AdamState& state, const OptimConfig& cfg);

// Scales every gradient by max_norm / norm when the global norm exceeds
// max_norm. Returns the scale applied.
double clip_gradients(const ParamList& params, double max_norm);
double global_grad_norm(const ParamList& params);

struct MiouResult {
  std::vector<double> per_class;  // NaN for classes absent from both
  double mean = 0.0;
};

MiouResult miou_from_labels(const std::vector<std::vector<int>>& predictions,
                            const std::vector<std::vector<int>>& targets, Index classes);
MiouResult evaluate_miou(const DensePredPipeline& pipe, const std::vector<SyntheticSample>& samples);

struct RunReport {
  std::vector<double> losses;
  double train_miou = 0.0;
  double eval_miou = 0.0;
  std::vector<double> eval_per_class;
  std::int64_t text_forwards_train = 0;
  std::int64_t text_forwards_infer = 0;
  Index trainable_params = 0;
  double wall_seconds = 0.0;  // kept out of the JSON
  nlohmann::ordered_json pipeline_config;
  nlohmann::ordered_json optim_config;
  std::uint64_t seed = 0;

  double final_loss() const { return losses.empty() ? 0.0 : losses.back(); }
};

nlohmann::ordered_json to_json(const RunReport& report);

PipelineTarget make_target(const DensePredPipeline& pipe, const SyntheticSample& sample);

// Constant-lr training on `train`, then text caching (where the mode allows)
// and mIoU on both splits. Throws DivergenceError on a non-finite loss.
RunReport train(DensePredPipeline& pipe, const std::vector<SyntheticSample>& train,
                const std::vector<SyntheticSample>& eval, const OptimConfig& cfg);

struct AblationRun {
  std::string name;
  PipelineConfig pipeline;
  OptimConfig optim;
};

struct AblationSuite {
  std::vector<AblationRun> runs;
  double train_fraction = 0.5;
  std::uint64_t split_seed = 0;
};

// Suite JSON: {"train_fraction", "split_seed", "pipeline": {...}, "optim": {...},
// "runs": [{"name", "pipeline": {...overrides}, "optim": {...overrides}}]}.
// Without "runs" the five standard rows are used.
AblationSuite ablation_suite_from_json(const nlohmann::json& j);

// no_language, template, coop, pre, post on a shared base config.
std::vector<AblationRun> standard_ablation_runs(const PipelineConfig& base, const OptimConfig& optim);

struct AblationRow {
  std::string name;
  bool ok = true;
  std::string error;
  double miou = 0.0;
  double final_loss = 0.0;
  Index params = 0;
  std::int64_t text_fwd_train = 0;
  std::int64_t text_fwd_infer = 0;
};

std::vector<AblationRow> run_ablation(const AblationSuite& suite, const Dataset& data);
// Columns: config_name, miou, final_loss, params, text_fwd_train, text_fwd_infer.
void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path);

// Applies DENSECLIP_SEED, when set, to both configs. Returns true if applied.
bool apply_seed_override(PipelineConfig& pipeline, OptimConfig& optim);

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradSuiteResult {
  std::vector<GradCheckEntry> entries;
  double seconds = 0.0;

  bool passed() const;
};

// Finite-difference checks over every differentiable op and block at
// op_tol, plus a 2-class micro pipeline at pipeline_tol.
GradSuiteResult run_gradient_suite(double op_tol = 1e-5, double pipeline_tol = 1e-4);

}  // namespace denseclip
