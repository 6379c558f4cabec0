#include "denseclip/harness.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <limits>
#include <numeric>

namespace denseclip {

using nlohmann::json;
using nlohmann::ordered_json;

// --- OptimConfig ------------------------------------------------------------

double OptimConfig::multiplier(ParamGroup group) const {
  switch (group) {
    case ParamGroup::ImageEncoder: return multipliers.image_encoder;
    case ParamGroup::TextEncoder: return multipliers.text_encoder;
    case ParamGroup::Other: return multipliers.other;
  }
  return multipliers.other;
}

void OptimConfig::validate() const {
  if (!(lr > 0)) throw ConfigError("learning rate must be positive");
  if (weight_decay < 0) throw ConfigError("weight decay must be non-negative");
  if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("betas must lie in [0, 1)");
  if (!(eps > 0)) throw ConfigError("eps must be positive");
  if (multipliers.image_encoder < 0 || multipliers.text_encoder < 0 || multipliers.other < 0) {
    throw ConfigError("lr multipliers must be non-negative");
  }
  if (clip_norm && !(*clip_norm > 0)) throw ConfigError("clip norm must be positive when set");
  if (steps < 0) throw ConfigError("step budget must be non-negative");
  if (batch_size < 1) throw ConfigError("batch size must be positive");
}

ordered_json to_json(const OptimConfig& c) {
  ordered_json j;
  j["lr"] = c.lr;
  j["weight_decay"] = c.weight_decay;
  j["beta1"] = c.beta1;
  j["beta2"] = c.beta2;
  j["eps"] = c.eps;
  j["lr_multipliers"] = {{"image_encoder", c.multipliers.image_encoder},
                         {"text_encoder", c.multipliers.text_encoder},
                         {"other", c.multipliers.other}};
  j["clip_norm"] = c.clip_norm ? ordered_json(*c.clip_norm) : ordered_json(nullptr);
  j["steps"] = c.steps;
  j["batch_size"] = c.batch_size;
  j["seed"] = c.seed;
  return j;
}

OptimConfig optim_config_from_json(const json& j, const OptimConfig& d) {
  OptimConfig c = d;
  c.lr = j.value("lr", d.lr);
  c.weight_decay = j.value("weight_decay", d.weight_decay);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.eps = j.value("eps", d.eps);
  if (j.contains("lr_multipliers")) {
    const auto& m = j.at("lr_multipliers");
    c.multipliers.image_encoder = m.value("image_encoder", d.multipliers.image_encoder);
    c.multipliers.text_encoder = m.value("text_encoder", d.multipliers.text_encoder);
    c.multipliers.other = m.value("other", d.multipliers.other);
  }
  if (j.contains("clip_norm")) {
    const auto& v = j.at("clip_norm");
    c.clip_norm = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
  }
  c.steps = j.value("steps", d.steps);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.seed = j.value("seed", d.seed);
  c.validate();
  return c;
}

// --- optimizer --------------------------------------------------------------

void adamw_step(const ParamList& params, AdamState& state, const OptimConfig& cfg) {
  for (const auto& p : params) {
    if (p.tensor.requires_grad() && cfg.multiplier(p.group) > 0 && !p.tensor.has_grad()) {
      throw ContractError("trainable parameter '" + p.name + "' has no gradient");
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bias1 = 1.0 - std::pow(cfg.beta1, t);
  const double bias2 = 1.0 - std::pow(cfg.beta2, t);
  for (const auto& p : params) {
    const double mult = cfg.multiplier(p.group);
    if (!p.tensor.requires_grad() || mult == 0.0) continue;
    Tensor param = p.tensor;
    const Matrix& g = param.grad();
    auto [it, fresh] = state.moments.try_emplace(p.name);
    auto& mom = it->second;
    if (fresh) {
      mom.m = Matrix::Zero(g.rows(), g.cols());
      mom.v = Matrix::Zero(g.rows(), g.cols());
    }
    mom.m = cfg.beta1 * mom.m + (1.0 - cfg.beta1) * g;
    mom.v = cfg.beta2 * mom.v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    const double lr = cfg.lr * mult;
    Matrix& w = param.mutable_value();
    w -= lr * cfg.weight_decay * w;
    w.array() -= lr * (mom.m.array() / bias1) / ((mom.v.array() / bias2).sqrt() + cfg.eps);
  }
}

double global_grad_norm(const ParamList& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (p.tensor.has_grad()) sq += p.tensor.grad().squaredNorm();
  }
  return std::sqrt(sq);
}

double clip_gradients(const ParamList& params, double max_norm) {
  if (!(max_norm > 0)) throw ConfigError("clip norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm <= max_norm) return 1.0;
  const double s = max_norm / norm;
  for (const auto& p : params) {
    Tensor t = p.tensor;
    if (t.has_grad()) t.mutable_grad() *= s;
  }
  return s;
}

// --- metrics ----------------------------------------------------------------

MiouResult miou_from_labels(const std::vector<std::vector<int>>& predictions,
                            const std::vector<std::vector<int>>& targets, Index classes) {
  if (predictions.size() != targets.size()) throw DimensionError("prediction and target counts differ");
  const auto K = static_cast<std::size_t>(classes);
  std::vector<double> tp(K, 0), fp(K, 0), fn(K, 0);
  for (std::size_t s = 0; s < predictions.size(); ++s) {
    const auto& pred = predictions[s];
    const auto& gt = targets[s];
    if (pred.size() != gt.size()) throw DimensionError("prediction and target sizes differ");
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const int p = pred[i], g = gt[i];
      if (p < 0 || p >= classes || g < 0 || g >= classes) throw IndexError("label outside [0, K)");
      if (p == g) {
        tp[static_cast<std::size_t>(p)] += 1;
      } else {
        fp[static_cast<std::size_t>(p)] += 1;
        fn[static_cast<std::size_t>(g)] += 1;
      }
    }
  }
  MiouResult out;
  out.per_class.assign(K, std::numeric_limits<double>::quiet_NaN());
  double total = 0.0;
  int counted = 0;
  for (std::size_t k = 0; k < K; ++k) {
    const double uni = tp[k] + fp[k] + fn[k];
    if (uni == 0) continue;
    out.per_class[k] = tp[k] / uni;
    total += out.per_class[k];
    ++counted;
  }
  out.mean = counted ? total / counted : 0.0;
  return out;
}

MiouResult evaluate_miou(const DensePredPipeline& pipe, const std::vector<SyntheticSample>& samples) {
  std::vector<std::vector<int>> preds, targets;
  preds.reserve(samples.size());
  targets.reserve(samples.size());
  for (const auto& s : samples) {
    preds.push_back(pipe.predict_segmentation(s.image));
    targets.push_back(s.mask);
  }
  return miou_from_labels(preds, targets, pipe.config().classes);
}

// --- training ---------------------------------------------------------------

namespace {

ordered_json number_or_null(double v) { return std::isfinite(v) ? ordered_json(v) : ordered_json(nullptr); }

}  // namespace

ordered_json to_json(const RunReport& r) {
  ordered_json j;
  j["seed"] = r.seed;
  j["losses"] = r.losses;
  j["final_loss"] = r.final_loss();
  j["train_miou"] = number_or_null(r.train_miou);
  j["eval_miou"] = number_or_null(r.eval_miou);
  ordered_json per_class = ordered_json::array();
  for (double v : r.eval_per_class) per_class.push_back(number_or_null(v));
  j["eval_per_class_iou"] = per_class;
  j["text_forwards_train"] = r.text_forwards_train;
  j["text_forwards_infer"] = r.text_forwards_infer;
  j["trainable_params"] = r.trainable_params;
  j["pipeline"] = r.pipeline_config;
  j["optim"] = r.optim_config;
  return j;
}

PipelineTarget make_target(const DensePredPipeline& pipe, const SyntheticSample& sample) {
  if (pipe.config().task == TaskMode::Segmentation) return PixelMask{sample.mask};
  return sample.boxes;
}

RunReport train(DensePredPipeline& pipe, const std::vector<SyntheticSample>& train_set,
                const std::vector<SyntheticSample>& eval_set, const OptimConfig& cfg) {
  cfg.validate();
  if (train_set.empty()) throw ConfigError("training split is empty");
  const auto start = std::chrono::steady_clock::now();
  pipe.clear_text_cache();
  pipe.reset_counters();

  RunReport report;
  report.seed = cfg.seed;
  report.pipeline_config = to_json(pipe.config());
  report.optim_config = to_json(cfg);
  report.trainable_params = pipe.trainable_parameter_count();

  std::vector<PipelineTarget> targets;
  targets.reserve(train_set.size());
  for (const auto& s : train_set) targets.push_back(make_target(pipe, s));

  const std::size_t n = train_set.size();
  const bool full_batch = n <= 64;
  const std::size_t batch = full_batch ? n : static_cast<std::size_t>(std::min<Index>(cfg.batch_size, static_cast<Index>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(derive_seed(cfg.seed, "batches"));
  std::size_t cursor = n;

  const ParamList params = pipe.trainable_parameters();
  AdamState state;
  for (Index step = 0; step < cfg.steps; ++step) {
    std::vector<const Tensor*> images;
    std::vector<const PipelineTarget*> batch_targets;
    for (std::size_t b = 0; b < batch; ++b) {
      if (cursor >= n) {
        if (!full_batch) std::shuffle(order.begin(), order.end(), shuffle_rng);
        cursor = 0;
      }
      images.push_back(&train_set[order[cursor]].image);
      batch_targets.push_back(&targets[order[cursor]]);
      ++cursor;
    }

    Tape tape;
    TapeScope scope(tape);
    for (const auto& p : params) {
      Tensor t = p.tensor;
      t.zero_grad();
    }
    const Tensor loss = pipe.batch_loss(images, batch_targets);
    const double value = loss.item();
    if (!std::isfinite(value)) {
      std::string recent;
      for (std::size_t i = report.losses.size() >= 3 ? report.losses.size() - 3 : 0; i < report.losses.size(); ++i) {
        recent += " " + std::to_string(report.losses[i]);
      }
      throw DivergenceError("non-finite loss at step " + std::to_string(step) + " (lr " + std::to_string(cfg.lr) +
                            ", last losses:" + (recent.empty() ? " none" : recent) + ")");
    }
    report.losses.push_back(value);
    tape.backward(loss);
    if (cfg.clip_norm) clip_gradients(params, *cfg.clip_norm);
    adamw_step(params, state, cfg);
  }
  report.text_forwards_train = pipe.text_forward_count();

  const PipelineConfig& pc = pipe.config();
  if (pc.language && pc.prompt != PromptMode::PreModel) pipe.cache_text_embeddings();
  if (pc.task == TaskMode::Segmentation) {
    pipe.reset_counters();
    if (!eval_set.empty()) {
      const MiouResult eval = evaluate_miou(pipe, eval_set);
      report.eval_miou = eval.mean;
      report.eval_per_class = eval.per_class;
    }
    report.text_forwards_infer = pipe.text_forward_count();
    report.train_miou = evaluate_miou(pipe, train_set).mean;
  } else {
    report.train_miou = report.eval_miou = std::numeric_limits<double>::quiet_NaN();
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return report;
}

// --- ablation ---------------------------------------------------------------

std::vector<AblationRun> standard_ablation_runs(const PipelineConfig& base, const OptimConfig& optim) {
  std::vector<AblationRun> runs;
  PipelineConfig c = base;
  c.language = false;
  runs.push_back({"no_language", c, optim});
  for (PromptMode mode : {PromptMode::Template, PromptMode::LanguageOnly, PromptMode::PreModel, PromptMode::PostModel}) {
    c = base;
    c.language = true;
    c.prompt = mode;
    runs.push_back({to_string(mode), c, optim});
  }
  return runs;
}

AblationSuite ablation_suite_from_json(const json& j) {
  AblationSuite suite;
  suite.train_fraction = j.value("train_fraction", suite.train_fraction);
  suite.split_seed = j.value("split_seed", suite.split_seed);
  PipelineConfig base = j.contains("pipeline") ? pipeline_config_from_json(j.at("pipeline")) : PipelineConfig{};
  OptimConfig optim = j.contains("optim") ? optim_config_from_json(j.at("optim")) : OptimConfig{};
  apply_seed_override(base, optim);
  if (!j.contains("runs")) {
    suite.runs = standard_ablation_runs(base, optim);
    return suite;
  }
  for (const auto& r : j.at("runs")) {
    AblationRun run;
    run.name = r.at("name").get<std::string>();
    run.pipeline = r.contains("pipeline") ? pipeline_config_from_json(r.at("pipeline"), base) : base;
    run.optim = r.contains("optim") ? optim_config_from_json(r.at("optim"), optim) : optim;
    apply_seed_override(run.pipeline, run.optim);
    suite.runs.push_back(std::move(run));
  }
  return suite;
}

std::vector<AblationRow> run_ablation(const AblationSuite& suite, const Dataset& data) {
  const auto [train_set, eval_set] = split(data.samples, suite.train_fraction, suite.split_seed);
  std::vector<AblationRow> rows;
  for (const auto& run : suite.runs) {
    AblationRow row;
    row.name = run.name;
    try {
      PipelineConfig pc = run.pipeline;
      pc.classes = data.spec.classes;
      pc.image.image_height = data.spec.height;
      pc.image.image_width = data.spec.width;
      DensePredPipeline pipe(pc, ClassTokenTable::synthetic(pc.classes, pc.context_length));
      const RunReport report = train(pipe, train_set, eval_set, run.optim);
      row.miou = report.eval_miou;
      row.final_loss = report.final_loss();
      row.params = report.trainable_params;
      row.text_fwd_train = report.text_forwards_train;
      row.text_fwd_infer = report.text_forwards_infer;
    } catch (const std::exception& e) {
      row.ok = false;
      row.error = e.what();
      row.miou = row.final_loss = std::numeric_limits<double>::quiet_NaN();
      std::cerr << "run '" << run.name << "' failed: " << e.what() << '\n';
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "config_name,miou,final_loss,params,text_fwd_train,text_fwd_infer\n";
  out.precision(10);
  for (const auto& r : rows) {
    if (!r.ok) {
      out << r.name << ",nan,nan,nan,nan,nan\n";
      continue;
    }
    out << r.name << ',' << r.miou << ',' << r.final_loss << ',' << r.params << ',' << r.text_fwd_train << ','
        << r.text_fwd_infer << '\n';
  }
}

bool apply_seed_override(PipelineConfig& pipeline, OptimConfig& optim) {
  const char* env = std::getenv("DENSECLIP_SEED");
  if (!env || !*env) return false;
  std::uint64_t seed = 0;
  try {
    seed = std::stoull(env);
  } catch (const std::exception&) {
    throw ConfigError(std::string("DENSECLIP_SEED is not an unsigned integer: '") + env + "'");
  }
  pipeline.seed = seed;
  optim.seed = seed;
  return true;
}

bool GradSuiteResult::passed() const {
  for (const auto& e : entries) {
    if (!e.passed) return false;
  }
  return !entries.empty();
}

}  // namespace denseclip
