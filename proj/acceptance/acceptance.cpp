// Acceptance checks. Usage: acceptance [criterion...]; no arguments runs all.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "denseclip/dct1.hpp"
#include "denseclip/harness.hpp"

using namespace denseclip;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[128];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

Tensor random_matrix(Index r, Index c, Rng& rng) { return normal_tensor({r, c}, 1.0, rng); }

// The default task: 32 training and 64 held-out images.
Dataset default_dataset() {
  Dataset d;
  d.samples = generate(d.spec, 96, 1);
  return d;
}
constexpr double kTrainFraction = 1.0 / 3.0;

std::vector<SyntheticSample> subset(const std::vector<SyntheticSample>& s, std::size_t begin, std::size_t n) {
  return {s.begin() + static_cast<long>(begin), s.begin() + static_cast<long>(begin + n)};
}

// 1
Outcome gradient_suite() {
  const GradSuiteResult r = run_gradient_suite(1e-5, 1e-4);
  double worst_op = 0, worst_pipe = 0;
  for (const auto& e : r.entries) {
    double& worst = e.tolerance <= 1e-5 ? worst_op : worst_pipe;
    worst = std::max(worst, e.max_rel_error);
  }
  std::ostringstream os;
  os << r.entries.size() << " checks, worst op " << worst_op << ", worst pipeline " << worst_pipe << ", "
     << r.seconds << " s";
  return {r.passed() && r.seconds < 60.0, os.str()};
}

// 2
Outcome score_map_oracle() {
  Rng rng(2);
  std::uniform_int_distribution<Index> side(1, 6), kd(1, 9), dd(1, 16);
  std::uniform_real_distribution<double> pos(0.1, 10.0);
  double worst = 0, worst_scale = 0;
  bool bounded = true;
  for (int trial = 0; trial < 100; ++trial) {
    const Index h = side(rng), w = side(rng), k = kd(rng), d = dd(rng);
    Tensor z = random_matrix(h * w, d, rng);
    TextEmbeddings t{random_matrix(k, d, rng)};
    const ScoreMap s = compute_score_map(z, t, h, w);
    for (Index i = 0; i < h * w; ++i) {
      for (Index j = 0; j < k; ++j) {
        const auto zi = z.value().row(i);
        const auto tj = t.t.value().row(j);
        const double oracle = zi.dot(tj) / (zi.norm() * tj.norm());
        const double v = s.s.value()(i, j);
        worst = std::max(worst, std::abs(v - oracle));
        bounded = bounded && v >= -1.0 && v <= 1.0;
      }
    }
    Tensor z2 = z.clone();
    Tensor t2 = t.t.clone();
    for (Index i = 0; i < z2.rows(); ++i) z2.mutable_value().row(i) *= pos(rng);
    for (Index j = 0; j < t2.rows(); ++j) t2.mutable_value().row(j) *= pos(rng);
    const ScoreMap s2 = compute_score_map(z2, TextEmbeddings{t2}, h, w);
    worst_scale = std::max(worst_scale, (s2.s.value() - s.s.value()).cwiseAbs().maxCoeff());
  }
  return {worst <= 1e-12 && bounded && worst_scale <= 1e-10,
          "max oracle diff " + fmt("%.3g", worst) + ", max scale diff " + fmt("%.3g", worst_scale) +
              (bounded ? ", bounded" : ", OUT OF [-1,1]")};
}

// 3
Outcome pool_equivariance() {
  Rng rng(3);
  const Index h = 4, w = 5, c = 16;
  const MhsaLayer pool = MhsaLayer::init(c, 4, rng);
  FeatureMap x4{h, w, random_matrix(h * w, c, rng)};
  const PooledFeatures base = attention_pool(pool, x4);
  double worst_dense = 0, worst_global = 0;
  std::vector<Index> perm(static_cast<std::size_t>(h * w));
  std::iota(perm.begin(), perm.end(), Index{0});
  for (int trial = 0; trial < 12; ++trial) {
    std::shuffle(perm.begin(), perm.end(), rng);
    FeatureMap xp{h, w, gather_rows(x4.values, std::span<const Index>(perm))};
    const PooledFeatures p = attention_pool(pool, xp);
    for (Index i = 0; i < h * w; ++i) {
      const double diff = (p.dense.value().row(i) - base.dense.value().row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff();
      worst_dense = std::max(worst_dense, diff);
    }
    worst_global = std::max(worst_global, (p.global.value() - base.global.value()).cwiseAbs().maxCoeff());
  }
  return {worst_dense <= 1e-10 && worst_global <= 1e-10,
          "12 permutations, dense diff " + fmt("%.3g", worst_dense) + ", global diff " + fmt("%.3g", worst_global)};
}

// 4
Outcome loss_anchors() {
  const LossConfig cfg;
  double worst = 0;
  for (Index k : {2, 8, 150}) {
    const Index h = 3, w = 4;
    ScoreMap s{Tensor::constant({h * w, k}, 0.37), h, w};
    SegTarget y;
    for (Index i = 0; i < h * w; ++i) y.labels.push_back(static_cast<int>((i * 7) % k));
    worst = std::max(worst, std::abs(seg_aux_loss(s, y, cfg).item() - std::log(static_cast<double>(k))));
  }
  ScoreMap zero{Tensor::zeros({12, 5}), 3, 4};
  DetTarget yd{Tensor::zeros({12, 5})};
  for (Index i = 0; i < 12; i += 3) yd.y.mutable_value()(i, i % 5) = 1.0;
  const double det_err = std::abs(det_aux_loss(zero, yd, cfg).item() - std::log(2.0));
  const auto echo = to_json(PipelineConfig{});
  const bool tau_ok = echo.at("temperature").get<double>() == 0.07;
  RunReport report;
  report.pipeline_config = echo;
  const bool report_ok = to_json(report).at("pipeline").at("temperature").get<double>() == 0.07;
  return {worst <= 1e-9 && det_err <= 1e-9 && tau_ok && report_ok,
          "seg |L-lnK| " + fmt("%.3g", worst) + ", det |L-ln2| " + fmt("%.3g", det_err) + ", echoed tau " +
              fmt("%.2f", echo.at("temperature").get<double>())};
}

// 5
Outcome rasterization_oracle() {
  Rng rng(5);
  std::uniform_int_distribution<Index> side(1, 16), kd(1, 6), nb(0, 6);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  long mismatches = 0, cells = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const Index h = side(rng), w = side(rng), k = kd(rng);
    std::vector<BoxAnnotation> boxes;
    const Index n = nb(rng);
    for (Index b = 0; b < n; ++b) {
      double x0 = u(rng), x1 = u(rng), y0 = u(rng), y1 = u(rng);
      if (x0 > x1) std::swap(x0, x1);
      if (y0 > y1) std::swap(y0, y1);
      // some boxes land exactly on cell centers
      if (trial % 4 == 0) {
        x0 = (std::floor(x0 * w) + 0.5) / w;
        y1 = (std::floor(y1 * h) + 0.5) / h;
      }
      if (x1 <= x0 || y1 <= y0) continue;
      boxes.push_back({static_cast<int>(std::uniform_int_distribution<Index>(0, k - 1)(rng)), x0, y0, x1, y1});
    }
    const DetTarget t = rasterize_boxes(boxes, h, w, k);
    for (Index r = 0; r < h; ++r) {
      for (Index c = 0; c < w; ++c) {
        const double cx = (c + 0.5) / w, cy = (r + 0.5) / h;
        for (Index cls = 0; cls < k; ++cls) {
          double want = 0;
          for (const auto& b : boxes) {
            if (b.class_id == cls && cx >= b.x_min && cx <= b.x_max && cy >= b.y_min && cy <= b.y_max) want = 1;
          }
          ++cells;
          if (t.y.value()(r * w + c, cls) != want) ++mismatches;
        }
      }
    }
  }
  return {mismatches == 0, "200 box sets, " + std::to_string(cells) + " cells, " + std::to_string(mismatches) + " mismatches"};
}

// 6
Outcome gamma_zero_identity() {
  TaskSpec spec;
  const auto samples = generate(spec, 3, 6);
  PipelineConfig post;
  post.prompt = PromptMode::PostModel;
  post.gamma_init = 0.0;
  post.seed = 11;
  PipelineConfig coop = post;
  coop.prompt = PromptMode::LanguageOnly;
  const auto table = ClassTokenTable::synthetic(post.classes, post.context_length);
  DensePredPipeline a(post, table), b(coop, table);
  bool same = true;
  for (const auto& s : samples) {
    const PipelineTarget target = PixelMask{s.mask};
    const auto oa = a.forward(s.image, &target);
    const auto ob = b.forward(s.image, &target);
    same = same && oa.logits->value() == ob.logits->value() && oa.scores.s.value() == ob.scores.s.value() &&
           oa.text.t.value() == ob.text.t.value() && oa.loss.item() == ob.loss.item();
  }
  return {same, same ? "logits, score maps, text and loss bitwise equal on 3 images" : "outputs differ"};
}

std::string dump_bytes(const ParamList& params) {
  std::ostringstream os;
  for (const auto& p : params) dct1::write(os, p.tensor);
  return os.str();
}

ParamList group_params(const DensePredPipeline& pipe, ParamGroup g) {
  ParamList out;
  for (const auto& p : pipe.parameters()) {
    if (p.group == g) out.push_back(p);
  }
  return out;
}

// 7
Outcome frozen_text() {
  TaskSpec spec;
  const auto data = generate(spec, 8, 7);
  PipelineConfig pc;
  pc.prompt = PromptMode::LanguageOnly;
  DensePredPipeline pipe(pc, ClassTokenTable::synthetic(pc.classes, pc.context_length));
  OptimConfig oc;
  oc.steps = 200;

  const std::string before = dump_bytes(group_params(pipe, ParamGroup::TextEncoder));
  const std::string image_before = dump_bytes(group_params(pipe, ParamGroup::ImageEncoder));
  train(pipe, data, {}, oc);
  const bool text_same = before == dump_bytes(group_params(pipe, ParamGroup::TextEncoder));
  const bool image_moved = image_before != dump_bytes(group_params(pipe, ParamGroup::ImageEncoder));

  // First-step probe: with m_hat = g and v_hat = g^2 the update is
  // lr_eff * (wd * w + g / (|g| + eps)).
  DensePredPipeline probe(pc, ClassTokenTable::synthetic(pc.classes, pc.context_length));
  const ParamList params = probe.trainable_parameters();
  std::vector<const Tensor*> images;
  std::vector<PipelineTarget> targets;
  for (const auto& s : data) targets.push_back(PixelMask{s.mask});
  std::vector<const PipelineTarget*> tp;
  for (std::size_t i = 0; i < data.size(); ++i) {
    images.push_back(&data[i].image);
    tp.push_back(&targets[i]);
  }
  {
    Tape tape;
    TapeScope scope(tape);
    for (const auto& p : params) Tensor(p.tensor).zero_grad();
    tape.backward(probe.batch_loss(images, tp));
  }
  std::map<std::string, std::pair<double, double>> picked;  // group -> (w0, expected unit step)
  std::map<std::string, std::pair<const NamedParam*, Index>> where;
  for (const auto& p : params) {
    const std::string g = to_string(p.group);
    if (where.count(g)) continue;
    const auto& grad = p.tensor.grad();
    Index best = 0;
    grad.cwiseAbs().reshaped<Eigen::RowMajor>().maxCoeff(&best);
    if (std::abs(grad.data()[best]) < 1e-8) continue;
    where[g] = {&p, best};
    const double w0 = p.tensor.data()[best], g0 = grad.data()[best];
    picked[g] = {w0, oc.weight_decay * w0 + g0 / (std::abs(g0) + oc.eps)};
  }
  AdamState state;
  adamw_step(params, state, oc);
  std::map<std::string, double> eff;
  for (const auto& [g, pw] : where) {
    const double w1 = pw.first->tensor.data()[pw.second];
    eff[g] = (picked[g].first - w1) / picked[g].second;
  }
  const double img = eff.count("image_encoder") ? eff["image_encoder"] : std::nan("");
  const double other = eff.count("other") ? eff["other"] : std::nan("");
  const bool lr_ok = std::abs(img - 0.1 * oc.lr) <= 1e-9 * oc.lr && std::abs(other - oc.lr) <= 1e-9 * oc.lr;
  std::ostringstream os;
  os << "text dump " << (text_same ? "unchanged" : "CHANGED") << " after 200 steps, image encoder "
     << (image_moved ? "updated" : "NOT updated") << "; effective lr image " << img << " other " << other
     << " (ratio " << img / other << ")";
  return {text_same && image_moved && lr_ok, os.str()};
}

// 8
Outcome ablation_ordering() {
  const auto start = std::chrono::steady_clock::now();
  const Dataset data = default_dataset();
  std::map<std::string, double> mean;
  std::map<std::string, Index> params;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    AblationSuite suite;
    suite.train_fraction = kTrainFraction;
    PipelineConfig base;
    base.seed = seed;
    OptimConfig oc;
    oc.seed = seed;
    for (auto& run : standard_ablation_runs(base, oc)) {
      if (run.name == "no_language" || run.name == "coop" || run.name == "post") suite.runs.push_back(run);
    }
    for (const auto& row : run_ablation(suite, data)) {
      if (!row.ok) return {false, "run " + row.name + " failed: " + row.error};
      mean[row.name] += row.miou / 5.0;
      params[row.name] = row.params;
    }
  }
  PipelineConfig pre;
  pre.prompt = PromptMode::PreModel;
  const Index pre_params =
      DensePredPipeline(pre, ClassTokenTable::synthetic(pre.classes, pre.context_length)).trainable_parameter_count();
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  const bool order = mean["no_language"] < mean["coop"] && mean["coop"] < mean["post"];
  std::ostringstream os;
  os << "mIoU no_language " << mean["no_language"] << " < coop " << mean["coop"] << " < post " << mean["post"]
     << "; params post " << params["post"] << " < pre " << pre_params << "; " << secs << " s";
  return {order && params["post"] < pre_params && secs < 600.0, os.str()};
}

// 9
Outcome cached_inference_count() {
  TaskSpec spec;
  const auto samples = generate(spec, 6, 9);
  const auto train_set = subset(samples, 0, 2), eval_set = subset(samples, 2, 4);
  const Index m = static_cast<Index>(eval_set.size());
  OptimConfig oc;
  oc.steps = 2;
  std::map<PromptMode, std::int64_t> counts;
  for (PromptMode mode : {PromptMode::PostModel, PromptMode::PreModel}) {
    PipelineConfig pc;
    pc.prompt = mode;
    DensePredPipeline pipe(pc, ClassTokenTable::synthetic(pc.classes, pc.context_length));
    counts[mode] = train(pipe, train_set, eval_set, oc).text_forwards_infer;
  }
  const Index k = PipelineConfig{}.classes;
  std::ostringstream os;
  os << "M=" << m << ", K=" << k << ": post " << counts[PromptMode::PostModel] << ", pre " << counts[PromptMode::PreModel];
  return {counts[PromptMode::PostModel] == 0 && counts[PromptMode::PreModel] == m * k, os.str()};
}

// 10
Outcome any_backbone() {
  const Dataset data = default_dataset();
  const auto [train_set, eval_set] = split(data.samples, kTrainFraction, 0);
  double lang = 0, control = 0;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    OptimConfig oc;
    oc.seed = seed;
    for (bool language : {true, false}) {
      PipelineConfig pc;
      pc.seed = seed;
      pc.language = language;
      const DensePredPipeline original(pc, ClassTokenTable::synthetic(pc.classes, pc.context_length));
      ImageEncoderConfig ec = pc.image;
      ec.width = 48;
      Rng rng(derive_seed(seed, "swapped_backbone"));
      DensePredPipeline pipe = swap_backbone(original, std::make_shared<PatchMlpBackbone>(ec, rng));
      (language ? lang : control) += train(pipe, train_set, eval_set, oc).eval_miou / 5.0;
    }
  }
  std::ostringstream os;
  os << "patch_mlp backbone: with language " << lang << " vs no-language control " << control;
  return {lang > control, os.str()};
}

// 11
Outcome determinism() {
  TaskSpec spec;
  const auto samples = generate(spec, 12, 11);
  const auto train_set = subset(samples, 0, 8), eval_set = subset(samples, 8, 4);
  std::string dumps[2];
  for (auto& d : dumps) {
    PipelineConfig pc;
    pc.seed = 5;
    OptimConfig oc;
    oc.seed = 5;
    oc.steps = 25;
    DensePredPipeline pipe(pc, ClassTokenTable::synthetic(pc.classes, pc.context_length));
    d = to_json(train(pipe, train_set, eval_set, oc)).dump();
  }
  return {dumps[0] == dumps[1], dumps[0] == dumps[1] ? "report JSON bitwise identical across two runs" : "reports differ"};
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"gradient suite", gradient_suite},
      {"score-map oracle", score_map_oracle},
      {"attention-pool equivariance", pool_equivariance},
      {"analytic loss anchors", loss_anchors},
      {"rasterization oracle", rasterization_oracle},
      {"gamma=0 ablation identity", gamma_zero_identity},
      {"frozen text encoder", frozen_text},
      {"ablation ordering", ablation_ordering},
      {"cached inference text count", cached_inference_count},
      {"any-backbone direction", any_backbone},
      {"determinism", determinism},
  };
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::stoi(argv[i]));
  if (selected.empty()) {
    for (int i = 1; i <= static_cast<int>(criteria.size()); ++i) selected.push_back(i);
  }
  int failures = 0;
  for (int id : selected) {
    if (id < 1 || id > static_cast<int>(criteria.size())) {
      std::cerr << "no criterion " << id << '\n';
      return 2;
    }
    const auto& [name, fn] = criteria[static_cast<std::size_t>(id - 1)];
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << "Criterion " << id << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail
              << std::endl;
    failures += o.pass ? 0 : 1;
  }
  return failures == 0 ? 0 : 1;
}
