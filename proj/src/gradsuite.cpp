#include <chrono>

#include "denseclip/gradcheck.hpp"
#include "denseclip/harness.hpp"

namespace denseclip {

namespace {

class Suite {
 public:
  explicit Suite(GradSuiteResult& result) : result_(result) {}

  void check(const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> wrt, double tol) {
    const GradCheckReport r = grad_check<double>(f, std::move(wrt), 1e-5, tol);
    result_.entries.push_back({name, r.max_rel_error, tol, r.passed});
  }

 private:
  GradSuiteResult& result_;
};

Tensor rand(Shape shape, Rng& rng, double bound = 1.0) { return uniform_tensor(std::move(shape), bound, rng, true); }

std::vector<int> rand_labels(Index n, Index k, Rng& rng) {
  std::uniform_int_distribution<int> u(0, static_cast<int>(k - 1));
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& v : out) v = u(rng);
  return out;
}

Tensor rand_binary(Shape shape, Rng& rng) {
  std::bernoulli_distribution b(0.4);
  Tensor t = Tensor::zeros(std::move(shape));
  for (Index i = 0; i < t.size(); ++i) t.mutable_data()[i] = b(rng) ? 1.0 : 0.0;
  return t;
}

void op_checks(Suite& s, double tol) {
  Rng rng(derive_seed(0x9c, "gradient_suite"));
  const std::vector<std::pair<Index, Index>> shapes{{2, 3}, {4, 5}, {1, 7}};

  for (auto [m, k] : shapes) {
    const std::string tag = "[" + std::to_string(m) + "x" + std::to_string(k) + "]";
    const Index n = k % 3 + 2;
    Tensor a = rand({m, k}, rng), b = rand({k, n}, rng), bt = rand({n, k}, rng), c = rand({m, k}, rng);
    Tensor row = rand({k}, rng), w = rand({n, k}, rng), bias = rand({n}, rng), sc = rand({1}, rng);
    s.check("matmul" + tag, [=] { return matmul(a, b); }, {a, b}, tol);
    s.check("matmul_nt" + tag, [=] { return matmul_nt(a, bt); }, {a, bt}, tol);
    s.check("transpose" + tag, [=] { return transpose(a); }, {a}, tol);
    s.check("linear" + tag, [=] { return linear(a, w, bias); }, {a, w, bias}, tol);
    s.check("add" + tag, [=] { return add(a, c); }, {a, c}, tol);
    s.check("sub" + tag, [=] { return sub(a, c); }, {a, c}, tol);
    s.check("mul" + tag, [=] { return mul(a, c); }, {a, c}, tol);
    s.check("scale" + tag, [=] { return scale(a, -1.7); }, {a}, tol);
    s.check("scale_by" + tag, [=] { return scale_by(a, sc); }, {a, sc}, tol);
    s.check("add_rowwise" + tag, [=] { return add_rowwise(a, row); }, {a, row}, tol);
    s.check("mul_rowwise" + tag, [=] { return mul_rowwise(a, row); }, {a, row}, tol);
    s.check("gelu" + tag, [=] { return gelu(scale(a, 3.0)); }, {a}, tol);
    s.check("sum" + tag, [=] { return sum(mul(a, a)); }, {a}, tol);
    s.check("mean" + tag, [=] { return mean(mul(a, c)); }, {a, c}, tol);
    s.check("mean_rows" + tag, [=] { return mean_rows(a); }, {a}, tol);
    s.check("softmax_last" + tag, [=] { return softmax(scale(a, 2.0)); }, {a}, tol);
    s.check("softmax_rows" + tag, [=] { return softmax(a, 0); }, {a}, tol);
    s.check("l2_normalize" + tag, [=] { return l2_normalize(a); }, {a}, tol);
    Tensor ln_scale = rand({k}, rng), ln_shift = rand({k}, rng);
    if (k > 1) s.check("layer_norm" + tag, [=] { return layer_norm(a, ln_scale, ln_shift); }, {a, ln_scale, ln_shift}, tol);
    const auto labels = rand_labels(m, k, rng);
    s.check("cross_entropy" + tag, [=] { return cross_entropy(scale(a, 4.0), std::span<const int>(labels)); }, {a}, tol);
    const Tensor targets = rand_binary({m, k}, rng);
    s.check("bce_with_logits" + tag, [=] { return bce_with_logits(scale(a, 5.0), targets); }, {a}, tol);
    s.check("reshape" + tag, [=] { return mul(reshape(a, {m * k}), reshape(c, {m * k})); }, {a, c}, tol);
    s.check("concat_rows" + tag, [=] { return concat_rows<double>({a, c}); }, {a, c}, tol);
    s.check("concat_cols" + tag, [=] { return concat_cols<double>({a, c, a}); }, {a, c}, tol);
    s.check("slice_rows" + tag, [=] { return slice_rows(a, m - 1, 1); }, {a}, tol);
    s.check("slice_cols" + tag, [=] { return slice_cols(a, k / 2, k - k / 2); }, {a}, tol);
    std::vector<Index> rows{0, m - 1, 0};
    s.check("gather_rows" + tag, [=] { return gather_rows(a, std::span<const Index>(rows)); }, {a}, tol);
    std::vector<Index> flat{m * k - 1, 0, m * k - 1, 0};
    s.check("take" + tag, [=] { return take(a, std::span<const Index>(flat), Shape{2, 2}); }, {a}, tol);
  }

  // blocks
  for (auto [len, dim, heads] : std::vector<std::tuple<Index, Index, Index>>{{1, 4, 1}, {3, 8, 2}, {5, 8, 4}}) {
    const std::string tag = "[L" + std::to_string(len) + ",C" + std::to_string(dim) + "]";
    Tensor x = rand({len, dim}, rng), mem = rand({len + 2, dim}, rng);
    const LinearLayer lin = LinearLayer::init(dim, dim + 1, rng);
    s.check("linear_layer" + tag, [=] { return lin.forward(x); }, {x, lin.weight, lin.bias}, tol);
    const LayerNormParams ln = LayerNormParams::init(dim);
    s.check("layer_norm_block" + tag, [=] { return ln.forward(x); }, {x, ln.scale, ln.shift}, tol);
    const MhsaLayer attn = MhsaLayer::init(dim, heads, rng);
    s.check("mhsa" + tag, [=] { return attn.forward(x); }, {x, attn.query.weight, attn.key.weight, attn.value.bias},
            tol);
    s.check("cross_attention" + tag, [=] { return attn.forward(x, mem); }, {x, mem, attn.output.weight}, tol);
    const EncoderBlock block = EncoderBlock::init(dim, heads, 2 * dim, rng);
    s.check("encoder_block" + tag, [=] { return block.forward(x); }, {x, block.mlp.fc1.weight, block.norm1.scale}, tol);
    const TransformerDecoder dec = TransformerDecoder::init(2, dim, heads, rng);
    s.check("decoder" + tag, [=] { return dec.forward(x, mem); },
            {x, mem, dec.layers[0].cross_attention.key.weight, dec.layers[1].ffn.fc2.weight}, tol);
    const FeatureMap fm{1, len, x};
    s.check("attention_pool" + tag, [=] { return attention_pool(attn, fm).dense; }, {x}, tol);
  }

  // matching and prompting
  for (auto [cells, classes] : std::vector<std::pair<Index, Index>>{{4, 2}, {6, 3}, {9, 5}}) {
    const std::string tag = "[HW" + std::to_string(cells) + ",K" + std::to_string(classes) + "]";
    Tensor z = rand({cells, 6}, rng), t = rand({classes, 6}, rng);
    s.check("score_map" + tag, [=] { return compute_score_map(z, TextEmbeddings{t}, 1, cells).s; }, {z, t}, tol);
    Tensor sm = rand({cells, classes}, rng);
    const ScoreMap score{sm, 1, cells};
    const LossConfig lc;
    const auto labels = rand_labels(cells, classes, rng);
    s.check("seg_aux_loss" + tag, [=] { return seg_aux_loss(score, SegTarget{labels}, lc); }, {sm}, tol);
    const Tensor y = rand_binary({cells, classes}, rng);
    s.check("det_aux_loss" + tag, [=] { return det_aux_loss(score, DetTarget{y}, lc); }, {sm}, tol);
    Tensor x4 = rand({cells, 3}, rng);
    s.check("fuse_features" + tag, [=] { return fuse_features(FeatureMap{1, cells, x4}, score).values; }, {x4, sm}, tol);
  }

  {
    TextEncoderConfig tc;
    tc.vocab_size = 6;
    tc.width = 8;
    tc.embed_dim = 4;
    tc.heads = 2;
    tc.max_length = 6;
    const ToyTextEncoder enc(tc, rng);
    Tensor p = rand({2, 8}, rng);
    const std::vector<std::vector<int>> cls{{2, 5}, {3, 4, 5}};
    s.check("language_prompt", [=] { return language_prompt(PromptContexts{p}, enc, cls).t; }, {p}, tol);

    Tensor t = rand({2, 4}, rng), global = rand({1, 4}, rng), dense = rand({3, 4}, rng);
    const TransformerDecoder dec = TransformerDecoder::init(1, 4, 2, rng);
    const ResidualGate gate{rand({4}, rng)};
    s.check("post_model_prompt", [=] { return post_model_prompt({t}, {global, dense}, dec, gate).t; },
            {t, global, dense, gate.gamma}, tol);
    Tensor q = rand({2, 8}, rng);
    const LinearLayer proj = LinearLayer::init(4, 8, rng);
    const TransformerDecoder pre_dec = TransformerDecoder::init(1, 8, 2, rng);
    s.check("pre_model_prompt", [=] { return pre_model_prompt({q}, {global, dense}, proj, pre_dec, enc, cls).t; },
            {q, global, dense, proj.weight}, tol);
  }
}

PipelineConfig micro_config(PromptMode mode, TaskMode task) {
  PipelineConfig c;
  c.classes = 2;
  c.image.image_height = 8;
  c.image.image_width = 8;
  c.image.patch = 2;
  c.image.width = 8;
  c.image.embed_dim = 8;
  c.image.blocks = 1;
  c.image.heads = 2;
  c.text_width = 8;
  c.text_blocks = 1;
  c.text_heads = 2;
  c.context_length = 2;
  c.decoder_layers = 1;
  c.decoder_heads = 2;
  c.head_hidden = 6;
  c.prompt = mode;
  c.task = task;
  c.gamma_init = 0.5;
  c.seed = 3;
  return c;
}

void pipeline_checks(Suite& s, double tol) {
  TaskSpec spec;
  spec.classes = 2;
  spec.height = spec.width = 8;
  spec.min_size = 3;
  spec.max_size = 6;
  spec.max_shapes = 2;
  const auto samples = generate(spec, 1, 11);
  const auto& sample = samples.front();

  for (auto [name, mode, task] : std::vector<std::tuple<std::string, PromptMode, TaskMode>>{
           {"pipeline_post_seg", PromptMode::PostModel, TaskMode::Segmentation},
           {"pipeline_pre_seg", PromptMode::PreModel, TaskMode::Segmentation},
           {"pipeline_post_det", PromptMode::PostModel, TaskMode::DetectionAux}}) {
    const DensePredPipeline pipe(micro_config(mode, task), ClassTokenTable::synthetic(2, 2));
    const PipelineTarget target = make_target(pipe, sample);
    std::vector<Tensor> wrt;
    ParamList image_params;
    pipe.image_encoder().collect(image_params, "image_encoder");
    for (const auto& p : image_params) wrt.push_back(p.tensor);
    for (const auto& p : pipe.trainable_parameters()) {
      if (p.group != ParamGroup::ImageEncoder) wrt.push_back(p.tensor);
    }
    const Tensor& image = sample.image;
    s.check(name, [&pipe, &image, &target] { return pipe.forward(image, &target).loss; }, wrt, tol);
  }
}

}  // namespace

GradSuiteResult run_gradient_suite(double op_tol, double pipeline_tol) {
  const auto start = std::chrono::steady_clock::now();
  GradSuiteResult result;
  Suite suite(result);
  op_checks(suite, op_tol);
  pipeline_checks(suite, pipeline_tol);
  result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace denseclip
