#include "denseclip/nn.hpp"

#include <cmath>

namespace denseclip {

const char* to_string(ParamGroup group) {
  switch (group) {
    case ParamGroup::ImageEncoder: return "image_encoder";
    case ParamGroup::TextEncoder: return "text_encoder";
    case ParamGroup::Other: return "other";
  }
  return "other";
}

Index count_elements(const ParamList& params) {
  Index n = 0;
  for (const auto& p : params) n += p.tensor.size();
  return n;
}

void set_trainable(const ParamList& params, bool trainable) {
  for (const auto& p : params) {
    Tensor t = p.tensor;
    t.set_requires_grad(trainable);
    if (!trainable) t.clear_grad();
  }
}

// --- LinearLayer ------------------------------------------------------------

LinearLayer LinearLayer::init(Index in, Index out, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return {uniform_tensor({out, in}, bound, rng, true), uniform_tensor({out}, bound, rng, true)};
}

LinearLayer LinearLayer::identity(Index dim) {
  return {Tensor::from_matrix(Matrix::Identity(dim, dim), true), Tensor::zeros({dim}, true)};
}

LinearLayer LinearLayer::zeros(Index in, Index out) {
  return {Tensor::zeros({out, in}, true), Tensor::zeros({out}, true)};
}

Tensor LinearLayer::forward(const Tensor& x) const { return linear(x, weight, bias); }

void LinearLayer::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".weight", weight, group});
  out.push_back({prefix + ".bias", bias, group});
}

// --- LayerNormParams --------------------------------------------------------

LayerNormParams LayerNormParams::init(Index dim) {
  return {Tensor::constant({dim}, 1.0, true), Tensor::zeros({dim}, true), 1e-5};
}

Tensor LayerNormParams::forward(const Tensor& x) const { return denseclip::layer_norm(x, scale, shift, eps); }

void LayerNormParams::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  out.push_back({prefix + ".scale", scale, group});
  out.push_back({prefix + ".shift", shift, group});
}

Tensor layer_norm(const LayerNormParams& params, const Tensor& x) { return params.forward(x); }

// --- MhsaLayer --------------------------------------------------------------

MhsaLayer MhsaLayer::init(Index dim, Index heads, Rng& rng) {
  if (heads <= 0 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  MhsaLayer layer;
  layer.heads = heads;
  layer.query = LinearLayer::init(dim, dim, rng);
  layer.key = LinearLayer::init(dim, dim, rng);
  layer.value = LinearLayer::init(dim, dim, rng);
  layer.output = LinearLayer::init(dim, dim, rng);
  return layer;
}

Tensor MhsaLayer::forward(const Tensor& seq) const { return forward(seq, seq); }

Tensor MhsaLayer::forward(const Tensor& queries, const Tensor& memory) const {
  const Index c = dim();
  if (heads <= 0 || c % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(c) + " is not divisible by " + std::to_string(heads) + " heads");
  }
  if (queries.cols() != c || memory.cols() != c) {
    throw DimensionError("attention expects width " + std::to_string(c) + ", got queries " + to_string(queries.shape()) +
                         " and memory " + to_string(memory.shape()));
  }
  if (queries.rows() < 1 || memory.rows() < 1) throw DimensionError("attention over an empty sequence");
  const Tensor q = query.forward(queries);
  const Tensor k = key.forward(memory);
  const Tensor v = value.forward(memory);
  const Index dh = head_dim();
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> per_head;
  per_head.reserve(static_cast<std::size_t>(heads));
  for (Index h = 0; h < heads; ++h) {
    const Tensor qh = slice_cols(q, h * dh, dh);
    const Tensor kh = slice_cols(k, h * dh, dh);
    const Tensor vh = slice_cols(v, h * dh, dh);
    const Tensor weights = softmax(scale(matmul_nt(qh, kh), inv_sqrt), -1);
    per_head.push_back(matmul(weights, vh));
  }
  const Tensor merged = heads == 1 ? per_head.front() : concat_cols<double>(std::span<const Tensor>(per_head));
  return output.forward(merged);
}

void MhsaLayer::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  query.collect(out, prefix + ".query", group);
  key.collect(out, prefix + ".key", group);
  value.collect(out, prefix + ".value", group);
  output.collect(out, prefix + ".output", group);
}

Tensor mhsa_forward(const MhsaLayer& layer, const Tensor& seq) { return layer.forward(seq); }

// --- FeedForward ------------------------------------------------------------

FeedForward FeedForward::init(Index dim, Index hidden, Rng& rng) {
  return {LinearLayer::init(dim, hidden, rng), LinearLayer::init(hidden, dim, rng)};
}

Tensor FeedForward::forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

void FeedForward::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  fc1.collect(out, prefix + ".fc1", group);
  fc2.collect(out, prefix + ".fc2", group);
}

// --- EncoderBlock -----------------------------------------------------------

EncoderBlock EncoderBlock::init(Index dim, Index heads, Index hidden, Rng& rng) {
  EncoderBlock b;
  b.norm1 = LayerNormParams::init(dim);
  b.norm2 = LayerNormParams::init(dim);
  b.attention = MhsaLayer::init(dim, heads, rng);
  b.mlp = FeedForward::init(dim, hidden, rng);
  return b;
}

Tensor EncoderBlock::forward(const Tensor& x) const {
  const Tensor h = add(x, attention.forward(norm1.forward(x)));
  return add(h, mlp.forward(norm2.forward(h)));
}

void EncoderBlock::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  norm1.collect(out, prefix + ".norm1", group);
  attention.collect(out, prefix + ".attention", group);
  norm2.collect(out, prefix + ".norm2", group);
  mlp.collect(out, prefix + ".mlp", group);
}

// --- TransformerDecoderLayer ------------------------------------------------

TransformerDecoderLayer TransformerDecoderLayer::init(Index dim, Index heads, Index hidden, Rng& rng) {
  TransformerDecoderLayer l;
  l.norm_self = LayerNormParams::init(dim);
  l.norm_cross = LayerNormParams::init(dim);
  l.norm_ffn = LayerNormParams::init(dim);
  l.self_attention = MhsaLayer::init(dim, heads, rng);
  l.cross_attention = MhsaLayer::init(dim, heads, rng);
  l.ffn = FeedForward::init(dim, hidden, rng);
  return l;
}

Tensor TransformerDecoderLayer::forward(const Tensor& queries, const Tensor& memory) const {
  if (memory.cols() != queries.cols()) {
    throw DimensionError("decoder memory width " + std::to_string(memory.cols()) + " differs from query width " +
                         std::to_string(queries.cols()));
  }
  Tensor x = add(queries, self_attention.forward(norm_self.forward(queries)));
  x = add(x, cross_attention.forward(norm_cross.forward(x), memory));
  return add(x, ffn.forward(norm_ffn.forward(x)));
}

void TransformerDecoderLayer::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  norm_self.collect(out, prefix + ".norm_self", group);
  self_attention.collect(out, prefix + ".self_attention", group);
  norm_cross.collect(out, prefix + ".norm_cross", group);
  cross_attention.collect(out, prefix + ".cross_attention", group);
  norm_ffn.collect(out, prefix + ".norm_ffn", group);
  ffn.collect(out, prefix + ".ffn", group);
}

// --- TransformerDecoder -----------------------------------------------------

TransformerDecoder TransformerDecoder::init(Index depth, Index dim, Index heads, Rng& rng) {
  if (depth < 1) throw ConfigError("decoder depth must be at least 1");
  TransformerDecoder d;
  for (Index i = 0; i < depth; ++i) d.layers.push_back(TransformerDecoderLayer::init(dim, heads, 4 * dim, rng));
  return d;
}

Tensor TransformerDecoder::forward(const Tensor& queries, const Tensor& memory) const {
  return decoder_forward(layers, queries, memory);
}

void TransformerDecoder::collect(ParamList& out, const std::string& prefix, ParamGroup group) const {
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i].collect(out, prefix + ".layers." + std::to_string(i), group);
}

Tensor decoder_forward(std::span<const TransformerDecoderLayer> layers, const Tensor& queries, const Tensor& memory) {
  if (layers.empty()) throw ConfigError("decoder needs at least one layer");
  Tensor x = queries;
  for (const auto& layer : layers) x = layer.forward(x, memory);
  return x;
}

}  // namespace denseclip
