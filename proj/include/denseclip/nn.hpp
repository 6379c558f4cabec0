#pragma once

#include <span>
#include <string>
#include <vector>

#include "denseclip/ops.hpp"
#include "denseclip/random.hpp"

namespace denseclip {

// Optimizer group a parameter belongs to; each group has its own lr multiplier.
enum class ParamGroup { ImageEncoder, TextEncoder, Other };

const char* to_string(ParamGroup group);

struct NamedParam {
  std::string name;
  Tensor tensor;  // aliases the model's storage
  ParamGroup group = ParamGroup::Other;
};

using ParamList = std::vector<NamedParam>;

Index count_elements(const ParamList& params);
void set_trainable(const ParamList& params, bool trainable);

struct LinearLayer {
  Tensor weight;  // [out x in]
  Tensor bias;    // [out]

  // Symmetric uniform init scaled by 1/sqrt(fan_in).
  static LinearLayer init(Index in, Index out, Rng& rng);
  static LinearLayer identity(Index dim);
  static LinearLayer zeros(Index in, Index out);

  Index in_dim() const { return weight.cols(); }
  Index out_dim() const { return weight.rows(); }

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

struct LayerNormParams {
  Tensor scale;  // [C]
  Tensor shift;  // [C]
  double eps = 1e-5;

  static LayerNormParams init(Index dim);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

Tensor layer_norm(const LayerNormParams& params, const Tensor& x);

// Multi-head scaled dot-product attention with query/key/value/output
// projections. No positional encoding and no masking.
struct MhsaLayer {
  Index heads = 1;
  LinearLayer query, key, value, output;

  static MhsaLayer init(Index dim, Index heads, Rng& rng);

  Index dim() const { return query.in_dim(); }
  Index head_dim() const { return dim() / heads; }

  // Self-attention over seq [L x C].
  Tensor forward(const Tensor& seq) const;
  // Queries [Lq x C] attend to memory [Lk x C].
  Tensor forward(const Tensor& queries, const Tensor& memory) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

Tensor mhsa_forward(const MhsaLayer& layer, const Tensor& seq);

// Two linear maps with a GELU in between.
struct FeedForward {
  LinearLayer fc1, fc2;

  static FeedForward init(Index dim, Index hidden, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

// Pre-norm transformer block used by the toy encoders.
struct EncoderBlock {
  LayerNormParams norm1, norm2;
  MhsaLayer attention;
  FeedForward mlp;

  static EncoderBlock init(Index dim, Index heads, Index hidden, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

// Pre-norm decoder layer: self-attention over the queries, cross-attention
// from the queries into the memory, then a feed-forward block, each wrapped in
// a residual connection.
struct TransformerDecoderLayer {
  LayerNormParams norm_self, norm_cross, norm_ffn;
  MhsaLayer self_attention;
  MhsaLayer cross_attention;
  FeedForward ffn;

  static TransformerDecoderLayer init(Index dim, Index heads, Index hidden, Rng& rng);

  Tensor forward(const Tensor& queries, const Tensor& memory) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

struct TransformerDecoder {
  std::vector<TransformerDecoderLayer> layers;

  static TransformerDecoder init(Index depth, Index dim, Index heads, Rng& rng);

  Index dim() const { return layers.empty() ? 0 : layers.front().self_attention.dim(); }
  Tensor forward(const Tensor& queries, const Tensor& memory) const;
  void collect(ParamList& out, const std::string& prefix, ParamGroup group) const;
};

Tensor decoder_forward(std::span<const TransformerDecoderLayer> layers, const Tensor& queries, const Tensor& memory);

}  // namespace denseclip
