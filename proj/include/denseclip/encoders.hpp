#pragma once

#include <atomic>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "denseclip/nn.hpp"

namespace denseclip {

// Stage-4 visual features x4, flattened row-major: row i is grid cell
// (i / w4, i % w4).
struct FeatureMap {
  Index h4 = 0;
  Index w4 = 0;
  Tensor values;  // [(h4*w4) x c]

  Index positions() const { return h4 * w4; }
  Index channels() const { return values.cols(); }
};

// Outputs of attention pooling: the global token and the dense tokens.
struct PooledFeatures {
  Tensor global;  // [1 x c]
  Tensor dense;   // [(h4*w4) x c]
};

struct EncodedImage {
  FeatureMap features;
  PooledFeatures pooled;
};

struct TextEmbeddings {
  Tensor t;  // [K x d]

  Index class_count() const { return t.rows(); }
};

// Global average pooling concatenated in front of the map, passed through
// MHSA and split back into (global, dense).
PooledFeatures attention_pool(const MhsaLayer& pool, const FeatureMap& x4);

struct ImageEncoderConfig {
  Index image_height = 32;
  Index image_width = 32;
  Index patch = 4;       // downsample factor per side
  Index width = 32;      // internal token width
  Index embed_dim = 32;  // shared image/text dim d
  Index blocks = 2;
  Index heads = 4;
  double pixel_mean = 0.5;  // inputs are standardized before patch embedding
  double pixel_std = 0.25;
  double pool_identity_gain = 3.0;  // added to the pool's query/key diagonals at init
};

// Anything that turns an H x W x 3 image into a feature map plus pooled
// features can drive the pipeline.
class ImageBackbone {
 public:
  virtual ~ImageBackbone() = default;

  virtual EncodedImage encode(const Tensor& image) const = 0;
  virtual Index out_dim() const = 0;
  virtual Index factor() const = 0;
  virtual std::string kind() const = 0;
  virtual ImageEncoderConfig config() const = 0;
  virtual void collect(ParamList& out, const std::string& prefix) const = 0;
};


// Patch embedding, a stack of transformer blocks, CLIP-style attention
// pooling and a shared projection into the embedding space.
class ToyImageEncoder final : public ImageBackbone {
 public:
  ToyImageEncoder(const ImageEncoderConfig& config, Rng& rng);

  EncodedImage encode(const Tensor& image) const override;
  Index out_dim() const override { return config_.embed_dim; }
  Index factor() const override { return config_.patch; }
  std::string kind() const override { return "toy_vit"; }
  void collect(ParamList& out, const std::string& prefix) const override;

  ImageEncoderConfig config() const override { return config_; }
  const MhsaLayer& pool() const { return pool_; }

 private:
  ImageEncoderConfig config_;
  std::vector<Index> patch_index_;
  LinearLayer patch_embed_;
  std::vector<EncoderBlock> blocks_;
  MhsaLayer pool_;
  LinearLayer projection_;
};

// Token-wise residual MLP stack without attention pooling: the pooled
// features are (spatial mean, feature map). Stands in for an arbitrary
// non-CLIP backbone; its width need not match the embedding dim.
class PatchMlpBackbone final : public ImageBackbone {
 public:
  PatchMlpBackbone(const ImageEncoderConfig& config, Rng& rng);

  EncodedImage encode(const Tensor& image) const override;
  Index out_dim() const override { return config_.width; }
  Index factor() const override { return config_.patch; }
  std::string kind() const override { return "patch_mlp"; }
  ImageEncoderConfig config() const override { return config_; }
  void collect(ParamList& out, const std::string& prefix) const override;

 private:
  ImageEncoderConfig config_;
  std::vector<Index> patch_index_;
  LinearLayer patch_embed_;
  std::vector<LayerNormParams> norms_;
  std::vector<FeedForward> blocks_;
};

std::unique_ptr<ImageBackbone> make_backbone(const std::string& kind, const ImageEncoderConfig& config, Rng& rng);

// Flat source indices that rearrange an H x W x 3 image into
// [(H/f)(W/f) x f*f*3] patch rows.
std::vector<Index> patch_gather_index(Index height, Index width, Index patch);

// Encodes the image with any backbone.
EncodedImage encode_image(const ImageBackbone& encoder, const Tensor& image);

// Class names with their token ids plus the fixed template context tokens.
struct ClassTokenTable {
  std::vector<std::string> names;
  std::vector<std::vector<int>> tokens;
  std::vector<int> template_tokens;

  Index class_count() const { return static_cast<Index>(names.size()); }
  Index vocab_size() const;

  // Template tokens take ids [0, template_length); class k owns 1 + k % 3
  // consecutive ids after them, then a shared end-of-text id that every class
  // sequence ends with. Class 0 is named "background".
  static ClassTokenTable synthetic(Index classes, Index template_length);

  static ClassTokenTable load(const std::filesystem::path& path, Index template_length);
  void save(const std::filesystem::path& path) const;
};

struct TextEncoderConfig {
  Index vocab_size = 64;
  Index width = 64;      // token width e
  Index embed_dim = 32;  // shared dim d
  Index blocks = 2;
  Index heads = 4;
  Index max_length = 16;
};

// Small transformer over [contexts; class tokens]; the final token's state,
// layer-normed and projected, is the class embedding.
class ToyTextEncoder {
 public:
  ToyTextEncoder(const TextEncoderConfig& config, Rng& rng);

  const TextEncoderConfig& config() const { return config_; }
  Index width() const { return config_.width; }
  Index embed_dim() const { return config_.embed_dim; }

  // Rows of the token embedding table for the given ids.
  Tensor embed_tokens(std::span<const int> ids) const;

  // contexts [N x e] (N may be 0) followed by the class tokens; returns [1 x d].
  Tensor encode_sequence(const Tensor& contexts, std::span<const int> class_tokens) const;

  TextEmbeddings encode_text(const Tensor& contexts, const std::vector<std::vector<int>>& class_tokens) const;
  // Same without context slots.
  TextEmbeddings encode_text(const std::vector<std::vector<int>>& class_tokens) const;

  void freeze();
  void unfreeze();
  bool frozen() const { return frozen_; }

  void collect(ParamList& out, const std::string& prefix) const;

  // Number of sequences pushed through the transformer since the last reset.
  std::int64_t forward_count() const { return counter_->load(); }
  void reset_forward_count() const { counter_->store(0); }

 private:
  TextEncoderConfig config_;
  Tensor token_embedding_;  // [V x e]
  Tensor position_embedding_;  // [max_length x e]
  std::vector<EncoderBlock> blocks_;
  LayerNormParams final_norm_;
  LinearLayer projection_;
  bool frozen_ = false;
  std::shared_ptr<std::atomic<std::int64_t>> counter_ = std::make_shared<std::atomic<std::int64_t>>(0);
};

void freeze(ToyTextEncoder& encoder);

}  // namespace denseclip
