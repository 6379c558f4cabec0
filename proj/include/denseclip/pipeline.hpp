#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "denseclip/matching.hpp"
#include "denseclip/prompting.hpp"
#include "json.hpp"

namespace denseclip {

enum class TaskMode { Segmentation, DetectionAux };

struct PipelineConfig {
  Index classes = 8;
  ImageEncoderConfig image;         // image.embed_dim is the shared dim d
  std::string backbone = "toy_vit";  // toy_vit | patch_mlp
  Index text_width = 64;
  Index text_blocks = 2;
  Index text_heads = 4;
  Index context_length = 8;
  Index decoder_layers = 2;
  Index decoder_heads = 4;
  Index head_hidden = 32;
  // false: no text path; a learned linear class-score block takes the place
  // of the score map so the decode head keeps the same input width.
  bool language = true;
  PromptMode prompt = PromptMode::PostModel;
  TaskMode task = TaskMode::Segmentation;
  LossConfig loss;
  double gamma_init = 1e-4;
  bool gamma_learnable = true;
  bool freeze_text = true;
  std::uint64_t seed = 0;

  Index embed_dim() const { return image.embed_dim; }
  void validate() const;
};

nlohmann::ordered_json to_json(const PipelineConfig& config);
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const PipelineConfig& defaults = {});

// Two per-position linear mixing stages (c + K -> hidden -> K) followed by
// nearest-neighbor upsampling to label resolution.
struct DecodeHead {
  LinearLayer mix1, mix2;
  Index factor = 1;
  std::vector<Index> upsample_index;  // label pixel -> grid cell

  static DecodeHead init(Index in_channels, Index hidden, Index classes, Index h4, Index w4, Index factor, Rng& rng);

  Tensor forward(const FeatureMap& fused) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Full-resolution per-pixel labels.
struct PixelMask {
  std::vector<int> labels;  // H*W entries
};

using PipelineTarget = std::variant<PixelMask, std::vector<BoxAnnotation>>;

struct PipelineOutput {
  std::optional<Tensor> logits;  // [(H*W) x K] in Segmentation mode
  ScoreMap scores;               // empty tensor when language is off
  TextEmbeddings text;
  Tensor loss;                   // scalar; 0 when no target given
  Tensor main_loss;
  Tensor aux_loss;
};

class DensePredPipeline {
 public:
  DensePredPipeline(PipelineConfig config, ClassTokenTable table);

  const PipelineConfig& config() const { return config_; }
  const ClassTokenTable& class_table() const { return table_; }
  const ImageBackbone& image_encoder() const { return *encoder_; }
  const ToyTextEncoder* text_encoder() const { return text_.get(); }
  ToyTextEncoder* text_encoder() { return text_.get(); }
  bool has_adapter() const { return adapter_.has_value(); }
  Index grid_height() const { return config_.image.image_height / config_.image.patch; }
  Index grid_width() const { return config_.image.image_width / config_.image.patch; }
  Index fused_channels() const { return config_.embed_dim() + config_.classes; }

  // Text embeddings that do not depend on the image: template, learnable
  // contexts, or the pre-gate embeddings in post-model mode. Uses the cache
  // when one is set.
  TextEmbeddings base_text_embeddings() const;

  // Final text embeddings for one image.
  TextEmbeddings image_text_embeddings(const PooledFeatures& pooled, const TextEmbeddings* base) const;

  // One image. `base` lets a batch share the image-independent text pass.
  PipelineOutput forward(const Tensor& image, const PipelineTarget* target, const TextEmbeddings* base = nullptr) const;

  // Mean total loss over a batch, sharing the image-independent text pass.
  Tensor batch_loss(const std::vector<const Tensor*>& images, const std::vector<const PipelineTarget*>& targets) const;

  // Per-pixel argmax of the main logits; ties resolve to the lowest class id.
  std::vector<int> predict_segmentation(const Tensor& image) const;

  // Stores the image-independent text embeddings so inference skips the text
  // encoder. Not available in pre-model mode.
  void cache_text_embeddings();
  void clear_text_cache() { cache_.reset(); }
  bool has_text_cache() const { return cache_.has_value(); }
  TextEmbeddings cached_text_embeddings() const;

  // Every parameter the configured mode touches, including frozen ones.
  ParamList parameters() const;
  ParamList trainable_parameters() const;
  Index trainable_parameter_count() const { return count_elements(trainable_parameters()); }

  std::int64_t head_forward_count() const { return *head_forwards_; }
  std::int64_t text_forward_count() const { return text_ ? text_->forward_count() : 0; }
  void reset_counters() const;

  // Independent copy with identical parameter values.
  DensePredPipeline clone() const;

  void save(const std::filesystem::path& dir) const;
  static DensePredPipeline load(const std::filesystem::path& dir);

  friend DensePredPipeline swap_backbone(const DensePredPipeline& pipe, std::shared_ptr<ImageBackbone> encoder);

 private:
  EncodedImage encode(const Tensor& image) const;
  std::vector<int> grid_labels(const PixelMask& mask) const;
  void copy_values_from(const DensePredPipeline& other, bool include_image_encoder);

  PipelineConfig config_;
  ClassTokenTable table_;
  std::shared_ptr<ImageBackbone> encoder_;
  std::optional<LinearLayer> adapter_;
  std::shared_ptr<ToyTextEncoder> text_;
  std::optional<PromptContexts> contexts_;
  std::optional<LearnableQueries> queries_;
  std::optional<LinearLayer> memory_projection_;
  std::optional<TransformerDecoder> prompt_decoder_;
  std::optional<ResidualGate> gate_;
  std::optional<LinearLayer> class_scores_;
  DecodeHead head_;
  std::optional<Tensor> cache_;
  std::shared_ptr<std::int64_t> head_forwards_ = std::make_shared<std::int64_t>(0);
};

// Replaces the image encoder, keeping the text path and the head. A linear
// adapter maps the new encoder's features to the shared dim when they differ.
DensePredPipeline swap_backbone(const DensePredPipeline& pipe, std::shared_ptr<ImageBackbone> encoder);

PipelineOutput forward(const DensePredPipeline& pipe, const Tensor& image, const PipelineTarget& target);
std::vector<int> predict_segmentation(const DensePredPipeline& pipe, const Tensor& image);
TextEmbeddings cached_text_embeddings(const DensePredPipeline& pipe);

// Prediction export as a JSON grid or a plain graymap (P2).
void export_prediction_json(const std::vector<int>& labels, Index height, Index width, const std::filesystem::path& path);
void export_prediction_pgm(const std::vector<int>& labels, Index height, Index width, Index classes,
                           const std::filesystem::path& path);

}  // namespace denseclip
