#include "denseclip/pipeline.hpp"

#include <fstream>

#include "denseclip/dct1.hpp"

namespace denseclip {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

std::string to_string(TaskMode task) { return task == TaskMode::Segmentation ? "segmentation" : "detection_aux"; }

TaskMode parse_task_mode(const std::string& s) {
  if (s == "segmentation") return TaskMode::Segmentation;
  if (s == "detection_aux") return TaskMode::DetectionAux;
  throw ConfigError("unknown task mode '" + s + "'");
}

Index max_class_tokens(const ClassTokenTable& table) {
  std::size_t n = 1;
  for (const auto& ids : table.tokens) n = std::max(n, ids.size());
  return static_cast<Index>(n);
}

}  // namespace

// --- PipelineConfig ---------------------------------------------------------

void PipelineConfig::validate() const {
  if (classes < 1) throw ConfigError("pipeline needs at least one class");
  if (context_length < 0) throw ConfigError("context length must be non-negative");
  if (head_hidden < 1) throw ConfigError("decode head hidden width must be positive");
  if (task == TaskMode::DetectionAux && !language) throw ConfigError("detection auxiliary mode needs the text path");
  if (language && (prompt == PromptMode::PreModel || prompt == PromptMode::PostModel) && decoder_layers < 1) {
    throw ConfigError("prompting decoder needs at least one layer");
  }
  if (language && prompt == PromptMode::PreModel && context_length < 1) {
    throw ConfigError("pre-model prompting needs at least one context slot");
  }
  loss.validate();
}

ordered_json to_json(const PipelineConfig& c) {
  ordered_json j;
  j["classes"] = c.classes;
  j["image_height"] = c.image.image_height;
  j["image_width"] = c.image.image_width;
  j["patch"] = c.image.patch;
  j["encoder_width"] = c.image.width;
  j["embed_dim"] = c.image.embed_dim;
  j["image_blocks"] = c.image.blocks;
  j["image_heads"] = c.image.heads;
  j["pixel_mean"] = c.image.pixel_mean;
  j["pixel_std"] = c.image.pixel_std;
  j["pool_identity_gain"] = c.image.pool_identity_gain;
  j["backbone"] = c.backbone;
  j["text_width"] = c.text_width;
  j["text_blocks"] = c.text_blocks;
  j["text_heads"] = c.text_heads;
  j["context_length"] = c.context_length;
  j["decoder_layers"] = c.decoder_layers;
  j["decoder_heads"] = c.decoder_heads;
  j["head_hidden"] = c.head_hidden;
  j["language"] = c.language;
  j["prompt"] = to_string(c.prompt);
  j["task"] = to_string(c.task);
  j["temperature"] = c.loss.temperature;
  j["aux_weight"] = c.loss.aux_weight;
  j["gamma_init"] = c.gamma_init;
  j["gamma_learnable"] = c.gamma_learnable;
  j["freeze_text"] = c.freeze_text;
  j["seed"] = c.seed;
  return j;
}

PipelineConfig pipeline_config_from_json(const json& j, const PipelineConfig& d) {
  PipelineConfig c = d;
  c.classes = j.value("classes", d.classes);
  c.image.image_height = j.value("image_height", d.image.image_height);
  c.image.image_width = j.value("image_width", d.image.image_width);
  c.image.patch = j.value("patch", d.image.patch);
  c.image.width = j.value("encoder_width", d.image.width);
  c.image.embed_dim = j.value("embed_dim", d.image.embed_dim);
  c.image.blocks = j.value("image_blocks", d.image.blocks);
  c.image.heads = j.value("image_heads", d.image.heads);
  c.image.pixel_mean = j.value("pixel_mean", d.image.pixel_mean);
  c.image.pixel_std = j.value("pixel_std", d.image.pixel_std);
  c.image.pool_identity_gain = j.value("pool_identity_gain", d.image.pool_identity_gain);
  c.backbone = j.value("backbone", d.backbone);
  c.text_width = j.value("text_width", d.text_width);
  c.text_blocks = j.value("text_blocks", d.text_blocks);
  c.text_heads = j.value("text_heads", d.text_heads);
  c.context_length = j.value("context_length", d.context_length);
  c.decoder_layers = j.value("decoder_layers", d.decoder_layers);
  c.decoder_heads = j.value("decoder_heads", d.decoder_heads);
  c.head_hidden = j.value("head_hidden", d.head_hidden);
  c.language = j.value("language", d.language);
  if (j.contains("prompt")) c.prompt = parse_prompt_mode(j.at("prompt").get<std::string>());
  if (j.contains("task")) c.task = parse_task_mode(j.at("task").get<std::string>());
  c.loss.temperature = j.value("temperature", d.loss.temperature);
  c.loss.aux_weight = j.value("aux_weight", d.loss.aux_weight);
  c.gamma_init = j.value("gamma_init", d.gamma_init);
  c.gamma_learnable = j.value("gamma_learnable", d.gamma_learnable);
  c.freeze_text = j.value("freeze_text", d.freeze_text);
  c.seed = j.value("seed", d.seed);
  return c;
}

// --- DecodeHead -------------------------------------------------------------

DecodeHead DecodeHead::init(Index in_channels, Index hidden, Index classes, Index h4, Index w4, Index factor, Rng& rng) {
  DecodeHead head;
  head.mix1 = LinearLayer::init(in_channels, hidden, rng);
  head.mix2 = LinearLayer::init(hidden, classes, rng);
  head.factor = factor;
  const Index height = h4 * factor;
  const Index width = w4 * factor;
  head.upsample_index.reserve(static_cast<std::size_t>(height * width));
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) head.upsample_index.push_back((y / factor) * w4 + x / factor);
  }
  return head;
}

Tensor DecodeHead::forward(const FeatureMap& fused) const {
  if (fused.channels() != mix1.in_dim()) {
    throw DimensionError("decode head expects " + std::to_string(mix1.in_dim()) + " channels, got " +
                         std::to_string(fused.channels()));
  }
  const Tensor cell_logits = mix2.forward(gelu(mix1.forward(fused.values)));
  return gather_rows(cell_logits, upsample_index);
}

void DecodeHead::collect(ParamList& out, const std::string& prefix) const {
  mix1.collect(out, prefix + ".mix1", ParamGroup::Other);
  mix2.collect(out, prefix + ".mix2", ParamGroup::Other);
}

// --- DensePredPipeline ------------------------------------------------------

DensePredPipeline::DensePredPipeline(PipelineConfig config, ClassTokenTable table)
    : config_(std::move(config)), table_(std::move(table)) {
  config_.validate();
  if (table_.class_count() != config_.classes) {
    throw ConfigError("class table lists " + std::to_string(table_.class_count()) + " classes, config expects " +
                      std::to_string(config_.classes));
  }
  const Index d = config_.embed_dim();
  const std::uint64_t seed = config_.seed;

  Rng image_rng(derive_seed(seed, "image_encoder"));
  encoder_ = make_backbone(config_.backbone, config_.image, image_rng);
  if (encoder_->out_dim() != d) {
    Rng rng(derive_seed(seed, "adapter"));
    adapter_ = LinearLayer::init(encoder_->out_dim(), d, rng);
  }

  if (config_.language) {
    if (static_cast<Index>(table_.template_tokens.size()) != config_.context_length) {
      throw ConfigError("template has " + std::to_string(table_.template_tokens.size()) +
                        " tokens, context length is " + std::to_string(config_.context_length));
    }
    TextEncoderConfig tc;
    tc.vocab_size = table_.vocab_size();
    tc.width = config_.text_width;
    tc.embed_dim = d;
    tc.blocks = config_.text_blocks;
    tc.heads = config_.text_heads;
    tc.max_length = config_.context_length + max_class_tokens(table_);
    Rng text_rng(derive_seed(seed, "text_encoder"));
    text_ = std::make_shared<ToyTextEncoder>(tc, text_rng);
    if (config_.freeze_text) text_->freeze();

    Tensor template_embedding;
    {
      NoGradScope no_grad;
      template_embedding = text_->embed_tokens(table_.template_tokens);
    }
    switch (config_.prompt) {
      case PromptMode::Template:
        break;
      case PromptMode::LanguageOnly:
        contexts_ = PromptContexts{Tensor(template_embedding.shape(), template_embedding.value(), true)};
        break;
      case PromptMode::PreModel: {
        queries_ = LearnableQueries{Tensor(template_embedding.shape(), template_embedding.value(), true)};
        Rng proj_rng(derive_seed(seed, "prompt_memory_projection"));
        memory_projection_ = LinearLayer::init(d, config_.text_width, proj_rng);
        Rng dec_rng(derive_seed(seed, "prompt_decoder"));
        prompt_decoder_ = TransformerDecoder::init(config_.decoder_layers, config_.text_width, config_.decoder_heads, dec_rng);
        break;
      }
      case PromptMode::PostModel: {
        contexts_ = PromptContexts{Tensor(template_embedding.shape(), template_embedding.value(), true)};
        Rng dec_rng(derive_seed(seed, "prompt_decoder"));
        prompt_decoder_ = TransformerDecoder::init(config_.decoder_layers, d, config_.decoder_heads, dec_rng);
        gate_ = ResidualGate::init(d, config_.gamma_init, config_.gamma_learnable);
        break;
      }
    }
  } else {
    Rng rng(derive_seed(seed, "class_scores"));
    class_scores_ = LinearLayer::init(d, config_.classes, rng);
  }

  Rng head_rng(derive_seed(seed, "head"));
  head_ = DecodeHead::init(d + config_.classes, config_.head_hidden, config_.classes, grid_height(), grid_width(),
                           config_.image.patch, head_rng);
}

EncodedImage DensePredPipeline::encode(const Tensor& image) const {
  EncodedImage enc = encoder_->encode(image);
  if (enc.features.h4 != grid_height() || enc.features.w4 != grid_width()) {
    throw ConfigError("encoder produced a " + std::to_string(enc.features.h4) + "x" + std::to_string(enc.features.w4) +
                      " grid, pipeline expects " + std::to_string(grid_height()) + "x" + std::to_string(grid_width()));
  }
  if (adapter_) {
    enc.features.values = adapter_->forward(enc.features.values);
    enc.pooled.global = adapter_->forward(enc.pooled.global);
    enc.pooled.dense = adapter_->forward(enc.pooled.dense);
  }
  return enc;
}

TextEmbeddings DensePredPipeline::base_text_embeddings() const {
  if (!config_.language) throw ContractError("pipeline has no text path");
  if (cache_) return {*cache_};
  switch (config_.prompt) {
    case PromptMode::Template: return template_embed(*text_, table_.template_tokens, table_.tokens);
    case PromptMode::LanguageOnly:
    case PromptMode::PostModel: return language_prompt(*contexts_, *text_, table_.tokens);
    case PromptMode::PreModel: break;
  }
  throw ContractError("pre-model text embeddings depend on the image");
}

TextEmbeddings DensePredPipeline::image_text_embeddings(const PooledFeatures& pooled, const TextEmbeddings* base) const {
  if (!config_.language) throw ContractError("pipeline has no text path");
  if (config_.prompt == PromptMode::PreModel) {
    return pre_model_prompt(*queries_, pooled, *memory_projection_, *prompt_decoder_, *text_, table_.tokens);
  }
  const TextEmbeddings t = base ? *base : base_text_embeddings();
  if (config_.prompt == PromptMode::PostModel) return post_model_prompt(t, pooled, *prompt_decoder_, *gate_);
  return t;
}

std::vector<int> DensePredPipeline::grid_labels(const PixelMask& mask) const {
  const Index f = config_.image.patch;
  const Index width = config_.image.image_width;
  std::vector<int> labels;
  labels.reserve(static_cast<std::size_t>(grid_height() * grid_width()));
  for (Index r = 0; r < grid_height(); ++r) {
    for (Index c = 0; c < grid_width(); ++c) {
      labels.push_back(mask.labels[static_cast<std::size_t>((r * f + f / 2) * width + c * f + f / 2)]);
    }
  }
  return labels;
}

PipelineOutput DensePredPipeline::forward(const Tensor& image, const PipelineTarget* target,
                                          const TextEmbeddings* base) const {
  if (target) {
    const bool seg = std::holds_alternative<PixelMask>(*target);
    if (seg != (config_.task == TaskMode::Segmentation)) {
      throw ContractError("target kind does not match task mode " + to_string(config_.task));
    }
  }
  const EncodedImage enc = encode(image);
  PipelineOutput out;
  out.loss = Tensor::scalar(0.0);
  out.main_loss = Tensor::scalar(0.0);
  out.aux_loss = Tensor::scalar(0.0);

  if (config_.language) {
    out.text = image_text_embeddings(enc.pooled, base);
    out.scores = compute_score_map(enc.pooled.dense, out.text, grid_height(), grid_width());
  }

  if (config_.task == TaskMode::DetectionAux) {
    if (target) {
      const auto& boxes = std::get<std::vector<BoxAnnotation>>(*target);
      const DetTarget y = rasterize_boxes(boxes, grid_height(), grid_width(), config_.classes);
      out.aux_loss = det_aux_loss(out.scores, y, config_.loss);
      out.loss = out.aux_loss;
    }
    return out;
  }

  const FeatureMap fused =
      config_.language
          ? fuse_features(enc.features, out.scores)
          : FeatureMap{enc.features.h4, enc.features.w4,
                       concat_cols<double>({enc.features.values, class_scores_->forward(enc.features.values)})};
  out.logits = head_.forward(fused);
  ++*head_forwards_;

  if (target) {
    const auto& mask = std::get<PixelMask>(*target);
    if (static_cast<Index>(mask.labels.size()) != out.logits->rows()) {
      throw DimensionError("mask has " + std::to_string(mask.labels.size()) + " pixels, logits " +
                           std::to_string(out.logits->rows()));
    }
    out.main_loss = cross_entropy(*out.logits, std::span<const int>(mask.labels));
    if (config_.language) {
      out.aux_loss = seg_aux_loss(out.scores, SegTarget{grid_labels(mask)}, config_.loss);
      out.loss = add(out.main_loss, scale(out.aux_loss, config_.loss.aux_weight));
    } else {
      out.loss = out.main_loss;
    }
  }
  return out;
}

Tensor DensePredPipeline::batch_loss(const std::vector<const Tensor*>& images,
                                     const std::vector<const PipelineTarget*>& targets) const {
  if (images.empty() || images.size() != targets.size()) throw DimensionError("batch needs matching images and targets");
  std::optional<TextEmbeddings> base;
  if (config_.language && config_.prompt != PromptMode::PreModel) base = base_text_embeddings();
  Tensor total;
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor loss = forward(*images[i], targets[i], base ? &*base : nullptr).loss;
    total = i == 0 ? loss : add(total, loss);
  }
  return scale(total, 1.0 / static_cast<double>(images.size()));
}

std::vector<int> DensePredPipeline::predict_segmentation(const Tensor& image) const {
  if (config_.task != TaskMode::Segmentation) throw ContractError("prediction needs segmentation mode");
  NoGradScope no_grad;
  const PipelineOutput out = forward(image, nullptr);
  const Matrix& logits = out.logits->value();
  std::vector<int> labels(static_cast<std::size_t>(logits.rows()));
  for (Index r = 0; r < logits.rows(); ++r) {
    int best = 0;
    for (Index k = 1; k < logits.cols(); ++k) {
      if (logits(r, k) > logits(r, best)) best = static_cast<int>(k);
    }
    labels[static_cast<std::size_t>(r)] = best;
  }
  return labels;
}

void DensePredPipeline::cache_text_embeddings() {
  if (!config_.language) throw ContractError("pipeline has no text path to cache");
  if (config_.prompt == PromptMode::PreModel) {
    throw ContractError("pre-model text embeddings depend on the image and cannot be cached");
  }
  cache_.reset();
  NoGradScope no_grad;
  cache_ = base_text_embeddings().t.detach();
}

TextEmbeddings DensePredPipeline::cached_text_embeddings() const {
  if (config_.language && config_.prompt == PromptMode::PreModel) {
    throw ContractError("pre-model text embeddings depend on the image and cannot be cached");
  }
  if (!cache_) throw ContractError("no cached text embeddings; call cache_text_embeddings() first");
  return {*cache_};
}

ParamList DensePredPipeline::parameters() const {
  ParamList out;
  encoder_->collect(out, "image_encoder");
  if (adapter_) adapter_->collect(out, "adapter", ParamGroup::Other);
  if (text_) text_->collect(out, "text_encoder");
  if (contexts_) out.push_back({"prompt.contexts", contexts_->p, ParamGroup::Other});
  if (queries_) out.push_back({"prompt.queries", queries_->q, ParamGroup::Other});
  if (memory_projection_) memory_projection_->collect(out, "prompt.memory_projection", ParamGroup::Other);
  if (prompt_decoder_) prompt_decoder_->collect(out, "prompt.decoder", ParamGroup::Other);
  if (gate_) out.push_back({"prompt.gamma", gate_->gamma, ParamGroup::Other});
  if (class_scores_) class_scores_->collect(out, "baseline.class_scores", ParamGroup::Other);
  if (config_.task == TaskMode::Segmentation) head_.collect(out, "head");
  return out;
}

ParamList DensePredPipeline::trainable_parameters() const {
  ParamList out;
  for (auto& p : parameters()) {
    if (p.tensor.requires_grad()) out.push_back(p);
  }
  return out;
}

void DensePredPipeline::reset_counters() const {
  *head_forwards_ = 0;
  if (text_) text_->reset_forward_count();
}

void DensePredPipeline::copy_values_from(const DensePredPipeline& other, bool include_image_encoder) {
  ParamList mine = parameters();
  ParamList theirs = other.parameters();
  auto is_image = [](const NamedParam& p) { return p.group == ParamGroup::ImageEncoder || p.name.rfind("adapter", 0) == 0; };
  std::size_t j = 0;
  for (auto& p : mine) {
    if (!include_image_encoder && is_image(p)) continue;
    while (j < theirs.size() && !include_image_encoder && is_image(theirs[j])) ++j;
    if (j >= theirs.size() || theirs[j].name != p.name || theirs[j].tensor.shape() != p.tensor.shape()) {
      throw ContractError("parameter layout mismatch at '" + p.name + "'");
    }
    p.tensor.mutable_value() = theirs[j].tensor.value();
    p.tensor.set_requires_grad(theirs[j].tensor.requires_grad());
    ++j;
  }
  cache_ = other.cache_;
}

DensePredPipeline DensePredPipeline::clone() const {
  DensePredPipeline copy(config_, table_);
  copy.copy_values_from(*this, true);
  if (text_) {
    if (text_->frozen()) copy.text_->freeze();
  }
  return copy;
}

DensePredPipeline swap_backbone(const DensePredPipeline& pipe, std::shared_ptr<ImageBackbone> encoder) {
  if (!encoder) throw ConfigError("swap_backbone: no encoder given");
  if (encoder->factor() != pipe.config_.image.patch) {
    throw ConfigError("swap_backbone: encoder downsamples by " + std::to_string(encoder->factor()) + ", pipeline expects " +
                      std::to_string(pipe.config_.image.patch));
  }
  const ImageEncoderConfig ec = encoder->config();
  if (ec.image_height != pipe.config_.image.image_height || ec.image_width != pipe.config_.image.image_width) {
    throw ConfigError("swap_backbone: encoder image size differs from the pipeline's");
  }
  PipelineConfig config = pipe.config_;
  config.backbone = encoder->kind();
  const Index d = config.embed_dim();
  config.image = ec;
  config.image.embed_dim = d;
  DensePredPipeline out(config, pipe.table_);
  out.copy_values_from(pipe, false);
  out.encoder_ = std::move(encoder);
  if (out.encoder_->out_dim() != d) {
    Rng rng(derive_seed(config.seed, "adapter"));
    out.adapter_ = LinearLayer::init(out.encoder_->out_dim(), d, rng);
  } else {
    out.adapter_.reset();
  }
  return out;
}

// --- checkpoints ------------------------------------------------------------

void DensePredPipeline::save(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "params");
  ordered_json manifest;
  manifest["format"] = "denseclip-checkpoint/1";
  manifest["config"] = to_json(config_);
  ordered_json classes = ordered_json::array();
  for (Index k = 0; k < table_.class_count(); ++k) {
    classes.push_back({{"name", table_.names[static_cast<std::size_t>(k)]},
                       {"tokens", table_.tokens[static_cast<std::size_t>(k)]}});
  }
  manifest["classes"] = classes;
  manifest["template_tokens"] = table_.template_tokens;
  ordered_json components = ordered_json::array();
  components.push_back(encoder_->kind());
  if (adapter_) components.push_back("adapter");
  if (text_) components.push_back("text_encoder");
  if (config_.language) components.push_back("prompt:" + to_string(config_.prompt));
  if (class_scores_) components.push_back("class_scores");
  if (config_.task == TaskMode::Segmentation) components.push_back("decode_head");
  manifest["components"] = components;
  ordered_json params = ordered_json::array();
  for (const auto& p : parameters()) {
    const std::string file = "params/" + p.name + ".dct1";
    dct1::save(dir / file, p.tensor);
    params.push_back({{"name", p.name},
                      {"file", file},
                      {"shape", p.tensor.shape()},
                      {"group", denseclip::to_string(p.group)},
                      {"trainable", p.tensor.requires_grad()}});
  }
  manifest["params"] = params;
  if (cache_) {
    dct1::save(dir / "text_cache.dct1", *cache_);
    manifest["text_cache"] = "text_cache.dct1";
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
}

DensePredPipeline DensePredPipeline::load(const std::filesystem::path& dir) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
  const json manifest = json::parse(in);
  const PipelineConfig config = pipeline_config_from_json(manifest.at("config"));
  ClassTokenTable table;
  for (const auto& c : manifest.at("classes")) {
    table.names.push_back(c.at("name").get<std::string>());
    table.tokens.push_back(c.at("tokens").get<std::vector<int>>());
  }
  table.template_tokens = manifest.at("template_tokens").get<std::vector<int>>();
  DensePredPipeline pipe(config, table);
  ParamList params = pipe.parameters();
  const auto& entries = manifest.at("params");
  if (entries.size() != params.size()) throw ContractError("checkpoint parameter count does not match configuration");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = entries[i];
    if (e.at("name").get<std::string>() != params[i].name) {
      throw ContractError("checkpoint parameter '" + e.at("name").get<std::string>() + "' where '" + params[i].name +
                          "' was expected");
    }
    const Tensor loaded = dct1::load(dir / e.at("file").get<std::string>());
    if (loaded.shape() != params[i].tensor.shape()) throw DimensionError("checkpoint shape mismatch at " + params[i].name);
    params[i].tensor.mutable_value() = loaded.value();
    params[i].tensor.set_requires_grad(e.value("trainable", params[i].tensor.requires_grad()));
  }
  if (manifest.contains("text_cache")) pipe.cache_ = dct1::load(dir / manifest.at("text_cache").get<std::string>());
  return pipe;
}

// --- free functions ---------------------------------------------------------

PipelineOutput forward(const DensePredPipeline& pipe, const Tensor& image, const PipelineTarget& target) {
  return pipe.forward(image, &target);
}

std::vector<int> predict_segmentation(const DensePredPipeline& pipe, const Tensor& image) {
  return pipe.predict_segmentation(image);
}

TextEmbeddings cached_text_embeddings(const DensePredPipeline& pipe) { return pipe.cached_text_embeddings(); }

void export_prediction_json(const std::vector<int>& labels, Index height, Index width, const std::filesystem::path& path) {
  ordered_json j;
  j["height"] = height;
  j["width"] = width;
  j["labels"] = labels;
  std::ofstream out(path);
  out << j.dump() << '\n';
}

void export_prediction_pgm(const std::vector<int>& labels, Index height, Index width, Index classes,
                           const std::filesystem::path& path) {
  std::ofstream out(path);
  out << "P2\n" << width << ' ' << height << '\n' << std::max<Index>(1, classes - 1) << '\n';
  for (Index y = 0; y < height; ++y) {
    for (Index x = 0; x < width; ++x) out << (x ? " " : "") << labels[static_cast<std::size_t>(y * width + x)];
    out << '\n';
  }
}

}  // namespace denseclip
