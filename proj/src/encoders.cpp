#include "denseclip/encoders.hpp"

#include <cmath>
#include <fstream>

#include "json.hpp"

namespace denseclip {

PooledFeatures attention_pool(const MhsaLayer& pool, const FeatureMap& x4) {
  const Tensor& x = x4.values;
  if (x.rows() != x4.positions() || x.rows() < 1) {
    throw DimensionError("feature map with " + std::to_string(x.rows()) + " rows does not match grid " +
                         std::to_string(x4.h4) + "x" + std::to_string(x4.w4));
  }
  const Tensor seq = concat_rows<double>({mean_rows(x), x});
  const Tensor out = pool.forward(seq);
  return {slice_rows(out, 0, 1), slice_rows(out, 1, x.rows())};
}

std::vector<Index> patch_gather_index(Index height, Index width, Index patch) {
  const Index h4 = height / patch;
  const Index w4 = width / patch;
  std::vector<Index> index;
  index.reserve(static_cast<std::size_t>(height * width * 3));
  for (Index r = 0; r < h4; ++r) {
    for (Index c = 0; c < w4; ++c) {
      for (Index dy = 0; dy < patch; ++dy) {
        for (Index dx = 0; dx < patch; ++dx) {
          const Index y = r * patch + dy;
          const Index x = c * patch + dx;
          for (Index ch = 0; ch < 3; ++ch) index.push_back((y * width + x) * 3 + ch);
        }
      }
    }
  }
  return index;
}

namespace {

void validate_geometry(const ImageEncoderConfig& config) {
  if (!(config.pixel_std > 0)) throw ConfigError("pixel std must be positive");
  if (config.patch <= 0 || config.image_height % config.patch != 0 || config.image_width % config.patch != 0) {
    throw ConfigError("image " + std::to_string(config.image_height) + "x" + std::to_string(config.image_width) +
                      " is not divisible by patch factor " + std::to_string(config.patch));
  }
}

Tensor patchify(const ImageEncoderConfig& config, const std::vector<Index>& index, const Tensor& image) {
  const Shape& s = image.shape();
  if (s.size() != 3 || s[2] != 3) throw DimensionError("expected an H x W x 3 image, got " + to_string(s));
  if (s[0] % config.patch != 0 || s[1] % config.patch != 0) {
    throw ConfigError("image " + to_string(s) + " is not divisible by patch factor " + std::to_string(config.patch));
  }
  if (s[0] != config.image_height || s[1] != config.image_width) {
    throw DimensionError("encoder built for " + std::to_string(config.image_height) + "x" +
                         std::to_string(config.image_width) + " images, got " + to_string(s));
  }
  const Index p = config.patch;
  const Index rows = (s[0] / p) * (s[1] / p);
  const Tensor patches = take(image, index, {rows, p * p * 3});
  const Tensor offset = Tensor::constant({p * p * 3}, -config.pixel_mean / config.pixel_std);
  return add_rowwise(scale(patches, 1.0 / config.pixel_std), offset);
}

}  // namespace

// --- ToyImageEncoder --------------------------------------------------------

ToyImageEncoder::ToyImageEncoder(const ImageEncoderConfig& config, Rng& rng) : config_(config) {
  validate_geometry(config_);
  patch_index_ = patch_gather_index(config_.image_height, config_.image_width, config_.patch);
  patch_embed_ = LinearLayer::init(config_.patch * config_.patch * 3, config_.width, rng);
  for (Index i = 0; i < config_.blocks; ++i) {
    blocks_.push_back(EncoderBlock::init(config_.width, config_.heads, 2 * config_.width, rng));
  }
  pool_ = MhsaLayer::init(config_.width, config_.heads, rng);
  // self-peaked start so the dense outputs keep the spatial layout
  pool_.query.weight.mutable_value().diagonal().array() += config_.pool_identity_gain;
  pool_.key.weight.mutable_value().diagonal().array() += config_.pool_identity_gain;
  projection_ = LinearLayer::init(config_.width, config_.embed_dim, rng);
}

EncodedImage ToyImageEncoder::encode(const Tensor& image) const {
  Tensor x = patch_embed_.forward(patchify(config_, patch_index_, image));
  for (const auto& block : blocks_) x = block.forward(x);
  const Index h4 = config_.image_height / config_.patch;
  const Index w4 = config_.image_width / config_.patch;
  const PooledFeatures pooled = attention_pool(pool_, FeatureMap{h4, w4, x});
  return {FeatureMap{h4, w4, projection_.forward(x)},
          PooledFeatures{projection_.forward(pooled.global), projection_.forward(pooled.dense)}};
}

void ToyImageEncoder::collect(ParamList& out, const std::string& prefix) const {
  patch_embed_.collect(out, prefix + ".patch_embed", ParamGroup::ImageEncoder);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect(out, prefix + ".blocks." + std::to_string(i), ParamGroup::ImageEncoder);
  }
  pool_.collect(out, prefix + ".pool", ParamGroup::ImageEncoder);
  projection_.collect(out, prefix + ".projection", ParamGroup::ImageEncoder);
}

// --- PatchMlpBackbone -------------------------------------------------------

PatchMlpBackbone::PatchMlpBackbone(const ImageEncoderConfig& config, Rng& rng) : config_(config) {
  validate_geometry(config_);
  patch_index_ = patch_gather_index(config_.image_height, config_.image_width, config_.patch);
  patch_embed_ = LinearLayer::init(config_.patch * config_.patch * 3, config_.width, rng);
  for (Index i = 0; i < config_.blocks; ++i) {
    norms_.push_back(LayerNormParams::init(config_.width));
    blocks_.push_back(FeedForward::init(config_.width, 2 * config_.width, rng));
  }
}

EncodedImage PatchMlpBackbone::encode(const Tensor& image) const {
  Tensor x = patch_embed_.forward(patchify(config_, patch_index_, image));
  for (std::size_t i = 0; i < blocks_.size(); ++i) x = add(x, blocks_[i].forward(norms_[i].forward(x)));
  const Index h4 = config_.image_height / config_.patch;
  const Index w4 = config_.image_width / config_.patch;
  return {FeatureMap{h4, w4, x}, PooledFeatures{mean_rows(x), x}};
}

void PatchMlpBackbone::collect(ParamList& out, const std::string& prefix) const {
  patch_embed_.collect(out, prefix + ".patch_embed", ParamGroup::ImageEncoder);
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    norms_[i].collect(out, prefix + ".norms." + std::to_string(i), ParamGroup::ImageEncoder);
    blocks_[i].collect(out, prefix + ".blocks." + std::to_string(i), ParamGroup::ImageEncoder);
  }
}

std::unique_ptr<ImageBackbone> make_backbone(const std::string& kind, const ImageEncoderConfig& config, Rng& rng) {
  if (kind == "toy_vit") return std::make_unique<ToyImageEncoder>(config, rng);
  if (kind == "patch_mlp") return std::make_unique<PatchMlpBackbone>(config, rng);
  throw ConfigError("unknown backbone kind '" + kind + "'");
}

EncodedImage encode_image(const ImageBackbone& encoder, const Tensor& image) { return encoder.encode(image); }

// --- ClassTokenTable --------------------------------------------------------

Index ClassTokenTable::vocab_size() const {
  int top = -1;
  for (int id : template_tokens) top = std::max(top, id);
  for (const auto& ids : tokens) {
    for (int id : ids) top = std::max(top, id);
  }
  return top + 1;
}

ClassTokenTable ClassTokenTable::synthetic(Index classes, Index template_length) {
  ClassTokenTable table;
  for (Index i = 0; i < template_length; ++i) table.template_tokens.push_back(static_cast<int>(i));
  int next = static_cast<int>(template_length);
  for (Index k = 0; k < classes; ++k) next += static_cast<int>(1 + k % 3);
  const int end_of_text = next;
  next = static_cast<int>(template_length);
  for (Index k = 0; k < classes; ++k) {
    table.names.push_back(k == 0 ? "background" : "class" + std::to_string(k));
    std::vector<int> ids;
    for (Index j = 0; j < 1 + k % 3; ++j) ids.push_back(next++);
    ids.push_back(end_of_text);
    table.tokens.push_back(std::move(ids));
  }
  return table;
}

ClassTokenTable ClassTokenTable::load(const std::filesystem::path& path, Index template_length) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  const auto j = nlohmann::ordered_json::parse(in);
  ClassTokenTable table;
  for (Index i = 0; i < template_length; ++i) table.template_tokens.push_back(static_cast<int>(i));
  for (const auto& [name, ids] : j.items()) {
    table.names.push_back(name);
    table.tokens.push_back(ids.get<std::vector<int>>());
    if (table.tokens.back().empty()) throw ValidationError("class '" + name + "' has no tokens");
  }
  return table;
}

void ClassTokenTable::save(const std::filesystem::path& path) const {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (std::size_t k = 0; k < names.size(); ++k) j[names[k]] = tokens[k];
  std::ofstream out(path);
  out << j.dump(2) << '\n';
}

// --- ToyTextEncoder ---------------------------------------------------------

ToyTextEncoder::ToyTextEncoder(const TextEncoderConfig& config, Rng& rng) : config_(config) {
  if (config_.vocab_size < 1 || config_.max_length < 1) throw ConfigError("text encoder needs a vocabulary and length");
  token_embedding_ = normal_tensor({config_.vocab_size, config_.width}, 1.0, rng, true);
  position_embedding_ = normal_tensor({config_.max_length, config_.width}, 0.1, rng, true);
  for (Index i = 0; i < config_.blocks; ++i) {
    blocks_.push_back(EncoderBlock::init(config_.width, config_.heads, 2 * config_.width, rng));
  }
  final_norm_ = LayerNormParams::init(config_.width);
  projection_ = LinearLayer::init(config_.width, config_.embed_dim, rng);
}

Tensor ToyTextEncoder::embed_tokens(std::span<const int> ids) const {
  std::vector<Index> rows;
  rows.reserve(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= config_.vocab_size) {
      throw VocabularyError("token id " + std::to_string(id) + " outside vocabulary of " +
                            std::to_string(config_.vocab_size));
    }
    rows.push_back(id);
  }
  return gather_rows(token_embedding_, rows);
}

Tensor ToyTextEncoder::encode_sequence(const Tensor& contexts, std::span<const int> class_tokens) const {
  if (class_tokens.empty()) throw ValidationError("class has no tokens");
  if (contexts.rows() > 0 && contexts.cols() != config_.width) {
    throw DimensionError("context width " + std::to_string(contexts.cols()) + " differs from text width " +
                         std::to_string(config_.width));
  }
  const Tensor names = embed_tokens(class_tokens);
  const Tensor tokens = contexts.rows() > 0 ? concat_rows<double>({contexts, names}) : names;
  const Index length = tokens.rows();
  if (length > config_.max_length) {
    throw ConfigError("sequence of " + std::to_string(length) + " tokens exceeds max length " +
                      std::to_string(config_.max_length));
  }
  Tensor x = add(tokens, slice_rows(position_embedding_, 0, length));
  for (const auto& block : blocks_) x = block.forward(x);
  counter_->fetch_add(1);
  return projection_.forward(final_norm_.forward(slice_rows(x, length - 1, 1)));
}

TextEmbeddings ToyTextEncoder::encode_text(const Tensor& contexts, const std::vector<std::vector<int>>& class_tokens) const {
  if (class_tokens.empty()) throw ValidationError("no classes to encode");
  std::vector<Tensor> rows;
  rows.reserve(class_tokens.size());
  for (const auto& ids : class_tokens) rows.push_back(encode_sequence(contexts, ids));
  return {concat_rows<double>(std::span<const Tensor>(rows))};
}

TextEmbeddings ToyTextEncoder::encode_text(const std::vector<std::vector<int>>& class_tokens) const {
  return encode_text(Tensor::zeros({0, config_.width}), class_tokens);
}

void ToyTextEncoder::freeze() {
  ParamList params;
  collect(params, "text");
  set_trainable(params, false);
  frozen_ = true;
}

void ToyTextEncoder::unfreeze() {
  ParamList params;
  collect(params, "text");
  set_trainable(params, true);
  frozen_ = false;
}

void ToyTextEncoder::collect(ParamList& out, const std::string& prefix) const {
  out.push_back({prefix + ".token_embedding", token_embedding_, ParamGroup::TextEncoder});
  out.push_back({prefix + ".position_embedding", position_embedding_, ParamGroup::TextEncoder});
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    blocks_[i].collect(out, prefix + ".blocks." + std::to_string(i), ParamGroup::TextEncoder);
  }
  final_norm_.collect(out, prefix + ".final_norm", ParamGroup::TextEncoder);
  projection_.collect(out, prefix + ".projection", ParamGroup::TextEncoder);
}

void freeze(ToyTextEncoder& encoder) { encoder.freeze(); }

}  // namespace denseclip
