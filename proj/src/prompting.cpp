#include "denseclip/prompting.hpp"

namespace denseclip {

PromptMode parse_prompt_mode(const std::string& s) {
  if (s == "template") return PromptMode::Template;
  if (s == "coop") return PromptMode::LanguageOnly;
  if (s == "pre") return PromptMode::PreModel;
  if (s == "post") return PromptMode::PostModel;
  throw ConfigError("unknown prompt mode '" + s + "' (expected template|coop|pre|post)");
}

std::string to_string(PromptMode mode) {
  switch (mode) {
    case PromptMode::Template: return "template";
    case PromptMode::LanguageOnly: return "coop";
    case PromptMode::PreModel: return "pre";
    case PromptMode::PostModel: return "post";
  }
  return "coop";
}

ResidualGate ResidualGate::init(Index dim, double value, bool learnable) {
  return {Tensor::constant({dim}, value, learnable)};
}

TextEmbeddings template_embed(const ToyTextEncoder& encoder, const std::vector<int>& template_tokens,
                              const std::vector<std::vector<int>>& class_tokens) {
  const Tensor contexts = encoder.embed_tokens(template_tokens);
  return encoder.encode_text(contexts, class_tokens);
}

TextEmbeddings language_prompt(const PromptContexts& contexts, const ToyTextEncoder& encoder,
                               const std::vector<std::vector<int>>& class_tokens) {
  return encoder.encode_text(contexts.p, class_tokens);
}

Tensor visual_memory(const PooledFeatures& pooled) { return concat_rows<double>({pooled.global, pooled.dense}); }

TextEmbeddings pre_model_prompt(const LearnableQueries& queries, const PooledFeatures& pooled,
                                const LinearLayer& memory_projection, const TransformerDecoder& decoder,
                                const ToyTextEncoder& encoder, const std::vector<std::vector<int>>& class_tokens) {
  if (queries.q.cols() != encoder.width()) {
    throw DimensionError("pre-model queries have width " + std::to_string(queries.q.cols()) + ", text width is " +
                         std::to_string(encoder.width()));
  }
  const Tensor memory = memory_projection.forward(visual_memory(pooled));
  const Tensor v_pre = decoder.forward(queries.q, memory);
  return encoder.encode_text(v_pre, class_tokens);
}

TextEmbeddings post_model_prompt(const TextEmbeddings& t, const PooledFeatures& pooled,
                                 const TransformerDecoder& decoder, const ResidualGate& gate) {
  if (gate.gamma.size() != t.t.cols()) {
    throw DimensionError("gate of size " + std::to_string(gate.gamma.size()) + " for embeddings " +
                         to_string(t.t.shape()));
  }
  const Tensor v_post = decoder.forward(t.t, visual_memory(pooled));
  return {add(t.t, mul_rowwise(v_post, gate.gamma))};
}

}  // namespace denseclip
