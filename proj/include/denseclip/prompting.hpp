#pragma once

#include <string>
#include <vector>

#include "denseclip/encoders.hpp"

namespace denseclip {

// Where text embeddings come from.
//   Template      fixed template tokens as context
//   LanguageOnly  learnable contexts p (config string "coop")
//   PreModel      image-conditioned contexts from a decoder over visual tokens
//   PostModel     learnable contexts, then t += gamma * decoder(t, visual)
enum class PromptMode { Template, LanguageOnly, PreModel, PostModel };

PromptMode parse_prompt_mode(const std::string& s);
std::string to_string(PromptMode mode);

struct PromptContexts {
  Tensor p;  // [N x e]

  Index length() const { return p.rows(); }
};

struct LearnableQueries {
  Tensor q;  // [N x width of the decoder]
};

// Per-channel scale on the post-model residual.
struct ResidualGate {
  Tensor gamma;  // [d]

  static ResidualGate init(Index dim, double value, bool learnable);
};

// Fixed template context, e.g. the embedding of "a photo of a".
TextEmbeddings template_embed(const ToyTextEncoder& encoder, const std::vector<int>& template_tokens,
                              const std::vector<std::vector<int>>& class_tokens);

// Learnable contexts prepended to every class name.
TextEmbeddings language_prompt(const PromptContexts& contexts, const ToyTextEncoder& encoder,
                               const std::vector<std::vector<int>>& class_tokens);

// [z_bar; z] as one memory sequence.
Tensor visual_memory(const PooledFeatures& pooled);

// Visual contexts v_pre = decoder(q, proj([z_bar; z])) replace the contexts
// p one-for-one before the text encoder.
TextEmbeddings pre_model_prompt(const LearnableQueries& queries, const PooledFeatures& pooled,
                                const LinearLayer& memory_projection, const TransformerDecoder& decoder,
                                const ToyTextEncoder& encoder, const std::vector<std::vector<int>>& class_tokens);

// Returns t + gamma * decoder(t, [z_bar; z]) with gamma broadcast over classes.
TextEmbeddings post_model_prompt(const TextEmbeddings& t, const PooledFeatures& pooled,
                                 const TransformerDecoder& decoder, const ResidualGate& gate);

}  // namespace denseclip
