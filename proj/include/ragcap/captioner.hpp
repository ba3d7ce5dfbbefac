#pragma once

// Prompt encoder, Text Q-Former fusion and the prefix-conditioned caption
// decoder, plus caption loss and greedy / beam decoding.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "ragcap/ag/layers.hpp"

namespace ragcap::captioner {

class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Token <-> id map. Ids 0..3 are the specials <pad>, <bos>, <eos>, <unk>.
class Vocab {
 public:
  static constexpr int kPad = 0, kBos = 1, kEos = 2, kUnk = 3;

  Vocab();
  /// Specials plus every token of `texts`, in sorted order.
  static Vocab build(const std::vector<std::string>& texts);
  /// One token per line; line number is the id; the first four lines are the specials.
  static Vocab load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  int size() const { return static_cast<int>(tokens_.size()); }
  int id(const std::string& token) const;
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  /// Tokenised ids of `text` (OOV -> <unk>), without BOS/EOS.
  std::vector<int> encode(const std::string& text) const;
  /// Joins tokens up to the first EOS, skipping specials.
  std::string decode(const std::vector<int>& ids) const;

  bool operator==(const Vocab& other) const { return tokens_ == other.tokens_; }

 private:
  void add(const std::string& token);
  std::vector<std::string> tokens_;
  std::map<std::string, int> ids_;
};

struct CaptionerConfig {
  int d_model = 128;
  int heads = 4;
  int mlp_ratio = 4;
  int n_image_queries = 8;  // rows of image context supplied by the encoder
  int n_text_queries = 4;
  int text_blocks = 1;
  int decoder_blocks = 2;
  int max_len = 24;         // decoder positions, BOS included
  int max_prompt_len = 32;  // prompt tokens, EOS included
  bool operator==(const CaptionerConfig&) const = default;
};

/// Batched prompt ids, right-padded with <pad>.
struct PromptBatch {
  int batch = 0;
  int length = 0;
  std::vector<int> ids;    // [batch * length]
  std::vector<int> valid;  // tokens before padding, per sample
};

struct FusedContext {
  int batch = 0;
  ag::Var<float> image_features;  // [B * n_q, D]
  ag::Var<float> fused_text;      // [B * n_t, D]
  ag::Var<float> concat;          // [B * (n_q + n_t), D]
};

struct DecodeOptions {
  int beam = 1;  // 1 = greedy
  /// Run the beam decoder even when beam == 1.
  bool beam_search = false;
};

class Captioner {
 public:
  Captioner(const CaptionerConfig& config, Vocab vocab, std::uint64_t seed);

  const CaptionerConfig& config() const { return config_; }
  const Vocab& vocab() const { return vocab_; }

  /// Prompt ids followed by EOS, truncated to max_prompt_len.
  PromptBatch tokenize_prompts(const std::vector<std::string>& prompts) const;
  /// Text token features [B * L, D].
  ag::Var<float> encode_prompt(const PromptBatch& prompts) const;
  /// n_t learnable queries over the masked text features: [B * n_t, D].
  ag::Var<float> text_qformer(const ag::Var<float>& text_features, const PromptBatch& prompts) const;

  /// image_query_tokens [B * n_q, D]. With `fuse_image`, the image rows are
  /// themselves passed through the Text Q-Former attention over the prompt.
  FusedContext fuse(const ag::Var<float>& image_query_tokens, const PromptBatch& prompts, bool fuse_image) const;

  /// input_ids [B * L] (each row starts with BOS) -> logits [B * L, V].
  ag::Var<float> decode_logits(const ag::Var<float>& context, int batch, const std::vector<int>& input_ids,
                               int length) const;

  /// Greedy or beam decoding; returns token ids (EOS excluded) per sample.
  std::vector<std::vector<int>> generate(const ag::Var<float>& context, int batch, const DecodeOptions& options) const;

  ag::ParamList<float> params() const;

 private:
  int context_len() const { return config_.n_image_queries + config_.n_text_queries; }
  std::vector<int> beam_search(const ag::Var<float>& context_rows, int beam) const;

  CaptionerConfig config_;
  Vocab vocab_;
  ag::Var<float> text_embed_, text_pos_;
  std::vector<ag::TransformerBlock<float>> text_blocks_;
  ag::LayerNorm<float> text_ln_;
  ag::QueryBlock<float> text_qformer_;
  ag::Var<float> token_embed_, dec_pos_, ctx_pos_;
  std::vector<ag::TransformerBlock<float>> dec_blocks_;
  ag::LayerNorm<float> dec_ln_;
  ag::Linear<float> head_;
};

/// Teacher-forcing pair for one caption: input = BOS + tokens, target =
/// tokens + EOS, both padded to `length` (tokens beyond it are truncated).
void make_teacher_forcing(const std::vector<int>& tokens, int length, std::vector<int>& input,
                          std::vector<int>& target);

/// Mean NLL over non-PAD target positions.
template <typename T>
ag::Var<T> caption_loss(const ag::Var<T>& logits, const std::vector<int>& targets);

}  // namespace ragcap::captioner
