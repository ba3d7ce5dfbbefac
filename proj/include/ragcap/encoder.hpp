#pragma once

// Image encoder: patch embedding, a small transformer over patches, and a
// learnable-query block whose pooled, projected output is the condition /
// retrieval embedding z.

#include <cstdint>
#include <memory>
#include <string>

#include "ragcap/ag/layers.hpp"

namespace ragcap::encoder {


struct EncoderConfig {
  int image_size = 32;
  int channels = 3;
  int patch = 4;
  int d_model = 128;
  int d_emb = 64;
  int heads = 4;
  int blocks = 2;
  int n_queries = 8;
  int mlp_ratio = 4;

  int num_patches() const { return (image_size / patch) * (image_size / patch); }
  bool operator==(const EncoderConfig&) const = default;
};

template <typename T>
struct BasicEncoderOutput {
  int batch = 0;
  ag::Var<T> patch_features;  // [B * num_patches, d_model]
  ag::Var<T> query_tokens;    // [B * n_queries, d_model]
  ag::Var<T> z;               // [B, d_emb], unit rows
};

template <typename T>
class BasicImageEncoder {
 public:
  using Tensor = ag::Var<T>;

  BasicImageEncoder(const EncoderConfig& config, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }

  /// images [B, channels, image_size, image_size] with values in [-1, 1].
  BasicEncoderOutput<T> encode(const Tensor& images) const;

  ag::ParamList<T> params() const;
  /// Deep copy with independent parameter storage.
  BasicImageEncoder clone() const;
  /// SHA-256 of the float32 parameter archive.
  std::string hash() const;

 private:
  EncoderConfig config_;
  ag::Linear<T> patch_embed_;
  Tensor pos_;
  std::vector<ag::TransformerBlock<T>> blocks_;
  ag::LayerNorm<T> ln_out_;
  ag::QueryBlock<T> queries_;
  ag::Linear<T> project_;
};

using ImageEncoder = BasicImageEncoder<float>;
using EncoderOutput = BasicEncoderOutput<float>;
using Tensor = ag::Var<float>;

/// Frozen copy of an encoder plus the SHA-256 of its parameter archive.
class EncoderSnapshot {
 public:
  explicit EncoderSnapshot(const ImageEncoder& source);

  const ImageEncoder& encoder() const { return encoder_; }
  const std::string& hash() const { return hash_; }
  /// Recomputes the hash from the current parameters.
  bool intact() const;

 private:
  ImageEncoder encoder_;
  std::string hash_;
};

/// Encodes a stack of images in fixed-size chunks without recording a graph.
/// Returns z rows [N, d_emb].
std::vector<float> embed_images(const ImageEncoder& encoder, const std::vector<float>& images,
                                int count, int chunk = 64);

}  // namespace ragcap::encoder
