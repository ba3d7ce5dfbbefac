#pragma once

// Contrastive warm-up of the image encoder against a bag-of-lemmas caption
// tower (symmetric InfoNCE), producing the frozen key-encoder snapshot.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "ragcap/attributes.hpp"
#include "ragcap/corpus.hpp"
#include "ragcap/encoder.hpp"

namespace ragcap::encoder {

/// Caption embedding tower: normalised lemma counts -> MLP -> unit vector.
class CaptionTower {
 public:
  CaptionTower() = default;
  CaptionTower(std::vector<std::string> lemmas, int hidden, int d_emb, std::uint64_t seed);

  /// Lemma vocabulary collected from the given captions (sorted, unique).
  static std::vector<std::string> collect_lemmas(const std::vector<std::string>& captions, const attr::Tagger& tagger);

  const std::vector<std::string>& lemmas() const { return lemmas_; }
  int d_emb() const { return d_emb_; }
  int hidden() const { return hidden_; }

  /// Bag-of-lemmas rows [N, |lemmas|], each row L1-normalised (zero row if no known lemma).
  ag::Var<float> featurize(const std::vector<std::string>& texts, const attr::Tagger& tagger) const;
  /// Unit-norm embeddings [N, d_emb].
  ag::Var<float> embed(const ag::Var<float>& bags) const;
  std::vector<float> embed_texts(const std::vector<std::string>& texts, const attr::Tagger& tagger) const;

  ag::ParamList<float> params() const;

  void save(const std::filesystem::path& dir) const;
  static CaptionTower load(const std::filesystem::path& dir);

 private:
  std::vector<std::string> lemmas_;
  std::map<std::string, int> index_;
  int hidden_ = 0;
  int d_emb_ = 0;
  ag::Linear<float> fc1_, fc2_;
};

struct WarmupOptions {
  int epochs = 24;
  int batch = 64;
  double lr = 1e-3;
  double temperature = 0.1;
  int tower_hidden = 128;
  std::uint64_t seed = 0;
  /// Called after every epoch with (epoch, mean loss).
  std::function<void(int, double)> on_epoch;
};

struct WarmupResult {
  std::vector<double> epoch_losses;
  CaptionTower tower;
};

class WarmupError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Trains `encoder` in place. With zero epochs the encoder is untouched and
/// the tower keeps its random initialisation.
WarmupResult contrastive_warmup(ImageEncoder& encoder, const std::vector<corpus::CorpusSample>& train,
                                const attr::Tagger& tagger, const WarmupOptions& options);

/// Fraction of images whose nearest neighbour (cosine, ties by index) among
/// the same set is the image itself.
double self_retrieval_top1(const std::vector<float>& embeddings, int count, int d_emb);

}  // namespace ragcap::encoder
