#include "ragcap/warmup.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include "ragcap/ag/archive.hpp"
#include "ragcap/ag/optim.hpp"

namespace ragcap::encoder {

CaptionTower::CaptionTower(std::vector<std::string> lemmas, int hidden, int d_emb, std::uint64_t seed)
    : lemmas_(std::move(lemmas)), hidden_(hidden), d_emb_(d_emb) {
  if (lemmas_.empty()) throw std::invalid_argument("caption tower needs a non-empty lemma vocabulary");
  for (std::size_t i = 0; i < lemmas_.size(); ++i) index_[lemmas_[i]] = static_cast<int>(i);
  ag::Initializer init(seed);
  // Inputs are L1-normalised bags, so the first layer gets a larger gain.
  fc1_ = ag::Linear<float>(static_cast<int>(lemmas_.size()), hidden, init, true,
                           std::sqrt(static_cast<double>(lemmas_.size())) / 2.0);
  fc2_ = ag::Linear<float>(hidden, d_emb, init, false);
}

std::vector<std::string> CaptionTower::collect_lemmas(const std::vector<std::string>& captions,
                                                      const attr::Tagger& tagger) {
  std::set<std::string> seen;
  for (const auto& c : captions)
    for (const auto& tok : attr::tokenize(c)) seen.insert(tagger.lemmatize(tok));
  return {seen.begin(), seen.end()};
}

ag::Var<float> CaptionTower::featurize(const std::vector<std::string>& texts, const attr::Tagger& tagger) const {
  const int v = static_cast<int>(lemmas_.size());
  std::vector<float> bags(texts.size() * static_cast<std::size_t>(v), 0.0f);
  for (std::size_t r = 0; r < texts.size(); ++r) {
    float* row = bags.data() + r * static_cast<std::size_t>(v);
    int hits = 0;
    for (const auto& tok : attr::tokenize(texts[r])) {
      auto it = index_.find(tagger.lemmatize(tok));
      if (it == index_.end()) continue;
      row[it->second] += 1.0f;
      ++hits;
    }
    if (hits > 0)
      for (int j = 0; j < v; ++j) row[j] /= static_cast<float>(hits);
  }
  return ag::Var<float>::from({static_cast<int>(texts.size()), v}, std::move(bags));
}

ag::Var<float> CaptionTower::embed(const ag::Var<float>& bags) const {
  return ag::l2_normalize_rows(fc2_(ag::gelu(fc1_(bags))));
}

std::vector<float> CaptionTower::embed_texts(const std::vector<std::string>& texts, const attr::Tagger& tagger) const {
  ag::NoGradGuard no_grad;
  const auto e = embed(featurize(texts, tagger));
  return {e.value().begin(), e.value().end()};
}

ag::ParamList<float> CaptionTower::params() const {
  ag::ParamList<float> out;
  fc1_.collect(out, "tower.fc1");
  fc2_.collect(out, "tower.fc2");
  return out;
}

void CaptionTower::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  std::ofstream meta(dir / "tower.txt");
  meta << hidden_ << ' ' << d_emb_ << '\n';
  for (const auto& l : lemmas_) meta << l << '\n';
  ag::save_params(dir / "tower.bin", params());
}

CaptionTower CaptionTower::load(const std::filesystem::path& dir) {
  std::ifstream meta(dir / "tower.txt");
  if (!meta) throw std::runtime_error("caption tower metadata not found in " + dir.string());
  int hidden = 0, d_emb = 0;
  meta >> hidden >> d_emb;
  std::vector<std::string> lemmas;
  std::string line;
  std::getline(meta, line);
  while (std::getline(meta, line))
    if (!line.empty()) lemmas.push_back(line);
  CaptionTower tower(std::move(lemmas), hidden, d_emb, 0);
  ag::load_params(dir / "tower.bin", tower.params());
  return tower;
}

WarmupResult contrastive_warmup(ImageEncoder& encoder, const std::vector<corpus::CorpusSample>& train,
                                const attr::Tagger& tagger, const WarmupOptions& options) {
  if (train.empty()) throw WarmupError("contrastive warm-up needs a non-empty train split");
  std::vector<std::string> all_captions;
  for (const auto& s : train) all_captions.insert(all_captions.end(), s.captions.begin(), s.captions.end());

  WarmupResult result;
  result.tower = CaptionTower(CaptionTower::collect_lemmas(all_captions, tagger), options.tower_hidden,
                              encoder.config().d_emb, options.seed ^ 0x7011e5ULL);
  if (options.epochs <= 0) return result;

  auto params = encoder.params();
  const auto tower_params = result.tower.params();
  params.insert(params.end(), tower_params.begin(), tower_params.end());
  ag::AdamW opt(params, {});

  const int n = static_cast<int>(train.size());
  const int batch = std::min(options.batch, n);
  const int steps_per_epoch = n / batch;
  const long total_steps = static_cast<long>(steps_per_epoch) * options.epochs;
  const std::size_t per = train.front().image.size();
  const auto& ec = encoder.config();
  std::mt19937_64 rng(options.seed);
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  const float inv_t = static_cast<float>(1.0 / options.temperature);
  long step = 0;

  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double sum = 0.0;
    for (int s = 0; s < steps_per_epoch; ++s) {
      std::vector<float> images;
      images.reserve(per * static_cast<std::size_t>(batch));
      std::vector<std::string> texts;
      std::uniform_int_distribution<int> pick(0, corpus::kCaptionsPerImage - 1);
      for (int b = 0; b < batch; ++b) {
        const auto& smp = train[static_cast<std::size_t>(order[static_cast<std::size_t>(s * batch + b)])];
        images.insert(images.end(), smp.image.begin(), smp.image.end());
        texts.push_back(smp.captions[static_cast<std::size_t>(pick(rng))]);
      }
      auto x = ag::Var<float>::from({batch, ec.channels, ec.image_size, ec.image_size}, std::move(images));
      const auto zi = encoder.encode(x).z;
      const auto zt = result.tower.embed(result.tower.featurize(texts, tagger));
      const auto logits = ag::scale(ag::matmul(zi, ag::transpose(zt)), inv_t);
      std::vector<int> diag(static_cast<std::size_t>(batch));
      std::iota(diag.begin(), diag.end(), 0);
      auto loss = ag::scale(ag::add(ag::cross_entropy(logits, diag, -1),
                                    ag::cross_entropy(ag::transpose(logits), diag, -1)),
                            0.5f);
      const double lv = loss.item();
      if (!std::isfinite(lv)) {
        throw WarmupError("contrastive warm-up diverged: loss " + std::to_string(lv) + " at epoch " +
                          std::to_string(epoch) + ", step " + std::to_string(s) + ", grad norm " +
                          std::to_string(opt.last_grad_norm()));
      }
      loss.backward();
      opt.step(ag::cosine_lr(options.lr, step++, total_steps, std::min<long>(50, total_steps / 10)));
      sum += lv;
    }
    result.epoch_losses.push_back(sum / std::max(1, steps_per_epoch));
    if (options.on_epoch) options.on_epoch(epoch, result.epoch_losses.back());
  }
  return result;
}

double self_retrieval_top1(const std::vector<float>& embeddings, int count, int d_emb) {
  if (count <= 0) return 0.0;
  int correct = 0;
  for (int i = 0; i < count; ++i) {
    const float* qi = embeddings.data() + static_cast<std::size_t>(i) * d_emb;
    int best = -1;
    double best_sim = -1e300;
    for (int j = 0; j < count; ++j) {
      const float* kj = embeddings.data() + static_cast<std::size_t>(j) * d_emb;
      double dot = 0.0;
      for (int d = 0; d < d_emb; ++d) dot += static_cast<double>(qi[d]) * kj[d];
      if (dot > best_sim) {
        best_sim = dot;
        best = j;
      }
    }
    if (best == i) ++correct;
  }
  return static_cast<double>(correct) / count;
}

}  // namespace ragcap::encoder
