#pragma once

// Run configuration: one INI-style file, flat keys grouped in sections, with
// dotted-key overrides ("train.lambda=5") applied after the file.

#include <cstdint>
#include <filesystem>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "ragcap/captioner.hpp"
#include "ragcap/corpus.hpp"
#include "ragcap/diffusion.hpp"
#include "ragcap/encoder.hpp"

namespace ragcap::training {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Seeds {
  std::uint64_t corpus = 1;
  std::uint64_t init = 1;
  std::uint64_t data = 1;
};

struct CorpusSection {
  int train_size = 2000;
  int test_in_size = 200;
  int test_out_size = 200;
  int image_size = 32;
  int max_objects = 3;
};

struct WarmupSection {
  int epochs = 24;
  int batch = 64;
  double lr = 1e-3;
  double temperature = 0.1;
  int tower_hidden = 128;
};

struct DiffusionSection {
  int steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  int width = 32;
  int time_dim = 64;
  int pretrain_epochs = 10;
  int pretrain_batch = 32;
  double pretrain_lr = 1e-3;
  double condition_dropout = 0.1;
  std::string pretrain_condition = "caption";  // caption | none
};

struct RetrievalSection {
  int k = 8;
  int top_n = 3;
  double db_fraction = 1.0;
  std::string refresh = "per-step";  // per-step | per-epoch
};

struct CaptionerSection {
  int heads = 4;
  int mlp_ratio = 4;
  int n_text_queries = 4;
  int text_blocks = 1;
  int decoder_blocks = 2;
  int max_len = 24;
  int max_prompt_len = 32;
};

struct TrainSection {
  double lambda = 7.0;
  double lr = 3e-4;
  int batch = 32;
  int epochs = 20;
  int max_steps = 0;  // 0 = no cap
  int warmup_steps = 100;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  std::string keep_checkpoints = "all";  // all | last
  int eval_every = 0;                    // full metrics every n epochs; 0 = end only
  int eval_max_images = 0;               // per split; 0 = whole split
  int beam = 1;
  bool trace_params = false;             // log the parameter hash after every step
};

struct AblationSection {
  bool no_retrieval = false;
  bool no_diffusion = false;
  bool text_condition = false;
  bool fused_image_feature = false;
  bool objects_only_db = false;
};

/// Gate used by `evaluate`; a value of 0 disables a check.
struct EvalSection {
  double min_in_action_recall = 0.70;
  double min_in_bleu4 = 0.0;
  double min_out_cider = 0.0;
};

struct TrainingConfig {
  Seeds seeds;
  CorpusSection corpus;
  encoder::EncoderConfig encoder;
  WarmupSection warmup;
  DiffusionSection diffusion;
  RetrievalSection retrieval;
  CaptionerSection captioner;
  TrainSection train;
  AblationSection ablation;
  EvalSection eval;

  /// Checks invariants and applies forced values (no_diffusion => lambda 0).
  void resolve();

  corpus::CorpusConfig corpus_config() const;
  captioner::CaptionerConfig captioner_config() const;
  diffusion::DenoiserConfig denoiser_config() const;
  double effective_lambda() const { return ablation.no_diffusion ? 0.0 : train.lambda; }

  /// Ordered dotted key -> canonical value text.
  std::map<std::string, std::string> flatten() const;
  void set(const std::string& key, const std::string& value);
  /// "key=value"
  void apply_override(const std::string& assignment);

  std::string to_text() const;
  static TrainingConfig from_text(const std::string& text);
  static TrainingConfig load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  /// SHA-256 of the canonical text, optionally skipping some keys.
  std::string hash(const std::vector<std::string>& exclude = {}) const;
  /// Hash over the keys whose dotted name starts with one of `prefixes`.
  std::string section_hash(const std::vector<std::string>& prefixes) const;
};

/// Keys whose values differ between two configs.
std::vector<std::string> config_diff(const TrainingConfig& a, const TrainingConfig& b);

}  // namespace ragcap::training
