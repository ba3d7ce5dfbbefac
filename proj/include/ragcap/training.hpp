#pragma once

// Workspace artifacts (corpus, key-encoder snapshot, frozen denoiser,
// retrieval database), the joint train step, full training runs with
// checkpoints and metric logs, and model evaluation / captioning.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "ragcap/ag/optim.hpp"
#include "ragcap/attributes.hpp"
#include "ragcap/captioner.hpp"
#include "ragcap/config.hpp"
#include "ragcap/corpus.hpp"
#include "ragcap/diffusion.hpp"
#include "ragcap/encoder.hpp"
#include "ragcap/evaluation.hpp"
#include "ragcap/retrieval.hpp"
#include "ragcap/warmup.hpp"

namespace ragcap::training {

namespace fs = std::filesystem;

class MissingArtifact : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Logger = std::function<void(const std::string&)>;

/// Artifact directories under <workspace>/artifacts, named by a hash of the
/// config keys each artifact depends on.
struct ArtifactPaths {
  fs::path corpus;
  fs::path snapshot;
  fs::path denoiser;
  fs::path database;
};

ArtifactPaths artifact_paths(const TrainingConfig& config, const fs::path& workspace);

/// Each step builds its artifact if absent (or reuses a complete one) and
/// returns its directory. Steps require the ones before them.
fs::path prepare_corpus(const TrainingConfig& config, const fs::path& workspace, const Logger& log = {});
fs::path prepare_snapshot(const TrainingConfig& config, const fs::path& workspace, const Logger& log = {});
fs::path prepare_denoiser(const TrainingConfig& config, const fs::path& workspace, const Logger& log = {});
fs::path prepare_database(const TrainingConfig& config, const fs::path& workspace, const Logger& log = {});
void prepare_all(const TrainingConfig& config, const fs::path& workspace, const Logger& log = {});

struct Artifacts {
  ArtifactPaths paths;
  std::shared_ptr<const corpus::Corpus> corpus;
  captioner::Vocab vocab;
  std::shared_ptr<const encoder::EncoderSnapshot> snapshot;
  std::shared_ptr<const encoder::CaptionTower> tower;
  std::shared_ptr<const diffusion::Denoiser<float>> denoiser;
  diffusion::NoiseSchedule schedule;
  std::shared_ptr<const retrieval::RetrievalDatabase> database;
  std::shared_ptr<const attr::TaggerLexicon> tagger;
  /// Ground-truth attribute lemmas of every database entry, in entry order.
  std::vector<attr::AttributeRecord> entry_truth;
};

/// Loads every artifact; throws MissingArtifact naming the first one absent.
Artifacts load_artifacts(const TrainingConfig& config, const fs::path& workspace);

struct FrozenHashes {
  std::string denoiser;
  std::string database_keys;
  std::string snapshot;
  bool operator==(const FrozenHashes&) const = default;
};

FrozenHashes frozen_hashes(const Artifacts& artifacts);

/// Mutable model state of one run.
struct TrainState {
  encoder::ImageEncoder encoder;
  captioner::Captioner captioner;
  std::unique_ptr<ag::AdamW> optimizer;
  long step = 0;
  long total_steps = 0;
  std::mt19937_64 data_rng;
  std::mt19937_64 diffusion_rng;

  ag::ParamList<float> trainable() const;
  std::string param_hash() const;
};

/// Live encoder initialised from the snapshot; captioner from seeds.init.
TrainState init_state(const TrainingConfig& config, const Artifacts& artifacts, long total_steps);

struct StepLosses {
  double caption = 0.0;
  double denoise = 0.0;
  double total = 0.0;
  double lr = 0.0;
  int denoise_evaluations = 0;
  std::vector<std::string> prompts;
};

/// Retrieval prompt for train image `index` when queries are cached per epoch.
using PromptCache = std::vector<std::string>;

/// Soft prompts for a batch of query embeddings [B, d_emb].
std::vector<std::string> retrieve_prompts(const TrainingConfig& config, const Artifacts& artifacts,
                                          const std::vector<float>& queries, int batch,
                                          const std::vector<std::string>& exclude_ids);

/// Prompts for every train image with the current live encoder.
PromptCache build_prompt_cache(const TrainingConfig& config, const Artifacts& artifacts,
                               const encoder::ImageEncoder& encoder);

/// One optimizer update on (image, caption) pairs drawn from the train split.
/// `caption_index[i]` selects the gt caption of train image `indices[i]`.
StepLosses train_step(const std::vector<int>& indices, const std::vector<int>& caption_index, TrainState& state,
                      const TrainingConfig& config, const Artifacts& artifacts, const PromptCache* cache = nullptr);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double caption = 0.0;
  double denoise = 0.0;
  double total = 0.0;
  double lr = 0.0;
  std::string param_hash;  // only with train.trace_params
};

struct EpochRecord {
  int epoch = 0;
  double caption = 0.0;
  double denoise = 0.0;
  double total = 0.0;
  double test_in_loss = 0.0;
  double test_out_loss = 0.0;
  std::string checkpoint;
  std::optional<eval::MetricReport> metrics;
};

struct RunRecord {
  std::string run_id;
  std::string config_hash;
  std::string config_text;
  std::string refresh_policy;
  std::vector<StepRecord> steps;
  std::vector<EpochRecord> epochs;
  FrozenHashes frozen_before;
  FrozenHashes frozen_after;
  eval::MetricReport final_metrics;
  std::vector<std::string> checkpoints;
  std::string final_param_hash;
  double seconds = 0.0;

  void save(const fs::path& path) const;
  static RunRecord load(const fs::path& path);
};

struct RunOptions {
  Logger log;
  /// Reuse runs/<run-id>/record.json when it was produced by the same config.
  bool reuse_complete = false;
};

/// Full run: writes runs/<run-id>/{config.ini, metrics.jsonl, summary.csv,
/// epoch-<n>/, record.json} under `workspace`.
RunRecord run_training(const TrainingConfig& config, const fs::path& workspace, const std::string& run_id,
                       const RunOptions& options = {});

/// Mean teacher-forced caption loss on a split (first caption of each image).
double split_caption_loss(const TrainingConfig& config, const Artifacts& artifacts, const encoder::ImageEncoder& enc,
                          const captioner::Captioner& cap, corpus::Split split, int max_images);

struct Generated {
  std::vector<std::string> captions;
  std::vector<std::string> prompts;
  std::vector<float> queries;  // z rows
};

/// Captions a stack of images [N, C, H, W] with retrieval through the database.
Generated caption_images(const TrainingConfig& config, const Artifacts& artifacts, const encoder::ImageEncoder& enc,
                         const captioner::Captioner& cap, const std::vector<float>& images, int count);

/// Metrics on test-in and test-out.
eval::MetricReport evaluate_model(const TrainingConfig& config, const Artifacts& artifacts,
                                  const encoder::ImageEncoder& enc, const captioner::Captioner& cap,
                                  const std::string& run_id, int max_images);

/// A saved epoch checkpoint.
struct Checkpoint {
  TrainingConfig config;
  fs::path workspace;
  std::string run_id;
  std::shared_ptr<encoder::ImageEncoder> encoder;
  std::shared_ptr<captioner::Captioner> captioner;
};

void save_checkpoint(const fs::path& dir, const TrainingConfig& config, const fs::path& workspace,
                     const std::string& run_id, const TrainState& state);
Checkpoint load_checkpoint(const fs::path& dir);

/// Violated `eval.*` thresholds as human-readable lines; empty when all pass.
std::vector<std::string> threshold_violations(const TrainingConfig& config, const eval::MetricReport& report);

/// Reads a binary PPM (P6) or a raw float32 [C, H, W] file into [-1, 1].
std::vector<float> read_image(const fs::path& path, int channels, int size);
void write_ppm(const fs::path& path, const std::vector<float>& image, int channels, int size);

}  // namespace ragcap::training
