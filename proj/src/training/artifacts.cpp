#include <fmt/format.h>

#include <fstream>
#include <random>

#include "json.hpp"
#include "ragcap/ag/archive.hpp"
#include "ragcap/training.hpp"

namespace ragcap::training {

using json = nlohmann::json;

namespace {

constexpr const char* kDone = "COMPLETE";

const std::vector<std::string> kCorpusKeys{"seeds.corpus", "corpus."};
const std::vector<std::string> kSnapshotKeys{"seeds.corpus", "corpus.", "encoder.", "warmup."};
const std::vector<std::string> kDenoiserKeys{"seeds.corpus", "corpus.", "encoder.", "warmup.", "diffusion."};
const std::vector<std::string> kDatabaseKeys{"seeds.corpus", "corpus.", "encoder.", "warmup.",
                                             "retrieval.db_fraction", "ablation.objects_only_db"};

std::string short_hash(const TrainingConfig& c, const std::vector<std::string>& keys) {
  return c.section_hash(keys).substr(0, 12);
}

bool complete(const fs::path& dir) { return fs::exists(dir / kDone); }

void mark_complete(const fs::path& dir) { std::ofstream(dir / kDone) << "ok\n"; }

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

void require_artifact(const fs::path& dir, const std::string& name, const std::string& verb) {
  if (!complete(dir)) {
    throw MissingArtifact("missing artifact: " + name + " (" + dir.string() + "); run `" + verb + "` first");
  }
}

void write_json(const fs::path& path, const json& j) { std::ofstream(path) << j.dump(2) << '\n'; }

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("missing file " + path.string());
  return json::parse(in);
}

// Derived sub-stream seeds; the corpus seed owns every shared artifact.
std::uint64_t warmup_seed(const TrainingConfig& c) { return c.seeds.corpus ^ 0x3a7b0c11ULL; }
std::uint64_t snapshot_init_seed(const TrainingConfig& c) { return c.seeds.corpus ^ 0x5eed0e1cULL; }
std::uint64_t denoiser_seed(const TrainingConfig& c) { return c.seeds.corpus ^ 0xd1ff0510ULL; }

encoder::EncoderSnapshot load_snapshot(const fs::path& dir, const TrainingConfig& config) {
  encoder::ImageEncoder enc(config.encoder, 0);
  ag::load_params(dir / "encoder.bin", enc.params());
  encoder::EncoderSnapshot snap(enc);
  const auto manifest = read_json(dir / "manifest.json");
  if (manifest.at("hash").get<std::string>() != snap.hash()) {
    throw TrainingError("snapshot hash mismatch in " + dir.string());
  }
  return snap;
}

}  // namespace

ArtifactPaths artifact_paths(const TrainingConfig& config, const fs::path& workspace) {
  const auto root = workspace / "artifacts";
  return {root / ("corpus-" + short_hash(config, kCorpusKeys)),
          root / ("snapshot-" + short_hash(config, kSnapshotKeys)),
          root / ("denoiser-" + short_hash(config, kDenoiserKeys)),
          root / ("db-" + short_hash(config, kDatabaseKeys))};
}

fs::path prepare_corpus(const TrainingConfig& config, const fs::path& workspace, const Logger& log) {
  const auto dir = artifact_paths(config, workspace).corpus;
  if (complete(dir)) return dir;
  say(log, "generating corpus in " + dir.string());
  const auto corpus = corpus::generate_corpus(config.corpus_config(), config.seeds.corpus);
  corpus::save_corpus(corpus, dir);
  std::vector<std::string> texts;
  for (const auto& s : corpus.train) texts.insert(texts.end(), s.captions.begin(), s.captions.end());
  captioner::Vocab::build(texts).save(dir / "vocab.txt");
  const auto preview = dir / "preview";
  fs::create_directories(preview);
  for (corpus::Split sp : corpus::kSplits) {
    const auto& samples = corpus.split(sp);
    for (std::size_t i = 0; i < std::min<std::size_t>(4, samples.size()); ++i)
      write_ppm(preview / (samples[i].id + ".ppm"), samples[i].image, config.encoder.channels,
                config.corpus.image_size);
  }
  mark_complete(dir);
  return dir;
}

fs::path prepare_snapshot(const TrainingConfig& config, const fs::path& workspace, const Logger& log) {
  const auto paths = artifact_paths(config, workspace);
  if (complete(paths.snapshot)) return paths.snapshot;
  require_artifact(paths.corpus, "corpus", "gen-corpus");
  const auto corpus = corpus::load_corpus(paths.corpus);
  const auto& tagger = attr::TaggerLexicon::bundled();

  encoder::ImageEncoder enc(config.encoder, snapshot_init_seed(config));
  encoder::WarmupOptions opts;
  opts.epochs = config.warmup.epochs;
  opts.batch = config.warmup.batch;
  opts.lr = config.warmup.lr;
  opts.temperature = config.warmup.temperature;
  opts.tower_hidden = config.warmup.tower_hidden;
  opts.seed = warmup_seed(config);
  opts.on_epoch = [&](int e, double loss) { say(log, fmt::format("warm-up epoch {} InfoNCE {:.4f}", e + 1, loss)); };
  say(log, "contrastive warm-up of the key encoder");
  const auto result = encoder::contrastive_warmup(enc, corpus.train, tagger, opts);

  const encoder::EncoderSnapshot snap(enc);
  const auto images = corpus.images(corpus::Split::Train);
  const int n = static_cast<int>(corpus.train.size());
  const double top1 = encoder::self_retrieval_top1(encoder::embed_images(snap.encoder(), images, n), n,
                                                   config.encoder.d_emb);
  say(log, fmt::format("snapshot self-retrieval top-1 on train: {:.4f}", top1));

  fs::create_directories(paths.snapshot);
  ag::save_params(paths.snapshot / "encoder.bin", snap.encoder().params());
  result.tower.save(paths.snapshot / "tower");
  write_json(paths.snapshot / "manifest.json", {{"hash", snap.hash()},
                                                {"epoch_losses", result.epoch_losses},
                                                {"self_retrieval_top1", top1},
                                                {"seed", warmup_seed(config)}});
  mark_complete(paths.snapshot);
  return paths.snapshot;
}

fs::path prepare_denoiser(const TrainingConfig& config, const fs::path& workspace, const Logger& log) {
  const auto paths = artifact_paths(config, workspace);
  if (complete(paths.denoiser)) return paths.denoiser;
  require_artifact(paths.corpus, "corpus", "gen-corpus");
  require_artifact(paths.snapshot, "encoder snapshot", "pretrain");
  const auto corpus = corpus::load_corpus(paths.corpus);
  const auto tower = encoder::CaptionTower::load(paths.snapshot / "tower");
  const auto& tagger = attr::TaggerLexicon::bundled();
  const int d = config.encoder.d_emb;

  // Condition rows: caption-tower embedding of one randomly chosen gt caption.
  std::vector<float> table;
  if (config.diffusion.pretrain_condition == "caption") {
    std::vector<std::string> texts;
    for (const auto& s : corpus.train) texts.insert(texts.end(), s.captions.begin(), s.captions.end());
    table = tower.embed_texts(texts, tagger);
  }
  std::mt19937_64 pick_rng(denoiser_seed(config) ^ 0xc0dULL);
  auto condition = [&](const std::vector<int>& idx) {
    std::vector<float> rows(idx.size() * static_cast<std::size_t>(d), 0.0f);
    if (table.empty()) return rows;
    std::uniform_int_distribution<int> pick(0, corpus::kCaptionsPerImage - 1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      const std::size_t row = static_cast<std::size_t>(idx[i]) * corpus::kCaptionsPerImage +
                              static_cast<std::size_t>(pick(pick_rng));
      std::copy_n(table.begin() + static_cast<std::ptrdiff_t>(row * d), d,
                  rows.begin() + static_cast<std::ptrdiff_t>(i * d));
    }
    return rows;
  };

  diffusion::Denoiser<float> den(config.denoiser_config(), denoiser_seed(config));
  const auto sched = diffusion::make_schedule(config.diffusion.steps, config.diffusion.beta_start,
                                              config.diffusion.beta_end);
  diffusion::PretrainOptions opts;
  opts.epochs = config.diffusion.pretrain_epochs;
  opts.batch = config.diffusion.pretrain_batch;
  opts.lr = config.diffusion.pretrain_lr;
  opts.condition_dropout = config.diffusion.condition_dropout;
  opts.seed = denoiser_seed(config);
  opts.on_epoch = [&](int e, double loss) { say(log, fmt::format("denoiser epoch {} eval loss {:.4f}", e + 1, loss)); };
  say(log, "pretraining the denoiser");
  const auto images = corpus.images(corpus::Split::Train);
  const auto rec = diffusion::pretrain_denoiser(den, images, static_cast<int>(corpus.train.size()), condition,
                                                sched, opts);
  fs::create_directories(paths.denoiser);
  ag::save_params(paths.denoiser / "denoiser.bin", den.params());
  write_json(paths.denoiser / "manifest.json", {{"hash", rec.hash},
                                                {"initial_loss", rec.initial_loss},
                                                {"epoch_losses", rec.epoch_losses},
                                                {"train_losses", rec.train_losses},
                                                {"condition", config.diffusion.pretrain_condition},
                                                {"steps", config.diffusion.steps},
                                                {"beta_start", config.diffusion.beta_start},
                                                {"beta_end", config.diffusion.beta_end}});
  mark_complete(paths.denoiser);
  return paths.denoiser;
}

fs::path prepare_database(const TrainingConfig& config, const fs::path& workspace, const Logger& log) {
  const auto paths = artifact_paths(config, workspace);
  if (complete(paths.database)) return paths.database;
  require_artifact(paths.corpus, "corpus", "gen-corpus");
  require_artifact(paths.snapshot, "encoder snapshot", "pretrain");
  const auto corpus = corpus::load_corpus(paths.corpus);
  const auto snap = load_snapshot(paths.snapshot, config);
  retrieval::BuildOptions opts;
  opts.fraction = config.retrieval.db_fraction;
  opts.sample_seed = config.seeds.corpus;
  opts.attributes =
      config.ablation.objects_only_db ? retrieval::EntryAttributes::ObjectsOnly : retrieval::EntryAttributes::Full;
  say(log, fmt::format("building retrieval database (fraction {}, {})", opts.fraction,
                       config.ablation.objects_only_db ? "objects only" : "full attributes"));
  const auto db = retrieval::build_database(corpus.train, snap, attr::TaggerLexicon::bundled(), opts);
  db.save(paths.database);
  mark_complete(paths.database);
  return paths.database;
}

void prepare_all(const TrainingConfig& config, const fs::path& workspace, const Logger& log) {
  prepare_corpus(config, workspace, log);
  prepare_snapshot(config, workspace, log);
  prepare_denoiser(config, workspace, log);
  prepare_database(config, workspace, log);
}

Artifacts load_artifacts(const TrainingConfig& config, const fs::path& workspace) {
  Artifacts a;
  a.paths = artifact_paths(config, workspace);
  require_artifact(a.paths.corpus, "corpus", "gen-corpus");
  require_artifact(a.paths.snapshot, "encoder snapshot", "pretrain");
  require_artifact(a.paths.denoiser, "frozen denoiser", "pretrain");
  require_artifact(a.paths.database, "retrieval database", "build-db");

  a.corpus = std::make_shared<const corpus::Corpus>(corpus::load_corpus(a.paths.corpus));
  a.vocab = captioner::Vocab::load(a.paths.corpus / "vocab.txt");
  a.snapshot = std::make_shared<const encoder::EncoderSnapshot>(load_snapshot(a.paths.snapshot, config));
  a.tower = std::make_shared<const encoder::CaptionTower>(encoder::CaptionTower::load(a.paths.snapshot / "tower"));

  auto den = std::make_shared<diffusion::Denoiser<float>>(config.denoiser_config(), 0);
  ag::load_params(a.paths.denoiser / "denoiser.bin", den->params());
  den->freeze();
  const auto den_manifest = read_json(a.paths.denoiser / "manifest.json");
  if (den_manifest.at("hash").get<std::string>() != diffusion::denoiser_hash(*den)) {
    throw TrainingError("denoiser hash mismatch in " + a.paths.denoiser.string());
  }
  a.denoiser = den;
  a.schedule = diffusion::make_schedule(config.diffusion.steps, config.diffusion.beta_start, config.diffusion.beta_end);

  a.database = std::make_shared<const retrieval::RetrievalDatabase>(retrieval::RetrievalDatabase::load(a.paths.database));
  if (a.database->info().encoder_hash != a.snapshot->hash()) {
    throw TrainingError("retrieval database was built with a different encoder snapshot");
  }
  a.tagger = std::shared_ptr<const attr::TaggerLexicon>(&attr::TaggerLexicon::bundled(), [](auto*) {});

  std::map<std::string, const corpus::SceneSpec*> specs;
  for (const auto& s : a.corpus->train) specs[s.id] = &s.spec;
  for (const auto& e : a.database->entries()) {
    auto it = specs.find(e.image_id);
    if (it == specs.end()) throw TrainingError("database entry " + e.image_id + " is not in the train split");
    a.entry_truth.push_back(eval::spec_attributes(*it->second, *a.tagger));
  }
  return a;
}

FrozenHashes frozen_hashes(const Artifacts& artifacts) {
  return {diffusion::denoiser_hash(*artifacts.denoiser), artifacts.database->keys_hash(),
          ag::params_hash(artifacts.snapshot->encoder().params())};
}

}  // namespace ragcap::training
