// ragcap: corpus generation, artifact building, training, captioning,
// evaluation and ablations from one entry point.

#include <spdlog/spdlog.h>

#include <CLI11.hpp>
#include <iostream>

#include "ragcap/ablation.hpp"
#include "ragcap/training.hpp"

namespace fs = std::filesystem;
using namespace ragcap;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string out = "workspace";
  std::optional<std::uint64_t> seed_corpus, seed_init, seed_data;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, "config file (INI)");
  cmd->add_option("--set", c.overrides, "override, key=value (repeatable)");
  cmd->add_option("--out", c.out, "workspace directory")->capture_default_str();
  cmd->add_option("--seed-corpus", c.seed_corpus, "corpus seed");
  cmd->add_option("--seed-init", c.seed_init, "initialisation seed");
  cmd->add_option("--seed-data", c.seed_data, "data-order seed");
}

training::TrainingConfig resolve_config(const Common& c, const std::string& verb) {
  training::TrainingConfig cfg;
  if (!c.config_path.empty()) cfg = training::TrainingConfig::load(c.config_path);
  for (const auto& o : c.overrides) cfg.apply_override(o);
  if (c.seed_corpus) cfg.seeds.corpus = *c.seed_corpus;
  if (c.seed_init) cfg.seeds.init = *c.seed_init;
  if (c.seed_data) cfg.seeds.data = *c.seed_data;
  cfg.resolve();
  cfg.save(fs::path(c.out) / "resolved" / (verb + ".ini"));
  return cfg;
}

std::vector<std::string> split_csv(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : s) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != ' ') {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

void print_metrics(const eval::MetricReport& r) {
  for (const auto& [split, m] : r.splits) {
    std::cout << fmt::format("{:9} BLEU-4 {:.4f}  CIDEr-D {:.4f}  recall obj {:.3f} act {:.3f} env {:.3f}  "
                             "retrieval {:.3f}\n",
                             split, m.bleu4, m.cider, m.recall.objects, m.recall.actions, m.recall.environments,
                             m.retrieval_recall);
  }
}

training::Logger logger() {
  return [](const std::string& msg) { spdlog::info("{}", msg); };
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ragcap: retrieval-augmented captioning with diffusion guidance on a synthetic corpus"};
  app.require_subcommand(1);

  Common common;
  auto* gen = app.add_subcommand("gen-corpus", "generate the synthetic corpus and caption vocabulary");
  auto* pre = app.add_subcommand("pretrain", "contrastive warm-up of the key encoder, then denoiser pretraining");
  auto* bdb = app.add_subcommand("build-db", "build the retrieval database from the frozen snapshot");
  auto* trn = app.add_subcommand("train", "joint training run");
  auto* cap = app.add_subcommand("caption", "caption one image with a checkpoint");
  auto* evl = app.add_subcommand("evaluate", "metrics of a checkpoint on test-in and test-out");
  auto* abl = app.add_subcommand("ablate", "paired runs along one ablation axis plus a report");
  for (auto* cmd : {gen, pre, bdb, trn, abl}) add_common(cmd, common);

  std::string run_id;
  bool prepare = false;
  trn->add_option("--run-id", run_id, "run directory name (default: derived from the config hash)");
  trn->add_flag("--prepare", prepare, "build missing artifacts first");

  std::string image, checkpoint;
  int beam = 0;
  cap->add_option("--image", image, "binary PPM or raw float32 [C,H,W] file")->required();
  cap->add_option("--checkpoint", checkpoint, "epoch checkpoint directory")->required();
  cap->add_option("--beam", beam, "beam width (default: from the checkpoint config)");

  int max_images = 0;
  std::vector<std::string> eval_overrides;
  evl->add_option("--checkpoint", checkpoint, "epoch checkpoint directory")->required();
  evl->add_option("--max-images", max_images, "images per split (0 = all)");
  evl->add_option("--set", eval_overrides, "override eval.* thresholds, key=value");

  std::string axis, values;
  int replicates = 1;
  abl->add_option("--axis", axis, "ablation axis")->required();
  abl->add_option("--values", values, "comma-separated axis values")->required();
  abl->add_option("--replicates", replicates, "seed replicates per value")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (gen->parsed()) {
      const auto cfg = resolve_config(common, "gen-corpus");
      std::cout << training::prepare_corpus(cfg, common.out, logger()).string() << '\n';
    } else if (pre->parsed()) {
      const auto cfg = resolve_config(common, "pretrain");
      training::prepare_snapshot(cfg, common.out, logger());
      std::cout << training::prepare_denoiser(cfg, common.out, logger()).string() << '\n';
    } else if (bdb->parsed()) {
      const auto cfg = resolve_config(common, "build-db");
      std::cout << training::prepare_database(cfg, common.out, logger()).string() << '\n';
    } else if (trn->parsed()) {
      const auto cfg = resolve_config(common, "train");
      if (prepare) training::prepare_all(cfg, common.out, logger());
      training::RunOptions ro;
      ro.log = logger();
      const auto rec = training::run_training(cfg, common.out, run_id.empty() ? training::run_id_for(cfg) : run_id, ro);
      print_metrics(rec.final_metrics);
    } else if (cap->parsed()) {
      auto ck = training::load_checkpoint(checkpoint);
      if (beam > 0) ck.config.train.beam = beam;
      const auto artifacts = training::load_artifacts(ck.config, ck.workspace);
      const auto img = training::read_image(image, ck.config.encoder.channels, ck.config.corpus.image_size);
      const auto g = training::caption_images(ck.config, artifacts, *ck.encoder, *ck.captioner, img, 1);
      std::cout << g.captions.front() << '\n';
    } else if (evl->parsed()) {
      auto ck = training::load_checkpoint(checkpoint);
      for (const auto& o : eval_overrides) {
        if (o.rfind("eval.", 0) != 0) throw training::ConfigError("evaluate only accepts eval.* overrides: " + o);
        ck.config.apply_override(o);
      }
      const auto artifacts = training::load_artifacts(ck.config, ck.workspace);
      const auto report = training::evaluate_model(ck.config, artifacts, *ck.encoder, *ck.captioner, ck.run_id,
                                                   max_images);
      print_metrics(report);
      const auto violations = training::threshold_violations(ck.config, report);
      for (const auto& v : violations) std::cerr << "threshold violated: " << v << '\n';
      if (!violations.empty()) return 2;
    } else if (abl->parsed()) {
      const auto cfg = resolve_config(common, "ablate");
      training::AblationOptions opts;
      opts.replicates = replicates;
      opts.log = logger();
      const auto result = training::run_ablation(cfg, common.out, axis, split_csv(values), opts);
      for (const auto& s : result.runs) {
        std::cout << fmt::format("{}={} {} {}\n", axis, s.value, s.seed, s.run_id);
        print_metrics(s.report);
      }
      for (const auto& p : result.report_files) std::cout << p.string() << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
