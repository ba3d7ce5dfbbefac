#include <cmath>
#include <filesystem>
#include <fstream>

#include "json.hpp"

#include "doctest.h"
#include "ragcap/ablation.hpp"
#include "ragcap/training.hpp"

using namespace ragcap;
using training::TrainingConfig;
namespace fs = std::filesystem;

namespace {

TrainingConfig tiny_config() {
  TrainingConfig c;
  c.corpus.train_size = 48;
  c.corpus.test_in_size = 8;
  c.corpus.test_out_size = 8;
  c.corpus.image_size = 8;
  c.encoder.patch = 4;
  c.encoder.d_model = 16;
  c.encoder.d_emb = 8;
  c.encoder.heads = 2;
  c.encoder.blocks = 1;
  c.encoder.n_queries = 2;
  c.encoder.mlp_ratio = 2;
  c.warmup.epochs = 1;
  c.warmup.batch = 16;
  c.warmup.tower_hidden = 16;
  c.diffusion.width = 4;
  c.diffusion.time_dim = 8;
  c.diffusion.pretrain_epochs = 1;
  c.diffusion.pretrain_batch = 16;
  c.captioner.heads = 2;
  c.captioner.mlp_ratio = 2;
  c.captioner.n_text_queries = 2;
  c.captioner.decoder_blocks = 1;
  c.train.batch = 8;
  c.train.epochs = 2;
  c.train.warmup_steps = 2;
  c.train.lr = 1e-3;
  c.retrieval.k = 4;
  c.eval.min_in_action_recall = 0.0;
  c.resolve();
  return c;
}

const fs::path& workspace() {
  static const fs::path ws = [] {
    const auto p = fs::temp_directory_path() / "ragcap_training_ws";
    fs::remove_all(p);
    training::prepare_all(tiny_config(), p);
    return p;
  }();
  return ws;
}

training::RunRecord run(const TrainingConfig& c, const std::string& id) {
  return training::run_training(c, workspace(), id);
}

}  // namespace

TEST_CASE("config text round trip, overrides and diff") {
  auto c = tiny_config();
  c.apply_override("train.lambda=5");
  c.apply_override("retrieval.refresh=per-epoch");
  const auto back = TrainingConfig::from_text(c.to_text());
  CHECK(back.flatten() == c.flatten());
  CHECK(back.hash() == c.hash());
  CHECK(back.train.lambda == 5.0);
  CHECK(training::config_diff(tiny_config(), c) == std::vector<std::string>{"retrieval.refresh", "train.lambda"});
  CHECK(c.hash({"train.lambda", "retrieval.refresh"}) == tiny_config().hash({"train.lambda", "retrieval.refresh"}));
  CHECK_THROWS_AS(c.apply_override("train.nope=1"), training::ConfigError);
  CHECK_THROWS_AS(c.apply_override("train.lambda"), training::ConfigError);
  CHECK_THROWS_AS(c.apply_override("train.batch=abc"), training::ConfigError);
  CHECK_THROWS_AS(TrainingConfig::from_text("[train]\nbogus = 1\n"), training::ConfigError);
}

TEST_CASE("config resolution rules") {
  auto c = tiny_config();
  c.ablation.no_diffusion = true;
  c.resolve();
  CHECK(c.train.lambda == 0.0);
  CHECK(c.effective_lambda() == 0.0);
  auto both = tiny_config();
  both.ablation.no_retrieval = true;
  both.ablation.objects_only_db = true;
  CHECK_THROWS_AS(both.resolve(), training::ConfigError);
  auto bad = tiny_config();
  bad.diffusion.beta_end = 2.0;
  CHECK_THROWS(bad.resolve());
  auto refresh = tiny_config();
  refresh.retrieval.refresh = "sometimes";
  CHECK_THROWS_AS(refresh.resolve(), training::ConfigError);
}

TEST_CASE("missing artifacts are named") {
  const auto empty = fs::temp_directory_path() / "ragcap_empty_ws";
  fs::remove_all(empty);
  try {
    training::load_artifacts(tiny_config(), empty);
    FAIL("expected MissingArtifact");
  } catch (const training::MissingArtifact& e) {
    CHECK(std::string(e.what()).find("corpus") != std::string::npos);
  }
  CHECK_THROWS_AS(training::prepare_database(tiny_config(), empty), training::MissingArtifact);
}

TEST_CASE("train step: single denoiser evaluation, total identity, frozen parts untouched") {
  const auto cfg = tiny_config();
  const auto art = training::load_artifacts(cfg, workspace());
  auto state = training::init_state(cfg, art, 10);
  const auto before = training::frozen_hashes(art);
  const long calls = art.denoiser->calls();
  const auto snap_hash = art.snapshot->hash();
  const auto enc_before = state.encoder.hash();
  const auto l = training::train_step({0, 1, 2, 3}, {0, 1, 2, 3}, state, cfg, art);
  CHECK(l.denoise_evaluations == 1);
  CHECK(art.denoiser->calls() == calls + 1);
  CHECK(l.total == doctest::Approx(l.caption + cfg.train.lambda * l.denoise).epsilon(1e-6));
  CHECK(l.prompts.size() == 4);
  CHECK(state.step == 1);
  CHECK(state.encoder.hash() != enc_before);
  CHECK(training::frozen_hashes(art) == before);
  CHECK(art.snapshot->hash() == snap_hash);
  CHECK(art.snapshot->intact());

  auto off = cfg;
  off.ablation.no_diffusion = true;
  off.resolve();
  auto s2 = training::init_state(off, art, 10);
  const long c2 = art.denoiser->calls();
  const auto l2 = training::train_step({0, 1}, {0, 0}, s2, off, art);
  CHECK(l2.denoise_evaluations == 0);
  CHECK(art.denoiser->calls() == c2);
  CHECK(l2.total == l2.caption);
}

TEST_CASE("retrieval excludes the query image during training and prompts follow the template") {
  const auto cfg = tiny_config();
  const auto art = training::load_artifacts(cfg, workspace());
  const auto& train = art.corpus->train;
  const auto all_z = encoder::embed_images(art.snapshot->encoder(), art.corpus->images(corpus::Split::Train), 48);
  const std::vector<float> snap_z(all_z.begin(), all_z.begin() + 16);
  const auto p_ex = training::retrieve_prompts(cfg, art, snap_z, 2, {train[0].id, train[1].id});
  const auto p_in = training::retrieve_prompts(cfg, art, snap_z, 2, {"", ""});
  REQUIRE(p_ex.size() == 2);
  for (int i = 0; i < 2; ++i) {
    const float* q = snap_z.data() + i * 8;
    CHECK(p_ex[static_cast<std::size_t>(i)] ==
          retrieval::retrieve(*art.database, q, cfg.retrieval.k, cfg.retrieval.top_n, train[static_cast<std::size_t>(i)].id).prompt);
    CHECK(p_in[static_cast<std::size_t>(i)] == retrieval::retrieve(*art.database, q, cfg.retrieval.k, cfg.retrieval.top_n).prompt);
    for (const auto& [id, sim] :
         retrieval::retrieve(*art.database, q, cfg.retrieval.k, cfg.retrieval.top_n, train[static_cast<std::size_t>(i)].id).provenance)
      CHECK(id != train[static_cast<std::size_t>(i)].id);
  }
  // Without exclusion the top hit is the image itself.
  const auto hits = art.database->query(std::vector<float>(snap_z.begin(), snap_z.begin() + 8), 1);
  CHECK(art.database->entry(hits[0].index).image_id == train[0].id);

  auto none = cfg;
  none.ablation.no_retrieval = true;
  none.resolve();
  const auto p_none = training::retrieve_prompts(none, art, snap_z, 2, {"", ""});
  CHECK(p_none[0] == "something and being in somewhere");
}

TEST_CASE("full run: logged totals satisfy the weighted-sum identity and frozen hashes hold") {
  const auto cfg = tiny_config();
  const auto rec = run(cfg, "identity");
  REQUIRE(rec.steps.size() == 12);
  CHECK(rec.frozen_before == rec.frozen_after);
  CHECK(rec.epochs.size() == 2);
  CHECK(rec.final_metrics.splits.count("test-in") == 1);
  CHECK(rec.final_metrics.splits.count("test-out") == 1);
  CHECK(rec.final_metrics.splits.size() == 2);

  std::ifstream in(workspace() / "runs" / "identity" / "metrics.jsonl");
  int steps = 0;
  for (std::string line; std::getline(in, line);) {
    const auto j = nlohmann::json::parse(line);
    if (j.value("type", "") != "step") continue;
    ++steps;
    const float c = std::stof(j.at("caption").get<std::string>());
    const float d = std::stof(j.at("denoise").get<std::string>());
    const float t = std::stof(j.at("total").get<std::string>());
    const float lam = static_cast<float>(j.at("lambda").get<double>());
    CHECK(std::abs(t - (c + lam * d)) <= 2e-6f * std::max(1.0f, std::abs(t)));
  }
  CHECK(steps == 12);
  CHECK(fs::exists(workspace() / "runs" / "identity" / "config.ini"));
  CHECK(fs::exists(workspace() / "runs" / "identity" / "summary.csv"));
  CHECK(fs::exists(workspace() / "runs" / "identity" / "epoch-2" / "encoder.bin"));
  for (const auto& [split, m] : rec.final_metrics.splits) {
    CHECK((m.bleu4 >= 0.0 && m.bleu4 <= 1.0));
    CHECK((m.cider >= 0.0 && m.cider <= 10.0));
    CHECK((m.retrieval_recall >= 0.0 && m.retrieval_recall <= 1.0));
  }
}

TEST_CASE("runs are deterministic, and lambda 0 matches the no-diffusion switch step for step") {
  auto cfg = tiny_config();
  cfg.train.trace_params = true;
  const auto a = run(cfg, "det-a");
  const auto b = run(cfg, "det-b");
  CHECK(a.final_param_hash == b.final_param_hash);

  auto zero = cfg;
  zero.train.lambda = 0.0;
  zero.resolve();
  auto off = cfg;
  off.ablation.no_diffusion = true;
  off.resolve();
  const auto rz = run(zero, "lambda-zero");
  const auto ro = run(off, "no-diffusion");
  REQUIRE(rz.steps.size() == ro.steps.size());
  for (std::size_t i = 0; i < rz.steps.size(); ++i) {
    REQUIRE(!rz.steps[i].param_hash.empty());
    CHECK(rz.steps[i].param_hash == ro.steps[i].param_hash);
    CHECK(rz.steps[i].caption == ro.steps[i].caption);
  }
  CHECK(rz.final_param_hash == ro.final_param_hash);
  CHECK(rz.final_param_hash != a.final_param_hash);
}

TEST_CASE("per-step and per-epoch retrieval agree when the encoder does not move") {
  auto cfg = tiny_config();
  cfg.train.lr = 0.0;
  cfg.train.epochs = 1;
  auto cached = cfg;
  cached.retrieval.refresh = "per-epoch";
  cached.resolve();
  const auto a = run(cfg, "refresh-step");
  const auto b = run(cached, "refresh-epoch");
  REQUIRE(a.steps.size() == b.steps.size());
  for (std::size_t i = 0; i < a.steps.size(); ++i) CHECK(a.steps[i].caption == b.steps[i].caption);
}

TEST_CASE("checkpoints reload to identical captions and evaluate thresholds") {
  const auto cfg = tiny_config();
  run(cfg, "identity");
  const auto ck = training::load_checkpoint(workspace() / "runs" / "identity" / "epoch-2");
  const auto art = training::load_artifacts(ck.config, ck.workspace);
  const auto imgs = art.corpus->images(corpus::Split::TestIn);
  const auto g1 = training::caption_images(ck.config, art, *ck.encoder, *ck.captioner, imgs, 8);
  const auto ck2 = training::load_checkpoint(workspace() / "runs" / "identity" / "epoch-2");
  const auto g2 = training::caption_images(ck2.config, art, *ck2.encoder, *ck2.captioner, imgs, 8);
  CHECK(g1.captions == g2.captions);
  CHECK(g1.captions.size() == 8);

  eval::MetricReport r;
  r.splits["test-in"].recall.actions = 0.5;
  r.splits["test-out"];
  auto strict = cfg;
  strict.eval.min_in_action_recall = 0.7;
  CHECK(training::threshold_violations(strict, r).size() == 1);
  strict.eval.min_in_action_recall = 0.0;
  CHECK(training::threshold_violations(strict, r).empty());
}

TEST_CASE("run reuse requires the same config") {
  const auto cfg = tiny_config();
  training::RunOptions reuse;
  reuse.reuse_complete = true;
  const auto first = training::run_training(cfg, workspace(), "identity", reuse);
  auto other = cfg;
  other.train.lambda = 3.0;
  CHECK(first.config_hash == cfg.hash());
  CHECK(training::run_training(other, workspace(), "reuse-other", reuse).config_hash == other.hash());
  // A stale record under the same id is retrained, not reused.
  const auto redone = training::run_training(other, workspace(), "identity", reuse);
  CHECK(redone.config_hash == other.hash());
  CHECK(redone.final_param_hash != first.final_param_hash);
}

TEST_CASE("ablation planning keeps paired configs identical outside the axis") {
  const auto base = tiny_config();
  for (const auto& [axis, values] : std::vector<std::pair<std::string, std::vector<std::string>>>{
           {"database", {"none", "objects_only", "full"}},
           {"diffusion", {"off", "on"}},
           {"lambda", {"3", "5", "7", "9"}},
           {"top_n", {"1", "3", "5"}},
           {"decoder_blocks", {"1", "2"}}}) {
    const auto keys = training::axis_keys(axis);
    for (const auto& v : values) {
      const auto c = training::replicate(training::apply_axis(base, axis, v), 2);
      for (const auto& k : training::config_diff(base, c)) {
        const bool allowed =
            std::find(keys.begin(), keys.end(), k) != keys.end() || k == "seeds.init" || k == "seeds.data";
        CHECK_MESSAGE(allowed, axis << "=" << v << " changed " << k);
      }
      CHECK(training::paired_hash(c, axis) == training::paired_hash(base, axis));
    }
  }
  CHECK_THROWS_AS(training::apply_axis(base, "colour", "x"), training::ConfigError);
  CHECK_THROWS_AS(training::apply_axis(base, "database", "maybe"), training::ConfigError);
  auto off = base;
  off.ablation.no_diffusion = true;
  off.resolve();
  CHECK_THROWS_AS(training::apply_axis(off, "lambda", "5"), training::ConfigError);
}
