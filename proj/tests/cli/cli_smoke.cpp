// End-to-end smoke test of the ragcap binary: determinism of gen-corpus,
// resolved-config snapshots, caption output and the exit-code contract.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"
#include "ragcap/corpus.hpp"
#include "ragcap/training.hpp"

using namespace ragcap;
namespace fs = std::filesystem;

namespace {

const fs::path& root() {
  static const fs::path p = [] {
    const auto d = fs::temp_directory_path() / "ragcap_cli_smoke";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return p;
}

struct Result {
  int code = -1;
  std::string out;
  std::string err;
};

Result ragcap_cli(const std::string& args) {
  const auto out = root() / "stdout.txt", err = root() / "stderr.txt";
  const std::string cmd = std::string(RAGCAP_CLI) + " " + args + " >" + out.string() + " 2>" + err.string();
  const int status = std::system(cmd.c_str());
  Result r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  auto slurp = [](const fs::path& p) {
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
  };
  r.out = slurp(out);
  r.err = slurp(err);
  return r;
}

std::string slurp_binary(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

bool same_tree(const fs::path& a, const fs::path& b) {
  std::vector<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.push_back(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.push_back(fs::relative(e.path(), b));
  std::sort(fa.begin(), fa.end());
  std::sort(fb.begin(), fb.end());
  if (fa != fb || fa.empty()) return false;
  for (const auto& f : fa)
    if (slurp_binary(a / f) != slurp_binary(b / f)) return false;
  return true;
}

fs::path tiny_config() {
  training::TrainingConfig c;
  c.corpus.train_size = 32;
  c.corpus.test_in_size = 6;
  c.corpus.test_out_size = 6;
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
  c.retrieval.k = 4;
  c.resolve();
  const auto p = root() / "tiny.ini";
  c.save(p);
  return p;
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  const auto r = ragcap_cli("frobnicate");
  CHECK(r.code == 1);
  CHECK(r.err.find("Usage") != std::string::npos);
  CHECK(ragcap_cli("").code == 1);
  CHECK(ragcap_cli("gen-corpus --config " + (root() / "missing.ini").string()).code == 1);
  CHECK(ragcap_cli("gen-corpus --config " + tiny_config().string() + " --set nosuch.key=1 --out " +
                   (root() / "x").string())
            .code == 1);
  CHECK(ragcap_cli("ablate --config " + tiny_config().string() + " --axis colour --values 1,2 --out " +
                   (root() / "x").string())
            .code == 1);
}

TEST_CASE("gen-corpus twice with the same seed gives identical directories") {
  const auto cfg = tiny_config().string();
  const auto a = ragcap_cli("gen-corpus --config " + cfg + " --seed-corpus 1 --out " + (root() / "gen-a").string());
  const auto b = ragcap_cli("gen-corpus --config " + cfg + " --seed-corpus 1 --out " + (root() / "gen-b").string());
  REQUIRE(a.code == 0);
  REQUIRE(b.code == 0);
  CHECK(same_tree(root() / "gen-a" / "artifacts", root() / "gen-b" / "artifacts"));
  CHECK(fs::exists(root() / "gen-a" / "resolved" / "gen-corpus.ini"));
  const auto c = ragcap_cli("gen-corpus --config " + cfg + " --seed-corpus 2 --out " + (root() / "gen-c").string());
  REQUIRE(c.code == 0);
  CHECK(!same_tree(root() / "gen-a" / "artifacts", root() / "gen-c" / "artifacts"));
}

TEST_CASE("train, caption, evaluate and ablate through the binary") {
  const auto cfg = tiny_config().string();
  const auto ws = root() / "ws";
  const auto t = ragcap_cli("train --config " + cfg + " --set train.lambda=5 --out " + ws.string() +
                            " --prepare --run-id smoke");
  REQUIRE(t.code == 0);

  // The resolved snapshot replays to the same config.
  auto expected = training::TrainingConfig::load(cfg);
  expected.apply_override("train.lambda=5");
  expected.resolve();
  const auto snapshot = training::TrainingConfig::load(ws / "resolved" / "train.ini");
  CHECK(snapshot.hash() == expected.hash());
  CHECK(snapshot.train.lambda == 5.0);

  const auto corpus = corpus::load_corpus(training::artifact_paths(expected, ws).corpus);
  const auto& smp = corpus.split(corpus::Split::TestIn).front();
  const auto image = root() / "image.ppm";
  training::write_ppm(image, smp.image, 3, 8);
  const auto ck = (ws / "runs" / "smoke" / "epoch-2").string();
  const auto c = ragcap_cli("caption --image " + image.string() + " --checkpoint " + ck);
  REQUIRE(c.code == 0);
  CHECK(!c.out.empty());
  CHECK(std::count(c.out.begin(), c.out.end(), '\n') == 1);
  CHECK(ragcap_cli("caption --image " + image.string() + " --checkpoint " + ck).out == c.out);

  CHECK(ragcap_cli("evaluate --checkpoint " + ck + " --set eval.min_in_action_recall=0").code == 0);
  CHECK(ragcap_cli("evaluate --checkpoint " + ck + " --set eval.min_out_cider=10").code == 2);
  CHECK(ragcap_cli("evaluate --checkpoint " + ck + " --set train.lambda=1").code == 1);

  const auto a = ragcap_cli("ablate --config " + cfg + " --axis lambda --values 3,5 --out " + ws.string());
  REQUIRE(a.code == 0);
  CHECK(fs::exists(ws / "reports" / "lambda" / "lambda.csv"));
  CHECK(fs::exists(ws / "reports" / "lambda" / "lambda.svg"));
  CHECK(fs::exists(ws / "resolved" / "ablate.ini"));
}
