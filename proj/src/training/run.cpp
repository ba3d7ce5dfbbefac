#include <fmt/format.h>

#include <chrono>
#include <fstream>
#include <numeric>

#include "json.hpp"
#include "ragcap/ag/archive.hpp"
#include "ragcap/training.hpp"

namespace ragcap::training {

using json = nlohmann::json;

namespace {

json metrics_json(const eval::MetricReport& r) {
  json j{{"run_id", r.run_id}, {"config_hash", r.config_hash}};
  for (const auto& [split, m] : r.splits) {
    j["splits"][split] = {{"bleu4", m.bleu4},
                          {"cider", m.cider},
                          {"object_recall", m.recall.objects},
                          {"action_recall", m.recall.actions},
                          {"environment_recall", m.recall.environments},
                          {"retrieval_recall", m.retrieval_recall}};
  }
  return j;
}

eval::MetricReport metrics_from(const json& j) {
  eval::MetricReport r;
  r.run_id = j.at("run_id").get<std::string>();
  r.config_hash = j.at("config_hash").get<std::string>();
  if (j.contains("splits")) {
    for (const auto& [split, m] : j.at("splits").items()) {
      eval::SplitMetrics s;
      s.bleu4 = m.at("bleu4");
      s.cider = m.at("cider");
      s.recall.objects = m.at("object_recall");
      s.recall.actions = m.at("action_recall");
      s.recall.environments = m.at("environment_recall");
      s.retrieval_recall = m.at("retrieval_recall");
      r.splits[split] = s;
    }
  }
  return r;
}

json hashes_json(const FrozenHashes& h) {
  return {{"denoiser", h.denoiser}, {"database_keys", h.database_keys}, {"snapshot", h.snapshot}};
}

FrozenHashes hashes_from(const json& j) {
  return {j.at("denoiser"), j.at("database_keys"), j.at("snapshot")};
}

void say(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

}  // namespace

void RunRecord::save(const fs::path& path) const {
  json j{{"run_id", run_id},
         {"config_hash", config_hash},
         {"config", config_text},
         {"refresh_policy", refresh_policy},
         {"frozen_before", hashes_json(frozen_before)},
         {"frozen_after", hashes_json(frozen_after)},
         {"final_metrics", metrics_json(final_metrics)},
         {"checkpoints", checkpoints},
         {"final_param_hash", final_param_hash},
         {"seconds", seconds}};
  for (const auto& s : steps) {
    json row{{"step", s.step}, {"epoch", s.epoch}, {"caption", s.caption}, {"denoise", s.denoise},
             {"total", s.total}, {"lr", s.lr}};
    if (!s.param_hash.empty()) row["param_hash"] = s.param_hash;
    j["steps"].push_back(row);
  }
  for (const auto& e : epochs) {
    json row{{"epoch", e.epoch},         {"caption", e.caption},           {"denoise", e.denoise},
             {"total", e.total},         {"test_in_loss", e.test_in_loss}, {"test_out_loss", e.test_out_loss},
             {"checkpoint", e.checkpoint}};
    if (e.metrics) row["metrics"] = metrics_json(*e.metrics);
    j["epochs"].push_back(row);
  }
  std::ofstream(path) << j.dump() << '\n';
}

RunRecord RunRecord::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("run record not found: " + path.string());
  const auto j = json::parse(in);
  RunRecord r;
  r.run_id = j.at("run_id");
  r.config_hash = j.at("config_hash");
  r.config_text = j.at("config");
  r.refresh_policy = j.at("refresh_policy");
  r.frozen_before = hashes_from(j.at("frozen_before"));
  r.frozen_after = hashes_from(j.at("frozen_after"));
  r.final_metrics = metrics_from(j.at("final_metrics"));
  r.checkpoints = j.at("checkpoints").get<std::vector<std::string>>();
  r.final_param_hash = j.at("final_param_hash");
  r.seconds = j.at("seconds");
  if (j.contains("steps")) {
    for (const auto& s : j.at("steps")) {
      StepRecord x{s.at("step"), s.at("epoch"), s.at("caption"), s.at("denoise"), s.at("total"), s.at("lr"), ""};
      if (s.contains("param_hash")) x.param_hash = s.at("param_hash");
      r.steps.push_back(x);
    }
  }
  if (j.contains("epochs")) {
    for (const auto& e : j.at("epochs")) {
      EpochRecord x;
      x.epoch = e.at("epoch");
      x.caption = e.at("caption");
      x.denoise = e.at("denoise");
      x.total = e.at("total");
      x.test_in_loss = e.at("test_in_loss");
      x.test_out_loss = e.at("test_out_loss");
      x.checkpoint = e.at("checkpoint");
      if (e.contains("metrics")) x.metrics = metrics_from(e.at("metrics"));
      r.epochs.push_back(x);
    }
  }
  return r;
}

void save_checkpoint(const fs::path& dir, const TrainingConfig& config, const fs::path& workspace,
                     const std::string& run_id, const TrainState& state) {
  fs::create_directories(dir);
  ag::save_params(dir / "encoder.bin", state.encoder.params());
  ag::save_params(dir / "captioner.bin", state.captioner.params());
  state.captioner.vocab().save(dir / "vocab.txt");
  config.save(dir / "config.ini");
  std::ofstream(dir / "checkpoint.json") << json{{"run_id", run_id},
                                                 {"workspace", fs::absolute(workspace).string()},
                                                 {"step", state.step},
                                                 {"param_hash", state.param_hash()}}
                                                .dump(2)
                                         << '\n';
}

Checkpoint load_checkpoint(const fs::path& dir) {
  std::ifstream in(dir / "checkpoint.json");
  if (!in) throw MissingArtifact("not a checkpoint directory: " + dir.string());
  const auto meta = json::parse(in);
  Checkpoint ck;
  ck.config = TrainingConfig::load(dir / "config.ini");
  ck.config.resolve();
  ck.workspace = meta.at("workspace").get<std::string>();
  ck.run_id = meta.at("run_id");
  ck.encoder = std::make_shared<encoder::ImageEncoder>(ck.config.encoder, 0);
  ag::load_params(dir / "encoder.bin", ck.encoder->params());
  ck.captioner = std::make_shared<captioner::Captioner>(ck.config.captioner_config(),
                                                        captioner::Vocab::load(dir / "vocab.txt"), 0);
  ag::load_params(dir / "captioner.bin", ck.captioner->params());
  return ck;
}

RunRecord run_training(const TrainingConfig& input_config, const fs::path& workspace, const std::string& run_id,
                       const RunOptions& options) {
  TrainingConfig config = input_config;
  config.resolve();
  const auto run_dir = workspace / "runs" / run_id;
  const auto record_path = run_dir / "record.json";
  if (options.reuse_complete && fs::exists(record_path)) {
    auto rec = RunRecord::load(record_path);
    if (rec.config_hash == config.hash()) {
      say(options.log, "reusing finished run " + run_id);
      return rec;
    }
  }

  fs::create_directories(run_dir);
  config.save(run_dir / "config.ini");
  const auto artifacts = load_artifacts(config, workspace);
  const auto t0 = std::chrono::steady_clock::now();

  RunRecord rec;
  rec.run_id = run_id;
  rec.config_hash = config.hash();
  rec.config_text = config.to_text();
  rec.refresh_policy = config.retrieval.refresh;
  rec.frozen_before = frozen_hashes(artifacts);

  const auto& train = artifacts.corpus->train;
  const int n = static_cast<int>(train.size());
  const int batch = std::min(config.train.batch, n);
  const int steps_per_epoch = n / batch;
  long total_steps = static_cast<long>(steps_per_epoch) * config.train.epochs;
  if (config.train.max_steps > 0) total_steps = std::min<long>(total_steps, config.train.max_steps);
  const int epochs = static_cast<int>((total_steps + steps_per_epoch - 1) / steps_per_epoch);

  TrainState state = init_state(config, artifacts, total_steps);
  std::ofstream metrics(run_dir / "metrics.jsonl");
  std::ofstream summary(run_dir / "summary.csv");
  summary << "epoch,caption,denoise,total,test_in_loss,test_out_loss,checkpoint\n";
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::string last_good = "(none)";

  for (int epoch = 1; epoch <= epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), state.data_rng);
    PromptCache cache;
    const bool cached = config.retrieval.refresh == "per-epoch";
    if (cached) cache = build_prompt_cache(config, artifacts, state.encoder);

    double sum_c = 0.0, sum_d = 0.0, sum_t = 0.0;
    int steps = 0;
    for (int s = 0; s < steps_per_epoch && state.step < total_steps; ++s) {
      std::vector<int> idx(order.begin() + s * batch, order.begin() + (s + 1) * batch);
      std::vector<int> cap_idx;
      for (int i : idx) cap_idx.push_back((epoch - 1 + i) % corpus::kCaptionsPerImage);
      StepLosses l;
      try {
        l = train_step(idx, cap_idx, state, config, artifacts, cached ? &cache : nullptr);
      } catch (const TrainingError& e) {
        throw TrainingError(std::string(e.what()) + "; last good checkpoint: " + last_good);
      }
      StepRecord sr{state.step, epoch, l.caption, l.denoise, l.total, l.lr, ""};
      if (config.train.trace_params) sr.param_hash = state.param_hash();
      json row{{"type", "step"}, {"step", sr.step},   {"epoch", epoch},
               {"caption", fmt::format("{:.9g}", l.caption)},
               {"denoise", fmt::format("{:.9g}", l.denoise)},
               {"total", fmt::format("{:.9g}", l.total)},
               {"lambda", config.effective_lambda()}, {"lr", l.lr}};
      if (!sr.param_hash.empty()) row["param_hash"] = sr.param_hash;
      metrics << row.dump() << '\n';
      rec.steps.push_back(sr);
      sum_c += l.caption;
      sum_d += l.denoise;
      sum_t += l.total;
      ++steps;
    }

    EpochRecord er;
    er.epoch = epoch;
    er.caption = sum_c / std::max(1, steps);
    er.denoise = sum_d / std::max(1, steps);
    er.total = sum_t / std::max(1, steps);
    er.test_in_loss = split_caption_loss(config, artifacts, state.encoder, state.captioner, corpus::Split::TestIn,
                                         config.train.eval_max_images);
    er.test_out_loss = split_caption_loss(config, artifacts, state.encoder, state.captioner, corpus::Split::TestOut,
                                          config.train.eval_max_images);
    const auto ck = run_dir / ("epoch-" + std::to_string(epoch));
    save_checkpoint(ck, config, workspace, run_id, state);
    er.checkpoint = ck.string();
    last_good = ck.string();
    if (config.train.keep_checkpoints == "last" && !rec.checkpoints.empty()) {
      fs::remove_all(rec.checkpoints.back());
      rec.checkpoints.pop_back();
    }
    rec.checkpoints.push_back(ck.string());
    if (config.train.eval_every > 0 && epoch % config.train.eval_every == 0 && epoch != epochs) {
      er.metrics = evaluate_model(config, artifacts, state.encoder, state.captioner, run_id,
                                  config.train.eval_max_images);
    }
    if (!(frozen_hashes(artifacts) == rec.frozen_before)) {
      throw TrainingError("frozen artifact changed during epoch " + std::to_string(epoch));
    }
    json row{{"type", "epoch"},        {"epoch", epoch},
             {"caption", er.caption},  {"denoise", er.denoise},
             {"total", er.total},      {"test_in_loss", er.test_in_loss},
             {"test_out_loss", er.test_out_loss}, {"checkpoint", er.checkpoint}};
    if (er.metrics) row["metrics"] = metrics_json(*er.metrics);
    metrics << row.dump() << '\n';
    metrics.flush();
    summary << fmt::format("{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f},{}\n", epoch, er.caption, er.denoise, er.total,
                           er.test_in_loss, er.test_out_loss, er.checkpoint);
    summary.flush();
    say(options.log, fmt::format("[{}] epoch {}/{} caption {:.4f} denoise {:.4f} total {:.4f} | test-in {:.4f} "
                                 "test-out {:.4f}",
                                 run_id, epoch, epochs, er.caption, er.denoise, er.total, er.test_in_loss,
                                 er.test_out_loss));
    rec.epochs.push_back(er);
  }

  rec.final_metrics = evaluate_model(config, artifacts, state.encoder, state.captioner, run_id,
                                     config.train.eval_max_images);
  rec.frozen_after = frozen_hashes(artifacts);
  rec.final_param_hash = state.param_hash();
  rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  metrics << json{{"type", "final"}, {"metrics", metrics_json(rec.final_metrics)}, {"seconds", rec.seconds}}.dump()
          << '\n';
  for (const auto& [split, m] : rec.final_metrics.splits) {
    say(options.log, fmt::format("[{}] {} BLEU-4 {:.4f} CIDEr-D {:.4f} recall obj/act/env {:.3f}/{:.3f}/{:.3f} "
                                 "retrieval@{} {:.3f}",
                                 run_id, split, m.bleu4, m.cider, m.recall.objects, m.recall.actions,
                                 m.recall.environments, config.retrieval.k, m.retrieval_recall));
  }
  rec.save(record_path);
  return rec;
}

std::vector<float> read_image(const fs::path& path, int channels, int size) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open image " + path.string());
  const std::size_t numel = static_cast<std::size_t>(channels) * size * size;
  if (path.extension() == ".ppm") {
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    in >> magic >> w >> h >> maxv;
    in.get();
    if (magic != "P6" || channels != 3 || w != size || h != size || maxv != 255) {
      throw std::invalid_argument("image must be a " + std::to_string(size) + "x" + std::to_string(size) +
                                  " binary PPM with maxval 255");
    }
    std::vector<unsigned char> raw(numel);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
      throw std::invalid_argument("truncated PPM " + path.string());
    }
    std::vector<float> out(numel);
    const std::size_t hw = static_cast<std::size_t>(size) * size;
    for (std::size_t p = 0; p < hw; ++p)
      for (int c = 0; c < channels; ++c)
        out[static_cast<std::size_t>(c) * hw + p] = raw[p * static_cast<std::size_t>(channels) + static_cast<std::size_t>(c)] / 127.5f - 1.0f;
    return out;
  }
  std::vector<float> out(numel);
  if (!in.read(reinterpret_cast<char*>(out.data()), static_cast<std::streamsize>(numel * sizeof(float))) ||
      in.peek() != std::char_traits<char>::eof()) {
    throw std::invalid_argument("raw image must hold exactly " + std::to_string(numel) + " float32 values");
  }
  return out;
}

void write_ppm(const fs::path& path, const std::vector<float>& image, int channels, int size) {
  if (channels != 3) throw std::invalid_argument("write_ppm: three channels required");
  std::ofstream out(path, std::ios::binary);
  out << "P6\n" << size << ' ' << size << "\n255\n";
  const std::size_t hw = static_cast<std::size_t>(size) * size;
  for (std::size_t p = 0; p < hw; ++p) {
    for (int c = 0; c < channels; ++c) {
      const float v = std::clamp(image[static_cast<std::size_t>(c) * hw + p], -1.0f, 1.0f);
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround((v + 1.0f) * 127.5f))));
    }
  }
}

}  // namespace ragcap::training
