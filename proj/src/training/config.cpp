#include "ragcap/config.hpp"

#include <fmt/format.h>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fstream>
#include <set>
#include <sstream>

#include "ragcap/ag/archive.hpp"

namespace ragcap::training {

namespace {

std::string show(int v) { return std::to_string(v); }
std::string show(std::uint64_t v) { return std::to_string(v); }
std::string show(double v) { return fmt::format("{}", v); }
std::string show(bool v) { return v ? "true" : "false"; }
std::string show(const std::string& v) { return v; }

void parse(const std::string& key, const std::string& text, int& out) {
  std::size_t used = 0;
  try {
    out = std::stoi(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ConfigError(key + ": expected an integer, got '" + text + "'");
}

void parse(const std::string& key, const std::string& text, std::uint64_t& out) {
  std::size_t used = 0;
  try {
    if (!text.empty() && text[0] != '-') out = std::stoull(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
}

void parse(const std::string& key, const std::string& text, double& out) {
  std::size_t used = 0;
  try {
    out = std::stod(text, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != text.size()) throw ConfigError(key + ": expected a number, got '" + text + "'");
}

void parse(const std::string& key, const std::string& text, bool& out) {
  if (text == "true" || text == "1" || text == "on" || text == "yes") {
    out = true;
  } else if (text == "false" || text == "0" || text == "off" || text == "no") {
    out = false;
  } else {
    throw ConfigError(key + ": expected a boolean, got '" + text + "'");
  }
}

void parse(const std::string&, const std::string& text, std::string& out) { out = text; }

template <typename Cfg, typename V>
void visit(Cfg& c, V&& v) {
  v("seeds.corpus", c.seeds.corpus);
  v("seeds.init", c.seeds.init);
  v("seeds.data", c.seeds.data);

  v("corpus.train_size", c.corpus.train_size);
  v("corpus.test_in_size", c.corpus.test_in_size);
  v("corpus.test_out_size", c.corpus.test_out_size);
  v("corpus.image_size", c.corpus.image_size);
  v("corpus.max_objects", c.corpus.max_objects);

  v("encoder.patch", c.encoder.patch);
  v("encoder.d_model", c.encoder.d_model);
  v("encoder.d_emb", c.encoder.d_emb);
  v("encoder.heads", c.encoder.heads);
  v("encoder.blocks", c.encoder.blocks);
  v("encoder.n_queries", c.encoder.n_queries);
  v("encoder.mlp_ratio", c.encoder.mlp_ratio);

  v("warmup.epochs", c.warmup.epochs);
  v("warmup.batch", c.warmup.batch);
  v("warmup.lr", c.warmup.lr);
  v("warmup.temperature", c.warmup.temperature);
  v("warmup.tower_hidden", c.warmup.tower_hidden);

  v("diffusion.steps", c.diffusion.steps);
  v("diffusion.beta_start", c.diffusion.beta_start);
  v("diffusion.beta_end", c.diffusion.beta_end);
  v("diffusion.width", c.diffusion.width);
  v("diffusion.time_dim", c.diffusion.time_dim);
  v("diffusion.pretrain_epochs", c.diffusion.pretrain_epochs);
  v("diffusion.pretrain_batch", c.diffusion.pretrain_batch);
  v("diffusion.pretrain_lr", c.diffusion.pretrain_lr);
  v("diffusion.condition_dropout", c.diffusion.condition_dropout);
  v("diffusion.pretrain_condition", c.diffusion.pretrain_condition);

  v("retrieval.k", c.retrieval.k);
  v("retrieval.top_n", c.retrieval.top_n);
  v("retrieval.db_fraction", c.retrieval.db_fraction);
  v("retrieval.refresh", c.retrieval.refresh);

  v("captioner.heads", c.captioner.heads);
  v("captioner.mlp_ratio", c.captioner.mlp_ratio);
  v("captioner.n_text_queries", c.captioner.n_text_queries);
  v("captioner.text_blocks", c.captioner.text_blocks);
  v("captioner.decoder_blocks", c.captioner.decoder_blocks);
  v("captioner.max_len", c.captioner.max_len);
  v("captioner.max_prompt_len", c.captioner.max_prompt_len);

  v("train.lambda", c.train.lambda);
  v("train.lr", c.train.lr);
  v("train.batch", c.train.batch);
  v("train.epochs", c.train.epochs);
  v("train.max_steps", c.train.max_steps);
  v("train.warmup_steps", c.train.warmup_steps);
  v("train.weight_decay", c.train.weight_decay);
  v("train.clip_norm", c.train.clip_norm);
  v("train.keep_checkpoints", c.train.keep_checkpoints);
  v("train.eval_every", c.train.eval_every);
  v("train.eval_max_images", c.train.eval_max_images);
  v("train.beam", c.train.beam);
  v("train.trace_params", c.train.trace_params);

  v("ablation.no_retrieval", c.ablation.no_retrieval);
  v("ablation.no_diffusion", c.ablation.no_diffusion);
  v("ablation.text_condition", c.ablation.text_condition);
  v("ablation.fused_image_feature", c.ablation.fused_image_feature);
  v("ablation.objects_only_db", c.ablation.objects_only_db);

  v("eval.min_in_action_recall", c.eval.min_in_action_recall);
  v("eval.min_in_bleu4", c.eval.min_in_bleu4);
  v("eval.min_out_cider", c.eval.min_out_cider);
}

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

}  // namespace

void TrainingConfig::resolve() {
  encoder.image_size = corpus.image_size;
  require(corpus.train_size > 0 && corpus.test_in_size > 0 && corpus.test_out_size > 0,
          "corpus sizes must be positive");
  require(corpus.image_size % encoder.patch == 0, "encoder.patch must divide corpus.image_size");
  require(corpus.image_size % 4 == 0, "corpus.image_size must be divisible by 4 for the denoiser");
  require(encoder.d_model % encoder.heads == 0, "encoder.d_model must be divisible by encoder.heads");
  require(encoder.d_model % captioner.heads == 0, "encoder.d_model must be divisible by captioner.heads");
  require(warmup.epochs >= 0 && warmup.batch > 0 && warmup.temperature > 0, "invalid warmup section");
  require(diffusion.steps >= 1, "diffusion.steps must be >= 1");
  require(diffusion.pretrain_condition == "caption" || diffusion.pretrain_condition == "none",
          "diffusion.pretrain_condition must be caption or none");
  require(diffusion.condition_dropout >= 0 && diffusion.condition_dropout <= 1,
          "diffusion.condition_dropout must lie in [0, 1]");
  require(retrieval.k >= 1, "retrieval.k must be >= 1");
  require(retrieval.top_n >= 1, "retrieval.top_n must be >= 1");
  require(retrieval.db_fraction > 0 && retrieval.db_fraction <= 1, "retrieval.db_fraction must lie in (0, 1]");
  require(retrieval.refresh == "per-step" || retrieval.refresh == "per-epoch",
          "retrieval.refresh must be per-step or per-epoch");
  require(captioner.max_len >= 2 && captioner.max_prompt_len >= 1, "captioner lengths too small");
  require(train.lambda >= 0, "train.lambda must be >= 0");
  require(train.batch > 0 && train.epochs > 0 && train.max_steps >= 0, "invalid train section");
  require(train.keep_checkpoints == "all" || train.keep_checkpoints == "last",
          "train.keep_checkpoints must be all or last");
  require(train.beam >= 1, "train.beam must be >= 1");
  require(!(ablation.no_retrieval && ablation.objects_only_db),
          "ablation.no_retrieval and ablation.objects_only_db are mutually exclusive");
  if (ablation.no_diffusion) train.lambda = 0.0;
  corpus_config().validate();
  diffusion::make_schedule(diffusion.steps, diffusion.beta_start, diffusion.beta_end);
}

corpus::CorpusConfig TrainingConfig::corpus_config() const {
  corpus::CorpusConfig c;
  c.train_size = corpus.train_size;
  c.test_in_size = corpus.test_in_size;
  c.test_out_size = corpus.test_out_size;
  c.image_size = corpus.image_size;
  c.max_objects = corpus.max_objects;
  return c;
}

captioner::CaptionerConfig TrainingConfig::captioner_config() const {
  captioner::CaptionerConfig c;
  c.d_model = encoder.d_model;
  c.heads = captioner.heads;
  c.mlp_ratio = captioner.mlp_ratio;
  c.n_image_queries = encoder.n_queries;
  c.n_text_queries = captioner.n_text_queries;
  c.text_blocks = captioner.text_blocks;
  c.decoder_blocks = captioner.decoder_blocks;
  c.max_len = captioner.max_len;
  c.max_prompt_len = captioner.max_prompt_len;
  return c;
}

diffusion::DenoiserConfig TrainingConfig::denoiser_config() const {
  diffusion::DenoiserConfig c;
  c.image_size = corpus.image_size;
  c.channels = encoder.channels;
  c.width = diffusion.width;
  c.cond_dim = encoder.d_emb;
  c.time_dim = diffusion.time_dim;
  return c;
}

std::map<std::string, std::string> TrainingConfig::flatten() const {
  std::map<std::string, std::string> out;
  visit(*this, [&](const std::string& key, const auto& value) { out[key] = show(value); });
  return out;
}

void TrainingConfig::set(const std::string& key, const std::string& value) {
  bool found = false;
  visit(*this, [&](const std::string& k, auto& field) {
    if (k != key) return;
    parse(key, value, field);
    found = true;
  });
  if (!found) throw ConfigError("unknown config key '" + key + "'");
}

void TrainingConfig::apply_override(const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: '" + assignment + "'");
  set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

std::string TrainingConfig::to_text() const {
  std::ostringstream out;
  std::string section;
  // visit order groups keys by section
  visit(*this, [&](const std::string& key, const auto& value) {
    const auto dot = key.find('.');
    const auto sec = key.substr(0, dot);
    if (sec != section) {
      out << (section.empty() ? "" : "\n") << '[' << sec << "]\n";
      section = sec;
    }
    out << key.substr(dot + 1) << " = " << show(value) << '\n';
  });
  return out.str();
}

TrainingConfig TrainingConfig::from_text(const std::string& text) {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  TrainingConfig c;
  const auto known = c.flatten();
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config key '" + section + "' is outside any section");
    for (const auto& [key, value] : body) {
      const std::string dotted = section + "." + key;
      if (!known.count(dotted)) throw ConfigError("unknown config key '" + dotted + "'");
      c.set(dotted, value.get_value<std::string>());
    }
  }
  return c;
}

TrainingConfig TrainingConfig::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config file not found: " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return from_text(buf.str());
}

void TrainingConfig::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << to_text();
}

std::string TrainingConfig::hash(const std::vector<std::string>& exclude) const {
  const std::set<std::string> skip(exclude.begin(), exclude.end());
  std::string canon;
  for (const auto& [k, v] : flatten())
    if (!skip.count(k)) canon += k + "=" + v + "\n";
  return ag::sha256_hex(canon);
}

std::string TrainingConfig::section_hash(const std::vector<std::string>& prefixes) const {
  std::string canon;
  for (const auto& [k, v] : flatten()) {
    for (const auto& p : prefixes) {
      if (k.rfind(p, 0) == 0) {
        canon += k + "=" + v + "\n";
        break;
      }
    }
  }
  return ag::sha256_hex(canon);
}

std::vector<std::string> config_diff(const TrainingConfig& a, const TrainingConfig& b) {
  const auto fa = a.flatten(), fb = b.flatten();
  std::vector<std::string> out;
  for (const auto& [k, v] : fa)
    if (fb.at(k) != v) out.push_back(k);
  return out;
}

}  // namespace ragcap::training
