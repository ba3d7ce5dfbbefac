#include "ragcap/captioner.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "ragcap/attributes.hpp"

namespace ragcap::captioner {

// ---- vocabulary ----------------------------------------------------------------

namespace {
const char* const kSpecials[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
}

Vocab::Vocab() {
  for (const char* s : kSpecials) add(s);
}

void Vocab::add(const std::string& token) {
  if (ids_.count(token)) return;
  ids_[token] = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
}

Vocab Vocab::build(const std::vector<std::string>& texts) {
  std::set<std::string> words;
  for (const auto& t : texts)
    for (auto& tok : attr::tokenize(t)) words.insert(std::move(tok));
  Vocab v;
  for (const auto& w : words) v.add(w);
  return v;
}

Vocab Vocab::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read vocab " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  if (lines.size() < 4) throw std::runtime_error("vocab file lacks the special-token header");
  for (int i = 0; i < 4; ++i)
    if (lines[static_cast<std::size_t>(i)] != kSpecials[i]) {
      throw std::runtime_error("vocab line " + std::to_string(i + 1) + " must be " + kSpecials[i]);
    }
  Vocab v;
  for (std::size_t i = 4; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    if (v.ids_.count(lines[i])) throw std::runtime_error("duplicate vocab token '" + lines[i] + "'");
    v.add(lines[i]);
  }
  return v;
}

void Vocab::save(const std::filesystem::path& path) const {
  std::ofstream os(path);
  for (const auto& t : tokens_) os << t << '\n';
  if (!os) throw std::runtime_error("cannot write vocab " + path.string());
}

int Vocab::id(const std::string& token) const {
  auto it = ids_.find(token);
  return it == ids_.end() ? kUnk : it->second;
}

std::vector<int> Vocab::encode(const std::string& text) const {
  std::vector<int> out;
  for (const auto& tok : attr::tokenize(text)) out.push_back(id(tok));
  return out;
}

std::string Vocab::decode(const std::vector<int>& ids) const {
  std::string out;
  for (int i : ids) {
    if (i == kEos) break;
    if (i == kPad || i == kBos) continue;
    if (!out.empty()) out += ' ';
    out += token(i);
  }
  return out;
}

// ---- model -----------------------------------------------------------------------

Captioner::Captioner(const CaptionerConfig& config, Vocab vocab, std::uint64_t seed)
    : config_(config), vocab_(std::move(vocab)) {
  if (config.d_model % config.heads != 0) throw ContractError("captioner: d_model must be divisible by heads");
  ag::Initializer init(seed);
  const int d = config.d_model, hidden = d * config.mlp_ratio, v = vocab_.size();
  text_embed_ = init.normal<float>({v, d}, 0.3);
  text_pos_ = init.normal<float>({config.max_prompt_len, d}, 0.1);
  for (int i = 0; i < config.text_blocks; ++i) text_blocks_.emplace_back(d, config.heads, hidden, init);
  text_ln_ = ag::LayerNorm<float>(d, init);
  text_qformer_ = ag::QueryBlock<float>(config.n_text_queries, d, config.heads, hidden, init, false);
  token_embed_ = init.normal<float>({v, d}, 0.3);
  dec_pos_ = init.normal<float>({config.max_len, d}, 0.1);
  ctx_pos_ = init.normal<float>({context_len(), d}, 0.1);
  for (int i = 0; i < config.decoder_blocks; ++i) dec_blocks_.emplace_back(d, config.heads, hidden, init);
  dec_ln_ = ag::LayerNorm<float>(d, init);
  head_ = ag::Linear<float>(d, v, init);
}

PromptBatch Captioner::tokenize_prompts(const std::vector<std::string>& prompts) const {
  PromptBatch pb;
  pb.batch = static_cast<int>(prompts.size());
  std::vector<std::vector<int>> rows;
  for (const auto& p : prompts) {
    auto ids = vocab_.encode(p);
    if (static_cast<int>(ids.size()) > config_.max_prompt_len - 1) ids.resize(static_cast<std::size_t>(config_.max_prompt_len - 1));
    ids.push_back(Vocab::kEos);
    pb.length = std::max(pb.length, static_cast<int>(ids.size()));
    rows.push_back(std::move(ids));
  }
  for (const auto& r : rows) {
    pb.valid.push_back(static_cast<int>(r.size()));
    pb.ids.insert(pb.ids.end(), r.begin(), r.end());
    pb.ids.insert(pb.ids.end(), static_cast<std::size_t>(pb.length) - r.size(), Vocab::kPad);
  }
  return pb;
}

ag::Var<float> Captioner::encode_prompt(const PromptBatch& prompts) const {
  const int b = prompts.batch, len = prompts.length;
  auto x = ag::add_rows_cyclic(ag::embedding(text_embed_, prompts.ids), ag::slice_per_sample(text_pos_, 1, 0, len));
  ag::AttentionSpec spec{.batch = b, .query_len = len, .key_len = len, .heads = 1, .key_valid = prompts.valid};
  for (const auto& blk : text_blocks_) x = blk(x, spec);
  return text_ln_(x);
}

ag::Var<float> Captioner::text_qformer(const ag::Var<float>& text_features, const PromptBatch& prompts) const {
  return text_qformer_(text_features, prompts.batch, prompts.length, prompts.valid);
}

FusedContext Captioner::fuse(const ag::Var<float>& image_query_tokens, const PromptBatch& prompts,
                             bool fuse_image) const {
  const int b = prompts.batch;
  if (image_query_tokens.rank() != 2 || image_query_tokens.dim(0) != b * config_.n_image_queries ||
      image_query_tokens.dim(1) != config_.d_model) {
    throw ContractError("fuse: image query tokens must be [B*" + std::to_string(config_.n_image_queries) + ", " +
                        std::to_string(config_.d_model) + "], got " + ag::shape_str(image_query_tokens.shape()));
  }
  const auto text = encode_prompt(prompts);
  FusedContext ctx;
  ctx.batch = b;
  ctx.fused_text = text_qformer(text, prompts);
  ctx.image_features = fuse_image ? text_qformer_.attend(image_query_tokens, config_.n_image_queries, text, b,
                                                         prompts.length, prompts.valid)
                                  : image_query_tokens;
  ctx.concat = ag::concat_per_sample(ctx.image_features, ctx.fused_text, b);
  return ctx;
}

ag::Var<float> Captioner::decode_logits(const ag::Var<float>& context, int batch, const std::vector<int>& input_ids,
                                        int length) const {
  const int p = context_len();
  if (length < 1 || length > config_.max_len) {
    throw ContractError("decode: prefix length " + std::to_string(length) + " exceeds max_len " +
                        std::to_string(config_.max_len));
  }
  if (static_cast<int>(input_ids.size()) != batch * length) throw ContractError("decode: input id count mismatch");
  if (context.rank() != 2 || context.dim(0) != batch * p) throw ContractError("decode: context rows mismatch");
  for (int b = 0; b < batch; ++b)
    if (input_ids[static_cast<std::size_t>(b) * length] != Vocab::kBos) throw ContractError("decode: prefix must start with BOS");

  const auto ctx = ag::add_rows_cyclic(context, ctx_pos_);
  const auto tok = ag::add_rows_cyclic(ag::embedding(token_embed_, input_ids), ag::slice_per_sample(dec_pos_, 1, 0, length));
  auto x = ag::concat_per_sample(ctx, tok, batch);
  ag::AttentionSpec spec{.batch = batch, .query_len = p + length, .key_len = p + length, .heads = 1, .key_valid = {},
                         .causal = true, .prefix = p};
  for (const auto& blk : dec_blocks_) x = blk(x, spec);
  return head_(dec_ln_(ag::slice_per_sample(x, batch, p, length)));
}

namespace {

std::vector<double> log_softmax_row(const float* row, int v) {
  const double mx = *std::max_element(row, row + v);
  double z = 0.0;
  for (int j = 0; j < v; ++j) z += std::exp(static_cast<double>(row[j]) - mx);
  const double lz = mx + std::log(z);
  std::vector<double> out(static_cast<std::size_t>(v));
  for (int j = 0; j < v; ++j) out[static_cast<std::size_t>(j)] = row[j] - lz;
  return out;
}

ag::Var<float> rows_of_sample(const ag::Var<float>& context, int sample, int rows, int copies) {
  const int d = context.dim(1);
  const auto begin = context.value().begin() + static_cast<std::ptrdiff_t>(sample) * rows * d;
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(copies) * rows * d);
  for (int c = 0; c < copies; ++c) out.insert(out.end(), begin, begin + static_cast<std::ptrdiff_t>(rows) * d);
  return ag::Var<float>::from({copies * rows, d}, std::move(out));
}

}  // namespace

std::vector<int> Captioner::beam_search(const ag::Var<float>& context_rows, int beam) const {
  struct Hyp {
    std::vector<int> ids;
    double logp = 0.0;
    bool done = false;
  };
  const int v = vocab_.size();
  std::vector<Hyp> live{Hyp{}};
  std::vector<Hyp> finished;
  for (int step = 0; step < config_.max_len && !live.empty(); ++step) {
    const int n = static_cast<int>(live.size());
    const int len = step + 1;
    std::vector<int> input;
    for (const auto& h : live) {
      input.push_back(Vocab::kBos);
      input.insert(input.end(), h.ids.begin(), h.ids.end());
    }
    const auto ctx = n == 1 ? context_rows : rows_of_sample(context_rows, 0, context_len(), n);
    const auto logits = decode_logits(ctx, n, input, len);
    std::vector<Hyp> cand;
    cand.reserve(static_cast<std::size_t>(n) * v);
    for (int i = 0; i < n; ++i) {
      const auto lp = log_softmax_row(logits.data() + (static_cast<std::size_t>(i) * len + len - 1) * v, v);
      for (int t = 0; t < v; ++t) {
        if (t == Vocab::kPad || t == Vocab::kBos) continue;
        Hyp h{live[static_cast<std::size_t>(i)].ids, live[static_cast<std::size_t>(i)].logp + lp[static_cast<std::size_t>(t)], t == Vocab::kEos};
        h.ids.push_back(t);
        cand.push_back(std::move(h));
      }
    }
    std::sort(cand.begin(), cand.end(), [](const Hyp& a, const Hyp& b) {
      if (a.logp != b.logp) return a.logp > b.logp;
      return a.ids < b.ids;
    });
    live.clear();
    for (std::size_t i = 0; i < cand.size() && static_cast<int>(i) < beam; ++i) {
      if (cand[i].done) {
        finished.push_back(std::move(cand[i]));
      } else {
        live.push_back(std::move(cand[i]));
      }
    }
    if (static_cast<int>(finished.size()) >= beam) live.clear();
  }
  for (auto& h : live) finished.push_back(std::move(h));
  auto score = [](const Hyp& h) { return h.logp / static_cast<double>(std::max<std::size_t>(1, h.ids.size())); };
  const auto best = std::min_element(finished.begin(), finished.end(), [&](const Hyp& a, const Hyp& b) {
    const double sa = score(a), sb = score(b);
    if (sa != sb) return sa > sb;
    return a.ids < b.ids;
  });
  auto ids = best->ids;
  if (!ids.empty() && ids.back() == Vocab::kEos) ids.pop_back();
  return ids;
}

std::vector<std::vector<int>> Captioner::generate(const ag::Var<float>& context, int batch,
                                                  const DecodeOptions& options) const {
  ag::NoGradGuard no_grad;
  const int p = context_len();
  if (context.rank() != 2 || context.dim(0) != batch * p) throw ContractError("generate: context rows mismatch");
  std::vector<std::vector<int>> out(static_cast<std::size_t>(batch));
  if (options.beam > 1 || options.beam_search) {
    for (int b = 0; b < batch; ++b) out[static_cast<std::size_t>(b)] = beam_search(rows_of_sample(context, b, p, 1), options.beam);
    return out;
  }
  const int v = vocab_.size();
  std::vector<bool> done(static_cast<std::size_t>(batch), false);
  for (int step = 0; step < config_.max_len; ++step) {
    const int len = step + 1;
    std::vector<int> input;
    for (int b = 0; b < batch; ++b) {
      input.push_back(Vocab::kBos);
      input.insert(input.end(), out[static_cast<std::size_t>(b)].begin(), out[static_cast<std::size_t>(b)].end());
      input.resize(static_cast<std::size_t>(b + 1) * len, Vocab::kPad);
    }
    const auto logits = decode_logits(context, batch, input, len);
    bool all_done = true;
    for (int b = 0; b < batch; ++b) {
      if (done[static_cast<std::size_t>(b)]) continue;
      const auto lp = log_softmax_row(logits.data() + (static_cast<std::size_t>(b) * len + len - 1) * v, v);
      int best = -1;
      for (int t = 0; t < v; ++t) {
        if (t == Vocab::kPad || t == Vocab::kBos) continue;
        if (best < 0 || lp[static_cast<std::size_t>(t)] > lp[static_cast<std::size_t>(best)]) best = t;
      }
      if (best == Vocab::kEos) {
        done[static_cast<std::size_t>(b)] = true;
      } else {
        out[static_cast<std::size_t>(b)].push_back(best);
        all_done = false;
      }
    }
    if (all_done) break;
  }
  return out;
}

ag::ParamList<float> Captioner::params() const {
  ag::ParamList<float> out;
  out.push_back({"captioner.text_embed", text_embed_});
  out.push_back({"captioner.text_pos", text_pos_});
  for (std::size_t i = 0; i < text_blocks_.size(); ++i) text_blocks_[i].collect(out, "captioner.text_block" + std::to_string(i));
  text_ln_.collect(out, "captioner.text_ln");
  text_qformer_.collect(out, "captioner.text_qformer");
  out.push_back({"captioner.token_embed", token_embed_});
  out.push_back({"captioner.dec_pos", dec_pos_});
  out.push_back({"captioner.ctx_pos", ctx_pos_});
  for (std::size_t i = 0; i < dec_blocks_.size(); ++i) dec_blocks_[i].collect(out, "captioner.dec_block" + std::to_string(i));
  dec_ln_.collect(out, "captioner.dec_ln");
  head_.collect(out, "captioner.head");
  return out;
}

void make_teacher_forcing(const std::vector<int>& tokens, int length, std::vector<int>& input,
                          std::vector<int>& target) {
  std::vector<int> in{Vocab::kBos};
  in.insert(in.end(), tokens.begin(), tokens.end());
  std::vector<int> tg(tokens.begin(), tokens.end());
  tg.push_back(Vocab::kEos);
  in.resize(static_cast<std::size_t>(length), Vocab::kPad);
  tg.resize(static_cast<std::size_t>(length), Vocab::kPad);
  input.insert(input.end(), in.begin(), in.end());
  target.insert(target.end(), tg.begin(), tg.end());
}

template <typename T>
ag::Var<T> caption_loss(const ag::Var<T>& logits, const std::vector<int>& targets) {
  if (std::all_of(targets.begin(), targets.end(), [](int t) { return t == Vocab::kPad; })) {
    throw ContractError("caption_loss: every target position is padding");
  }
  return ag::cross_entropy(logits, targets, Vocab::kPad);
}

template ag::Var<float> caption_loss(const ag::Var<float>&, const std::vector<int>&);
template ag::Var<double> caption_loss(const ag::Var<double>&, const std::vector<int>&);

}  // namespace ragcap::captioner
