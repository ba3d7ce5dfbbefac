#include <cmath>

#include "ragcap/ag/archive.hpp"
#include "ragcap/training.hpp"

namespace ragcap::training {

namespace {

std::vector<float> gather_images(const std::vector<corpus::CorpusSample>& split, const std::vector<int>& indices) {
  std::vector<float> out;
  for (int i : indices) {
    const auto& img = split[static_cast<std::size_t>(i)].image;
    out.insert(out.end(), img.begin(), img.end());
  }
  return out;
}

ag::Var<float> image_tensor(const TrainingConfig& config, std::vector<float> images, int batch) {
  return ag::Var<float>::from({batch, config.encoder.channels, config.corpus.image_size, config.corpus.image_size},
                              std::move(images));
}

std::string placeholder_prompt() { return retrieval::assemble_prompt({}); }

/// Teacher-forcing rows for a batch of captions, padded to the longest one.
void teacher_batch(const captioner::Vocab& vocab, const std::vector<std::string>& captions, int max_len,
                   std::vector<int>& input, std::vector<int>& target, int& length) {
  std::vector<std::vector<int>> toks;
  length = 2;
  for (const auto& c : captions) {
    toks.push_back(vocab.encode(c));
    length = std::max(length, static_cast<int>(toks.back().size()) + 1);
  }
  length = std::min(length, max_len);
  input.clear();
  target.clear();
  for (const auto& t : toks) {
    std::vector<int> in, tg;
    captioner::make_teacher_forcing(t, length, in, tg);
    input.insert(input.end(), in.begin(), in.end());
    target.insert(target.end(), tg.begin(), tg.end());
  }
}

}  // namespace

ag::ParamList<float> TrainState::trainable() const {
  auto p = encoder.params();
  const auto c = captioner.params();
  p.insert(p.end(), c.begin(), c.end());
  return p;
}

std::string TrainState::param_hash() const { return ag::params_hash(trainable()); }

TrainState init_state(const TrainingConfig& config, const Artifacts& artifacts, long total_steps) {
  TrainState s{artifacts.snapshot->encoder().clone(),
               captioner::Captioner(config.captioner_config(), artifacts.vocab, config.seeds.init),
               nullptr,
               0,
               total_steps,
               std::mt19937_64(config.seeds.data),
               std::mt19937_64(config.seeds.data ^ 0xd1ff05ULL)};
  ag::set_requires_grad(s.encoder.params(), true);
  ag::AdamW::Options o;
  o.weight_decay = config.train.weight_decay;
  o.clip_norm = config.train.clip_norm;
  s.optimizer = std::make_unique<ag::AdamW>(s.trainable(), o);
  return s;
}

std::vector<std::string> retrieve_prompts(const TrainingConfig& config, const Artifacts& artifacts,
                                          const std::vector<float>& queries, int batch,
                                          const std::vector<std::string>& exclude_ids) {
  const int d = config.encoder.d_emb;
  if (queries.size() != static_cast<std::size_t>(batch) * d) throw std::invalid_argument("retrieve_prompts: bad query rows");
  if (config.ablation.no_retrieval) return std::vector<std::string>(static_cast<std::size_t>(batch), placeholder_prompt());
  std::vector<std::string> out;
  for (int b = 0; b < batch; ++b) {
    const std::string ex = exclude_ids.empty() ? std::string() : exclude_ids[static_cast<std::size_t>(b)];
    out.push_back(retrieval::retrieve(*artifacts.database, queries.data() + static_cast<std::size_t>(b) * d,
                                      config.retrieval.k, config.retrieval.top_n, ex)
                      .prompt);
  }
  return out;
}

PromptCache build_prompt_cache(const TrainingConfig& config, const Artifacts& artifacts,
                               const encoder::ImageEncoder& encoder) {
  const auto& train = artifacts.corpus->train;
  const int n = static_cast<int>(train.size());
  if (config.ablation.no_retrieval) return PromptCache(static_cast<std::size_t>(n), placeholder_prompt());
  const auto z = encoder::embed_images(encoder, artifacts.corpus->images(corpus::Split::Train), n);
  std::vector<std::string> ids;
  for (const auto& s : train) ids.push_back(s.id);
  return retrieve_prompts(config, artifacts, z, n, ids);
}

StepLosses train_step(const std::vector<int>& indices, const std::vector<int>& caption_index, TrainState& state,
                      const TrainingConfig& config, const Artifacts& artifacts, const PromptCache* cache) {
  const auto& train = artifacts.corpus->train;
  const int batch = static_cast<int>(indices.size());
  if (batch == 0 || caption_index.size() != indices.size()) throw std::invalid_argument("train_step: bad batch");
  if (!artifacts.denoiser->frozen()) throw TrainingError("train_step: denoiser is not frozen");

  const auto x = image_tensor(config, gather_images(train, indices), batch);
  const auto out = state.encoder.encode(x);

  StepLosses losses;
  std::vector<std::string> ids, captions;
  for (int b = 0; b < batch; ++b) {
    const auto& s = train[static_cast<std::size_t>(indices[static_cast<std::size_t>(b)])];
    ids.push_back(s.id);
    captions.push_back(s.captions.at(static_cast<std::size_t>(caption_index[static_cast<std::size_t>(b)])));
  }
  if (cache != nullptr) {
    for (int i : indices) losses.prompts.push_back(cache->at(static_cast<std::size_t>(i)));
  } else {
    const auto zv = out.z.value();
    losses.prompts = retrieve_prompts(config, artifacts, std::vector<float>(zv.begin(), zv.end()), batch, ids);
  }

  const auto& cap = state.captioner;
  const auto pb = cap.tokenize_prompts(losses.prompts);
  const auto fused = cap.fuse(out.query_tokens, pb, config.ablation.fused_image_feature);
  std::vector<int> input, target;
  int length = 0;
  teacher_batch(cap.vocab(), captions, config.captioner.max_len, input, target, length);
  const auto logits = cap.decode_logits(fused.concat, batch, input, length);
  const auto cl = captioner::caption_loss(logits, target);
  auto total = cl;

  const double lambda = config.effective_lambda();
  if (!config.ablation.no_diffusion) {
    const auto draw = diffusion::draw_noisy_batch(x, artifacts.schedule, state.diffusion_rng);
    auto condition = [&] {
      if (!config.ablation.text_condition) return out.z;
      auto text = ag::Var<float>::from({batch, config.encoder.d_emb},
                                       artifacts.tower->embed_texts(losses.prompts, *artifacts.tagger));
      return ag::scale(ag::add(out.z, text), 0.5f);
    };
    ag::Var<float> dl;
    if (lambda == 0.0) {
      // Weight zero: evaluated and logged, kept out of the graph.
      ag::NoGradGuard no_grad;
      dl = diffusion::denoise_loss_on(draw, condition(), *artifacts.denoiser);
    } else {
      dl = diffusion::denoise_loss_on(draw, condition(), *artifacts.denoiser);
      total = ag::add(cl, ag::scale(dl, static_cast<float>(lambda)));
    }
    losses.denoise = dl.item();
    losses.denoise_evaluations = 1;
  }
  losses.caption = cl.item();
  losses.total = total.item();
  if (!std::isfinite(losses.caption) || !std::isfinite(losses.denoise) || !std::isfinite(losses.total)) {
    throw TrainingError("non-finite loss at step " + std::to_string(state.step) + " (caption " +
                        std::to_string(losses.caption) + ", denoise " + std::to_string(losses.denoise) + ")");
  }
  total.backward();
  losses.lr = ag::cosine_lr(config.train.lr, state.step, state.total_steps, config.train.warmup_steps);
  state.optimizer->step(losses.lr);
  ++state.step;
  return losses;
}

double split_caption_loss(const TrainingConfig& config, const Artifacts& artifacts, const encoder::ImageEncoder& enc,
                          const captioner::Captioner& cap, corpus::Split split, int max_images) {
  const auto& samples = artifacts.corpus->split(split);
  int n = static_cast<int>(samples.size());
  if (max_images > 0) n = std::min(n, max_images);
  ag::NoGradGuard no_grad;
  double sum = 0.0;
  for (int start = 0; start < n; start += 32) {
    const int b = std::min(32, n - start);
    std::vector<int> idx(static_cast<std::size_t>(b));
    std::vector<std::string> captions;
    for (int i = 0; i < b; ++i) {
      idx[static_cast<std::size_t>(i)] = start + i;
      captions.push_back(samples[static_cast<std::size_t>(start + i)].captions.front());
    }
    const auto out = enc.encode(image_tensor(config, gather_images(samples, idx), b));
    const auto zv = out.z.value();
    const auto prompts = retrieve_prompts(config, artifacts, std::vector<float>(zv.begin(), zv.end()), b, {});
    const auto fused = cap.fuse(out.query_tokens, cap.tokenize_prompts(prompts), config.ablation.fused_image_feature);
    std::vector<int> input, target;
    int length = 0;
    teacher_batch(cap.vocab(), captions, config.captioner.max_len, input, target, length);
    sum += captioner::caption_loss(cap.decode_logits(fused.concat, b, input, length), target).item() * b;
  }
  return sum / std::max(1, n);
}

Generated caption_images(const TrainingConfig& config, const Artifacts& artifacts, const encoder::ImageEncoder& enc,
                         const captioner::Captioner& cap, const std::vector<float>& images, int count) {
  const std::size_t per = static_cast<std::size_t>(config.encoder.channels) * config.corpus.image_size *
                          config.corpus.image_size;
  if (images.size() != per * static_cast<std::size_t>(count)) throw std::invalid_argument("caption_images: bad image stack");
  ag::NoGradGuard no_grad;
  Generated g;
  captioner::DecodeOptions opts;
  opts.beam = config.train.beam;
  for (int start = 0; start < count; start += 32) {
    const int b = std::min(32, count - start);
    std::vector<float> chunk(images.begin() + static_cast<std::ptrdiff_t>(per * start),
                             images.begin() + static_cast<std::ptrdiff_t>(per * (start + b)));
    const auto out = enc.encode(image_tensor(config, std::move(chunk), b));
    const auto zv = out.z.value();
    std::vector<float> q(zv.begin(), zv.end());
    const auto prompts = retrieve_prompts(config, artifacts, q, b, {});
    const auto fused = cap.fuse(out.query_tokens, cap.tokenize_prompts(prompts), config.ablation.fused_image_feature);
    for (const auto& ids : cap.generate(fused.concat, b, opts)) g.captions.push_back(cap.vocab().decode(ids));
    g.prompts.insert(g.prompts.end(), prompts.begin(), prompts.end());
    g.queries.insert(g.queries.end(), q.begin(), q.end());
  }
  return g;
}

eval::MetricReport evaluate_model(const TrainingConfig& config, const Artifacts& artifacts,
                                  const encoder::ImageEncoder& enc, const captioner::Captioner& cap,
                                  const std::string& run_id, int max_images) {
  eval::MetricReport report;
  report.run_id = run_id;
  report.config_hash = config.hash();
  for (corpus::Split split : {corpus::Split::TestIn, corpus::Split::TestOut}) {
    const auto& samples = artifacts.corpus->split(split);
    int n = static_cast<int>(samples.size());
    if (max_images > 0) n = std::min(n, max_images);
    std::vector<float> images;
    std::vector<std::vector<std::string>> refs;
    std::vector<corpus::SceneSpec> specs;
    std::vector<attr::AttributeRecord> truth;
    for (int i = 0; i < n; ++i) {
      const auto& s = samples[static_cast<std::size_t>(i)];
      images.insert(images.end(), s.image.begin(), s.image.end());
      refs.push_back(s.captions);
      specs.push_back(s.spec);
      truth.push_back(eval::spec_attributes(s.spec, *artifacts.tagger));
    }
    const auto g = caption_images(config, artifacts, enc, cap, images, n);
    eval::SplitMetrics m;
    m.bleu4 = eval::bleu4(g.captions, refs);
    m.cider = eval::cider(g.captions, refs);
    m.recall = eval::attribute_recall(g.captions, specs, *artifacts.tagger);
    m.retrieval_recall = eval::retrieval_recall(*artifacts.database, artifacts.entry_truth, g.queries, truth,
                                                config.retrieval.k);
    report.splits[corpus::split_name(split)] = m;
  }
  return report;
}

std::vector<std::string> threshold_violations(const TrainingConfig& config, const eval::MetricReport& report) {
  std::vector<std::string> out;
  auto check = [&](const char* split, double value, double minimum, const char* name) {
    if (minimum > 0.0 && value < minimum) {
      out.push_back(std::string(split) + " " + name + " " + std::to_string(value) + " < " + std::to_string(minimum));
    }
  };
  const auto& in = report.splits.at("test-in");
  const auto& outm = report.splits.at("test-out");
  check("test-in", in.recall.actions, config.eval.min_in_action_recall, "action recall");
  check("test-in", in.bleu4, config.eval.min_in_bleu4, "BLEU-4");
  check("test-out", outm.cider, config.eval.min_out_cider, "CIDEr-D");
  return out;
}

}  // namespace ragcap::training
