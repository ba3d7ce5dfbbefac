#include <algorithm>
#include <cmath>
#include <numeric>

#include "ragcap/ag/archive.hpp"
#include "ragcap/ag/optim.hpp"
#include "ragcap/diffusion.hpp"

namespace ragcap::diffusion {

std::string denoiser_hash(const Denoiser<float>& denoiser) { return ag::params_hash(denoiser.params()); }

namespace {

ag::Var<float> gather(const std::vector<float>& images, const std::vector<int>& idx, const DenoiserConfig& c) {
  const std::size_t per = static_cast<std::size_t>(c.channels) * c.image_size * c.image_size;
  std::vector<float> buf;
  buf.reserve(per * idx.size());
  for (int i : idx) {
    const auto begin = images.begin() + static_cast<std::ptrdiff_t>(per * static_cast<std::size_t>(i));
    buf.insert(buf.end(), begin, begin + static_cast<std::ptrdiff_t>(per));
  }
  return ag::Var<float>::from({static_cast<int>(idx.size()), c.channels, c.image_size, c.image_size},
                              std::move(buf));
}

}  // namespace

PretrainRecord pretrain_denoiser(Denoiser<float>& denoiser, const std::vector<float>& images, int count,
                                 const std::function<std::vector<float>(const std::vector<int>&)>& condition,
                                 const NoiseSchedule& schedule, const PretrainOptions& options) {
  const auto& c = denoiser.config();
  if (count <= 0) throw std::invalid_argument("pretrain_denoiser: empty image set");
  PretrainRecord rec;

  // Fixed evaluation batch with fixed (t, eps) draws so epoch losses are comparable.
  std::vector<int> eval_idx(static_cast<std::size_t>(std::min(options.eval_batch, count)));
  std::iota(eval_idx.begin(), eval_idx.end(), 0);
  std::mt19937_64 eval_rng(options.seed ^ 0xe7a1ULL);
  const auto eval_x0 = gather(images, eval_idx, c);
  const auto eval_draw = draw_noisy_batch(eval_x0, schedule, eval_rng);
  const auto eval_z = ag::Var<float>::from({static_cast<int>(eval_idx.size()), c.cond_dim}, condition(eval_idx));
  auto evaluate = [&] {
    ag::NoGradGuard no_grad;
    return static_cast<double>(denoise_loss_on(eval_draw, eval_z, denoiser).item());
  };
  rec.initial_loss = evaluate();

  if (options.epochs > 0) {
    ag::set_requires_grad(denoiser.params(), true);
    ag::AdamW opt(denoiser.params(), {});
    const int batch = std::min(options.batch, count);
    const int steps_per_epoch = count / batch;
    const long total = static_cast<long>(steps_per_epoch) * options.epochs;
    std::mt19937_64 rng(options.seed);
    std::bernoulli_distribution drop(options.condition_dropout);
    std::vector<int> order(static_cast<std::size_t>(count));
    std::iota(order.begin(), order.end(), 0);
    long step = 0;
    int above = 0;
    for (int epoch = 0; epoch < options.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double sum = 0.0;
      for (int s = 0; s < steps_per_epoch; ++s) {
        std::vector<int> idx(order.begin() + s * batch, order.begin() + (s + 1) * batch);
        auto zrows = condition(idx);
        for (int b = 0; b < batch; ++b)
          if (drop(rng))
            std::fill_n(zrows.begin() + static_cast<std::ptrdiff_t>(b) * c.cond_dim, c.cond_dim, 0.0f);
        const auto x0 = gather(images, idx, c);
        const auto z = ag::Var<float>::from({batch, c.cond_dim}, std::move(zrows));
        auto loss = denoise_loss<float>(x0, [&](const ag::Var<float>&) { return z; }, denoiser, schedule, rng);
        sum += loss.item();
        loss.backward();
        opt.step(ag::cosine_lr(options.lr, step++, total, std::min<long>(100, total / 10)));
      }
      rec.train_losses.push_back(sum / std::max(1, steps_per_epoch));
      const double ev = evaluate();
      rec.epoch_losses.push_back(ev);
      if (options.on_epoch) options.on_epoch(epoch, ev);
      above = (!std::isfinite(ev) || ev > 2.0 * rec.initial_loss) ? above + 1 : 0;
      if (above >= 3) {
        throw DivergenceError("denoiser pretraining diverged: loss " + std::to_string(ev) + " vs initial " +
                              std::to_string(rec.initial_loss) + " for 3 consecutive epochs");
      }
    }
  }
  denoiser.freeze();
  rec.hash = denoiser_hash(denoiser);
  return rec;
}

}  // namespace ragcap::diffusion
