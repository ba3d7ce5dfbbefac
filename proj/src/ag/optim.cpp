#include "ragcap/ag/optim.hpp"

#include <cmath>
#include <numbers>

namespace ragcap::ag {

AdamW::AdamW(ParamList<float> params, Options options)
    : params_(std::move(params)), options_(options) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.emplace_back(p.var.numel(), 0.0f);
    v_.emplace_back(p.var.numel(), 0.0f);
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

void AdamW::step(double lr) {
  ++steps_;
  double sq = 0.0;
  for (const auto& p : params_)
    for (float g : p.var.grad()) sq += static_cast<double>(g) * g;
  last_grad_norm_ = std::sqrt(sq);
  const double clip = (options_.clip_norm > 0.0 && last_grad_norm_ > options_.clip_norm)
                          ? options_.clip_norm / last_grad_norm_
                          : 1.0;

  const double bc1 = 1.0 - std::pow(options_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(options_.beta2, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto var = params_[i].var;
    auto grad = var.grad();
    if (grad.empty()) continue;
    auto value = var.value();
    const bool decay = var.rank() >= 2 && options_.weight_decay > 0.0;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = static_cast<double>(grad[j]) * clip;
      m[j] = static_cast<float>(options_.beta1 * m[j] + (1.0 - options_.beta1) * g);
      v[j] = static_cast<float>(options_.beta2 * v[j] + (1.0 - options_.beta2) * g * g);
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      double w = value[j];
      if (decay) w -= lr * options_.weight_decay * w;
      w -= lr * mhat / (std::sqrt(vhat) + options_.eps);
      value[j] = static_cast<float>(w);
    }
  }
  zero_grad();
}

double cosine_lr(double base, long step, long total, long warmup) {
  if (total <= 0) return base;
  if (warmup > 0 && step < warmup) return base * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup) / static_cast<double>(std::max(1L, total - warmup)));
  return base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace ragcap::ag
