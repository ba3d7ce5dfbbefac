#include "ragcap/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace ragcap::diffusion {

double NoiseSchedule::alpha_bar(int t) const {
  if (t < 1 || t > steps) {
    throw std::out_of_range("timestep " + std::to_string(t) + " outside [1, " + std::to_string(steps) + "]");
  }
  return alpha_bars[static_cast<std::size_t>(t - 1)];
}

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(beta_start > 0.0) || beta_start > beta_end || !(beta_end < 1.0)) {
    throw ConfigError("schedule requires 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  s.steps = steps;
  double prod = 1.0;
  for (int i = 0; i < steps; ++i) {
    const double beta =
        steps == 1 ? beta_start : beta_start + (beta_end - beta_start) * i / static_cast<double>(steps - 1);
    s.betas.push_back(beta);
    s.alphas.push_back(1.0 - beta);
    prod *= 1.0 - beta;
    s.alpha_bars.push_back(prod);
  }
  return s;
}

template <typename T>
std::vector<T> forward_noise(const std::vector<T>& x0, int t, const std::vector<T>& eps,
                             const NoiseSchedule& schedule) {
  if (x0.size() != eps.size()) throw std::invalid_argument("forward_noise: eps must match x0 in size");
  const double ab = schedule.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T b = static_cast<T>(std::sqrt(1.0 - ab));
  std::vector<T> out(x0.size());
  for (std::size_t i = 0; i < x0.size(); ++i) out[i] = a * x0[i] + b * eps[i];
  return out;
}

template <typename T>
ag::Var<T> timestep_embedding(const std::vector<int>& t, int dim) {
  const int half = dim / 2;
  const int batch = static_cast<int>(t.size());
  std::vector<T> v(static_cast<std::size_t>(batch) * dim, T(0));
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * i / half);
      const double arg = t[b] * freq;
      v[static_cast<std::size_t>(b) * dim + i] = static_cast<T>(std::sin(arg));
      v[static_cast<std::size_t>(b) * dim + half + i] = static_cast<T>(std::cos(arg));
    }
  }
  return ag::Var<T>::from({batch, dim}, std::move(v));
}

template <typename T>
Denoiser<T>::Denoiser(const DenoiserConfig& config, std::uint64_t seed) : config_(config) {
  if (config.image_size % 4 != 0) throw std::invalid_argument("denoiser: image size must be divisible by 4");
  ag::Initializer init(seed);
  const int c = config.width;
  auto block = [&](int in, int out) {
    Block b;
    b.conv = ag::Conv2d<T>(in, out, 3, init);
    b.time_mod = ag::Linear<T>(config.time_dim, 2 * out, init, true, 0.5);
    b.cond_mod = ag::Linear<T>(config.cond_dim, 2 * out, init, false, 0.5);
    return b;
  };
  time_in_ = ag::Linear<T>(config.time_dim, config.time_dim, init);
  in_conv_ = ag::Conv2d<T>(config.channels, c, 3, init);
  down1_ = block(c, c);
  down2_ = block(c, 2 * c);
  mid_ = block(2 * c, 2 * c);
  up2_ = block(4 * c, c);
  up1_ = block(2 * c, c);
  out_conv_ = ag::Conv2d<T>(c, config.channels, 3, init);
  for (auto& v : out_conv_.w.value()) v = T(0);
  for (auto& v : out_conv_.b.value()) v = T(0);
}

template <typename T>
ag::Var<T> Denoiser<T>::run_block(const Block& block, const ag::Var<T>& x, const ag::Var<T>& temb,
                                  const ag::Var<T>& z) const {
  const auto gb = ag::add(block.time_mod(temb), block.cond_mod(z));
  return ag::silu(ag::film(block.conv(x), gb));
}

template <typename T>
ag::Var<T> Denoiser<T>::predict(const ag::Var<T>& x_t, const std::vector<int>& t, const ag::Var<T>& z) const {
  const auto& c = config_;
  if (x_t.rank() != 4 || x_t.dim(1) != c.channels || x_t.dim(2) != c.image_size || x_t.dim(3) != c.image_size) {
    throw std::invalid_argument("predict_noise: bad x_t shape " + ag::shape_str(x_t.shape()));
  }
  const int batch = x_t.dim(0);
  if (static_cast<int>(t.size()) != batch || z.rank() != 2 || z.dim(0) != batch || z.dim(1) != c.cond_dim) {
    throw std::invalid_argument("predict_noise: t and z must have one row per sample");
  }
  for (T v : x_t.value()) {
    if (!std::isfinite(v)) throw std::invalid_argument("predict_noise: non-finite input");
  }
  for (T v : z.value()) {
    if (!std::isfinite(v)) throw std::invalid_argument("predict_noise: non-finite condition");
  }
  ++calls_;

  const auto temb = ag::silu(time_in_(timestep_embedding<T>(t, c.time_dim)));
  const auto h0 = in_conv_(x_t);
  const auto d1 = run_block(down1_, h0, temb, z);
  const auto d2 = run_block(down2_, ag::avg_pool2(d1), temb, z);
  const auto m = run_block(mid_, ag::avg_pool2(d2), temb, z);
  const auto u2 = run_block(up2_, ag::concat_channels(ag::upsample2(m), d2), temb, z);
  const auto u1 = run_block(up1_, ag::concat_channels(ag::upsample2(u2), d1), temb, z);
  return out_conv_(u1);
}

template <typename T>
ag::ParamList<T> Denoiser<T>::params() const {
  ag::ParamList<T> out;
  time_in_.collect(out, "denoiser.time_in");
  in_conv_.collect(out, "denoiser.in_conv");
  const std::pair<const char*, const Block*> blocks[] = {
      {"down1", &down1_}, {"down2", &down2_}, {"mid", &mid_}, {"up2", &up2_}, {"up1", &up1_}};
  for (const auto& [name, b] : blocks) {
    const std::string prefix = std::string("denoiser.") + name;
    b->conv.collect(out, prefix + ".conv");
    b->time_mod.collect(out, prefix + ".time_mod");
    b->cond_mod.collect(out, prefix + ".cond_mod");
  }
  out_conv_.collect(out, "denoiser.out_conv");
  return out;
}

template <typename T>
void Denoiser<T>::freeze() {
  ag::set_requires_grad(params(), false);
  frozen_ = true;
}

template <typename T>
DenoiseDraw<T> draw_noisy_batch(const ag::Var<T>& x0, const NoiseSchedule& schedule, std::mt19937_64& rng) {
  const int batch = x0.dim(0);
  const std::size_t per = x0.numel() / static_cast<std::size_t>(batch);
  std::uniform_int_distribution<int> pick_t(1, schedule.steps);
  std::normal_distribution<double> normal(0.0, 1.0);

  DenoiseDraw<T> d;
  std::vector<T> eps(x0.numel());
  std::vector<T> xt(x0.numel());
  for (int b = 0; b < batch; ++b) {
    const int t = pick_t(rng);
    d.t.push_back(t);
    const double ab = schedule.alpha_bar(t);
    const T sa = static_cast<T>(std::sqrt(ab));
    const T sb = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t idx = static_cast<std::size_t>(b) * per + i;
      eps[idx] = static_cast<T>(normal(rng));
      xt[idx] = sa * x0.value()[idx] + sb * eps[idx];
    }
  }
  d.eps = ag::Var<T>::from(x0.shape(), std::move(eps));
  d.x_t = ag::Var<T>::from(x0.shape(), std::move(xt));
  return d;
}

template <typename T>
ag::Var<T> denoise_loss_on(const DenoiseDraw<T>& draw, const ag::Var<T>& z, const Denoiser<T>& denoiser) {
  return ag::mse(denoiser.predict(draw.x_t, draw.t, z), draw.eps);
}

template <typename T>
ag::Var<T> denoise_loss(const ag::Var<T>& x0, const std::function<ag::Var<T>(const ag::Var<T>&)>& condition,
                        const Denoiser<T>& denoiser, const NoiseSchedule& schedule, std::mt19937_64& rng) {
  const auto draw = draw_noisy_batch(x0, schedule, rng);
  return denoise_loss_on(draw, condition(x0), denoiser);
}

#define RAGCAP_INSTANTIATE(T)                                                                              \
  template std::vector<T> forward_noise(const std::vector<T>&, int, const std::vector<T>&,                 \
                                        const NoiseSchedule&);                                             \
  template ag::Var<T> timestep_embedding<T>(const std::vector<int>&, int);                                 \
  template class Denoiser<T>;                                                                              \
  template DenoiseDraw<T> draw_noisy_batch(const ag::Var<T>&, const NoiseSchedule&, std::mt19937_64&);     \
  template ag::Var<T> denoise_loss_on(const DenoiseDraw<T>&, const ag::Var<T>&, const Denoiser<T>&);       \
  template ag::Var<T> denoise_loss(const ag::Var<T>&, const std::function<ag::Var<T>(const ag::Var<T>&)>&, \
                                   const Denoiser<T>&, const NoiseSchedule&, std::mt19937_64&);

RAGCAP_INSTANTIATE(float)
RAGCAP_INSTANTIATE(double)
#undef RAGCAP_INSTANTIATE

}  // namespace ragcap::diffusion
