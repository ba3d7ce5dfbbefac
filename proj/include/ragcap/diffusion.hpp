#pragma once

// Denoising-diffusion guidance: noise schedule, forward noising, the
// conditional noise predictor and the single-draw denoising loss.

#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "ragcap/ag/layers.hpp"

namespace ragcap::diffusion {

/// Linear beta schedule. Timesteps are 1-based: t in [1, T].
struct NoiseSchedule {
  int steps = 0;
  std::vector<double> betas;
  std::vector<double> alphas;
  std::vector<double> alpha_bars;

  double alpha_bar(int t) const;
};

/// Raised for invalid schedule parameters.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

NoiseSchedule make_schedule(int steps, double beta_start, double beta_end);

/// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps, applied to one sample.
template <typename T>
std::vector<T> forward_noise(const std::vector<T>& x0, int t, const std::vector<T>& eps,
                             const NoiseSchedule& schedule);

/// Sinusoidal embedding of integer timesteps: [B, dim].
template <typename T>
ag::Var<T> timestep_embedding(const std::vector<int>& t, int dim);

struct DenoiserConfig {
  int image_size = 32;
  int channels = 3;
  int width = 32;
  int cond_dim = 64;
  int time_dim = 64;
  bool operator==(const DenoiserConfig&) const = default;
};

/// Two-level U-Net. Every conv block is modulated per channel by a scale and
/// shift computed from the timestep embedding and the condition vector z.
template <typename T>
class Denoiser {
 public:
  Denoiser(const DenoiserConfig& config, std::uint64_t seed);

  const DenoiserConfig& config() const { return config_; }

  /// x_t [B, C, H, W], t (one per sample), z [B, cond_dim] -> predicted noise.
  ag::Var<T> predict(const ag::Var<T>& x_t, const std::vector<int>& t, const ag::Var<T>& z) const;

  ag::ParamList<T> params() const;
  void freeze();
  bool frozen() const { return frozen_; }
  /// Number of predict() calls so far.
  long calls() const { return calls_; }

 private:
  struct Block {
    ag::Conv2d<T> conv;
    ag::Linear<T> time_mod;
    ag::Linear<T> cond_mod;
  };
  ag::Var<T> run_block(const Block& block, const ag::Var<T>& x, const ag::Var<T>& temb,
                       const ag::Var<T>& z) const;

  DenoiserConfig config_;
  ag::Linear<T> time_in_;
  ag::Conv2d<T> in_conv_;
  Block down1_, down2_, mid_, up2_, up1_;
  ag::Conv2d<T> out_conv_;
  bool frozen_ = false;
  mutable long calls_ = 0;
};

/// One (t, eps) draw per sample from `rng`; returns the mean squared error
/// between eps and the prediction. `condition` maps the clean batch to z so
/// gradients reach whatever produced it.
template <typename T>
struct DenoiseDraw {
  std::vector<int> t;
  ag::Var<T> eps;
  ag::Var<T> x_t;
};

template <typename T>
DenoiseDraw<T> draw_noisy_batch(const ag::Var<T>& x0, const NoiseSchedule& schedule,
                                std::mt19937_64& rng);

template <typename T>
ag::Var<T> denoise_loss(const ag::Var<T>& x0, const std::function<ag::Var<T>(const ag::Var<T>&)>& condition,
                        const Denoiser<T>& denoiser, const NoiseSchedule& schedule,
                        std::mt19937_64& rng);

/// Same loss for an already drawn batch and condition.
template <typename T>
ag::Var<T> denoise_loss_on(const DenoiseDraw<T>& draw, const ag::Var<T>& z, const Denoiser<T>& denoiser);

struct PretrainOptions {
  int epochs = 10;
  int batch = 32;
  double lr = 1e-3;
  /// Probability of replacing a sample's condition with the zero vector.
  double condition_dropout = 0.1;
  int eval_batch = 64;
  std::uint64_t seed = 0;
  std::function<void(int, double)> on_epoch;
};

struct PretrainRecord {
  double initial_loss = 0.0;
  std::vector<double> epoch_losses;  // fixed-draw evaluation loss after each epoch
  std::vector<double> train_losses;  // mean training loss per epoch
  std::string hash;                  // archive hash after freezing
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Images are [N, C, H, W] flattened. `condition(indices)` returns the
/// condition rows [indices.size(), cond_dim] for those samples; pass a
/// function returning zeros for unconditional pretraining. The denoiser is
/// frozen on return. Aborts with DivergenceError when the evaluation loss
/// exceeds twice its initial value for three consecutive epochs.
PretrainRecord pretrain_denoiser(Denoiser<float>& denoiser, const std::vector<float>& images, int count,
                                 const std::function<std::vector<float>(const std::vector<int>&)>& condition,
                                 const NoiseSchedule& schedule, const PretrainOptions& options);

std::string denoiser_hash(const Denoiser<float>& denoiser);

}  // namespace ragcap::diffusion
