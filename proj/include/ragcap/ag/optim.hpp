#pragma once

#include <vector>

#include "ragcap/ag/layers.hpp"

namespace ragcap::ag {

/// Adam with decoupled weight decay. Decay applies to rank>=2 tensors only.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double clip_norm = 1.0;  // <= 0 disables global-norm clipping
  };

  AdamW(ParamList<float> params, Options options);

  /// Applies one update using the accumulated gradients, then clears them.
  void step(double lr);
  void zero_grad();
  double last_grad_norm() const { return last_grad_norm_; }
  long steps() const { return steps_; }

 private:
  ParamList<float> params_;
  Options options_;
  std::vector<std::vector<float>> m_, v_;
  long steps_ = 0;
  double last_grad_norm_ = 0.0;
};

/// Cosine decay from `base` to 0 over `total` steps with linear warm-up.
double cosine_lr(double base, long step, long total, long warmup);

}  // namespace ragcap::ag
