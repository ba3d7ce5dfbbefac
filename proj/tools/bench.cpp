// Times forward/backward passes of the main networks at training batch size.

#include <chrono>
#include <cstdio>
#include <random>

#include "ragcap/diffusion.hpp"
#include "ragcap/encoder.hpp"

using namespace ragcap;
using Clock = std::chrono::steady_clock;

static double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

int main(int argc, char** argv) {
  const int batch = argc > 1 ? std::atoi(argv[1]) : 32;
  const int width = argc > 2 ? std::atoi(argv[2]) : 32;
  const int d_model = argc > 3 ? std::atoi(argv[3]) : 128;
  encoder::EncoderConfig ec;
  ec.d_model = d_model;
  encoder::ImageEncoder enc(ec, 1);
  diffusion::DenoiserConfig dc;
  dc.width = width;
  diffusion::Denoiser<float> den(dc, 2);
  den.freeze();
  const auto sched = diffusion::make_schedule(1000, 1e-4, 0.02);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<float> u(-1.f, 1.f);
  std::vector<float> img(static_cast<std::size_t>(batch) * 3 * 32 * 32);
  for (auto& v : img) v = u(rng);
  auto x = ag::Var<float>::from({batch, 3, 32, 32}, img);

  for (int rep = 0; rep < 3; ++rep) {
    auto t0 = Clock::now();
    auto out = enc.encode(x);
    const double t_enc = ms_since(t0);
    t0 = Clock::now();
    auto loss = diffusion::denoise_loss<float>(
        x, [&](const ag::Var<float>&) { return out.z; }, den, sched, rng);
    const double t_den = ms_since(t0);
    t0 = Clock::now();
    auto total = ag::add(loss, ag::mean(out.query_tokens));
    total.backward();
    const double t_bwd = ms_since(t0);
    std::printf("batch %d: encode %.1f ms, denoise fwd %.1f ms, backward %.1f ms\n", batch, t_enc, t_den,
                t_bwd);
  }
  return 0;
}
