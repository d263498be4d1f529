// Times one forward and one forward+backward pass of the denoiser.

#include <chrono>
#include <cstdio>
#include <cstdlib>

#include "flashclear/model.hpp"

using namespace flashclear;

int main(int argc, char** argv) {
  UNetConfig cfg;
  const int batch = argc > 1 ? std::atoi(argv[1]) : 8;
  if (argc > 4) {
    cfg.widths = {std::atoi(argv[2]), std::atoi(argv[3]), std::atoi(argv[4])};
  }
  if (argc > 5) cfg.attn_dim = std::atoi(argv[5]);
  Denoiser<float> model(cfg, 1);
  std::printf("params: %zu\n", model.params().total_elements());
  Rng rng(3);
  Tensor<float> x({batch, cfg.input_channels(), cfg.latent_size, cfg.latent_size});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  for (int i = 0; i < batch; ++i)
    for (int p = 0; p < cfg.latent_size * cfg.latent_size; ++p)
      x[(static_cast<std::size_t>(i) * 7 + 3) * 1024 + p] = 1.0f;
  Tensor<float> patches({batch, 4, cfg.cond_patch, cfg.cond_patch}, 0.5f);
  std::vector<int> ts(batch, 500);
  ModelInput<float> in{x, 3};
  for (int rep = 0; rep < 3; ++rep) {
    auto t0 = std::chrono::steady_clock::now();
    {
      nn::Tape<float> tape(false);
      auto c = model.embed(tape, patches);
      auto out = model.denoise(tape, in, ts, c);
    }
    auto t1 = std::chrono::steady_clock::now();
    {
      nn::Tape<float> tape(true);
      auto c = model.embed(tape, patches);
      auto out = model.denoise(tape, in, ts, c);
      auto loss = nn::mean(nn::mul(out.eps, out.eps));
      tape.backward(loss);
    }
    auto t2 = std::chrono::steady_clock::now();
    std::printf("fwd %.3fs  fwd+bwd %.3fs\n", std::chrono::duration<double>(t1 - t0).count(),
                std::chrono::duration<double>(t2 - t1).count());
  }
}
