#pragma once

#include <optional>
#include <span>
#include <vector>

#include "flashclear/tensor.hpp"

namespace flashclear {

// Discrete-time noise schedule. alpha_bars[t] is the cumulative product of
// (1 - betas[s]) for s <= t.
class NoiseSchedule {
 public:
  NoiseSchedule(std::vector<double> betas);

  int total_steps() const { return static_cast<int>(betas_.size()); }
  const std::vector<double>& betas() const { return betas_; }
  const std::vector<double>& alpha_bars() const { return alpha_bars_; }
  double alpha_bar(int t) const;

 private:
  std::vector<double> betas_;
  std::vector<double> alpha_bars_;
};

NoiseSchedule make_linear_schedule(int total_steps, double beta_start = 1e-4,
                                   double beta_end = 0.02);

// Strictly descending sampling timesteps, first entry at the highest noise.
struct TimestepPlan {
  std::vector<int> taus;
  int n_steps() const { return static_cast<int>(taus.size()); }
};

// tau_i = ceil(T * i / n) - 1 for i = n..1.
TimestepPlan make_timestep_plan(int n_steps, int total_steps);

// Marks the step after the last planned timestep: alpha_bar is taken as 1.
inline constexpr int kFinalStep = -1;

// sqrt(ab_t) * z0 + sqrt(1 - ab_t) * eps
template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, int t, const Tensor<T>& eps,
                          const NoiseSchedule& sched);

// Deterministic DDIM update from tau_i to tau_prev (or kFinalStep).
template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_tau, const Tensor<T>& eps_hat, int tau_i, int tau_prev,
                    const NoiseSchedule& sched);

// Clean-latent estimate implied by a noise prediction.
template <typename T>
Tensor<T> predict_x0(const Tensor<T>& z_t, const Tensor<T>& eps_hat, int t,
                     const NoiseSchedule& sched);

// Noise estimate consistent with the clean estimate clamped to [lo, hi].
// Keeps long sampling trajectories inside the data range when the model
// overshoots at high noise levels.
template <typename T>
Tensor<T> clip_noise_estimate(const Tensor<T>& z_t, const Tensor<T>& eps_hat, int t,
                              const NoiseSchedule& sched, double lo = 0.0, double hi = 1.0);

}  // namespace flashclear
