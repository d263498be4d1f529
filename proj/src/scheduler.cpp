#include "flashclear/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace flashclear {

NoiseSchedule::NoiseSchedule(std::vector<double> betas) : betas_(std::move(betas)) {
  if (betas_.empty()) throw ConfigError("noise schedule needs at least one step");
  alpha_bars_.resize(betas_.size());
  double prod = 1.0;
  for (std::size_t t = 0; t < betas_.size(); ++t) {
    const double b = betas_[t];
    if (!(b > 0.0 && b < 1.0))
      throw ConfigError("beta[" + std::to_string(t) + "] = " + std::to_string(b) +
                        " outside (0,1)");
    prod *= (1.0 - b);
    alpha_bars_[t] = prod;
  }
}

double NoiseSchedule::alpha_bar(int t) const {
  if (t == kFinalStep) return 1.0;
  if (t < 0 || t >= total_steps())
    throw ShapeError("timestep " + std::to_string(t) + " outside [0, " +
                     std::to_string(total_steps() - 1) + "]");
  return alpha_bars_[static_cast<std::size_t>(t)];
}

NoiseSchedule make_linear_schedule(int total_steps, double beta_start, double beta_end) {
  if (total_steps < 1) throw ConfigError("schedule length must be positive");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
    throw ConfigError("betas must satisfy 0 < beta_start <= beta_end < 1");
  std::vector<double> betas(static_cast<std::size_t>(total_steps));
  if (total_steps == 1) {
    betas[0] = beta_start;
  } else {
    for (int t = 0; t < total_steps; ++t)
      betas[t] = beta_start + (beta_end - beta_start) * t / static_cast<double>(total_steps - 1);
  }
  return NoiseSchedule(std::move(betas));
}

TimestepPlan make_timestep_plan(int n_steps, int total_steps) {
  if (n_steps < 1) throw ConfigError("plan needs at least one step");
  if (n_steps > total_steps)
    throw ConfigError("plan of " + std::to_string(n_steps) + " steps exceeds schedule length " +
                      std::to_string(total_steps));
  TimestepPlan plan;
  for (int i = n_steps; i >= 1; --i) {
    // ceil(T*i/n) in integer arithmetic
    const long long num = static_cast<long long>(total_steps) * i;
    plan.taus.push_back(static_cast<int>((num + n_steps - 1) / n_steps) - 1);
  }
  return plan;
}

template <typename T>
Tensor<T> forward_diffuse(const Tensor<T>& z0, int t, const Tensor<T>& eps,
                          const NoiseSchedule& sched) {
  require_same_shape(z0, eps, "forward_diffuse");
  if (t < 0 || t >= sched.total_steps()) throw ShapeError("forward_diffuse: timestep out of range");
  const double ab = sched.alpha_bar(t);
  const T a = static_cast<T>(std::sqrt(ab));
  const T s = static_cast<T>(std::sqrt(1.0 - ab));
  Tensor<T> out(z0.shape);
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = a * z0[i] + s * eps[i];
  return out;
}

template <typename T>
Tensor<T> ddim_step(const Tensor<T>& z_tau, const Tensor<T>& eps_hat, int tau_i, int tau_prev,
                    const NoiseSchedule& sched) {
  require_same_shape(z_tau, eps_hat, "ddim_step");
  if (tau_prev != kFinalStep && tau_prev >= tau_i)
    throw ShapeError("ddim_step: timesteps must descend (" + std::to_string(tau_i) + " -> " +
                     std::to_string(tau_prev) + ")");
  const double ab_i = sched.alpha_bar(tau_i);
  const double ab_p = sched.alpha_bar(tau_prev);
  const double inv_sqrt_ab_i = 1.0 / std::sqrt(ab_i);
  const double s_i = std::sqrt(1.0 - ab_i);
  const double a_p = std::sqrt(ab_p);
  const double s_p = std::sqrt(1.0 - ab_p);
  Tensor<T> out(z_tau.shape);
  for (std::size_t k = 0; k < out.numel(); ++k) {
    const double e = eps_hat[k];
    const double x0 = (static_cast<double>(z_tau[k]) - s_i * e) * inv_sqrt_ab_i;
    out[k] = static_cast<T>(a_p * x0 + s_p * e);
  }
  return out;
}

template <typename T>
Tensor<T> predict_x0(const Tensor<T>& z_t, const Tensor<T>& eps_hat, int t,
                     const NoiseSchedule& sched) {
  require_same_shape(z_t, eps_hat, "predict_x0");
  const double ab = sched.alpha_bar(t);
  if (ab <= 0.0) throw NumericFault("predict_x0: alpha_bar is zero");
  const double inv = 1.0 / std::sqrt(ab);
  const double s = std::sqrt(1.0 - ab);
  Tensor<T> out(z_t.shape);
  for (std::size_t k = 0; k < out.numel(); ++k)
    out[k] = static_cast<T>((static_cast<double>(z_t[k]) - s * eps_hat[k]) * inv);
  return out;
}

template <typename T>
Tensor<T> clip_noise_estimate(const Tensor<T>& z_t, const Tensor<T>& eps_hat, int t,
                              const NoiseSchedule& sched, double lo, double hi) {
  require_same_shape(z_t, eps_hat, "clip_noise_estimate");
  if (!(lo < hi)) throw ConfigError("clip_noise_estimate: empty range");
  const double ab = sched.alpha_bar(t);
  if (ab <= 0.0 || ab >= 1.0) throw NumericFault("clip_noise_estimate: alpha_bar must lie in (0, 1)");
  const double a = std::sqrt(ab);
  const double s = std::sqrt(1.0 - ab);
  Tensor<T> out(z_t.shape);
  for (std::size_t k = 0; k < out.numel(); ++k) {
    const double z = z_t[k];
    const double x0 = std::clamp((z - s * eps_hat[k]) / a, lo, hi);
    out[k] = static_cast<T>((z - a * x0) / s);
  }
  return out;
}

template Tensor<float> clip_noise_estimate(const Tensor<float>&, const Tensor<float>&, int, const NoiseSchedule&, double, double);
template Tensor<double> clip_noise_estimate(const Tensor<double>&, const Tensor<double>&, int, const NoiseSchedule&, double, double);
template Tensor<float> forward_diffuse(const Tensor<float>&, int, const Tensor<float>&, const NoiseSchedule&);
template Tensor<double> forward_diffuse(const Tensor<double>&, int, const Tensor<double>&, const NoiseSchedule&);
template Tensor<float> ddim_step(const Tensor<float>&, const Tensor<float>&, int, int, const NoiseSchedule&);
template Tensor<double> ddim_step(const Tensor<double>&, const Tensor<double>&, int, int, const NoiseSchedule&);
template Tensor<float> predict_x0(const Tensor<float>&, const Tensor<float>&, int, const NoiseSchedule&);
template Tensor<double> predict_x0(const Tensor<double>&, const Tensor<double>&, int, const NoiseSchedule&);

}  // namespace flashclear
