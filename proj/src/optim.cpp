#include "flashclear/optim.hpp"

#include <cmath>

#include "flashclear/errors.hpp"

namespace flashclear {

void AdamW::step(nn::ParamStore<float>& params) {
  ++steps_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(steps_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(steps_));
  const float b1 = static_cast<float>(cfg_.beta1), b2 = static_cast<float>(cfg_.beta2);
  const float step_size = static_cast<float>(cfg_.lr / bc1);
  const float inv_sqrt_bc2 = static_cast<float>(1.0 / std::sqrt(bc2));
  const float eps = static_cast<float>(cfg_.eps);
  const float decay = static_cast<float>(1.0 - cfg_.lr * cfg_.weight_decay);
  for (nn::Parameter<float>* p : params.all()) {
    if (p->grad.numel() != p->value.numel()) continue;  // never reached by backward
    auto [it, fresh] = moments_.try_emplace(p->name);
    Moments& mo = it->second;
    if (fresh) {
      mo.m = Tensor<float>(p->value.shape);
      mo.v = Tensor<float>(p->value.shape);
    } else if (mo.m.shape != p->value.shape) {
      throw ShapeError("optimizer moments for " + p->name + " have the wrong shape");
    }
    float* w = p->value.ptr();
    const float* g = p->grad.ptr();
    float* m = mo.m.ptr();
    float* v = mo.v.ptr();
    for (std::size_t i = 0; i < p->value.numel(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      w[i] = w[i] * decay - step_size * m[i] / (std::sqrt(v[i]) * inv_sqrt_bc2 + eps);
    }
  }
  params.zero_grad();
}

void AdamW::restore(long long steps, std::map<std::string, Moments> moments) {
  steps_ = steps;
  moments_ = std::move(moments);
}

double clip_grad_norm(nn::ParamStore<float>& params, double max_norm) {
  double sq = 0.0;
  for (const nn::Parameter<float>* p : std::as_const(params).all())
    for (float g : p->grad.data) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw NumericFault("non-finite gradient norm");
  if (max_norm > 0.0 && norm > max_norm) {
    const float s = static_cast<float>(max_norm / norm);
    for (nn::Parameter<float>* p : params.all())
      for (float& g : p->grad.data) g *= s;
  }
  return norm;
}

}  // namespace flashclear
