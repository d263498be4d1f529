#pragma once

#include <map>
#include <string>

#include "flashclear/autograd.hpp"

namespace flashclear {

struct AdamWConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

// Decoupled weight decay Adam over a float parameter store. Moments are keyed
// by parameter name so a state can be saved and restored by name.
class AdamW {
 public:
  struct Moments {
    Tensor<float> m, v;
  };

  explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

  const AdamWConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  long long steps() const { return steps_; }

  // Applies one update from the accumulated gradients, then zeroes them.
  void step(nn::ParamStore<float>& params);

  const std::map<std::string, Moments>& moments() const { return moments_; }
  void restore(long long steps, std::map<std::string, Moments> moments);

 private:
  AdamWConfig cfg_;
  long long steps_ = 0;
  std::map<std::string, Moments> moments_;
};

// Scales all gradients so their joint L2 norm is at most max_norm. Returns
// the norm before clipping.
double clip_grad_norm(nn::ParamStore<float>& params, double max_norm);

}  // namespace flashclear
