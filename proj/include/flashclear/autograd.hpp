#pragma once

// Minimal reverse-mode automatic differentiation over dense tensors.
//
// A Tape records every operation performed on Vars in creation order; calling
// backward() on a scalar Var walks the tape in reverse and accumulates
// gradients into every node (and into any Parameter that entered the tape via
// Tape::param). Everything is templated on the scalar type and explicitly
// instantiated for float (training) and double (gradient checks, inference).

#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "flashclear/tensor.hpp"

namespace flashclear {
class Rng;
}

namespace flashclear::nn {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
};

// Owns named parameters with stable addresses.
template <typename T>
class ParamStore {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init);
  Parameter<T>& get(const std::string& name);
  const Parameter<T>& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  std::vector<Parameter<T>*> all();
  std::vector<const Parameter<T>*> all() const;
  std::size_t size() const { return params_.size(); }
  std::size_t total_elements() const;

  void zero_grad();

  // Copy values of every parameter whose name exists in both stores.
  // Returns the number of parameters copied.
  template <typename U>
  std::size_t copy_matching(const ParamStore<U>& src, const std::string& src_prefix = "",
                            const std::string& dst_prefix = "");

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  int id = -1;

  bool valid() const { return tape != nullptr && id >= 0; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape; }
  // Gradient after Tape::backward; empty if no gradient reached this node.
  const Tensor<T>& grad() const;
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int self)>;

  struct Node {
    Tensor<T> value;
    Tensor<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    Parameter<T>* param = nullptr;
  };

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }

  Var<T> constant(Tensor<T> value);
  // Leaf that requires grad but is not bound to a Parameter (used for input
  // gradients in finite-difference checks).
  Var<T> input(Tensor<T> value);
  Var<T> param(Parameter<T>& p);

  // Runs reverse accumulation from a scalar output; parameter gradients are
  // added into Parameter::grad.
  void backward(Var<T> loss);

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  std::size_t size() const { return nodes_.size(); }

  // Op plumbing: creates a node whose gradient function is kept only if any
  // parent requires grad.
  Var<T> emit(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn);
  Var<T> emit(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn);
  // Gradient buffer of a node, zero-allocated on first use.
  Tensor<T>& grad_of(int id);
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }

 private:
  bool grad_enabled_;
  std::vector<Node> nodes_;
};

// ---- elementwise -----------------------------------------------------------
template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> add_scalar(Var<T> a, T s);
template <typename T> Var<T> silu(Var<T> a);
template <typename T> Var<T> gelu(Var<T> a);
template <typename T> Var<T> relu(Var<T> a);
template <typename T> Var<T> detach(Var<T> a);
template <typename T> Var<T> reshape(Var<T> a, Shape s);
// out[b] = ca[b] * a[b] + cb[b] * b[b] for per-sample constant coefficients.
template <typename T>
Var<T> affine_per_sample(Var<T> a, const std::vector<T>& ca, Var<T> b, const std::vector<T>& cb);

// ---- reductions ------------------------------------------------------------
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);
template <typename T> Var<T> mse(Var<T> a, Var<T> b);
// sum(a .* w) with a constant weight tensor.
template <typename T> Var<T> weighted_sum(Var<T> a, const Tensor<T>& w);
// [B,C,H,W] -> [B,C]
template <typename T> Var<T> spatial_mean(Var<T> x);

// ---- image ops (NCHW) ------------------------------------------------------
// w: [Cout, Cin, k, k], b: [Cout]
template <typename T> Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad);
template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps = T(1e-5));
template <typename T> Var<T> upsample2x(Var<T> x);
template <typename T> Var<T> concat_channels(const std::vector<Var<T>>& xs);
// bias: [B,C] broadcast over H,W
template <typename T> Var<T> add_channel_bias(Var<T> x, Var<T> bias);
// x / sqrt(sum_c x^2 + eps), per pixel
template <typename T> Var<T> channel_normalize(Var<T> x, T eps = T(1e-10));
// [B,C,H,W] <-> [B,H*W,C]
template <typename T> Var<T> to_tokens(Var<T> x);
template <typename T> Var<T> from_tokens(Var<T> x, int h, int w);

// ---- token ops -------------------------------------------------------------
// x: [..., in], w: [out, in], b: [out]
template <typename T> Var<T> linear(Var<T> x, Var<T> w, Var<T> b);
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));
// q: [B,Nq,d], k: [B,Nk,d] -> softmax(q k^T / sqrt(d/heads)) as [B,heads,Nq,Nk]
template <typename T> Var<T> attention_probs(Var<T> q, Var<T> k, int heads);
// p: [B,heads,Nq,Nk], v: [B,Nk,d] -> [B,Nq,d]
template <typename T> Var<T> attention_apply(Var<T> p, Var<T> v, int heads);
// p: [B,heads,Nq,Nk] -> mean over heads of column `col`, [B,Nq]
template <typename T> Var<T> head_mean_column(Var<T> p, int col);

// ---- initialisation helpers ------------------------------------------------
template <typename T> Tensor<T> kaiming_uniform(const Shape& shape, int fan_in, Rng& rng, double gain = 1.0);
template <typename T> Tensor<T> normal_tensor(const Shape& shape, Rng& rng, double stddev = 1.0);

}  // namespace flashclear::nn
