#include "flashclear/autograd.hpp"

#include <Eigen/Dense>
#include <cmath>

#include "flashclear/rng.hpp"

namespace flashclear::nn {
namespace {

template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;
template <typename T>
using CStrided = Eigen::Map<const MatR<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using Strided = Eigen::Map<MatR<T>, 0, Eigen::OuterStride<>>;

template <typename T>
void add_into(Tensor<T>& dst, const Tensor<T>& src) {
  T* d = dst.ptr();
  const T* s = src.ptr();
  for (std::size_t i = 0; i < src.numel(); ++i) d[i] += s[i];
}

void expect_rank(const Shape& s, int r, const char* op) {
  if (static_cast<int>(s.size()) != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(s));
}

template <typename T>
void im2col(const T* x, int cin, int h, int w, int k, int stride, int pad, int ho, int wo,
            T* col) {
  const int hw = ho * wo;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        const T* plane = x + static_cast<std::size_t>(c) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          T* out = row + oy * wo;
          if (iy < 0 || iy >= h) {
            std::fill(out, out + wo, T(0));
            continue;
          }
          const T* src = plane + iy * w;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            out[ox] = (ix >= 0 && ix < w) ? src[ix] : T(0);
          }
        }
      }
}

template <typename T>
void col2im(const T* col, int cin, int h, int w, int k, int stride, int pad, int ho, int wo,
            T* x) {
  const int hw = ho * wo;
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        const T* row = col + static_cast<std::size_t>((c * k + ky) * k + kx) * hw;
        T* plane = x + static_cast<std::size_t>(c) * h * w;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          T* dst = plane + iy * w;
          const T* in = row + oy * wo;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[ix] += in[ox];
          }
        }
      }
}

template <typename T>
T gelu_fwd(T x) {
  const T c = T(0.7978845608028654);  // sqrt(2/pi)
  const T u = c * (x + T(0.044715) * x * x * x);
  return T(0.5) * x * (T(1) + std::tanh(u));
}

template <typename T>
T gelu_grad(T x) {
  const T c = T(0.7978845608028654);
  const T u = c * (x + T(0.044715) * x * x * x);
  const T th = std::tanh(u);
  const T du = c * (T(1) + T(3) * T(0.044715) * x * x);
  return T(0.5) * (T(1) + th) + T(0.5) * x * (T(1) - th * th) * du;
}

}  // namespace

// ---------------------------------------------------------------------------
// ParamStore

template <typename T>
Parameter<T>& ParamStore<T>::add(const std::string& name, Tensor<T> init) {
  if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  auto p = std::make_unique<Parameter<T>>();
  p->name = name;
  p->grad = Tensor<T>(init.shape);
  p->value = std::move(init);
  index_[name] = params_.size();
  params_.push_back(std::move(p));
  return *params_.back();
}

template <typename T>
Parameter<T>& ParamStore<T>::get(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

template <typename T>
const Parameter<T>& ParamStore<T>::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter: " + name);
  return *params_[it->second];
}

template <typename T>
std::vector<Parameter<T>*> ParamStore<T>::all() {
  std::vector<Parameter<T>*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename T>
std::vector<const Parameter<T>*> ParamStore<T>::all() const {
  std::vector<const Parameter<T>*> out;
  for (auto& p : params_) out.push_back(p.get());
  return out;
}

template <typename T>
std::size_t ParamStore<T>::total_elements() const {
  std::size_t n = 0;
  for (auto& p : params_) n += p->value.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& p : params_) p->grad.fill(T(0));
}

template <typename T>
template <typename U>
std::size_t ParamStore<T>::copy_matching(const ParamStore<U>& src, const std::string& src_prefix,
                                         const std::string& dst_prefix) {
  std::size_t n = 0;
  for (const auto* sp : src.all()) {
    if (sp->name.rfind(src_prefix, 0) != 0) continue;
    const std::string name = dst_prefix + sp->name.substr(src_prefix.size());
    auto it = index_.find(name);
    if (it == index_.end()) continue;
    auto& dp = *params_[it->second];
    if (dp.value.shape != sp->value.shape)
      throw ShapeError("parameter " + name + " shape mismatch on copy");
    dp.value = sp->value.template cast<T>();
    ++n;
  }
  return n;
}

template class ParamStore<float>;
template class ParamStore<double>;
template std::size_t ParamStore<float>::copy_matching(const ParamStore<float>&, const std::string&, const std::string&);
template std::size_t ParamStore<float>::copy_matching(const ParamStore<double>&, const std::string&, const std::string&);
template std::size_t ParamStore<double>::copy_matching(const ParamStore<float>&, const std::string&, const std::string&);
template std::size_t ParamStore<double>::copy_matching(const ParamStore<double>&, const std::string&, const std::string&);

// ---------------------------------------------------------------------------
// Tape

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape->node(id).value;
}

template <typename T>
const Tensor<T>& Var<T>::grad() const {
  return tape->node(id).grad;
}

template <typename T>
Var<T> Tape<T>::constant(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::input(Tensor<T> value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = grad_enabled_;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::param(Parameter<T>& p) {
  Node n;
  n.value = p.value;
  n.requires_grad = grad_enabled_;
  n.param = &p;
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Var<T> Tape<T>::emit(Tensor<T> value, std::initializer_list<Var<T>> parents, BackwardFn fn) {
  return emit(std::move(value), std::vector<Var<T>>(parents), std::move(fn));
}

template <typename T>
Var<T> Tape<T>::emit(Tensor<T> value, const std::vector<Var<T>>& parents, BackwardFn fn) {
  Node n;
  n.value = std::move(value);
  if (grad_enabled_) {
    for (const auto& p : parents) {
      if (p.tape != this) throw std::logic_error("Var from a different tape");
      if (nodes_[static_cast<std::size_t>(p.id)].requires_grad) n.requires_grad = true;
    }
    if (n.requires_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, static_cast<int>(nodes_.size() - 1)};
}

template <typename T>
Tensor<T>& Tape<T>::grad_of(int id) {
  auto& n = nodes_[static_cast<std::size_t>(id)];
  if (n.grad.numel() != n.value.numel()) n.grad = Tensor<T>(n.value.shape);
  return n.grad;
}

template <typename T>
void Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw std::logic_error("backward on Var from another tape");
  if (loss.value().numel() != 1) throw ShapeError("backward requires a scalar output");
  if (!grad_enabled_) throw std::logic_error("backward on a tape with gradients disabled");
  grad_of(loss.id).fill(T(1));
  for (int i = loss.id; i >= 0; --i) {
    auto& n = nodes_[static_cast<std::size_t>(i)];
    if (!n.requires_grad || n.grad.numel() == 0) continue;
    if (n.backward) n.backward(*this, i);
    if (n.param) add_into(n.param->grad, n.grad);
  }
}

template struct Var<float>;
template struct Var<double>;
template class Tape<float>;
template class Tape<double>;

// ---------------------------------------------------------------------------
// Elementwise

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  add_into(out, b.value());
  return a.tape->emit(std::move(out), {a, b}, [a, b](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    if (tp.needs_grad(a.id)) add_into(tp.grad_of(a.id), g);
    if (tp.needs_grad(b.id)) add_into(tp.grad_of(b.id), g);
  });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
  return a.tape->emit(std::move(out), {a, b}, [a, b](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    if (tp.needs_grad(a.id)) add_into(tp.grad_of(a.id), g);
    if (tp.needs_grad(b.id)) {
      auto& gb = tp.grad_of(b.id);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] -= g[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
  return a.tape->emit(std::move(out), {a, b}, [a, b](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& av = tp.node(a.id).value;
    const auto& bv = tp.node(b.id).value;
    if (tp.needs_grad(a.id)) {
      auto& ga = tp.grad_of(a.id);
      for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.needs_grad(b.id)) {
      auto& gb = tp.grad_of(b.id);
      for (std::size_t i = 0; i < g.numel(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v *= s;
  return a.tape->emit(std::move(out), {a}, [a, s](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& ga = tp.grad_of(a.id);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += s * g[i];
  });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v += s;
  return a.tape->emit(std::move(out), {a}, [a](Tape<T>& tp, int self) {
    add_into(tp.grad_of(a.id), tp.node(self).grad);
  });
}

template <typename T>
Var<T> silu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v / (T(1) + std::exp(-v));
  return a.tape->emit(std::move(out), {a}, [a](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& x = tp.node(a.id).value;
    auto& ga = tp.grad_of(a.id);
    for (std::size_t i = 0; i < g.numel(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-x[i]));
      ga[i] += g[i] * s * (T(1) + x[i] * (T(1) - s));
    }
  });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = gelu_fwd(v);
  return a.tape->emit(std::move(out), {a}, [a](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& x = tp.node(a.id).value;
    auto& ga = tp.grad_of(a.id);
    for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] * gelu_grad(x[i]);
  });
}

template <typename T>
Var<T> relu(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data) v = v > T(0) ? v : T(0);
  return a.tape->emit(std::move(out), {a}, [a](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& x = tp.node(a.id).value;
    auto& ga = tp.grad_of(a.id);
    for (std::size_t i = 0; i < g.numel(); ++i)
      if (x[i] > T(0)) ga[i] += g[i];
  });
}

template <typename T>
Var<T> detach(Var<T> a) {
  return a.tape->constant(a.value());
}

template <typename T>
Var<T> reshape(Var<T> a, Shape s) {
  Tensor<T> out = a.value().reshaped(std::move(s));
  return a.tape->emit(std::move(out), {a}, [a](Tape<T>& tp, int self) {
    add_into(tp.grad_of(a.id), tp.node(self).grad);
  });
}

template <typename T>
Var<T> affine_per_sample(Var<T> a, const std::vector<T>& ca, Var<T> b, const std::vector<T>& cb) {
  require_same_shape(a.value(), b.value(), "affine_per_sample");
  const int batch = a.value().dim(0);
  if (static_cast<int>(ca.size()) != batch || static_cast<int>(cb.size()) != batch)
    throw ShapeError("affine_per_sample: coefficient count must equal batch size");
  const std::size_t per = a.value().numel() / static_cast<std::size_t>(batch);
  Tensor<T> out(a.value().shape);
  const auto& av = a.value();
  const auto& bv = b.value();
  for (int n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < per; ++i) {
      const std::size_t j = n * per + i;
      out[j] = ca[n] * av[j] + cb[n] * bv[j];
    }
  return a.tape->emit(std::move(out), {a, b}, [a, b, ca, cb, batch, per](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    if (tp.needs_grad(a.id)) {
      auto& ga = tp.grad_of(a.id);
      for (int n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < per; ++i) ga[n * per + i] += ca[n] * g[n * per + i];
    }
    if (tp.needs_grad(b.id)) {
      auto& gb = tp.grad_of(b.id);
      for (int n = 0; n < batch; ++n)
        for (std::size_t i = 0; i < per; ++i) gb[n * per + i] += cb[n] * g[n * per + i];
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Var<T> sum(Var<T> a) {
  T s = 0;
  for (T v : a.value().data) s += v;
  return a.tape->emit(Tensor<T>({1}, s), {a}, [a](Tape<T>& tp, int self) {
    const T g = tp.node(self).grad[0];
    for (auto& v : tp.grad_of(a.id).data) v += g;
  });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().numel();
  if (n == 0) throw ShapeError("mean of empty tensor");
  T s = 0;
  for (T v : a.value().data) s += v;
  return a.tape->emit(Tensor<T>({1}, s / T(n)), {a}, [a, n](Tape<T>& tp, int self) {
    const T g = tp.node(self).grad[0] / T(n);
    for (auto& v : tp.grad_of(a.id).data) v += g;
  });
}

template <typename T>
Var<T> mse(Var<T> a, Var<T> b) {
  require_same_shape(a.value(), b.value(), "mse");
  const std::size_t n = a.value().numel();
  const auto& av = a.value();
  const auto& bv = b.value();
  T s = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const T d = av[i] - bv[i];
    s += d * d;
  }
  return a.tape->emit(Tensor<T>({1}, s / T(n)), {a, b}, [a, b, n](Tape<T>& tp, int self) {
    const T g = T(2) * tp.node(self).grad[0] / T(n);
    const auto& av = tp.node(a.id).value;
    const auto& bv = tp.node(b.id).value;
    if (tp.needs_grad(a.id)) {
      auto& ga = tp.grad_of(a.id);
      for (std::size_t i = 0; i < n; ++i) ga[i] += g * (av[i] - bv[i]);
    }
    if (tp.needs_grad(b.id)) {
      auto& gb = tp.grad_of(b.id);
      for (std::size_t i = 0; i < n; ++i) gb[i] -= g * (av[i] - bv[i]);
    }
  });
}

template <typename T>
Var<T> weighted_sum(Var<T> a, const Tensor<T>& w) {
  require_same_shape(a.value(), w, "weighted_sum");
  T s = 0;
  for (std::size_t i = 0; i < w.numel(); ++i) s += a.value()[i] * w[i];
  return a.tape->emit(Tensor<T>({1}, s), {a}, [a, w](Tape<T>& tp, int self) {
    const T g = tp.node(self).grad[0];
    auto& ga = tp.grad_of(a.id);
    for (std::size_t i = 0; i < w.numel(); ++i) ga[i] += g * w[i];
  });
}

template <typename T>
Var<T> spatial_mean(Var<T> x) {
  const auto& xv = x.value();
  expect_rank(xv.shape, 4, "spatial_mean");
  const int b = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out({b, c});
  for (int i = 0; i < b * c; ++i) {
    T s = 0;
    for (int j = 0; j < hw; ++j) s += xv[static_cast<std::size_t>(i) * hw + j];
    out[i] = s / T(hw);
  }
  return x.tape->emit(std::move(out), {x}, [x, b, c, hw](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_of(x.id);
    for (int i = 0; i < b * c; ++i) {
      const T gi = g[i] / T(hw);
      for (int j = 0; j < hw; ++j) gx[static_cast<std::size_t>(i) * hw + j] += gi;
    }
  });
}

// ---------------------------------------------------------------------------
// Image ops

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, int stride, int pad) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  expect_rank(xv.shape, 4, "conv2d input");
  expect_rank(wv.shape, 4, "conv2d weight");
  const int batch = xv.dim(0), cin = xv.dim(1), h = xv.dim(2), wd = xv.dim(3);
  const int cout = wv.dim(0), k = wv.dim(2);
  if (wv.dim(1) != cin || wv.dim(3) != k)
    throw ShapeError("conv2d: weight " + shape_str(wv.shape) + " incompatible with input " +
                     shape_str(xv.shape));
  if (b.value().numel() != static_cast<std::size_t>(cout)) throw ShapeError("conv2d: bias size");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wd + 2 * pad - k) / stride + 1;
  const int kk = cin * k * k, hw = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  Tensor<T> out({batch, cout, ho, wo});
  std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kk) * hw);
  CMapR<T> W(wv.ptr(), cout, kk);
  const auto& bv = b.value();
  for (int n = 0; n < batch; ++n) {
    const T* xn = xv.ptr() + static_cast<std::size_t>(n) * cin * h * wd;
    const T* cp = xn;
    if (!pointwise) {
      im2col(xn, cin, h, wd, k, stride, pad, ho, wo, col.data());
      cp = col.data();
    }
    MapR<T> O(out.ptr() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
    O.noalias() = W * CMapR<T>(cp, kk, hw);
    for (int c = 0; c < cout; ++c) O.row(c).array() += bv[c];
  }

  return x.tape->emit(std::move(out), {x, w, b},
                      [=](Tape<T>& tp, int self) {
                        const auto& g = tp.node(self).grad;
                        const auto& xv = tp.node(x.id).value;
                        const auto& wv = tp.node(w.id).value;
                        CMapR<T> W(wv.ptr(), cout, kk);
                        const bool need_x = tp.needs_grad(x.id);
                        const bool need_w = tp.needs_grad(w.id);
                        const bool need_b = tp.needs_grad(b.id);
                        std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(kk) * hw);
                        std::vector<T> dcol(static_cast<std::size_t>(kk) * hw);
                        for (int n = 0; n < batch; ++n) {
                          CMapR<T> G(g.ptr() + static_cast<std::size_t>(n) * cout * hw, cout, hw);
                          const T* xn = xv.ptr() + static_cast<std::size_t>(n) * cin * h * wd;
                          if (need_w) {
                            const T* cp = xn;
                            if (!pointwise) {
                              im2col(xn, cin, h, wd, k, stride, pad, ho, wo, col.data());
                              cp = col.data();
                            }
                            MapR<T> GW(tp.grad_of(w.id).ptr(), cout, kk);
                            GW.noalias() += G * CMapR<T>(cp, kk, hw).transpose();
                          }
                          if (need_b) {
                            auto& gb = tp.grad_of(b.id);
                            for (int c = 0; c < cout; ++c) gb[c] += G.row(c).sum();
                          }
                          if (need_x) {
                            T* gx = tp.grad_of(x.id).ptr() + static_cast<std::size_t>(n) * cin * h * wd;
                            if (pointwise) {
                              MapR<T> GX(gx, cin, hw);
                              GX.noalias() += W.transpose() * G;
                            } else {
                              MapR<T> DC(dcol.data(), kk, hw);
                              DC.noalias() = W.transpose() * G;
                              col2im(dcol.data(), cin, h, wd, k, stride, pad, ho, wo, gx);
                            }
                          }
                        }
                      });
}

template <typename T>
Var<T> group_norm(Var<T> x, Var<T> gamma, Var<T> beta, int groups, T eps) {
  const auto& xv = x.value();
  expect_rank(xv.shape, 4, "group_norm");
  const int batch = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (c % groups != 0) throw ShapeError("group_norm: channels not divisible by groups");
  const int cpg = c / groups;
  const std::size_t gsize = static_cast<std::size_t>(cpg) * hw;
  Tensor<T> xhat(xv.shape);
  std::vector<T> rstd(static_cast<std::size_t>(batch) * groups);
  Tensor<T> out(xv.shape);
  const auto& gm = gamma.value();
  const auto& bt = beta.value();
  for (int n = 0; n < batch; ++n)
    for (int g = 0; g < groups; ++g) {
      const std::size_t off = (static_cast<std::size_t>(n) * groups + g) * gsize;
      T m = 0;
      for (std::size_t i = 0; i < gsize; ++i) m += xv[off + i];
      m /= T(gsize);
      T v = 0;
      for (std::size_t i = 0; i < gsize; ++i) {
        const T d = xv[off + i] - m;
        v += d * d;
      }
      v /= T(gsize);
      const T r = T(1) / std::sqrt(v + eps);
      rstd[n * groups + g] = r;
      for (std::size_t i = 0; i < gsize; ++i) {
        const int ch = g * cpg + static_cast<int>(i / hw);
        const T xh = (xv[off + i] - m) * r;
        xhat[off + i] = xh;
        out[off + i] = xh * gm[ch] + bt[ch];
      }
    }
  return x.tape->emit(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tp, int self) {
        const auto& g = tp.node(self).grad;
        const auto& gm = tp.node(gamma.id).value;
        if (tp.needs_grad(gamma.id) || tp.needs_grad(beta.id)) {
          auto& gg = tp.grad_of(gamma.id);
          auto& gb = tp.grad_of(beta.id);
          for (int n = 0; n < batch; ++n)
            for (int ch = 0; ch < c; ++ch) {
              const std::size_t off = (static_cast<std::size_t>(n) * c + ch) * hw;
              T sg = 0, sb = 0;
              for (int i = 0; i < hw; ++i) {
                sg += g[off + i] * xhat[off + i];
                sb += g[off + i];
              }
              gg[ch] += sg;
              gb[ch] += sb;
            }
        }
        if (!tp.needs_grad(x.id)) return;
        auto& gx = tp.grad_of(x.id);
        for (int n = 0; n < batch; ++n)
          for (int gi = 0; gi < groups; ++gi) {
            const std::size_t off = (static_cast<std::size_t>(n) * groups + gi) * gsize;
            T s1 = 0, s2 = 0;
            for (std::size_t i = 0; i < gsize; ++i) {
              const int ch = gi * cpg + static_cast<int>(i / hw);
              const T dxh = g[off + i] * gm[ch];
              s1 += dxh;
              s2 += dxh * xhat[off + i];
            }
            s1 /= T(gsize);
            s2 /= T(gsize);
            const T r = rstd[n * groups + gi];
            for (std::size_t i = 0; i < gsize; ++i) {
              const int ch = gi * cpg + static_cast<int>(i / hw);
              const T dxh = g[off + i] * gm[ch];
              gx[off + i] += r * (dxh - s1 - xhat[off + i] * s2);
            }
          }
      });
}

template <typename T>
Var<T> upsample2x(Var<T> x) {
  const auto& xv = x.value();
  expect_rank(xv.shape, 4, "upsample2x");
  const int bc = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  Tensor<T> out({xv.dim(0), xv.dim(1), 2 * h, 2 * w});
  for (int p = 0; p < bc; ++p)
    for (int y = 0; y < 2 * h; ++y)
      for (int xx = 0; xx < 2 * w; ++xx)
        out[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + xx] =
            xv[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2];
  return x.tape->emit(std::move(out), {x}, [x, bc, h, w](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_of(x.id);
    for (int p = 0; p < bc; ++p)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx)
          gx[(static_cast<std::size_t>(p) * h + y / 2) * w + xx / 2] +=
              g[(static_cast<std::size_t>(p) * 2 * h + y) * 2 * w + xx];
  });
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ShapeError("concat_channels: no inputs");
  const auto& s0 = xs[0].value().shape;
  expect_rank(s0, 4, "concat_channels");
  int ctot = 0;
  for (const auto& v : xs) {
    const auto& s = v.value().shape;
    expect_rank(s, 4, "concat_channels");
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ShapeError("concat_channels: mismatched " + shape_str(s) + " vs " + shape_str(s0));
    ctot += s[1];
  }
  const int batch = s0[0], hw = s0[2] * s0[3];
  Tensor<T> out({batch, ctot, s0[2], s0[3]});
  std::vector<int> chans;
  for (int n = 0; n < batch; ++n) {
    std::size_t dst = static_cast<std::size_t>(n) * ctot * hw;
    for (const auto& v : xs) {
      const int c = v.value().dim(1);
      const T* src = v.value().ptr() + static_cast<std::size_t>(n) * c * hw;
      std::copy(src, src + static_cast<std::size_t>(c) * hw, out.ptr() + dst);
      dst += static_cast<std::size_t>(c) * hw;
    }
  }
  for (const auto& v : xs) chans.push_back(v.value().dim(1));
  return xs[0].tape->emit(std::move(out), xs, [xs, chans, batch, ctot, hw](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    for (int n = 0; n < batch; ++n) {
      std::size_t src = static_cast<std::size_t>(n) * ctot * hw;
      for (std::size_t k = 0; k < xs.size(); ++k) {
        const std::size_t len = static_cast<std::size_t>(chans[k]) * hw;
        if (tp.needs_grad(xs[k].id)) {
          T* dst = tp.grad_of(xs[k].id).ptr() + static_cast<std::size_t>(n) * len;
          for (std::size_t i = 0; i < len; ++i) dst[i] += g[src + i];
        }
        src += len;
      }
    }
  });
}

template <typename T>
Var<T> add_channel_bias(Var<T> x, Var<T> bias) {
  const auto& xv = x.value();
  expect_rank(xv.shape, 4, "add_channel_bias");
  const int batch = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (bias.value().shape != Shape{batch, c})
    throw ShapeError("add_channel_bias: bias " + shape_str(bias.value().shape));
  Tensor<T> out = xv;
  const auto& bv = bias.value();
  for (int i = 0; i < batch * c; ++i)
    for (int j = 0; j < hw; ++j) out[static_cast<std::size_t>(i) * hw + j] += bv[i];
  return x.tape->emit(std::move(out), {x, bias}, [x, bias, batch, c, hw](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    if (tp.needs_grad(x.id)) add_into(tp.grad_of(x.id), g);
    if (tp.needs_grad(bias.id)) {
      auto& gb = tp.grad_of(bias.id);
      for (int i = 0; i < batch * c; ++i) {
        T s = 0;
        for (int j = 0; j < hw; ++j) s += g[static_cast<std::size_t>(i) * hw + j];
        gb[i] += s;
      }
    }
  });
}

template <typename T>
Var<T> channel_normalize(Var<T> x, T eps) {
  const auto& xv = x.value();
  expect_rank(xv.shape, 4, "channel_normalize");
  const int batch = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  std::vector<T> inv(static_cast<std::size_t>(batch) * hw);
  Tensor<T> out(xv.shape);
  for (int n = 0; n < batch; ++n)
    for (int p = 0; p < hw; ++p) {
      T s = 0;
      for (int ch = 0; ch < c; ++ch) {
        const T v = xv[(static_cast<std::size_t>(n) * c + ch) * hw + p];
        s += v * v;
      }
      const T r = T(1) / std::sqrt(s + eps);
      inv[n * hw + p] = r;
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t i = (static_cast<std::size_t>(n) * c + ch) * hw + p;
        out[i] = xv[i] * r;
      }
    }
  Tensor<T> y = out;
  return x.tape->emit(std::move(out), {x}, [=, inv = std::move(inv), y = std::move(y)](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_of(x.id);
    for (int n = 0; n < batch; ++n)
      for (int p = 0; p < hw; ++p) {
        T dot = 0;
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t i = (static_cast<std::size_t>(n) * c + ch) * hw + p;
          dot += g[i] * y[i];
        }
        const T r = inv[n * hw + p];
        for (int ch = 0; ch < c; ++ch) {
          const std::size_t i = (static_cast<std::size_t>(n) * c + ch) * hw + p;
          gx[i] += r * (g[i] - y[i] * dot);
        }
      }
  });
}

template <typename T>
Var<T> to_tokens(Var<T> x) {
  const auto& xv = x.value();
  expect_rank(xv.shape, 4, "to_tokens");
  const int batch = xv.dim(0), c = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  Tensor<T> out({batch, hw, c});
  for (int n = 0; n < batch; ++n) {
    CMapR<T> src(xv.ptr() + static_cast<std::size_t>(n) * c * hw, c, hw);
    MapR<T>(out.ptr() + static_cast<std::size_t>(n) * c * hw, hw, c) = src.transpose();
  }
  return x.tape->emit(std::move(out), {x}, [x, batch, c, hw](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_of(x.id);
    for (int n = 0; n < batch; ++n) {
      CMapR<T> src(g.ptr() + static_cast<std::size_t>(n) * c * hw, hw, c);
      MapR<T>(gx.ptr() + static_cast<std::size_t>(n) * c * hw, c, hw) += src.transpose();
    }
  });
}

template <typename T>
Var<T> from_tokens(Var<T> x, int h, int w) {
  const auto& xv = x.value();
  expect_rank(xv.shape, 3, "from_tokens");
  const int batch = xv.dim(0), hw = xv.dim(1), c = xv.dim(2);
  if (hw != h * w) throw ShapeError("from_tokens: token count does not match grid");
  Tensor<T> out({batch, c, h, w});
  for (int n = 0; n < batch; ++n) {
    CMapR<T> src(xv.ptr() + static_cast<std::size_t>(n) * c * hw, hw, c);
    MapR<T>(out.ptr() + static_cast<std::size_t>(n) * c * hw, c, hw) = src.transpose();
  }
  return x.tape->emit(std::move(out), {x}, [x, batch, c, hw](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gx = tp.grad_of(x.id);
    for (int n = 0; n < batch; ++n) {
      CMapR<T> src(g.ptr() + static_cast<std::size_t>(n) * c * hw, c, hw);
      MapR<T>(gx.ptr() + static_cast<std::size_t>(n) * c * hw, hw, c) += src.transpose();
    }
  });
}

// ---------------------------------------------------------------------------
// Token ops

template <typename T>
Var<T> linear(Var<T> x, Var<T> w, Var<T> b) {
  const auto& xv = x.value();
  const auto& wv = w.value();
  expect_rank(wv.shape, 2, "linear weight");
  const int out_f = wv.dim(0), in_f = wv.dim(1);
  if (xv.dim(-1) != in_f)
    throw ShapeError("linear: input " + shape_str(xv.shape) + " vs weight " + shape_str(wv.shape));
  if (b.value().numel() != static_cast<std::size_t>(out_f)) throw ShapeError("linear: bias size");
  const int rows = static_cast<int>(xv.numel() / in_f);
  Shape os = xv.shape;
  os.back() = out_f;
  Tensor<T> out(os);
  MapR<T> Y(out.ptr(), rows, out_f);
  Y.noalias() = CMapR<T>(xv.ptr(), rows, in_f) * CMapR<T>(wv.ptr(), out_f, in_f).transpose();
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.value().ptr(), out_f);
  return x.tape->emit(std::move(out), {x, w, b}, [x, w, b, rows, in_f, out_f](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    CMapR<T> G(g.ptr(), rows, out_f);
    if (tp.needs_grad(x.id)) {
      MapR<T>(tp.grad_of(x.id).ptr(), rows, in_f).noalias() +=
          G * CMapR<T>(tp.node(w.id).value.ptr(), out_f, in_f);
    }
    if (tp.needs_grad(w.id)) {
      MapR<T>(tp.grad_of(w.id).ptr(), out_f, in_f).noalias() +=
          G.transpose() * CMapR<T>(tp.node(x.id).value.ptr(), rows, in_f);
    }
    if (tp.needs_grad(b.id)) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(tp.grad_of(b.id).ptr(), out_f) +=
          G.colwise().sum();
    }
  });
}

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const auto& xv = x.value();
  const int d = xv.dim(-1);
  const int rows = static_cast<int>(xv.numel() / d);
  if (gamma.value().numel() != static_cast<std::size_t>(d)) throw ShapeError("layer_norm: gamma size");
  Tensor<T> xhat(xv.shape), out(xv.shape);
  std::vector<T> rstd(rows);
  const auto& gm = gamma.value();
  const auto& bt = beta.value();
  for (int r = 0; r < rows; ++r) {
    const T* row = xv.ptr() + static_cast<std::size_t>(r) * d;
    T m = 0;
    for (int i = 0; i < d; ++i) m += row[i];
    m /= T(d);
    T v = 0;
    for (int i = 0; i < d; ++i) v += (row[i] - m) * (row[i] - m);
    v /= T(d);
    const T rs = T(1) / std::sqrt(v + eps);
    rstd[r] = rs;
    for (int i = 0; i < d; ++i) {
      const std::size_t j = static_cast<std::size_t>(r) * d + i;
      xhat[j] = (row[i] - m) * rs;
      out[j] = xhat[j] * gm[i] + bt[i];
    }
  }
  return x.tape->emit(
      std::move(out), {x, gamma, beta},
      [=, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& tp, int self) {
        const auto& g = tp.node(self).grad;
        const auto& gm = tp.node(gamma.id).value;
        if (tp.needs_grad(gamma.id) || tp.needs_grad(beta.id)) {
          auto& gg = tp.grad_of(gamma.id);
          auto& gb = tp.grad_of(beta.id);
          for (int r = 0; r < rows; ++r)
            for (int i = 0; i < d; ++i) {
              const std::size_t j = static_cast<std::size_t>(r) * d + i;
              gg[i] += g[j] * xhat[j];
              gb[i] += g[j];
            }
        }
        if (!tp.needs_grad(x.id)) return;
        auto& gx = tp.grad_of(x.id);
        for (int r = 0; r < rows; ++r) {
          T s1 = 0, s2 = 0;
          for (int i = 0; i < d; ++i) {
            const std::size_t j = static_cast<std::size_t>(r) * d + i;
            const T dxh = g[j] * gm[i];
            s1 += dxh;
            s2 += dxh * xhat[j];
          }
          s1 /= T(d);
          s2 /= T(d);
          for (int i = 0; i < d; ++i) {
            const std::size_t j = static_cast<std::size_t>(r) * d + i;
            gx[j] += rstd[r] * (g[j] * gm[i] - s1 - xhat[j] * s2);
          }
        }
      });
}

template <typename T>
Var<T> attention_probs(Var<T> q, Var<T> k, int heads) {
  const auto& qv = q.value();
  const auto& kv = k.value();
  expect_rank(qv.shape, 3, "attention_probs q");
  expect_rank(kv.shape, 3, "attention_probs k");
  const int batch = qv.dim(0), nq = qv.dim(1), d = qv.dim(2), nk = kv.dim(1);
  if (kv.dim(0) != batch || kv.dim(2) != d) throw ShapeError("attention_probs: q/k mismatch");
  if (d % heads != 0) throw ShapeError("attention_probs: dim not divisible by heads");
  const int dh = d / heads;
  const T sc = T(1) / std::sqrt(T(dh));
  Tensor<T> p({batch, heads, nq, nk});
  for (int n = 0; n < batch; ++n)
    for (int h = 0; h < heads; ++h) {
      CStrided<T> Q(qv.ptr() + static_cast<std::size_t>(n) * nq * d + h * dh, nq, dh, Eigen::OuterStride<>(d));
      CStrided<T> K(kv.ptr() + static_cast<std::size_t>(n) * nk * d + h * dh, nk, dh, Eigen::OuterStride<>(d));
      MapR<T> P(p.ptr() + (static_cast<std::size_t>(n) * heads + h) * nq * nk, nq, nk);
      P.noalias() = (Q * K.transpose()) * sc;
      for (int i = 0; i < nq; ++i) {
        const T mx = P.row(i).maxCoeff();
        P.row(i) = (P.row(i).array() - mx).exp();
        P.row(i) /= P.row(i).sum();
      }
    }
  return q.tape->emit(std::move(p), {q, k}, [=](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& pv = tp.node(self).value;
    const auto& qv = tp.node(q.id).value;
    const auto& kv = tp.node(k.id).value;
    MatR<T> dS(nq, nk);
    for (int n = 0; n < batch; ++n)
      for (int h = 0; h < heads; ++h) {
        const std::size_t po = (static_cast<std::size_t>(n) * heads + h) * nq * nk;
        CMapR<T> P(pv.ptr() + po, nq, nk);
        CMapR<T> G(g.ptr() + po, nq, nk);
        dS = P.array() * (G.array().colwise() - (P.array() * G.array()).rowwise().sum());
        dS *= sc;
        if (tp.needs_grad(q.id)) {
          Strided<T> GQ(tp.grad_of(q.id).ptr() + static_cast<std::size_t>(n) * nq * d + h * dh, nq, dh, Eigen::OuterStride<>(d));
          CStrided<T> K(kv.ptr() + static_cast<std::size_t>(n) * nk * d + h * dh, nk, dh, Eigen::OuterStride<>(d));
          GQ.noalias() += dS * K;
        }
        if (tp.needs_grad(k.id)) {
          Strided<T> GK(tp.grad_of(k.id).ptr() + static_cast<std::size_t>(n) * nk * d + h * dh, nk, dh, Eigen::OuterStride<>(d));
          CStrided<T> Q(qv.ptr() + static_cast<std::size_t>(n) * nq * d + h * dh, nq, dh, Eigen::OuterStride<>(d));
          GK.noalias() += dS.transpose() * Q;
        }
      }
  });
}

template <typename T>
Var<T> attention_apply(Var<T> p, Var<T> v, int heads) {
  const auto& pv = p.value();
  const auto& vv = v.value();
  expect_rank(pv.shape, 4, "attention_apply p");
  expect_rank(vv.shape, 3, "attention_apply v");
  const int batch = pv.dim(0), nq = pv.dim(2), nk = pv.dim(3), d = vv.dim(2);
  if (pv.dim(1) != heads || vv.dim(0) != batch || vv.dim(1) != nk || d % heads != 0)
    throw ShapeError("attention_apply: p " + shape_str(pv.shape) + " vs v " + shape_str(vv.shape));
  const int dh = d / heads;
  Tensor<T> out({batch, nq, d});
  for (int n = 0; n < batch; ++n)
    for (int h = 0; h < heads; ++h) {
      CMapR<T> P(pv.ptr() + (static_cast<std::size_t>(n) * heads + h) * nq * nk, nq, nk);
      CStrided<T> V(vv.ptr() + static_cast<std::size_t>(n) * nk * d + h * dh, nk, dh, Eigen::OuterStride<>(d));
      Strided<T> O(out.ptr() + static_cast<std::size_t>(n) * nq * d + h * dh, nq, dh, Eigen::OuterStride<>(d));
      O.noalias() = P * V;
    }
  return p.tape->emit(std::move(out), {p, v}, [=](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    const auto& pv = tp.node(p.id).value;
    const auto& vv = tp.node(v.id).value;
    for (int n = 0; n < batch; ++n)
      for (int h = 0; h < heads; ++h) {
        const std::size_t po = (static_cast<std::size_t>(n) * heads + h) * nq * nk;
        CStrided<T> G(g.ptr() + static_cast<std::size_t>(n) * nq * d + h * dh, nq, dh, Eigen::OuterStride<>(d));
        if (tp.needs_grad(p.id)) {
          CStrided<T> V(vv.ptr() + static_cast<std::size_t>(n) * nk * d + h * dh, nk, dh, Eigen::OuterStride<>(d));
          MapR<T>(tp.grad_of(p.id).ptr() + po, nq, nk).noalias() += G * V.transpose();
        }
        if (tp.needs_grad(v.id)) {
          CMapR<T> P(pv.ptr() + po, nq, nk);
          Strided<T> GV(tp.grad_of(v.id).ptr() + static_cast<std::size_t>(n) * nk * d + h * dh, nk, dh, Eigen::OuterStride<>(d));
          GV.noalias() += P.transpose() * G;
        }
      }
  });
}

template <typename T>
Var<T> head_mean_column(Var<T> p, int col) {
  const auto& pv = p.value();
  expect_rank(pv.shape, 4, "head_mean_column");
  const int batch = pv.dim(0), heads = pv.dim(1), nq = pv.dim(2), nk = pv.dim(3);
  if (col < 0 || col >= nk) throw ShapeError("head_mean_column: column out of range");
  Tensor<T> out({batch, nq});
  for (int n = 0; n < batch; ++n)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < nq; ++i)
        out[static_cast<std::size_t>(n) * nq + i] +=
            pv[((static_cast<std::size_t>(n) * heads + h) * nq + i) * nk + col] / T(heads);
  return p.tape->emit(std::move(out), {p}, [=](Tape<T>& tp, int self) {
    const auto& g = tp.node(self).grad;
    auto& gp = tp.grad_of(p.id);
    for (int n = 0; n < batch; ++n)
      for (int h = 0; h < heads; ++h)
        for (int i = 0; i < nq; ++i)
          gp[((static_cast<std::size_t>(n) * heads + h) * nq + i) * nk + col] +=
              g[static_cast<std::size_t>(n) * nq + i] / T(heads);
  });
}

// ---------------------------------------------------------------------------
// Init

template <typename T>
Tensor<T> kaiming_uniform(const Shape& shape, int fan_in, Rng& rng, double gain) {
  Tensor<T> t(shape);
  const double bound = gain * std::sqrt(3.0 / static_cast<double>(fan_in));
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(-bound, bound));
  return t;
}

template <typename T>
Tensor<T> normal_tensor(const Shape& shape, Rng& rng, double stddev) {
  Tensor<T> t(shape);
  for (auto& v : t.data) v = static_cast<T>(stddev * rng.normal());
  return t;
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define FLASHCLEAR_INSTANTIATE_OPS(T)                                                     \
  template Var<T> add(Var<T>, Var<T>);                                                    \
  template Var<T> sub(Var<T>, Var<T>);                                                    \
  template Var<T> mul(Var<T>, Var<T>);                                                    \
  template Var<T> scale(Var<T>, T);                                                       \
  template Var<T> add_scalar(Var<T>, T);                                                  \
  template Var<T> silu(Var<T>);                                                           \
  template Var<T> gelu(Var<T>);                                                           \
  template Var<T> relu(Var<T>);                                                           \
  template Var<T> detach(Var<T>);                                                         \
  template Var<T> reshape(Var<T>, Shape);                                                 \
  template Var<T> affine_per_sample(Var<T>, const std::vector<T>&, Var<T>,                \
                                    const std::vector<T>&);                               \
  template Var<T> sum(Var<T>);                                                            \
  template Var<T> mean(Var<T>);                                                           \
  template Var<T> mse(Var<T>, Var<T>);                                                    \
  template Var<T> weighted_sum(Var<T>, const Tensor<T>&);                                 \
  template Var<T> spatial_mean(Var<T>);                                                   \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, int, int);                               \
  template Var<T> group_norm(Var<T>, Var<T>, Var<T>, int, T);                             \
  template Var<T> upsample2x(Var<T>);                                                     \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                            \
  template Var<T> add_channel_bias(Var<T>, Var<T>);                                       \
  template Var<T> channel_normalize(Var<T>, T);                                           \
  template Var<T> to_tokens(Var<T>);                                                      \
  template Var<T> from_tokens(Var<T>, int, int);                                          \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                                         \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                                  \
  template Var<T> attention_probs(Var<T>, Var<T>, int);                                   \
  template Var<T> attention_apply(Var<T>, Var<T>, int);                                   \
  template Var<T> head_mean_column(Var<T>, int);                                          \
  template Tensor<T> kaiming_uniform(const Shape&, int, Rng&, double);                    \
  template Tensor<T> normal_tensor(const Shape&, Rng&, double);

FLASHCLEAR_INSTANTIATE_OPS(float)
FLASHCLEAR_INSTANTIATE_OPS(double)

#undef FLASHCLEAR_INSTANTIATE_OPS

}  // namespace flashclear::nn
