#pragma once

// Shared fixtures for unit and acceptance tests: a small model
// configuration, small scenes, random tensors and a central-difference
// gradient checker.

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "flashclear/autograd.hpp"
#include "flashclear/model.hpp"
#include "flashclear/rng.hpp"
#include "flashclear/synthgen.hpp"

namespace fctest {

using namespace flashclear;

// 16x16 latent, narrow stages; fast enough for float64 gradient checks.
inline UNetConfig tiny_config() {
  UNetConfig c;
  c.latent_size = 16;
  c.widths = {8, 16, 16};
  c.attn_dim = 16;
  c.heads = 2;
  c.groups = 4;
  c.time_freq_dim = 16;
  c.time_dim = 32;
  c.cond_dim = 16;
  c.cond_hidden = 8;
  return c;
}

inline CorpusConfig tiny_corpus_config() {
  CorpusConfig c;
  c.image_size = 16;
  c.radius_min = 2.0;
  c.radius_max = 3.5;
  c.shadow_dx_min = c.shadow_dy_min = 1;
  c.shadow_dx_max = c.shadow_dy_max = 2;
  return c;
}

template <typename T>
Tensor<T> random_tensor(const Shape& s, Rng& rng, double scale = 1.0) {
  Tensor<T> t(s);
  for (auto& v : t.data) v = static_cast<T>(rng.normal() * scale);
  return t;
}

template <typename T>
Tensor<T> uniform_tensor(const Shape& s, Rng& rng, double lo, double hi) {
  Tensor<T> t(s);
  for (auto& v : t.data) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

struct GradCheck {
  int checked = 0;
  int failed = 0;
  int nonzero = 0;  // samples whose analytic gradient exceeded the floor
  double worst = 0.0;
  double floor = 0.0;  // comparison floor actually used
  std::string worst_detail;
  std::string detail;
};

inline double rel_error(double a, double b, double floor = 1e-8) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline std::string describe(double analytic, double numeric) {
  std::ostringstream os;
  os.precision(6);
  os << std::scientific << "analytic " << analytic << " numeric " << numeric;
  return os.str();
}

// Compares analytic parameter gradients of `loss` against central
// differences on `samples` randomly chosen entries of the parameters whose
// names pass `select`. Entries whose gradients are both below `floor` are
// counted as agreeing when their absolute difference is below `floor` too.
// Ridders' extrapolation of central differences: starts at step h0, shrinks
// it geometrically and keeps the tableau entry with the smallest error
// estimate. Handles both strongly curved losses (which need small steps) and
// losses whose rounding noise swamps small steps.
template <typename F>
double ridders_derivative(F&& f, double h0) {
  constexpr int kLevels = 10;
  constexpr double kShrink = 1.4, kShrink2 = kShrink * kShrink, kSafe = 2.0;
  double a[kLevels][kLevels];
  double h = h0, err = std::numeric_limits<double>::max(), best = 0.0;
  a[0][0] = (f(h) - f(-h)) / (2 * h);
  best = a[0][0];
  for (int i = 1; i < kLevels; ++i) {
    h /= kShrink;
    a[0][i] = (f(h) - f(-h)) / (2 * h);
    double fac = kShrink2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= kShrink2;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= err) {
        err = e;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= kSafe * err) break;
  }
  return best;
}

inline GradCheck check_param_gradients(nn::ParamStore<double>& store,
                                       const std::function<nn::Var<double>(nn::Tape<double>&)>& loss,
                                       Rng& rng, int samples, double tol = 1e-3, double h = 1e-6,
                                       const std::function<bool(const std::string&)>& select = {},
                                       double floor = 1e-9, bool ridders = false) {
  store.zero_grad();
  double base = 0.0;
  {
    nn::Tape<double> tape(true);
    const auto l = loss(tape);
    base = l.value()[0];
    tape.backward(l);
  }
  // A central difference cannot resolve slopes below roughly ulp(L)/h; the
  // comparison floor never drops under ten times that level.
  floor = std::max(floor, 10.0 * std::numeric_limits<double>::epsilon() * std::abs(base) / h);
  GradCheck out;
  out.floor = floor;
  std::vector<nn::Parameter<double>*> params;
  for (auto* p : store.all())
    if (!select || select(p->name)) params.push_back(p);
  auto eval = [&] {
    nn::Tape<double> tape(false);
    return loss(tape).value()[0];
  };
  for (int s = 0; s < samples && !params.empty(); ++s) {
    auto* p = params[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(params.size()) - 1))];
    const std::size_t idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(p->value.numel()) - 1));
    const double analytic = p->grad[idx];
    const double orig = p->value[idx];
    auto at = [&](double offset) {
      p->value[idx] = orig + offset;
      const double v = eval();
      p->value[idx] = orig;
      return v;
    };
    const double numeric = ridders ? ridders_derivative(at, h) : (at(h) - at(-h)) / (2 * h);
    ++out.checked;
    out.nonzero += std::abs(analytic) >= floor;
    const bool tiny = std::abs(analytic) < floor && std::abs(numeric) < floor;
    const double err = tiny ? 0.0 : rel_error(analytic, numeric, floor);
    if (err > out.worst) {
      out.worst = err;
      out.worst_detail = p->name + "[" + std::to_string(idx) + "] " + describe(analytic, numeric);
    }
    if (err > tol) {
      ++out.failed;
      if (out.detail.empty())
        out.detail = p->name + "[" + std::to_string(idx) + "] " + describe(analytic, numeric);
    }
  }
  store.zero_grad();
  return out;
}

// Same check for the gradient with respect to an input tensor.
inline GradCheck check_input_gradient(Tensor<double>& x,
                                      const std::function<nn::Var<double>(nn::Tape<double>&, nn::Var<double>)>& loss,
                                      Rng& rng, int samples, double tol = 1e-3, double h = 1e-6,
                                      double floor = 1e-9) {
  Tensor<double> grad;
  {
    nn::Tape<double> tape(true);
    const auto in = tape.input(x);
    const auto l = loss(tape, in);
    tape.backward(l);
    grad = in.grad();
  }
  GradCheck out;
  auto eval = [&] {
    nn::Tape<double> tape(false);
    return loss(tape, tape.constant(x)).value()[0];
  };
  for (int s = 0; s < samples; ++s) {
    const std::size_t idx = static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(x.numel()) - 1));
    const double analytic = grad.empty() ? 0.0 : grad[idx];
    const double orig = x[idx];
    x[idx] = orig + h;
    const double lp = eval();
    x[idx] = orig - h;
    const double lm = eval();
    x[idx] = orig;
    const double numeric = (lp - lm) / (2 * h);
    ++out.checked;
    out.nonzero += std::abs(analytic) >= floor;
    const bool tiny = std::abs(analytic) < floor && std::abs(numeric) < floor;
    const double err = tiny ? 0.0 : rel_error(analytic, numeric);
    out.worst = std::max(out.worst, err);
    if (err > tol) {
      ++out.failed;
      if (out.detail.empty())
        out.detail = "[" + std::to_string(idx) + "] " + describe(analytic, numeric);
    }
  }
  return out;
}

}  // namespace fctest
