#include <gtest/gtest.h>

#include <cmath>

#include "flashclear/autograd.hpp"
#include "flashclear/errors.hpp"
#include "flashclear/rng.hpp"
#include "test_support.hpp"

using namespace flashclear;
using nn::Tape;
using nn::Var;

namespace {

using UnaryOp = std::function<Var<double>(Tape<double>&, Var<double>)>;

// Checks d/dx sum(w .* op(x)) against central differences.
void expect_input_gradient(const Shape& in_shape, const UnaryOp& op, std::uint64_t seed, double scale = 1.0,
                           int samples = 40) {
  Rng rng(seed);
  Tensor<double> x = fctest::random_tensor<double>(in_shape, rng, scale);
  Tensor<double> w;
  {
    Tape<double> t(false);
    w = fctest::random_tensor<double>(op(t, t.constant(x)).value().shape, rng);
  }
  const auto res = fctest::check_input_gradient(
      x, [&](Tape<double>& t, Var<double> v) { return nn::weighted_sum(op(t, v), w); }, rng, samples, 1e-5);
  EXPECT_EQ(res.failed, 0) << res.detail << " worst " << res.worst;
}

Var<double> constant_like(Tape<double>& t, const Shape& s, std::uint64_t seed, double scale = 1.0) {
  Rng rng(seed);
  return t.constant(fctest::random_tensor<double>(s, rng, scale));
}

}  // namespace

TEST(Autograd, ElementwiseOps) {
  expect_input_gradient({2, 3, 4}, [](Tape<double>& t, Var<double> x) { return nn::silu(x); }, 1);
  expect_input_gradient({2, 3, 4}, [](Tape<double>& t, Var<double> x) { return nn::gelu(x); }, 2);
  expect_input_gradient({2, 3, 4}, [](Tape<double>& t, Var<double> x) { return nn::scale(x, 1.7); }, 3);
  expect_input_gradient({2, 3, 4}, [](Tape<double>& t, Var<double> x) { return nn::add_scalar(x, -0.3); }, 4);
  expect_input_gradient({2, 3, 4},
                        [](Tape<double>& t, Var<double> x) { return nn::mul(x, constant_like(t, {2, 3, 4}, 9)); }, 5);
  expect_input_gradient({2, 3, 4}, [](Tape<double>& t, Var<double> x) { return nn::mul(x, x); }, 6);
  expect_input_gradient({2, 3, 4},
                        [](Tape<double>& t, Var<double> x) { return nn::sub(constant_like(t, {2, 3, 4}, 8), x); }, 7);
  expect_input_gradient({6, 4}, [](Tape<double>& t, Var<double> x) { return nn::reshape(x, {3, 8}); }, 8);
}

TEST(Autograd, ReluAwayFromKink) {
  Rng rng(10);
  Tensor<double> x = fctest::random_tensor<double>({50}, rng);
  for (auto& v : x.data)
    if (std::abs(v) < 0.05) v = 0.5;
  const auto res = fctest::check_input_gradient(
      x, [](Tape<double>&, Var<double> v) { return nn::sum(nn::relu(v)); }, rng, 50);
  EXPECT_EQ(res.failed, 0) << res.detail;
}

TEST(Autograd, ReductionsAndLosses) {
  expect_input_gradient({2, 3, 4}, [](Tape<double>& t, Var<double> x) { return nn::mean(nn::mul(x, x)); }, 11);
  expect_input_gradient({2, 3, 4},
                        [](Tape<double>& t, Var<double> x) { return nn::mse(x, constant_like(t, {2, 3, 4}, 3)); }, 12);
  expect_input_gradient({2, 3, 4, 5}, [](Tape<double>& t, Var<double> x) { return nn::spatial_mean(x); }, 13);
  expect_input_gradient({2, 3, 2, 2},
                        [](Tape<double>& t, Var<double> x) {
                          return nn::affine_per_sample(x, std::vector<double>{0.5, -2.0},
                                                       constant_like(t, {2, 3, 2, 2}, 4), std::vector<double>{1.0, 3.0});
                        },
                        14);
}

TEST(Autograd, MeanAndSumValues) {
  Tape<double> t(false);
  const auto x = t.constant(Tensor<double>({4}, std::vector<double>{1, 2, 3, 6}));
  EXPECT_DOUBLE_EQ(nn::sum(x).value()[0], 12.0);
  EXPECT_DOUBLE_EQ(nn::mean(x).value()[0], 3.0);
  EXPECT_DOUBLE_EQ(nn::mse(x, t.constant(Tensor<double>({4}))).value()[0], 50.0 / 4.0);
}

TEST(Autograd, ConvolutionGradients) {
  for (int stride : {1, 2})
    for (int pad : {0, 1}) {
      expect_input_gradient({2, 3, 6, 6},
                            [&](Tape<double>& t, Var<double> x) {
                              return nn::conv2d(x, constant_like(t, {4, 3, 3, 3}, 21), constant_like(t, {4}, 22), stride,
                                                pad);
                            },
                            20 + stride * 2 + pad);
    }
  // Weight and bias gradients through a parameter store.
  nn::ParamStore<double> store;
  Rng rng(30);
  auto& w = store.add("w", fctest::random_tensor<double>({4, 3, 3, 3}, rng));
  auto& b = store.add("b", fctest::random_tensor<double>({4}, rng));
  const auto x = fctest::random_tensor<double>({2, 3, 5, 5}, rng);
  const auto r = fctest::check_param_gradients(
      store,
      [&](Tape<double>& t) {
        return nn::mse(nn::conv2d(t.constant(x), t.param(w), t.param(b), 2, 1), t.constant(Tensor<double>({2, 4, 3, 3})));
      },
      rng, 60);
  EXPECT_EQ(r.failed, 0) << r.detail;
}

TEST(Autograd, ConvolutionMatchesDirectSum) {
  Rng rng(31);
  const auto x = fctest::random_tensor<double>({1, 2, 4, 4}, rng);
  const auto w = fctest::random_tensor<double>({3, 2, 3, 3}, rng);
  const auto b = fctest::random_tensor<double>({3}, rng);
  Tape<double> t(false);
  const auto y = nn::conv2d(t.constant(x), t.constant(w), t.constant(b), 1, 1).value();
  ASSERT_EQ(y.shape, (Shape{1, 3, 4, 4}));
  for (int o = 0; o < 3; ++o)
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        double acc = b[o];
        for (int c = 0; c < 2; ++c)
          for (int ki = 0; ki < 3; ++ki)
            for (int kj = 0; kj < 3; ++kj) {
              const int ii = i + ki - 1, jj = j + kj - 1;
              if (ii < 0 || jj < 0 || ii >= 4 || jj >= 4) continue;
              acc += w[((o * 2 + c) * 3 + ki) * 3 + kj] * x[(c * 4 + ii) * 4 + jj];
            }
        EXPECT_NEAR(y[(o * 4 + i) * 4 + j], acc, 1e-12);
      }
}

TEST(Autograd, NormalisationGradients) {
  expect_input_gradient({2, 8, 3, 3},
                        [](Tape<double>& t, Var<double> x) {
                          return nn::group_norm(x, constant_like(t, {8}, 41), constant_like(t, {8}, 42), 4);
                        },
                        40);
  expect_input_gradient({2, 5, 6},
                        [](Tape<double>& t, Var<double> x) {
                          return nn::layer_norm(x, constant_like(t, {6}, 43), constant_like(t, {6}, 44));
                        },
                        45);
  expect_input_gradient({2, 3, 4, 4}, [](Tape<double>& t, Var<double> x) { return nn::channel_normalize(x); }, 46);
}

TEST(Autograd, LayerNormStatistics) {
  Rng rng(47);
  Tape<double> t(false);
  const auto x = t.constant(fctest::random_tensor<double>({3, 7, 10}, rng, 3.0));
  const auto y = nn::layer_norm(x, t.constant(Tensor<double>({10}, 1.0)), t.constant(Tensor<double>({10}))).value();
  for (int r = 0; r < 21; ++r) {
    double m = 0, v = 0;
    for (int i = 0; i < 10; ++i) m += y[r * 10 + i];
    m /= 10;
    for (int i = 0; i < 10; ++i) v += (y[r * 10 + i] - m) * (y[r * 10 + i] - m);
    EXPECT_NEAR(m, 0.0, 1e-12);
    EXPECT_NEAR(v / 10, 1.0, 1e-4);
  }
}

TEST(Autograd, ShapeOps) {
  expect_input_gradient({2, 3, 3, 3}, [](Tape<double>& t, Var<double> x) { return nn::upsample2x(x); }, 50);
  expect_input_gradient({2, 3, 3, 3},
                        [](Tape<double>& t, Var<double> x) {
                          return nn::concat_channels<double>({constant_like(t, {2, 2, 3, 3}, 51), x});
                        },
                        52);
  expect_input_gradient({2, 3, 4, 4}, [](Tape<double>& t, Var<double> x) { return nn::to_tokens(x); }, 53);
  expect_input_gradient({2, 16, 3}, [](Tape<double>& t, Var<double> x) { return nn::from_tokens(x, 4, 4); }, 54);
  expect_input_gradient({2, 3, 4, 4},
                        [](Tape<double>& t, Var<double> x) {
                          return nn::add_channel_bias(x, constant_like(t, {2, 3}, 55));
                        },
                        56);
  expect_input_gradient({2, 3},
                        [](Tape<double>& t, Var<double> b) {
                          return nn::add_channel_bias(constant_like(t, {2, 3, 4, 4}, 57), b);
                        },
                        58);
}

TEST(Autograd, TokensRoundTrip) {
  Rng rng(60);
  Tape<double> t(false);
  const auto x = fctest::random_tensor<double>({2, 3, 4, 5}, rng);
  const auto tok = nn::to_tokens(t.constant(x));
  EXPECT_EQ(tok.value().shape, (Shape{2, 20, 3}));
  EXPECT_EQ(tok.value()[(1 * 20 + 7) * 3 + 2], x[((1 * 3 + 2) * 4 + 1) * 5 + 2]);
  EXPECT_EQ(nn::from_tokens(tok, 4, 5).value().data, x.data);
}

TEST(Autograd, LinearAndAttention) {
  expect_input_gradient({2, 5, 6},
                        [](Tape<double>& t, Var<double> x) {
                          return nn::linear(x, constant_like(t, {4, 6}, 61), constant_like(t, {4}, 62));
                        },
                        63);
  for (int heads : {1, 2}) {
    expect_input_gradient({2, 5, 8},
                          [&](Tape<double>& t, Var<double> q) {
                            return nn::attention_probs(q, constant_like(t, {2, 7, 8}, 64), heads);
                          },
                          65 + heads);
    expect_input_gradient({2, 7, 8},
                          [&](Tape<double>& t, Var<double> k) {
                            return nn::attention_probs(constant_like(t, {2, 5, 8}, 68), k, heads);
                          },
                          69 + heads);
    expect_input_gradient({2, 7, 8},
                          [&](Tape<double>& t, Var<double> v) {
                            auto p = nn::attention_probs(constant_like(t, {2, 5, 8}, 72), constant_like(t, {2, 7, 8}, 73),
                                                         heads);
                            return nn::attention_apply(p, v, heads);
                          },
                          74 + heads);
    expect_input_gradient({2, 5, 8},
                          [&](Tape<double>& t, Var<double> q) {
                            auto p = nn::attention_probs(q, constant_like(t, {2, 7, 8}, 76), heads);
                            return nn::head_mean_column(p, 1);
                          },
                          78 + heads);
  }
}

TEST(Autograd, AttentionMatchesDirectSoftmax) {
  Rng rng(80);
  const int n = 5, m = 6, d = 4, heads = 2, dh = 2;
  const auto q = fctest::random_tensor<double>({1, n, d}, rng);
  const auto k = fctest::random_tensor<double>({1, m, d}, rng);
  const auto v = fctest::random_tensor<double>({1, m, d}, rng);
  Tape<double> t(false);
  const auto p = nn::attention_probs(t.constant(q), t.constant(k), heads);
  const auto o = nn::attention_apply(p, t.constant(v), heads).value();
  for (int h = 0; h < heads; ++h)
    for (int i = 0; i < n; ++i) {
      std::vector<double> s(m);
      double mx = -1e300, z = 0;
      for (int j = 0; j < m; ++j) {
        double acc = 0;
        for (int c = 0; c < dh; ++c) acc += q[i * d + h * dh + c] * k[j * d + h * dh + c];
        s[j] = acc / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, s[j]);
      }
      for (int j = 0; j < m; ++j) z += std::exp(s[j] - mx);
      for (int c = 0; c < dh; ++c) {
        double acc = 0;
        for (int j = 0; j < m; ++j) acc += std::exp(s[j] - mx) / z * v[j * d + h * dh + c];
        EXPECT_NEAR(o[i * d + h * dh + c], acc, 1e-12);
      }
      double row = 0;
      for (int j = 0; j < m; ++j) row += p.value()[(h * n + i) * m + j];
      EXPECT_NEAR(row, 1.0, 1e-12);
    }
}

TEST(Autograd, ParamStoreBasics) {
  nn::ParamStore<float> s;
  s.add("a", Tensor<float>({2, 3}, 1.0f));
  s.add("b", Tensor<float>({4}));
  EXPECT_EQ(s.size(), 2u);
  EXPECT_EQ(s.total_elements(), 10u);
  EXPECT_THROW(s.add("a", Tensor<float>({1})), ConfigError);
  EXPECT_THROW(s.get("zz"), ConfigError);
  nn::ParamStore<double> d;
  d.add("x.a", Tensor<double>({2, 3}));
  EXPECT_EQ(d.copy_matching(s, "", "x."), 1u);
  EXPECT_EQ(d.get("x.a").value[4], 1.0);
}

TEST(Autograd, GradientsAccumulateIntoParameters) {
  nn::ParamStore<double> s;
  auto& p = s.add("p", Tensor<double>({3}, std::vector<double>{1, 2, 3}));
  for (int rep = 0; rep < 2; ++rep) {
    Tape<double> t(true);
    t.backward(nn::sum(nn::mul(t.param(p), t.param(p))));
  }
  EXPECT_DOUBLE_EQ(p.grad[2], 12.0);
  s.zero_grad();
  EXPECT_DOUBLE_EQ(p.grad[2], 0.0);
}
