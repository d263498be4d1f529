#include <gtest/gtest.h>

#include <cmath>

#include "flashclear/errors.hpp"
#include "flashclear/model.hpp"
#include "test_support.hpp"

using namespace flashclear;
using nn::Tape;
using nn::Var;

namespace {

Tensor<double> binary_mask(const Shape& s, Rng& rng) {
  Tensor<double> m(s);
  for (auto& v : m.data) v = rng.uniform() < 0.3 ? 1.0 : 0.0;
  return m;
}

ModelInput<double> random_input(const UNetConfig& cfg, int batch, Rng& rng) {
  const Shape ls{batch, cfg.latent_channels, cfg.latent_size, cfg.latent_size};
  return assemble_input(fctest::random_tensor<double>(ls, rng), binary_mask({batch, 1, cfg.latent_size, cfg.latent_size}, rng),
                        fctest::random_tensor<double>(ls, rng));
}

// Perturbs every parameter so zero-initialised output layers do not hide
// gradient paths.
template <typename T>
void jitter_params(nn::ParamStore<T>& store, Rng& rng, double scale) {
  for (auto* p : store.all())
    for (auto& v : p->value.data) v += static_cast<T>(rng.normal() * scale);
}

class RecordingHook : public BlockInterceptor<double> {
 public:
  std::vector<std::string> seen;
  void on_block_output(const std::string& id, const Tensor<double>&) override { seen.push_back(id); }
};

// Replaces every block with the unmodified dense computation to check the
// replacement plumbing is transparent.
class PassThroughHook : public BlockInterceptor<double> {
 public:
  int calls = 0;
  bool replace_block(const TransformerBlock<double>& block, const Tensor<double>& h_in, const Tensor<double>& cond,
                     Tensor<double>& out, Tensor<double>& cross_map) override {
    Tape<double> t(false);
    Var<double> probs;
    out = block.forward(t.constant(h_in), t.constant(cond), &probs).value();
    const Tensor<double> pv = probs.value();
    const int heads = pv.dim(1), n = pv.dim(2), k = pv.dim(3);
    cross_map = Tensor<double>({1, n, k});
    for (int h = 0; h < heads; ++h)
      for (int e = 0; e < n * k; ++e) cross_map[e] += pv[h * n * k + e];
    for (auto& v : cross_map.data) v *= 1.0 / heads;
    ++calls;
    return true;
  }
};

}  // namespace

TEST(UNetConfig, LayerGridsAndWidths) {
  const UNetConfig c;
  EXPECT_NO_THROW(c.validate());
  EXPECT_EQ(attention_layer_ids(), (std::vector<std::string>{"down.1", "down.2", "mid", "up.0", "up.1"}));
  EXPECT_EQ(c.grid_of("down.1"), 16);
  EXPECT_EQ(c.grid_of("up.1"), 16);
  EXPECT_EQ(c.grid_of("mid"), 8);
  EXPECT_EQ(c.width_of("up.0"), 128);
  EXPECT_EQ(c.input_channels(), 7);
  EXPECT_THROW(c.grid_of("up.2"), ConfigError);
  EXPECT_FALSE(is_attention_layer("down.0"));
}

TEST(UNetConfig, RejectsInvalidConfigs) {
  UNetConfig c;
  c.heads = 3;
  EXPECT_THROW(c.validate(), ConfigError);
  c = UNetConfig{};
  c.widths = {30, 64, 128};
  EXPECT_THROW(c.validate(), ConfigError);
  c = UNetConfig{};
  c.map_layer = "nowhere";
  EXPECT_THROW(c.validate(), ConfigError);
  c = UNetConfig{};
  c.latent_size = 30;
  EXPECT_THROW(c.validate(), ConfigError);
}

TEST(Codec, IdentityRoundTripIsExact) {
  const LatentCodec codec(CodecMode::kIdentity, 32);
  const Scene s = generate_scene(5, CorpusConfig{});
  const auto z = codec.encode<float>(s.image);
  EXPECT_EQ(z.shape, (Shape{3, 32, 32}));
  EXPECT_EQ(codec.decode(z), s.image);
  const auto zd = codec.encode<double>(s.image);
  EXPECT_EQ(codec.decode(zd), s.image);
  const auto zero = codec.encode<float>(std::vector<float>(32 * 32 * 3, 0.0f));
  for (float v : zero.data) EXPECT_EQ(v, 0.0f);
}

TEST(Codec, ErrorsAndUnavailableLearnedMode) {
  const LatentCodec codec(CodecMode::kIdentity, 32);
  EXPECT_THROW(codec.encode<float>(std::vector<float>(10)), ShapeError);
  EXPECT_THROW(codec.decode(Tensor<float>({3, 16, 16})), ShapeError);
  EXPECT_THROW(LatentCodec(CodecMode::kLearned, 32), ConfigError);
}

TEST(AssembleInput, ChannelOrderAndSlicing) {
  Rng rng(1);
  const Shape ls{2, 3, 8, 8};
  const auto z = fctest::random_tensor<double>(ls, rng);
  const auto r = fctest::random_tensor<double>(ls, rng);
  const auto m = binary_mask({2, 1, 8, 8}, rng);
  const auto in = assemble_input(z, m, r);
  EXPECT_EQ(in.data.shape, (Shape{2, 7, 8, 8}));
  EXPECT_EQ(in.z_t().data, z.data);
  EXPECT_EQ(in.mask().data, m.data);
  EXPECT_EQ(in.z_ref().data, r.data);
  // Sample 1, channel 3 is the mask plane.
  for (int i = 0; i < 64; ++i) EXPECT_EQ(in.data[(1 * 7 + 3) * 64 + i], m[64 + i]);
  const auto ones = assemble_input(z, Tensor<double>({2, 1, 8, 8}, 1.0), r);
  for (double v : ones.mask().data) EXPECT_EQ(v, 1.0);
}

TEST(AssembleInput, RejectsBadMasks) {
  Rng rng(2);
  const Shape ls{1, 3, 8, 8};
  const auto z = fctest::random_tensor<double>(ls, rng);
  Tensor<double> m({1, 1, 8, 8});
  m[5] = 0.5;
  EXPECT_THROW(assemble_input(z, m, z), ShapeError);
  EXPECT_THROW(assemble_input(z, Tensor<double>({1, 1, 4, 4}), z), ShapeError);
}

TEST(PoolMask, AnyPixelMarksCell) {
  std::vector<std::uint8_t> m(16, 0);
  m[5] = 1;  // (1,1) -> cell (0,0) on a 2x2 grid
  m[15] = 1; // (3,3) -> cell (1,1)
  EXPECT_EQ(pool_mask_to_grid(m, 4, 4, 2), (std::vector<std::uint8_t>{1, 0, 0, 1}));
  EXPECT_EQ(pool_mask_to_grid(m, 4, 4, 4), m);
  EXPECT_THROW(pool_mask_to_grid(m, 4, 4, 3), ShapeError);
}

TEST(Condition, ShapeDeterminismAndNonDegeneracy) {
  const auto cfg = fctest::tiny_config();
  Denoiser<double> model(cfg, 7);
  const auto cc = fctest::tiny_corpus_config();
  const Scene a = generate_scene(1, cc), b = generate_scene(2, cc);
  const auto ea = embed_condition(model, a), ea2 = embed_condition(model, a), eb = embed_condition(model, b);
  EXPECT_EQ(ea.tokens.shape, (Shape{cfg.cond_tokens, cfg.cond_dim}));
  EXPECT_EQ(ea.tokens.data, ea2.tokens.data);
  EXPECT_NE(ea.tokens.data, eb.tokens.data);
  for (double v : ea.tokens.data) EXPECT_TRUE(std::isfinite(v));
  Scene empty = a;
  std::fill(empty.m_obj.begin(), empty.m_obj.end(), 0);
  EXPECT_THROW(embed_condition(model, empty), ShapeError);
}

TEST(Denoise, DeterministicShapesAndStochasticRows) {
  const auto cfg = fctest::tiny_config();
  Denoiser<double> model(cfg, 11);
  Rng rng(3);
  jitter_params(model.params(), rng, 0.05);
  const auto in = random_input(cfg, 2, rng);
  const auto cond = fctest::random_tensor<double>({2, cfg.cond_tokens, cfg.cond_dim}, rng);
  Tensor<double> first;
  for (int rep = 0; rep < 2; ++rep) {
    Tape<double> t(false);
    const auto out = model.denoise(t, in, {10, 700}, t.constant(cond));
    EXPECT_EQ(out.eps.value().shape, (Shape{2, 3, 16, 16}));
    if (rep == 0) {
      first = out.eps.value();
      ASSERT_EQ(out.cross_probs.size(), 5u);
      for (const auto& [id, p] : out.cross_probs) {
        const Tensor<double> pv = p.value();
        const int k = pv.dim(-1);
        EXPECT_EQ(k, cfg.cond_tokens);
        for (std::size_t r = 0; r < pv.numel() / k; ++r) {
          double s = 0;
          for (int j = 0; j < k; ++j) {
            EXPECT_GE(pv[r * k + j], 0.0);
            s += pv[r * k + j];
          }
          EXPECT_NEAR(s, 1.0, 1e-5) << id;
        }
        const int g = cfg.grid_of(id);
        EXPECT_EQ(out.record.column(id, 1).size(), static_cast<std::size_t>(g * g));
      }
      EXPECT_EQ(out.record.self.size(), 5u);
      for (const auto& s : out.record.self) {
        EXPECT_EQ(s.dim, cfg.attn_dim);
        EXPECT_EQ(s.tokens, cfg.grid_of(s.layer) * cfg.grid_of(s.layer));
      }
      EXPECT_THROW(out.record.column("nope", 0), ConfigError);
      EXPECT_THROW(out.record.column("mid", 2), ShapeError);
    } else {
      {
        double worst = 0;
        for (std::size_t i = 0; i < first.numel(); ++i) worst = std::max(worst, std::abs(out.eps.value()[i] - first[i]));
        EXPECT_EQ(out.eps.value().data, first.data) << "max diff " << worst;
      }
    }
  }
}

TEST(Denoise, RejectsMismatchedInputs) {
  const auto cfg = fctest::tiny_config();
  Denoiser<double> model(cfg, 11);
  Rng rng(4);
  const auto in = random_input(cfg, 1, rng);
  Tape<double> t(false);
  const auto cond = t.constant(Tensor<double>({1, cfg.cond_tokens, cfg.cond_dim}));
  EXPECT_THROW(model.denoise(t, in, {1, 2}, cond), ShapeError);
  EXPECT_THROW(model.denoise(t, in, {5}, t.constant(Tensor<double>({1, 2, cfg.cond_dim}))), ShapeError);
  const auto wrong = random_input(fctest::tiny_config(), 1, rng);
  auto bad = wrong;
  bad.data = Tensor<double>({1, 7, 8, 8});
  EXPECT_THROW(model.denoise(t, bad, {5}, cond), ShapeError);
}

TEST(Denoise, BlockHooksSeeEveryLayerAndPassThroughIsExact) {
  const auto cfg = fctest::tiny_config();
  Denoiser<double> model(cfg, 12);
  Rng rng(5);
  jitter_params(model.params(), rng, 0.05);
  const auto in = random_input(cfg, 1, rng);
  const auto cond = fctest::random_tensor<double>({1, cfg.cond_tokens, cfg.cond_dim}, rng);
  Tensor<double> plain;
  std::vector<double> plain_col;
  {
    Tape<double> t(false);
    RecordingHook hook;
    const auto out = model.denoise(t, in, {300}, t.constant(cond), &hook);
    plain = out.eps.value();
    plain_col = out.record.column("up.1", 0);
    EXPECT_EQ(hook.seen, attention_layer_ids());
  }
  Tape<double> t(false);
  PassThroughHook hook;
  const auto out = model.denoise(t, in, {300}, t.constant(cond), &hook);
  EXPECT_EQ(hook.calls, 5);
  EXPECT_EQ(out.eps.value().data, plain.data);
  EXPECT_EQ(out.record.column("up.1", 0), plain_col);
}

TEST(Denoise, ParameterGradientsMatchFiniteDifferences) {
  const auto cfg = fctest::tiny_config();
  Denoiser<double> model(cfg, 13);
  Rng rng(6);
  jitter_params(model.params(), rng, 0.05);
  const auto in = random_input(cfg, 1, rng);
  const auto cc = fctest::tiny_corpus_config();
  const Scene sc = generate_scene(3, cc);
  const auto patches = patch_batch<double>({&sc}, cfg.cond_patch);
  const auto r = fctest::check_param_gradients(
      model.params(),
      [&](Tape<double>& t) {
        const auto out = model.denoise(t, in, {250}, model.embed(t, patches));
        return nn::mean(nn::mul(out.eps, out.eps));
      },
      rng, 120, 1e-3, 1e-6, {}, 1e-8);
  EXPECT_EQ(r.failed, 0) << r.detail << " worst " << r.worst;
  EXPECT_GE(r.checked, 120);
}

TEST(Denoise, CrossAttentionGradientsMatchFiniteDifferences) {
  const auto cfg = fctest::tiny_config();
  Denoiser<double> model(cfg, 14);
  Rng rng(7);
  jitter_params(model.params(), rng, 0.05);
  const auto in = random_input(cfg, 1, rng);
  const auto cond = fctest::random_tensor<double>({1, cfg.cond_tokens, cfg.cond_dim}, rng);
  const auto w = fctest::random_tensor<double>({1, 64}, rng);
  const auto r = fctest::check_param_gradients(
      model.params(),
      [&](Tape<double>& t) {
        const auto out = model.denoise(t, in, {600}, t.constant(cond));
        return nn::weighted_sum(nn::head_mean_column(out.cross_probs.at("up.1"), kVisualToken), w);
      },
      rng, 60, 1e-3, 1e-6, [](const std::string& n) { return n.find("unet.") == 0; }, 1e-8);
  EXPECT_EQ(r.failed, 0) << r.detail << " worst " << r.worst;
}

TEST(Denoise, FloatConversionTracksDoubleModel) {
  const auto cfg = fctest::tiny_config();
  Denoiser<float> f(cfg, 21);
  const auto d = Denoiser<double>::from(f);
  for (const auto* p : f.params().all()) {
    const auto& q = d->params().get(p->name);
    for (std::size_t i = 0; i < p->value.numel(); ++i) ASSERT_EQ(static_cast<double>(p->value[i]), q.value[i]);
  }
  Denoiser<float> f2(cfg, 21);
  for (const auto* p : f.params().all()) EXPECT_EQ(p->value.data, f2.params().get(p->name).value.data);
}

TEST(Numerics, NonFiniteTensorsAreReported) {
  Tensor<float> t({3});
  EXPECT_NO_THROW(check_finite(t, "t"));
  t[1] = std::nanf("");
  EXPECT_THROW(check_finite(t, "t"), NumericFault);
}
