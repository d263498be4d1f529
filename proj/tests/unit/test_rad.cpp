#include <gtest/gtest.h>

#include <cmath>
#include <numeric>

#include "flashclear/checkpoint.hpp"
#include "flashclear/errors.hpp"
#include "flashclear/rad.hpp"
#include "rad_cases.hpp"
#include "test_support.hpp"

using namespace flashclear;
using nn::Tape;
using nn::Var;

namespace {

Var<double> vec(Tape<double>& t, std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return t.constant(Tensor<double>({n}, std::move(v)));
}

std::vector<Scene> tiny_corpus(std::uint64_t first, int n) {
  return generate_corpus(first, n, fctest::tiny_corpus_config());
}

bool same_params(const nn::ParamStore<float>& a, const nn::ParamStore<float>& b) {
  for (const auto* p : a.all())
    if (p->value.data != b.get(p->name).value.data) return false;
  return a.size() == b.size();
}

}  // namespace

TEST(DiscLoss, HingeExamples) {
  Tape<double> t(false);
  EXPECT_EQ(disc_loss(vec(t, {1, 1, 1}), vec(t, {-1, -1, -1})).value()[0], 0.0);
  EXPECT_EQ(disc_loss(vec(t, {0, 0}), vec(t, {0, 0})).value()[0], 2.0);
  EXPECT_THROW(disc_loss(vec(t, {0, 0}), vec(t, {0})), ShapeError);
}

TEST(DiscLoss, MatchesScalarOracle) {
  Rng rng(1);
  for (int rep = 0; rep < 50; ++rep) {
    std::vector<double> r(5), f(5);
    double want = 0;
    for (int i = 0; i < 5; ++i) {
      r[i] = rng.normal() * 2;
      f[i] = rng.normal() * 2;
      want += std::max(0.0, 1 - r[i]) / 5 + std::max(0.0, 1 + f[i]) / 5;
    }
    Tape<double> t(false);
    EXPECT_NEAR(disc_loss(vec(t, r), vec(t, f)).value()[0], want, 1e-12);
  }
}

TEST(GenLoss, ZeroCases) {
  Rng rng(2);
  const auto z = fctest::random_tensor<double>({2, 3, 4, 4}, rng);
  Tape<double> t(false);
  const auto g = gen_loss(t.constant(z), t.constant(z), vec(t, {0, 0}), static_cast<const PerceptualLoss<double>*>(nullptr), LossWeights{});
  EXPECT_EQ(g.total.value()[0], 0.0);
  EXPECT_FALSE(g.lpips_enabled);
  EXPECT_EQ(g.lpips, 0.0);

  const RandFeatPerceptual<double> lp;
  const auto other = fctest::random_tensor<double>({2, 3, 4, 4}, rng);
  const auto zero = gen_loss(t.constant(z), t.constant(other), vec(t, {3, -2}), &lp, LossWeights{0, 0, 0, 0});
  EXPECT_EQ(zero.total.value()[0], 0.0);
  EXPECT_TRUE(zero.lpips_enabled);
  EXPECT_GT(zero.diff, 0.0);
}

TEST(GenLoss, MatchesScalarOracleWithAllTerms) {
  Rng rng(3);
  const RandFeatPerceptual<double> lp(5, 8);
  for (int rep = 0; rep < 20; ++rep) {
    const auto a = fctest::uniform_tensor<double>({2, 3, 6, 6}, rng, 0, 1);
    const auto b = fctest::uniform_tensor<double>({2, 3, 6, 6}, rng, 0, 1);
    const std::vector<double> fake{rng.normal(), rng.normal()};
    const LossWeights w{rng.uniform(0, 2), rng.uniform(0, 6), rng.uniform(0, 1), 0.0};
    double mse = 0;
    for (std::size_t i = 0; i < a.numel(); ++i) mse += (a[i] - b[i]) * (a[i] - b[i]) / a.numel();
    Tape<double> t(false);
    const double perc = lp(t.constant(a), t.constant(b)).value()[0];
    const double gan = -(fake[0] + fake[1]) / 2;
    const auto g = gen_loss(t.constant(a), t.constant(b), vec(t, fake), &lp, w);
    EXPECT_NEAR(g.diff, mse, 1e-12);
    EXPECT_NEAR(g.gan, gan, 1e-12);
    EXPECT_NEAR(g.lpips, perc, 1e-12);
    EXPECT_NEAR(g.total.value()[0], w.diff * mse + w.lpips * perc + w.gan * gan, 1e-12);
  }
  LossWeights bad;
  bad.gan = -1;
  Tape<double> t(false);
  EXPECT_THROW(gen_loss(vec(t, {1}), vec(t, {1}), vec(t, {0}), static_cast<const PerceptualLoss<double>*>(nullptr), bad), ConfigError);
}

TEST(MaskLoss, Endpoints) {
  Tape<double> t(false);
  Tensor<double> m({1, 6}, std::vector<double>{1, 0, 0, 1, 0, 0});
  EXPECT_EQ(mask_loss(t.constant(m), m).value()[0], -1.0);
  EXPECT_EQ(mask_loss(t.constant(Tensor<double>({1, 6}, 0.5)), m).value()[0], 0.0);
  EXPECT_EQ(mask_loss_value({1, 0, 0, 1, 0, 0}, {1, 0, 0, 1, 0, 0}), -1.0);
}

TEST(MaskLoss, MatchesTwoMeanOracleAndStaysBounded) {
  Rng rng(4);
  for (int rep = 0; rep < 200; ++rep) {
    const int n = rng.uniform_int(2, 40);
    std::vector<double> a(n);
    std::vector<std::uint8_t> m(n);
    for (int i = 0; i < n; ++i) {
      a[i] = rng.uniform();
      m[i] = rng.uniform() < 0.4;
    }
    m[0] = 1;
    m[1] = 0;
    double sf = 0, sb = 0;
    int nf = 0;
    for (int i = 0; i < n; ++i) (m[i] ? (++nf, sf) : sb) += a[i];
    const double want = sb / (n - nf) - sf / nf;
    Tensor<double> mt({1, n});
    for (int i = 0; i < n; ++i) mt[i] = m[i];
    Tape<double> t(false);
    const double got = mask_loss(t.constant(Tensor<double>({1, n}, a)), mt).value()[0];
    EXPECT_NEAR(got, want, 1e-12);
    EXPECT_NEAR(mask_loss_value(a, m), want, 1e-12);
    EXPECT_GE(got, -1.0);
    EXPECT_LE(got, 1.0);
  }
}

TEST(MaskLoss, RejectsDegenerateMasks) {
  Tape<double> t(false);
  const auto a = t.constant(Tensor<double>({1, 4}, 0.25));
  EXPECT_THROW(mask_loss(a, Tensor<double>({1, 4}, 1.0)), ShapeError);
  EXPECT_THROW(mask_loss(a, Tensor<double>({1, 4}, 0.0)), ShapeError);
  EXPECT_THROW(mask_loss(a, Tensor<double>({1, 4}, std::vector<double>{1, 0.5, 0, 0})), ShapeError);
  EXPECT_THROW(mask_loss_value({0.1, 0.2}, {1, 1}), ShapeError);
}

TEST(RadGradients, DiscLossCases) {
  for (std::uint64_t s : {1ull, 2ull, 3ull}) {
    const auto r = fctest::check_disc_loss_case(s, 25);
    EXPECT_EQ(r.failed, 0) << "seed " << s << ": " << r.detail;
    EXPECT_GT(r.nonzero, 0);
  }
}

TEST(RadGradients, GenLossCases) {
  for (auto term : {fctest::GenTerm::kDiff, fctest::GenTerm::kLpips, fctest::GenTerm::kGan, fctest::GenTerm::kAll}) {
    const auto r = fctest::check_gen_loss_case(7, term, 25);
    EXPECT_EQ(r.failed, 0) << fctest::gen_term_name(term) << ": " << r.detail;
    EXPECT_GT(r.nonzero, 0) << fctest::gen_term_name(term);
  }
}

TEST(RadGradients, MaskLossCases) {
  for (std::uint64_t s : {4ull, 5ull}) {
    const auto r = fctest::check_mask_loss_case(s, 25);
    EXPECT_EQ(r.failed, 0) << "seed " << s << ": " << r.detail;
    EXPECT_GT(r.nonzero, 0);
  }
}

TEST(Discriminator, DeterministicSeenMaskAndInputGradient) {
  auto f = fctest::make_rad_fixture(11);
  Tensor<double> seen;
  double first = 0;
  for (int rep = 0; rep < 2; ++rep) {
    Tape<double> t(false);
    const auto s = f.disc->score(t.constant(f.batch.z_gt), f.batch.z_ref, f.batch.m_eff, f.ts, f.batch.patches, &seen);
    EXPECT_EQ(s.value().shape, (Shape{2}));
    if (rep == 0) first = s.value()[0];
    else EXPECT_EQ(s.value()[0], first);
  }
  EXPECT_EQ(seen.data, f.batch.m_eff.data);

  Rng rng(12);
  auto z = f.batch.z_gt;
  const auto r = fctest::check_input_gradient(
      z,
      [&](Tape<double>& t, Var<double> v) {
        return nn::sum(f.disc->score(v, f.batch.z_ref, f.batch.m_eff, f.ts, f.batch.patches));
      },
      rng, 40, 1e-3, 1e-6, 1e-8);
  EXPECT_EQ(r.failed, 0) << r.detail;

  Tensor<double> bad = f.batch.m_eff;
  bad[0] = 0.5;
  Tape<double> t(false);
  EXPECT_THROW(f.disc->score(t.constant(f.batch.z_gt), f.batch.z_ref, bad, f.ts, f.batch.patches), ShapeError);
  EXPECT_THROW(f.disc->score(t.constant(f.batch.z_gt), f.batch.z_ref, Tensor<double>({2, 1, 8, 8}), f.ts,
                             f.batch.patches),
               ShapeError);
}

TEST(Discriminator, InitCopiesTeacherEncoder) {
  const auto cfg = fctest::tiny_config();
  Denoiser<float> teacher(cfg, 3);
  Discriminator<float> d(cfg, 4);
  d.init_from(teacher);
  std::size_t copied = 0;
  for (const auto* p : d.params().all()) {
    if (p->name.rfind("head.", 0) == 0) continue;
    EXPECT_EQ(p->value.data, teacher.params().get(p->name).value.data) << p->name;
    ++copied;
  }
  EXPECT_GT(copied, 10u);
  UNetConfig other = cfg;
  other.heads = 4;
  Denoiser<float> mismatched(other, 3);
  EXPECT_THROW(d.init_from(mismatched), ConfigError);
}

TEST(Batches, MakeBatchAndDiffuse) {
  const auto cfg = fctest::tiny_config();
  const auto corpus = tiny_corpus(50, 3);
  const auto b = make_batch<float>({&corpus[0], &corpus[2]}, cfg);
  EXPECT_EQ(b.z_gt.shape, (Shape{2, 3, 16, 16}));
  EXPECT_EQ(b.patches.shape, (Shape{2, 4, cfg.cond_patch, cfg.cond_patch}));
  const int g = cfg.grid_of(cfg.map_layer);
  const auto pooled = pool_mask_to_grid(corpus[2].m_obj_eff, 16, 16, g);
  for (int k = 0; k < g * g; ++k) EXPECT_EQ(b.fg_tokens[g * g + k], pooled[k]);
  for (int p = 0; p < 256; ++p) {
    EXPECT_EQ(b.m_obj[256 + p], corpus[2].m_obj[p] ? 1.0f : 0.0f);
    EXPECT_EQ(b.z_gt[(1 * 3 + 2) * 256 + p], corpus[2].gt_background[p * 3 + 2]);
  }
  EXPECT_THROW(make_batch<float>({}, cfg), ShapeError);

  const auto sched = make_linear_schedule(1000);
  Rng rng(5);
  const auto eps = fctest::random_tensor<float>(b.z_gt.shape, rng);
  const auto zt = diffuse_batch(b.z_gt, {999, 10}, eps, sched);
  const Tensor<float> half0({1, 3, 16, 16}, std::vector<float>(b.z_gt.data.begin(), b.z_gt.data.begin() + 768));
  const Tensor<float> eps0({1, 3, 16, 16}, std::vector<float>(eps.data.begin(), eps.data.begin() + 768));
  const auto ref = forward_diffuse(half0, 999, eps0, sched);
  for (int i = 0; i < 768; ++i) EXPECT_FLOAT_EQ(zt[i], ref[i]);
  EXPECT_THROW(diffuse_batch(b.z_gt, {1000, 0}, eps, sched), ShapeError);
}

TEST(Batches, PredictX0VarMatchesScalarForm) {
  const auto sched = make_linear_schedule(1000);
  Rng rng(6);
  const auto zt = fctest::random_tensor<double>({2, 3, 4, 4}, rng);
  const auto eps = fctest::random_tensor<double>({2, 3, 4, 4}, rng);
  Tape<double> t(false);
  const auto x0 = predict_x0_var(zt, t.constant(eps), {999, 249}, sched).value();
  for (int i = 0; i < 96; ++i) {
    const double ab = sched.alpha_bar(i < 48 ? 999 : 249);
    EXPECT_NEAR(x0[i], (zt[i] - std::sqrt(1 - ab) * eps[i]) / std::sqrt(ab), 1e-9);
  }
}

TEST(Batches, SelectionIsPureInSeedAndIteration) {
  const auto corpus = tiny_corpus(0, 10);
  const auto a = select_batch(corpus, 4, 9, "x", 17), b = select_batch(corpus, 4, 9, "x", 17);
  EXPECT_EQ(a, b);
  EXPECT_NE(select_batch(corpus, 4, 9, "x", 18), a);
  EXPECT_THROW(select_batch({}, 4, 9, "x", 0), ShapeError);
  EXPECT_THROW(select_batch(corpus, 0, 9, "x", 0), ConfigError);
}

TEST(Teacher, LearningRateSchedule) {
  TeacherConfig tc;
  tc.iterations = 1000;
  tc.warmup = 100;
  tc.lr = 1e-3;
  tc.final_lr_fraction = 0.1;
  EXPECT_NEAR(teacher_lr(tc, 0), 1e-5, 1e-15);
  EXPECT_NEAR(teacher_lr(tc, 99), 1e-3, 1e-15);
  EXPECT_NEAR(teacher_lr(tc, 100), 1e-3, 1e-15);
  EXPECT_NEAR(teacher_lr(tc, 550), 0.55e-3, 1e-12);
  EXPECT_NEAR(teacher_lr(tc, 1000), 1e-4, 1e-15);
  for (long long it = 100; it < 1000; ++it) EXPECT_LE(teacher_lr(tc, it + 1), teacher_lr(tc, it));
}

TEST(Teacher, TrainingIsDeterministicAndFinite) {
  const auto corpus = tiny_corpus(0, 8);
  const auto sched = make_linear_schedule(1000);
  TeacherConfig tc;
  tc.iterations = 3;
  tc.batch = 2;
  tc.warmup = 1;
  auto a = init_teacher(fctest::tiny_config(), tc), b = init_teacher(fctest::tiny_config(), tc);
  std::vector<TeacherMetrics> ma, mb;
  train_teacher(corpus, a, sched, tc, [&](const TeacherMetrics& m) { ma.push_back(m); });
  train_teacher(corpus, b, sched, tc, [&](const TeacherMetrics& m) { mb.push_back(m); });
  ASSERT_EQ(ma.size(), 3u);
  EXPECT_EQ(ma.back().iteration, 2);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(ma[i].loss, mb[i].loss);
    EXPECT_TRUE(std::isfinite(ma[i].loss));
    EXPECT_GE(ma[i].mask, -1.0);
    EXPECT_LE(ma[i].mask, 1.0);
  }
  EXPECT_TRUE(same_params(a.model->params(), b.model->params()));
  EXPECT_EQ(a.iteration, 3);
}

TEST(Teacher, ResumeFromStateCheckpointIsBitExact) {
  const auto corpus = tiny_corpus(0, 8);
  const auto sched = make_linear_schedule(1000);
  TeacherConfig tc;
  tc.iterations = 4;
  tc.batch = 2;
  tc.warmup = 1;
  auto full = init_teacher(fctest::tiny_config(), tc);
  train_teacher(corpus, full, sched, tc, {});
  auto part = init_teacher(fctest::tiny_config(), tc);
  train_teacher(corpus, part, sched, tc, {}, 2);
  EXPECT_EQ(part.iteration, 2);
  auto resumed = teacher_state_from_checkpoint(teacher_state_checkpoint(part, tc));
  train_teacher(corpus, resumed, sched, tc, {});
  EXPECT_TRUE(same_params(full.model->params(), resumed.model->params()));
}

namespace {

struct DistillSetup {
  std::vector<Scene> corpus = tiny_corpus(100, 16);
  NoiseSchedule sched = make_linear_schedule(1000);
  DistillConfig dc;
  std::unique_ptr<Denoiser<float>> teacher = std::make_unique<Denoiser<float>>(fctest::tiny_config(), 42);
  DistillSetup() {
    dc.batch = 2;
    dc.iterations = 3;
    dc.seed = 8;
    dc.perceptual = "randfeat";
  }
};

}  // namespace

TEST(Distill, StepIsDeterministic) {
  DistillSetup s;
  auto a = init_distill(*s.teacher, s.dc), b = init_distill(*s.teacher, s.dc);
  run_distillation(s.corpus, a, s.sched, s.dc, {});
  run_distillation(s.corpus, b, s.sched, s.dc, {});
  EXPECT_TRUE(same_params(a.student->params(), b.student->params()));
  EXPECT_TRUE(same_params(a.disc->params(), b.disc->params()));
  ASSERT_EQ(a.history.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.history[i].g_total, b.history[i].g_total);
    EXPECT_EQ(a.history[i].d_loss, b.history[i].d_loss);
    EXPECT_TRUE(a.history[i].lpips_enabled);
  }
}

TEST(Distill, StateCheckpointRoundTripsAndResumesBitExactly) {
  DistillSetup s;
  s.dc.iterations = 4;
  auto full = init_distill(*s.teacher, s.dc);
  run_distillation(s.corpus, full, s.sched, s.dc, {});
  auto part = init_distill(*s.teacher, s.dc);
  run_distillation(s.corpus, part, s.sched, s.dc, {}, 2);

  const auto dir = std::filesystem::temp_directory_path() / "flashclear_unit";
  std::filesystem::create_directories(dir);
  write_checkpoint(distill_state_checkpoint(part, s.dc), dir / "distill.state");
  auto resumed = distill_state_from_checkpoint(read_checkpoint(dir / "distill.state"));
  EXPECT_EQ(resumed.iteration, 2);
  EXPECT_TRUE(same_params(resumed.student->params(), part.student->params()));
  ASSERT_EQ(resumed.history.size(), 2u);
  EXPECT_EQ(resumed.history[1].g_mask, part.history[1].g_mask);
  run_distillation(s.corpus, resumed, s.sched, s.dc, {});
  EXPECT_TRUE(same_params(full.student->params(), resumed.student->params()));
  EXPECT_TRUE(same_params(full.disc->params(), resumed.disc->params()));
  EXPECT_EQ(full.history.back().g_total, resumed.history.back().g_total);
}

TEST(Distill, ZeroAuxiliaryWeightsReduceToX0Regression) {
  DistillSetup s;
  s.dc.weights = LossWeights{1.0, 0.0, 0.0, 0.0};
  s.dc.perceptual = "none";
  auto st = init_distill(*s.teacher, s.dc);
  const auto plan = make_timestep_plan(4, 1000);
  for (int it = 0; it < 3; ++it) {
    const auto m = distill_step(select_batch(s.corpus, 2, 1, "b", it), st, s.sched, plan, s.dc, nullptr);
    EXPECT_EQ(m.g_total, m.g_diff);
    EXPECT_FALSE(m.lpips_enabled);
    EXPECT_EQ(m.g_lpips, 0.0);
  }
}

TEST(Distill, AsymmetricMasksReachEachNetwork) {
  DistillSetup s;
  s.dc.iterations = 4;
  auto st = init_distill(*s.teacher, s.dc);
  StepAudit audit;
  run_distillation(s.corpus, st, s.sched, s.dc, {}, -1, &audit);
  ASSERT_EQ(audit.entries.size(), 4u);
  bool effects_seen = false;
  for (const auto& e : audit.entries) {
    EXPECT_EQ(e.generator_mask.data, e.m_obj.data);
    ASSERT_EQ(e.disc_masks.size(), 3u);
    for (const auto& d : e.disc_masks) EXPECT_EQ(d.data, e.m_eff.data);
    effects_seen |= e.m_obj.data != e.m_eff.data;
  }
  EXPECT_TRUE(effects_seen);

  // Control: with the ablation switch the discriminator sees the object mask.
  s.dc.disc_mask = DiscMaskSource::kObject;
  auto st2 = init_distill(*s.teacher, s.dc);
  StepAudit audit2;
  run_distillation(s.corpus, st2, s.sched, s.dc, {}, -1, &audit2);
  for (const auto& e : audit2.entries)
    for (const auto& d : e.disc_masks) EXPECT_EQ(d.data, e.m_obj.data);
}

TEST(Distill, RegressionLossDecreasesOverTraining) {
  const auto corpus = tiny_corpus(1000, 64);
  const auto sched = make_linear_schedule(1000);
  DistillConfig dc;
  dc.batch = 4;
  dc.iterations = 200;
  dc.lr = 1e-3;
  dc.weights = LossWeights{1.0, 0.0, 0.0, 0.01};
  dc.perceptual = "none";
  Denoiser<float> teacher(fctest::tiny_config(), 5);
  auto st = init_distill(teacher, dc);
  std::vector<double> diff;
  run_distillation(corpus, st, sched, dc, [&](const DistillMetrics& m) { diff.push_back(m.g_diff); });
  ASSERT_EQ(diff.size(), 200u);
  const double head = std::accumulate(diff.begin(), diff.begin() + 40, 0.0) / 40;
  const double tail = std::accumulate(diff.end() - 40, diff.end(), 0.0) / 40;
  EXPECT_LT(tail, 0.5 * head) << "head " << head << " tail " << tail;
}

TEST(Distill, RejectsBadConfiguration) {
  DistillSetup s;
  s.dc.perceptual = "vgg";
  auto st = init_distill(*s.teacher, s.dc);
  EXPECT_THROW(run_distillation(s.corpus, st, s.sched, s.dc, {}), ConfigError);
  s.dc.weights.mask = -0.1;
  EXPECT_THROW(init_distill(*s.teacher, s.dc), ConfigError);
}
