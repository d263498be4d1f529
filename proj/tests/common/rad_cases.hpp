#pragma once

// Float64 gradient-check cases for the distillation losses, shared by the
// unit tests and the acceptance runner. Each case builds a tiny student and
// discriminator from a seed, perturbs their weights, and compares analytic
// parameter gradients with central differences.

#include <memory>

#include "flashclear/metrics.hpp"
#include "flashclear/rad.hpp"
#include "flashclear/scheduler.hpp"
#include "test_support.hpp"

namespace fctest {

struct RadFixture {
  UNetConfig cfg;
  NoiseSchedule sched = make_linear_schedule(1000);
  std::vector<Scene> scenes;
  SceneBatch<double> batch;
  std::vector<int> ts;
  Tensor<double> z_t;
  std::unique_ptr<Denoiser<double>> student;
  std::unique_ptr<Discriminator<double>> disc;
};

inline void jitter(nn::ParamStore<double>& store, Rng& rng, double scale) {
  for (auto* p : store.all())
    for (auto& v : p->value.data) v += rng.normal() * scale;
}

// Initial step of the extrapolated finite differences used by every case.
inline constexpr double kRadStep = 2e-2;

// Attention key biases shift every score of a query row by the same amount,
// so softmax cancels them and their exact gradient is zero.
inline bool resolvable_param(const std::string& name) {
  const auto ends_with = [&](const std::string& suffix) {
    return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
  };
  return !ends_with(".k.b") && !ends_with(".xk.b");
}

inline RadFixture make_rad_fixture(std::uint64_t seed, int batch = 2) {
  RadFixture f;
  f.cfg = tiny_config();
  Rng rng(seed);
  const CorpusConfig cc = tiny_corpus_config();
  for (int i = 0; i < batch; ++i) f.scenes.push_back(generate_scene(seed * 131 + static_cast<std::uint64_t>(i), cc));
  std::vector<const Scene*> ptrs;
  for (const auto& s : f.scenes) ptrs.push_back(&s);
  f.batch = make_batch<double>(ptrs, f.cfg);
  const TimestepPlan plan = make_timestep_plan(4, f.sched.total_steps());
  for (int i = 0; i < batch; ++i) f.ts.push_back(plan.taus[static_cast<std::size_t>(rng.uniform_int(0, 3))]);
  f.z_t = diffuse_batch(f.batch.z_gt, f.ts, random_tensor<double>(f.batch.z_gt.shape, rng), f.sched);
  f.student = std::make_unique<Denoiser<double>>(f.cfg, seed);
  jitter(f.student->params(), rng, 0.02);
  f.disc = std::make_unique<Discriminator<double>>(f.cfg, seed + 1);
  f.disc->init_from(*f.student);
  jitter(f.disc->params(), rng, 0.02);
  return f;
}

// Student forward used by the generator-side cases.
struct StudentPass {
  nn::Var<double> z_pred;
  DenoiseOutput<double> out;
};

inline StudentPass student_pass(const RadFixture& f, nn::Tape<double>& t) {
  const auto cond = f.student->embed(t, f.batch.patches);
  const auto in = assemble_input(f.z_t, f.batch.m_obj, f.batch.z_ref);
  StudentPass p{{}, f.student->denoise(t, in, f.ts, cond)};
  p.z_pred = predict_x0_var(f.z_t, p.out.eps, f.ts, f.sched);
  return p;
}

// Discriminator parameters, real background against a fixed fake.
inline GradCheck check_disc_loss_case(std::uint64_t seed, int samples) {
  RadFixture f = make_rad_fixture(seed);
  Rng rng(seed ^ 0x5eedULL);
  const Tensor<double> fake = random_tensor<double>(f.batch.z_gt.shape, rng, 0.5);
  return check_param_gradients(
      f.disc->params(),
      [&](nn::Tape<double>& t) {
        const auto real = f.disc->score(t.constant(f.batch.z_gt), f.batch.z_ref, f.batch.m_eff, f.ts, f.batch.patches);
        const auto fk = f.disc->score(t.constant(fake), f.batch.z_ref, f.batch.m_eff, f.ts, f.batch.patches);
        return disc_loss(real, fk);
      },
      rng, samples, 1e-3, kRadStep, resolvable_param, 1e-8, true);
}

enum class GenTerm { kDiff, kLpips, kGan, kAll };

inline const char* gen_term_name(GenTerm t) {
  switch (t) {
    case GenTerm::kDiff: return "diff";
    case GenTerm::kLpips: return "lpips";
    case GenTerm::kGan: return "gan";
    case GenTerm::kAll: return "all";
  }
  return "?";
}

// Student parameters through the one-call x0 prediction, scored by the
// discriminator under the object-effect mask.
inline GradCheck check_gen_loss_case(std::uint64_t seed, GenTerm term, int samples) {
  RadFixture f = make_rad_fixture(seed);
  Rng rng(seed ^ 0x9e3779b9ULL);
  LossWeights w{0, 0, 0, 0};
  switch (term) {
    case GenTerm::kDiff: w.diff = 1.0; break;
    case GenTerm::kLpips: w.lpips = 5.0; break;
    case GenTerm::kGan: w.gan = 0.5; break;
    case GenTerm::kAll:
      w.diff = rng.uniform(0.5, 2.0);
      w.lpips = rng.uniform(0.5, 5.0);
      w.gan = rng.uniform(0.1, 1.0);
      break;
  }
  const RandFeatPerceptual<double> lpips(seed, 8);
  return check_param_gradients(
      f.student->params(),
      [&](nn::Tape<double>& t) {
        const StudentPass p = student_pass(f, t);
        const auto fake = f.disc->score(p.z_pred, f.batch.z_ref, f.batch.m_eff, f.ts, f.batch.patches);
        return gen_loss(p.z_pred, t.constant(f.batch.z_gt), fake, &lpips, w).total;
      },
      rng, samples, 1e-3, kRadStep, resolvable_param, 1e-8, true);
}

// Student parameters through the map layer's visual-token column.
inline GradCheck check_mask_loss_case(std::uint64_t seed, int samples) {
  RadFixture f = make_rad_fixture(seed);
  Rng rng(seed ^ 0xabcdefULL);
  return check_param_gradients(
      f.student->params(),
      [&](nn::Tape<double>& t) {
        const StudentPass p = student_pass(f, t);
        const auto a = nn::head_mean_column(p.out.cross_probs.at(f.cfg.map_layer), kVisualToken);
        return mask_loss(a, f.batch.fg_tokens);
      },
      rng, samples, 1e-3, kRadStep, [](const std::string& n) {
        return (n.rfind("unet.", 0) == 0 || n.rfind("cond.", 0) == 0) && resolvable_param(n);
      },
      1e-8, true);
}

}  // namespace fctest
