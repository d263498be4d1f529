#pragma once

// Region-aware adversarial distillation: latent discriminator, hinge losses,
// attention mask loss, the alternating distillation step and the toy teacher
// trainer that stands in for the pretrained base model.

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "flashclear/checkpoint.hpp"
#include "flashclear/metrics.hpp"
#include "flashclear/model.hpp"
#include "flashclear/optim.hpp"
#include "flashclear/scheduler.hpp"
#include "flashclear/synthgen.hpp"

namespace flashclear {

struct LossWeights {
  double diff = 1.0;
  double lpips = 5.0;
  double gan = 0.5;
  double mask = 0.01;

  void validate() const;
  friend bool operator==(const LossWeights&, const LossWeights&) = default;
};

// Encoder half of the denoiser plus its own condition encoder and three
// convolutional heads (16x16, 8x8 and mid features). Scores are the sum of
// the spatially averaged head outputs.
template <typename T>
class Discriminator {
 public:
  static constexpr int kHeadChannels = 32;

  Discriminator(const UNetConfig& cfg, std::uint64_t init_seed);
  Discriminator(const Discriminator&) = delete;
  Discriminator& operator=(const Discriminator&) = delete;

  // Copies encoder and condition encoder weights from a denoiser.
  template <typename U>
  void init_from(const Denoiser<U>& teacher);

  const UNetConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }

  // z: [B,C,h,w] on any tape; z_ref [B,C,h,w], mask [B,1,h,w] and object
  // patches are constants. Returns scores [B]. When `seen_mask` is given it
  // receives the mask channel of the assembled input.
  nn::Var<T> score(nn::Var<T> z, const Tensor<T>& z_ref, const Tensor<T>& mask, const std::vector<int>& timesteps,
                   const Tensor<T>& patches, Tensor<T>* seen_mask = nullptr) const;

 private:
  UNetConfig cfg_;
  nn::ParamStore<T> store_;
  std::unique_ptr<Rng> rng_;
  std::unique_ptr<ConditionEncoder<T>> cond_;
  std::unique_ptr<UNet<T>> encoder_;
  struct Head {
    nn::Parameter<T>*w1, *b1, *w2, *b2;
  };
  std::vector<Head> heads_;
};

// mean(relu(1 - real)) + mean(relu(1 + fake))
template <typename T>
nn::Var<T> disc_loss(nn::Var<T> real_scores, nn::Var<T> fake_scores);

template <typename T>
struct GenLoss {
  nn::Var<T> total;
  double diff = 0.0;
  double lpips = 0.0;
  double gan = 0.0;
  bool lpips_enabled = false;
};

// lambda_lpips * P(z_pred, z_gt) + lambda_diff * mean((z_pred - z_gt)^2)
// + lambda_gan * mean(-fake). With the identity codec decoding is the
// identity, so the perceptual term reads the latents directly. A null
// `lpips` disables that term and leaves lpips_enabled false.
template <typename T>
GenLoss<T> gen_loss(nn::Var<T> z_pred, nn::Var<T> z_gt, nn::Var<T> fake_scores, const PerceptualLoss<T>* lpips,
                    const LossWeights& w);

// a: visual-token column [B,N] (differentiable), m_fg: binary [B,N].
// Batch mean of mean(a | m=0) - mean(a | m=1).
template <typename T>
nn::Var<T> mask_loss(nn::Var<T> a, const Tensor<T>& m_fg);

// Scalar reference for a single map.
double mask_loss_value(const std::vector<double>& a, const std::vector<std::uint8_t>& m_fg);

// Differentiable x0 estimate from a noise prediction, one timestep per sample.
template <typename T>
nn::Var<T> predict_x0_var(const Tensor<T>& z_t, nn::Var<T> eps_hat, const std::vector<int>& timesteps,
                          const NoiseSchedule& sched);

// Stacked tensors for a batch of scenes.
template <typename T>
struct SceneBatch {
  Tensor<T> z_gt;     // background latents
  Tensor<T> z_ref;    // input image latents
  Tensor<T> m_obj;    // [B,1,h,w]
  Tensor<T> m_eff;    // [B,1,h,w]
  Tensor<T> patches;  // object patches for the condition encoder
  Tensor<T> fg_tokens;  // m_obj_eff pooled onto the map layer grid, [B,N]
};

template <typename T>
SceneBatch<T> make_batch(const std::vector<const Scene*>& scenes, const UNetConfig& cfg);

// Per-sample forward diffusion with individual timesteps.
template <typename T>
Tensor<T> diffuse_batch(const Tensor<T>& z0, const std::vector<int>& timesteps, const Tensor<T>& eps,
                        const NoiseSchedule& sched);

// ---------------------------------------------------------------------------
// Teacher

struct TeacherConfig {
  long long iterations = 2000;
  int batch = 8;
  double lr = 5e-4;
  long long warmup = 100;
  double final_lr_fraction = 0.1;
  double grad_clip = 1.0;
  double mask_weight = 0.1;
  std::uint64_t seed = 0;
};

struct TeacherMetrics {
  long long iteration = 0;
  double loss = 0.0;
  double eps_mse = 0.0;
  double mask = 0.0;
  double grad_norm = 0.0;
};

struct TeacherState {
  std::unique_ptr<Denoiser<float>> model;
  AdamW opt;
  long long iteration = 0;
};

TeacherState init_teacher(const UNetConfig& cfg, const TeacherConfig& tc);
double teacher_lr(const TeacherConfig& tc, long long iteration);
TeacherMetrics teacher_step(const std::vector<Scene>& corpus, TeacherState& state, const NoiseSchedule& sched,
                            const TeacherConfig& tc);
// Runs until state.iteration == tc.iterations (or `stop_at` if smaller and
// non-negative), reporting every step.
void train_teacher(const std::vector<Scene>& corpus, TeacherState& state, const NoiseSchedule& sched,
                   const TeacherConfig& tc, const std::function<void(const TeacherMetrics&)>& on_step,
                   long long stop_at = -1);

Checkpoint teacher_state_checkpoint(const TeacherState& s, const TeacherConfig& tc);
TeacherState teacher_state_from_checkpoint(const Checkpoint& c);

// ---------------------------------------------------------------------------
// Distillation

enum class DiscMaskSource { kObjectEffect, kObject };

struct DistillConfig {
  long long iterations = 400;
  int batch = 8;
  double lr = 1e-5;
  double disc_lr = 1e-5;
  int plan_steps = 4;
  LossWeights weights;
  // Mask given to every discriminator call (the generator itself always
  // sees the object mask).
  DiscMaskSource disc_mask = DiscMaskSource::kObjectEffect;
  std::string perceptual = "randfeat";
  std::uint64_t seed = 0;
};

struct DistillMetrics {
  long long iteration = 0;
  double d_loss = 0.0;
  double d_real = 0.0;
  double d_fake = 0.0;
  double g_total = 0.0;
  double g_diff = 0.0;
  double g_lpips = 0.0;
  double g_gan = 0.0;
  double g_mask = 0.0;
  bool lpips_enabled = false;
};

struct DistillState {
  std::unique_ptr<Denoiser<float>> student;
  std::unique_ptr<Discriminator<float>> disc;
  AdamW g_opt;
  AdamW d_opt;
  long long iteration = 0;
  std::vector<DistillMetrics> history;
};

// Records the mask channel actually fed to each network during a step,
// next to the masks of the scenes in the batch.
struct StepAudit {
  struct Entry {
    long long iteration = 0;
    Tensor<float> generator_mask;
    std::vector<Tensor<float>> disc_masks;  // real, fake (disc update), fake (generator update)
    Tensor<float> m_obj;
    Tensor<float> m_eff;
  };
  std::vector<Entry> entries;
};

DistillState init_distill(const Denoiser<float>& teacher, const DistillConfig& dc);

DistillMetrics distill_step(const std::vector<const Scene*>& batch, DistillState& state, const NoiseSchedule& sched,
                            const TimestepPlan& plan, const DistillConfig& dc, const PerceptualLoss<float>* lpips,
                            StepAudit* audit = nullptr);

// Batch selection for iteration `it` is a pure function of (seed, it).
std::vector<const Scene*> select_batch(const std::vector<Scene>& corpus, int batch, std::uint64_t seed,
                                       std::string_view label, long long it);

void run_distillation(const std::vector<Scene>& corpus, DistillState& state, const NoiseSchedule& sched,
                      const DistillConfig& dc, const std::function<void(const DistillMetrics&)>& on_step,
                      long long stop_at = -1, StepAudit* audit = nullptr);

Checkpoint distill_state_checkpoint(const DistillState& s, const DistillConfig& dc);
DistillState distill_state_from_checkpoint(const Checkpoint& c);

}  // namespace flashclear
