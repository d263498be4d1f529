#include "flashclear/rad.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>

#include "flashclear/errors.hpp"

namespace flashclear {

using nn::Var;

void LossWeights::validate() const {
  for (double w : {diff, lpips, gan, mask})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights must be finite and non-negative");
}

// ---------------------------------------------------------------------------
// Discriminator

template <typename T>
Discriminator<T>::Discriminator(const UNetConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg), rng_(std::make_unique<Rng>(split_seed(init_seed, "disc"))) {
  cfg_.validate();
  cond_ = std::make_unique<ConditionEncoder<T>>(cfg_, store_, *rng_, "cond.");
  encoder_ = std::make_unique<UNet<T>>(cfg_, store_, *rng_, "unet.", true);
  const double gain = 1.0 / std::sqrt(3.0);
  const int chans[3] = {cfg_.widths[1], cfg_.widths[2], cfg_.widths[2]};
  for (int k = 0; k < 3; ++k) {
    const std::string p = "head." + std::to_string(k) + ".";
    Head h;
    h.w1 = &store_.add(p + "conv1.w", nn::kaiming_uniform<T>({kHeadChannels, chans[k], 3, 3}, chans[k] * 9, *rng_, gain));
    h.b1 = &store_.add(p + "conv1.b", Tensor<T>({kHeadChannels}));
    h.w2 = &store_.add(p + "conv2.w", nn::kaiming_uniform<T>({1, kHeadChannels, 1, 1}, kHeadChannels, *rng_, gain));
    h.b2 = &store_.add(p + "conv2.b", Tensor<T>({1}));
    heads_.push_back(h);
  }
}

template <typename T>
template <typename U>
void Discriminator<T>::init_from(const Denoiser<U>& teacher) {
  if (!(teacher.config() == cfg_)) throw ConfigError("discriminator and teacher configurations differ");
  const std::size_t n = store_.copy_matching(teacher.params(), "", "");
  const std::size_t expected = store_.size() - 4 * heads_.size();
  if (n != expected)
    throw ShapeError("discriminator initialisation copied " + std::to_string(n) + " of " +
                     std::to_string(expected) + " encoder parameters");
}

template <typename T>
Var<T> Discriminator<T>::score(Var<T> z, const Tensor<T>& z_ref, const Tensor<T>& mask,
                               const std::vector<int>& timesteps, const Tensor<T>& patches,
                               Tensor<T>* seen_mask) const {
  nn::Tape<T>& tape = *z.tape;
  const Shape zs = z.shape();
  if (zs != z_ref.shape) throw ShapeError("discriminator: z and z_ref shapes differ");
  if (mask.rank() != 4 || mask.dim(0) != zs[0] || mask.dim(1) != 1 || mask.dim(2) != zs[2] || mask.dim(3) != zs[3])
    throw ShapeError("discriminator: mask shape " + shape_str(mask.shape) + " does not match " + shape_str(zs));
  for (T v : mask.data)
    if (v != T(0) && v != T(1)) throw ShapeError("discriminator: mask is not binary");
  const Var<T> input = nn::concat_channels<T>({z, tape.constant(mask), tape.constant(z_ref)});
  if (seen_mask) {
    // Channel C of the assembled input is the mask the encoder sees.
    ModelInput<T> view{input.value(), zs[1]};
    *seen_mask = view.mask();
  }
  const Var<T> cond = cond_->forward(tape.constant(patches));
  const EncoderFeatures<T> feats = encoder_->encode(input, timesteps, cond);
  Var<T> total;
  for (std::size_t k = 0; k < heads_.size(); ++k) {
    const Head& h = heads_[k];
    Var<T> x = nn::silu(nn::conv2d(feats.maps[k].second, tape.param(*h.w1), tape.param(*h.b1), 1, 1));
    x = nn::spatial_mean(nn::conv2d(x, tape.param(*h.w2), tape.param(*h.b2), 1, 0));
    total = k == 0 ? x : nn::add(total, x);
  }
  return nn::reshape(total, {zs[0]});
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Var<T> disc_loss(Var<T> real, Var<T> fake) {
  if (real.shape() != fake.shape()) throw ShapeError("disc_loss: real and fake batches differ");
  const Var<T> lr = nn::mean(nn::relu(nn::add_scalar(nn::scale(real, T(-1)), T(1))));
  const Var<T> lf = nn::mean(nn::relu(nn::add_scalar(fake, T(1))));
  return nn::add(lr, lf);
}

template <typename T>
GenLoss<T> gen_loss(Var<T> z_pred, Var<T> z_gt, Var<T> fake, const PerceptualLoss<T>* lpips, const LossWeights& w) {
  w.validate();
  if (z_pred.shape() != z_gt.shape()) throw ShapeError("gen_loss: prediction and target shapes differ");
  GenLoss<T> g;
  const Var<T> diff = nn::mse(z_pred, z_gt);
  const Var<T> gan = nn::scale(nn::mean(fake), T(-1));
  g.diff = diff.value()[0];
  g.gan = gan.value()[0];
  Var<T> total = nn::add(nn::scale(diff, static_cast<T>(w.diff)), nn::scale(gan, static_cast<T>(w.gan)));
  if (lpips) {
    const Var<T> p = (*lpips)(z_pred, z_gt);
    g.lpips = p.value()[0];
    g.lpips_enabled = true;
    total = nn::add(total, nn::scale(p, static_cast<T>(w.lpips)));
  }
  g.total = total;
  return g;
}

namespace {

// mean(a | m=0) - mean(a | m=1) for one row. Both means are taken relative to
// the row's first entry, which cancels in the difference but makes constant
// rows give exactly zero and binary rows exactly +-1.
template <typename T>
T mask_gap(const T* a, const T* m, int n, int fg) {
  const T ref = a[0];
  T sf = 0, sb = 0;
  for (int j = 0; j < n; ++j) (m[j] == T(1) ? sf : sb) += a[j] - ref;
  return sb / static_cast<T>(n - fg) - sf / static_cast<T>(fg);
}

}  // namespace

template <typename T>
Var<T> mask_loss(Var<T> a, const Tensor<T>& m) {
  if (a.shape() != m.shape || m.rank() != 2) throw ShapeError("mask_loss: map and mask shapes differ");
  const int b = m.dim(0), n = m.dim(1);
  Tensor<T> w(m.shape);
  T total = 0;
  for (int i = 0; i < b; ++i) {
    const std::size_t row = static_cast<std::size_t>(i) * n;
    int fg = 0;
    for (int j = 0; j < n; ++j) {
      const T v = m[row + j];
      if (v != T(0) && v != T(1)) throw ShapeError("mask_loss: token mask is not binary");
      fg += v == T(1);
    }
    if (fg == 0 || fg == n) throw ShapeError("mask_loss: token mask must contain foreground and background tokens");
    total += mask_gap(a.value().ptr() + row, m.ptr() + row, n, fg);
    const T wb = T(1) / static_cast<T>(n - fg) / static_cast<T>(b);
    const T wf = T(1) / static_cast<T>(fg) / static_cast<T>(b);
    for (int j = 0; j < n; ++j) w[row + j] = m[row + j] == T(1) ? -wf : wb;
  }
  // The reference offset is constant per row, so the gradient is just w.
  return a.tape->emit(Tensor<T>({1}, total / static_cast<T>(b)), {a}, [a, w](nn::Tape<T>& tp, int self) {
    const T g = tp.node(self).grad[0];
    auto& ga = tp.grad_of(a.id);
    for (std::size_t k = 0; k < w.numel(); ++k) ga[k] += g * w[k];
  });
}

double mask_loss_value(const std::vector<double>& a, const std::vector<std::uint8_t>& m) {
  if (a.size() != m.size() || a.empty()) throw ShapeError("mask_loss: map and mask sizes differ");
  std::vector<double> md(m.size());
  int nf = 0;
  for (std::size_t i = 0; i < m.size(); ++i) {
    md[i] = m[i] ? 1.0 : 0.0;
    nf += m[i] ? 1 : 0;
  }
  const int n = static_cast<int>(a.size());
  if (nf == 0 || nf == n) throw ShapeError("mask_loss: token mask must contain foreground and background tokens");
  return mask_gap(a.data(), md.data(), n, nf);
}

template <typename T>
Var<T> predict_x0_var(const Tensor<T>& z_t, Var<T> eps_hat, const std::vector<int>& ts, const NoiseSchedule& sched) {
  if (z_t.shape != eps_hat.shape()) throw ShapeError("predict_x0: shape mismatch");
  if (static_cast<int>(ts.size()) != z_t.dim(0)) throw ShapeError("predict_x0: one timestep per sample required");
  std::vector<T> ca, cb;
  for (int t : ts) {
    const double ab = sched.alpha_bar(t);
    if (ab <= 0.0) throw NumericFault("predict_x0: alpha_bar is zero");
    ca.push_back(static_cast<T>(1.0 / std::sqrt(ab)));
    cb.push_back(static_cast<T>(-std::sqrt(1.0 - ab) / std::sqrt(ab)));
  }
  return nn::affine_per_sample(eps_hat.tape->constant(z_t), ca, eps_hat, cb);
}

// ---------------------------------------------------------------------------
// Batches

template <typename T>
SceneBatch<T> make_batch(const std::vector<const Scene*>& scenes, const UNetConfig& cfg) {
  if (scenes.empty()) throw ShapeError("empty batch");
  const int b = static_cast<int>(scenes.size()), s = cfg.latent_size;
  const std::size_t hw = static_cast<std::size_t>(s) * s;
  const int grid = cfg.grid_of(cfg.map_layer);
  LatentCodec codec(CodecMode::kIdentity, s);
  SceneBatch<T> out;
  out.z_gt = Tensor<T>({b, 3, s, s});
  out.z_ref = Tensor<T>({b, 3, s, s});
  out.m_obj = Tensor<T>({b, 1, s, s});
  out.m_eff = Tensor<T>({b, 1, s, s});
  out.fg_tokens = Tensor<T>({b, grid * grid});
  for (int i = 0; i < b; ++i) {
    const Scene& sc = *scenes[i];
    if (sc.height != s || sc.width != s) throw ShapeError("scene size does not match the model");
    const Tensor<T> g = codec.encode<T>(sc.gt_background);
    const Tensor<T> r = codec.encode<T>(sc.image);
    std::copy(g.data.begin(), g.data.end(), out.z_gt.data.begin() + i * 3 * hw);
    std::copy(r.data.begin(), r.data.end(), out.z_ref.data.begin() + i * 3 * hw);
    for (std::size_t p = 0; p < hw; ++p) {
      out.m_obj[i * hw + p] = sc.m_obj[p] ? T(1) : T(0);
      out.m_eff[i * hw + p] = sc.m_obj_eff[p] ? T(1) : T(0);
    }
    const auto pooled = pool_mask_to_grid(sc.m_obj_eff, s, s, grid);
    for (std::size_t k = 0; k < pooled.size(); ++k) out.fg_tokens[i * pooled.size() + k] = pooled[k];
  }
  out.patches = patch_batch<T>(scenes, cfg.cond_patch);
  return out;
}

template <typename T>
Tensor<T> diffuse_batch(const Tensor<T>& z0, const std::vector<int>& ts, const Tensor<T>& eps,
                        const NoiseSchedule& sched) {
  require_same_shape(z0, eps, "diffuse_batch");
  const int b = z0.dim(0);
  if (static_cast<int>(ts.size()) != b) throw ShapeError("diffuse_batch: one timestep per sample required");
  const std::size_t per = z0.numel() / b;
  Tensor<T> out(z0.shape);
  for (int i = 0; i < b; ++i) {
    if (ts[i] < 0 || ts[i] >= sched.total_steps()) throw ShapeError("diffuse_batch: timestep out of range");
    const double ab = sched.alpha_bar(ts[i]);
    const T a = static_cast<T>(std::sqrt(ab)), s = static_cast<T>(std::sqrt(1.0 - ab));
    for (std::size_t k = i * per; k < (i + 1) * per; ++k) out[k] = a * z0[k] + s * eps[k];
  }
  return out;
}

std::vector<const Scene*> select_batch(const std::vector<Scene>& corpus, int batch, std::uint64_t seed,
                                       std::string_view label, long long it) {
  if (corpus.empty()) throw ShapeError("training corpus is empty");
  if (batch < 1) throw ConfigError("batch size must be positive");
  Rng rng(split_seed(seed, label, static_cast<std::uint64_t>(it)));
  std::vector<const Scene*> out;
  for (int i = 0; i < batch; ++i)
    out.push_back(&corpus[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(corpus.size()) - 1))]);
  return out;
}

namespace {

template <typename T>
Tensor<T> normal_like(const Shape& s, Rng& rng) {
  Tensor<T> t(s);
  for (auto& v : t.data) v = static_cast<T>(rng.normal());
  return t;
}

void require_finite(double v, const std::string& what) {
  if (!std::isfinite(v)) throw NumericFault(what + " is not finite");
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

// ---------------------------------------------------------------------------
// Teacher

TeacherState init_teacher(const UNetConfig& cfg, const TeacherConfig& tc) {
  TeacherState s;
  s.model = std::make_unique<Denoiser<float>>(cfg, split_seed(tc.seed, "teacher.init"));
  s.opt = AdamW(AdamWConfig{tc.lr, 0.9, 0.999, 1e-8, 0.01});
  return s;
}

double teacher_lr(const TeacherConfig& tc, long long it) {
  const double warm = tc.warmup > 0 ? std::min(1.0, static_cast<double>(it + 1) / tc.warmup) : 1.0;
  const double span = std::max<long long>(1, tc.iterations - tc.warmup);
  const double prog = std::clamp(static_cast<double>(it - tc.warmup) / span, 0.0, 1.0);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * prog));
  return tc.lr * warm * (tc.final_lr_fraction + (1.0 - tc.final_lr_fraction) * cosine);
}

TeacherMetrics teacher_step(const std::vector<Scene>& corpus, TeacherState& st, const NoiseSchedule& sched,
                            const TeacherConfig& tc) {
  const long long it = st.iteration;
  const auto scenes = select_batch(corpus, tc.batch, tc.seed, "teacher.batch", it);
  const UNetConfig& cfg = st.model->config();
  const SceneBatch<float> b = make_batch<float>(scenes, cfg);
  Rng rng(split_seed(tc.seed, "teacher.noise", static_cast<std::uint64_t>(it)));
  std::vector<int> ts;
  for (int i = 0; i < tc.batch; ++i) ts.push_back(rng.uniform_int(0, sched.total_steps() - 1));
  const Tensor<float> eps = normal_like<float>(b.z_gt.shape, rng);
  const Tensor<float> z_t = diffuse_batch(b.z_gt, ts, eps, sched);

  nn::Tape<float> tape(true);
  const Var<float> cond = st.model->embed(tape, b.patches);
  const DenoiseOutput<float> out = st.model->denoise(tape, assemble_input(z_t, b.m_obj, b.z_ref), ts, cond);
  const Var<float> l_eps = nn::mse(out.eps, tape.constant(eps));
  const Var<float> a = nn::head_mean_column(out.cross_probs.at(cfg.map_layer), kVisualToken);
  const Var<float> l_mask = mask_loss(a, b.fg_tokens);
  const Var<float> loss = nn::add(l_eps, nn::scale(l_mask, static_cast<float>(tc.mask_weight)));

  TeacherMetrics m;
  m.iteration = it;
  m.loss = loss.value()[0];
  m.eps_mse = l_eps.value()[0];
  m.mask = l_mask.value()[0];
  require_finite(m.loss, "teacher loss at iteration " + std::to_string(it));
  tape.backward(loss);
  m.grad_norm = clip_grad_norm(st.model->params(), tc.grad_clip);
  st.opt.set_lr(teacher_lr(tc, it));
  st.opt.step(st.model->params());
  ++st.iteration;
  return m;
}

void train_teacher(const std::vector<Scene>& corpus, TeacherState& st, const NoiseSchedule& sched,
                   const TeacherConfig& tc, const std::function<void(const TeacherMetrics&)>& on_step,
                   long long stop_at) {
  const long long end = stop_at >= 0 ? std::min(stop_at, tc.iterations) : tc.iterations;
  while (st.iteration < end) {
    const TeacherMetrics m = teacher_step(corpus, st, sched, tc);
    if (on_step) on_step(m);
  }
}

Checkpoint teacher_state_checkpoint(const TeacherState& s, const TeacherConfig& tc) {
  Checkpoint c;
  c.kind = "teacher-state";
  put_config(c, s.model->config());
  c.set("iteration", std::to_string(s.iteration));
  c.set("teacher.seed", std::to_string(tc.seed));
  c.set("teacher.lr", fmt(tc.lr));
  put_params(c, s.model->params(), "model.");
  put_optimizer(c, s.opt, "opt.");
  return c;
}

TeacherState teacher_state_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "teacher-state")
    throw FormatError(FormatError::Kind::kMalformed, "expected a teacher-state checkpoint, got '" + c.kind + "'");
  TeacherState s;
  s.model = denoiser_from_checkpoint(c);
  s.iteration = std::stoll(c.get("iteration"));
  get_optimizer(c, s.opt, "opt.");
  return s;
}

// ---------------------------------------------------------------------------
// Distillation

DistillState init_distill(const Denoiser<float>& teacher, const DistillConfig& dc) {
  dc.weights.validate();
  DistillState s;
  s.student = Denoiser<float>::from(teacher);
  s.disc = std::make_unique<Discriminator<float>>(teacher.config(), split_seed(dc.seed, "disc.init"));
  s.disc->init_from(teacher);
  s.g_opt = AdamW(AdamWConfig{dc.lr, 0.9, 0.999, 1e-8, 0.01});
  s.d_opt = AdamW(AdamWConfig{dc.disc_lr, 0.9, 0.999, 1e-8, 0.01});
  return s;
}

DistillMetrics distill_step(const std::vector<const Scene*>& scenes, DistillState& st, const NoiseSchedule& sched,
                            const TimestepPlan& plan, const DistillConfig& dc, const PerceptualLoss<float>* lpips,
                            StepAudit* audit) {
  const long long it = st.iteration;
  const UNetConfig& cfg = st.student->config();
  const SceneBatch<float> b = make_batch<float>(scenes, cfg);
  const int n = static_cast<int>(scenes.size());
  const Tensor<float>& disc_mask = dc.disc_mask == DiscMaskSource::kObjectEffect ? b.m_eff : b.m_obj;

  Rng rng(split_seed(dc.seed, "distill.noise", static_cast<std::uint64_t>(it)));
  std::vector<int> ts;
  for (int i = 0; i < n; ++i) ts.push_back(plan.taus[static_cast<std::size_t>(rng.uniform_int(0, plan.n_steps() - 1))]);
  const Tensor<float> eps = normal_like<float>(b.z_gt.shape, rng);
  const Tensor<float> z_t = diffuse_batch(b.z_gt, ts, eps, sched);

  StepAudit::Entry entry;
  entry.iteration = it;
  entry.m_obj = b.m_obj;
  entry.m_eff = b.m_eff;

  // (a) one-call student prediction conditioned on the object mask
  nn::Tape<float> gen_tape(true);
  const Var<float> cond = st.student->embed(gen_tape, b.patches);
  const ModelInput<float> gin = assemble_input(z_t, b.m_obj, b.z_ref);
  if (audit) entry.generator_mask = gin.mask();
  const DenoiseOutput<float> out = st.student->denoise(gen_tape, gin, ts, cond);
  const Var<float> z_pred = predict_x0_var(z_t, out.eps, ts, sched);

  // (b) discriminator update on real background and detached prediction
  DistillMetrics m;
  m.iteration = it;
  {
    nn::Tape<float> d_tape(true);
    Tensor<float> seen_real, seen_fake;
    const Var<float> real = st.disc->score(d_tape.constant(b.z_gt), b.z_ref, disc_mask, ts, b.patches,
                                           audit ? &seen_real : nullptr);
    const Var<float> fake = st.disc->score(d_tape.constant(z_pred.value()), b.z_ref, disc_mask, ts, b.patches,
                                           audit ? &seen_fake : nullptr);
    const Var<float> ld = disc_loss(real, fake);
    m.d_loss = ld.value()[0];
    double sr = 0, sf = 0;
    for (int i = 0; i < n; ++i) {
      sr += real.value()[i];
      sf += fake.value()[i];
    }
    m.d_real = sr / n;
    m.d_fake = sf / n;
    require_finite(m.d_loss, "discriminator loss at iteration " + std::to_string(it));
    st.disc->params().zero_grad();
    d_tape.backward(ld);
    st.d_opt.step(st.disc->params());
    if (audit) {
      entry.disc_masks.push_back(std::move(seen_real));
      entry.disc_masks.push_back(std::move(seen_fake));
    }
  }

  // (c) generator update against the refreshed discriminator
  Tensor<float> seen_gen;
  const Var<float> fake_g =
      st.disc->score(z_pred, b.z_ref, disc_mask, ts, b.patches, audit ? &seen_gen : nullptr);
  if (audit) entry.disc_masks.push_back(std::move(seen_gen));
  const GenLoss<float> gl = gen_loss(z_pred, gen_tape.constant(b.z_gt), fake_g, lpips, dc.weights);
  const Var<float> a = nn::head_mean_column(out.cross_probs.at(cfg.map_layer), kVisualToken);
  const Var<float> lm = mask_loss(a, b.fg_tokens);
  const Var<float> total = nn::add(gl.total, nn::scale(lm, static_cast<float>(dc.weights.mask)));
  m.g_diff = gl.diff;
  m.g_lpips = gl.lpips;
  m.g_gan = gl.gan;
  m.lpips_enabled = gl.lpips_enabled;
  m.g_mask = lm.value()[0];
  m.g_total = total.value()[0];
  require_finite(m.g_total, "generator loss at iteration " + std::to_string(it));
  st.student->params().zero_grad();
  gen_tape.backward(total);
  st.g_opt.step(st.student->params());
  // The generator pass also deposited gradients in the discriminator.
  st.disc->params().zero_grad();

  if (audit) audit->entries.push_back(std::move(entry));
  st.history.push_back(m);
  ++st.iteration;
  return m;
}

void run_distillation(const std::vector<Scene>& corpus, DistillState& st, const NoiseSchedule& sched,
                      const DistillConfig& dc, const std::function<void(const DistillMetrics&)>& on_step,
                      long long stop_at, StepAudit* audit) {
  const TimestepPlan plan = make_timestep_plan(dc.plan_steps, sched.total_steps());
  std::unique_ptr<PerceptualLoss<float>> lpips;
  if (dc.perceptual == "randfeat") lpips = std::make_unique<RandFeatPerceptual<float>>();
  else if (dc.perceptual != "none") throw ConfigError("unknown perceptual backend '" + dc.perceptual + "'");
  const long long end = stop_at >= 0 ? std::min(stop_at, dc.iterations) : dc.iterations;
  while (st.iteration < end) {
    const auto scenes = select_batch(corpus, dc.batch, dc.seed, "distill.batch", st.iteration);
    const DistillMetrics m = distill_step(scenes, st, sched, plan, dc, lpips.get(), audit);
    if (on_step) on_step(m);
  }
}

Checkpoint distill_state_checkpoint(const DistillState& s, const DistillConfig& dc) {
  Checkpoint c;
  c.kind = "distill-state";
  put_config(c, s.student->config());
  c.set("iteration", std::to_string(s.iteration));
  c.set("distill.seed", std::to_string(dc.seed));
  c.set("distill.plan_steps", std::to_string(dc.plan_steps));
  std::ostringstream hist;
  for (const auto& h : s.history)
    hist << h.iteration << ' ' << fmt(h.d_loss) << ' ' << fmt(h.d_real) << ' ' << fmt(h.d_fake) << ' '
         << fmt(h.g_total) << ' ' << fmt(h.g_diff) << ' ' << fmt(h.g_lpips) << ' ' << fmt(h.g_gan) << ' '
         << fmt(h.g_mask) << ' ' << (h.lpips_enabled ? 1 : 0) << '\n';
  c.set("history", hist.str());
  put_params(c, s.student->params(), "model.");
  put_params(c, s.disc->params(), "disc.");
  put_optimizer(c, s.g_opt, "gopt.");
  put_optimizer(c, s.d_opt, "dopt.");
  return c;
}

DistillState distill_state_from_checkpoint(const Checkpoint& c) {
  if (c.kind != "distill-state")
    throw FormatError(FormatError::Kind::kMalformed, "expected a distill-state checkpoint, got '" + c.kind + "'");
  DistillState s;
  s.student = denoiser_from_checkpoint(c);
  s.disc = std::make_unique<Discriminator<float>>(s.student->config(), 0);
  get_params(c, s.disc->params(), "disc.");
  get_optimizer(c, s.g_opt, "gopt.");
  get_optimizer(c, s.d_opt, "dopt.");
  s.iteration = std::stoll(c.get("iteration"));
  std::istringstream hist(c.get("history"));
  DistillMetrics h;
  int lp = 0;
  while (hist >> h.iteration >> h.d_loss >> h.d_real >> h.d_fake >> h.g_total >> h.g_diff >> h.g_lpips >> h.g_gan >>
         h.g_mask >> lp) {
    h.lpips_enabled = lp != 0;
    s.history.push_back(h);
  }
  return s;
}

// ---------------------------------------------------------------------------

#define FLASHCLEAR_RAD_INSTANTIATE(T)                                                                   \
  template class Discriminator<T>;                                                                      \
  template void Discriminator<T>::init_from(const Denoiser<float>&);                                    \
  template void Discriminator<T>::init_from(const Denoiser<double>&);                                   \
  template Var<T> disc_loss(Var<T>, Var<T>);                                                            \
  template GenLoss<T> gen_loss(Var<T>, Var<T>, Var<T>, const PerceptualLoss<T>*, const LossWeights&);  \
  template Var<T> mask_loss(Var<T>, const Tensor<T>&);                                                  \
  template Var<T> predict_x0_var(const Tensor<T>&, Var<T>, const std::vector<int>&, const NoiseSchedule&); \
  template SceneBatch<T> make_batch(const std::vector<const Scene*>&, const UNetConfig&);               \
  template Tensor<T> diffuse_batch(const Tensor<T>&, const std::vector<int>&, const Tensor<T>&, const NoiseSchedule&);

FLASHCLEAR_RAD_INSTANTIATE(float)
FLASHCLEAR_RAD_INSTANTIATE(double)

}  // namespace flashclear
