#include "flashclear/fpac.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

#include "flashclear/errors.hpp"
#include "flashclear/rng.hpp"

namespace flashclear {

using nn::Var;

// ---------------------------------------------------------------------------
// Token masks

void TokenMaskPolicy::validate() const {
  if (!(quantile >= 0.0 && quantile <= 1.0)) throw ConfigError("token-mask quantile must lie in [0,1]");
  if (dilation < 0) throw ConfigError("token-mask dilation must be non-negative");
}

TokenMask TokenMask::full(int grid) {
  return from_bits(grid, std::vector<std::uint8_t>(static_cast<std::size_t>(grid) * grid, 1));
}

TokenMask TokenMask::from_bits(int grid, std::vector<std::uint8_t> bits) {
  if (bits.size() != static_cast<std::size_t>(grid) * grid) throw ShapeError("token mask size does not match its grid");
  TokenMask m;
  m.grid = grid;
  m.bits = std::move(bits);
  for (auto& b : m.bits) {
    b = b ? 1 : 0;
    m.n_foreground += b;
  }
  return m;
}

std::vector<int> TokenMask::foreground_indices() const {
  std::vector<int> idx;
  for (int i = 0; i < size(); ++i)
    if (bits[i]) idx.push_back(i);
  return idx;
}

TokenMask derive_token_mask(const std::vector<double>& a, const std::vector<std::uint8_t>& user, int grid,
                            const TokenMaskPolicy& policy) {
  policy.validate();
  const int n = static_cast<int>(a.size());
  if (n == 0) throw ShapeError("derive_token_mask: empty attention column");
  if (grid * grid != n) throw ShapeError("derive_token_mask: column length does not match the token grid");
  if (user.size() != a.size()) throw ShapeError("derive_token_mask: user mask size does not match the column");
  if (policy.all_foreground) return TokenMask::full(grid);

  std::vector<std::uint8_t> bits(static_cast<std::size_t>(n), 0);
  const int k = std::max(0, static_cast<int>(std::ceil((1.0 - policy.quantile) * n - 1e-9)));
  std::vector<int> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int x, int y) { return a[x] > a[y]; });
  for (int i = 0; i < std::min(k, n); ++i)
    if (a[order[i]] > 0.0) bits[order[i]] = 1;

  const int r = policy.dilation;
  for (int y = 0; y < grid; ++y)
    for (int x = 0; x < grid; ++x) {
      if (!user[static_cast<std::size_t>(y) * grid + x]) continue;
      for (int yy = std::max(0, y - r); yy <= std::min(grid - 1, y + r); ++yy)
        for (int xx = std::max(0, x - r); xx <= std::min(grid - 1, x + r); ++xx)
          bits[static_cast<std::size_t>(yy) * grid + xx] = 1;
    }
  return TokenMask::from_bits(grid, std::move(bits));
}

TokenMask pool_token_mask(const TokenMask& fine, int coarse) {
  if (coarse < 1 || fine.grid % coarse != 0) throw ShapeError("pool_token_mask: grids are not nested");
  const int f = fine.grid / coarse;
  std::vector<std::uint8_t> bits(static_cast<std::size_t>(coarse) * coarse, 0);
  for (int y = 0; y < fine.grid; ++y)
    for (int x = 0; x < fine.grid; ++x)
      if (fine.bits[static_cast<std::size_t>(y) * fine.grid + x]) bits[static_cast<std::size_t>(y / f) * coarse + x / f] = 1;
  return TokenMask::from_bits(coarse, std::move(bits));
}

// ---------------------------------------------------------------------------
// Asymmetric attention

namespace {

// Rows `idx` of a [N,d] or [1,N,d] tensor as [1,F,d].
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& idx) {
  const int d = x.dim(-1);
  Tensor<T> out({1, static_cast<int>(idx.size()), d});
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::memcpy(out.ptr() + i * d, x.ptr() + static_cast<std::size_t>(idx[i]) * d, sizeof(T) * d);
  return out;
}

template <typename T>
Tensor<T> background_base(const TokenMask& mask, const Tensor<T>* cache, int n, int d) {
  if (mask.n_foreground == n) return Tensor<T>({n, d});
  if (!cache) throw CacheError("background tokens present but no cache rows were supplied");
  if (cache->numel() != static_cast<std::size_t>(n) * d)
    throw CacheError("cache rows " + shape_str(cache->shape) + " do not match " + std::to_string(n) + "x" +
                     std::to_string(d));
  return Tensor<T>({n, d}, cache->data);
}

template <typename T>
void scatter_rows(Tensor<T>& dst, const Tensor<T>& rows, const std::vector<int>& idx) {
  const int d = dst.dim(-1);
  for (std::size_t i = 0; i < idx.size(); ++i)
    std::memcpy(dst.ptr() + static_cast<std::size_t>(idx[i]) * d, rows.ptr() + i * d, sizeof(T) * d);
}

template <typename T>
Var<T> run_linear(const Linear<T>& l, Var<T> x) {
  return nn::linear(x, x.tape->constant(l.w->value), x.tape->constant(l.b->value));
}

template <typename T>
Var<T> run_ln(const Norm<T>& n, Var<T> x) {
  return nn::layer_norm(x, x.tape->constant(n.g->value), x.tape->constant(n.b->value));
}

}  // namespace

template <typename T>
Tensor<T> asymmetric_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const TokenMask& mask,
                               const Tensor<T>* cache_rows, int heads) {
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2) throw ShapeError("asymmetric_attention: expected [N,d] inputs");
  const int n = q.dim(0), d = q.dim(1);
  if (k.dim(0) != n || v.dim(0) != n || k.dim(1) != d || v.dim(1) != d)
    throw ShapeError("asymmetric_attention: q/k/v shapes differ");
  if (mask.size() != n) throw ShapeError("asymmetric_attention: mask length does not match token count");
  Tensor<T> out = background_base(mask, cache_rows, n, d);
  const std::vector<int> fg = mask.foreground_indices();
  if (fg.empty()) return out;
  // Scores, softmax and the value mix accumulate in double; single precision
  // inputs are rounded once on the way out.
  nn::Tape<double> tape(false);
  const Var<double> qf = tape.constant(gather_rows(q, fg).template cast<double>());
  const Var<double> kk = tape.constant(k.reshaped({1, n, d}).template cast<double>());
  const Var<double> vv = tape.constant(v.reshaped({1, n, d}).template cast<double>());
  const Var<double> o = nn::attention_apply(nn::attention_probs(qf, kk, heads), vv, heads);
  scatter_rows(out, o.value().template cast<T>(), fg);
  return out;
}

template <typename T>
Tensor<T> asymmetric_block_forward(const TransformerBlock<T>& blk, const Tensor<T>& h_in, const Tensor<T>& cond,
                                   const TokenMask& mask, const Tensor<T>* cache_rows, Tensor<T>* cross_map) {
  const int d = h_in.dim(-1);
  const int n = static_cast<int>(h_in.numel() / d);
  if (h_in.numel() != static_cast<std::size_t>(n) * d || (h_in.rank() == 3 && h_in.dim(0) != 1))
    throw ShapeError("asymmetric_block_forward: expects a single sample");
  if (mask.size() != n) throw ShapeError("asymmetric_block_forward: mask length does not match token count");
  Tensor<T> out = background_base(mask, cache_rows, n, d);
  const std::vector<int> fg = mask.foreground_indices();
  const int kc = cond.dim(-2);
  if (cross_map) *cross_map = Tensor<T>({static_cast<int>(fg.size()), kc});
  if (fg.empty()) {
    out.shape = {1, n, d};
    return out;
  }

  nn::Tape<T> tape(false);
  const Var<T> h = tape.constant(h_in.reshaped({1, n, d}));
  const Var<T> c = tape.constant(cond.rank() == 3 ? cond : cond.reshaped({1, cond.dim(0), cond.dim(1)}));
  // Keys and values see every token; queries only the foreground rows.
  const Var<T> a = run_ln(blk.ln1, h);
  const Var<T> keys = run_linear(blk.k, a);
  const Var<T> vals = run_linear(blk.v, a);
  const Var<T> a_fg = tape.constant(gather_rows(a.value(), fg));
  const Var<T> h_fg = tape.constant(gather_rows(h_in, fg));
  const Var<T> p = nn::attention_probs(run_linear(blk.q, a_fg), keys, blk.heads);
  const Var<T> h1 = nn::add(h_fg, run_linear(blk.o, nn::attention_apply(p, vals, blk.heads)));

  const Var<T> cn = run_ln(blk.ln2, h1);
  const Var<T> px = nn::attention_probs(run_linear(blk.xq, cn), run_linear(blk.xk, c), blk.heads);
  const Var<T> h2 = nn::add(h1, run_linear(blk.xo, nn::attention_apply(px, run_linear(blk.xv, c), blk.heads)));
  const Var<T> h3 = nn::add(h2, run_linear(blk.ff2, nn::gelu(run_linear(blk.ff1, run_ln(blk.ln3, h2)))));

  scatter_rows(out, h3.value(), fg);
  if (cross_map) {
    const Tensor<T>& pv = px.value();  // [1,heads,F,K]
    const int nf = static_cast<int>(fg.size());
    for (int hh = 0; hh < blk.heads; ++hh)
      for (int i = 0; i < nf; ++i)
        for (int j = 0; j < kc; ++j)
          (*cross_map)[static_cast<std::size_t>(i) * kc + j] +=
              pv[(static_cast<std::size_t>(hh) * nf + i) * kc + j];
    const T inv = T(1) / static_cast<T>(blk.heads);
    for (auto& x : cross_map->data) x *= inv;
  }
  out.shape = {1, n, d};
  return out;
}

// ---------------------------------------------------------------------------
// Cache

template <typename T>
void LayerCache<T>::store(const std::string& layer, Tensor<T> rows, int step) {
  entries_[layer] = Entry{std::move(rows), step, true};
}

template <typename T>
void LayerCache<T>::invalidate(const std::string& layer) {
  auto it = entries_.find(layer);
  if (it != entries_.end()) it->second.valid = false;
}

template <typename T>
bool LayerCache<T>::has(const std::string& layer) const {
  auto it = entries_.find(layer);
  return it != entries_.end() && it->second.valid;
}

template <typename T>
const Tensor<T>& LayerCache<T>::consume(const std::string& layer, int step) const {
  auto it = entries_.find(layer);
  if (it == entries_.end() || !it->second.valid)
    throw CacheError("no valid cache entry for layer '" + layer + "'");
  if (step <= it->second.step)
    throw CacheError("cache entry for '" + layer + "' produced at step " + std::to_string(it->second.step) +
                     " consumed at step " + std::to_string(step));
  return it->second.rows;
}

// ---------------------------------------------------------------------------
// Fusion

FusionWeights derive_fusion_weights(const std::vector<double>& a, int grid, int height, int width) {
  if (a.size() != static_cast<std::size_t>(grid) * grid) throw ShapeError("fusion: map does not match its grid");
  if (height % grid != 0 || width % grid != 0) throw ShapeError("fusion: grid does not divide the image");
  double mx = 0.0;
  for (double v : a) mx = std::max(mx, v);
  FusionWeights w;
  w.height = height;
  w.width = width;
  w.alpha.assign(static_cast<std::size_t>(height) * width, 0.0);
  if (!(mx > 0.0)) return w;
  const int fy = height / grid, fx = width / grid;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      w.alpha[static_cast<std::size_t>(y) * width + x] =
          std::clamp(a[static_cast<std::size_t>(y / fy) * grid + x / fx] / mx, 0.0, 1.0);
  return w;
}

std::vector<float> fuse_final(const std::vector<float>& pred, const std::vector<float>& orig, const FusionWeights& w) {
  if (pred.size() != orig.size()) throw ShapeError("fuse_final: image sizes differ");
  if (pred.size() != w.alpha.size() * 3) throw ShapeError("fuse_final: weights do not match the image");
  std::vector<float> out(pred.size());
  for (std::size_t p = 0; p < w.alpha.size(); ++p) {
    const double al = w.alpha[p];
    if (!(al >= 0.0 && al <= 1.0)) throw ShapeError("fuse_final: weight outside [0,1]");
    for (std::size_t c = 0; c < 3; ++c) {
      const std::size_t i = p * 3 + c;
      out[i] = static_cast<float>(al * pred[i] + (1.0 - al) * orig[i]);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cached inference

void CacheConfig::validate(int n_steps) const {
  policy.validate();
  for (const auto& id : layers)
    if (!is_attention_layer(id)) throw ConfigError("cache layer '" + id + "' is not a cacheable attention layer");
  for (std::size_t i = 0; i < layers.size(); ++i)
    for (std::size_t j = i + 1; j < layers.size(); ++j)
      if (layers[i] == layers[j]) throw ConfigError("cache layer '" + layers[i] + "' listed twice");
  if (layers.empty()) return;
  if (n_steps < 2) throw ConfigError("caching needs a plan of at least two steps");
  const int s = resolved_step(n_steps);
  if (s < 1 || s >= n_steps) throw ConfigError("cached step must lie in the plan after its first step");
}

long long CacheAudit::total_mismatches() const {
  long long t = 0;
  for (const auto& kv : mismatches) t += kv.second;
  return t;
}

long long CacheAudit::total_checked() const {
  long long t = 0;
  for (const auto& kv : rows_checked) t += kv.second;
  return t;
}

Tensor<double> initial_noise(const UNetConfig& cfg, std::uint64_t noise_seed, std::uint64_t scene_seed) {
  Rng rng(split_seed(noise_seed, "infer.noise", scene_seed));
  Tensor<double> z({1, cfg.latent_channels, cfg.latent_size, cfg.latent_size});
  for (auto& v : z.data) v = rng.normal();
  return z;
}

namespace {

class FpacHook final : public BlockInterceptor<double> {
 public:
  FpacHook(const CacheConfig& cc, CacheAudit& audit) : cc_(cc), audit_(audit) {}

  enum class Mode { kPlain, kRecord, kCached };
  void begin_step(int step, Mode mode) {
    step_ = step;
    mode_ = mode;
  }
  void set_masks(const std::map<std::string, TokenMask>* masks) { masks_ = masks; }
  void set_previous_maps(const std::map<std::string, Tensor<double>>* prev) { prev_ = prev; }

  void on_block_output(const std::string& id, const Tensor<double>& out) override {
    if (mode_ != Mode::kRecord || !selected(id)) return;
    cache_.store(id, out.reshaped({out.dim(1), out.dim(2)}), step_);
  }

  bool replace_block(const TransformerBlock<double>& block, const Tensor<double>& h_in, const Tensor<double>& cond,
                     Tensor<double>& out, Tensor<double>& cross_map) override {
    if (mode_ != Mode::kCached || !selected(block.id)) return false;
    const TokenMask& mask = masks_->at(block.id);
    const Tensor<double>& rows = cache_.consume(block.id, step_);
    Tensor<double> fg_cross;
    out = asymmetric_block_forward(block, h_in, cond, mask, &rows, &fg_cross);

    // Background rows of the produced output against the cache, bit for bit.
    const int d = out.dim(-1);
    long long bad = 0, checked = 0;
    for (int i = 0; i < mask.size(); ++i) {
      if (mask.bits[i]) continue;
      ++checked;
      if (std::memcmp(out.ptr() + static_cast<std::size_t>(i) * d, rows.ptr() + static_cast<std::size_t>(i) * d,
                      sizeof(double) * d) != 0)
        ++bad;
    }
    audit_.rows_checked[block.id] += checked;
    audit_.mismatches[block.id] += bad;

    // Foreground rows of the map are fresh; the rest comes from the previous step.
    cross_map = prev_->at(block.id);
    const int kc = cross_map.dim(2);
    const auto fg = mask.foreground_indices();
    for (std::size_t i = 0; i < fg.size(); ++i)
      for (int j = 0; j < kc; ++j)
        cross_map[static_cast<std::size_t>(fg[i]) * kc + j] = fg_cross[i * kc + j];
    return true;
  }

 private:
  bool selected(const std::string& id) const {
    return std::find(cc_.layers.begin(), cc_.layers.end(), id) != cc_.layers.end();
  }

  const CacheConfig& cc_;
  CacheAudit& audit_;
  LayerCache<double> cache_;
  int step_ = 0;
  Mode mode_ = Mode::kPlain;
  const std::map<std::string, TokenMask>* masks_ = nullptr;
  const std::map<std::string, Tensor<double>>* prev_ = nullptr;
};

std::vector<float> clamp_image(std::vector<float> img) {
  for (auto& v : img) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

}  // namespace

InferenceResult run_cached_inference(const Denoiser<double>& model, const Scene& scene, const TimestepPlan& plan,
                                     const CacheConfig& cc, const NoiseSchedule& sched, std::uint64_t noise_seed) {
  const UNetConfig& cfg = model.config();
  const int n = plan.n_steps();
  cc.validate(n);
  if (scene.height != cfg.latent_size || scene.width != cfg.latent_size)
    throw ShapeError("scene size does not match the model");
  const bool caching = !cc.layers.empty();
  const int cached = caching ? cc.resolved_step(n) : -1;
  const int s = cfg.latent_size;
  const int fine = cfg.grid_of(cfg.map_layer);

  LatentCodec codec(CodecMode::kIdentity, s);
  const Tensor<double> z_ref = codec.encode<double>(scene.image).reshaped({1, 3, s, s});
  Tensor<double> m_obj({1, 1, s, s});
  for (std::size_t p = 0; p < scene.m_obj.size(); ++p) m_obj[p] = scene.m_obj[p] ? 1.0 : 0.0;
  const Tensor<double> cond = embed_condition(model, scene).tokens.reshaped({1, cfg.cond_tokens, cfg.cond_dim});
  const std::vector<std::uint8_t> user_tokens = pool_mask_to_grid(scene.m_obj, s, s, fine);

  InferenceResult res;
  FpacHook hook(cc, res.audit);
  std::map<std::string, Tensor<double>> prev_maps;
  Tensor<double> z = initial_noise(cfg, noise_seed, scene.seed);
  res.trace.steps.resize(static_cast<std::size_t>(n));

  for (int i = 0; i < n; ++i) {
    const int tau = plan.taus[i];
    const int tau_prev = i + 1 < n ? plan.taus[i + 1] : kFinalStep;
    auto mode = FpacHook::Mode::kPlain;
    if (caching && i == cached - 1) mode = FpacHook::Mode::kRecord;
    if (caching && i == cached) {
      mode = FpacHook::Mode::kCached;
      const TokenMask fine_mask = derive_token_mask(res.history.back().map, user_tokens, fine, cc.policy);
      for (const auto& id : cc.layers) {
        const int g = cfg.grid_of(id);
        res.masks[id] = g == fine ? fine_mask : pool_token_mask(fine_mask, g);
        res.trace.steps[i][id] = res.masks[id].n_foreground;
      }
      hook.set_masks(&res.masks);
      hook.set_previous_maps(&prev_maps);
    }
    hook.begin_step(i, mode);

    nn::Tape<double> tape(false);
    const ModelInput<double> in = assemble_input(z, m_obj, z_ref);
    DenoiseOutput<double> out = model.denoise(tape, in, {tau}, tape.constant(cond), caching ? &hook : nullptr);
    StepRecord rec;
    rec.step = i;
    rec.tau = tau;
    rec.map = out.record.column(cfg.map_layer, 0);
    rec.refined = derive_token_mask(rec.map, user_tokens, fine, cc.policy);
    res.history.push_back(std::move(rec));
    z = ddim_step(z, clip_noise_estimate(z, out.eps.value(), tau, sched), tau, tau_prev, sched);
    prev_maps = std::move(out.record.cross);
  }

  res.prediction = clamp_image(codec.decode(z));
  if (cc.fusion) {
    res.fusion = derive_fusion_weights(res.history.back().map, fine, s, s);
    res.image = clamp_image(fuse_final(res.prediction, scene.image, *res.fusion));
  } else {
    res.image = res.prediction;
  }
  res.flops = count_run(cfg, n, res.trace);
  return res;
}

InferenceResult run_inference(const Denoiser<double>& model, const Scene& scene, const TimestepPlan& plan,
                              const NoiseSchedule& sched, std::uint64_t noise_seed) {
  CacheConfig cc;
  cc.layers.clear();
  cc.fusion = false;
  return run_cached_inference(model, scene, plan, cc, sched, noise_seed);
}

template Tensor<float> asymmetric_attention(const Tensor<float>&, const Tensor<float>&, const Tensor<float>&,
                                            const TokenMask&, const Tensor<float>*, int);
template Tensor<double> asymmetric_attention(const Tensor<double>&, const Tensor<double>&, const Tensor<double>&,
                                             const TokenMask&, const Tensor<double>*, int);
template Tensor<float> asymmetric_block_forward(const TransformerBlock<float>&, const Tensor<float>&,
                                                const Tensor<float>&, const TokenMask&, const Tensor<float>*,
                                                Tensor<float>*);
template Tensor<double> asymmetric_block_forward(const TransformerBlock<double>&, const Tensor<double>&,
                                                 const Tensor<double>&, const TokenMask&, const Tensor<double>*,
                                                 Tensor<double>*);
template class LayerCache<float>;
template class LayerCache<double>;

}  // namespace flashclear
