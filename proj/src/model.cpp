#include "flashclear/model.hpp"

#include <algorithm>
#include <cmath>

#include "flashclear/errors.hpp"

namespace flashclear {

using nn::Var;

// ---------------------------------------------------------------------------
// UNetConfig

const std::vector<std::string>& attention_layer_ids() {
  static const std::vector<std::string> ids{"down.1", "down.2", "mid", "up.0", "up.1"};
  return ids;
}

bool is_attention_layer(const std::string& id) {
  const auto& ids = attention_layer_ids();
  return std::find(ids.begin(), ids.end(), id) != ids.end();
}

int UNetConfig::grid_of(const std::string& layer_id) const {
  if (layer_id == "down.1" || layer_id == "up.1") return latent_size / 2;
  if (layer_id == "down.2" || layer_id == "mid" || layer_id == "up.0") return latent_size / 4;
  throw ConfigError("unknown attention layer '" + layer_id + "'");
}

int UNetConfig::width_of(const std::string& layer_id) const {
  if (layer_id == "down.1" || layer_id == "up.1") return widths[1];
  if (layer_id == "down.2" || layer_id == "mid" || layer_id == "up.0") return widths[2];
  throw ConfigError("unknown attention layer '" + layer_id + "'");
}

void UNetConfig::validate() const {
  if (latent_channels < 1) throw ConfigError("latent_channels must be positive");
  if (latent_size < 4 || latent_size % 4 != 0)
    throw ConfigError("latent_size must be a positive multiple of 4");
  for (int w : widths)
    if (w < groups || w % groups != 0)
      throw ConfigError("every width must be a positive multiple of the group count");
  if (heads < 1 || attn_dim % heads != 0) throw ConfigError("attn_dim must be divisible by heads");
  if (ff_mult < 1) throw ConfigError("ff_mult must be positive");
  if (time_freq_dim < 2 || time_freq_dim % 2 != 0) throw ConfigError("time_freq_dim must be even");
  if (time_dim < 1) throw ConfigError("time_dim must be positive");
  if (cond_tokens < 1 || cond_dim < 1) throw ConfigError("condition token shape must be positive");
  if (cond_patch < 2 || cond_patch % 2 != 0) throw ConfigError("cond_patch must be even");
  if (cond_hidden < 1) throw ConfigError("cond_hidden must be positive");
  if (!is_attention_layer(map_layer)) throw ConfigError("map_layer '" + map_layer + "' is not an attention layer");
}

// ---------------------------------------------------------------------------
// Codec

LatentCodec::LatentCodec(CodecMode mode, int image_size) : mode_(mode), size_(image_size) {
  if (mode == CodecMode::kLearned)
    throw ConfigError("learned codec is not available in this build; use the identity codec");
  if (image_size < 1) throw ConfigError("codec image size must be positive");
}

template <typename T>
Tensor<T> LatentCodec::encode(const std::vector<float>& image_hwc) const {
  const std::size_t hw = static_cast<std::size_t>(size_) * size_;
  if (image_hwc.size() != hw * 3)
    throw ShapeError("encode: expected " + std::to_string(hw * 3) + " values, got " +
                     std::to_string(image_hwc.size()));
  Tensor<T> z({3, size_, size_});
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) z[c * hw + p] = static_cast<T>(image_hwc[p * 3 + c]);
  return z;
}

template <typename T>
std::vector<float> LatentCodec::decode(const Tensor<T>& z) const {
  const std::size_t hw = static_cast<std::size_t>(size_) * size_;
  if (z.numel() != hw * 3) throw ShapeError("decode: latent " + shape_str(z.shape) + " does not match codec size");
  std::vector<float> img(hw * 3);
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) img[p * 3 + c] = static_cast<float>(z[c * hw + p]);
  return img;
}

// ---------------------------------------------------------------------------
// Inputs

namespace {

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  const int b = x.dim(0), c = x.dim(1);
  const std::size_t hw = x.numel() / (static_cast<std::size_t>(b) * c);
  Tensor<T> out({b, c1 - c0, x.dim(2), x.dim(3)});
  for (int i = 0; i < b; ++i)
    std::copy_n(x.ptr() + (static_cast<std::size_t>(i) * c + c0) * hw, (c1 - c0) * hw,
                out.ptr() + static_cast<std::size_t>(i) * (c1 - c0) * hw);
  return out;
}

}  // namespace

template <typename T>
Tensor<T> ModelInput<T>::z_t() const {
  return slice_channels(data, 0, latent_channels);
}
template <typename T>
Tensor<T> ModelInput<T>::mask() const {
  return slice_channels(data, latent_channels, latent_channels + 1);
}
template <typename T>
Tensor<T> ModelInput<T>::z_ref() const {
  return slice_channels(data, latent_channels + 1, 2 * latent_channels + 1);
}

template <typename T>
ModelInput<T> assemble_input(const Tensor<T>& z_t, const Tensor<T>& m, const Tensor<T>& z_ref) {
  if (z_t.rank() != 4 || m.rank() != 4 || z_ref.rank() != 4)
    throw ShapeError("assemble_input: expected rank-4 tensors");
  require_same_shape(z_t, z_ref, "assemble_input");
  if (m.dim(0) != z_t.dim(0) || m.dim(1) != 1 || m.dim(2) != z_t.dim(2) || m.dim(3) != z_t.dim(3))
    throw ShapeError("assemble_input: mask " + shape_str(m.shape) + " does not match latent " +
                     shape_str(z_t.shape));
  for (T v : m.data)
    if (v != T(0) && v != T(1)) throw ShapeError("assemble_input: mask is not binary");
  const int b = z_t.dim(0), c = z_t.dim(1);
  const std::size_t hw = static_cast<std::size_t>(z_t.dim(2)) * z_t.dim(3);
  ModelInput<T> in;
  in.latent_channels = c;
  in.data = Tensor<T>({b, 2 * c + 1, z_t.dim(2), z_t.dim(3)});
  for (int i = 0; i < b; ++i) {
    T* dst = in.data.ptr() + static_cast<std::size_t>(i) * (2 * c + 1) * hw;
    std::copy_n(z_t.ptr() + i * c * hw, c * hw, dst);
    std::copy_n(m.ptr() + i * hw, hw, dst + c * hw);
    std::copy_n(z_ref.ptr() + i * c * hw, c * hw, dst + (c + 1) * hw);
  }
  return in;
}

template <typename T>
std::vector<T> AttentionRecord<T>::column(const std::string& id, int b, int token) const {
  auto it = cross.find(id);
  if (it == cross.end()) throw ConfigError("attention record has no layer '" + id + "'");
  const Tensor<T>& a = it->second;
  const int n = a.dim(1), k = a.dim(2);
  if (b < 0 || b >= a.dim(0) || token < 0 || token >= k) throw ShapeError("attention column out of range");
  std::vector<T> col(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) col[i] = a[(static_cast<std::size_t>(b) * n + i) * k + token];
  return col;
}

std::vector<std::uint8_t> pool_mask_to_grid(const std::vector<std::uint8_t>& mask, int height, int width,
                                            int grid) {
  if (mask.size() != static_cast<std::size_t>(height) * width) throw ShapeError("pool: mask size mismatch");
  if (grid < 1 || height % grid != 0 || width % grid != 0)
    throw ShapeError("pool: grid " + std::to_string(grid) + " does not divide " + std::to_string(height) + "x" +
                     std::to_string(width));
  const int fy = height / grid, fx = width / grid;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(grid) * grid, 0);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (mask[static_cast<std::size_t>(y) * width + x]) out[static_cast<std::size_t>(y / fy) * grid + x / fx] = 1;
  return out;
}

Tensor<float> object_patch(const Scene& scene, int patch) {
  const int h = scene.height, w = scene.width;
  int x0 = w, y0 = h, x1 = -1, y1 = -1;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (scene.m_obj[static_cast<std::size_t>(y) * w + x]) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw ShapeError("object mask of scene " + std::to_string(scene.seed) + " is empty");
  const int bw = x1 - x0 + 1, bh = y1 - y0 + 1;
  const std::size_t pp = static_cast<std::size_t>(patch) * patch;
  Tensor<float> out({4, patch, patch});
  for (int py = 0; py < patch; ++py) {
    const int sy = y0 + std::min(bh - 1, (2 * py + 1) * bh / (2 * patch));
    for (int px = 0; px < patch; ++px) {
      const int sx = x0 + std::min(bw - 1, (2 * px + 1) * bw / (2 * patch));
      const std::size_t src = static_cast<std::size_t>(sy) * w + sx;
      const float m = scene.m_obj[src] ? 1.0f : 0.0f;
      const std::size_t dst = static_cast<std::size_t>(py) * patch + px;
      for (int c = 0; c < 3; ++c) out[c * pp + dst] = scene.image[src * 3 + c] * m;
      out[3 * pp + dst] = m;
    }
  }
  return out;
}

template <typename T>
Tensor<T> patch_batch(const std::vector<const Scene*>& scenes, int patch) {
  const int b = static_cast<int>(scenes.size());
  Tensor<T> out({b, 4, patch, patch});
  const std::size_t per = static_cast<std::size_t>(4) * patch * patch;
  for (int i = 0; i < b; ++i) {
    const Tensor<float> p = object_patch(*scenes[i], patch);
    std::copy(p.data.begin(), p.data.end(), out.data.begin() + i * per);
  }
  return out;
}

template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what) {
  for (std::size_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t[i])) throw NumericFault(what + ": non-finite value at index " + std::to_string(i));
}

// ---------------------------------------------------------------------------
// Blocks

template <typename T>
Var<T> Linear<T>::operator()(Var<T> x) const {
  return nn::linear(x, x.tape->param(*w), x.tape->param(*b));
}

namespace {

template <typename T>
Var<T> ln(const Norm<T>& n, Var<T> x) {
  return nn::layer_norm(x, x.tape->param(*n.g), x.tape->param(*n.b));
}

// [B,heads,N,K] -> [B,N,K]
template <typename T>
Tensor<T> head_mean(const Tensor<T>& p) {
  const int b = p.dim(0), h = p.dim(1), n = p.dim(2), k = p.dim(3);
  Tensor<T> out({b, n, k});
  const std::size_t nk = static_cast<std::size_t>(n) * k;
  for (int i = 0; i < b; ++i)
    for (int j = 0; j < h; ++j) {
      const T* src = p.ptr() + (static_cast<std::size_t>(i) * h + j) * nk;
      T* dst = out.ptr() + i * nk;
      for (std::size_t e = 0; e < nk; ++e) dst[e] += src[e];
    }
  const T inv = T(1) / static_cast<T>(h);
  for (auto& v : out.data) v *= inv;
  return out;
}

}  // namespace

template <typename T>
Var<T> TransformerBlock<T>::forward(Var<T> h, Var<T> cond, Var<T>* cross_probs) const {
  const Var<T> a = ln(ln1, h);
  const Var<T> p = nn::attention_probs(q(a), k(a), heads);
  const Var<T> h1 = nn::add(h, o(nn::attention_apply(p, v(a), heads)));

  const Var<T> c = ln(ln2, h1);
  const Var<T> px = nn::attention_probs(xq(c), xk(cond), heads);
  const Var<T> h2 = nn::add(h1, xo(nn::attention_apply(px, xv(cond), heads)));
  if (cross_probs) *cross_probs = px;

  const Var<T> f = ff2(nn::gelu(ff1(ln(ln3, h2))));
  return nn::add(h2, f);
}

// ---------------------------------------------------------------------------
// UNet

template <typename T>
nn::Parameter<T>* UNet<T>::param(const std::string& name, Shape shape, int fan_in, bool zero) {
  const std::string full = prefix_ + name;
  if (store_.contains(full)) {
    auto& p = store_.get(full);
    if (p.value.shape != shape)
      throw ShapeError("parameter " + full + " has shape " + shape_str(p.value.shape) + ", expected " +
                       shape_str(shape));
    return &p;
  }
  Tensor<T> init = zero ? Tensor<T>(shape) : nn::kaiming_uniform<T>(shape, fan_in, rng_, 1.0 / std::sqrt(3.0));
  return &store_.add(full, std::move(init));
}

template <typename T>
Linear<T> UNet<T>::make_linear(const std::string& name, int in, int out) {
  return {param(name + ".w", {out, in}, in), param(name + ".b", {out}, in, true)};
}

template <typename T>
Norm<T> UNet<T>::make_norm(const std::string& name, int ch) {
  Norm<T> n;
  const std::string g = prefix_ + name + ".g";
  n.g = store_.contains(g) ? &store_.get(g) : &store_.add(g, Tensor<T>({ch}, T(1)));
  n.b = param(name + ".b", {ch}, 1, true);
  return n;
}

template <typename T>
typename UNet<T>::Conv UNet<T>::make_conv(const std::string& name, int in, int out, int k) {
  return {param(name + ".w", {out, in, k, k}, in * k * k), param(name + ".b", {out}, 1, true)};
}

template <typename T>
typename UNet<T>::ResBlock UNet<T>::make_res(const std::string& name, int in, int out) {
  ResBlock rb;
  rb.n1 = make_norm(name + ".norm1", in);
  const Conv c1 = make_conv(name + ".conv1", in, out, 3);
  rb.c1w = c1.w;
  rb.c1b = c1.b;
  rb.temb = make_linear(name + ".temb", cfg_.time_dim, out);
  rb.n2 = make_norm(name + ".norm2", out);
  const Conv c2 = make_conv(name + ".conv2", out, out, 3);
  rb.c2w = c2.w;
  rb.c2b = c2.b;
  if (in != out) {
    const Conv s = make_conv(name + ".skip", in, out, 1);
    rb.skip_w = s.w;
    rb.skip_b = s.b;
  }
  return rb;
}

template <typename T>
typename UNet<T>::AttnSite UNet<T>::make_attn(const std::string& id, int ch) {
  const int d = cfg_.attn_dim, dc = cfg_.cond_dim, dff = cfg_.attn_dim * cfg_.ff_mult;
  const std::string p = id + ".attn.";
  AttnSite s;
  s.norm = make_norm(p + "norm", ch);
  s.proj_in = make_linear(p + "proj_in", ch, d);
  s.proj_out = make_linear(p + "proj_out", d, ch);
  auto& b = s.block;
  b.id = id;
  b.heads = cfg_.heads;
  b.ln1 = make_norm(p + "ln1", d);
  b.q = make_linear(p + "q", d, d);
  b.k = make_linear(p + "k", d, d);
  b.v = make_linear(p + "v", d, d);
  b.o = make_linear(p + "o", d, d);
  b.ln2 = make_norm(p + "ln2", d);
  b.xq = make_linear(p + "xq", d, d);
  b.xk = make_linear(p + "xk", dc, d);
  b.xv = make_linear(p + "xv", dc, d);
  b.xo = make_linear(p + "xo", d, d);
  b.ln3 = make_norm(p + "ln3", d);
  b.ff1 = make_linear(p + "ff1", d, dff);
  b.ff2 = make_linear(p + "ff2", dff, d);
  return s;
}

template <typename T>
UNet<T>::UNet(const UNetConfig& cfg, nn::ParamStore<T>& store, Rng& rng, const std::string& prefix,
              bool encoder_only)
    : cfg_(cfg), store_(store), rng_(rng), prefix_(prefix), encoder_only_(encoder_only) {
  cfg_.validate();
  const int w0 = cfg_.widths[0], w1 = cfg_.widths[1], w2 = cfg_.widths[2];
  time1_ = make_linear("time.l1", cfg_.time_freq_dim, cfg_.time_dim);
  time2_ = make_linear("time.l2", cfg_.time_dim, cfg_.time_dim);
  conv_in_ = make_conv("conv_in", cfg_.input_channels(), w0, 3);
  d0_ = make_res("down.0.res", w0, w0);
  down0_ = make_conv("down.0.down", w0, w0, 3);
  d1_ = make_res("down.1.res", w0, w1);
  a_d1_ = make_attn("down.1", w1);
  down1_ = make_conv("down.1.down", w1, w1, 3);
  d2_ = make_res("down.2.res", w1, w2);
  a_d2_ = make_attn("down.2", w2);
  mid_ = make_res("mid.res", w2, w2);
  a_mid_ = make_attn("mid", w2);
  if (encoder_only_) return;
  u0_ = make_res("up.0.res", 2 * w2, w2);
  a_u0_ = make_attn("up.0", w2);
  up0_ = make_conv("up.0.up", w2, w1, 3);
  u1_ = make_res("up.1.res", 2 * w1, w1);
  a_u1_ = make_attn("up.1", w1);
  up1_ = make_conv("up.1.up", w1, w0, 3);
  u2_ = make_res("up.2.res", 2 * w0, w0);
  out_norm_ = make_norm("out.norm", w0);
  out_conv_ = make_conv("out.conv", w0, cfg_.latent_channels, 3);
}

template <typename T>
const TransformerBlock<T>& UNet<T>::block(const std::string& id) const {
  if (id == "down.1") return a_d1_.block;
  if (id == "down.2") return a_d2_.block;
  if (id == "mid") return a_mid_.block;
  if (!encoder_only_) {
    if (id == "up.0") return a_u0_.block;
    if (id == "up.1") return a_u1_.block;
  }
  throw ConfigError("unresolvable attention layer id '" + id + "'");
}

template <typename T>
Var<T> UNet<T>::conv(const Conv& c, Var<T> x, int stride, int pad) const {
  return nn::conv2d(x, x.tape->param(*c.w), x.tape->param(*c.b), stride, pad);
}

template <typename T>
Var<T> UNet<T>::time_embedding(nn::Tape<T>& tape, const std::vector<int>& timesteps) const {
  const int b = static_cast<int>(timesteps.size());
  const int half = cfg_.time_freq_dim / 2;
  Tensor<T> e({b, cfg_.time_freq_dim});
  for (int i = 0; i < b; ++i) {
    if (timesteps[i] < 0) throw ShapeError("negative timestep");
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / half);
      const double arg = timesteps[i] * freq;
      e[static_cast<std::size_t>(i) * cfg_.time_freq_dim + j] = static_cast<T>(std::sin(arg));
      e[static_cast<std::size_t>(i) * cfg_.time_freq_dim + half + j] = static_cast<T>(std::cos(arg));
    }
  }
  const Var<T> h = nn::silu(time1_(tape.constant(std::move(e))));
  return nn::silu(time2_(h));
}

template <typename T>
Var<T> UNet<T>::run_res(const ResBlock& rb, Var<T> x, Var<T> temb) const {
  nn::Tape<T>& tape = *x.tape;
  Var<T> h = nn::silu(nn::group_norm(x, tape.param(*rb.n1.g), tape.param(*rb.n1.b), cfg_.groups));
  h = nn::conv2d(h, tape.param(*rb.c1w), tape.param(*rb.c1b), 1, 1);
  h = nn::add_channel_bias(h, rb.temb(temb));
  h = nn::silu(nn::group_norm(h, tape.param(*rb.n2.g), tape.param(*rb.n2.b), cfg_.groups));
  h = nn::conv2d(h, tape.param(*rb.c2w), tape.param(*rb.c2b), 1, 1);
  const Var<T> skip = rb.skip_w ? nn::conv2d(x, tape.param(*rb.skip_w), tape.param(*rb.skip_b), 1, 0) : x;
  return nn::add(skip, h);
}

template <typename T>
Var<T> UNet<T>::run_attn(const AttnSite& site, Var<T> x, Var<T> cond, DenoiseOutput<T>& out,
                         BlockInterceptor<T>* hook) const {
  nn::Tape<T>& tape = *x.tape;
  const int hgt = x.shape()[2], wid = x.shape()[3];
  const std::string& id = site.block.id;
  const Var<T> xn = nn::group_norm(x, tape.param(*site.norm.g), tape.param(*site.norm.b), cfg_.groups);
  const Var<T> h = site.proj_in(nn::to_tokens(xn));

  Var<T> y;
  Tensor<T> replaced, cross_map;
  if (hook && hook->replace_block(site.block, h.value(), cond.value(), replaced, cross_map)) {
    if (replaced.shape != h.shape()) throw ShapeError("block replacement for " + id + " has wrong shape");
    y = tape.constant(std::move(replaced));
    out.record.cross[id] = std::move(cross_map);
  } else {
    Var<T> probs;
    y = site.block.forward(h, cond, &probs);
    out.cross_probs[id] = probs;
    out.record.cross[id] = head_mean(probs.value());
    if (hook) hook->on_block_output(id, y.value());
  }
  out.record.self.push_back({id, h.shape()[1], h.shape()[2]});
  return nn::add(x, nn::from_tokens(site.proj_out(y), hgt, wid));
}

template <typename T>
DenoiseOutput<T> UNet<T>::forward(Var<T> input, const std::vector<int>& timesteps, Var<T> cond,
                                  BlockInterceptor<T>* hook) const {
  if (encoder_only_) throw ConfigError("encoder-only network has no decoder");
  nn::Tape<T>& tape = *input.tape;
  const Shape s = input.shape();
  if (s.size() != 4 || s[1] != cfg_.input_channels() || s[2] != cfg_.latent_size || s[3] != cfg_.latent_size)
    throw ShapeError("denoiser input " + shape_str(s) + " does not match the configuration");
  if (static_cast<int>(timesteps.size()) != s[0]) throw ShapeError("one timestep per sample required");
  const Shape cs = cond.shape();
  if (cs.size() != 3 || cs[0] != s[0] || cs[1] != cfg_.cond_tokens || cs[2] != cfg_.cond_dim)
    throw ShapeError("condition tokens " + shape_str(cs) + " do not match the configuration");

  DenoiseOutput<T> out;
  const Var<T> temb = time_embedding(tape, timesteps);
  Var<T> h = conv(conv_in_, input, 1, 1);
  const Var<T> s0 = run_res(d0_, h, temb);
  h = conv(down0_, s0, 2, 1);
  Var<T> s1 = run_res(d1_, h, temb);
  s1 = run_attn(a_d1_, s1, cond, out, hook);
  h = conv(down1_, s1, 2, 1);
  Var<T> s2 = run_res(d2_, h, temb);
  s2 = run_attn(a_d2_, s2, cond, out, hook);
  h = run_res(mid_, s2, temb);
  h = run_attn(a_mid_, h, cond, out, hook);

  h = run_res(u0_, nn::concat_channels<T>({h, s2}), temb);
  h = run_attn(a_u0_, h, cond, out, hook);
  h = conv(up0_, nn::upsample2x(h), 1, 1);
  h = run_res(u1_, nn::concat_channels<T>({h, s1}), temb);
  h = run_attn(a_u1_, h, cond, out, hook);
  h = conv(up1_, nn::upsample2x(h), 1, 1);
  h = run_res(u2_, nn::concat_channels<T>({h, s0}), temb);
  h = nn::silu(nn::group_norm(h, tape.param(*out_norm_.g), tape.param(*out_norm_.b), cfg_.groups));
  out.eps = conv(out_conv_, h, 1, 1);
  check_finite(out.eps.value(), "denoiser output");
  return out;
}

template <typename T>
EncoderFeatures<T> UNet<T>::encode(Var<T> input, const std::vector<int>& timesteps, Var<T> cond) const {
  nn::Tape<T>& tape = *input.tape;
  const Shape s = input.shape();
  if (s.size() != 4 || s[1] != cfg_.input_channels() || s[2] != cfg_.latent_size || s[3] != cfg_.latent_size)
    throw ShapeError("encoder input " + shape_str(s) + " does not match the configuration");
  if (static_cast<int>(timesteps.size()) != s[0]) throw ShapeError("one timestep per sample required");

  DenoiseOutput<T> scratch;
  EncoderFeatures<T> f;
  const Var<T> temb = time_embedding(tape, timesteps);
  Var<T> h = conv(conv_in_, input, 1, 1);
  h = run_res(d0_, h, temb);
  h = conv(down0_, h, 2, 1);
  h = run_res(d1_, h, temb);
  h = run_attn(a_d1_, h, cond, scratch, nullptr);
  f.maps.emplace_back("down.1", h);
  h = conv(down1_, h, 2, 1);
  h = run_res(d2_, h, temb);
  h = run_attn(a_d2_, h, cond, scratch, nullptr);
  f.maps.emplace_back("down.2", h);
  h = run_res(mid_, h, temb);
  h = run_attn(a_mid_, h, cond, scratch, nullptr);
  f.maps.emplace_back("mid", h);
  f.cross_probs = std::move(scratch.cross_probs);
  return f;
}

// ---------------------------------------------------------------------------
// Condition encoder

template <typename T>
ConditionEncoder<T>::ConditionEncoder(const UNetConfig& cfg, nn::ParamStore<T>& store, Rng& rng,
                                      const std::string& prefix)
    : cfg_(cfg) {
  const double gain = 1.0 / std::sqrt(3.0);
  auto get = [&](const std::string& name, Shape shape, int fan_in, bool zero) -> nn::Parameter<T>* {
    const std::string full = prefix + name;
    if (store.contains(full)) return &store.get(full);
    return &store.add(full, zero ? Tensor<T>(shape) : nn::kaiming_uniform<T>(shape, fan_in, rng, gain));
  };
  const int hid = cfg.cond_hidden;
  const int flat = hid * (cfg.cond_patch / 2) * (cfg.cond_patch / 2);
  c1w_ = get("conv1.w", {hid, 4, 3, 3}, 4 * 9, false);
  c1b_ = get("conv1.b", {hid}, 1, true);
  c2w_ = get("conv2.w", {hid, hid, 3, 3}, hid * 9, false);
  c2b_ = get("conv2.b", {hid}, 1, true);
  fc_ = {get("fc.w", {cfg.cond_tokens * cfg.cond_dim, flat}, flat, false),
         get("fc.b", {cfg.cond_tokens * cfg.cond_dim}, 1, true)};
}

template <typename T>
Var<T> ConditionEncoder<T>::forward(Var<T> patches) const {
  nn::Tape<T>& tape = *patches.tape;
  const Shape s = patches.shape();
  if (s.size() != 4 || s[1] != 4 || s[2] != cfg_.cond_patch || s[3] != cfg_.cond_patch)
    throw ShapeError("object patches " + shape_str(s) + " do not match the configuration");
  Var<T> h = nn::silu(nn::conv2d(patches, tape.param(*c1w_), tape.param(*c1b_), 1, 1));
  h = nn::silu(nn::conv2d(h, tape.param(*c2w_), tape.param(*c2b_), 2, 1));
  const int flat = static_cast<int>(h.value().numel()) / s[0];
  h = fc_(nn::reshape(h, {s[0], flat}));
  return nn::reshape(h, {s[0], cfg_.cond_tokens, cfg_.cond_dim});
}

// ---------------------------------------------------------------------------
// Denoiser

template <typename T>
Denoiser<T>::Denoiser(const UNetConfig& cfg, std::uint64_t init_seed)
    : cfg_(cfg), rng_owner_(std::make_unique<Rng>(split_seed(init_seed, "init"))) {
  cfg_.validate();
  rng_ = rng_owner_.get();
  cond_ = std::make_unique<ConditionEncoder<T>>(cfg_, store_, *rng_, "cond.");
  unet_ = std::make_unique<UNet<T>>(cfg_, store_, *rng_, "unet.");
}

template <typename T>
template <typename U>
std::unique_ptr<Denoiser<T>> Denoiser<T>::from(const Denoiser<U>& src) {
  auto out = std::make_unique<Denoiser<T>>(src.config(), 0);
  const std::size_t n = out->params().copy_matching(src.params());
  if (n != out->params().size()) throw ShapeError("parameter sets differ while converting a denoiser");
  return out;
}

template <typename T>
Var<T> Denoiser<T>::embed(nn::Tape<T>& tape, const Tensor<T>& patches) const {
  return cond_->forward(tape.constant(patches));
}

template <typename T>
DenoiseOutput<T> Denoiser<T>::denoise(nn::Tape<T>& tape, const ModelInput<T>& input,
                                      const std::vector<int>& timesteps, Var<T> cond,
                                      BlockInterceptor<T>* hook) const {
  if (input.latent_channels != cfg_.latent_channels) throw ShapeError("input latent channels do not match");
  return unet_->forward(tape.constant(input.data), timesteps, cond, hook);
}

template <typename T>
ConditionEmbedding<T> embed_condition(const Denoiser<T>& model, const Scene& scene) {
  nn::Tape<T> tape(false);
  const Var<T> c = model.embed(tape, patch_batch<T>({&scene}, model.config().cond_patch));
  ConditionEmbedding<T> e;
  e.tokens = c.value().reshaped({model.config().cond_tokens, model.config().cond_dim});
  check_finite(e.tokens, "condition embedding");
  return e;
}

// ---------------------------------------------------------------------------
// Instantiation

#define FLASHCLEAR_MODEL_INSTANTIATE(T)                                                            \
  template Tensor<T> LatentCodec::encode<T>(const std::vector<float>&) const;                     \
  template std::vector<float> LatentCodec::decode<T>(const Tensor<T>&) const;                     \
  template struct ModelInput<T>;                                                                   \
  template ModelInput<T> assemble_input(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);    \
  template struct AttentionRecord<T>;                                                              \
  template struct Linear<T>;                                                                       \
  template struct TransformerBlock<T>;                                                             \
  template class UNet<T>;                                                                          \
  template class ConditionEncoder<T>;                                                              \
  template class Denoiser<T>;                                                                      \
  template ConditionEmbedding<T> embed_condition(const Denoiser<T>&, const Scene&);               \
  template Tensor<T> patch_batch<T>(const std::vector<const Scene*>&, int);                       \
  template void check_finite(const Tensor<T>&, const std::string&);

FLASHCLEAR_MODEL_INSTANTIATE(float)
FLASHCLEAR_MODEL_INSTANTIATE(double)

template std::unique_ptr<Denoiser<double>> Denoiser<double>::from(const Denoiser<float>&);
template std::unique_ptr<Denoiser<float>> Denoiser<float>::from(const Denoiser<double>&);
template std::unique_ptr<Denoiser<float>> Denoiser<float>::from(const Denoiser<float>&);
template std::unique_ptr<Denoiser<double>> Denoiser<double>::from(const Denoiser<double>&);

}  // namespace flashclear
