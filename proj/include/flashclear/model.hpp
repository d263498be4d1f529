#pragma once

// The denoising network shared by teacher and student: a three-stage U-Net
// over the latent grid with self- and cross-attention sites, a small
// convolutional condition encoder standing in for the fused image/text
// embedding, and the latent codec.

#include <array>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "flashclear/autograd.hpp"
#include "flashclear/rng.hpp"
#include "flashclear/synthgen.hpp"
#include "flashclear/tensor.hpp"

namespace flashclear {

// ---------------------------------------------------------------------------
// Configuration

struct UNetConfig {
  int latent_channels = 3;
  int latent_size = 32;
  std::array<int, 3> widths{32, 64, 128};
  int attn_dim = 64;
  int heads = 4;
  int groups = 8;
  int ff_mult = 4;
  int time_freq_dim = 64;
  int time_dim = 128;
  int cond_tokens = 4;
  int cond_dim = 64;
  int cond_patch = 8;
  int cond_hidden = 32;
  // Layer whose visual-token column drives the mask loss, token masks and
  // the final fusion weights.
  std::string map_layer = "up.1";

  int input_channels() const { return 2 * latent_channels + 1; }
  // Side length of a layer's token grid.
  int grid_of(const std::string& layer_id) const;
  int width_of(const std::string& layer_id) const;
  void validate() const;

  friend bool operator==(const UNetConfig&, const UNetConfig&) = default;
};

// Attention sites in execution order; these are the cacheable layer ids.
const std::vector<std::string>& attention_layer_ids();
bool is_attention_layer(const std::string& id);

// Index of the condition token whose cross-attention column is read out.
inline constexpr int kVisualToken = 0;

// ---------------------------------------------------------------------------
// Codec

enum class CodecMode { kIdentity, kLearned };

// Image <-> latent. Identity mode maps an interleaved H x W x 3 image to a
// 3 x H x W latent without touching the values.
class LatentCodec {
 public:
  explicit LatentCodec(CodecMode mode = CodecMode::kIdentity, int image_size = 32);

  CodecMode mode() const { return mode_; }
  int latent_channels() const { return 3; }
  int spatial_factor() const { return 1; }

  template <typename T>
  Tensor<T> encode(const std::vector<float>& image_hwc) const;
  template <typename T>
  std::vector<float> decode(const Tensor<T>& latent_chw) const;

 private:
  CodecMode mode_;
  int size_;
};

// ---------------------------------------------------------------------------
// Inputs and records

// Concatenated (z_t, mask, z_ref) along channels: [B, 2C+1, h, w].
template <typename T>
struct ModelInput {
  Tensor<T> data;
  int latent_channels = 0;

  int batch() const { return data.dim(0); }
  Tensor<T> z_t() const;
  Tensor<T> mask() const;
  Tensor<T> z_ref() const;
};

// Inputs are [B,C,h,w], [B,1,h,w], [B,C,h,w]; the mask must hold only 0/1.
template <typename T>
ModelInput<T> assemble_input(const Tensor<T>& z_t, const Tensor<T>& m_latent, const Tensor<T>& z_ref);

// Condition tokens [B, K_c, d_c].
template <typename T>
struct ConditionEmbedding {
  Tensor<T> tokens;
};

// Per layer cross-attention maps (head-averaged, [B, N, K_c]) and self
// attention metadata.
template <typename T>
struct AttentionRecord {
  struct SelfAttention {
    std::string layer;
    int tokens = 0;
    int dim = 0;
  };
  std::map<std::string, Tensor<T>> cross;
  std::vector<SelfAttention> self;

  // Column `token` of layer `id` for sample `b`, length N.
  std::vector<T> column(const std::string& id, int b, int token = kVisualToken) const;
};

// Max-pools an H x W binary mask onto a grid x grid token grid (row-major).
std::vector<std::uint8_t> pool_mask_to_grid(const std::vector<std::uint8_t>& mask, int height, int width,
                                            int grid);

// Object patch cropped to the bounding box of m_obj, nearest-resampled to
// patch x patch, with the mask as a fourth channel: [4, patch, patch].
Tensor<float> object_patch(const Scene& scene, int patch);

// ---------------------------------------------------------------------------
// Network building blocks

template <typename T>
struct Linear {
  nn::Parameter<T>* w = nullptr;
  nn::Parameter<T>* b = nullptr;
  nn::Var<T> operator()(nn::Var<T> x) const;
};

template <typename T>
struct Norm {
  nn::Parameter<T>* g = nullptr;
  nn::Parameter<T>* b = nullptr;
};

// Pre-norm transformer block over tokens [B,N,d]: self-attention,
// cross-attention against the condition tokens, feed-forward.
template <typename T>
struct TransformerBlock {
  std::string id;
  int heads = 1;
  Norm<T> ln1, ln2, ln3;
  Linear<T> q, k, v, o;
  Linear<T> xq, xk, xv, xo;
  Linear<T> ff1, ff2;

  // Returns the block output; stores the cross-attention probabilities
  // [B,heads,N,K_c] in *cross_probs.
  nn::Var<T> forward(nn::Var<T> h, nn::Var<T> cond, nn::Var<T>* cross_probs) const;
};

// Lets inference code observe or replace a transformer block.
template <typename T>
class BlockInterceptor {
 public:
  virtual ~BlockInterceptor() = default;
  // Normal block output (tokens [B,N,d]) for layer `id`.
  virtual void on_block_output(const std::string& /*id*/, const Tensor<T>& /*out*/) {}
  // Return true after filling `out` ([B,N,d]) and `cross_map` ([B,N,K_c],
  // head averaged) to bypass the standard block computation.
  virtual bool replace_block(const TransformerBlock<T>& /*block*/, const Tensor<T>& /*h_in*/,
                             const Tensor<T>& /*cond*/, Tensor<T>& /*out*/,
                             Tensor<T>& /*cross_map*/) {
    return false;
  }
};

template <typename T>
struct DenoiseOutput {
  nn::Var<T> eps;
  // Cross-attention probabilities per layer, [B,heads,N,K_c]; absent for
  // layers replaced by an interceptor.
  std::map<std::string, nn::Var<T>> cross_probs;
  AttentionRecord<T> record;
};

// Features the discriminator heads read from the encoder half.
template <typename T>
struct EncoderFeatures {
  std::vector<std::pair<std::string, nn::Var<T>>> maps;
  std::map<std::string, nn::Var<T>> cross_probs;
};

template <typename T>
class UNet {
 public:
  // Registers (or reuses, when already present) parameters in `store` under
  // `prefix`. `rng` initialises any newly created parameter.
  UNet(const UNetConfig& cfg, nn::ParamStore<T>& store, Rng& rng, const std::string& prefix = "unet.",
       bool encoder_only = false);

  const UNetConfig& config() const { return cfg_; }

  DenoiseOutput<T> forward(nn::Var<T> input, const std::vector<int>& timesteps, nn::Var<T> cond,
                           BlockInterceptor<T>* hook = nullptr) const;

  EncoderFeatures<T> encode(nn::Var<T> input, const std::vector<int>& timesteps, nn::Var<T> cond) const;

  const TransformerBlock<T>& block(const std::string& id) const;

 private:
  struct ResBlock {
    Norm<T> n1, n2;
    nn::Parameter<T>*c1w, *c1b, *c2w, *c2b;
    Linear<T> temb;
    nn::Parameter<T>* skip_w = nullptr;
    nn::Parameter<T>* skip_b = nullptr;
  };
  struct AttnSite {
    Norm<T> norm;
    Linear<T> proj_in, proj_out;
    TransformerBlock<T> block;
  };
  struct Conv {
    nn::Parameter<T>*w, *b;
  };

  nn::Parameter<T>* param(const std::string& name, Shape shape, int fan_in, bool zero = false);
  Linear<T> make_linear(const std::string& name, int in, int out);
  Norm<T> make_norm(const std::string& name, int ch);
  Conv make_conv(const std::string& name, int in, int out, int k);
  ResBlock make_res(const std::string& name, int in, int out);
  AttnSite make_attn(const std::string& id, int ch);

  nn::Var<T> run_res(const ResBlock& rb, nn::Var<T> x, nn::Var<T> temb) const;
  nn::Var<T> run_attn(const AttnSite& site, nn::Var<T> x, nn::Var<T> cond, DenoiseOutput<T>& out,
                      BlockInterceptor<T>* hook) const;
  nn::Var<T> conv(const Conv& c, nn::Var<T> x, int stride, int pad) const;
  nn::Var<T> time_embedding(nn::Tape<T>& tape, const std::vector<int>& timesteps) const;

  UNetConfig cfg_;
  nn::ParamStore<T>& store_;
  Rng& rng_;
  std::string prefix_;
  bool encoder_only_;

  Linear<T> time1_, time2_;
  Conv conv_in_;
  ResBlock d0_, d1_, d2_, mid_;
  Conv down0_, down1_;
  AttnSite a_d1_, a_d2_, a_mid_, a_u0_, a_u1_;
  ResBlock u0_, u1_, u2_;
  Conv up0_, up1_;
  Norm<T> out_norm_;
  Conv out_conv_;
};

// Maps an object patch batch [B,4,p,p] to condition tokens [B,K_c,d_c].
template <typename T>
class ConditionEncoder {
 public:
  ConditionEncoder(const UNetConfig& cfg, nn::ParamStore<T>& store, Rng& rng,
                   const std::string& prefix = "cond.");
  nn::Var<T> forward(nn::Var<T> patches) const;

 private:
  UNetConfig cfg_;
  nn::Parameter<T>*c1w_, *c1b_, *c2w_, *c2b_;
  Linear<T> fc_;
};

// Teacher/student network: condition encoder plus U-Net over one store.
template <typename T>
class Denoiser {
 public:
  Denoiser(const UNetConfig& cfg, std::uint64_t init_seed);
  // Adopts parameter values from `src` (same config), converting scalars.
  template <typename U>
  static std::unique_ptr<Denoiser> from(const Denoiser<U>& src);

  Denoiser(const Denoiser&) = delete;
  Denoiser& operator=(const Denoiser&) = delete;

  const UNetConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return store_; }
  const nn::ParamStore<T>& params() const { return store_; }
  const UNet<T>& unet() const { return *unet_; }
  const ConditionEncoder<T>& cond_encoder() const { return *cond_; }

  // Condition tokens for a batch of object patches [B,4,p,p].
  nn::Var<T> embed(nn::Tape<T>& tape, const Tensor<T>& patches) const;

  DenoiseOutput<T> denoise(nn::Tape<T>& tape, const ModelInput<T>& input,
                           const std::vector<int>& timesteps, nn::Var<T> cond,
                           BlockInterceptor<T>* hook = nullptr) const;

 private:
  UNetConfig cfg_;
  nn::ParamStore<T> store_;
  Rng* rng_ = nullptr;
  std::unique_ptr<Rng> rng_owner_;
  std::unique_ptr<ConditionEncoder<T>> cond_;
  std::unique_ptr<UNet<T>> unet_;
};

// Condition embedding for a single scene (inference convenience).
template <typename T>
ConditionEmbedding<T> embed_condition(const Denoiser<T>& model, const Scene& scene);

// Batched object patches [B,4,p,p] for a set of scenes.
template <typename T>
Tensor<T> patch_batch(const std::vector<const Scene*>& scenes, int patch);

// Throws NumericFault if any entry is non-finite.
template <typename T>
void check_finite(const Tensor<T>& t, const std::string& what);

}  // namespace flashclear
