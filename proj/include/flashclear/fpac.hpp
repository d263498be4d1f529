#pragma once

// Foreground-prioritised asymmetric attention and caching. Token masks are
// derived from the visual-token cross-attention column, background rows of
// the configured transformer blocks are served from a per-layer cache at the
// cached step, and the final prediction is blended with the input image
// using attention-derived weights.

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "flashclear/flops.hpp"
#include "flashclear/model.hpp"
#include "flashclear/scheduler.hpp"
#include "flashclear/synthgen.hpp"

namespace flashclear {

struct TokenMaskPolicy {
  double quantile = 0.85;
  int dilation = 1;
  // Marks every token foreground (disables pruning).
  bool all_foreground = false;

  void validate() const;
};

struct TokenMask {
  int grid = 0;
  std::vector<std::uint8_t> bits;
  int n_foreground = 0;

  int size() const { return static_cast<int>(bits.size()); }
  static TokenMask full(int grid);
  static TokenMask from_bits(int grid, std::vector<std::uint8_t> bits);
  std::vector<int> foreground_indices() const;
};

// Top ceil((1-q)N) tokens of `a` (ties to the lower index, zero entries
// never selected) unioned with the user mask dilated by `dilation` tokens in
// the Chebyshev sense.
TokenMask derive_token_mask(const std::vector<double>& a, const std::vector<std::uint8_t>& user_tokens, int grid,
                            const TokenMaskPolicy& policy);

// Max-pool onto a coarser grid: a coarse token is background only if all of
// its children are.
TokenMask pool_token_mask(const TokenMask& fine, int coarse_grid);

// q,k,v: [N,d]. Rows with mask=1 get softmax(q k^T / sqrt(d/heads)) v over
// all keys; rows with mask=0 are copied from cache_rows, which may be null
// only when no background row exists.
template <typename T>
Tensor<T> asymmetric_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const TokenMask& mask,
                               const Tensor<T>* cache_rows, int heads = 1);

// One transformer block with pruned queries. h_in: [1,N,d] block input,
// cond: [1,K_c,d_c]. Background rows of the result are copied from
// cache_rows ([N,d] or [1,N,d]). When cross_map is given it receives the
// head-averaged cross-attention rows of the foreground tokens, [n_fg, K_c].
template <typename T>
Tensor<T> asymmetric_block_forward(const TransformerBlock<T>& block, const Tensor<T>& h_in, const Tensor<T>& cond,
                                   const TokenMask& mask, const Tensor<T>* cache_rows,
                                   Tensor<T>* cross_map = nullptr);

// Per-layer cache of block outputs.
template <typename T>
class LayerCache {
 public:
  struct Entry {
    Tensor<T> rows;
    int step = -1;
    bool valid = false;
  };

  void store(const std::string& layer, Tensor<T> rows, int step);
  void invalidate(const std::string& layer);
  bool has(const std::string& layer) const;
  // Throws CacheError unless a valid entry produced strictly before `step`.
  const Tensor<T>& consume(const std::string& layer, int step) const;
  const std::map<std::string, Entry>& entries() const { return entries_; }

 private:
  std::map<std::string, Entry> entries_;
};

struct FusionWeights {
  int height = 0, width = 0;
  std::vector<double> alpha;  // H*W, in [0,1]
};

// alpha = clamp(a / max(a), 0, 1) on the token grid (all zero if max <= 0),
// nearest-upsampled to height x width.
FusionWeights derive_fusion_weights(const std::vector<double>& a_final, int grid, int height, int width);

// alpha * pred + (1 - alpha) * orig for HWC images.
std::vector<float> fuse_final(const std::vector<float>& pred, const std::vector<float>& orig, const FusionWeights& w);

struct CacheConfig {
  std::vector<std::string> layers = attention_layer_ids();
  // Index into the plan of the step that consumes the cache; -1 is the last.
  int cached_step = -1;
  TokenMaskPolicy policy;
  bool fusion = true;

  void validate(int n_steps) const;
  int resolved_step(int n_steps) const { return cached_step < 0 ? n_steps + cached_step : cached_step; }
};

struct StepRecord {
  int step = 0;
  int tau = 0;
  // Visual-token column of the map layer after this step.
  std::vector<double> map;
  // Token mask derived from this step's map (what the next step would use).
  TokenMask refined;
};

struct CacheAudit {
  // Per cached layer: background rows compared and rows that differed.
  std::map<std::string, long long> rows_checked;
  std::map<std::string, long long> mismatches;
  long long total_mismatches() const;
  long long total_checked() const;
};

struct InferenceResult {
  std::vector<float> image;       // final output, HWC in [0,1]
  std::vector<float> prediction;  // decoded prediction before fusion
  std::optional<FusionWeights> fusion;
  std::vector<StepRecord> history;
  std::map<std::string, TokenMask> masks;  // masks used at the cached step
  CacheTrace trace;
  FlopsReport flops;
  CacheAudit audit;
};

// Deterministic initial noise for a scene.
Tensor<double> initial_noise(const UNetConfig& cfg, std::uint64_t noise_seed, std::uint64_t scene_seed);

// Plain few-step sampling: no cache and no fusion.
InferenceResult run_inference(const Denoiser<double>& model, const Scene& scene, const TimestepPlan& plan,
                              const NoiseSchedule& sched, std::uint64_t noise_seed);

InferenceResult run_cached_inference(const Denoiser<double>& model, const Scene& scene, const TimestepPlan& plan,
                                     const CacheConfig& cc, const NoiseSchedule& sched, std::uint64_t noise_seed);

}  // namespace flashclear
