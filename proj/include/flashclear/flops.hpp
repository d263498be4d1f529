#pragma once

// Analytic FLOPs accounting for the denoiser. Conventions: a multiply-add is
// 2 FLOPs, softmax 3 per logit, normalisation layers and activations 4 per
// element, residual and bias additions 1 per element. Counts are for a
// single sample per denoising call; the condition encoder runs once per
// scene and is not part of the denoising cost.

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flashclear/model.hpp"

namespace flashclear {

// Scores, softmax and value mixing for n_f query rows against n keys of
// total width d split over `heads` heads.
std::uint64_t count_attention(int n, int n_f, int d, int heads);

// Cost of the part of a transformer block that scales with the number of
// foreground rows (everything except LN1 and the key/value projections).
std::uint64_t count_block_rows(const UNetConfig& cfg, const std::string& layer, int n_f);
// The always-dense remainder: LN1 over all tokens, self K/V projections and
// cross K/V projections of the condition tokens.
std::uint64_t count_block_kv(const UNetConfig& cfg, const std::string& layer);

// Foreground token counts per step and attention layer; layers absent from
// a step's map run dense. An empty trace means every step is dense.
struct CacheTrace {
  std::vector<std::map<std::string, int>> steps;
};

struct FlopsEntry {
  int step = 0;
  std::string layer;
  std::string op;
  std::uint64_t count = 0;
};

struct FlopsReport {
  std::vector<FlopsEntry> entries;
  std::vector<std::uint64_t> step_totals;
  std::uint64_t total = 0;
  // Per attention layer, foreground fraction at every step.
  std::map<std::string, std::vector<double>> fg_fraction;

  // Sum of entries matching a layer and op (empty strings match all).
  std::uint64_t sum(const std::string& layer = "", const std::string& op = "", int step = -1) const;
  bool balanced() const;
  std::string to_text() const;
  std::string to_key_values() const;
};

FlopsReport count_run(const UNetConfig& cfg, int n_steps, const CacheTrace& trace = {});

// Dense per-step cost.
std::uint64_t count_step(const UNetConfig& cfg);

}  // namespace flashclear
