#include <gtest/gtest.h>

#include "flashclear/errors.hpp"
#include "flashclear/flops.hpp"
#include "test_support.hpp"

using namespace flashclear;

TEST(CountAttention, WorkedExample) {
  EXPECT_EQ(count_attention(64, 64, 32, 1), 536576u);
  EXPECT_EQ(count_attention(64, 64, 32, 1), 2ull * 64 * 64 * 32 + 3ull * 64 * 64 + 2ull * 64 * 64 * 32);
  EXPECT_EQ(count_attention(64, 0, 32, 1), 0u);
}

TEST(CountAttention, LinearInForegroundRowsAndSummedOverHeads) {
  const auto full = count_attention(256, 256, 64, 4);
  EXPECT_EQ(count_attention(256, 128, 64, 4) * 2, full);
  // Per-head width 16: scores and value mixing 2*n*n*16 each, softmax 3*n*n.
  EXPECT_EQ(full, 4ull * (2ull * 256 * 256 * 16 * 2 + 3ull * 256 * 256));
  EXPECT_THROW(count_attention(10, 11, 8, 1), ShapeError);
  EXPECT_THROW(count_attention(10, -1, 8, 1), ShapeError);
}

TEST(CountRun, StepRatiosAreExact) {
  const UNetConfig cfg;
  const auto r20 = count_run(cfg, 20), r4 = count_run(cfg, 4), r2 = count_run(cfg, 2);
  EXPECT_EQ(r20.total, 5 * r4.total);
  EXPECT_EQ(2 * r2.total, r4.total);
  EXPECT_DOUBLE_EQ(static_cast<double>(r20.total) / r4.total, 5.0);
  EXPECT_DOUBLE_EQ(static_cast<double>(r2.total) / r4.total, 0.5);
  EXPECT_EQ(r4.total, 4 * count_step(cfg));
}

TEST(CountRun, ReportBalances) {
  const auto cfg = fctest::tiny_config();
  const auto r = count_run(cfg, 3);
  EXPECT_TRUE(r.balanced());
  std::uint64_t steps = 0, entries = 0;
  for (auto s : r.step_totals) steps += s;
  for (const auto& e : r.entries) entries += e.count;
  EXPECT_EQ(steps, r.total);
  EXPECT_EQ(entries, r.total);
  EXPECT_EQ(r.sum(), r.total);
  EXPECT_EQ(r.sum("", "", 1), r.step_totals[1]);
  EXPECT_EQ(r.sum("mid") + r.sum("down.1") + r.sum("down.2") + r.sum("up.0") + r.sum("up.1") <= r.total, true);
  for (const auto& [layer, fr] : r.fg_fraction) {
    ASSERT_EQ(fr.size(), 3u) << layer;
    for (double f : fr) EXPECT_EQ(f, 1.0);
  }
}

TEST(CountRun, AllForegroundTraceCostsTheSame) {
  const UNetConfig cfg;
  CacheTrace trace;
  trace.steps.resize(4);
  for (const auto& id : attention_layer_ids()) trace.steps[3][id] = cfg.grid_of(id) * cfg.grid_of(id);
  EXPECT_EQ(count_run(cfg, 4, trace).total, count_run(cfg, 4).total);
}

TEST(CountRun, SavingsIdentityAndMonotoneCost) {
  const UNetConfig cfg;
  const auto dense = count_run(cfg, 4);
  Rng rng(3);
  for (int rep = 0; rep < 50; ++rep) {
    CacheTrace trace;
    trace.steps.resize(4);
    std::uint64_t saved = 0;
    for (const auto& id : attention_layer_ids()) {
      if (rng.uniform() < 0.3) continue;
      const int n = cfg.grid_of(id) * cfg.grid_of(id);
      const int nf = rng.uniform_int(0, n);
      trace.steps[3][id] = nf;
      const std::uint64_t full_rows = count_block_rows(cfg, id, n);
      saved += full_rows - count_block_rows(cfg, id, nf);
      // The row-dependent cost is proportional to the foreground count.
      EXPECT_EQ(count_block_rows(cfg, id, nf) * n, full_rows * nf) << id;
    }
    const auto cached = count_run(cfg, 4, trace);
    EXPECT_TRUE(cached.balanced());
    EXPECT_EQ(dense.total - cached.total, saved);
    for (int s = 0; s < 3; ++s) EXPECT_EQ(cached.step_totals[s], dense.step_totals[s]);
  }
  // Cost never increases as background grows, layer by layer.
  for (const auto& id : attention_layer_ids()) {
    const int n = cfg.grid_of(id) * cfg.grid_of(id);
    std::uint64_t prev = UINT64_MAX;
    for (int nf = n; nf >= 0; nf -= 7) {
      CacheTrace t;
      t.steps.resize(4);
      t.steps[3][id] = nf;
      const auto total = count_run(cfg, 4, t).total;
      EXPECT_LE(total, prev);
      prev = total;
    }
  }
}

TEST(CountRun, ForegroundFractionsReported) {
  const UNetConfig cfg;
  CacheTrace trace;
  trace.steps.resize(4);
  trace.steps[3]["up.1"] = 64;
  const auto r = count_run(cfg, 4, trace);
  EXPECT_DOUBLE_EQ(r.fg_fraction.at("up.1")[3], 0.25);
  EXPECT_DOUBLE_EQ(r.fg_fraction.at("up.1")[2], 1.0);
  EXPECT_DOUBLE_EQ(r.fg_fraction.at("mid")[3], 1.0);
}

TEST(CountRun, RejectsMismatchedTraces) {
  const UNetConfig cfg;
  CacheTrace t;
  t.steps.resize(5);
  EXPECT_THROW(count_run(cfg, 4, t), ShapeError);
  t.steps.resize(4);
  t.steps[1]["down.0"] = 3;
  EXPECT_THROW(count_run(cfg, 4, t), ShapeError);
  t.steps[1].clear();
  t.steps[1]["mid"] = 65;
  EXPECT_THROW(count_run(cfg, 4, t), ShapeError);
  EXPECT_THROW(count_run(cfg, 0), ConfigError);
}

TEST(FlopsReport, TextAndKeyValueOutputs) {
  const auto r = count_run(fctest::tiny_config(), 2);
  const std::string kv = r.to_key_values();
  EXPECT_NE(kv.find("total=" + std::to_string(r.total)), std::string::npos);
  EXPECT_FALSE(r.to_text().empty());
  EXPECT_EQ(r.to_key_values(), count_run(fctest::tiny_config(), 2).to_key_values());
}
