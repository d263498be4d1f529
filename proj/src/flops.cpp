#include "flashclear/flops.hpp"

#include <cstdio>
#include <sstream>

#include "flashclear/errors.hpp"

namespace flashclear {

namespace {

using u64 = std::uint64_t;

u64 conv_cost(int cin, int cout, int k, int hout, int wout) {
  return 2ull * cin * k * k * cout * hout * wout;
}
u64 linear_cost(int rows, int in, int out) { return 2ull * rows * in * out; }
u64 elementwise4(u64 n) { return 4ull * n; }

class Counter {
 public:
  Counter(FlopsReport& rep, int step) : rep_(rep), step_(step) {}
  void add(const std::string& layer, const std::string& op, u64 count) {
    rep_.entries.push_back({step_, layer, op, count});
  }

 private:
  FlopsReport& rep_;
  int step_;
};

void count_res(Counter& c, const UNetConfig& cfg, const std::string& name, int cin, int cout, int hw) {
  const u64 n_in = static_cast<u64>(cin) * hw * hw, n_out = static_cast<u64>(cout) * hw * hw;
  c.add(name + ".norm1", "norm", elementwise4(n_in));
  c.add(name + ".act1", "act", elementwise4(n_in));
  c.add(name + ".conv1", "conv", conv_cost(cin, cout, 3, hw, hw));
  c.add(name + ".temb", "linear", linear_cost(1, cfg.time_dim, cout));
  c.add(name + ".temb_add", "add", n_out);
  c.add(name + ".norm2", "norm", elementwise4(n_out));
  c.add(name + ".act2", "act", elementwise4(n_out));
  c.add(name + ".conv2", "conv", conv_cost(cout, cout, 3, hw, hw));
  if (cin != cout) c.add(name + ".skip", "conv", conv_cost(cin, cout, 1, hw, hw));
  c.add(name + ".residual", "add", n_out);
}

void count_attn(Counter& c, const UNetConfig& cfg, const std::string& id, int n_f) {
  const int g = cfg.grid_of(id), ch = cfg.width_of(id), n = g * g, d = cfg.attn_dim;
  c.add(id + ".attn.norm", "norm", elementwise4(static_cast<u64>(ch) * n));
  c.add(id + ".attn.proj_in", "linear", linear_cost(n, ch, d));
  c.add(id, "attn.kv", count_block_kv(cfg, id));
  c.add(id, "attn.block", count_block_rows(cfg, id, n_f));
  c.add(id + ".attn.proj_out", "linear", linear_cost(n, d, ch));
  c.add(id + ".attn.residual", "add", static_cast<u64>(ch) * n);
}

void count_one_step(FlopsReport& rep, const UNetConfig& cfg, int step, const std::map<std::string, int>& fg) {
  Counter c(rep, step);
  const int s = cfg.latent_size, w0 = cfg.widths[0], w1 = cfg.widths[1], w2 = cfg.widths[2];
  auto nf = [&](const std::string& id) {
    auto it = fg.find(id);
    return it == fg.end() ? cfg.grid_of(id) * cfg.grid_of(id) : it->second;
  };
  c.add("time.l1", "linear", linear_cost(1, cfg.time_freq_dim, cfg.time_dim));
  c.add("time.act1", "act", elementwise4(cfg.time_dim));
  c.add("time.l2", "linear", linear_cost(1, cfg.time_dim, cfg.time_dim));
  c.add("time.act2", "act", elementwise4(cfg.time_dim));
  c.add("conv_in", "conv", conv_cost(cfg.input_channels(), w0, 3, s, s));
  count_res(c, cfg, "down.0.res", w0, w0, s);
  c.add("down.0.down", "conv", conv_cost(w0, w0, 3, s / 2, s / 2));
  count_res(c, cfg, "down.1.res", w0, w1, s / 2);
  count_attn(c, cfg, "down.1", nf("down.1"));
  c.add("down.1.down", "conv", conv_cost(w1, w1, 3, s / 4, s / 4));
  count_res(c, cfg, "down.2.res", w1, w2, s / 4);
  count_attn(c, cfg, "down.2", nf("down.2"));
  count_res(c, cfg, "mid.res", w2, w2, s / 4);
  count_attn(c, cfg, "mid", nf("mid"));
  count_res(c, cfg, "up.0.res", 2 * w2, w2, s / 4);
  count_attn(c, cfg, "up.0", nf("up.0"));
  c.add("up.0.up", "conv", conv_cost(w2, w1, 3, s / 2, s / 2));
  count_res(c, cfg, "up.1.res", 2 * w1, w1, s / 2);
  count_attn(c, cfg, "up.1", nf("up.1"));
  c.add("up.1.up", "conv", conv_cost(w1, w0, 3, s, s));
  count_res(c, cfg, "up.2.res", 2 * w0, w0, s);
  c.add("out.norm", "norm", elementwise4(static_cast<u64>(w0) * s * s));
  c.add("out.act", "act", elementwise4(static_cast<u64>(w0) * s * s));
  c.add("out.conv", "conv", conv_cost(w0, cfg.latent_channels, 3, s, s));
}

}  // namespace

u64 count_attention(int n, int n_f, int d, int heads) {
  if (n < 0 || d < 1 || heads < 1) throw ShapeError("count_attention: invalid dimensions");
  if (n_f < 0 || n_f > n) throw ShapeError("count_attention: foreground count outside [0, N]");
  const u64 nf = static_cast<u64>(n_f), nn = static_cast<u64>(n);
  return 2ull * nf * nn * d + 3ull * heads * nf * nn + 2ull * nf * nn * d;
}

u64 count_block_rows(const UNetConfig& cfg, const std::string& layer, int n_f) {
  const int g = cfg.grid_of(layer), n = g * g, d = cfg.attn_dim, dff = d * cfg.ff_mult, k = cfg.cond_tokens;
  if (n_f < 0 || n_f > n) throw ShapeError("foreground count outside the token grid of " + layer);
  const u64 per_row = linear_cost(1, d, d)          // q
                      + linear_cost(1, d, d)        // o
                      + d                           // residual
                      + elementwise4(d)             // ln2
                      + linear_cost(1, d, d)        // cross q
                      + linear_cost(1, d, d)        // cross o
                      + d                           // residual
                      + elementwise4(d)             // ln3
                      + linear_cost(1, d, dff)      // ff1
                      + elementwise4(dff)           // gelu
                      + linear_cost(1, dff, d)      // ff2
                      + d;                          // residual
  return per_row * n_f + count_attention(n, n_f, d, cfg.heads) +
         // cross-attention over the condition tokens
         static_cast<u64>(n_f) * (4ull * k * d + 3ull * cfg.heads * k);
}

u64 count_block_kv(const UNetConfig& cfg, const std::string& layer) {
  const int g = cfg.grid_of(layer), n = g * g, d = cfg.attn_dim;
  return elementwise4(static_cast<u64>(n) * d) + 2 * linear_cost(n, d, d) +
         2 * linear_cost(cfg.cond_tokens, cfg.cond_dim, d);
}

FlopsReport count_run(const UNetConfig& cfg, int n_steps, const CacheTrace& trace) {
  cfg.validate();
  if (n_steps < 1) throw ConfigError("count_run needs at least one step");
  if (!trace.steps.empty() && static_cast<int>(trace.steps.size()) != n_steps)
    throw ShapeError("cache trace has " + std::to_string(trace.steps.size()) + " steps, run has " +
                     std::to_string(n_steps));
  FlopsReport rep;
  static const std::map<std::string, int> kDense;
  for (int s = 0; s < n_steps; ++s) {
    const auto& fg = trace.steps.empty() ? kDense : trace.steps[s];
    for (const auto& [id, n_f] : fg) {
      if (!is_attention_layer(id)) throw ShapeError("cache trace names unknown layer '" + id + "'");
      const int n = cfg.grid_of(id) * cfg.grid_of(id);
      if (n_f < 0 || n_f > n) throw ShapeError("cache trace foreground count out of range for " + id);
    }
    const std::size_t first = rep.entries.size();
    count_one_step(rep, cfg, s, fg);
    u64 sub = 0;
    for (std::size_t i = first; i < rep.entries.size(); ++i) sub += rep.entries[i].count;
    rep.step_totals.push_back(sub);
    rep.total += sub;
    for (const auto& id : attention_layer_ids()) {
      const int n = cfg.grid_of(id) * cfg.grid_of(id);
      auto it = fg.find(id);
      rep.fg_fraction[id].push_back(it == fg.end() ? 1.0 : static_cast<double>(it->second) / n);
    }
  }
  return rep;
}

u64 count_step(const UNetConfig& cfg) { return count_run(cfg, 1).total; }

u64 FlopsReport::sum(const std::string& layer, const std::string& op, int step) const {
  u64 s = 0;
  for (const auto& e : entries)
    if ((layer.empty() || e.layer == layer) && (op.empty() || e.op == op) && (step < 0 || e.step == step))
      s += e.count;
  return s;
}

bool FlopsReport::balanced() const {
  u64 from_steps = 0, from_entries = 0;
  for (u64 v : step_totals) from_steps += v;
  for (const auto& e : entries) from_entries += e.count;
  if (from_steps != total || from_entries != total) return false;
  for (std::size_t s = 0; s < step_totals.size(); ++s)
    if (sum("", "", static_cast<int>(s)) != step_totals[s]) return false;
  return true;
}

std::string FlopsReport::to_text() const {
  std::ostringstream os;
  char line[160];
  std::snprintf(line, sizeof(line), "%-6s %-10s %20s  %s\n", "step", "layer", "attn.block", "fg_fraction");
  os << line;
  for (std::size_t s = 0; s < step_totals.size(); ++s)
    for (const auto& id : attention_layer_ids()) {
      std::snprintf(line, sizeof(line), "%-6zu %-10s %20llu  %.6f\n", s, id.c_str(),
                    static_cast<unsigned long long>(sum(id, "attn.block", static_cast<int>(s))),
                    fg_fraction.at(id)[s]);
      os << line;
    }
  for (std::size_t s = 0; s < step_totals.size(); ++s) {
    std::snprintf(line, sizeof(line), "step %zu total %llu\n", s, static_cast<unsigned long long>(step_totals[s]));
    os << line;
  }
  std::snprintf(line, sizeof(line), "run total %llu FLOPs (%.6f GFLOPs)\n", static_cast<unsigned long long>(total),
                static_cast<double>(total) * 1e-9);
  os << line;
  return os.str();
}

std::string FlopsReport::to_key_values() const {
  std::ostringstream os;
  os << "flops.total=" << total << "\n";
  os << "flops.steps=" << step_totals.size() << "\n";
  for (std::size_t s = 0; s < step_totals.size(); ++s) os << "flops.step." << s << "=" << step_totals[s] << "\n";
  for (const auto& [id, fr] : fg_fraction)
    for (std::size_t s = 0; s < fr.size(); ++s) {
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.17g", fr[s]);
      os << "fg_fraction." << id << "." << s << "=" << buf << "\n";
    }
  return os.str();
}

}  // namespace flashclear
