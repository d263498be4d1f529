#include "flashclear/pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "flashclear/checkpoint.hpp"
#include "flashclear/errors.hpp"
#include "flashclear/metrics.hpp"
#include "flashclear/rng.hpp"
#include "flashclear/scheduler.hpp"

namespace flashclear {

namespace fs = std::filesystem;

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// ---------------------------------------------------------------------------
// Config fields

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, sep)) out.push_back(cur);
  if (!s.empty() && s.back() == sep) out.emplace_back();
  return out;
}

long long parse_int(const std::string& key, const std::string& v) {
  long long out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end) throw ConfigError("config key '" + key + "': not an integer: '" + v + "'");
  return out;
}

std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto r = std::from_chars(v.data(), end, out);
  if (r.ec != std::errc() || r.ptr != end)
    throw ConfigError("config key '" + key + "': not an unsigned integer: '" + v + "'");
  return out;
}

double parse_real(const std::string& key, const std::string& v) {
  try {
    std::size_t pos = 0;
    const double d = std::stod(v, &pos);
    if (pos != v.size()) throw std::invalid_argument("trailing");
    return d;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: '" + v + "'");
  }
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on") return true;
  if (v == "false" || v == "0" || v == "off") return false;
  throw ConfigError("config key '" + key + "': not a boolean: '" + v + "'");
}

struct Field {
  std::string key;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename Acc>
Field int_field(std::string key, Acc acc) {
  return {key, [acc](const RunConfig& c) { return std::to_string(acc(const_cast<RunConfig&>(c))); },
          [acc, key](RunConfig& c, const std::string& v) {
            using V = std::remove_reference_t<decltype(acc(c))>;
            acc(c) = static_cast<V>(parse_int(key, v));
          }};
}

template <typename Acc>
Field u64_field(std::string key, Acc acc) {
  return {key, [acc](const RunConfig& c) { return std::to_string(acc(const_cast<RunConfig&>(c))); },
          [acc, key](RunConfig& c, const std::string& v) { acc(c) = parse_u64(key, v); }};
}

template <typename Acc>
Field real_field(std::string key, Acc acc) {
  return {key, [acc](const RunConfig& c) { return format_double(acc(const_cast<RunConfig&>(c))); },
          [acc, key](RunConfig& c, const std::string& v) { acc(c) = parse_real(key, v); }};
}

template <typename Acc>
Field bool_field(std::string key, Acc acc) {
  return {key, [acc](const RunConfig& c) { return std::string(acc(const_cast<RunConfig&>(c)) ? "true" : "false"); },
          [acc, key](RunConfig& c, const std::string& v) { acc(c) = parse_bool(key, v); }};
}

template <typename Acc>
Field str_field(std::string key, Acc acc) {
  return {key, [acc](const RunConfig& c) { return acc(const_cast<RunConfig&>(c)); },
          [acc](RunConfig& c, const std::string& v) { acc(c) = v; }};
}

#define FC_ACC(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      u64_field("seed", FC_ACC(seed)),
      str_field("out_dir", FC_ACC(out_dir)),
      str_field("paths.train_corpus", FC_ACC(train_corpus)),
      str_field("paths.heldout_corpus", FC_ACC(heldout_corpus)),
      str_field("paths.teacher_checkpoint", FC_ACC(teacher_checkpoint)),
      str_field("paths.student_checkpoint", FC_ACC(student_checkpoint)),
      int_field("corpus.train_count", FC_ACC(train_count)),
      int_field("corpus.heldout_count", FC_ACC(heldout_count)),
      int_field("corpus.image_size", FC_ACC(corpus.image_size)),
      bool_field("corpus.circles", FC_ACC(corpus.circles)),
      bool_field("corpus.squares", FC_ACC(corpus.squares)),
      bool_field("corpus.triangles", FC_ACC(corpus.triangles)),
      real_field("corpus.radius_min", FC_ACC(corpus.radius_min)),
      real_field("corpus.radius_max", FC_ACC(corpus.radius_max)),
      real_field("corpus.shadow_prob", FC_ACC(corpus.shadow_prob)),
      real_field("corpus.shadow_strength_min", FC_ACC(corpus.shadow_strength_min)),
      real_field("corpus.shadow_strength_max", FC_ACC(corpus.shadow_strength_max)),
      int_field("corpus.shadow_dx_min", FC_ACC(corpus.shadow_dx_min)),
      int_field("corpus.shadow_dx_max", FC_ACC(corpus.shadow_dx_max)),
      int_field("corpus.shadow_dy_min", FC_ACC(corpus.shadow_dy_min)),
      int_field("corpus.shadow_dy_max", FC_ACC(corpus.shadow_dy_max)),
      bool_field("corpus.shadow_random_side", FC_ACC(corpus.shadow_random_side)),
      real_field("corpus.reflection_prob", FC_ACC(corpus.reflection_prob)),
      real_field("corpus.reflection_strength_min", FC_ACC(corpus.reflection_strength_min)),
      real_field("corpus.reflection_strength_max", FC_ACC(corpus.reflection_strength_max)),
      {"corpus.background",
       [](const RunConfig& c) {
         switch (c.corpus.background) {
           case BackgroundFamily::kGradient: return std::string("gradient");
           case BackgroundFamily::kStripes: return std::string("stripes");
           default: return std::string("mixed");
         }
       },
       [](RunConfig& c, const std::string& v) {
         if (v == "gradient") c.corpus.background = BackgroundFamily::kGradient;
         else if (v == "stripes") c.corpus.background = BackgroundFamily::kStripes;
         else if (v == "mixed") c.corpus.background = BackgroundFamily::kMixed;
         else throw ConfigError("corpus.background must be gradient, stripes or mixed");
       }},
      int_field("schedule.steps", FC_ACC(schedule_steps)),
      real_field("schedule.beta_start", FC_ACC(beta_start)),
      real_field("schedule.beta_end", FC_ACC(beta_end)),
      int_field("model.latent_size", FC_ACC(model.latent_size)),
      {"model.widths",
       [](const RunConfig& c) {
         return std::to_string(c.model.widths[0]) + "," + std::to_string(c.model.widths[1]) + "," +
                std::to_string(c.model.widths[2]);
       },
       [](RunConfig& c, const std::string& v) {
         const auto parts = split(v, ',');
         if (parts.size() != 3) throw ConfigError("model.widths needs three comma-separated values");
         for (int i = 0; i < 3; ++i) c.model.widths[i] = static_cast<int>(parse_int("model.widths", trim(parts[i])));
       }},
      int_field("model.attn_dim", FC_ACC(model.attn_dim)),
      int_field("model.heads", FC_ACC(model.heads)),
      int_field("model.groups", FC_ACC(model.groups)),
      int_field("model.ff_mult", FC_ACC(model.ff_mult)),
      int_field("model.time_freq_dim", FC_ACC(model.time_freq_dim)),
      int_field("model.time_dim", FC_ACC(model.time_dim)),
      int_field("model.cond_tokens", FC_ACC(model.cond_tokens)),
      int_field("model.cond_dim", FC_ACC(model.cond_dim)),
      int_field("model.cond_patch", FC_ACC(model.cond_patch)),
      int_field("model.cond_hidden", FC_ACC(model.cond_hidden)),
      str_field("model.map_layer", FC_ACC(model.map_layer)),
      int_field("teacher.iterations", FC_ACC(teacher.iterations)),
      int_field("teacher.batch", FC_ACC(teacher.batch)),
      real_field("teacher.lr", FC_ACC(teacher.lr)),
      int_field("teacher.warmup", FC_ACC(teacher.warmup)),
      real_field("teacher.final_lr_fraction", FC_ACC(teacher.final_lr_fraction)),
      real_field("teacher.grad_clip", FC_ACC(teacher.grad_clip)),
      real_field("teacher.mask_weight", FC_ACC(teacher.mask_weight)),
      int_field("distill.iterations", FC_ACC(distill.iterations)),
      int_field("distill.batch", FC_ACC(distill.batch)),
      real_field("distill.lr", FC_ACC(distill.lr)),
      real_field("distill.disc_lr", FC_ACC(distill.disc_lr)),
      int_field("distill.plan_steps", FC_ACC(distill.plan_steps)),
      real_field("distill.weights.diff", FC_ACC(distill.weights.diff)),
      real_field("distill.weights.lpips", FC_ACC(distill.weights.lpips)),
      real_field("distill.weights.gan", FC_ACC(distill.weights.gan)),
      real_field("distill.weights.mask", FC_ACC(distill.weights.mask)),
      {"distill.disc_mask",
       [](const RunConfig& c) {
         return std::string(c.distill.disc_mask == DiscMaskSource::kObjectEffect ? "object_effect" : "object");
       },
       [](RunConfig& c, const std::string& v) {
         if (v == "object_effect") c.distill.disc_mask = DiscMaskSource::kObjectEffect;
         else if (v == "object") c.distill.disc_mask = DiscMaskSource::kObject;
         else throw ConfigError("distill.disc_mask must be object_effect or object");
       }},
      str_field("distill.perceptual", FC_ACC(distill.perceptual)),
      int_field("checkpoint_every", FC_ACC(checkpoint_every)),
      int_field("infer.teacher_steps", FC_ACC(teacher_steps)),
      int_field("infer.student_steps", FC_ACC(student_steps)),
      int_field("infer.scenes", FC_ACC(infer_scenes)),
      {"cache.layers",
       [](const RunConfig& c) {
         std::string s;
         for (std::size_t i = 0; i < c.cache.layers.size(); ++i) s += (i ? "," : "") + c.cache.layers[i];
         return s;
       },
       [](RunConfig& c, const std::string& v) {
         c.cache.layers.clear();
         if (v.empty()) return;
         for (const auto& p : split(v, ',')) c.cache.layers.push_back(trim(p));
       }},
      int_field("cache.step", FC_ACC(cache.cached_step)),
      real_field("cache.quantile", FC_ACC(cache.policy.quantile)),
      int_field("cache.dilation", FC_ACC(cache.policy.dilation)),
      bool_field("cache.all_foreground", FC_ACC(cache.policy.all_foreground)),
      bool_field("cache.fusion", FC_ACC(cache.fusion)),
  };
  return f;
}

#undef FC_ACC

const Field& field_for(const std::string& key) {
  for (const auto& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::string RunConfig::to_text() const {
  std::ostringstream os;
  os << kRunConfigHeader << " " << kRunConfigVersion << "\n";
  for (const auto& f : fields()) os << f.key << "=" << f.get(*this) << "\n";
  return os.str();
}

bool operator==(const RunConfig& a, const RunConfig& b) { return a.to_text() == b.to_text(); }

void RunConfig::validate() const {
  corpus.validate();
  model.validate();
  if (train_count < 0 || heldout_count < 0) throw ConfigError("corpus counts must be non-negative");
  if (corpus.image_size != model.latent_size) throw ConfigError("corpus.image_size must equal model.latent_size");
  if (schedule_steps < 1) throw ConfigError("schedule.steps must be positive");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) throw ConfigError("invalid beta range");
  if (teacher.iterations < 0 || teacher.batch < 1) throw ConfigError("invalid teacher iteration or batch settings");
  if (!(teacher.lr > 0)) throw ConfigError("teacher.lr must be positive");
  if (distill.iterations < 0 || distill.batch < 1) throw ConfigError("invalid distill iteration or batch settings");
  if (!(distill.lr > 0 && distill.disc_lr > 0)) throw ConfigError("distill learning rates must be positive");
  if (distill.plan_steps < 1 || distill.plan_steps > schedule_steps) throw ConfigError("invalid distill.plan_steps");
  distill.weights.validate();
  if (distill.perceptual != "none" && distill.perceptual != "randfeat")
    throw ConfigError("distill.perceptual must be none or randfeat");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
  for (int s : {teacher_steps, student_steps})
    if (s < 1 || s > schedule_steps) throw ConfigError("inference step counts must lie in [1, schedule.steps]");
  cache.validate(student_steps);
  if (out_dir.empty()) throw ConfigError("out_dir must not be empty");
}

namespace {
fs::path resolve(const RunConfig& c, const std::string& p, const char* fallback) {
  return p.empty() ? fs::path(c.out_dir) / fallback : fs::path(p);
}
}  // namespace

fs::path RunConfig::path_train() const { return resolve(*this, train_corpus, "train.fcs"); }
fs::path RunConfig::path_heldout() const { return resolve(*this, heldout_corpus, "heldout.fcs"); }
fs::path RunConfig::path_teacher() const { return resolve(*this, teacher_checkpoint, "teacher.ckpt"); }
fs::path RunConfig::path_student() const { return resolve(*this, student_checkpoint, "student.ckpt"); }
fs::path RunConfig::path_teacher_state() const { return fs::path(out_dir) / "teacher.state"; }
fs::path RunConfig::path_distill_state() const { return fs::path(out_dir) / "distill.state"; }

std::uint64_t RunConfig::train_seed() const { return split_seed(seed, "corpus.train"); }
std::uint64_t RunConfig::heldout_seed() const { return split_seed(seed, "corpus.heldout"); }
std::uint64_t RunConfig::teacher_seed() const { return split_seed(seed, "teacher"); }
std::uint64_t RunConfig::distill_seed() const { return split_seed(seed, "distill"); }
std::uint64_t RunConfig::noise_seed() const { return split_seed(seed, "infer"); }

RunConfig parse_run_config(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  bool header = false;
  std::set<std::string> seen;
  RunConfig cfg;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    if (!header) {
      const std::string expect = std::string(kRunConfigHeader) + " ";
      if (t.rfind(expect, 0) != 0) throw ConfigError("config does not start with '" + std::string(kRunConfigHeader) + "'");
      const long long v = parse_int("version", trim(t.substr(expect.size())));
      if (v != kRunConfigVersion) throw ConfigError("unsupported config version " + std::to_string(v));
      header = true;
      continue;
    }
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError("config line " + std::to_string(lineno) + " is not key=value");
    const std::string key = trim(t.substr(0, eq));
    if (!seen.insert(key).second) throw ConfigError("config key '" + key + "' given twice");
    field_for(key).set(cfg, trim(t.substr(eq + 1)));
  }
  if (!header) throw ConfigError("empty config");
  return cfg;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

void save_run_config(const RunConfig& cfg, const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + path.string());
  out << cfg.to_text();
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not key=value");
  field_for(trim(assignment.substr(0, eq))).set(cfg, trim(assignment.substr(eq + 1)));
}

RunConfig quick_run_config(std::uint64_t seed, const std::string& out_dir) {
  RunConfig c;
  c.seed = seed;
  c.out_dir = out_dir;
  c.train_count = 16;
  c.heldout_count = 4;
  c.corpus.image_size = 16;
  c.corpus.radius_min = 2.0;
  c.corpus.radius_max = 3.5;
  c.corpus.shadow_dx_min = c.corpus.shadow_dy_min = 1;
  c.corpus.shadow_dx_max = c.corpus.shadow_dy_max = 2;
  c.model.latent_size = 16;
  c.model.widths = {8, 16, 16};
  c.model.attn_dim = 16;
  c.model.heads = 2;
  c.model.groups = 4;
  c.model.time_freq_dim = 16;
  c.model.time_dim = 32;
  c.model.cond_dim = 16;
  c.model.cond_hidden = 8;
  c.teacher.iterations = 6;
  c.teacher.batch = 2;
  c.teacher.warmup = 2;
  c.distill.iterations = 4;
  c.distill.batch = 2;
  c.checkpoint_every = 3;
  c.teacher_steps = 4;
  return c;
}

// ---------------------------------------------------------------------------
// Logs

namespace {

class TsvLog {
 public:
  TsvLog(const fs::path& path, bool append) : out_(path, append ? std::ios::app | std::ios::binary : std::ios::binary) {
    if (!out_) throw FormatError(FormatError::Kind::kIo, "cannot write log " + path.string());
  }
  template <typename... Args>
  void row(const std::string& tag, const Args&... fields) {
    out_ << tag;
    ((out_ << '\t' << cell(fields)), ...);
    out_ << '\n';
    out_.flush();
  }
  void config(const RunConfig& cfg) {
    for (const auto& f : fields()) row("config", f.key, f.get(cfg));
  }

 private:
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  static std::string cell(double v) { return format_double(v); }
  template <typename I, typename = std::enable_if_t<std::is_integral_v<I>>>
  static std::string cell(I v) {
    return std::to_string(v);
  }
  std::ofstream out_;
};

// Drops rows of `tag` whose second field (an iteration index) is `keep` or later.
void truncate_log(const fs::path& path, const std::string& tag, long long keep) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return;
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    const auto f = split(line, '\t');
    if (f.size() >= 2 && f[0] == tag && parse_int("log", f[1]) >= keep) continue;
    lines.push_back(line);
  }
  in.close();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  for (const auto& l : lines) out << l << '\n';
}

void write_atomic(const Checkpoint& c, const fs::path& path) {
  const fs::path tmp = path.string() + ".tmp";
  write_checkpoint(c, tmp);
  fs::rename(tmp, path);
}

std::vector<Scene> load_split(const fs::path& path, const RunConfig& cfg) {
  if (!fs::exists(path)) throw FormatError(FormatError::Kind::kIo, "corpus " + path.string() + " does not exist");
  auto scenes = read_corpus(path);
  for (const auto& s : scenes)
    if (s.height != cfg.model.latent_size || s.width != cfg.model.latent_size)
      throw ConfigError("corpus " + path.string() + " holds " + std::to_string(s.height) + "x" +
                        std::to_string(s.width) + " scenes but the model expects " +
                        std::to_string(cfg.model.latent_size));
  return scenes;
}

void require_model(const UNetConfig& found, const UNetConfig& expected, const fs::path& path) {
  if (!(found == expected)) throw ConfigError("checkpoint " + path.string() + " does not match the configured model");
}

NoiseSchedule schedule_of(const RunConfig& cfg) {
  return make_linear_schedule(cfg.schedule_steps, cfg.beta_start, cfg.beta_end);
}

void say(const ProgressFn& p, const std::string& s) {
  if (p) p(s);
}

}  // namespace

// ---------------------------------------------------------------------------
// Commands

void cmd_gen_data(const RunConfig& cfg) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  for (const auto& p : {cfg.path_train(), cfg.path_heldout()})
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
  write_corpus(generate_corpus(cfg.train_seed(), cfg.train_count, cfg.corpus), cfg.path_train());
  write_corpus(generate_corpus(cfg.heldout_seed(), cfg.heldout_count, cfg.corpus), cfg.path_heldout());
}

void cmd_train_teacher(const RunConfig& cfg, bool resume, long long stop_at, const ProgressFn& progress) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  const auto corpus = load_split(cfg.path_train(), cfg);
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  TeacherConfig tc = cfg.teacher;
  tc.seed = cfg.teacher_seed();
  const auto sched = schedule_of(cfg);
  const fs::path log_path = fs::path(cfg.out_dir) / "teacher.tsv";

  TeacherState state;
  if (resume && fs::exists(cfg.path_teacher_state())) {
    state = teacher_state_from_checkpoint(read_checkpoint(cfg.path_teacher_state()));
    require_model(state.model->config(), cfg.model, cfg.path_teacher_state());
    truncate_log(log_path, "teacher", state.iteration);
    say(progress, "resuming teacher at iteration " + std::to_string(state.iteration));
  } else {
    state = init_teacher(cfg.model, tc);
    TsvLog(log_path, false).config(cfg);
  }
  TsvLog log(log_path, true);
  const long long target = stop_at >= 0 ? std::min(stop_at, tc.iterations) : tc.iterations;
  auto on_step = [&](const TeacherMetrics& m) {
    log.row("teacher", m.iteration, m.loss, m.eps_mse, m.mask, m.grad_norm, teacher_lr(tc, m.iteration));
    if ((m.iteration + 1) % 50 == 0 || m.iteration + 1 == target)
      say(progress, "teacher " + std::to_string(m.iteration + 1) + "/" + std::to_string(tc.iterations) +
                        " loss " + format_double(m.loss));
  };
  while (state.iteration < target) {
    const long long chunk = cfg.checkpoint_every > 0 ? cfg.checkpoint_every : target;
    const long long next = std::min(target, (state.iteration / chunk + 1) * chunk);
    train_teacher(corpus, state, sched, tc, on_step, next);
    write_atomic(teacher_state_checkpoint(state, tc), cfg.path_teacher_state());
  }
  if (state.iteration == tc.iterations) {
    if (cfg.path_teacher().has_parent_path()) fs::create_directories(cfg.path_teacher().parent_path());
    save_denoiser(*state.model, cfg.path_teacher());
  }
}

void cmd_distill(const RunConfig& cfg, bool resume, long long stop_at, const ProgressFn& progress) {
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  const auto corpus = load_split(cfg.path_train(), cfg);
  if (corpus.empty()) throw ConfigError("training corpus is empty");
  DistillConfig dc = cfg.distill;
  dc.seed = cfg.distill_seed();
  const auto sched = schedule_of(cfg);
  const fs::path log_path = fs::path(cfg.out_dir) / "distill.tsv";

  DistillState state;
  if (resume && fs::exists(cfg.path_distill_state())) {
    state = distill_state_from_checkpoint(read_checkpoint(cfg.path_distill_state()));
    require_model(state.student->config(), cfg.model, cfg.path_distill_state());
    say(progress, "resuming distillation at iteration " + std::to_string(state.iteration));
  } else {
    if (!fs::exists(cfg.path_teacher()))
      throw FormatError(FormatError::Kind::kIo, "teacher checkpoint " + cfg.path_teacher().string() + " missing");
    const auto teacher = load_denoiser(cfg.path_teacher());
    require_model(teacher->config(), cfg.model, cfg.path_teacher());
    state = init_distill(*teacher, dc);
  }
  // The log is rebuilt from the recorded history so a resumed run writes
  // the same bytes as an uninterrupted one.
  {
    TsvLog fresh(log_path, false);
    fresh.config(cfg);
  }
  TsvLog log(log_path, true);
  auto emit = [&](const DistillMetrics& m) {
    log.row("distill", m.iteration, m.d_loss, m.d_real, m.d_fake, m.g_total, m.g_diff, m.g_lpips, m.g_gan, m.g_mask,
            m.lpips_enabled ? "lpips" : "no-lpips");
  };
  for (const auto& m : state.history) emit(m);
  const long long target = stop_at >= 0 ? std::min(stop_at, dc.iterations) : dc.iterations;
  auto on_step = [&](const DistillMetrics& m) {
    emit(m);
    if ((m.iteration + 1) % 25 == 0 || m.iteration + 1 == target)
      say(progress, "distill " + std::to_string(m.iteration + 1) + "/" + std::to_string(dc.iterations) + " g " +
                        format_double(m.g_total) + " d " + format_double(m.d_loss));
  };
  while (state.iteration < target) {
    const long long chunk = cfg.checkpoint_every > 0 ? cfg.checkpoint_every : target;
    const long long next = std::min(target, (state.iteration / chunk + 1) * chunk);
    run_distillation(corpus, state, sched, dc, on_step, next);
    write_atomic(distill_state_checkpoint(state, dc), cfg.path_distill_state());
  }
  if (state.iteration == dc.iterations) {
    if (cfg.path_student().has_parent_path()) fs::create_directories(cfg.path_student().parent_path());
    save_denoiser(*state.student, cfg.path_student());
  }
}

std::string infer_tag(const InferOptions& opt, const RunConfig& cfg) {
  if (!opt.tag.empty()) return opt.tag;
  const int steps = opt.steps > 0 ? opt.steps : (opt.model == "teacher" ? cfg.teacher_steps : cfg.student_steps);
  std::string tag = opt.model + "-s" + std::to_string(steps) + (opt.cache ? "-cache" : "-plain");
  if (opt.fusion == 0) tag += "-nofuse";
  if (opt.fusion == 1) tag += "-fuse";
  return tag;
}

InferSummary cmd_infer(const RunConfig& cfg, const InferOptions& opt, const ProgressFn& progress) {
  if (opt.model != "student" && opt.model != "teacher") throw ConfigError("--model must be student or teacher");
  const int steps = opt.steps > 0 ? opt.steps : (opt.model == "teacher" ? cfg.teacher_steps : cfg.student_steps);
  RunConfig run = cfg;
  run.student_steps = std::max(run.student_steps, 1);
  run.validate();
  CacheConfig cc = cfg.cache;
  if (!opt.cache) cc.layers.clear();
  if (opt.fusion >= 0) cc.fusion = opt.fusion == 1;
  cc.validate(steps);

  const fs::path ckpt = opt.model == "teacher" ? cfg.path_teacher() : cfg.path_student();
  if (!fs::exists(ckpt)) throw FormatError(FormatError::Kind::kIo, "checkpoint " + ckpt.string() + " missing");
  const auto weights = load_denoiser(ckpt);
  require_model(weights->config(), cfg.model, ckpt);
  const auto model = Denoiser<double>::from(*weights);
  auto scenes = load_split(cfg.path_heldout(), cfg);
  if (cfg.infer_scenes >= 0 && cfg.infer_scenes < static_cast<int>(scenes.size()))
    scenes.resize(static_cast<std::size_t>(cfg.infer_scenes));
  const auto sched = schedule_of(cfg);
  const auto plan = make_timestep_plan(steps, cfg.schedule_steps);
  const PerceptualMetric perceptual(make_perceptual_backend(cfg.distill.perceptual));

  InferSummary sum;
  sum.tag = infer_tag(opt, cfg);
  fs::create_directories(cfg.out_dir);
  const fs::path base = fs::path(cfg.out_dir) / ("infer-" + sum.tag);
  TsvLog log(base.string() + ".tsv", false);
  log.config(cfg);
  log.row("infer", "model", opt.model);
  log.row("infer", "steps", steps);
  log.row("infer", "cache", opt.cache ? "on" : "off");
  log.row("infer", "fusion", cc.fusion ? "on" : "off");
  std::string plan_str;
  for (std::size_t i = 0; i < plan.taus.size(); ++i) plan_str += (i ? "," : "") + std::to_string(plan.taus[i]);
  log.row("infer", "plan", plan_str);

  std::unique_ptr<TsvLog> maps;
  if (opt.dump_maps) maps = std::make_unique<TsvLog>(base.string() + ".maps.tsv", false);
  const fs::path image_dir = fs::path(cfg.out_dir) / "images" / sum.tag;
  if (opt.save_images) fs::create_directories(image_dir);

  const int fine = cfg.model.grid_of(cfg.model.map_layer);
  std::vector<SceneMetrics> rows;
  std::uint64_t flops_sum = 0;
  int beats = 0;
  double copy_sum = 0.0;
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    const Scene& sc = scenes[i];
    const InferenceResult r = run_cached_inference(*model, sc, plan, cc, sched, cfg.noise_seed());
    SceneMetrics m;
    m.seed = sc.seed;
    m.psnr = psnr(r.image, sc.gt_background);
    m.psnr_mask = psnr_mask(r.image, sc.gt_background, sc.m_obj_eff);
    m.perceptual = perceptual.evaluate(r.image, sc.gt_background, sc.height, sc.width, PerceptualRegion::kFull);
    m.perceptual_local = perceptual.evaluate(r.image, sc.gt_background, sc.height, sc.width,
                                             PerceptualRegion::kMaskedCrop, &sc.m_obj_eff);
    const double copy = psnr_mask(sc.image, sc.gt_background, sc.m_obj_eff);
    copy_sum += copy;
    if (m.psnr_mask > copy) ++beats;
    flops_sum += r.flops.total;
    log.row("scene", static_cast<long long>(i), sc.seed, m.psnr, m.psnr_mask, copy, to_string(m.perceptual.status),
            m.perceptual.value, to_string(m.perceptual_local.status), m.perceptual_local.value, r.flops.total,
            r.audit.total_checked(), r.audit.total_mismatches());
    for (const auto& [layer, mask] : r.masks)
      log.row("fg", static_cast<long long>(i), layer, mask.n_foreground, mask.size());
    sum.cache_mismatches += r.audit.total_mismatches();
    sum.cache_rows_checked += r.audit.total_checked();
    if (maps)
      for (const auto& h : r.history) {
        std::string vals;
        for (std::size_t k = 0; k < h.map.size(); ++k) vals += (k ? "," : "") + format_double(h.map[k]);
        maps->row("map", static_cast<long long>(i), h.step, h.tau, fine, vals);
      }
    if (opt.save_images) write_ppm(r.image, sc.height, sc.width, image_dir / ("scene" + std::to_string(i) + ".ppm"));
    if (i == 0) {
      std::ofstream fl(base.string() + ".flops.txt", std::ios::binary);
      fl << r.flops.to_text();
    }
    sum.images.push_back(r.image);
    rows.push_back(std::move(m));
    say(progress, sum.tag + " scene " + std::to_string(i + 1) + "/" + std::to_string(scenes.size()));
  }
  const MetricReport rep = aggregate(rows);
  sum.scenes = static_cast<int>(scenes.size());
  sum.mean_psnr = rep.mean_psnr;
  sum.mean_psnr_mask = rep.mean_psnr_mask;
  sum.mean_copy_psnr_mask = scenes.empty() ? 0.0 : copy_sum / static_cast<double>(scenes.size());
  sum.beats_copy_fraction = scenes.empty() ? 0.0 : static_cast<double>(beats) / static_cast<double>(scenes.size());
  sum.flops_per_scene = scenes.empty() ? 0 : flops_sum / scenes.size();
  log.row("summary", sum.scenes, sum.mean_psnr, sum.mean_psnr_mask, sum.mean_copy_psnr_mask, sum.beats_copy_fraction,
          flops_sum, count_run(cfg.model, steps).total * static_cast<std::uint64_t>(scenes.size()),
          rep.mean_perceptual ? format_double(*rep.mean_perceptual) : std::string("absent"),
          rep.mean_perceptual_local ? format_double(*rep.mean_perceptual_local) : std::string("absent"),
          sum.cache_rows_checked, sum.cache_mismatches);
  return sum;
}

// ---------------------------------------------------------------------------
// Report

void write_pgm(const std::vector<double>& map, int grid, int scale, const fs::path& path) {
  if (grid < 1 || scale < 1 || map.size() != static_cast<std::size_t>(grid) * grid)
    throw ShapeError("write_pgm: map does not match its grid");
  double mx = 0.0;
  for (double v : map) mx = std::max(mx, v);
  const int side = grid * scale;
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + path.string());
  out << "P5\n" << side << " " << side << "\n255\n";
  for (int y = 0; y < side; ++y)
    for (int x = 0; x < side; ++x) {
      const double v = mx > 0 ? map[static_cast<std::size_t>(y / scale) * grid + x / scale] / mx : 0.0;
      out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
    }
}

void write_ppm(const std::vector<float>& img, int height, int width, const fs::path& path) {
  if (img.size() != static_cast<std::size_t>(height) * width * 3) throw ShapeError("write_ppm: image size mismatch");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError(FormatError::Kind::kIo, "cannot write " + path.string());
  out << "P6\n" << width << " " << height << "\n255\n";
  for (float v : img) out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f))));
}

std::string cmd_report(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw FormatError(FormatError::Kind::kIo, "run directory " + run_dir.string() + " missing");
  std::vector<fs::path> logs;
  for (const auto& e : fs::directory_iterator(run_dir)) {
    const std::string name = e.path().filename().string();
    if (name.rfind("infer-", 0) == 0 && name.size() > 10 && name.substr(name.size() - 4) == ".tsv" &&
        name.find(".maps.tsv") == std::string::npos)
      logs.push_back(e.path());
  }
  std::sort(logs.begin(), logs.end());
  if (logs.empty()) return "no runs in " + run_dir.string() + "\n";

  std::ostringstream table;
  TsvLog out(run_dir / "report.tsv", false);
  char line[256];
  std::snprintf(line, sizeof(line), "%-24s %6s %10s %10s %10s %8s %18s %10s\n", "run", "scenes", "psnr", "psnr_mask",
                "copy_mask", "beats", "flops_total", "mismatch");
  table << line;
  for (const auto& p : logs) {
    const std::string tag = p.filename().string().substr(6, p.filename().string().size() - 10);
    std::ifstream in(p, std::ios::binary);
    std::string l;
    std::vector<std::string> summary;
    while (std::getline(in, l)) {
      auto f = split(l, '\t');
      if (!f.empty() && f[0] == "summary") summary = f;
    }
    if (summary.size() < 12) throw FormatError(FormatError::Kind::kMalformed, "log " + p.string() + " has no summary");
    out.row("run", tag, summary[1], summary[2], summary[3], summary[4], summary[5], summary[6], summary[7], summary[8],
            summary[9], summary[11]);
    std::snprintf(line, sizeof(line), "%-24s %6s %10.4f %10.4f %10.4f %8.4f %18s %10s\n", tag.c_str(),
                  summary[1].c_str(), std::stod(summary[2]), std::stod(summary[3]), std::stod(summary[4]),
                  std::stod(summary[5]), summary[6].c_str(), summary[11].c_str());
    table << line;

    const fs::path maps = run_dir / ("infer-" + tag + ".maps.tsv");
    if (fs::exists(maps)) {
      const fs::path dir = run_dir / "maps" / tag;
      fs::create_directories(dir);
      std::ifstream mi(maps, std::ios::binary);
      while (std::getline(mi, l)) {
        const auto f = split(l, '\t');
        if (f.size() != 6 || f[0] != "map") continue;
        std::vector<double> vals;
        for (const auto& v : split(f[5], ',')) vals.push_back(parse_real("map", v));
        const int grid = static_cast<int>(parse_int("map", f[4]));
        write_pgm(vals, grid, 8, dir / ("scene" + f[1] + "_step" + f[2] + ".pgm"));
      }
    }
  }
  return table.str();
}

}  // namespace flashclear
