#pragma once

// Run configuration and the end-to-end commands behind the command line:
// corpus generation, teacher training, distillation, inference and report
// aggregation. Every artifact a run writes is a pure function of its
// RunConfig and the corpus.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "flashclear/fpac.hpp"
#include "flashclear/model.hpp"
#include "flashclear/rad.hpp"
#include "flashclear/synthgen.hpp"

namespace flashclear {

inline constexpr const char* kRunConfigHeader = "flashclear-run-config";
inline constexpr int kRunConfigVersion = 1;

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "run";
  // Empty paths resolve to fixed names inside out_dir.
  std::string train_corpus;
  std::string heldout_corpus;
  std::string teacher_checkpoint;
  std::string student_checkpoint;

  int train_count = 512;
  int heldout_count = 64;
  CorpusConfig corpus;

  int schedule_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;

  UNetConfig model;
  TeacherConfig teacher;
  DistillConfig distill;
  // Iterations between resumable state checkpoints (0 = only at the end).
  long long checkpoint_every = 100;

  int teacher_steps = 20;
  int student_steps = 4;
  // Held-out scenes used by infer (-1 = all).
  int infer_scenes = -1;
  CacheConfig cache;

  // Serialises every field; parse_run_config(to_text()) is the identity.
  std::string to_text() const;
  void validate() const;

  std::filesystem::path path_train() const;
  std::filesystem::path path_heldout() const;
  std::filesystem::path path_teacher() const;
  std::filesystem::path path_student() const;
  std::filesystem::path path_teacher_state() const;
  std::filesystem::path path_distill_state() const;

  // Subsystem seeds derived from the root seed.
  std::uint64_t train_seed() const;
  std::uint64_t heldout_seed() const;
  std::uint64_t teacher_seed() const;
  std::uint64_t distill_seed() const;
  std::uint64_t noise_seed() const;

  friend bool operator==(const RunConfig&, const RunConfig&);
};

RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& cfg, const std::filesystem::path& path);
// Applies one "key=value" override.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Reduced settings for quick end-to-end runs (tests, smoke checks).
RunConfig quick_run_config(std::uint64_t seed, const std::string& out_dir);

// Doubles are written with 17 significant digits so they round-trip.
std::string format_double(double v);

using ProgressFn = std::function<void(const std::string&)>;

// Writes the train and held-out corpora named by the config.
void cmd_gen_data(const RunConfig& cfg);

// Trains (or resumes) the teacher; writes the state checkpoint, the final
// denoiser and teacher.tsv.
void cmd_train_teacher(const RunConfig& cfg, bool resume, long long stop_at = -1,
                       const ProgressFn& progress = {});

// Distils the student from the teacher checkpoint; resumable.
void cmd_distill(const RunConfig& cfg, bool resume, long long stop_at = -1, const ProgressFn& progress = {});

struct InferOptions {
  std::string model = "student";  // "student" or "teacher"
  int steps = 0;                  // 0 = default for the model
  bool cache = false;
  bool dump_maps = false;
  bool save_images = false;
  int fusion = -1;  // -1 follows the config, 0 off, 1 on
  std::string tag;  // log name; derived from the options when empty
};

struct InferSummary {
  std::string tag;
  int scenes = 0;
  double mean_psnr = 0.0;
  double mean_psnr_mask = 0.0;
  double mean_copy_psnr_mask = 0.0;
  double beats_copy_fraction = 0.0;
  std::uint64_t flops_per_scene = 0;
  long long cache_mismatches = 0;
  long long cache_rows_checked = 0;
  std::vector<std::vector<float>> images;  // per-scene outputs (HWC)
};

std::string infer_tag(const InferOptions& opt, const RunConfig& cfg);

// Runs inference over the held-out split and writes infer-<tag>.tsv
// (plus maps and images when requested).
InferSummary cmd_infer(const RunConfig& cfg, const InferOptions& opt, const ProgressFn& progress = {});

// Aggregates every infer-*.tsv in a run directory into report.tsv and
// emits per-step attention maps as PGM images. Returns the printed table;
// an empty directory yields a "no runs" message.
std::string cmd_report(const std::filesystem::path& run_dir);

// Grayscale PGM of a grid x grid map scaled by its maximum, upsampled by
// `scale` pixels per token.
void write_pgm(const std::vector<double>& map, int grid, int scale, const std::filesystem::path& path);
// Binary PPM of an HWC image in [0,1].
void write_ppm(const std::vector<float>& img, int height, int width, const std::filesystem::path& path);

}  // namespace flashclear
