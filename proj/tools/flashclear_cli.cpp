// Command-line front end: gen-data, train-teacher, distill, infer, report.
//
// Exit codes: 0 success, 2 configuration error, 3 data or file error,
// 4 numeric failure, 1 anything else.

#include <CLI11.hpp>

#include <cstdio>
#include <iostream>

#include "flashclear/errors.hpp"
#include "flashclear/pipeline.hpp"

namespace fc = flashclear;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

struct CommonArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  bool quiet = false;
};

fc::RunConfig resolve_config(const CommonArgs& a) {
  fc::RunConfig cfg = a.config_path.empty() ? fc::RunConfig{} : fc::load_run_config(a.config_path);
  for (const auto& o : a.overrides) fc::apply_override(cfg, o);
  cfg.validate();
  return cfg;
}

fc::ProgressFn progress_for(const CommonArgs& a) {
  if (a.quiet) return {};
  return [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };
}

void add_common(CLI::App* cmd, CommonArgs& a) {
  cmd->add_option("-c,--config", a.config_path, "Run configuration file");
  cmd->add_option("-s,--set", a.overrides, "Override a config key (key=value), repeatable");
  cmd->add_flag("-q,--quiet", a.quiet, "Suppress progress output");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flashclear: few-step distilled object removal with attention-guided caching"};
  app.require_subcommand(1);

  CommonArgs common;

  // init-config
  std::string init_out;
  auto* init = app.add_subcommand("init-config", "Write a run configuration with every key spelled out");
  init->add_option("out", init_out, "Destination file")->required();
  init->add_option("-s,--set", common.overrides, "Override a config key (key=value), repeatable");
  bool init_quick = false;
  init->add_flag("--quick", init_quick, "Start from the reduced quick-run settings");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate the synthetic scene corpus");
  add_common(gen, common);
  std::string gen_out;
  std::uint64_t gen_seed = 0;
  int gen_count = -1;
  gen->add_option("--out", gen_out, "Write a single corpus file instead of the configured splits");
  gen->add_option("--seed", gen_seed, "First scene seed (with --out)");
  gen->add_option("--count", gen_count, "Number of scenes (with --out)");

  // train-teacher / distill
  bool resume = false;
  long long stop_at = -1;
  auto* teach = app.add_subcommand("train-teacher", "Train the multi-step teacher denoiser");
  add_common(teach, common);
  teach->add_flag("--resume", resume, "Continue from the saved training state");
  teach->add_option("--stop-at", stop_at, "Stop after this iteration (state is saved)");
  auto* dist = app.add_subcommand("distill", "Adversarially distil the few-step student");
  add_common(dist, common);
  dist->add_flag("--resume", resume, "Continue from the saved distillation state");
  dist->add_option("--stop-at", stop_at, "Stop after this iteration (state is saved)");

  // infer
  auto* inf = app.add_subcommand("infer", "Run inference on the held-out split");
  add_common(inf, common);
  fc::InferOptions iopt;
  std::string cache_flag = "off", fusion_flag;
  inf->add_option("--model", iopt.model, "student or teacher")->check(CLI::IsMember({"student", "teacher"}));
  inf->add_option("--steps", iopt.steps, "Sampling steps (default depends on the model)");
  inf->add_option("--cache", cache_flag, "Token caching on|off")->check(CLI::IsMember({"on", "off"}));
  inf->add_option("--fusion", fusion_flag, "Attention-derived fusion on|off (default from config)")
      ->check(CLI::IsMember({"on", "off"}));
  inf->add_flag("--dump-maps", iopt.dump_maps, "Record per-step attention maps");
  inf->add_flag("--save-images", iopt.save_images, "Write output images as PPM");
  inf->add_option("--tag", iopt.tag, "Name of the run log");

  // report
  auto* rep = app.add_subcommand("report", "Aggregate inference logs of a run directory");
  std::string run_dir;
  rep->add_option("run_dir", run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (init->parsed()) {
      fc::RunConfig cfg = init_quick ? fc::quick_run_config(0, "run") : fc::RunConfig{};
      for (const auto& o : common.overrides) fc::apply_override(cfg, o);
      cfg.validate();
      fc::save_run_config(cfg, init_out);
    } else if (gen->parsed()) {
      fc::RunConfig cfg = resolve_config(common);
      if (!gen_out.empty()) {
        if (gen_count < 0) throw fc::ConfigError("--count is required with --out");
        fc::write_corpus(fc::generate_corpus(gen_seed, gen_count, cfg.corpus), gen_out);
      } else {
        fc::cmd_gen_data(cfg);
      }
    } else if (teach->parsed()) {
      fc::cmd_train_teacher(resolve_config(common), resume, stop_at, progress_for(common));
    } else if (dist->parsed()) {
      fc::cmd_distill(resolve_config(common), resume, stop_at, progress_for(common));
    } else if (inf->parsed()) {
      iopt.cache = cache_flag == "on";
      if (!fusion_flag.empty()) iopt.fusion = fusion_flag == "on" ? 1 : 0;
      const fc::RunConfig cfg = resolve_config(common);
      const auto s = fc::cmd_infer(cfg, iopt, progress_for(common));
      std::printf("%s\tscenes=%d\tpsnr=%.4f\tpsnr_mask=%.4f\tcopy_psnr_mask=%.4f\tflops_per_scene=%llu\n",
                  s.tag.c_str(), s.scenes, s.mean_psnr, s.mean_psnr_mask, s.mean_copy_psnr_mask,
                  static_cast<unsigned long long>(s.flops_per_scene));
    } else if (rep->parsed()) {
      std::fputs(fc::cmd_report(run_dir).c_str(), stdout);
    }
  } catch (const fc::ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kExitConfig;
  } catch (const fc::ShapeError& e) {
    std::fprintf(stderr, "invalid input: %s\n", e.what());
    return kExitConfig;
  } catch (const fc::FormatError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const std::filesystem::filesystem_error& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const fc::NumericFault& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitOther;
  }
  return 0;
}
