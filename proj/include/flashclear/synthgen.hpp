#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace flashclear {

// One synthetic object-removal sample. Images are H x W x 3 interleaved
// float32 in [0,1]; masks are H x W bytes holding 0 or 1.
struct Scene {
  int height = 0;
  int width = 0;
  std::uint64_t seed = 0;
  std::vector<float> image;
  std::vector<float> gt_background;
  std::vector<std::uint8_t> m_obj;
  std::vector<std::uint8_t> m_obj_eff;

  int pixels() const { return height * width; }
  friend bool operator==(const Scene&, const Scene&) = default;
};

enum class ShapeKind { kCircle, kSquare, kTriangle };
enum class BackgroundFamily { kGradient, kStripes, kMixed };

struct CorpusConfig {
  int image_size = 32;
  // Shapes drawn uniformly from the enabled kinds.
  bool circles = true;
  bool squares = true;
  bool triangles = true;
  double radius_min = 3.0;
  double radius_max = 6.0;

  double shadow_prob = 0.7;
  double shadow_strength_min = 0.35;
  double shadow_strength_max = 0.6;
  // Offsets in pixels; a range of [lo, hi] with lo == hi pins the value.
  int shadow_dx_min = 2;
  int shadow_dx_max = 4;
  int shadow_dy_min = 2;
  int shadow_dy_max = 4;
  // When set, the horizontal shadow direction is mirrored with probability 1/2.
  bool shadow_random_side = true;

  double reflection_prob = 0.35;
  double reflection_strength_min = 0.3;
  double reflection_strength_max = 0.5;

  BackgroundFamily background = BackgroundFamily::kMixed;

  // The denoiser halves the grid twice; sizes must be multiples of this.
  static constexpr int kGridFactor = 4;

  void validate() const;
};

// Parameters from which a scene is rasterised. Exposed so tests can rebuild
// the stencils with an independent rasteriser.
struct SceneLayout {
  ShapeKind shape = ShapeKind::kCircle;
  double cx = 0, cy = 0, radius = 0;
  std::array<float, 3> color{};

  bool stripes = false;
  std::array<float, 3> base{};
  std::array<float, 3> grad_x{};
  std::array<float, 3> grad_y{};
  std::array<float, 3> stripe_amp{};
  double stripe_freq = 0, stripe_angle = 0, stripe_phase = 0;

  bool shadow = false;
  int shadow_dx = 0, shadow_dy = 0;
  double shadow_strength = 0;

  bool reflection = false;
  double reflection_strength = 0;
};

SceneLayout sample_layout(std::uint64_t seed, const CorpusConfig& cfg);

// Pixel-centre inside test for the object shape.
bool inside_shape(const SceneLayout& layout, int x, int y);

Scene generate_scene(std::uint64_t seed, const CorpusConfig& cfg);

std::vector<Scene> generate_corpus(std::uint64_t first_seed, int count, const CorpusConfig& cfg);

// Binary corpus container: "FCS1", u32 count, then per record u64 seed,
// u16 H, u16 W, f32 image, f32 background, bit-packed m_obj and m_obj_eff.
void write_corpus(const std::vector<Scene>& scenes, const std::filesystem::path& path);
std::vector<Scene> read_corpus(const std::filesystem::path& path);

std::size_t corpus_record_bytes(int height, int width);
inline constexpr std::size_t kCorpusHeaderBytes = 8;

// Mean of each colour channel of the input images over the whole corpus.
std::array<double, 3> corpus_channel_mean(const std::vector<Scene>& scenes);

}  // namespace flashclear
