#include "flashclear/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

#include "flashclear/errors.hpp"
#include "flashclear/rng.hpp"

namespace flashclear {

void CorpusConfig::validate() const {
  if (image_size < kGridFactor || image_size % kGridFactor != 0)
    throw ConfigError("image_size " + std::to_string(image_size) + " must be a positive multiple of " +
                      std::to_string(kGridFactor));
  if (image_size > 65535) throw ConfigError("image_size too large for the corpus format");
  if (!circles && !squares && !triangles) throw ConfigError("no shape kinds enabled");
  if (!(radius_min >= 2.0 && radius_min <= radius_max))
    throw ConfigError("radius range must satisfy 2 <= min <= max");
  if (radius_max * 2 >= image_size) throw ConfigError("radius_max too large for image_size");
  if (shadow_dx_min > shadow_dx_max || shadow_dy_min > shadow_dy_max)
    throw ConfigError("shadow offset range inverted");
  if (shadow_strength_min < 0 || shadow_strength_max > 1 || shadow_strength_min > shadow_strength_max)
    throw ConfigError("shadow strength range must lie in [0,1]");
  if (reflection_strength_min < 0 || reflection_strength_max > 1 ||
      reflection_strength_min > reflection_strength_max)
    throw ConfigError("reflection strength range must lie in [0,1]");
}

namespace {

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

ShapeKind pick_shape(const CorpusConfig& cfg, Rng& rng) {
  std::vector<ShapeKind> kinds;
  if (cfg.circles) kinds.push_back(ShapeKind::kCircle);
  if (cfg.squares) kinds.push_back(ShapeKind::kSquare);
  if (cfg.triangles) kinds.push_back(ShapeKind::kTriangle);
  return kinds[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(kinds.size()) - 1))];
}

float background_at(const SceneLayout& l, int x, int y, int c, int size) {
  const double u = (x + 0.5) / size - 0.5;
  const double v = (y + 0.5) / size - 0.5;
  double val = l.base[c] + l.grad_x[c] * u + l.grad_y[c] * v;
  if (l.stripes) {
    const double p = u * std::cos(l.stripe_angle) + v * std::sin(l.stripe_angle);
    val += l.stripe_amp[c] * std::sin(2.0 * std::numbers::pi * l.stripe_freq * p + l.stripe_phase);
  }
  return clamp01(val);
}

// Rows whose pixel centres fall inside the object; used for the mirror line.
int object_bottom_row(const SceneLayout& l, int size) {
  int bottom = -1;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      if (inside_shape(l, x, y)) bottom = std::max(bottom, y);
  return bottom;
}

}  // namespace

bool inside_shape(const SceneLayout& l, int x, int y) {
  const double px = x + 0.5, py = y + 0.5;
  const double dx = px - l.cx, dy = py - l.cy, r = l.radius;
  switch (l.shape) {
    case ShapeKind::kCircle:
      return dx * dx + dy * dy <= r * r;
    case ShapeKind::kSquare:
      return std::abs(dx) <= r && std::abs(dy) <= r;
    case ShapeKind::kTriangle:
      // apex at (cx, cy - r), base spanning [cx - r, cx + r] at cy + r
      return dy >= -r && dy <= r && std::abs(dx) <= (dy + r) / 2.0;
  }
  return false;
}

SceneLayout sample_layout(std::uint64_t seed, const CorpusConfig& cfg) {
  cfg.validate();
  Rng rng(split_seed(seed, "scene"));
  SceneLayout l;
  const int n = cfg.image_size;

  // Background.
  const bool stripes = cfg.background == BackgroundFamily::kStripes ||
                       (cfg.background == BackgroundFamily::kMixed && rng.bernoulli(0.5));
  l.stripes = stripes;
  for (int c = 0; c < 3; ++c) {
    l.base[c] = static_cast<float>(rng.uniform(0.3, 0.75));
    l.grad_x[c] = static_cast<float>(rng.uniform(-0.25, 0.25));
    l.grad_y[c] = static_cast<float>(rng.uniform(-0.25, 0.25));
    l.stripe_amp[c] = stripes ? static_cast<float>(rng.uniform(0.04, 0.12)) : 0.0f;
  }
  l.stripe_freq = rng.uniform(1.0, 3.0);
  l.stripe_angle = rng.uniform(0.0, std::numbers::pi);
  l.stripe_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  // Object: saturated colour distinct from the background base.
  l.shape = pick_shape(cfg, rng);
  l.radius = rng.uniform(cfg.radius_min, cfg.radius_max);
  const double margin = l.radius + 1.0;
  l.cx = rng.uniform(margin, n - margin);
  l.cy = rng.uniform(margin, n - margin - (n > 16 ? 4.0 : 0.0));
  const int hue = rng.uniform_int(0, 5);
  const float hi = static_cast<float>(rng.uniform(0.8, 1.0));
  const float lo = static_cast<float>(rng.uniform(0.0, 0.2));
  static constexpr int kHue[6][3] = {{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {1, 1, 0}, {1, 0, 1}, {0, 1, 1}};
  for (int c = 0; c < 3; ++c) l.color[c] = kHue[hue][c] ? hi : lo;

  l.shadow = rng.bernoulli(cfg.shadow_prob);
  l.shadow_dx = rng.uniform_int(cfg.shadow_dx_min, cfg.shadow_dx_max);
  l.shadow_dy = rng.uniform_int(cfg.shadow_dy_min, cfg.shadow_dy_max);
  if (cfg.shadow_random_side && rng.bernoulli(0.5)) l.shadow_dx = -l.shadow_dx;
  l.shadow_strength = rng.uniform(cfg.shadow_strength_min, cfg.shadow_strength_max);

  l.reflection = rng.bernoulli(cfg.reflection_prob);
  l.reflection_strength = rng.uniform(cfg.reflection_strength_min, cfg.reflection_strength_max);
  return l;
}

Scene generate_scene(std::uint64_t seed, const CorpusConfig& cfg) {
  const SceneLayout l = sample_layout(seed, cfg);
  const int n = cfg.image_size;
  Scene s;
  s.height = s.width = n;
  s.seed = seed;
  const std::size_t px = static_cast<std::size_t>(n) * n;
  s.gt_background.resize(px * 3);
  s.m_obj.assign(px, 0);
  s.m_obj_eff.assign(px, 0);

  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x)
      for (int c = 0; c < 3; ++c)
        s.gt_background[(static_cast<std::size_t>(y) * n + x) * 3 + c] = background_at(l, x, y, c, n);
  s.image = s.gt_background;

  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) s.m_obj[static_cast<std::size_t>(y) * n + x] = inside_shape(l, x, y);

  // Hard shadow: the object stencil translated by (dx, dy), darkening the
  // background multiplicatively.
  if (l.shadow && l.shadow_strength > 0.0) {
    const float keep = static_cast<float>(1.0 - l.shadow_strength);
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * n + x;
        if (s.m_obj[i] || !inside_shape(l, x - l.shadow_dx, y - l.shadow_dy)) continue;
        s.m_obj_eff[i] = 1;
        for (int c = 0; c < 3; ++c) s.image[i * 3 + c] *= keep;
      }
  }

  // Reflection: object mirrored about the line just below its lowest row,
  // alpha-blended over whatever is already there.
  if (l.reflection && l.reflection_strength > 0.0) {
    const int bottom = object_bottom_row(l, n);
    const float a = static_cast<float>(l.reflection_strength);
    for (int y = bottom + 1; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const std::size_t i = static_cast<std::size_t>(y) * n + x;
        const int src_y = 2 * bottom + 1 - y;
        if (s.m_obj[i] || src_y < 0 || !inside_shape(l, x, src_y)) continue;
        s.m_obj_eff[i] = 1;
        for (int c = 0; c < 3; ++c)
          s.image[i * 3 + c] = (1.0f - a) * s.image[i * 3 + c] + a * l.color[c];
      }
  }

  for (std::size_t i = 0; i < px; ++i) {
    if (!s.m_obj[i]) continue;
    s.m_obj_eff[i] = 1;
    for (int c = 0; c < 3; ++c) s.image[i * 3 + c] = l.color[c];
  }
  return s;
}

std::vector<Scene> generate_corpus(std::uint64_t first_seed, int count, const CorpusConfig& cfg) {
  if (count < 0) throw ConfigError("scene count must be non-negative");
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(generate_scene(first_seed + i, cfg));
  return out;
}

// ---------------------------------------------------------------------------
// Corpus file

namespace {

constexpr char kMagic[4] = {'F', 'C', 'S', '1'};

template <typename U>
void put(std::string& buf, U v) {
  char b[sizeof(U)];
  std::memcpy(b, &v, sizeof(U));  // little-endian host
  buf.append(b, sizeof(U));
}

void put_mask(std::string& buf, const std::vector<std::uint8_t>& m) {
  std::string bytes((m.size() + 7) / 8, '\0');
  for (std::size_t i = 0; i < m.size(); ++i)
    if (m[i]) bytes[i / 8] = static_cast<char>(bytes[i / 8] | (1u << (i % 8)));
  buf += bytes;
}

class Reader {
 public:
  explicit Reader(std::string data) : data_(std::move(data)) {}
  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }
  void bytes(void* dst, std::size_t n, const char* what) {
    need(n, what);
    std::memcpy(dst, data_.data() + pos_, n);
    pos_ += n;
  }
  bool at_end() const { return pos_ == data_.size(); }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (pos_ + n > data_.size())
      throw FormatError(FormatError::Kind::kTruncated,
                        std::string("corpus truncated while reading ") + what);
  }
  std::string data_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t corpus_record_bytes(int height, int width) {
  const std::size_t px = static_cast<std::size_t>(height) * width;
  return 8 + 2 + 2 + 2 * px * 3 * sizeof(float) + 2 * ((px + 7) / 8);
}

void write_corpus(const std::vector<Scene>& scenes, const std::filesystem::path& path) {
  std::string buf(kMagic, 4);
  put<std::uint32_t>(buf, static_cast<std::uint32_t>(scenes.size()));
  for (const auto& s : scenes) {
    const std::size_t px = static_cast<std::size_t>(s.pixels());
    if (s.image.size() != px * 3 || s.gt_background.size() != px * 3 || s.m_obj.size() != px ||
        s.m_obj_eff.size() != px)
      throw ShapeError("write_corpus: scene buffers inconsistent with its size");
    put<std::uint64_t>(buf, s.seed);
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(s.height));
    put<std::uint16_t>(buf, static_cast<std::uint16_t>(s.width));
    buf.append(reinterpret_cast<const char*>(s.image.data()), px * 3 * sizeof(float));
    buf.append(reinterpret_cast<const char*>(s.gt_background.data()), px * 3 * sizeof(float));
    put_mask(buf, s.m_obj);
    put_mask(buf, s.m_obj_eff);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(FormatError::Kind::kIo, "cannot open " + path.string() + " for writing");
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw FormatError(FormatError::Kind::kIo, "write failed: " + path.string());
}

std::vector<Scene> read_corpus(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError(FormatError::Kind::kIo, "cannot open corpus " + path.string());
  std::string data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (data.size() < 4)
    throw FormatError(FormatError::Kind::kTruncated, "corpus shorter than its magic");
  if (std::memcmp(data.data(), kMagic, 3) != 0)
    throw FormatError(FormatError::Kind::kBadMagic, "not a corpus file (bad magic)");
  if (data[3] != kMagic[3])
    throw FormatError(FormatError::Kind::kVersion,
                      std::string("unsupported corpus version '") + data[3] + "'");
  Reader r(std::move(data));
  char magic[4];
  r.bytes(magic, 4, "magic");
  const auto count = r.get<std::uint32_t>("record count");
  std::vector<Scene> out;
  out.reserve(count);
  for (std::uint32_t k = 0; k < count; ++k) {
    Scene s;
    s.seed = r.get<std::uint64_t>("seed");
    s.height = r.get<std::uint16_t>("height");
    s.width = r.get<std::uint16_t>("width");
    if (s.height == 0 || s.width == 0)
      throw FormatError(FormatError::Kind::kMalformed, "record with zero-sized image");
    const std::size_t px = static_cast<std::size_t>(s.pixels());
    s.image.resize(px * 3);
    s.gt_background.resize(px * 3);
    r.bytes(s.image.data(), px * 3 * sizeof(float), "image");
    r.bytes(s.gt_background.data(), px * 3 * sizeof(float), "background");
    for (auto* m : {&s.m_obj, &s.m_obj_eff}) {
      std::vector<unsigned char> packed((px + 7) / 8);
      r.bytes(packed.data(), packed.size(), "mask");
      m->resize(px);
      for (std::size_t i = 0; i < px; ++i) (*m)[i] = (packed[i / 8] >> (i % 8)) & 1u;
    }
    out.push_back(std::move(s));
  }
  if (!r.at_end())
    throw FormatError(FormatError::Kind::kMalformed,
                      std::to_string(r.remaining()) + " trailing bytes after last record");
  return out;
}

std::array<double, 3> corpus_channel_mean(const std::vector<Scene>& scenes) {
  std::array<double, 3> acc{};
  std::size_t n = 0;
  for (const auto& s : scenes) {
    for (std::size_t i = 0; i < s.image.size(); i += 3)
      for (int c = 0; c < 3; ++c) acc[c] += s.image[i + c];
    n += static_cast<std::size_t>(s.pixels());
  }
  if (n > 0)
    for (auto& v : acc) v /= static_cast<double>(n);
  return acc;
}

}  // namespace flashclear
