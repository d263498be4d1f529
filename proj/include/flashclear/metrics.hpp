#pragma once

// Image quality metrics. Images are H x W x 3 interleaved float buffers in
// [0,1]; masks are H x W bytes.

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "flashclear/autograd.hpp"

namespace flashclear {

inline constexpr double kPsnrCap = 100.0;

double psnr(const std::vector<float>& a, const std::vector<float>& b);

// MSE averaged over the pixels where mask != 0, all channels.
double psnr_mask(const std::vector<float>& a, const std::vector<float>& b,
                 const std::vector<std::uint8_t>& mask, int channels = 3);

// Half-open pixel rectangle [x0,x1) x [y0,y1).
struct CropBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
  friend bool operator==(const CropBox&, const CropBox&) = default;
};

// Bounding box of the set pixels grown by `margin` on every side and clipped
// to the image. Throws ShapeError for an empty mask.
CropBox mask_crop_box(const std::vector<std::uint8_t>& mask, int height, int width, int margin = 4);

std::vector<float> crop_image(const std::vector<float>& img, int height, int width, const CropBox& box,
                              int channels = 3);

// Differentiable perceptual distance between two NCHW image batches, used
// both as a training loss and (through PerceptualMetric) as a metric.
template <typename T>
class PerceptualLoss {
 public:
  virtual ~PerceptualLoss() = default;
  virtual std::string name() const = 0;
  virtual nn::Var<T> operator()(nn::Var<T> a, nn::Var<T> b) const = 0;
};

// Fixed random 3x3 filter bank, SiLU, unit-normalised channel vectors, mean
// squared difference. Weights depend only on the seed.
template <typename T>
class RandFeatPerceptual final : public PerceptualLoss<T> {
 public:
  explicit RandFeatPerceptual(std::uint64_t seed = 7, int features = 16);
  std::string name() const override { return "randfeat"; }
  nn::Var<T> operator()(nn::Var<T> a, nn::Var<T> b) const override;

 private:
  Tensor<T> w_, b_;
};

enum class PerceptualStatus { kOk, kAbsent, kFailed };
std::string to_string(PerceptualStatus s);

struct PerceptualResult {
  PerceptualStatus status = PerceptualStatus::kAbsent;
  double value = 0.0;  // meaningful only when status == kOk
  std::string detail;
};

enum class PerceptualRegion { kFull, kMaskedCrop };

// Metric front end over a registered backend (or none).
class PerceptualMetric {
 public:
  PerceptualMetric() = default;
  explicit PerceptualMetric(std::shared_ptr<const PerceptualLoss<double>> backend)
      : backend_(std::move(backend)) {}

  bool available() const { return backend_ != nullptr; }
  std::string backend_name() const { return backend_ ? backend_->name() : "none"; }

  PerceptualResult evaluate(const std::vector<float>& a, const std::vector<float>& b, int height, int width,
                            PerceptualRegion region, const std::vector<std::uint8_t>* mask = nullptr,
                            int margin = 4) const;

 private:
  std::shared_ptr<const PerceptualLoss<double>> backend_;
};

// Backend by name: "none" gives an empty pointer, "randfeat" the built-in.
std::shared_ptr<const PerceptualLoss<double>> make_perceptual_backend(const std::string& name);

struct SceneMetrics {
  std::uint64_t seed = 0;
  double psnr = 0.0;
  double psnr_mask = 0.0;
  PerceptualResult perceptual;
  PerceptualResult perceptual_local;
};

struct MetricReport {
  std::vector<SceneMetrics> scenes;
  double mean_psnr = 0.0;
  double mean_psnr_mask = 0.0;
  std::optional<double> mean_perceptual;
  std::optional<double> mean_perceptual_local;
};

// Averages dB values across scenes; perceptual means only when every scene
// has an ok result.
MetricReport aggregate(std::vector<SceneMetrics> scenes);

}  // namespace flashclear
