#include "flashclear/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "flashclear/errors.hpp"
#include "flashclear/rng.hpp"

namespace flashclear {

namespace {

double mse_to_db(double mse) {
  if (mse <= 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

}  // namespace

double psnr(const std::vector<float>& a, const std::vector<float>& b) {
  if (a.size() != b.size()) throw ShapeError("psnr: image sizes differ");
  if (a.empty()) throw ShapeError("psnr: empty image");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return mse_to_db(acc / static_cast<double>(a.size()));
}

double psnr_mask(const std::vector<float>& a, const std::vector<float>& b,
                 const std::vector<std::uint8_t>& mask, int channels) {
  if (a.size() != b.size()) throw ShapeError("psnr_mask: image sizes differ");
  if (a.size() != mask.size() * static_cast<std::size_t>(channels))
    throw ShapeError("psnr_mask: mask size does not match image");
  double acc = 0.0;
  std::size_t n = 0;
  for (std::size_t p = 0; p < mask.size(); ++p) {
    if (!mask[p]) continue;
    for (int c = 0; c < channels; ++c) {
      const std::size_t i = p * channels + c;
      const double d = static_cast<double>(a[i]) - b[i];
      acc += d * d;
    }
    n += channels;
  }
  if (n == 0) throw ShapeError("psnr_mask: empty mask");
  return mse_to_db(acc / static_cast<double>(n));
}

CropBox mask_crop_box(const std::vector<std::uint8_t>& mask, int height, int width, int margin) {
  if (mask.size() != static_cast<std::size_t>(height) * width) throw ShapeError("crop box: mask size mismatch");
  if (margin < 0) throw ConfigError("crop margin must be non-negative");
  int x0 = width, y0 = height, x1 = -1, y1 = -1;
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      if (mask[static_cast<std::size_t>(y) * width + x]) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
      }
  if (x1 < 0) throw ShapeError("crop box: empty mask");
  return {std::max(0, x0 - margin), std::max(0, y0 - margin), std::min(width, x1 + 1 + margin),
          std::min(height, y1 + 1 + margin)};
}

std::vector<float> crop_image(const std::vector<float>& img, int height, int width, const CropBox& box,
                              int channels) {
  if (img.size() != static_cast<std::size_t>(height) * width * channels)
    throw ShapeError("crop: image size mismatch");
  if (box.x0 < 0 || box.y0 < 0 || box.x1 > width || box.y1 > height || box.width() <= 0 || box.height() <= 0)
    throw ShapeError("crop: box outside image");
  std::vector<float> out;
  out.reserve(static_cast<std::size_t>(box.width()) * box.height() * channels);
  for (int y = box.y0; y < box.y1; ++y)
    for (int x = box.x0; x < box.x1; ++x)
      for (int c = 0; c < channels; ++c) out.push_back(img[(static_cast<std::size_t>(y) * width + x) * channels + c]);
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
RandFeatPerceptual<T>::RandFeatPerceptual(std::uint64_t seed, int features) {
  Rng rng(split_seed(seed, "randfeat"));
  w_ = nn::kaiming_uniform<T>({features, 3, 3, 3}, 27, rng);
  b_ = Tensor<T>({features});
}

template <typename T>
nn::Var<T> RandFeatPerceptual<T>::operator()(nn::Var<T> a, nn::Var<T> b) const {
  if (a.shape() != b.shape()) throw ShapeError("perceptual: shape mismatch");
  nn::Tape<T>& tape = *a.tape;
  // The filter bank is fixed, so it enters the tape as constants.
  const nn::Var<T> w = tape.constant(w_);
  const nn::Var<T> bias = tape.constant(b_);
  const nn::Var<T> fa = nn::channel_normalize(nn::silu(nn::conv2d(a, w, bias, 1, 1)));
  const nn::Var<T> fb = nn::channel_normalize(nn::silu(nn::conv2d(b, w, bias, 1, 1)));
  return nn::mse(fa, fb);
}

template class RandFeatPerceptual<float>;
template class RandFeatPerceptual<double>;

std::string to_string(PerceptualStatus s) {
  switch (s) {
    case PerceptualStatus::kOk: return "ok";
    case PerceptualStatus::kAbsent: return "absent";
    case PerceptualStatus::kFailed: return "failed";
  }
  return "unknown";
}

namespace {

Tensor<double> hwc_to_nchw(const std::vector<float>& img, int h, int w) {
  Tensor<double> t({1, 3, h, w});
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t c = 0; c < 3; ++c) t[c * hw + p] = img[p * 3 + c];
  return t;
}

}  // namespace

PerceptualResult PerceptualMetric::evaluate(const std::vector<float>& a, const std::vector<float>& b, int height,
                                            int width, PerceptualRegion region,
                                            const std::vector<std::uint8_t>* mask, int margin) const {
  PerceptualResult r;
  if (!backend_) {
    r.status = PerceptualStatus::kAbsent;
    r.detail = "no perceptual backend registered";
    return r;
  }
  try {
    std::vector<float> ca = a, cb = b;
    int h = height, w = width;
    if (region == PerceptualRegion::kMaskedCrop) {
      if (!mask) throw ShapeError("masked-crop perceptual metric needs a mask");
      const CropBox box = mask_crop_box(*mask, height, width, margin);
      ca = crop_image(a, height, width, box);
      cb = crop_image(b, height, width, box);
      h = box.height();
      w = box.width();
    }
    if (ca.size() != cb.size() || ca.size() != static_cast<std::size_t>(h) * w * 3)
      throw ShapeError("perceptual: image sizes differ");
    nn::Tape<double> tape(false);
    const auto d = (*backend_)(tape.constant(hwc_to_nchw(ca, h, w)), tape.constant(hwc_to_nchw(cb, h, w)));
    const double v = d.value()[0];
    if (!std::isfinite(v)) throw NumericFault("perceptual backend returned a non-finite value");
    r.status = PerceptualStatus::kOk;
    r.value = v;
  } catch (const std::exception& e) {
    r.status = PerceptualStatus::kFailed;
    r.detail = e.what();
  }
  return r;
}

std::shared_ptr<const PerceptualLoss<double>> make_perceptual_backend(const std::string& name) {
  if (name == "none" || name.empty()) return nullptr;
  if (name == "randfeat") return std::make_shared<RandFeatPerceptual<double>>();
  throw ConfigError("unknown perceptual backend '" + name + "'");
}

MetricReport aggregate(std::vector<SceneMetrics> scenes) {
  MetricReport rep;
  rep.scenes = std::move(scenes);
  if (rep.scenes.empty()) return rep;
  double p = 0, pm = 0, lp = 0, ll = 0;
  bool all_p = true, all_l = true;
  for (const auto& s : rep.scenes) {
    p += s.psnr;
    pm += s.psnr_mask;
    all_p = all_p && s.perceptual.status == PerceptualStatus::kOk;
    all_l = all_l && s.perceptual_local.status == PerceptualStatus::kOk;
    lp += s.perceptual.value;
    ll += s.perceptual_local.value;
  }
  const double n = static_cast<double>(rep.scenes.size());
  rep.mean_psnr = p / n;
  rep.mean_psnr_mask = pm / n;
  if (all_p) rep.mean_perceptual = lp / n;
  if (all_l) rep.mean_perceptual_local = ll / n;
  return rep;
}

}  // namespace flashclear
