#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <string>
#include <vector>

#include "mfadapter/tensor.hpp"

namespace mfa {

/// Largest supported dilation (and therefore largest scale).
inline constexpr int kMaxScale = 5;
inline constexpr std::size_t kWindow = 2;
inline constexpr std::size_t kTaps = kWindow * kWindow;

/// Sliding-window geometry. The kernel is fixed at 2×2 with zero padding;
/// dilations are strictly increasing and at most kMaxScale.
struct UnfoldSpec {
  std::vector<int> dilations{1};
  std::size_t stride = 1;

  /// Dilations 1..scale.
  static UnfoldSpec for_scale(int scale) {
    if (scale < 1 || scale > kMaxScale) {
      throw ValidationError("scale must be in [1, " + std::to_string(kMaxScale) + "], got " +
                            std::to_string(scale));
    }
    UnfoldSpec spec;
    spec.dilations.clear();
    for (int d = 1; d <= scale; ++d) spec.dilations.push_back(d);
    return spec;
  }

  void validate() const {
    if (dilations.empty()) throw ValidationError("unfold spec needs at least one dilation");
    if (stride == 0) throw ValidationError("unfold stride must be positive");
    for (std::size_t i = 0; i < dilations.size(); ++i) {
      if (dilations[i] < 1 || dilations[i] > kMaxScale) {
        throw ValidationError("dilation " + std::to_string(dilations[i]) + " outside [1, 5]");
      }
      if (i > 0 && dilations[i] <= dilations[i - 1]) {
        throw ValidationError("dilations must be strictly increasing");
      }
    }
  }
};

/// Number of valid 2×2 windows along one spatial axis.
inline std::size_t windows_along(std::size_t extent, int dilation, std::size_t stride = 1) {
  const auto span = static_cast<std::size_t>(dilation) * (kWindow - 1);
  if (extent <= span) return 0;
  return (extent - span - 1) / stride + 1;
}

inline std::size_t window_count(std::size_t h, std::size_t w, int dilation, std::size_t stride = 1) {
  return windows_along(h, dilation, stride) * windows_along(w, dilation, stride);
}

/// Concatenated window-axis length ms for dilations 1..scale at stride 1.
inline std::size_t meta_width(std::size_t h, std::size_t w, int scale) {
  std::size_t ms = 0;
  for (int d = 1; d <= scale; ++d) ms += window_count(h, w, d);
  return ms;
}

/// Unfolded multi-scale windows of a batch of maps: values [B × c × ms]
/// with c = 4·C and ms = Σ per_scale_widths.
template <std::floating_point T>
struct MetaFeature {
  BasicTensor<T> values;
  int layer_id = 0;
  std::vector<std::size_t> per_scale_widths;

  std::size_t batch() const { return values.dim(0); }
  std::size_t channels() const { return values.dim(1); }
  std::size_t width() const { return values.dim(2); }
};

/// Channel 0 is the per-window max over the c window channels, channel 1 the mean.
template <std::floating_point T>
struct MFUnit {
  BasicTensor<T> values;  // [B × 2 × ms]
  int layer_id = 0;
  std::vector<std::size_t> per_scale_widths;
};

/// Gathers every 2×2 window of dilation `dilation` from `map` [B×C×h×w].
///
/// Output is [B × 4C × m]. Window j = r·W + col (W windows per row) holds,
/// for each input channel in order, the taps (r,col), (r,col+d), (r+d,col),
/// (r+d,col+d). This ordering is part of the cache and checkpoint formats.
template <std::floating_point T>
BasicTensor<T> unfold(const BasicTensor<T>& map, int dilation, const UnfoldSpec& spec = {}, int layer_id = 0) {
  require_rank(map, 4, "unfold input map");
  if (dilation < 1) throw ValidationError("dilation must be positive");
  if (spec.stride == 0) throw ValidationError("unfold stride must be positive");
  const std::size_t b = map.dim(0), ch = map.dim(1), h = map.dim(2), w = map.dim(3);
  const std::size_t rows = windows_along(h, dilation, spec.stride);
  const std::size_t cols = windows_along(w, dilation, spec.stride);
  if (rows == 0 || cols == 0) {
    throw GeometryError("layer " + std::to_string(layer_id) + ": " + std::to_string(h) + "x" + std::to_string(w) +
                        " map is too small for a 2x2 window at dilation " + std::to_string(dilation));
  }
  const std::size_t m = rows * cols;
  const auto d = static_cast<std::size_t>(dilation);
  BasicTensor<T> out({b, ch * kTaps, m});
  T* dst = out.data().data();
  const T* src = map.data().data();
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t c = 0; c < ch; ++c) {
      const T* plane = src + (n * ch + c) * h * w;
      for (std::size_t tap = 0; tap < kTaps; ++tap) {
        const std::size_t dr = (tap / kWindow) * d;
        const std::size_t dc = (tap % kWindow) * d;
        T* o = dst + ((n * ch + c) * kTaps + tap) * m;
        for (std::size_t r = 0; r < rows; ++r) {
          const T* line = plane + (r * spec.stride + dr) * w + dc;
          for (std::size_t col = 0; col < cols; ++col) *o++ = line[col * spec.stride];
        }
      }
    }
  }
  return out;
}

/// Unfolds `map` at every dilation of `spec` and concatenates along the window axis.
template <std::floating_point T>
MetaFeature<T> build_meta_feature(const BasicTensor<T>& map, const UnfoldSpec& spec, int layer_id = 0) {
  spec.validate();
  require_rank(map, 4, "meta-feature input map");
  std::vector<BasicTensor<T>> parts;
  MetaFeature<T> mf;
  mf.layer_id = layer_id;
  std::size_t ms = 0;
  for (int d : spec.dilations) {
    parts.push_back(unfold(map, d, spec, layer_id));
    mf.per_scale_widths.push_back(parts.back().dim(2));
    ms += parts.back().dim(2);
  }
  const std::size_t b = map.dim(0), c = map.dim(1) * kTaps;
  mf.values = BasicTensor<T>({b, c, ms});
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t i = 0; i < c; ++i) {
      T* dst = &mf.values.at(n, i, 0);
      for (const auto& p : parts) {
        const std::size_t m = p.dim(2);
        std::copy_n(&p.at(n, i, 0), m, dst);
        dst += m;
      }
    }
  }
  return mf;
}

template <std::floating_point T>
MetaFeature<T> build_meta_feature(const BasicTensor<T>& map, int scale, int layer_id = 0) {
  return build_meta_feature(map, UnfoldSpec::for_scale(scale), layer_id);
}

/// Parameter-free max/mean reduction over the window channels.
template <std::floating_point T>
MFUnit<T> induce_mf_unit(const MetaFeature<T>& mf) {
  const std::size_t b = mf.batch(), c = mf.channels(), ms = mf.width();
  MFUnit<T> unit{BasicTensor<T>({b, 2, ms}), mf.layer_id, mf.per_scale_widths};
  std::vector<double> sum(ms);
  std::vector<T> mx(ms);
  for (std::size_t n = 0; n < b; ++n) {
    std::fill(sum.begin(), sum.end(), 0.0);
    std::fill(mx.begin(), mx.end(), -std::numeric_limits<T>::infinity());
    for (std::size_t i = 0; i < c; ++i) {
      const T* src = &mf.values.at(n, i, 0);
      for (std::size_t j = 0; j < ms; ++j) {
        mx[j] = std::max(mx[j], src[j]);
        sum[j] += src[j];
      }
    }
    for (std::size_t j = 0; j < ms; ++j) {
      unit.values.at(n, 0, j) = mx[j];
      unit.values.at(n, 1, j) = static_cast<T>(sum[j] / static_cast<double>(c));
    }
  }
  return unit;
}

}  // namespace mfa
