#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "mfadapter/binary_io.hpp"
#include "mfadapter/bundle.hpp"
#include "mfadapter/meta_feature.hpp"
#include "mfadapter/numerics.hpp"

namespace mfa {

/// Frozen support-set MF-Units. Row i of every per-layer matrix, of
/// labels_onehot, and of support_index describe the same support image.
template <std::floating_point T>
struct MFUnitCache {
  std::map<int, BasicTensor<T>> per_layer;  // layer → [NK × 2·ms], unit rows
  BasicTensor<T> labels_onehot;             // [NK × N]
  std::size_t n_classes = 0;
  std::size_t n_shots = 0;
  int scale = 0;
  std::map<int, std::size_t> channels;                       // layer → c = 4·C
  std::map<int, std::vector<std::size_t>> per_scale_widths;  // layer → m_d
  std::vector<std::size_t> support_index;                    // row → bundle item

  std::size_t rows() const { return labels_onehot.dim(0); }
  std::vector<int> layers() const {
    std::vector<int> out;
    for (const auto& [l, _] : per_layer) out.push_back(l);
    return out;
  }
  std::size_t width(int layer) const {
    const auto& w = per_scale_widths.at(layer);
    return std::accumulate(w.begin(), w.end(), std::size_t{0});
  }
  const BasicTensor<T>& layer(int l) const {
    auto it = per_layer.find(l);
    if (it == per_layer.end()) throw ValidationError("cache has no layer " + std::to_string(l));
    return it->second;
  }
  /// Class index of every row.
  std::vector<std::size_t> row_labels() const {
    std::vector<std::size_t> out(rows());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax(labels_onehot.row(i));
    return out;
  }

  friend bool operator==(const MFUnitCache&, const MFUnitCache&) = default;
};

template <std::floating_point T>
struct GlobalCache {
  BasicTensor<T> high_features;  // [NK × D], unit rows
  BasicTensor<T> text_features;  // [N × D], unit rows

  friend bool operator==(const GlobalCache&, const GlobalCache&) = default;
};

template <std::floating_point T>
struct CacheSet {
  MFUnitCache<T> local;
  GlobalCache<T> global;

  friend bool operator==(const CacheSet&, const CacheSet&) = default;
};

template <std::floating_point T>
BasicTensor<T> one_hot(std::span<const std::size_t> labels, std::size_t n_classes) {
  if (labels.empty()) throw DimensionError("one_hot needs at least one label");
  BasicTensor<T> out({labels.size(), n_classes});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) throw IndexError("label " + std::to_string(labels[i]) + " out of range");
    out.at(i, labels[i]) = T{1};
  }
  return out;
}

/// [C×h×w] maps of the given items stacked into a [B×C×h×w] batch.
template <std::floating_point T>
BasicTensor<T> stack_maps(const std::vector<const Tensor*>& maps) {
  std::vector<BasicTensor<T>> parts;
  parts.reserve(maps.size());
  for (const Tensor* m : maps) parts.push_back(tensor_cast<T>(*m));
  return stack<T>(parts);
}

/// Builds the frozen caches from the support items `support` of `bundle`.
/// Rows are ordered class-major, ascending bundle index within a class.
template <std::floating_point T = float>
CacheSet<T> build_cache(const FeatureBundle& bundle, std::span<const std::size_t> support, int scale,
                        std::span<const int> layers) {
  if (support.empty()) throw ValidationError("support set is empty");
  if (layers.empty()) throw ValidationError("at least one layer is required");
  const UnfoldSpec spec = UnfoldSpec::for_scale(scale);
  const std::size_t n = bundle.n_classes();

  std::vector<std::size_t> order(support.begin(), support.end());
  for (std::size_t i : order) {
    if (i >= bundle.items.size()) throw IndexError("support index " + std::to_string(i) + " out of range");
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return bundle.items[a].label < bundle.items[b].label; });

  std::vector<std::size_t> counts(n, 0);
  for (std::size_t i : order) counts[bundle.items[i].label]++;
  if (std::any_of(counts.begin(), counts.end(), [&](std::size_t c) { return c != counts[0]; }) || counts[0] == 0) {
    std::string msg = "support set must hold the same nonzero number of shots per class; counts:";
    for (std::size_t c = 0; c < n; ++c) msg += " " + bundle.class_names[c] + "=" + std::to_string(counts[c]);
    throw ValidationError(msg);
  }

  CacheSet<T> out;
  auto& cache = out.local;
  cache.n_classes = n;
  cache.n_shots = counts[0];
  cache.scale = scale;
  cache.support_index = order;

  std::vector<std::size_t> labels;
  for (std::size_t i : order) labels.push_back(bundle.items[i].label);
  cache.labels_onehot = one_hot<T>(labels, n);

  std::set<int> seen;
  for (int layer : layers) {
    require_known_layer(layer);
    if (!seen.insert(layer).second) throw ValidationError("layer " + std::to_string(layer) + " requested twice");
    auto g = bundle.geometry.find(layer);
    if (g == bundle.geometry.end()) throw ValidationError("bundle has no layer " + std::to_string(layer));
    const Shape one_shape{1, g->second.channels, g->second.height, g->second.width};
    BasicTensor<T> matrix;
    for (std::size_t r = 0; r < order.size(); ++r) {
      const Tensor& map = bundle.items[order[r]].features.low_maps.at(layer);
      const auto unit = induce_mf_unit(build_meta_feature(tensor_cast<T>(map).reshaped(one_shape), spec, layer));
      if (r == 0) {
        matrix = BasicTensor<T>({order.size(), unit.values.size()});
        cache.per_scale_widths[layer] = unit.per_scale_widths;
        cache.channels[layer] = g->second.channels * kTaps;
      }
      std::copy(unit.values.data().begin(), unit.values.data().end(), matrix.row(r).begin());
    }
    cache.per_layer[layer] = l2_normalize_rows(matrix);
  }

  auto& global = out.global;
  BasicTensor<T> high({order.size(), bundle.embed_dim});
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto& h = bundle.items[order[r]].features.high;
    std::transform(h.data().begin(), h.data().end(), high.row(r).begin(), [](float v) { return static_cast<T>(v); });
  }
  global.high_features = l2_normalize_rows(high);
  global.text_features = l2_normalize_rows(tensor_cast<T>(bundle.text_features));
  return out;
}

template <std::floating_point To, std::floating_point From>
CacheSet<To> cache_cast(const CacheSet<From>& c) {
  CacheSet<To> out;
  auto& l = out.local;
  for (const auto& [layer, m] : c.local.per_layer) l.per_layer[layer] = tensor_cast<To>(m);
  l.labels_onehot = tensor_cast<To>(c.local.labels_onehot);
  l.n_classes = c.local.n_classes;
  l.n_shots = c.local.n_shots;
  l.scale = c.local.scale;
  l.channels = c.local.channels;
  l.per_scale_widths = c.local.per_scale_widths;
  l.support_index = c.local.support_index;
  out.global.high_features = tensor_cast<To>(c.global.high_features);
  out.global.text_features = tensor_cast<To>(c.global.text_features);
  return out;
}

// ---------------------------------------------------------------------------
// "MFUC" cache file
//
//   "MFUC" | u32 version | u32 N | u32 K | u32 scale | u32 n_layers
//   n_layers × { u32 layer, u32 c, u32 ms, u32 n_scales, u32 m_d[n_scales] }
//   u32 n_arrays, n_arrays × tensor record
//
// Arrays: "local/<layer>" [NK×2ms], "labels_onehot" [NK×N], "high" [NK×D],
// "text" [N×D], "support_index" [NK] (bundle item index, stored as f32).
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCacheVersion = 1;

inline io::Bytes serialize_cache(const CacheSet<float>& cache) {
  const auto& l = cache.local;
  io::ByteWriter w;
  w.magic("MFUC");
  w.u32(kCacheVersion);
  w.u32(static_cast<std::uint32_t>(l.n_classes));
  w.u32(static_cast<std::uint32_t>(l.n_shots));
  w.u32(static_cast<std::uint32_t>(l.scale));
  w.u32(static_cast<std::uint32_t>(l.per_layer.size()));
  for (const auto& [layer, _] : l.per_layer) {
    const auto& widths = l.per_scale_widths.at(layer);
    w.u32(static_cast<std::uint32_t>(layer));
    w.u32(static_cast<std::uint32_t>(l.channels.at(layer)));
    w.u32(static_cast<std::uint32_t>(l.width(layer)));
    w.u32(static_cast<std::uint32_t>(widths.size()));
    for (std::size_t m : widths) w.u32(static_cast<std::uint32_t>(m));
  }
  std::vector<float> index(l.support_index.begin(), l.support_index.end());
  w.u32(static_cast<std::uint32_t>(l.per_layer.size() + 4));
  for (const auto& [layer, m] : l.per_layer) w.tensor("local/" + std::to_string(layer), m);
  w.tensor("labels_onehot", l.labels_onehot);
  w.tensor("high", cache.global.high_features);
  w.tensor("text", cache.global.text_features);
  const std::size_t n_index = index.size();
  w.tensor("support_index", Tensor({n_index}, std::move(index)));
  return std::move(w).bytes();
}

inline CacheSet<float> deserialize_cache(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("MFUC");
  const std::uint64_t version_at = r.offset();
  if (const auto v = r.u32(); v != kCacheVersion) {
    throw FormatError("unsupported cache version " + std::to_string(v), version_at);
  }
  CacheSet<float> out;
  auto& l = out.local;
  l.n_classes = r.u32();
  l.n_shots = r.u32();
  const std::uint64_t scale_at = r.offset();
  l.scale = static_cast<int>(r.u32());
  if (l.scale < 1 || l.scale > kMaxScale) throw FormatError("cache scale out of range", scale_at);
  if (l.n_classes == 0 || l.n_shots == 0) throw FormatError("cache declares zero classes or shots", scale_at);
  const std::uint32_t n_layers = r.u32();
  if (n_layers == 0 || n_layers > 2) r.fail("cache must hold one or two layers");
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const std::uint64_t at = r.offset();
    const int layer = static_cast<int>(r.u32());
    if (layer != 3 && layer != 4) throw FormatError("unknown cache layer " + std::to_string(layer), at);
    if (l.channels.contains(layer)) throw FormatError("cache layer " + std::to_string(layer) + " listed twice", at);
    const std::uint32_t c = r.u32();
    if (c == 0 || c % kTaps != 0) throw FormatError("cache channel count must be a positive multiple of 4", at);
    l.channels[layer] = c;
    const std::uint32_t ms = r.u32();
    const std::uint32_t n_scales = r.u32();
    if (n_scales != static_cast<std::uint32_t>(l.scale)) throw FormatError("per-scale width count != scale", at);
    std::vector<std::size_t> widths;
    for (std::uint32_t k = 0; k < n_scales; ++k) widths.push_back(r.u32());
    if (std::accumulate(widths.begin(), widths.end(), std::size_t{0}) != ms) {
      throw FormatError("per-scale widths do not sum to ms", at);
    }
    l.per_scale_widths[layer] = std::move(widths);
  }
  const std::uint32_t n_arrays = r.u32();
  std::map<std::string, std::pair<Tensor, std::uint64_t>> arrays;
  for (std::uint32_t i = 0; i < n_arrays; ++i) {
    const std::uint64_t at = r.offset();
    auto [name, t] = r.tensor();
    if (!t.all_finite()) throw FormatError("array " + name + " holds non-finite values", at);
    if (!arrays.emplace(name, std::make_pair(std::move(t), at)).second) throw FormatError("duplicate array " + name, at);
  }
  if (!r.at_end()) r.fail("trailing bytes after cache arrays");
  auto take = [&](const std::string& name) -> std::pair<Tensor, std::uint64_t>& {
    auto it = arrays.find(name);
    if (it == arrays.end()) throw FormatError("cache lacks array " + name, r.offset());
    return it->second;
  };
  const std::size_t nk = l.n_classes * l.n_shots;
  auto shaped = [&](const std::string& name, const Shape& shape) {
    auto& [t, at] = take(name);
    if (t.shape() != shape) {
      throw FormatError("array " + name + " has shape " + shape_str(t.shape()) + ", expected " + shape_str(shape), at);
    }
    return std::move(t);
  };
  for (const auto& [layer, widths] : l.per_scale_widths) {
    l.per_layer[layer] = shaped("local/" + std::to_string(layer), {nk, 2 * l.width(layer)});
  }
  l.labels_onehot = shaped("labels_onehot", {nk, l.n_classes});
  auto& high = take("high");
  if (high.first.rank() != 2 || high.first.dim(0) != nk) throw FormatError("array high has wrong shape", high.second);
  const std::size_t d = high.first.dim(1);
  out.global.high_features = std::move(high.first);
  out.global.text_features = shaped("text", {l.n_classes, d});
  const Tensor index = shaped("support_index", {nk});
  for (float v : index.data()) {
    if (v < 0.0f || std::floor(v) != v || v > 16777216.0f) throw FormatError("support_index holds a non-index value", 0);
    l.support_index.push_back(static_cast<std::size_t>(v));
  }
  for (std::size_t i = 0; i < nk; ++i) {
    float total = 0.0f;
    for (float v : l.labels_onehot.row(i)) {
      if (v != 0.0f && v != 1.0f) throw FormatError("labels_onehot holds a non-binary value", 0);
      total += v;
    }
    if (total != 1.0f) throw FormatError("labels_onehot row " + std::to_string(i) + " is not one-hot", 0);
  }
  return out;
}

inline void write_cache(const CacheSet<float>& cache, const std::filesystem::path& path) {
  io::write_file(path, serialize_cache(cache));
}

inline CacheSet<float> read_cache(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return deserialize_cache(bytes);
}

template <std::floating_point T>
std::uint64_t cache_checksum(const CacheSet<T>& c) {
  Checksum h;
  for (const auto& [layer, m] : c.local.per_layer) {
    h.update_u64(static_cast<std::uint64_t>(layer));
    h.update(m);
  }
  h.update(c.local.labels_onehot);
  h.update(c.global.high_features);
  h.update(c.global.text_features);
  for (std::size_t i : c.local.support_index) h.update_u64(i);
  return h.value();
}

}  // namespace mfa
