#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mfadapter/bundle.hpp"
#include "mfadapter/numerics.hpp"
#include "mfadapter/random.hpp"

namespace mfa {

inline constexpr std::size_t kAllowedShots[] = {1, 2, 4, 8, 16};

struct EpisodeSpec {
  std::size_t n_shots = 16;
  std::uint64_t seed = 1;

  void validate() const {
    if (std::find(std::begin(kAllowedShots), std::end(kAllowedShots), n_shots) == std::end(kAllowedShots)) {
      throw ValidationError("shots must be one of 1, 2, 4, 8, 16; got " + std::to_string(n_shots));
    }
  }
};

/// Bundle item indices. Support is class-major, ascending within a class;
/// test keeps bundle order.
struct Episode {
  std::vector<std::size_t> support;
  std::vector<std::size_t> test;
};

/// Split tag of every bundle item, in bundle order.
inline std::vector<Split> resolve_splits(const FeatureBundle& bundle, const SplitManifest& manifest) {
  std::vector<Split> splits;
  splits.reserve(bundle.items.size());
  for (const auto& item : bundle.items) {
    auto it = manifest.find(item.item_id);
    if (it == manifest.end()) throw ValidationError("item " + item.item_id + " is missing from the split manifest");
    splits.push_back(it->second);
  }
  for (const auto& [id, split] : manifest) {
    if (!bundle.find_item(id)) throw ValidationError("manifest names unknown item " + id);
  }
  return splits;
}

/// Draws exactly K support items per class, uniformly without replacement.
inline Episode sample_episode(const FeatureBundle& bundle, const SplitManifest& manifest, const EpisodeSpec& spec) {
  spec.validate();
  const auto splits = resolve_splits(bundle, manifest);
  const std::size_t n = bundle.n_classes();
  std::vector<std::vector<std::size_t>> candidates(n);
  Episode ep;
  for (std::size_t i = 0; i < bundle.items.size(); ++i) {
    if (splits[i] == Split::support) {
      candidates[bundle.items[i].label].push_back(i);
    } else {
      ep.test.push_back(i);
    }
  }
  std::string deficient;
  for (std::size_t c = 0; c < n; ++c) {
    if (candidates[c].size() < spec.n_shots) {
      deficient += (deficient.empty() ? "" : ", ") + bundle.class_names[c] + " (" +
                   std::to_string(candidates[c].size()) + ")";
    }
  }
  if (!deficient.empty()) {
    throw ValidationError("fewer than " + std::to_string(spec.n_shots) + " support items in: " + deficient);
  }
  for (std::size_t c = 0; c < n; ++c) {
    Rng rng(derive_seed(spec.seed, "episode", c));
    auto pool = candidates[c];
    fisher_yates(pool, rng);
    pool.resize(spec.n_shots);
    std::sort(pool.begin(), pool.end());
    ep.support.insert(ep.support.end(), pool.begin(), pool.end());
  }
  return ep;
}

struct SyntheticSpec {
  std::size_t n_classes = 5;
  std::size_t shots = 16;  ///< support items per class
  std::size_t test_per_class = 20;
  std::map<int, LayerGeometry> geometry = {{3, {4, 8, 8}}, {4, {8, 7, 7}}};
  std::size_t embed_dim = 32;
  double separation = 10.0;
  std::uint64_t seed = 1;
  std::size_t augmented_views = 0;
  double augment_noise = 0.5;

  void validate() const {
    if (n_classes == 0) throw ValidationError("synthetic bundle needs at least one class");
    if (shots + test_per_class == 0) throw ValidationError("synthetic bundle needs at least one item per class");
    if (embed_dim == 0) throw ValidationError("embedding width must be positive");
    if (!(separation >= 0.0) || !std::isfinite(separation)) throw ValidationError("separation must be >= 0");
    if (!(augment_noise >= 0.0)) throw ValidationError("augmentation noise must be >= 0");
    if (geometry.empty()) throw ValidationError("synthetic bundle needs at least one layer");
    for (const auto& [layer, g] : geometry) {
      require_known_layer(layer);
      if (g.channels == 0) throw ValidationError("layer " + std::to_string(layer) + " needs at least one channel");
      if (g.height < 2 || g.width < 2) {
        throw ValidationError("layer " + std::to_string(layer) + " maps must be at least 2x2, got " +
                              std::to_string(g.height) + "x" + std::to_string(g.width));
      }
    }
  }
};

struct SyntheticData {
  FeatureBundle bundle;
  SplitManifest manifest;
};

namespace detail {

inline void add_gaussian(std::span<float> values, double scale, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  for (auto& v : values) v = static_cast<float>(v + scale * normal(rng));
}

inline Tensor normalized(const Tensor& v) {
  return l2_normalize_rows(v.reshaped({1, v.size()})).reshaped(v.shape());
}

}  // namespace detail

/// Gaussian class clusters. Each class has a center per layer map and per
/// embedding with i.i.d. N(0, separation²/2) entries, so two centers differ
/// by `separation` noise units RMS per coordinate. Items add unit-variance
/// noise to the centers; embeddings are stored L2-normalized and the class
/// text embedding is the normalized direction of the embedding center.
inline SyntheticData generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticData out;
  auto& b = out.bundle;
  b.encoder_tag = "synthetic";
  b.geometry = spec.geometry;
  b.embed_dim = spec.embed_dim;
  b.extra_meta = {{"generator",
                   {{"separation", spec.separation},
                    {"seed", spec.seed},
                    {"shots", spec.shots},
                    {"test_per_class", spec.test_per_class},
                    {"augmented_views", spec.augmented_views},
                    {"augment_noise", spec.augment_noise}}}};
  b.text_features = Tensor({spec.n_classes, spec.embed_dim});
  const double center_scale = spec.separation / std::sqrt(2.0);

  std::vector<FeatureView> centers(spec.n_classes);
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    b.class_names.push_back("class_" + std::to_string(c));
    Rng rng(derive_seed(spec.seed, "center", c));
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& [layer, g] : spec.geometry) {
      Tensor center(g.shape());
      for (auto& v : center.data()) v = static_cast<float>(center_scale * normal(rng));
      centers[c].low_maps[layer] = std::move(center);
    }
    Tensor direction({spec.embed_dim});
    for (auto& v : direction.data()) v = static_cast<float>(normal(rng));
    const Tensor unit = detail::normalized(direction);
    std::copy(unit.data().begin(), unit.data().end(), b.text_features.row(c).begin());
    Tensor high({spec.embed_dim});
    for (std::size_t i = 0; i < spec.embed_dim; ++i) high[i] = static_cast<float>(center_scale * direction[i]);
    centers[c].high = std::move(high);
  }

  auto draw_view = [](const FeatureView& base, double scale, Rng& rng) {
    FeatureView v = base;
    for (auto& [layer, map] : v.low_maps) detail::add_gaussian(map.data(), scale, rng);
    detail::add_gaussian(v.high.data(), scale, rng);
    return v;
  };
  auto emit = [&](std::size_t c, std::size_t k, Split split) {
    const bool support = split == Split::support;
    Rng rng(derive_seed(spec.seed, support ? "support" : "test", c * 1000003ULL + k));
    BundleItem item;
    item.item_id = "c" + std::to_string(c) + (support ? "_s" : "_t") + std::to_string(k);
    item.label = c;
    FeatureView raw = draw_view(centers[c], 1.0, rng);
    if (support) {
      for (std::size_t a = 0; a < spec.augmented_views; ++a) {
        FeatureView view = draw_view(raw, spec.augment_noise, rng);
        view.high = detail::normalized(view.high);
        item.augmented_views.push_back(std::move(view));
      }
    }
    raw.high = detail::normalized(raw.high);
    item.features = std::move(raw);
    out.manifest[item.item_id] = split;
    b.items.push_back(std::move(item));
  };
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t k = 0; k < spec.shots; ++k) emit(c, k, Split::support);
  }
  for (std::size_t c = 0; c < spec.n_classes; ++c) {
    for (std::size_t k = 0; k < spec.test_per_class; ++k) emit(c, k, Split::test);
  }
  b.validate();
  return out;
}

}  // namespace mfa
