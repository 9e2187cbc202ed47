#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfadapter/adapter.hpp"
#include "mfadapter/bundle.hpp"
#include "mfadapter/cache_model.hpp"
#include "mfadapter/numerics.hpp"
#include "mfadapter/random.hpp"

namespace mfa {

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch_size = 256;
  std::size_t epochs = 100;
  std::uint64_t seed = 1;
  int scale = 2;
  std::vector<int> layers{3, 4};
  BranchWeights weights;
  Affinity affinity;
  InitMode init = InitMode::uniform;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void validate() const {
    if (!(lr >= 0.0)) throw ValidationError("learning rate must be >= 0");
    if (batch_size == 0) throw ValidationError("batch size must be positive");
    if (scale < 1 || scale > kMaxScale) throw ValidationError("scale must be in [1, 5]");
    if (layers.empty()) throw ValidationError("at least one layer is required");
    std::set<int> seen;
    for (int l : layers) {
      require_known_layer(l);
      if (!seen.insert(l).second) throw ValidationError("layer " + std::to_string(l) + " listed twice");
    }
    if (!(affinity.beta > 0.0)) throw ValidationError("affinity beta must be positive");
  }

  PipelineOptions options() const { return {weights, affinity}; }
  AdamHyper adam() const { return {lr, beta1, beta2, eps}; }
};

inline nlohmann::json to_json(const BranchWeights& w) {
  nlohmann::json local = nlohmann::json::object();
  for (const auto& [l, v] : w.local) local[std::to_string(l)] = v;
  return {{"local", local}, {"high", w.high}, {"text", w.text}};
}

inline BranchWeights branch_weights_from_json(const nlohmann::json& j) {
  BranchWeights w;
  for (const auto& [k, v] : j.at("local").items()) w.local[std::stoi(k)] = v.get<double>();
  w.high = j.at("high").get<double>();
  w.text = j.at("text").get<double>();
  return w;
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"lr", c.lr},
          {"batch_size", c.batch_size},
          {"epochs", c.epochs},
          {"seed", c.seed},
          {"scale", c.scale},
          {"layers", c.layers},
          {"weights", to_json(c.weights)},
          {"affinity", c.affinity.name()},
          {"beta", c.affinity.beta},
          {"init", to_string(c.init)},
          {"adam_beta1", c.beta1},
          {"adam_beta2", c.beta2},
          {"adam_eps", c.eps}};
}

/// Fields present in `j` override `base`.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {}) {
  try {
    if (j.contains("lr")) base.lr = j["lr"].get<double>();
    if (j.contains("batch_size")) base.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("epochs")) base.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("seed")) base.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("scale")) base.scale = j["scale"].get<int>();
    if (j.contains("layers")) base.layers = j["layers"].get<std::vector<int>>();
    if (j.contains("weights")) base.weights = branch_weights_from_json(j["weights"]);
    if (j.contains("beta")) base.affinity.beta = j["beta"].get<double>();
    if (j.contains("affinity")) base.affinity = Affinity::parse(j["affinity"].get<std::string>(), base.affinity.beta);
    if (j.contains("init")) base.init = parse_init_mode(j["init"].get<std::string>());
    if (j.contains("adam_beta1")) base.beta1 = j["adam_beta1"].get<double>();
    if (j.contains("adam_beta2")) base.beta2 = j["adam_beta2"].get<double>();
    if (j.contains("adam_eps")) base.eps = j["adam_eps"].get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("bad training configuration: ") + e.what());
  }
  return base;
}

/// Batch input from bundle items. `view[i]` picks the encoding of item i:
/// 0 is the primary features, k > 0 augmented view k−1.
template <std::floating_point T>
PipelineInput<T> make_input(const FeatureBundle& bundle, std::span<const std::size_t> items,
                            std::span<const std::size_t> view, int scale, std::span<const int> layers) {
  if (items.empty()) throw ValidationError("empty batch");
  auto pick = [&](std::size_t k) -> const FeatureView& {
    const auto& item = bundle.items.at(items[k]);
    const std::size_t v = view.empty() ? 0 : view[k];
    return v == 0 ? item.features : item.augmented_views.at(v - 1);
  };
  const UnfoldSpec spec = UnfoldSpec::for_scale(scale);
  PipelineInput<T> in;
  for (int layer : layers) {
    auto g = bundle.geometry.find(layer);
    if (g == bundle.geometry.end()) throw ValidationError("bundle has no layer " + std::to_string(layer));
    const std::size_t per = g->second.channels * g->second.height * g->second.width;
    BasicTensor<T> maps({items.size(), g->second.channels, g->second.height, g->second.width});
    for (std::size_t k = 0; k < items.size(); ++k) {
      const auto& src = pick(k).low_maps.at(layer);
      std::transform(src.data().begin(), src.data().end(), maps.data().begin() + k * per,
                     [](float v) { return static_cast<T>(v); });
    }
    in.meta[layer] = build_meta_feature(maps, spec, layer).values;
  }
  in.high = BasicTensor<T>({items.size(), bundle.embed_dim});
  for (std::size_t k = 0; k < items.size(); ++k) {
    const auto& h = pick(k).high;
    std::transform(h.data().begin(), h.data().end(), in.high.row(k).begin(), [](float v) { return static_cast<T>(v); });
  }
  return in;
}

template <std::floating_point T>
struct TrainResult {
  AdapterParams<T> params;
  std::vector<double> epoch_loss;  ///< mean training loss of each epoch
};

/// Checks that `cache` was built from `bundle` with the configured scale and layers.
template <std::floating_point T>
void check_cache_matches(const FeatureBundle& bundle, const CacheSet<T>& cache, const TrainConfig& config) {
  if (cache.local.scale != config.scale) {
    throw ValidationError("cache was built at scale " + std::to_string(cache.local.scale) +
                          ", configuration asks for scale " + std::to_string(config.scale));
  }
  for (int l : config.layers) {
    if (!cache.local.per_layer.contains(l)) throw ValidationError("cache lacks layer " + std::to_string(l));
  }
  if (cache.local.n_classes != bundle.n_classes()) {
    throw ValidationError("cache has " + std::to_string(cache.local.n_classes) + " classes, bundle " +
                          std::to_string(bundle.n_classes()));
  }
  const auto labels = cache.local.row_labels();
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const std::size_t idx = cache.local.support_index[r];
    if (idx >= bundle.items.size() || bundle.items[idx].label != labels[r]) {
      throw ValidationError("cache row " + std::to_string(r) + " does not match the bundle's support items");
    }
  }
  for (const auto& [layer, c] : cache.local.channels) {
    auto g = bundle.geometry.find(layer);
    if (g == bundle.geometry.end() || g->second.channels * kTaps != c) {
      throw ValidationError("cache layer " + std::to_string(layer) + " geometry differs from the bundle");
    }
  }
}

/// Trains the adapter on the cache's own support items. Only the adapter
/// parameters change; the bundle and cache are read-only.
template <std::floating_point T>
TrainResult<T> train(const FeatureBundle& bundle, const CacheSet<T>& cache, const TrainConfig& config,
                     std::optional<AdapterParams<T>> initial = std::nullopt) {
  config.validate();
  check_cache_matches(bundle, cache, config);

  TrainResult<T> result;
  if (initial) {
    result.params = std::move(*initial);
  } else {
    result.params = init_adapter(cache.local, derive_seed(config.seed, "init"), config.init);
  }
  for (auto it = result.params.per_layer.begin(); it != result.params.per_layer.end();) {
    if (std::find(config.layers.begin(), config.layers.end(), it->first) == config.layers.end()) {
      it = result.params.per_layer.erase(it);
    } else {
      ++it;
    }
  }

  std::map<int, AdamState<T>> w_state, b_state;
  for (const auto& [layer, p] : result.params.per_layer) {
    w_state.emplace(layer, AdamState<T>(p.weight.shape(), config.adam()));
    b_state.emplace(layer, AdamState<T>(p.bias.shape(), config.adam()));
  }

  const auto row_labels = cache.local.row_labels();
  const std::size_t nk = row_labels.size();
  const PipelineOptions opt = config.options();

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::vector<std::size_t> order(nk);
    std::iota(order.begin(), order.end(), std::size_t{0});
    Rng shuffle_rng(derive_seed(config.seed, "shuffle", epoch));
    fisher_yates(order, shuffle_rng);
    Rng view_rng(derive_seed(config.seed, "view", epoch));

    double loss_sum = 0.0;
    for (std::size_t start = 0; start < nk; start += config.batch_size) {
      const std::size_t end = std::min(nk, start + config.batch_size);
      std::vector<std::size_t> items, views, targets;
      for (std::size_t k = start; k < end; ++k) {
        const std::size_t row = order[k];
        const std::size_t idx = cache.local.support_index[row];
        items.push_back(idx);
        targets.push_back(row_labels[row]);
        const std::size_t n_views = bundle.items[idx].augmented_views.size();
        std::size_t v = 0;
        if (n_views > 0) v = std::uniform_int_distribution<std::size_t>(0, n_views)(view_rng);
        views.push_back(v);
      }
      const auto in = make_input<T>(bundle, items, views, config.scale, config.layers);
      const auto fwd = forward(in, cache, result.params, opt, true);
      const auto ce = softmax_cross_entropy(fwd.report.lg_final, targets);
      loss_sum += ce.loss * static_cast<double>(items.size());
      const auto grads = backward(fwd, ce.grad_logits, cache, result.params, opt);
      for (auto& [layer, p] : result.params.per_layer) {
        const auto& g = grads.per_layer.at(layer);
        adam_step(p.weight, g.weight, w_state.at(layer));
        adam_step(p.bias, g.bias, b_state.at(layer));
      }
    }
    result.epoch_loss.push_back(loss_sum / static_cast<double>(nk));
  }
  return result;
}

}  // namespace mfa
