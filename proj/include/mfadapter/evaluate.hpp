#pragma once

#include <algorithm>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfadapter/adapter.hpp"
#include "mfadapter/fusion.hpp"
#include "mfadapter/training.hpp"

namespace mfa {

/// How query items reach the local branch.
enum class LocalPath {
  adapter,    ///< trained (or initialized) 1-D convolution
  induction,  ///< parameter-free max/mean MF-Unit, the same map the cache uses
};

struct EvalOptions {
  PipelineOptions pipeline;
  LocalPath path = LocalPath::adapter;
  int scale = 2;
  std::vector<int> layers{3, 4};
  std::size_t batch_size = 256;
};

template <std::floating_point T>
struct EvalResult {
  double accuracy = 0.0;
  std::map<std::string, double> branch_accuracy;  ///< "local3", "local4", "high", "text", "fused"
  LogitsReport<T> report;
  std::vector<std::size_t> items;
  std::vector<std::size_t> labels;
};

template <std::floating_point T>
double accuracy_of(const std::vector<std::size_t>& predictions, const std::vector<std::size_t>& labels) {
  if (labels.empty()) return 0.0;
  std::size_t hit = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) hit += predictions[i] == labels[i];
  return static_cast<double>(hit) / static_cast<double>(labels.size());
}

/// Branch and fused logits of `items` in batches of `opt.batch_size`.
/// `params` may be null only on the induction path.
template <std::floating_point T>
LogitsReport<T> predict(const FeatureBundle& bundle, std::span<const std::size_t> items, const CacheSet<T>& cache,
                        const AdapterParams<T>* params, const EvalOptions& opt) {
  if (items.empty()) throw ValidationError("nothing to evaluate");
  if (opt.batch_size == 0) throw ValidationError("batch size must be positive");
  if (opt.path == LocalPath::adapter && params == nullptr) {
    throw ValidationError("the adapter path needs adapter parameters");
  }
  if (cache.local.scale != opt.scale) {
    throw DimensionError("cache scale " + std::to_string(cache.local.scale) + " differs from query scale " +
                         std::to_string(opt.scale));
  }
  std::optional<LogitsReport<T>> all;
  for (std::size_t start = 0; start < items.size(); start += opt.batch_size) {
    const auto chunk = items.subspan(start, std::min(opt.batch_size, items.size() - start));
    const auto in = make_input<T>(bundle, chunk, {}, opt.scale, opt.layers);
    std::map<int, BasicTensor<T>> local;
    for (const auto& [layer, mf] : in.meta) {
      if (opt.path == LocalPath::adapter) {
        local[layer] = local_logits(adapter_forward(mf, params->layer(layer)), cache.local, layer,
                                    opt.pipeline.affinity);
      } else {
        MetaFeature<T> meta{mf, layer, {}};
        local[layer] = local_logits(induce_mf_unit(meta).values, cache.local, layer, opt.pipeline.affinity);
      }
    }
    auto part = fuse(std::move(local), high_logits(in.high, cache.global, cache.local.labels_onehot, opt.pipeline.affinity),
                     text_logits(in.high, cache.global.text_features), opt.pipeline.weights);
    if (!all) {
      all = std::move(part);
      continue;
    }
    for (auto& [layer, t] : all->lg_local) t = concat_rows(t, part.lg_local.at(layer));
    all->lg_high = concat_rows(all->lg_high, part.lg_high);
    all->lg_text = concat_rows(all->lg_text, part.lg_text);
    all->lg_final = concat_rows(all->lg_final, part.lg_final);
    all->predictions.insert(all->predictions.end(), part.predictions.begin(), part.predictions.end());
  }
  return std::move(*all);
}

/// Top-1 accuracy of the fused prediction and of each branch alone.
template <std::floating_point T>
EvalResult<T> evaluate(const FeatureBundle& bundle, std::span<const std::size_t> items, const CacheSet<T>& cache,
                       const AdapterParams<T>* params, const EvalOptions& opt) {
  EvalResult<T> r;
  r.report = predict(bundle, items, cache, params, opt);
  r.items.assign(items.begin(), items.end());
  for (std::size_t i : items) r.labels.push_back(bundle.items[i].label);
  r.accuracy = accuracy_of<T>(r.report.predictions, r.labels);
  r.branch_accuracy["fused"] = r.accuracy;
  for (const auto& [layer, t] : r.report.lg_local) {
    r.branch_accuracy["local" + std::to_string(layer)] = accuracy_of<T>(argmax_rows(t), r.labels);
  }
  r.branch_accuracy["high"] = accuracy_of<T>(argmax_rows(r.report.lg_high), r.labels);
  r.branch_accuracy["text"] = accuracy_of<T>(argmax_rows(r.report.lg_text), r.labels);
  return r;
}

/// One JSON object per item: id, label, prediction, and every branch's logits.
template <std::floating_point T>
std::string logits_records(const FeatureBundle& bundle, const EvalResult<T>& r) {
  std::ostringstream os;
  auto row = [](const BasicTensor<T>& t, std::size_t i) {
    auto v = t.row(i);
    return std::vector<double>(v.begin(), v.end());
  };
  for (std::size_t i = 0; i < r.items.size(); ++i) {
    nlohmann::json logits = nlohmann::json::object();
    for (const auto& [layer, t] : r.report.lg_local) logits["local" + std::to_string(layer)] = row(t, i);
    logits["high"] = row(r.report.lg_high, i);
    logits["text"] = row(r.report.lg_text, i);
    logits["final"] = row(r.report.lg_final, i);
    nlohmann::json rec = {{"item_id", bundle.items[r.items[i]].item_id},
                          {"label", r.labels[i]},
                          {"prediction", r.report.predictions[i]},
                          {"logits", logits}};
    os << rec.dump() << '\n';
  }
  return os.str();
}

}  // namespace mfa
