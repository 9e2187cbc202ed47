#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "mfadapter/cache_model.hpp"
#include "mfadapter/numerics.hpp"

namespace mfa {

/// Maps a cosine similarity to a retrieval weight.
///
/// `exp_cosine` is exp(s), the default. `sharpened` is exp(−β(1−s)), the
/// form used by key-value cache adapters with a sharpness knob; it is an
/// opt-in alternative for comparison runs.
struct Affinity {
  enum class Kind { exp_cosine, sharpened };
  Kind kind = Kind::exp_cosine;
  double beta = 1.0;

  double value(double s) const { return kind == Kind::exp_cosine ? std::exp(s) : std::exp(-beta * (1.0 - s)); }
  /// d value / d s, given the already computed value.
  double slope(double value) const { return kind == Kind::exp_cosine ? value : beta * value; }

  std::string name() const { return kind == Kind::exp_cosine ? "exp" : "sharpened"; }
  static Affinity parse(const std::string& name, double beta = 1.0) {
    if (name == "exp") return {Kind::exp_cosine, beta};
    if (name == "sharpened") return {Kind::sharpened, beta};
    throw ValidationError("unknown affinity \"" + name + "\" (expected exp or sharpened)");
  }
};

template <std::floating_point T>
BasicTensor<T> apply_affinity(const BasicTensor<T>& similarity, const Affinity& aff) {
  BasicTensor<T> out(similarity.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(aff.value(similarity[i]));
  ensure_finite(out, "affinity");
  return out;
}

/// aff(query · keysᵀ) · labels for already-normalized query and key rows.
template <std::floating_point T>
BasicTensor<T> retrieval_logits(const BasicTensor<T>& query, const BasicTensor<T>& keys,
                                const BasicTensor<T>& labels_onehot, const Affinity& aff) {
  return matmul(apply_affinity(matmul_nt(query, keys), aff), labels_onehot);
}

/// Cache-retrieval logits of the global embeddings.
template <std::floating_point T>
BasicTensor<T> high_logits(const BasicTensor<T>& query_high, const GlobalCache<T>& global,
                           const BasicTensor<T>& labels_onehot, const Affinity& aff = {}) {
  require_rank(query_high, 2, "query high features");
  if (query_high.dim(1) != global.high_features.dim(1)) {
    throw DimensionError("query embedding width " + std::to_string(query_high.dim(1)) + " != cache width " +
                         std::to_string(global.high_features.dim(1)));
  }
  return retrieval_logits(l2_normalize_rows(query_high), global.high_features, labels_onehot, aff);
}

/// Cosine similarity of each query embedding with each class text embedding.
template <std::floating_point T>
BasicTensor<T> text_logits(const BasicTensor<T>& query_high, const BasicTensor<T>& text_features) {
  require_rank(query_high, 2, "query high features");
  require_rank(text_features, 2, "text features");
  if (query_high.dim(1) != text_features.dim(1)) {
    throw DimensionError("query embedding width " + std::to_string(query_high.dim(1)) + " != text width " +
                         std::to_string(text_features.dim(1)));
  }
  return matmul_nt(l2_normalize_rows(query_high), l2_normalize_rows(text_features));
}

/// Per-branch multipliers of the fused sum. A layer missing from `local` has weight 1.
struct BranchWeights {
  std::map<int, double> local;
  double high = 1.0;
  double text = 1.0;

  double local_weight(int layer) const {
    auto it = local.find(layer);
    return it == local.end() ? 1.0 : it->second;
  }

  /// "all", or a comma list drawn from local3, local4, local, high, text.
  /// Listed branches get weight 1, the rest 0.
  static BranchWeights from_selection(const std::string& selection) {
    BranchWeights w;
    if (selection == "all" || selection.empty()) return w;
    w = BranchWeights{{{3, 0.0}, {4, 0.0}}, 0.0, 0.0};
    std::size_t start = 0;
    while (start <= selection.size()) {
      const std::size_t end = std::min(selection.find(',', start), selection.size());
      const std::string tok = selection.substr(start, end - start);
      if (tok == "local") {
        w.local[3] = w.local[4] = 1.0;
      } else if (tok == "local3") {
        w.local[3] = 1.0;
      } else if (tok == "local4") {
        w.local[4] = 1.0;
      } else if (tok == "high") {
        w.high = 1.0;
      } else if (tok == "text") {
        w.text = 1.0;
      } else {
        throw ValidationError("unknown branch \"" + tok + "\" (expected local, local3, local4, high, text, all)");
      }
      start = end + 1;
    }
    return w;
  }

  friend bool operator==(const BranchWeights&, const BranchWeights&) = default;
};

template <std::floating_point T>
struct LogitsReport {
  std::map<int, BasicTensor<T>> lg_local;
  BasicTensor<T> lg_high;
  BasicTensor<T> lg_text;
  BasicTensor<T> lg_final;
  std::vector<std::size_t> predictions;
};

template <std::floating_point T>
std::vector<std::size_t> argmax_rows(const BasicTensor<T>& logits) {
  std::vector<std::size_t> out(logits.dim(0));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = argmax(logits.row(i));
  return out;
}

/// Weighted sum of the branch logits and its argmax predictions.
template <std::floating_point T>
LogitsReport<T> fuse(std::map<int, BasicTensor<T>> lg_local, BasicTensor<T> lg_high, BasicTensor<T> lg_text,
                     const BranchWeights& weights = {}) {
  require_rank(lg_high, 2, "high logits");
  const Shape& shape = lg_high.shape();
  auto check = [&](const BasicTensor<T>& t, const std::string& what) {
    if (t.shape() != shape) {
      throw DimensionError(what + " logits " + shape_str(t.shape()) + " differ from " + shape_str(shape));
    }
  };
  check(lg_text, "text");
  for (const auto& [layer, t] : lg_local) check(t, "layer " + std::to_string(layer));

  std::vector<double> acc(lg_high.size(), 0.0);
  for (const auto& [layer, t] : lg_local) {
    const double w = weights.local_weight(layer);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += w * t[i];
  }
  for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += weights.high * lg_high[i] + weights.text * lg_text[i];

  LogitsReport<T> report;
  report.lg_final = BasicTensor<T>(shape);
  for (std::size_t i = 0; i < acc.size(); ++i) report.lg_final[i] = static_cast<T>(acc[i]);
  ensure_finite(report.lg_final, "fuse");
  report.predictions = argmax_rows(report.lg_final);
  report.lg_local = std::move(lg_local);
  report.lg_high = std::move(lg_high);
  report.lg_text = std::move(lg_text);
  return report;
}

}  // namespace mfa
