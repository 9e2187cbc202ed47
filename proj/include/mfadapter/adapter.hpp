#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "mfadapter/binary_io.hpp"
#include "mfadapter/cache_model.hpp"
#include "mfadapter/fusion.hpp"
#include "mfadapter/meta_feature.hpp"
#include "mfadapter/numerics.hpp"
#include "mfadapter/random.hpp"

namespace mfa {

/// Pointwise 1-D convolution of one layer: c input channels → 2 outputs.
template <std::floating_point T>
struct LayerParams {
  BasicTensor<T> weight;  // [2 × c × kw], kw = 1
  BasicTensor<T> bias;    // [2]

  std::size_t channels() const { return weight.dim(1); }
  friend bool operator==(const LayerParams&, const LayerParams&) = default;
};

template <std::floating_point T>
struct AdapterParams {
  std::map<int, LayerParams<T>> per_layer;

  const LayerParams<T>& layer(int l) const {
    auto it = per_layer.find(l);
    if (it == per_layer.end()) throw ValidationError("adapter has no layer " + std::to_string(l));
    return it->second;
  }
  friend bool operator==(const AdapterParams&, const AdapterParams&) = default;
};

inline constexpr std::size_t kAdapterOutputs = 2;
inline constexpr std::size_t kKernelWidth = 1;

enum class InitMode {
  uniform,  ///< U(−1/√c, 1/√c) for weights and bias
  mean,     ///< both outputs start as the window mean (the linear part of the induction)
};

inline InitMode parse_init_mode(const std::string& s) {
  if (s == "uniform") return InitMode::uniform;
  if (s == "mean") return InitMode::mean;
  throw ValidationError("unknown init mode \"" + s + "\" (expected uniform or mean)");
}
inline std::string to_string(InitMode m) { return m == InitMode::uniform ? "uniform" : "mean"; }

template <std::floating_point T>
LayerParams<T> init_layer(std::size_t channels, InitMode mode, Rng& rng) {
  LayerParams<T> p{BasicTensor<T>({kAdapterOutputs, channels, kKernelWidth}), BasicTensor<T>({kAdapterOutputs})};
  if (mode == InitMode::mean) {
    for (auto& w : p.weight.data()) w = static_cast<T>(1.0 / static_cast<double>(channels));
    return p;
  }
  const double bound = 1.0 / std::sqrt(static_cast<double>(channels));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& w : p.weight.data()) w = static_cast<T>(u(rng));
  for (auto& b : p.bias.data()) b = static_cast<T>(u(rng));
  return p;
}

/// Fresh adapter for every layer of `cache`, seeded per layer.
template <std::floating_point T>
AdapterParams<T> init_adapter(const MFUnitCache<T>& cache, std::uint64_t seed, InitMode mode = InitMode::uniform) {
  AdapterParams<T> params;
  for (const auto& [layer, c] : cache.channels) {
    Rng rng(derive_seed(seed, "adapter-init", static_cast<std::uint64_t>(layer)));
    params.per_layer[layer] = init_layer<T>(c, mode, rng);
  }
  return params;
}

/// out[b,o,j] = bias[o] + Σ_i weight[o,i,0] · mf[b,i,j].
template <std::floating_point T>
BasicTensor<T> adapter_forward(const BasicTensor<T>& mf, const LayerParams<T>& p) {
  require_rank(mf, 3, "meta-feature");
  const std::size_t b = mf.dim(0), c = mf.dim(1), ms = mf.dim(2);
  if (c != p.channels()) {
    throw DimensionError("meta-feature has " + std::to_string(c) + " channels, adapter expects " +
                         std::to_string(p.channels()));
  }
  BasicTensor<T> out({b, kAdapterOutputs, ms});
  std::vector<double> acc(ms);
  for (std::size_t n = 0; n < b; ++n) {
    for (std::size_t o = 0; o < kAdapterOutputs; ++o) {
      std::fill(acc.begin(), acc.end(), static_cast<double>(p.bias[o]));
      for (std::size_t i = 0; i < c; ++i) {
        const double w = p.weight.at(o, i, 0);
        const T* x = &mf.at(n, i, 0);
        for (std::size_t j = 0; j < ms; ++j) acc[j] += w * x[j];
      }
      T* dst = &out.at(n, o, 0);
      for (std::size_t j = 0; j < ms; ++j) dst[j] = static_cast<T>(acc[j]);
    }
  }
  ensure_finite(out, "adapter_forward");
  return out;
}

template <std::floating_point T>
BasicTensor<T> adapter_forward(const MetaFeature<T>& mf, const LayerParams<T>& p) {
  return adapter_forward(mf.values, p);
}

/// Intermediates of one layer's local branch kept for the backward pass.
template <std::floating_point T>
struct LocalTape {
  BasicTensor<T> input;          // meta-feature values [B × c × ms]
  NormalizedRows<T> query;       // flattened adapter output, normalized
  BasicTensor<T> affinity;       // aff(similarity) [B × NK]
};

namespace detail {

template <std::floating_point T>
BasicTensor<T> local_logits_impl(const BasicTensor<T>& adapted, const MFUnitCache<T>& cache, int layer,
                                 const Affinity& aff, LocalTape<T>* tape) {
  require_rank(adapted, 3, "adapted features");
  const auto& keys = cache.layer(layer);
  const std::size_t b = adapted.dim(0);
  const std::size_t width = adapted.size() / b;
  if (width != keys.dim(1)) {
    throw DimensionError("layer " + std::to_string(layer) + ": flattened width " + std::to_string(width) +
                         " != cache width " + std::to_string(keys.dim(1)));
  }
  auto query = l2_normalize_rows_with_norms(adapted.reshaped({b, width}));
  auto weights = apply_affinity(matmul_nt(query.rows, keys), aff);
  auto logits = matmul(weights, cache.labels_onehot);
  if (tape) {
    tape->query = std::move(query);
    tape->affinity = std::move(weights);
  }
  return logits;
}

}  // namespace detail

/// Retrieval logits of adapted (or induced) [B × 2 × ms] features against the
/// cached support MF-Units of `layer`: aff(φ(q) · φ(cache)ᵀ) · L.
template <std::floating_point T>
BasicTensor<T> local_logits(const BasicTensor<T>& adapted, const MFUnitCache<T>& cache, int layer,
                            const Affinity& aff = {}) {
  return detail::local_logits_impl<T>(adapted, cache, layer, aff, nullptr);
}

struct PipelineOptions {
  BranchWeights weights;
  Affinity affinity;
};

/// Meta-features of a batch, keyed by layer, plus the batch's global embeddings.
template <std::floating_point T>
struct PipelineInput {
  std::map<int, BasicTensor<T>> meta;  // layer → [B × c × ms]
  BasicTensor<T> high;                 // [B × D]
};

template <std::floating_point T>
struct ForwardPass {
  LogitsReport<T> report;
  std::map<int, LocalTape<T>> tapes;  // empty unless recorded
};

/// Full forward pipeline: adapter → local retrieval per layer, plus the high
/// and text branches, fused.
template <std::floating_point T>
ForwardPass<T> forward(const PipelineInput<T>& in, const CacheSet<T>& cache, const AdapterParams<T>& params,
                       const PipelineOptions& opt, bool record) {
  ForwardPass<T> fwd;
  std::map<int, BasicTensor<T>> local;
  for (const auto& [layer, mf] : in.meta) {
    const auto adapted = adapter_forward(mf, params.layer(layer));
    LocalTape<T>* tape = nullptr;
    if (record) {
      tape = &fwd.tapes[layer];
      tape->input = mf;
    }
    local[layer] = detail::local_logits_impl(adapted, cache.local, layer, opt.affinity, tape);
  }
  auto lg_high = high_logits(in.high, cache.global, cache.local.labels_onehot, opt.affinity);
  auto lg_text = text_logits(in.high, cache.global.text_features);
  fwd.report = fuse(std::move(local), std::move(lg_high), std::move(lg_text), opt.weights);
  return fwd;
}

template <std::floating_point T>
struct AdapterGrads {
  std::map<int, LayerParams<T>> per_layer;
};

/// Reverse-mode gradients of the adapter parameters given dLoss/dLG_final.
/// The cache is treated as constant.
template <std::floating_point T>
AdapterGrads<T> backward(const ForwardPass<T>& fwd, const BasicTensor<T>& grad_final, const CacheSet<T>& cache,
                         const AdapterParams<T>& params, const PipelineOptions& opt) {
  if (fwd.tapes.size() != fwd.report.lg_local.size() || fwd.tapes.empty()) {
    throw StateError("backward requires a forward pass recorded with intermediates");
  }
  if (grad_final.shape() != fwd.report.lg_final.shape()) {
    throw DimensionError("upstream gradient " + shape_str(grad_final.shape()) + " does not match logits " +
                         shape_str(fwd.report.lg_final.shape()));
  }
  AdapterGrads<T> grads;
  for (const auto& [layer, tape] : fwd.tapes) {
    if (tape.input.empty() || tape.affinity.empty()) {
      throw StateError("layer " + std::to_string(layer) + " tape is missing forward intermediates");
    }
    const double w_layer = opt.weights.local_weight(layer);
    const auto& p = params.layer(layer);
    const auto& keys = cache.local.layer(layer);
    const std::size_t b = tape.input.dim(0), c = tape.input.dim(1), ms = tape.input.dim(2);

    // dLG_l = w·g ; dA = dLG_l · Lᵀ ; dS = dA ⊙ aff'(S)
    BasicTensor<T> d_affinity = matmul_nt(grad_final, cache.local.labels_onehot);
    for (std::size_t i = 0; i < d_affinity.size(); ++i) {
      d_affinity[i] = static_cast<T>(w_layer * d_affinity[i] * opt.affinity.slope(tape.affinity[i]));
    }
    // d(normalized query) = dS · keys
    const BasicTensor<T> d_unit = matmul(d_affinity, keys);

    // through x ↦ x / max(‖x‖, ε)
    const auto& q = tape.query;
    const std::size_t width = q.rows.dim(1);
    std::vector<double> d_flat(b * width);
    for (std::size_t n = 0; n < b; ++n) {
      const double norm = q.norms[n];
      const T* u = &q.rows.at(n, 0);
      const T* du = &d_unit.at(n, 0);
      double dot = 0.0;
      if (norm > kNormEps) {
        for (std::size_t j = 0; j < width; ++j) dot += static_cast<double>(u[j]) * du[j];
      }
      for (std::size_t j = 0; j < width; ++j) d_flat[n * width + j] = (du[j] - u[j] * dot) / norm;
    }

    // through the pointwise convolution
    LayerParams<T> g{BasicTensor<T>(p.weight.shape()), BasicTensor<T>(p.bias.shape())};
    for (std::size_t o = 0; o < kAdapterOutputs; ++o) {
      double gb = 0.0;
      std::vector<double> gw(c, 0.0);
      for (std::size_t n = 0; n < b; ++n) {
        const double* da = &d_flat[n * width + o * ms];
        for (std::size_t j = 0; j < ms; ++j) gb += da[j];
        for (std::size_t i = 0; i < c; ++i) {
          const T* x = &tape.input.at(n, i, 0);
          double s = 0.0;
          for (std::size_t j = 0; j < ms; ++j) s += da[j] * x[j];
          gw[i] += s;
        }
      }
      g.bias[o] = static_cast<T>(gb);
      for (std::size_t i = 0; i < c; ++i) g.weight.at(o, i, 0) = static_cast<T>(gw[i]);
    }
    ensure_finite(g.weight, "backward");
    grads.per_layer[layer] = std::move(g);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// "MFAD" adapter checkpoint
//
//   "MFAD" | u32 version | u32 n_layers
//   n_layers × { u32 layer, u32 c, u32 kw }
//   per layer: tensor "weight/<layer>" [2×c×kw], tensor "bias/<layer>" [2]
//   u64 len, UTF-8 JSON of the training configuration
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  AdapterParams<float> params;
  nlohmann::json train_config = nlohmann::json::object();

  friend bool operator==(const Checkpoint&, const Checkpoint&) = default;
};

inline io::Bytes serialize_checkpoint(const Checkpoint& ck) {
  io::ByteWriter w;
  w.magic("MFAD");
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(ck.params.per_layer.size()));
  for (const auto& [layer, p] : ck.params.per_layer) {
    w.u32(static_cast<std::uint32_t>(layer));
    w.u32(static_cast<std::uint32_t>(p.channels()));
    w.u32(static_cast<std::uint32_t>(kKernelWidth));
  }
  for (const auto& [layer, p] : ck.params.per_layer) {
    w.tensor("weight/" + std::to_string(layer), p.weight);
    w.tensor("bias/" + std::to_string(layer), p.bias);
  }
  w.blob(ck.train_config.dump());
  return std::move(w).bytes();
}

inline Checkpoint deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader r(bytes);
  r.expect_magic("MFAD");
  const std::uint64_t version_at = r.offset();
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(v), version_at);
  }
  const std::uint32_t n_layers = r.u32();
  if (n_layers == 0 || n_layers > 2) r.fail("checkpoint must hold one or two layers");
  std::vector<std::pair<int, std::size_t>> header;
  for (std::uint32_t i = 0; i < n_layers; ++i) {
    const std::uint64_t at = r.offset();
    const int layer = static_cast<int>(r.u32());
    const std::size_t c = r.u32();
    const std::uint32_t kw = r.u32();
    if ((layer != 3 && layer != 4) || c == 0 || kw != kKernelWidth) throw FormatError("bad checkpoint layer entry", at);
    header.emplace_back(layer, c);
  }
  Checkpoint ck;
  for (const auto& [layer, c] : header) {
    const std::uint64_t at = r.offset();
    auto [wname, weight] = r.tensor();
    auto [bname, bias] = r.tensor();
    const std::string suffix = std::to_string(layer);
    if (wname != "weight/" + suffix || bname != "bias/" + suffix) throw FormatError("unexpected checkpoint array", at);
    if (weight.shape() != Shape{kAdapterOutputs, c, kKernelWidth} || bias.shape() != Shape{kAdapterOutputs}) {
      throw FormatError("checkpoint array shape disagrees with header", at);
    }
    if (!weight.all_finite() || !bias.all_finite()) throw FormatError("checkpoint holds non-finite values", at);
    ck.params.per_layer[layer] = LayerParams<float>{std::move(weight), std::move(bias)};
  }
  const std::uint64_t cfg_at = r.offset();
  try {
    ck.train_config = nlohmann::json::parse(r.blob());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed checkpoint config: ") + e.what(), cfg_at);
  }
  if (!r.at_end()) r.fail("trailing bytes after checkpoint");
  return ck;
}

inline void write_checkpoint(const Checkpoint& ck, const std::filesystem::path& path) {
  io::write_file(path, serialize_checkpoint(ck));
}

inline Checkpoint read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return deserialize_checkpoint(bytes);
}

template <std::floating_point To, std::floating_point From>
AdapterParams<To> params_cast(const AdapterParams<From>& p) {
  AdapterParams<To> out;
  for (const auto& [layer, lp] : p.per_layer) {
    out.per_layer[layer] = LayerParams<To>{tensor_cast<To>(lp.weight), tensor_cast<To>(lp.bias)};
  }
  return out;
}

template <std::floating_point T>
std::uint64_t params_checksum(const AdapterParams<T>& p) {
  Checksum h;
  for (const auto& [layer, lp] : p.per_layer) {
    h.update_u64(static_cast<std::uint64_t>(layer));
    h.update(lp.weight);
    h.update(lp.bias);
  }
  return h.value();
}

}  // namespace mfa
