// Shared test helpers: naive reference implementations and scratch files.
#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "mfadapter/mfadapter.hpp"

namespace mfa::testing {

namespace fs = std::filesystem;

/// Quadruple-loop im2col for a 2×2 kernel, stride 1, no padding.
template <std::floating_point T>
BasicTensor<T> naive_unfold(const BasicTensor<T>& map, int d) {
  const std::size_t B = map.dim(0), C = map.dim(1), h = map.dim(2), w = map.dim(3);
  const std::size_t rows = h - d, cols = w - d;
  BasicTensor<T> out({B, 4 * C, rows * cols});
  for (std::size_t n = 0; n < B; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t col = 0; col < cols; ++col) {
          const std::size_t j = r * cols + col;
          auto px = [&](std::size_t y, std::size_t x) { return map[((n * C + c) * h + y) * w + x]; };
          out.at(n, 4 * c + 0, j) = px(r, col);
          out.at(n, 4 * c + 1, j) = px(r, col + d);
          out.at(n, 4 * c + 2, j) = px(r + d, col);
          out.at(n, 4 * c + 3, j) = px(r + d, col + d);
        }
  return out;
}

inline std::vector<std::vector<double>> naive_matmul(const std::vector<std::vector<double>>& a,
                                                     const std::vector<std::vector<double>>& b) {
  std::vector<std::vector<double>> out(a.size(), std::vector<double>(b[0].size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b[0].size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) out[i][j] += a[i][k] * b[k][j];
  return out;
}

inline std::vector<double> unit(std::vector<double> v) {
  double s = 0;
  for (double x : v) s += x * x;
  s = std::max(std::sqrt(s), 1e-12);
  for (double& x : v) x /= s;
  return v;
}

inline double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

/// Cross-entropy of the fused logits, computed from first principles in
/// double: conv, flatten, normalize, exp-cosine retrieval against the cached
/// MF-Units, plus the global-retrieval and text-cosine branches.
template <std::floating_point T>
double reference_loss(const PipelineInput<T>& in, const CacheSet<T>& cache, const AdapterParams<T>& params,
                      const std::vector<std::size_t>& targets) {
  const std::size_t B = in.high.dim(0), N = cache.local.n_classes, NK = cache.local.rows();
  std::vector<std::vector<double>> logits(B, std::vector<double>(N, 0.0));
  auto cache_row = [](const BasicTensor<T>& t, std::size_t r) {
    auto s = t.row(r);
    return std::vector<double>(s.begin(), s.end());
  };
  for (const auto& [layer, mf] : in.meta) {
    const auto& p = params.layer(layer);
    const std::size_t c = mf.dim(1), ms = mf.dim(2);
    for (std::size_t n = 0; n < B; ++n) {
      std::vector<double> q(2 * ms);
      for (std::size_t o = 0; o < 2; ++o)
        for (std::size_t j = 0; j < ms; ++j) {
          double s = p.bias[o];
          for (std::size_t i = 0; i < c; ++i) s += static_cast<double>(p.weight.at(o, i, 0)) * mf.at(n, i, j);
          q[o * ms + j] = s;
        }
      q = unit(q);
      for (std::size_t r = 0; r < NK; ++r) {
        const double a = std::exp(dot(q, cache_row(cache.local.layer(layer), r)));
        for (std::size_t k = 0; k < N; ++k) logits[n][k] += a * cache.local.labels_onehot.at(r, k);
      }
    }
  }
  for (std::size_t n = 0; n < B; ++n) {
    const auto h = unit(cache_row(in.high, n));
    for (std::size_t r = 0; r < NK; ++r) {
      const double a = std::exp(dot(h, cache_row(cache.global.high_features, r)));
      for (std::size_t k = 0; k < N; ++k) logits[n][k] += a * cache.local.labels_onehot.at(r, k);
    }
    for (std::size_t k = 0; k < N; ++k) logits[n][k] += dot(h, unit(cache_row(cache.global.text_features, k)));
  }
  double loss = 0;
  for (std::size_t n = 0; n < B; ++n) {
    double mx = logits[n][0];
    for (double v : logits[n]) mx = std::max(mx, v);
    double z = 0;
    for (double v : logits[n]) z += std::exp(v - mx);
    loss += mx + std::log(z) - logits[n][targets[n]];
  }
  return loss / static_cast<double>(B);
}

/// Small bundle for gradient checks: N classes, K shots, C channels, 3×3
/// maps (ms = 5 at scale 2), embedding width 4.
inline SyntheticData tiny_bundle(std::size_t n, std::size_t k, std::size_t channels, std::uint64_t seed) {
  SyntheticSpec s;
  s.n_classes = n;
  s.shots = k;
  s.test_per_class = 1;
  s.geometry = {{3, {channels, 3, 3}}, {4, {channels, 3, 3}}};
  s.embed_dim = 4;
  s.separation = 1.0;
  s.seed = seed;
  return generate_synthetic(s);
}

template <std::floating_point T>
void randomize(AdapterParams<T>& p, std::uint64_t seed, double scale = 0.5) {
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, scale);
  for (auto& [layer, lp] : p.per_layer) {
    for (auto& v : lp.weight.data()) v = static_cast<T>(normal(rng));
    for (auto& v : lp.bias.data()) v = static_cast<T>(normal(rng));
  }
}

inline const std::vector<int> kGradLayers{3, 4};

/// Two test items against a cache of the support items, in double.
struct GradCase {
  SyntheticData data;
  CacheSet<double> cache;
  PipelineInput<double> input;
  std::vector<std::size_t> targets;
};

inline GradCase grad_case(std::uint64_t seed) {
  GradCase g{tiny_bundle(2, 1, 2, seed), {}, {}, {}};
  const auto ep = sample_episode(g.data.bundle, g.data.manifest, {1, seed});
  g.cache = build_cache<double>(g.data.bundle, ep.support, 2, kGradLayers);
  g.input = make_input<double>(g.data.bundle, ep.test, {}, 2, kGradLayers);
  for (std::size_t i : ep.test) g.targets.push_back(g.data.bundle.items[i].label);
  return g;
}

/// Largest |a−b| / max(|a|, |b|, floor) over every adapter parameter.
inline double max_relative_error(const GradCase& g, const AdapterParams<double>& params, double h, double floor) {
  const auto fwd = forward(g.input, g.cache, params, {}, true);
  const auto ce = softmax_cross_entropy(fwd.report.lg_final, g.targets);
  const auto grads = backward(fwd, ce.grad_logits, g.cache, params, {});
  double worst = 0;
  for (const auto& [layer, lp] : params.per_layer) {
    auto check = [&](auto member) {
      const auto& analytic = grads.per_layer.at(layer).*member;
      for (std::size_t i = 0; i < analytic.size(); ++i) {
        auto plus = params, minus = params;
        (plus.per_layer[layer].*member)[i] += h;
        (minus.per_layer[layer].*member)[i] -= h;
        const double fd =
            (reference_loss(g.input, g.cache, plus, g.targets) - reference_loss(g.input, g.cache, minus, g.targets)) /
            (2 * h);
        const double denom = std::max({std::abs(fd), std::abs(analytic[i]), floor});
        worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
      }
    };
    check(&LayerParams<double>::weight);
    check(&LayerParams<double>::bias);
  }
  return worst;
}

struct ScratchDir {
  fs::path path;
  explicit ScratchDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("mfa_test_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~ScratchDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  fs::path operator/(const std::string& name) const { return path / name; }
};

inline std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// Runs the CLI with `args`, output captured to `log`; returns the exit code.
inline int run_cli(const std::string& args, const fs::path& log) {
#ifdef MFA_CLI_PATH
  const std::string cmd = std::string("\"") + MFA_CLI_PATH + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int status = std::system(cmd.c_str());
  if (status == -1) return -1;
  return WEXITSTATUS(status);
#else
  (void)args;
  (void)log;
  return -1;
#endif
}

}  // namespace mfa::testing
