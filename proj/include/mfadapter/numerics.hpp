#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mfadapter/tensor.hpp"

namespace mfa {

/// Norm guard for row normalization.
inline constexpr double kNormEps = 1e-12;

namespace detail {

template <std::floating_point T>
void check_matmul(const BasicTensor<T>& a, const BasicTensor<T>& b, std::size_t ka, std::size_t kb,
                  const char* op) {
  require_rank(a, 2, op);
  require_rank(b, 2, op);
  if (ka != kb) {
    throw DimensionError(std::string(op) + ": inner dimensions disagree, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

}  // namespace detail

/// a[m×k] · b[k×n]. Sums accumulate in double.
template <std::floating_point T>
BasicTensor<T> matmul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::check_matmul(a, b, a.shape()[1], b.shape()[0], "matmul");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  BasicTensor<T> out({m, n});
  std::vector<double> acc(n);
  for (std::size_t i = 0; i < m; ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      if (aip == 0.0) continue;
      const T* brow = &b.at(p, 0);
      for (std::size_t j = 0; j < n; ++j) acc[j] += aip * static_cast<double>(brow[j]);
    }
    for (std::size_t j = 0; j < n; ++j) out.at(i, j) = static_cast<T>(acc[j]);
  }
  ensure_finite(out, "matmul");
  return out;
}

/// a[m×k] · b[n×k]ᵀ.
template <std::floating_point T>
BasicTensor<T> matmul_nt(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::check_matmul(a, b, a.shape()[1], b.shape()[1], "matmul_nt");
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  BasicTensor<T> out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = &a.at(i, 0);
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = &b.at(j, 0);
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += static_cast<double>(arow[p]) * static_cast<double>(brow[p]);
      out.at(i, j) = static_cast<T>(acc);
    }
  }
  ensure_finite(out, "matmul_nt");
  return out;
}

/// a[k×m]ᵀ · b[k×n].
template <std::floating_point T>
BasicTensor<T> matmul_tn(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  detail::check_matmul(a, b, a.shape()[0], b.shape()[0], "matmul_tn");
  const std::size_t k = a.shape()[0], m = a.shape()[1], n = b.shape()[1];
  std::vector<double> acc(m * n, 0.0);
  for (std::size_t p = 0; p < k; ++p) {
    for (std::size_t i = 0; i < m; ++i) {
      const double api = a.at(p, i);
      if (api == 0.0) continue;
      for (std::size_t j = 0; j < n; ++j) acc[i * n + j] += api * static_cast<double>(b.at(p, j));
    }
  }
  BasicTensor<T> out({m, n});
  for (std::size_t i = 0; i < acc.size(); ++i) out[i] = static_cast<T>(acc[i]);
  ensure_finite(out, "matmul_tn");
  return out;
}

/// Row-normalized copy of `x` together with the guarded row norms
/// max(‖row‖₂, kNormEps) that were divided out.
template <std::floating_point T>
struct NormalizedRows {
  BasicTensor<T> rows;
  std::vector<double> norms;
};

template <std::floating_point T>
NormalizedRows<T> l2_normalize_rows_with_norms(const BasicTensor<T>& x) {
  require_rank(x, 2, "l2_normalize_rows input");
  const std::size_t m = x.shape()[0], n = x.shape()[1];
  NormalizedRows<T> out{BasicTensor<T>(x.shape()), std::vector<double>(m)};
  for (std::size_t i = 0; i < m; ++i) {
    double ss = 0.0;
    for (std::size_t j = 0; j < n; ++j) ss += static_cast<double>(x.at(i, j)) * x.at(i, j);
    const double norm = std::max(std::sqrt(ss), kNormEps);
    out.norms[i] = norm;
    for (std::size_t j = 0; j < n; ++j) out.rows.at(i, j) = static_cast<T>(x.at(i, j) / norm);
  }
  return out;
}

template <std::floating_point T>
BasicTensor<T> l2_normalize_rows(const BasicTensor<T>& x) {
  return l2_normalize_rows_with_norms(x).rows;
}

template <std::floating_point T>
struct LossAndGrad {
  double loss = 0.0;
  BasicTensor<T> grad_logits;
};

/// Mean over the batch of −log softmax(logits)[target], and its gradient.
template <std::floating_point T>
LossAndGrad<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const std::size_t> targets) {
  require_rank(logits, 2, "softmax_cross_entropy logits");
  const std::size_t b = logits.shape()[0], n = logits.shape()[1];
  if (targets.size() != b) {
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for batch of " +
                         std::to_string(b));
  }
  LossAndGrad<T> out{0.0, BasicTensor<T>(logits.shape())};
  std::vector<double> p(n);
  for (std::size_t i = 0; i < b; ++i) {
    const std::size_t y = targets[i];
    if (y >= n) {
      throw IndexError("target " + std::to_string(y) + " out of range for " + std::to_string(n) + " classes");
    }
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, static_cast<double>(logits.at(i, j)));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      p[j] = std::exp(static_cast<double>(logits.at(i, j)) - mx);
      z += p[j];
    }
    const double log_z = std::log(z);
    out.loss += -(static_cast<double>(logits.at(i, y)) - mx - log_z);
    for (std::size_t j = 0; j < n; ++j) {
      const double pj = p[j] / z;
      out.grad_logits.at(i, j) = static_cast<T>((pj - (j == y ? 1.0 : 0.0)) / static_cast<double>(b));
    }
  }
  out.loss /= static_cast<double>(b);
  if (!std::isfinite(out.loss)) throw NumericError("non-finite cross-entropy loss");
  ensure_finite(out.grad_logits, "softmax_cross_entropy");
  return out;
}

struct AdamHyper {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <std::floating_point T>
struct AdamState {
  BasicTensor<T> first_moment;
  BasicTensor<T> second_moment;
  std::uint64_t step_count = 0;
  AdamHyper hyper;

  AdamState() = default;
  AdamState(const Shape& shape, AdamHyper h) : first_moment(shape), second_moment(shape), hyper(h) {}
};

/// One bias-corrected Adam update of `param` in place.
template <std::floating_point T>
void adam_step(BasicTensor<T>& param, const BasicTensor<T>& grad, AdamState<T>& state) {
  if (param.shape() != grad.shape() || param.shape() != state.first_moment.shape() ||
      param.shape() != state.second_moment.shape()) {
    throw DimensionError("adam_step: parameter " + shape_str(param.shape()) + ", gradient " +
                         shape_str(grad.shape()) + ", moments " + shape_str(state.first_moment.shape()));
  }
  const auto& h = state.hyper;
  state.step_count += 1;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(h.beta1, t);
  const double c2 = 1.0 - std::pow(h.beta2, t);
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = h.beta1 * state.first_moment[i] + (1.0 - h.beta1) * g;
    const double v = h.beta2 * state.second_moment[i] + (1.0 - h.beta2) * g * g;
    state.first_moment[i] = static_cast<T>(m);
    state.second_moment[i] = static_cast<T>(v);
    const double update = h.lr * (m / c1) / (std::sqrt(v / c2) + h.eps);
    param[i] = static_cast<T>(static_cast<double>(param[i]) - update);
  }
  ensure_finite(param, "adam_step");
}

/// Index of the largest entry; ties go to the lowest index.
template <std::floating_point T>
std::size_t argmax(std::span<const T> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

/// FNV-1a over raw bytes. Used for frozen-state and determinism checks.
class Checksum {
 public:
  void update(std::span<const std::uint8_t> bytes) noexcept {
    for (std::uint8_t b : bytes) {
      hash_ ^= b;
      hash_ *= 0x100000001b3ULL;
    }
  }
  template <std::floating_point T>
  void update(const BasicTensor<T>& t) noexcept {
    for (std::size_t e : t.shape()) update_u64(e);
    update(std::as_bytes(t.data()));
  }
  void update(std::span<const std::byte> bytes) noexcept {
    update(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
  }
  void update_u64(std::uint64_t v) noexcept {
    for (int i = 0; i < 8; ++i) {
      const std::uint8_t b = static_cast<std::uint8_t>(v >> (8 * i));
      update(std::span<const std::uint8_t>(&b, 1));
    }
  }
  void update(std::string_view s) noexcept {
    update_u64(s.size());
    update(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
  }
  std::uint64_t value() const noexcept { return hash_; }

 private:
  std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

}  // namespace mfa
