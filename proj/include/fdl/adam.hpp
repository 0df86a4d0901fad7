#ifndef FDL_ADAM_HPP
#define FDL_ADAM_HPP

#include <cmath>
#include <cstdint>
#include <span>
#include <unordered_map>
#include <vector>

#include "fdl/error.hpp"
#include "fdl/tensor.hpp"

namespace fdl {

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;
  std::int64_t step = 0;

  struct Moments {
    std::vector<T> m;
    std::vector<T> v;
  };
  std::unordered_map<const void*, Moments> moments;
};

/// One bias-corrected Adam update over `params` using their grad buffers.
///
/// The caller passes only trainable tensors; frozen ones must be left out.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  for (const auto& p : params)
    if (!p.has_grad())
      throw Error("adam_step: parameter " + shape_str(p.shape()) + " has no gradient");
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  for (auto& p : params) {
    auto& mom = state.moments[p.id()];
    if (mom.m.empty()) {
      mom.m.assign(p.size(), T(0));
      mom.v.assign(p.size(), T(0));
    }
    auto w = p.mutable_data();
    auto g = p.grad();
    const T b1 = T(state.beta1), b2 = T(state.beta2);
    for (std::size_t i = 0; i < w.size(); ++i) {
      mom.m[i] = b1 * mom.m[i] + (T(1) - b1) * g[i];
      mom.v[i] = b2 * mom.v[i] + (T(1) - b2) * g[i] * g[i];
      const double mhat = static_cast<double>(mom.m[i]) / bc1;
      const double vhat = static_cast<double>(mom.v[i]) / bc2;
      w[i] = static_cast<T>(static_cast<double>(w[i]) -
                            state.lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

/// Rescales gradients so their global L2 norm is at most max_norm.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>> params, double max_norm) {
  double sq = 0;
  for (const auto& p : params)
    for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  const double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    const T f = static_cast<T>(max_norm / norm);
    for (auto& p : params)
      for (auto& g : p.mutable_grad()) g *= f;
  }
  return norm;
}

}  // namespace fdl

#endif  // FDL_ADAM_HPP
