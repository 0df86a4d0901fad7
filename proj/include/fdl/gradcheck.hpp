#ifndef FDL_GRADCHECK_HPP
#define FDL_GRADCHECK_HPP

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "fdl/autodiff.hpp"

namespace fdl {

struct GradCheckResult {
  double max_rel_error = 0;
  // max over tensors of ||a - n|| / max(||a||, ||n||, 1e-8)
  double max_tensor_rel_error = 0;
  std::size_t worst_tensor = 0;
  std::size_t coordinates = 0;
  std::size_t worst_param = 0;  // index into params
  std::size_t worst_index = 0;
  double worst_analytic = 0;
  double worst_numeric = 0;
};

/// Compares reverse-mode gradients of `loss_fn` with central differences.
///
/// loss_fn builds the loss on the tape it is given. Relative error per
/// coordinate is |a - n| / max(|a|, |n|, 1e-8); the maximum is reported,
/// together with the same ratio taken over whole tensors in the 2-norm.
template <typename T>
GradCheckResult finite_difference_check(const std::function<Tensor<T>(Tape<T>&)>& loss_fn,
                                        std::vector<Tensor<T>> params, T eps) {
  if (!(eps > T(0))) throw Error("finite_difference_check: eps must be positive");
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  {
    Tape<T> tape;
    auto loss = loss_fn(tape);
    tape.backward(loss);
  }
  auto eval = [&] {
    Tape<T> probe(false);
    const T v = loss_fn(probe).item();
    if (!std::isfinite(v)) throw NumericError("finite_difference_check: non-finite loss");
    return static_cast<double>(v);
  };

  GradCheckResult res;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto& p = params[pi];
    std::vector<T> analytic(p.size(), T(0));
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto w = p.mutable_data();
    double diff2 = 0, a2 = 0, n2 = 0;
    for (std::size_t i = 0; i < w.size(); ++i) {
      const T orig = w[i];
      w[i] = orig + eps;
      const double up = eval();
      w[i] = orig - eps;
      const double down = eval();
      w[i] = orig;
      // Actual step after rounding the perturbed coordinates to T.
      const double step = static_cast<double>(T(orig + eps)) - static_cast<double>(T(orig - eps));
      const double numeric = (up - down) / step;
      const double a = static_cast<double>(analytic[i]);
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      diff2 += (a - numeric) * (a - numeric);
      a2 += a * a;
      n2 += numeric * numeric;
      ++res.coordinates;
      if (err > res.max_rel_error) {
        res.max_rel_error = err;
        res.worst_param = pi;
        res.worst_index = i;
        res.worst_analytic = a;
        res.worst_numeric = numeric;
      }
    }
    const double terr = std::sqrt(diff2) / std::max({std::sqrt(a2), std::sqrt(n2), 1e-8});
    if (terr > res.max_tensor_rel_error) {
      res.max_tensor_rel_error = terr;
      res.worst_tensor = pi;
    }
  }
  return res;
}

}  // namespace fdl

#endif  // FDL_GRADCHECK_HPP
