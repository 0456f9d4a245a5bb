#pragma once

#include <functional>

#include "attnsteer/tensor.hpp"

namespace attnsteer {

/// Central-difference gradient of a scalar function, one coordinate at a time.
/// This is the independent oracle that backward passes are tested against; it
/// must stay free of any autodiff machinery.
inline Tensor finite_difference_grad(const std::function<double(const Tensor&)>& f,
                                     const Tensor& x, double eps = 1e-6) {
  require(eps > 0.0, "finite_difference_grad: eps must be positive");
  Tensor g = Tensor::zeros(x.shape);
  Tensor probe = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    double orig = probe.data[i];
    probe.data[i] = orig + eps;
    double fp = f(probe);
    probe.data[i] = orig - eps;
    double fm = f(probe);
    probe.data[i] = orig;
    g.data[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

/// Relative error with an absolute floor so near-zero gradients do not blow
/// the ratio up: |a - b| / max(|a|, |b|, 1e-8).
inline double rel_err(double a, double b) {
  double denom = std::max({std::fabs(a), std::fabs(b), 1e-8});
  return std::fabs(a - b) / denom;
}

/// Largest per-coordinate relative error between two same-shape tensors.
inline double max_rel_err(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), "max_rel_err: shape mismatch " + a.shape_str() + " vs " +
                               b.shape_str());
  double worst = 0.0;
  for (size_t i = 0; i < a.data.size(); ++i)
    worst = std::max(worst, rel_err(a.data[i], b.data[i]));
  return worst;
}

}  // namespace attnsteer
