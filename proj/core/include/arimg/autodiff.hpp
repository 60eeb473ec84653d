#pragma once

#include <functional>
#include <vector>

#include "arimg/tensor.hpp"

namespace arimg {

// Reverse-mode sweep from a scalar root (shape []). Returns gradients for the
// tracked leaves reachable from the root, accumulated in reverse tape order.
// A root that is not on a tape yields an empty map.
template <typename T>
GradMap<T> backward(const Tensor<T>& root);

using ScalarFn64 = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Compares analytic gradients of `f` at `xs` with central differences of step
// `eps`. Returns max over all components of
//   |analytic - numeric| / max(|analytic|, |numeric|, 1e-8),
// where differences within the rounding noise of the two probe evaluations
// count as zero (so an exactly linear f reports 0).
// `f` is called with tracked leaves once and with plain tensors for every
// finite-difference probe, so it must not depend on tape state.
double grad_check(const ScalarFn64& f, const std::vector<Tensor<double>>& xs, double eps);

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                  double eps);

}  // namespace arimg
