#include "arimg/autodiff.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <string>

namespace arimg {

template <typename T>
GradMap<T> backward(const Tensor<T>& root) {
  if (root.rank() != 0) {
    throw ContractError("backward: root must be a scalar of shape [], got " + shape_str(root.shape()));
  }
  GradMap<T> out;
  if (!root.requires_grad()) return out;
  const Tape<T>& tape = *root.tape();
  std::vector<std::vector<T>> grads(tape.num_nodes());
  grads[static_cast<std::size_t>(root.node())] = {T(1)};
  const auto& records = tape.records();
  for (auto it = records.rbegin(); it != records.rend(); ++it) {
    if (it->output > root.node()) continue;
    auto& g = grads[static_cast<std::size_t>(it->output)];
    if (g.empty()) continue;
    GradSink<T> sink(grads, it->inputs, it->input_sizes);
    it->backward(std::span<const T>(g.data(), g.size()), sink);
    std::vector<T>().swap(g);  // interior gradients are no longer needed
  }
  for (std::size_t node = 0; node < grads.size(); ++node) {
    if (grads[node].empty() || !tape.is_leaf(static_cast<int>(node))) continue;
    out.insert(static_cast<int>(node), Tensor<T>(tape.node_shape(static_cast<int>(node)), std::move(grads[node])));
  }
  return out;
}

template GradMap<float> backward(const Tensor<float>&);
template GradMap<double> backward(const Tensor<double>&);

double grad_check(const ScalarFn64& f, const std::vector<Tensor<double>>& xs, double eps) {
  if (!(eps > 0.0)) throw ContractError("grad_check: eps must be positive");
  Tape<double> tape;
  std::vector<Tensor<double>> leaves;
  leaves.reserve(xs.size());
  for (const auto& x : xs) leaves.push_back(tape.watch(x.clone()));
  const Tensor<double> y = f(leaves);
  if (y.rank() != 0) throw ContractError("grad_check: f must return a scalar, got " + shape_str(y.shape()));
  const GradMap<double> grads = backward(y);

  std::vector<Tensor<double>> probe;
  probe.reserve(xs.size());
  for (const auto& x : xs) probe.push_back(x.clone());

  double worst = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const bool has = grads.contains(leaves[i]);
    auto values = probe[i].mutable_data();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double analytic = has ? grads.at(leaves[i]).data()[j] : 0.0;
      const double orig = values[j];
      const double hi = orig + eps;
      const double lo = orig - eps;
      values[j] = hi;
      const double up = f(probe).item();
      values[j] = lo;
      const double down = f(probe).item();
      values[j] = orig;
      const double numeric = (up - down) / (hi - lo);
      // Differences below the rounding noise of the two evaluations are not
      // resolvable and count as agreement.
      const double noise = 8.0 * std::numeric_limits<double>::epsilon() * std::max(std::abs(up), std::abs(down)) /
                           (hi - lo);
      const double diff = std::max(0.0, std::abs(analytic - numeric) - noise);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
      worst = std::max(worst, diff / denom);
    }
  }
  return worst;
}

double grad_check(const std::function<Tensor<double>(const Tensor<double>&)>& f, const Tensor<double>& x,
                  double eps) {
  return grad_check([&](const std::vector<Tensor<double>>& xs) { return f(xs[0]); }, std::vector{x}, eps);
}

}  // namespace arimg
