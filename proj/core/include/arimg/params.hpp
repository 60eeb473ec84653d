#pragma once

#include <string>
#include <vector>

#include "arimg/autodiff.hpp"
#include "arimg/rng.hpp"

namespace arimg {

// Ordered, named parameter tensors. Models refer to parameters by the index
// returned from add(); forward passes take the value list (or a bound copy of
// it) so the same code runs with and without a tape.
template <typename T>
class ParamSet {
 public:
  int add(std::string name, Tensor<T> value) {
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return static_cast<int>(values_.size()) - 1;
  }
  int add_normal(std::string name, Shape shape, Rng& rng, double stddev = 0.02) {
    auto t = Tensor<T>::zeros(std::move(shape));
    for (auto& v : t.mutable_data()) v = static_cast<T>(rng.truncated_normal(stddev));
    return add(std::move(name), std::move(t));
  }
  int add_zeros(std::string name, Shape shape) { return add(std::move(name), Tensor<T>::zeros(std::move(shape))); }
  int add_ones(std::string name, Shape shape) { return add(std::move(name), Tensor<T>::full(std::move(shape), T(1))); }

  std::size_t size() const noexcept { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  const std::vector<std::string>& names() const noexcept { return names_; }
  const std::vector<Tensor<T>>& values() const noexcept { return values_; }
  std::vector<Tensor<T>>& values() noexcept { return values_; }
  const Tensor<T>& operator[](std::size_t i) const { return values_.at(i); }
  Tensor<T>& operator[](std::size_t i) { return values_.at(i); }

  int index_of(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return static_cast<int>(i);
    }
    throw ContractError("params: no parameter named '" + name + "'");
  }

  std::int64_t numel() const {
    std::int64_t n = 0;
    for (const auto& v : values_) n += v.numel();
    return n;
  }

  // Tracked handles sharing storage with the values.
  std::vector<Tensor<T>> bind(Tape<T>& tape) const {
    std::vector<Tensor<T>> out;
    out.reserve(values_.size());
    for (const auto& v : values_) out.push_back(tape.watch(v));
    return out;
  }

  // Deep copy; the copy shares nothing with this set.
  ParamSet clone() const {
    ParamSet out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].clone());
    return out;
  }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (std::size_t i = 0; i < size(); ++i) {
      std::vector<U> v(values_[i].data().begin(), values_[i].data().end());
      out.add(names_[i], Tensor<U>(values_[i].shape(), std::move(v)));
    }
    return out;
  }

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
};

// Gradients for `bound` in order; parameters without a gradient get zeros.
template <typename T>
std::vector<Tensor<T>> collect_grads(const GradMap<T>& grads, const std::vector<Tensor<T>>& bound) {
  std::vector<Tensor<T>> out;
  out.reserve(bound.size());
  for (const auto& p : bound) {
    out.push_back(grads.contains(p) ? grads.at(p) : Tensor<T>::zeros(p.shape()));
  }
  return out;
}

}  // namespace arimg
