#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "arimg/errors.hpp"

namespace arimg {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);
// Resolves a possibly negative axis against `rank`; throws ShapeError.
int normalize_axis(int axis, std::size_t rank, const char* op);

enum class OpKind : std::uint8_t {
  kLeaf,
  kAdd,
  kSub,
  kMul,
  kMatmul,
  kReshape,
  kTranspose,
  kSlice,
  kConcat,
  kEmbeddingGather,
  kSoftmax,
  kLogSoftmax,
  kLayerNorm,
  kGelu,
  kRelu,
  kConv2d,
  kMaskedFill,
  kReduceSum,
  kReduceMean,
  kScale,
  kL2Normalize,
  kCrossEntropyWithLogits,
};

const char* op_name(OpKind kind);
// Catalog lookup by name ("matmul", "layer_norm", ...). Throws CatalogError.
OpKind op_kind_from_name(const std::string& name);

template <typename T>
class Tape;

// Dense row-major array. Copies are cheap handles sharing the same storage;
// catalog ops never mutate their inputs. A tensor is on a tape when it was
// produced from (or registered as) a gradient-tracked leaf.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);

  bool defined() const noexcept { return storage_ != nullptr; }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t dim(int axis) const;
  std::int64_t numel() const noexcept { return storage_ ? static_cast<std::int64_t>(storage_->size()) : 0; }

  std::span<const T> data() const noexcept { return {storage_->data(), storage_->size()}; }
  const T* ptr() const noexcept { return storage_->data(); }
  // In-place access for optimizers and initializers. Never use on a tensor
  // whose values were saved by a live tape.
  std::span<T> mutable_data() noexcept { return {storage_->data(), storage_->size()}; }
  T item() const;

  Tape<T>* tape() const noexcept { return tape_; }
  int node() const noexcept { return node_; }
  bool requires_grad() const noexcept { return tape_ != nullptr && node_ >= 0; }

  // Same storage, detached from any tape (a stop-gradient).
  Tensor detach() const;
  // Deep copy of the values, detached.
  Tensor clone() const;
  // Detached handle over the same storage with a different shape of equal size.
  Tensor view_as(Shape shape) const;

  bool shares_storage(const Tensor& other) const noexcept { return storage_ == other.storage_; }

 private:
  friend class Tape<T>;
  std::shared_ptr<std::vector<T>> storage_;
  Shape shape_;
  Tape<T>* tape_ = nullptr;
  int node_ = -1;
};

// Gradient buffers handed to an op's backward rule, one slot per op input.
template <typename T>
class GradSink {
 public:
  GradSink(std::vector<std::vector<T>>& grads, const std::vector<int>& inputs,
           const std::vector<std::int64_t>& sizes)
      : grads_(grads), inputs_(inputs), sizes_(sizes) {}

  // Zero-initialized accumulation buffer for input `slot`, or nullptr when that
  // input does not need a gradient.
  T* grad(std::size_t slot);

 private:
  std::vector<std::vector<T>>& grads_;
  const std::vector<int>& inputs_;
  const std::vector<std::int64_t>& sizes_;
};

template <typename T>
using BackwardFn = std::function<void(std::span<const T> grad_out, GradSink<T>& sink)>;

template <typename T>
struct OpRecord {
  OpKind kind;
  std::vector<int> inputs;  // node ids; -1 for untracked inputs
  std::vector<std::int64_t> input_sizes;
  int output;
  BackwardFn<T> backward;
};

// Node id -> gradient for every tracked leaf reachable from the root.
template <typename T>
class GradMap {
 public:
  bool contains(const Tensor<T>& leaf) const;
  const Tensor<T>& at(const Tensor<T>& leaf) const;
  const Tensor<T>& at_node(int node) const;
  std::size_t size() const noexcept { return grads_.size(); }
  bool empty() const noexcept { return grads_.empty(); }

  void insert(int node, Tensor<T> grad);

 private:
  std::vector<std::pair<int, Tensor<T>>> grads_;  // sorted by node id
};

// Ordered record of ops applied to tracked tensors. Records are appended as
// ops execute, so tape order is a topological order. Confined to one thread.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Registers a leaf sharing `value`'s storage and returns the tracked handle.
  Tensor<T> watch(const Tensor<T>& value);

  // Registers `output` as produced by `kind` from `inputs`; returns the
  // tracked output. Inputs that are not on this tape are treated as constants.
  Tensor<T> record(OpKind kind, std::initializer_list<const Tensor<T>*> inputs, Tensor<T> output,
                   BackwardFn<T> backward);
  Tensor<T> record(OpKind kind, const std::vector<const Tensor<T>*>& inputs, Tensor<T> output,
                   BackwardFn<T> backward);

  std::size_t num_nodes() const noexcept { return node_sizes_.size(); }
  const std::vector<OpRecord<T>>& records() const noexcept { return records_; }
  bool is_leaf(int node) const { return leaf_.at(static_cast<std::size_t>(node)); }
  const Shape& node_shape(int node) const { return node_shapes_.at(static_cast<std::size_t>(node)); }

 private:
  int add_node(const Shape& shape, bool leaf);

  std::vector<OpRecord<T>> records_;
  std::vector<std::int64_t> node_sizes_;
  std::vector<Shape> node_shapes_;
  std::vector<bool> leaf_;
};

}  // namespace arimg
