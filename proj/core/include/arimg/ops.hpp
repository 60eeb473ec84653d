#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "arimg/tensor.hpp"

// The op catalog. Every op is a pure function of its inputs; when any input is
// on a tape the output is recorded with a backward rule.
//
// Broadcasting is trailing-axis only and only for add/sub/mul: the smaller
// operand's shape must equal a suffix of the larger operand's shape.
namespace arimg::ops {

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& x, double factor);

// a: [..., m, k]; b: [..., k, n] with identical leading dims, or b: [k, n]
// shared across all of a's leading dims.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
// Output axis i takes input axis perm[i].
template <typename T> Tensor<T> transpose(const Tensor<T>& x, std::vector<int> perm);
template <typename T> Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis);

// table: [V, d]; ids of shape `ids_shape` -> [ids_shape..., d].
template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const std::int32_t> ids, const Shape& ids_shape);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis = -1);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& x, int axis = -1);
// Normalizes to zero mean / unit variance along `axis` (no affine terms).
template <typename T> Tensor<T> layer_norm(const Tensor<T>& x, int axis = -1, double eps = 1e-5);
// tanh approximation.
template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);

// x: [N, H, W, Cin]; w: [kh, kw, Cin, Cout] -> [N, Ho, Wo, Cout] (channels last, no bias).
template <typename T> Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride = 1, int pad = 0);

// Positions where `mask` is nonzero are replaced by `value`; mask_shape must be
// a suffix of x's shape.
template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, const Shape& mask_shape,
                      double value);

// Reduction over `axis` (removed from the shape), or over everything when
// axis is empty (scalar result, shape []).
template <typename T> Tensor<T> reduce_sum(const Tensor<T>& x, std::optional<int> axis = std::nullopt);
template <typename T> Tensor<T> reduce_mean(const Tensor<T>& x, std::optional<int> axis = std::nullopt);

// x / sqrt(sum(x^2) + eps) along `axis`.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& x, int axis = -1, double eps = 1e-12);

// Mean softmax cross-entropy of logits [N, V] against integer targets.
// Targets equal to kIgnoreTarget are skipped; with no counted rows the loss is 0.
inline constexpr std::int32_t kIgnoreTarget = -1;
template <typename T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, std::span<const std::int32_t> targets);

// Generic entry point over the catalog.
struct OpAttrs {
  std::optional<int> axis;
  double eps = 1e-5;
  double value = 0.0;  // masked_fill value
  double factor = 1.0;  // scale factor
  Shape shape;  // reshape target
  std::vector<int> perm;  // transpose permutation
  std::int64_t start = 0;  // slice
  std::int64_t length = 0;
  int stride = 1;  // conv2d
  int pad = 0;
  std::vector<std::int32_t> ids;  // embedding_gather indices / cross-entropy targets
  Shape ids_shape;
  std::vector<std::uint8_t> mask;  // masked_fill mask
  Shape mask_shape;
};

template <typename T>
Tensor<T> apply(OpKind kind, const std::vector<Tensor<T>>& inputs, const OpAttrs& attrs = {});

}  // namespace arimg::ops
