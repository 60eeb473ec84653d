#include "arimg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>
#include <utility>

namespace arimg::ops {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ArrC = Eigen::Map<const Eigen::Array<T, Eigen::Dynamic, 1>>;
template <typename T>
using ArrM = Eigen::Map<Eigen::Array<T, Eigen::Dynamic, 1>>;

// Eigen peels unaligned leading elements of a dynamic map into scalar code.
// For transcendentals and reductions that changes the rounding, so results
// would depend on buffer addresses. These helpers run such expressions on
// fixed-size aligned blocks instead: every element takes the packet path and
// sums fold in a fixed order. (Plain +, -, * are exact either way since the
// library builds with -ffp-contract=off.)
constexpr int kBlock = 16;
template <typename T>
using Block = Eigen::Array<T, kBlock, 1>;

template <typename T, typename F>
void blockwise(const T* in, T* out, std::int64_t n, F f) {
  using UMapC = Eigen::Map<const Block<T>, Eigen::Unaligned>;
  using UMap = Eigen::Map<Block<T>, Eigen::Unaligned>;
  std::int64_t i = 0;
  for (; i + kBlock <= n; i += kBlock) {
    const Block<T> b = UMapC(in + i);
    const Block<T> r = f(b);
    UMap(out + i) = r;
  }
  if (i < n) {
    Block<T> b = Block<T>::Zero();
    std::copy_n(in + i, n - i, b.data());
    const Block<T> r = f(b);
    std::copy_n(r.data(), n - i, out + i);
  }
}

// sum over elements of f(a, b) blocks, folded in a fixed order; `b` may be null.
template <typename T, typename F>
T block_sum(const T* a, const T* b, std::int64_t n, F f) {
  using UMapC = Eigen::Map<const Block<T>, Eigen::Unaligned>;
  Block<T> acc = Block<T>::Zero();
  const Block<T> zero = Block<T>::Zero();
  std::int64_t i = 0;
  for (; i + kBlock <= n; i += kBlock) {
    const Block<T> ba = UMapC(a + i);
    const Block<T> bb = b ? Block<T>(UMapC(b + i)) : zero;
    acc += f(ba, bb);
  }
  if (i < n) {
    Block<T> ba = zero, bb = zero;
    std::copy_n(a + i, n - i, ba.data());
    if (b) std::copy_n(b + i, n - i, bb.data());
    Block<T> v = f(ba, bb);
    v.tail(kBlock - (n - i)).setZero();
    acc += v;
  }
  T s = 0;
  for (int j = 0; j < kBlock; ++j) s += acc[j];
  return s;
}

template <typename T>
T block_sum(const T* a, std::int64_t n) {
  return block_sum<T>(a, nullptr, n, [](const Block<T>& x, const Block<T>&) { return x; });
}

template <typename T>
Tape<T>* common_tape(const std::vector<const Tensor<T>*>& inputs, OpKind kind) {
  Tape<T>* tape = nullptr;
  for (const auto* in : inputs) {
    if (!in->defined()) throw ContractError(std::string(op_name(kind)) + ": undefined input tensor");
    if (!in->requires_grad()) continue;
    if (tape != nullptr && tape != in->tape()) {
      throw ContractError(std::string(op_name(kind)) + ": inputs belong to different tapes");
    }
    tape = in->tape();
  }
  return tape;
}

// Records `out` on the inputs' tape when any input is tracked. The backward
// closure is only materialized in that case.
template <typename T, typename MakeBackward>
Tensor<T> finish(OpKind kind, const std::vector<const Tensor<T>*>& inputs, Tensor<T> out,
                 MakeBackward&& make_backward) {
  Tape<T>* tape = common_tape(inputs, kind);
  if (tape == nullptr) return out;
  return tape->record(kind, inputs, std::move(out), BackwardFn<T>(make_backward()));
}

[[noreturn]] void shape_fail(OpKind kind, const std::string& what) {
  throw ShapeError(std::string(op_name(kind)) + ": " + what);
}

std::string dims2(const Shape& a, const Shape& b) { return shape_str(a) + " vs " + shape_str(b); }

struct AxisSplit {
  std::int64_t outer = 1;
  std::int64_t len = 1;
  std::int64_t inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[static_cast<std::size_t>(i)];
  s.len = shape[static_cast<std::size_t>(axis)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

// ------------------------------------------------------------ elementwise binary

enum class Binary { kAdd, kSub, kMul };

template <typename T>
Tensor<T> binary(OpKind kind, Binary op, const Tensor<T>& a, const Tensor<T>& b) {
  common_tape<T>({&a, &b}, kind);
  const bool a_big = is_suffix(b.shape(), a.shape());
  if (!a_big && !is_suffix(a.shape(), b.shape())) {
    shape_fail(kind, "shapes not trailing-broadcastable " + dims2(a.shape(), b.shape()));
  }
  const Tensor<T>& big = a_big ? a : b;
  const std::int64_t n = big.numel();
  const std::int64_t na = a.numel();
  const std::int64_t nb = b.numel();
  std::vector<T> out(static_cast<std::size_t>(n));
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  for (std::int64_t base = 0; base < n;) {
    // Iterate in chunks where both operands advance contiguously.
    const std::int64_t ia = base % na;
    const std::int64_t ib = base % nb;
    const std::int64_t run = std::min(na - ia, nb - ib);
    T* po = out.data() + base;
    switch (op) {
      case Binary::kAdd:
        for (std::int64_t i = 0; i < run; ++i) po[i] = pa[ia + i] + pb[ib + i];
        break;
      case Binary::kSub:
        for (std::int64_t i = 0; i < run; ++i) po[i] = pa[ia + i] - pb[ib + i];
        break;
      case Binary::kMul:
        for (std::int64_t i = 0; i < run; ++i) po[i] = pa[ia + i] * pb[ib + i];
        break;
    }
    base += run;
  }
  Tensor<T> result(big.shape(), std::move(out));
  return finish<T>(kind, {&a, &b}, std::move(result), [a, b, op, n, na, nb]() {
    return [a, b, op, n, na, nb](std::span<const T> g, GradSink<T>& sink) {
      T* ga = sink.grad(0);
      T* gb = sink.grad(1);
      const T* pa = a.ptr();
      const T* pb = b.ptr();
      for (std::int64_t base = 0; base < n;) {
        const std::int64_t ia = base % na;
        const std::int64_t ib = base % nb;
        const std::int64_t run = std::min(na - ia, nb - ib);
        const T* pg = g.data() + base;
        switch (op) {
          case Binary::kAdd:
          case Binary::kSub: {
            const T sign = op == Binary::kAdd ? T(1) : T(-1);
            if (ga) {
              for (std::int64_t i = 0; i < run; ++i) ga[ia + i] += pg[i];
            }
            if (gb) {
              for (std::int64_t i = 0; i < run; ++i) gb[ib + i] += sign * pg[i];
            }
            break;
          }
          case Binary::kMul:
            if (ga) {
              for (std::int64_t i = 0; i < run; ++i) ga[ia + i] += pg[i] * pb[ib + i];
            }
            if (gb) {
              for (std::int64_t i = 0; i < run; ++i) gb[ib + i] += pg[i] * pa[ia + i];
            }
            break;
        }
        base += run;
      }
    };
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(OpKind::kAdd, Binary::kAdd, a, b);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(OpKind::kSub, Binary::kSub, a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(OpKind::kMul, Binary::kMul, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, double factor) {
  common_tape<T>({&x}, OpKind::kScale);
  const T f = static_cast<T>(factor);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= f;
  return finish<T>(OpKind::kScale, {&x}, Tensor<T>(x.shape(), std::move(out)), [f]() {
    return [f](std::span<const T> g, GradSink<T>& sink) {
      if (T* gx = sink.grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += f * g[i];
      }
    };
  });
}

// ------------------------------------------------------------ matmul

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const OpKind kind = OpKind::kMatmul;
  common_tape<T>({&a, &b}, kind);
  if (a.rank() < 2 || b.rank() < 2) shape_fail(kind, "operands need rank >= 2, got " + dims2(a.shape(), b.shape()));
  const std::int64_t m = a.dim(-2);
  const std::int64_t k = a.dim(-1);
  const std::int64_t n = b.dim(-1);
  if (b.dim(-2) != k) shape_fail(kind, "inner dims differ " + dims2(a.shape(), b.shape()));
  const bool shared_b = b.rank() == 2;
  std::int64_t batch = 1;
  for (std::size_t i = 0; i + 2 < a.rank(); ++i) batch *= a.shape()[i];
  if (!shared_b) {
    if (a.rank() != b.rank() ||
        !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin())) {
      shape_fail(kind, "batch dims differ " + dims2(a.shape(), b.shape()));
    }
  }
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(batch * m * n));
  if (shared_b) {
    MutMap<T>(out.data(), batch * m, n).noalias() =
        ConstMap<T>(a.ptr(), batch * m, k) * ConstMap<T>(b.ptr(), k, n);
  } else {
    for (std::int64_t s = 0; s < batch; ++s) {
      MutMap<T>(out.data() + s * m * n, m, n).noalias() =
          ConstMap<T>(a.ptr() + s * m * k, m, k) * ConstMap<T>(b.ptr() + s * k * n, k, n);
    }
  }
  return finish<T>(kind, {&a, &b}, Tensor<T>(std::move(out_shape), std::move(out)),
                   [a, b, m, k, n, batch, shared_b]() {
                     return [a, b, m, k, n, batch, shared_b](std::span<const T> g, GradSink<T>& sink) {
                       T* ga = sink.grad(0);
                       T* gb = sink.grad(1);
                       if (shared_b) {
                         ConstMap<T> gm(g.data(), batch * m, n);
                         if (ga) MutMap<T>(ga, batch * m, k).noalias() += gm * ConstMap<T>(b.ptr(), k, n).transpose();
                         if (gb) {
                           MutMap<T>(gb, k, n).noalias() += ConstMap<T>(a.ptr(), batch * m, k).transpose() * gm;
                         }
                         return;
                       }
                       for (std::int64_t s = 0; s < batch; ++s) {
                         ConstMap<T> gm(g.data() + s * m * n, m, n);
                         if (ga) {
                           MutMap<T>(ga + s * m * k, m, k).noalias() +=
                               gm * ConstMap<T>(b.ptr() + s * k * n, k, n).transpose();
                         }
                         if (gb) {
                           MutMap<T>(gb + s * k * n, k, n).noalias() +=
                               ConstMap<T>(a.ptr() + s * m * k, m, k).transpose() * gm;
                         }
                       }
                     };
                   });
}

// ------------------------------------------------------------ layout ops

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  const OpKind kind = OpKind::kReshape;
  common_tape<T>({&x}, kind);
  for (auto d : shape) {
    if (d <= 0) shape_fail(kind, "non-positive target dim in " + shape_str(shape));
  }
  if (shape_numel(shape) != x.numel()) {
    shape_fail(kind, "element count differs " + dims2(x.shape(), shape));
  }
  // Values are immutable, so the output may alias the input storage.
  return finish<T>(kind, {&x}, x.view_as(std::move(shape)), []() {
    return [](std::span<const T> g, GradSink<T>& sink) {
      if (T* gx = sink.grad(0)) {
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
    };
  });
}
template <typename T>
Tensor<T> transpose(const Tensor<T>& x, std::vector<int> perm) {
  const OpKind kind = OpKind::kTranspose;
  common_tape<T>({&x}, kind);
  const std::size_t r = x.rank();
  if (perm.size() != r) shape_fail(kind, "perm size differs from rank of " + shape_str(x.shape()));
  std::vector<bool> seen(r, false);
  for (int p : perm) {
    if (p < 0 || static_cast<std::size_t>(p) >= r || seen[static_cast<std::size_t>(p)]) {
      shape_fail(kind, "invalid permutation for " + shape_str(x.shape()));
    }
    seen[static_cast<std::size_t>(p)] = true;
  }
  Shape in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * x.shape()[i];
  Shape out_shape(r);
  Shape src_stride(r);  // input stride for each output axis
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.shape()[static_cast<std::size_t>(perm[i])];
    src_stride[i] = in_strides[static_cast<std::size_t>(perm[i])];
  }
  const std::int64_t n = x.numel();
  // out[o] = in[src(o)]; the same index map serves the backward scatter.
  auto gather_index = [out_shape, src_stride, r, n]() {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
    if (r == 0) {
      idx[0] = 0;
      return idx;
    }
    std::vector<std::int64_t> counter(r, 0);
    std::int64_t src = 0;
    const std::int64_t last = out_shape[r - 1];
    const std::int64_t last_stride = src_stride[r - 1];
    for (std::int64_t o = 0; o < n;) {
      for (std::int64_t j = 0; j < last; ++j) idx[static_cast<std::size_t>(o++)] = src + j * last_stride;
      // advance odometer on axes [0, r-1)
      for (std::size_t ax = r - 1; ax-- > 0;) {
        src += src_stride[ax];
        if (++counter[ax] < out_shape[ax]) break;
        src -= src_stride[ax] * out_shape[ax];
        counter[ax] = 0;
      }
    }
    return idx;
  };
  auto index = std::make_shared<std::vector<std::int64_t>>(gather_index());
  std::vector<T> out(static_cast<std::size_t>(n));
  const T* px = x.ptr();
  for (std::int64_t o = 0; o < n; ++o) out[static_cast<std::size_t>(o)] = px[(*index)[static_cast<std::size_t>(o)]];
  return finish<T>(kind, {&x}, Tensor<T>(std::move(out_shape), std::move(out)), [index]() {
    return [index](std::span<const T> g, GradSink<T>& sink) {
      if (T* gx = sink.grad(0)) {
        for (std::size_t o = 0; o < g.size(); ++o) gx[(*index)[o]] += g[o];
      }
    };
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& x, int axis, std::int64_t start, std::int64_t length) {
  const OpKind kind = OpKind::kSlice;
  common_tape<T>({&x}, kind);
  const int ax = normalize_axis(axis, x.rank(), op_name(kind));
  const AxisSplit s = split_at(x.shape(), ax);
  if (start < 0 || length <= 0 || start + length > s.len) {
    shape_fail(kind, "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of size " + std::to_string(s.len) + " in " + shape_str(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(ax)] = length;
  std::vector<T> out(static_cast<std::size_t>(s.outer * length * s.inner));
  const T* px = x.ptr();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    std::copy_n(px + (o * s.len + start) * s.inner, length * s.inner, out.data() + o * length * s.inner);
  }
  return finish<T>(kind, {&x}, Tensor<T>(std::move(out_shape), std::move(out)), [s, start, length]() {
    return [s, start, length](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink.grad(0);
      if (!gx) return;
      for (std::int64_t o = 0; o < s.outer; ++o) {
        T* dst = gx + (o * s.len + start) * s.inner;
        const T* src = g.data() + o * length * s.inner;
        for (std::int64_t i = 0; i < length * s.inner; ++i) dst[i] += src[i];
      }
    };
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, int axis) {
  const OpKind kind = OpKind::kConcat;
  if (xs.empty()) shape_fail(kind, "no inputs");
  std::vector<const Tensor<T>*> inputs;
  for (const auto& x : xs) inputs.push_back(&x);
  common_tape<T>(inputs, kind);
  const int ax = normalize_axis(axis, xs[0].rank(), op_name(kind));
  std::vector<std::int64_t> lens;
  std::int64_t total = 0;
  for (const auto& x : xs) {
    if (x.rank() != xs[0].rank()) shape_fail(kind, "rank mismatch " + dims2(xs[0].shape(), x.shape()));
    for (std::size_t i = 0; i < x.rank(); ++i) {
      if (static_cast<int>(i) != ax && x.shape()[i] != xs[0].shape()[i]) {
        shape_fail(kind, "non-concat dims differ " + dims2(xs[0].shape(), x.shape()));
      }
    }
    lens.push_back(x.shape()[static_cast<std::size_t>(ax)]);
    total += lens.back();
  }
  Shape out_shape = xs[0].shape();
  out_shape[static_cast<std::size_t>(ax)] = total;
  const AxisSplit s = split_at(out_shape, ax);
  std::vector<T> out(static_cast<std::size_t>(shape_numel(out_shape)));
  std::int64_t offset = 0;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const T* px = xs[k].ptr();
    const std::int64_t block = lens[k] * s.inner;
    for (std::int64_t o = 0; o < s.outer; ++o) {
      std::copy_n(px + o * block, block, out.data() + (o * total + offset) * s.inner);
    }
    offset += lens[k];
  }
  return finish<T>(kind, inputs, Tensor<T>(std::move(out_shape), std::move(out)), [s, lens, total]() {
    return [s, lens, total](std::span<const T> g, GradSink<T>& sink) {
      std::int64_t offset = 0;
      for (std::size_t k = 0; k < lens.size(); ++k) {
        const std::int64_t block = lens[k] * s.inner;
        if (T* gx = sink.grad(k)) {
          for (std::int64_t o = 0; o < s.outer; ++o) {
            const T* src = g.data() + (o * total + offset) * s.inner;
            T* dst = gx + o * block;
            for (std::int64_t i = 0; i < block; ++i) dst[i] += src[i];
          }
        }
        offset += lens[k];
      }
    };
  });
}

template <typename T>
Tensor<T> embedding_gather(const Tensor<T>& table, std::span<const std::int32_t> ids, const Shape& ids_shape) {
  const OpKind kind = OpKind::kEmbeddingGather;
  common_tape<T>({&table}, kind);
  if (table.rank() != 2) shape_fail(kind, "table must be [V, d], got " + shape_str(table.shape()));
  if (shape_numel(ids_shape) != static_cast<std::int64_t>(ids.size())) {
    shape_fail(kind, "ids shape " + shape_str(ids_shape) + " does not match " + std::to_string(ids.size()) + " ids");
  }
  const std::int64_t vocab = table.dim(0);
  const std::int64_t d = table.dim(1);
  auto id_copy = std::make_shared<std::vector<std::int32_t>>(ids.begin(), ids.end());
  std::vector<T> out(ids.size() * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const std::int32_t id = ids[i];
    if (id < 0 || id >= vocab) {
      throw ContractError("embedding_gather: id " + std::to_string(id) + " outside vocabulary of " +
                          std::to_string(vocab));
    }
    std::copy_n(table.ptr() + id * d, d, out.data() + static_cast<std::int64_t>(i) * d);
  }
  Shape out_shape = ids_shape;
  out_shape.push_back(d);
  return finish<T>(kind, {&table}, Tensor<T>(std::move(out_shape), std::move(out)), [id_copy, d]() {
    return [id_copy, d](std::span<const T> g, GradSink<T>& sink) {
      T* gt = sink.grad(0);
      if (!gt) return;
      for (std::size_t i = 0; i < id_copy->size(); ++i) {
        T* dst = gt + (*id_copy)[i] * d;
        const T* src = g.data() + static_cast<std::int64_t>(i) * d;
        for (std::int64_t j = 0; j < d; ++j) dst[j] += src[j];
      }
    };
  });
}

// ------------------------------------------------------------ normalizations

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const OpKind kind = OpKind::kSoftmax;
  common_tape<T>({&x}, kind);
  const AxisSplit s = split_at(x.shape(), normalize_axis(axis, x.rank(), op_name(kind)));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const T* px = x.ptr();
  T* py = out.data();
  if (s.inner == 1) {
    for (std::int64_t o = 0; o < s.outer; ++o) {
      ArrC<T> row(px + o * s.len, s.len);
      ArrM<T> dst(py + o * s.len, s.len);
      const T mx = row.maxCoeff();
      blockwise<T>(px + o * s.len, py + o * s.len, s.len, [mx](const Block<T>& b) { return Block<T>((b - mx).exp()); });
      dst *= T(1) / block_sum(py + o * s.len, s.len);
    }
  } else {
    for (std::int64_t o = 0; o < s.outer; ++o) {
      for (std::int64_t in = 0; in < s.inner; ++in) {
        const std::int64_t base = o * s.len * s.inner + in;
        T mx = -std::numeric_limits<T>::infinity();
        for (std::int64_t j = 0; j < s.len; ++j) mx = std::max(mx, px[base + j * s.inner]);
        T sum = 0;
        for (std::int64_t j = 0; j < s.len; ++j) {
          const T e = std::exp(px[base + j * s.inner] - mx);
          py[base + j * s.inner] = e;
          sum += e;
        }
        const T inv = T(1) / sum;
        for (std::int64_t j = 0; j < s.len; ++j) py[base + j * s.inner] *= inv;
      }
    }
  }
  Tensor<T> y(x.shape(), std::move(out));
  return finish<T>(kind, {&x}, y, [y, s]() {
    return [y, s](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink.grad(0);
      if (!gx) return;
      const T* py = y.ptr();
      if (s.inner == 1) {
        for (std::int64_t o = 0; o < s.outer; ++o) {
          ArrC<T> yr(py + o * s.len, s.len);
          ArrC<T> gr(g.data() + o * s.len, s.len);
          const T dot = block_sum<T>(g.data() + o * s.len, py + o * s.len, s.len,
                                     [](const Block<T>& a, const Block<T>& b) { return Block<T>(a * b); });
          ArrM<T>(gx + o * s.len, s.len) += yr * (gr - dot);
        }
        return;
      }
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
          const std::int64_t base = o * s.len * s.inner + in;
          T dot = 0;
          for (std::int64_t j = 0; j < s.len; ++j) dot += g[base + j * s.inner] * py[base + j * s.inner];
          for (std::int64_t j = 0; j < s.len; ++j) {
            const std::int64_t k = base + j * s.inner;
            gx[k] += py[k] * (g[k] - dot);
          }
        }
      }
    };
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis) {
  const OpKind kind = OpKind::kLogSoftmax;
  common_tape<T>({&x}, kind);
  const AxisSplit s = split_at(x.shape(), normalize_axis(axis, x.rank(), op_name(kind)));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const T* px = x.ptr();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    if (s.inner == 1) {
      ArrC<T> row(px + o * s.len, s.len);
      const T mx = row.maxCoeff();
      const T lse = mx + std::log(block_sum<T>(px + o * s.len, nullptr, s.len, [mx](const Block<T>& b, const Block<T>&) {
                          return Block<T>((b - mx).exp());
                        }));
      ArrM<T>(out.data() + o * s.len, s.len) = row - lse;
      continue;
    }
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.len * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::int64_t j = 0; j < s.len; ++j) mx = std::max(mx, px[base + j * s.inner]);
      T sum = 0;
      for (std::int64_t j = 0; j < s.len; ++j) sum += std::exp(px[base + j * s.inner] - mx);
      const T lse = mx + std::log(sum);
      for (std::int64_t j = 0; j < s.len; ++j) out[static_cast<std::size_t>(base + j * s.inner)] = px[base + j * s.inner] - lse;
    }
  }
  Tensor<T> y(x.shape(), std::move(out));
  return finish<T>(kind, {&x}, y, [y, s]() {
    return [y, s](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink.grad(0);
      if (!gx) return;
      const T* py = y.ptr();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
          const std::int64_t base = o * s.len * s.inner + in;
          T gsum = 0;
          for (std::int64_t j = 0; j < s.len; ++j) gsum += g[base + j * s.inner];
          for (std::int64_t j = 0; j < s.len; ++j) {
            const std::int64_t k = base + j * s.inner;
            gx[k] += g[k] - std::exp(py[k]) * gsum;
          }
        }
      }
    };
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, int axis, double eps) {
  const OpKind kind = OpKind::kLayerNorm;
  common_tape<T>({&x}, kind);
  const AxisSplit s = split_at(x.shape(), normalize_axis(axis, x.rank(), op_name(kind)));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<std::size_t>(s.outer * s.inner));
  const T* px = x.ptr();
  const T n = static_cast<T>(s.len);
  for (std::int64_t o = 0; o < s.outer; ++o) {
    if (s.inner == 1) {
      ArrC<T> row(px + o * s.len, s.len);
      const T mean = block_sum(px + o * s.len, s.len) / n;
      const T denom = block_sum<T>(px + o * s.len, nullptr, s.len,
                                   [mean](const Block<T>& b, const Block<T>&) { return Block<T>((b - mean).square()); }) /
                          n +
                      static_cast<T>(eps);
      if (!(denom > T(0))) throw NumericError("layer_norm: zero variance with eps = 0");
      const T r = T(1) / std::sqrt(denom);
      (*inv_std)[static_cast<std::size_t>(o)] = r;
      ArrM<T>(out.data() + o * s.len, s.len) = (row - mean) * r;
      continue;
    }
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.len * s.inner + in;
      T mean = 0;
      for (std::int64_t j = 0; j < s.len; ++j) mean += px[base + j * s.inner];
      mean /= n;
      T var = 0;
      for (std::int64_t j = 0; j < s.len; ++j) {
        const T c = px[base + j * s.inner] - mean;
        var += c * c;
      }
      var /= n;
      const T denom = var + static_cast<T>(eps);
      if (!(denom > T(0))) throw NumericError("layer_norm: zero variance with eps = 0");
      const T r = T(1) / std::sqrt(denom);
      (*inv_std)[static_cast<std::size_t>(o * s.inner + in)] = r;
      for (std::int64_t j = 0; j < s.len; ++j) {
        const std::int64_t k = base + j * s.inner;
        out[static_cast<std::size_t>(k)] = (px[k] - mean) * r;
      }
    }
  }
  Tensor<T> y(x.shape(), std::move(out));
  return finish<T>(kind, {&x}, y, [y, s, inv_std, n]() {
    return [y, s, inv_std, n](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink.grad(0);
      if (!gx) return;
      const T* py = y.ptr();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        if (s.inner == 1) {
          ArrC<T> yr(py + o * s.len, s.len);
          ArrC<T> gr(g.data() + o * s.len, s.len);
          const T gmean = block_sum(g.data() + o * s.len, s.len) / n;
          const T gymean = block_sum<T>(g.data() + o * s.len, py + o * s.len, s.len,
                                        [](const Block<T>& a, const Block<T>& b) { return Block<T>(a * b); }) /
                           n;
          ArrM<T>(gx + o * s.len, s.len) += (*inv_std)[static_cast<std::size_t>(o)] * (gr - gmean - yr * gymean);
          continue;
        }
        for (std::int64_t in = 0; in < s.inner; ++in) {
          const std::int64_t base = o * s.len * s.inner + in;
          T gmean = 0;
          T gymean = 0;
          for (std::int64_t j = 0; j < s.len; ++j) {
            const std::int64_t k = base + j * s.inner;
            gmean += g[k];
            gymean += g[k] * py[k];
          }
          gmean /= n;
          gymean /= n;
          const T r = (*inv_std)[static_cast<std::size_t>(o * s.inner + in)];
          for (std::int64_t j = 0; j < s.len; ++j) {
            const std::int64_t k = base + j * s.inner;
            gx[k] += r * (g[k] - gmean - py[k] * gymean);
          }
        }
      }
    };
  });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& x, int axis, double eps) {
  const OpKind kind = OpKind::kL2Normalize;
  common_tape<T>({&x}, kind);
  const AxisSplit s = split_at(x.shape(), normalize_axis(axis, x.rank(), op_name(kind)));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  auto inv_norm = std::make_shared<std::vector<T>>(static_cast<std::size_t>(s.outer * s.inner));
  const T* px = x.ptr();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t in = 0; in < s.inner; ++in) {
      const std::int64_t base = o * s.len * s.inner + in;
      T sq = 0;
      for (std::int64_t j = 0; j < s.len; ++j) sq += px[base + j * s.inner] * px[base + j * s.inner];
      const T denom = sq + static_cast<T>(eps);
      if (!(denom > T(0))) throw NumericError("l2_normalize: zero-norm vector with eps = 0");
      const T r = T(1) / std::sqrt(denom);
      (*inv_norm)[static_cast<std::size_t>(o * s.inner + in)] = r;
      for (std::int64_t j = 0; j < s.len; ++j) {
        const std::int64_t k = base + j * s.inner;
        out[static_cast<std::size_t>(k)] = px[k] * r;
      }
    }
  }
  Tensor<T> y(x.shape(), std::move(out));
  return finish<T>(kind, {&x}, y, [y, s, inv_norm]() {
    return [y, s, inv_norm](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink.grad(0);
      if (!gx) return;
      const T* py = y.ptr();
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t in = 0; in < s.inner; ++in) {
          const std::int64_t base = o * s.len * s.inner + in;
          T dot = 0;
          for (std::int64_t j = 0; j < s.len; ++j) dot += g[base + j * s.inner] * py[base + j * s.inner];
          const T r = (*inv_norm)[static_cast<std::size_t>(o * s.inner + in)];
          for (std::int64_t j = 0; j < s.len; ++j) {
            const std::int64_t k = base + j * s.inner;
            gx[k] += r * (g[k] - py[k] * dot);
          }
        }
      }
    };
  });
}

// ------------------------------------------------------------ activations

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  common_tape<T>({&x}, OpKind::kGelu);
  constexpr T kC = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T kA = T(0.044715);
  const auto n = static_cast<Eigen::Index>(x.numel());
  std::vector<T> out(static_cast<std::size_t>(n));
  blockwise<T>(x.ptr(), out.data(), n,
               [=](const Block<T>& v) { return Block<T>(T(0.5) * v * (T(1) + (kC * (v + kA * v * v * v)).tanh())); });
  return finish<T>(OpKind::kGelu, {&x}, Tensor<T>(x.shape(), std::move(out)), [x]() {
    return [x](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink.grad(0);
      if (!gx) return;
      const auto n = static_cast<Eigen::Index>(g.size());
      ArrC<T> v(x.ptr(), n);
      ArrC<T> gr(g.data(), n);
      constexpr T kC = T(0.7978845608028654);
      constexpr T kA = T(0.044715);
      Eigen::Array<T, Eigen::Dynamic, 1> t(n);
      blockwise<T>(x.ptr(), t.data(), n, [=](const Block<T>& b) { return Block<T>((kC * (b + kA * b * b * b)).tanh()); });
      ArrM<T>(gx, n) += gr * (T(0.5) * (T(1) + t) + T(0.5) * v * (T(1) - t * t) * kC * (T(1) + T(3) * kA * v * v));
    };
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  common_tape<T>({&x}, OpKind::kRelu);
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  const T* px = x.ptr();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = px[i] > T(0) ? px[i] : T(0);
  return finish<T>(OpKind::kRelu, {&x}, Tensor<T>(x.shape(), std::move(out)), [x]() {
    return [x](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink.grad(0);
      if (!gx) return;
      const T* px = x.ptr();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (px[i] > T(0)) gx[i] += g[i];
      }
    };
  });
}

// ------------------------------------------------------------ conv2d

namespace {

struct ConvGeom {
  std::int64_t n, h, w, cin, kh, kw, cout, ho, wo;
  int stride, pad;
  std::int64_t patch() const { return kh * kw * cin; }
  std::int64_t rows() const { return n * ho * wo; }
};

// cols[(b,oy,ox), (ky,kx,c)] = x[b, oy*s-p+ky, ox*s-p+kx, c] (zero outside).
template <typename T>
void im2col(const ConvGeom& g, const T* x, T* cols) {
  const std::int64_t patch = g.patch();
  for (std::int64_t b = 0; b < g.n; ++b) {
    for (std::int64_t oy = 0; oy < g.ho; ++oy) {
      for (std::int64_t ox = 0; ox < g.wo; ++ox) {
        T* row = cols + ((b * g.ho + oy) * g.wo + ox) * patch;
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            T* dst = row + (ky * g.kw + kx) * g.cin;
            if (iy < 0 || iy >= g.h || ix < 0 || ix >= g.w) {
              std::fill_n(dst, g.cin, T(0));
            } else {
              std::copy_n(x + ((b * g.h + iy) * g.w + ix) * g.cin, g.cin, dst);
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im_add(const ConvGeom& g, const T* cols, T* gx) {
  const std::int64_t patch = g.patch();
  for (std::int64_t b = 0; b < g.n; ++b) {
    for (std::int64_t oy = 0; oy < g.ho; ++oy) {
      for (std::int64_t ox = 0; ox < g.wo; ++ox) {
        const T* row = cols + ((b * g.ho + oy) * g.wo + ox) * patch;
        for (std::int64_t ky = 0; ky < g.kh; ++ky) {
          const std::int64_t iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          for (std::int64_t kx = 0; kx < g.kw; ++kx) {
            const std::int64_t ix = ox * g.stride - g.pad + kx;
            if (ix < 0 || ix >= g.w) continue;
            const T* src = row + (ky * g.kw + kx) * g.cin;
            T* dst = gx + ((b * g.h + iy) * g.w + ix) * g.cin;
            for (std::int64_t c = 0; c < g.cin; ++c) dst[c] += src[c];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int stride, int pad) {
  const OpKind kind = OpKind::kConv2d;
  common_tape<T>({&x, &w}, kind);
  if (x.rank() != 4 || w.rank() != 4) {
    shape_fail(kind, "expects x [N,H,W,Cin] and w [kh,kw,Cin,Cout], got " + dims2(x.shape(), w.shape()));
  }
  if (stride < 1 || pad < 0) shape_fail(kind, "stride must be >= 1 and pad >= 0");
  ConvGeom g{};
  g.n = x.dim(0);
  g.h = x.dim(1);
  g.w = x.dim(2);
  g.cin = x.dim(3);
  g.kh = w.dim(0);
  g.kw = w.dim(1);
  g.cout = w.dim(3);
  g.stride = stride;
  g.pad = pad;
  if (w.dim(2) != g.cin) shape_fail(kind, "channel mismatch " + dims2(x.shape(), w.shape()));
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.ho <= 0 || g.wo <= 0) shape_fail(kind, "kernel larger than padded input " + dims2(x.shape(), w.shape()));
  auto cols = std::make_shared<std::vector<T>>(static_cast<std::size_t>(g.rows() * g.patch()));
  im2col(g, x.ptr(), cols->data());
  std::vector<T> out(static_cast<std::size_t>(g.rows() * g.cout));
  MutMap<T>(out.data(), g.rows(), g.cout).noalias() =
      ConstMap<T>(cols->data(), g.rows(), g.patch()) * ConstMap<T>(w.ptr(), g.patch(), g.cout);
  return finish<T>(kind, {&x, &w}, Tensor<T>(Shape{g.n, g.ho, g.wo, g.cout}, std::move(out)), [g, w, cols]() {
    return [g, w, cols](std::span<const T> grad, GradSink<T>& sink) {
      ConstMap<T> gy(grad.data(), g.rows(), g.cout);
      if (T* gw = sink.grad(1)) {
        MutMap<T>(gw, g.patch(), g.cout).noalias() += ConstMap<T>(cols->data(), g.rows(), g.patch()).transpose() * gy;
      }
      if (T* gx = sink.grad(0)) {
        std::vector<T> gcols(static_cast<std::size_t>(g.rows() * g.patch()));
        MutMap<T>(gcols.data(), g.rows(), g.patch()).noalias() =
            gy * ConstMap<T>(w.ptr(), g.patch(), g.cout).transpose();
        col2im_add(g, gcols.data(), gx);
      }
    };
  });
}

// ------------------------------------------------------------ masking and reductions

template <typename T>
Tensor<T> masked_fill(const Tensor<T>& x, std::span<const std::uint8_t> mask, const Shape& mask_shape,
                      double value) {
  const OpKind kind = OpKind::kMaskedFill;
  common_tape<T>({&x}, kind);
  if (!is_suffix(mask_shape, x.shape())) {
    shape_fail(kind, "mask shape not a suffix of input " + dims2(mask_shape, x.shape()));
  }
  const std::int64_t nm = shape_numel(mask_shape);
  if (nm != static_cast<std::int64_t>(mask.size())) {
    shape_fail(kind, "mask has " + std::to_string(mask.size()) + " entries for shape " + shape_str(mask_shape));
  }
  auto m = std::make_shared<std::vector<std::uint8_t>>(mask.begin(), mask.end());
  const T fill = static_cast<T>(value);
  std::vector<T> out(x.data().begin(), x.data().end());
  const std::uint8_t* pm = m->data();
  for (std::size_t base = 0; base < out.size(); base += static_cast<std::size_t>(nm)) {
    T* po = out.data() + base;
    for (std::int64_t i = 0; i < nm; ++i) po[i] = pm[i] ? fill : po[i];
  }
  return finish<T>(kind, {&x}, Tensor<T>(x.shape(), std::move(out)), [m, nm]() {
    return [m, nm](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink.grad(0);
      if (!gx) return;
      const std::uint8_t* pm = m->data();
      for (std::size_t base = 0; base < g.size(); base += static_cast<std::size_t>(nm)) {
        T* dst = gx + base;
        const T* src = g.data() + base;
        for (std::int64_t i = 0; i < nm; ++i) dst[i] += pm[i] ? T(0) : src[i];
      }
    };
  });
}

namespace {

template <typename T>
Tensor<T> reduce(OpKind kind, const Tensor<T>& x, std::optional<int> axis, bool mean) {
  common_tape<T>({&x}, kind);
  if (!axis) {
    const T n = static_cast<T>(x.numel());
    T sum = 0;
    for (T v : x.data()) sum += v;
    const T f = mean ? T(1) / n : T(1);
    const auto count = static_cast<std::size_t>(x.numel());
    return finish<T>(kind, {&x}, Tensor<T>::scalar(sum * f), [f, count]() {
      return [f, count](std::span<const T> g, GradSink<T>& sink) {
        T* gx = sink.grad(0);
        if (!gx) return;
        const T v = f * g[0];
        for (std::size_t i = 0; i < count; ++i) gx[i] += v;
      };
    });
  }
  const int ax = normalize_axis(*axis, x.rank(), op_name(kind));
  const AxisSplit s = split_at(x.shape(), ax);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (static_cast<int>(i) != ax) out_shape.push_back(x.shape()[i]);
  }
  const T f = mean ? T(1) / static_cast<T>(s.len) : T(1);
  std::vector<T> out(static_cast<std::size_t>(s.outer * s.inner), T(0));
  const T* px = x.ptr();
  for (std::int64_t o = 0; o < s.outer; ++o) {
    for (std::int64_t j = 0; j < s.len; ++j) {
      const T* src = px + (o * s.len + j) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::int64_t in = 0; in < s.inner; ++in) dst[in] += src[in];
    }
  }
  if (mean) {
    for (auto& v : out) v *= f;
  }
  return finish<T>(kind, {&x}, Tensor<T>(std::move(out_shape), std::move(out)), [s, f]() {
    return [s, f](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink.grad(0);
      if (!gx) return;
      for (std::int64_t o = 0; o < s.outer; ++o) {
        for (std::int64_t j = 0; j < s.len; ++j) {
          T* dst = gx + (o * s.len + j) * s.inner;
          const T* src = g.data() + o * s.inner;
          for (std::int64_t in = 0; in < s.inner; ++in) dst[in] += f * src[in];
        }
      }
    };
  });
}

}  // namespace

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& x, std::optional<int> axis) {
  return reduce(OpKind::kReduceSum, x, axis, false);
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& x, std::optional<int> axis) {
  return reduce(OpKind::kReduceMean, x, axis, true);
}

template <typename T>
Tensor<T> cross_entropy_with_logits(const Tensor<T>& logits, std::span<const std::int32_t> targets) {
  const OpKind kind = OpKind::kCrossEntropyWithLogits;
  common_tape<T>({&logits}, kind);
  if (logits.rank() != 2) shape_fail(kind, "logits must be [N, V], got " + shape_str(logits.shape()));
  const std::int64_t rows = logits.dim(0);
  const std::int64_t vocab = logits.dim(1);
  if (static_cast<std::int64_t>(targets.size()) != rows) {
    shape_fail(kind, std::to_string(targets.size()) + " targets for logits " + shape_str(logits.shape()));
  }
  auto tgt = std::make_shared<std::vector<std::int32_t>>(targets.begin(), targets.end());
  std::int64_t counted = 0;
  for (auto t : *tgt) {
    if (t == kIgnoreTarget) continue;
    if (t < 0 || t >= vocab) {
      throw ContractError("cross_entropy_with_logits: target " + std::to_string(t) + " outside vocabulary of " +
                          std::to_string(vocab));
    }
    ++counted;
  }
  // Probabilities are kept for the backward pass.
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * vocab));
  const T* px = logits.ptr();
  T total = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = px + r * vocab;
    T* p = probs->data() + r * vocab;
    ArrC<T> r_in(row, vocab);
    ArrM<T> r_out(p, vocab);
    const T mx = r_in.maxCoeff();
    blockwise<T>(row, p, vocab, [mx](const Block<T>& b) { return Block<T>((b - mx).exp()); });
    const T sum = block_sum(p, vocab);
    r_out *= T(1) / sum;
    const std::int32_t t = (*tgt)[static_cast<std::size_t>(r)];
    if (t != kIgnoreTarget) total += (mx + std::log(sum)) - row[t];
  }
  const T inv_count = counted > 0 ? T(1) / static_cast<T>(counted) : T(0);
  return finish<T>(kind, {&logits}, Tensor<T>::scalar(total * inv_count), [tgt, probs, rows, vocab, inv_count]() {
    return [tgt, probs, rows, vocab, inv_count](std::span<const T> g, GradSink<T>& sink) {
      T* gx = sink.grad(0);
      if (!gx || inv_count == T(0)) return;
      const T f = g[0] * inv_count;
      for (std::int64_t r = 0; r < rows; ++r) {
        const std::int32_t t = (*tgt)[static_cast<std::size_t>(r)];
        if (t == kIgnoreTarget) continue;
        const T* p = probs->data() + r * vocab;
        T* dst = gx + r * vocab;
        for (std::int64_t j = 0; j < vocab; ++j) dst[j] += f * p[j];
        dst[t] -= f;
      }
    };
  });
}

// ------------------------------------------------------------ generic dispatch

template <typename T>
Tensor<T> apply(OpKind kind, const std::vector<Tensor<T>>& inputs, const OpAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (inputs.size() != n) {
      throw ContractError(std::string(op_name(kind)) + ": expects " + std::to_string(n) + " inputs, got " +
                          std::to_string(inputs.size()));
    }
  };
  const int axis = attrs.axis.value_or(-1);
  switch (kind) {
    case OpKind::kAdd: need(2); return add(inputs[0], inputs[1]);
    case OpKind::kSub: need(2); return sub(inputs[0], inputs[1]);
    case OpKind::kMul: need(2); return mul(inputs[0], inputs[1]);
    case OpKind::kMatmul: need(2); return matmul(inputs[0], inputs[1]);
    case OpKind::kReshape: need(1); return reshape(inputs[0], attrs.shape);
    case OpKind::kTranspose: need(1); return transpose(inputs[0], attrs.perm);
    case OpKind::kSlice: need(1); return slice(inputs[0], axis, attrs.start, attrs.length);
    case OpKind::kConcat: return concat(inputs, axis);
    case OpKind::kEmbeddingGather: {
      need(1);
      const Shape ids_shape = attrs.ids_shape.empty() && attrs.ids.size() != 1
                                  ? Shape{static_cast<std::int64_t>(attrs.ids.size())}
                                  : attrs.ids_shape;
      return embedding_gather(inputs[0], std::span<const std::int32_t>(attrs.ids), ids_shape);
    }
    case OpKind::kSoftmax: need(1); return softmax(inputs[0], axis);
    case OpKind::kLogSoftmax: need(1); return log_softmax(inputs[0], axis);
    case OpKind::kLayerNorm: need(1); return layer_norm(inputs[0], axis, attrs.eps);
    case OpKind::kGelu: need(1); return gelu(inputs[0]);
    case OpKind::kRelu: need(1); return relu(inputs[0]);
    case OpKind::kConv2d: need(2); return conv2d(inputs[0], inputs[1], attrs.stride, attrs.pad);
    case OpKind::kMaskedFill:
      need(1);
      return masked_fill(inputs[0], std::span<const std::uint8_t>(attrs.mask), attrs.mask_shape, attrs.value);
    case OpKind::kReduceSum: need(1); return reduce_sum(inputs[0], attrs.axis);
    case OpKind::kReduceMean: need(1); return reduce_mean(inputs[0], attrs.axis);
    case OpKind::kScale: need(1); return scale(inputs[0], attrs.factor);
    case OpKind::kL2Normalize: need(1); return l2_normalize(inputs[0], axis, attrs.eps);
    case OpKind::kCrossEntropyWithLogits:
      need(1);
      return cross_entropy_with_logits(inputs[0], std::span<const std::int32_t>(attrs.ids));
    case OpKind::kLeaf:
      break;
  }
  throw CatalogError("apply: op kind " + std::to_string(static_cast<int>(kind)) + " is not in the catalog");
}

#define ARIMG_INSTANTIATE_OPS(T)                                                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                            \
  template Tensor<T> scale(const Tensor<T>&, double);                                                    \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                         \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                                   \
  template Tensor<T> transpose(const Tensor<T>&, std::vector<int>);                                      \
  template Tensor<T> slice(const Tensor<T>&, int, std::int64_t, std::int64_t);                           \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                         \
  template Tensor<T> embedding_gather(const Tensor<T>&, std::span<const std::int32_t>, const Shape&);    \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                     \
  template Tensor<T> log_softmax(const Tensor<T>&, int);                                                 \
  template Tensor<T> layer_norm(const Tensor<T>&, int, double);                                          \
  template Tensor<T> gelu(const Tensor<T>&);                                                             \
  template Tensor<T> relu(const Tensor<T>&);                                                             \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, int, int);                               \
  template Tensor<T> masked_fill(const Tensor<T>&, std::span<const std::uint8_t>, const Shape&, double); \
  template Tensor<T> reduce_sum(const Tensor<T>&, std::optional<int>);                                   \
  template Tensor<T> reduce_mean(const Tensor<T>&, std::optional<int>);                                  \
  template Tensor<T> l2_normalize(const Tensor<T>&, int, double);                                        \
  template Tensor<T> cross_entropy_with_logits(const Tensor<T>&, std::span<const std::int32_t>);         \
  template Tensor<T> apply(OpKind, const std::vector<Tensor<T>>&, const OpAttrs&);

ARIMG_INSTANTIATE_OPS(float)
ARIMG_INSTANTIATE_OPS(double)

}  // namespace arimg::ops
