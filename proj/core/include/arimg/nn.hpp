#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "arimg/ops.hpp"
#include "arimg/params.hpp"
#include "arimg/rng.hpp"

// Layer helpers shared by the models. Parameters live in a ParamSet; layers
// remember indices into it, and forward functions read from a value list `p`
// (either ParamSet::values() or a tape-bound copy).
namespace arimg::nn {

template <typename T>
using Params = std::vector<Tensor<T>>;

struct LinearIds {
  int w = -1;
  int b = -1;
};

struct NormIds {
  int g = -1;
  int b = -1;
};

struct AttnIds {
  LinearIds q, k, v, o;
};

struct BlockIds {
  NormIds ln1;
  AttnIds self;
  bool has_cross = false;
  NormIds ln_cross;
  AttnIds cross;
  NormIds ln2;
  LinearIds fc1, fc2;
};

// Inverted dropout drawn from `rng`; inactive when rng is null or rate is 0.
struct Dropout {
  Rng* rng = nullptr;
  double rate = 0.0;
  bool active() const { return rng != nullptr && rate > 0.0; }
};

template <typename T>
LinearIds add_linear(ParamSet<T>& ps, const std::string& name, std::int64_t in, std::int64_t out, Rng& rng,
                     double stddev = 0.02, bool bias = true) {
  LinearIds ids;
  ids.w = ps.add_normal(name + ".w", {in, out}, rng, stddev);
  if (bias) ids.b = ps.add_zeros(name + ".b", {out});
  return ids;
}

template <typename T>
NormIds add_norm(ParamSet<T>& ps, const std::string& name, std::int64_t d) {
  return {ps.add_ones(name + ".g", {d}), ps.add_zeros(name + ".b", {d})};
}

template <typename T>
AttnIds add_attention(ParamSet<T>& ps, const std::string& name, std::int64_t d, Rng& rng) {
  return {add_linear(ps, name + ".q", d, d, rng), add_linear(ps, name + ".k", d, d, rng),
          add_linear(ps, name + ".v", d, d, rng), add_linear(ps, name + ".o", d, d, rng)};
}

template <typename T>
BlockIds add_block(ParamSet<T>& ps, const std::string& name, std::int64_t d, std::int64_t d_mlp, bool cross,
                   Rng& rng) {
  BlockIds b;
  b.ln1 = add_norm(ps, name + ".ln1", d);
  b.self = add_attention(ps, name + ".attn", d, rng);
  b.has_cross = cross;
  if (cross) {
    b.ln_cross = add_norm(ps, name + ".ln_x", d);
    b.cross = add_attention(ps, name + ".xattn", d, rng);
  }
  b.ln2 = add_norm(ps, name + ".ln2", d);
  b.fc1 = add_linear(ps, name + ".fc1", d, d_mlp, rng);
  b.fc2 = add_linear(ps, name + ".fc2", d_mlp, d, rng);
  return b;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Params<T>& p, const LinearIds& l) {
  auto y = ops::matmul(x, p[static_cast<std::size_t>(l.w)]);
  return l.b >= 0 ? ops::add(y, p[static_cast<std::size_t>(l.b)]) : y;
}

template <typename T>
Tensor<T> norm(const Tensor<T>& x, const Params<T>& p, const NormIds& n) {
  return ops::add(ops::mul(ops::layer_norm(x, -1, 1e-5), p[static_cast<std::size_t>(n.g)]),
                  p[static_cast<std::size_t>(n.b)]);
}

template <typename T>
Tensor<T> dropout(const Tensor<T>& x, const Dropout& d) {
  if (!d.active()) return x;
  const T keep = static_cast<T>(1.0 / (1.0 - d.rate));
  std::vector<T> mask(static_cast<std::size_t>(x.numel()));
  for (auto& m : mask) m = d.rng->bernoulli(d.rate) ? T(0) : keep;
  return ops::mul(x, Tensor<T>(x.shape(), std::move(mask)));
}

// Multi-head attention. xq: [B, Lq, D], xkv: [B, Lk, D]. `blocked` (shape
// [Lq, Lk], nonzero = may not attend) is optional.
template <typename T>
Tensor<T> attention(const Tensor<T>& xq, const Tensor<T>& xkv, const Params<T>& p, const AttnIds& a, int heads,
                    std::span<const std::uint8_t> blocked = {}) {
  const std::int64_t b = xq.dim(0), lq = xq.dim(1), lk = xkv.dim(1), d = xq.dim(2);
  const std::int64_t dh = d / heads;
  auto q = ops::transpose(ops::reshape(linear(xq, p, a.q), {b, lq, heads, dh}), {0, 2, 1, 3});
  auto kt = ops::transpose(ops::reshape(linear(xkv, p, a.k), {b, lk, heads, dh}), {0, 2, 3, 1});
  auto v = ops::transpose(ops::reshape(linear(xkv, p, a.v), {b, lk, heads, dh}), {0, 2, 1, 3});
  auto s = ops::scale(ops::matmul(q, kt), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (!blocked.empty()) s = ops::masked_fill(s, blocked, {lq, lk}, -1e9);
  auto o = ops::matmul(ops::softmax(s, -1), v);
  return linear(ops::reshape(ops::transpose(o, {0, 2, 1, 3}), {b, lq, d}), p, a.o);
}

// Pre-LN transformer block; `memory` is the encoder output for cross-attention.
template <typename T>
Tensor<T> block(const Tensor<T>& x, const Tensor<T>* memory, const Params<T>& p, const BlockIds& ids, int heads,
                std::span<const std::uint8_t> self_blocked, const Dropout& drop) {
  auto h = norm(x, p, ids.ln1);
  auto y = ops::add(x, dropout(attention(h, h, p, ids.self, heads, self_blocked), drop));
  if (ids.has_cross) {
    auto hc = norm(y, p, ids.ln_cross);
    y = ops::add(y, dropout(attention(hc, *memory, p, ids.cross, heads), drop));
  }
  auto m = linear(ops::gelu(linear(norm(y, p, ids.ln2), p, ids.fc1)), p, ids.fc2);
  return ops::add(y, dropout(m, drop));
}

}  // namespace arimg::nn
