#include "arimg/tensor.hpp"

#include <malloc.h>

#include <algorithm>
#include <array>
#include <sstream>
#include <utility>

namespace arimg {

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

int normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  }
  return a;
}

namespace {

// Ops allocate and free many same-sized buffers of a few hundred KB. With
// glibc's defaults these go through mmap/munmap and fault pages in on every
// step; keep them on the heap instead.
const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();

constexpr std::array<std::pair<OpKind, const char*>, 22> kOpNames{{
    {OpKind::kLeaf, "leaf"},
    {OpKind::kAdd, "add"},
    {OpKind::kSub, "sub"},
    {OpKind::kMul, "mul"},
    {OpKind::kMatmul, "matmul"},
    {OpKind::kReshape, "reshape"},
    {OpKind::kTranspose, "transpose"},
    {OpKind::kSlice, "slice"},
    {OpKind::kConcat, "concat"},
    {OpKind::kEmbeddingGather, "embedding_gather"},
    {OpKind::kSoftmax, "softmax"},
    {OpKind::kLogSoftmax, "log_softmax"},
    {OpKind::kLayerNorm, "layer_norm"},
    {OpKind::kGelu, "gelu"},
    {OpKind::kRelu, "relu"},
    {OpKind::kConv2d, "conv2d"},
    {OpKind::kMaskedFill, "masked_fill"},
    {OpKind::kReduceSum, "reduce_sum"},
    {OpKind::kReduceMean, "reduce_mean"},
    {OpKind::kScale, "scale"},
    {OpKind::kL2Normalize, "l2_normalize"},
    {OpKind::kCrossEntropyWithLogits, "cross_entropy_with_logits"},
}};

}  // namespace

const char* op_name(OpKind kind) {
  for (const auto& [k, name] : kOpNames) {
    if (k == kind) return name;
  }
  return "unknown";
}

OpKind op_kind_from_name(const std::string& name) {
  for (const auto& [k, n] : kOpNames) {
    if (k != OpKind::kLeaf && name == n) return k;
  }
  throw CatalogError("unknown op kind '" + name + "'");
}

// ---------------------------------------------------------------- Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data)
    : storage_(std::make_shared<std::vector<T>>(std::move(data))), shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape " + shape_str(shape_));
  }
  if (shape_numel(shape_) != static_cast<std::int64_t>(storage_->size())) {
    throw ShapeError("tensor: shape " + shape_str(shape_) + " does not match " +
                     std::to_string(storage_->size()) + " values");
  }
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = static_cast<std::size_t>(shape_numel(shape));
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
std::int64_t Tensor<T>::dim(int axis) const {
  return shape_[static_cast<std::size_t>(normalize_axis(axis, shape_.size(), "dim"))];
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape_) + " is not a scalar");
  return (*storage_)[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  Tensor out;
  out.storage_ = storage_;
  out.shape_ = shape_;
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::view_as(Shape shape) const {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("view: non-positive dimension in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != numel()) {
    throw ShapeError("view: shape " + shape_str(shape) + " does not match " + std::to_string(numel()) + " values");
  }
  Tensor out;
  out.storage_ = storage_;
  out.shape_ = std::move(shape);
  return out;
}

template <typename T>
Tensor<T> Tensor<T>::clone() const {
  return Tensor(shape_, *storage_);
}

// ---------------------------------------------------------------- GradSink

template <typename T>
T* GradSink<T>::grad(std::size_t slot) {
  const int node = inputs_[slot];
  if (node < 0) return nullptr;
  auto& g = grads_[static_cast<std::size_t>(node)];
  if (g.empty()) g.assign(static_cast<std::size_t>(sizes_[slot]), T(0));
  return g.data();
}

// ---------------------------------------------------------------- GradMap

template <typename T>
void GradMap<T>::insert(int node, Tensor<T> grad) {
  auto it = std::lower_bound(grads_.begin(), grads_.end(), node,
                             [](const auto& p, int n) { return p.first < n; });
  grads_.insert(it, {node, std::move(grad)});
}

template <typename T>
bool GradMap<T>::contains(const Tensor<T>& leaf) const {
  return std::any_of(grads_.begin(), grads_.end(), [&](const auto& p) { return p.first == leaf.node(); });
}

template <typename T>
const Tensor<T>& GradMap<T>::at_node(int node) const {
  auto it = std::lower_bound(grads_.begin(), grads_.end(), node,
                             [](const auto& p, int n) { return p.first < n; });
  if (it == grads_.end() || it->first != node) {
    throw ContractError("grad map: no gradient for node " + std::to_string(node));
  }
  return it->second;
}

template <typename T>
const Tensor<T>& GradMap<T>::at(const Tensor<T>& leaf) const {
  return at_node(leaf.node());
}

// ---------------------------------------------------------------- Tape

template <typename T>
int Tape<T>::add_node(const Shape& shape, bool leaf) {
  node_sizes_.push_back(shape_numel(shape));
  node_shapes_.push_back(shape);
  leaf_.push_back(leaf);
  return static_cast<int>(node_sizes_.size()) - 1;
}

template <typename T>
Tensor<T> Tape<T>::watch(const Tensor<T>& value) {
  if (!value.defined()) throw ContractError("tape: cannot watch an undefined tensor");
  Tensor<T> out = value.detach();
  out.tape_ = this;
  out.node_ = add_node(out.shape_, true);
  return out;
}

template <typename T>
Tensor<T> Tape<T>::record(OpKind kind, std::initializer_list<const Tensor<T>*> inputs, Tensor<T> output,
                          BackwardFn<T> backward) {
  return record(kind, std::vector<const Tensor<T>*>(inputs), std::move(output), std::move(backward));
}

template <typename T>
Tensor<T> Tape<T>::record(OpKind kind, const std::vector<const Tensor<T>*>& inputs, Tensor<T> output,
                          BackwardFn<T> backward) {
  OpRecord<T> rec;
  rec.kind = kind;
  rec.inputs.reserve(inputs.size());
  rec.input_sizes.reserve(inputs.size());
  for (const Tensor<T>* in : inputs) {
    if (in->tape_ != nullptr && in->tape_ != this) {
      throw ContractError(std::string(op_name(kind)) + ": inputs belong to different tapes");
    }
    rec.inputs.push_back(in->tape_ == this ? in->node_ : -1);
    rec.input_sizes.push_back(in->numel());
  }
  output.tape_ = this;
  output.node_ = add_node(output.shape_, false);
  rec.output = output.node_;
  rec.backward = std::move(backward);
  records_.push_back(std::move(rec));
  return output;
}

template class Tensor<float>;
template class Tensor<double>;
template class GradSink<float>;
template class GradSink<double>;
template class GradMap<float>;
template class GradMap<double>;
template class Tape<float>;
template class Tape<double>;

}  // namespace arimg
