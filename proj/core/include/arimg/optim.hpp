#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "arimg/tensor.hpp"

namespace arimg {

// Linear warmup to base_lr, flat until decay_start, then exponential decay
// reaching base_lr * final_ratio at total_steps (held there afterwards).
struct LrSchedule {
  double base_lr = 4.5e-5;
  std::int64_t warmup_steps = 5000;
  std::int64_t decay_start = 85000;
  std::int64_t total_steps = 450000;
  double final_ratio = 0.025;

  double at(std::int64_t step) const;

  // The large-scale constants.
  static LrSchedule full_scale() { return {}; }
  // Same proportions as the preset, scaled linearly to `total_steps`.
  static LrSchedule scaled(std::int64_t total_steps, double base_lr);
};

struct AdafactorConfig {
  double beta1 = 0.9;
  double beta2 = 0.96;
  double weight_decay = 4.5e-2;  // decoupled, multiplied by lr; matrices only
  double clip_norm = 4.0;  // global gradient norm; <= 0 disables
  double update_clip = 1.0;  // RMS cap on the normalized update
  double eps = 1e-30;
  LrSchedule schedule;
  bool track_float_moment = false;  // keep an unquantized shadow for tests
};

struct AdafactorStats {
  double grad_norm = 0.0;
  double clip_scale = 1.0;
  double lr = 0.0;
};

// Adafactor with factored second moments (row/column accumulators for
// parameters of rank >= 2, viewed as [prod(leading), last]) and a first
// moment stored as int8 with a per-tensor absmax scale. Parameter values are
// updated in place through the shared storage of the tensors passed in.
class Adafactor {
 public:
  Adafactor(std::vector<Tensor<float>> params, AdafactorConfig cfg);

  // grads[i] matches params[i]; an undefined tensor counts as zero.
  AdafactorStats step(std::span<const Tensor<float>> grads);

  std::int64_t step_count() const noexcept { return step_; }
  const AdafactorConfig& config() const noexcept { return cfg_; }

  struct Slot {
    std::int64_t rows = 0, cols = 0;
    bool factored = false;
    std::vector<float> vr, vc;  // factored accumulators (rows, cols)
    std::vector<float> v;  // full accumulator for vectors
    std::vector<std::int8_t> m_q;
    float m_scale = 0.0f;
    std::vector<float> m_shadow;  // pre-quantization first moment (tests only)
  };
  const Slot& slot(std::size_t i) const { return slots_.at(i); }
  // Number of floats held for second moments across all parameters.
  std::int64_t second_moment_floats() const;
  std::vector<float> dequantized_moment(std::size_t i) const;

 private:
  std::vector<Tensor<float>> params_;
  AdafactorConfig cfg_;
  std::vector<Slot> slots_;
  std::int64_t step_ = 0;
};

}  // namespace arimg
