#include "arimg/optim.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace arimg {

double LrSchedule::at(std::int64_t step) const {
  if (warmup_steps > 0 && step < warmup_steps) {
    return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  }
  if (step <= decay_start) return base_lr;
  if (total_steps <= decay_start || step >= total_steps) return base_lr * final_ratio;
  const double frac = static_cast<double>(step - decay_start) / static_cast<double>(total_steps - decay_start);
  return base_lr * std::pow(final_ratio, frac);
}

LrSchedule LrSchedule::scaled(std::int64_t total_steps, double base_lr) {
  const LrSchedule p = full_scale();
  LrSchedule s = p;
  s.base_lr = base_lr;
  s.total_steps = total_steps;
  s.warmup_steps = total_steps * p.warmup_steps / p.total_steps;
  s.decay_start = total_steps * p.decay_start / p.total_steps;
  return s;
}

Adafactor::Adafactor(std::vector<Tensor<float>> params, AdafactorConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  slots_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto& p = params_[i];
    if (!p.defined()) throw ContractError("adafactor: undefined parameter " + std::to_string(i));
    Slot& s = slots_[i];
    s.factored = p.rank() >= 2;
    s.cols = p.rank() >= 1 ? p.dim(-1) : 1;
    s.rows = p.numel() / s.cols;
    if (s.factored) {
      s.vr.assign(static_cast<std::size_t>(s.rows), 0.0f);
      s.vc.assign(static_cast<std::size_t>(s.cols), 0.0f);
    } else {
      s.v.assign(static_cast<std::size_t>(p.numel()), 0.0f);
    }
    s.m_q.assign(static_cast<std::size_t>(p.numel()), 0);
    if (cfg_.track_float_moment) s.m_shadow.assign(static_cast<std::size_t>(p.numel()), 0.0f);
  }
}

std::int64_t Adafactor::second_moment_floats() const {
  std::int64_t n = 0;
  for (const auto& s : slots_) n += static_cast<std::int64_t>(s.vr.size() + s.vc.size() + s.v.size());
  return n;
}

std::vector<float> Adafactor::dequantized_moment(std::size_t i) const {
  const Slot& s = slots_.at(i);
  std::vector<float> out(s.m_q.size());
  for (std::size_t j = 0; j < out.size(); ++j) out[j] = static_cast<float>(s.m_q[j]) * s.m_scale;
  return out;
}

AdafactorStats Adafactor::step(std::span<const Tensor<float>> grads) {
  if (grads.size() != params_.size()) {
    throw ContractError("adafactor: " + std::to_string(grads.size()) + " gradients for " +
                        std::to_string(params_.size()) + " parameters");
  }
  double sq = 0.0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (!grads[i].defined()) continue;
    if (grads[i].numel() != params_[i].numel()) {
      throw ShapeError("adafactor: gradient " + std::to_string(i) + " has shape " + shape_str(grads[i].shape()) +
                       ", parameter has " + shape_str(params_[i].shape()));
    }
    for (float g : grads[i].data()) sq += static_cast<double>(g) * g;
  }
  AdafactorStats st;
  st.grad_norm = std::sqrt(sq);
  if (!std::isfinite(st.grad_norm)) throw NumericError("adafactor: non-finite gradient norm");
  if (cfg_.clip_norm > 0.0 && st.grad_norm > cfg_.clip_norm) st.clip_scale = cfg_.clip_norm / st.grad_norm;
  st.lr = cfg_.schedule.at(step_);
  ++step_;
  const double t = static_cast<double>(step_);
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double corr1 = 1.0 - std::pow(b1, t);
  const double corr2 = 1.0 - std::pow(b2, t);

  std::vector<double> g2, u, m;
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Slot& s = slots_[i];
    const auto n = static_cast<std::size_t>(params_[i].numel());
    g2.assign(n, cfg_.eps);
    u.assign(n, 0.0);
    if (grads[i].defined()) {
      const auto g = grads[i].data();
      for (std::size_t j = 0; j < n; ++j) {
        u[j] = static_cast<double>(g[j]) * st.clip_scale;
        g2[j] = u[j] * u[j] + cfg_.eps;
      }
    }
    // Second moment and normalized update.
    if (s.factored) {
      const auto R = static_cast<std::size_t>(s.rows), C = static_cast<std::size_t>(s.cols);
      std::vector<double> rmean(R, 0.0), cmean(C, 0.0);
      for (std::size_t r = 0; r < R; ++r) {
        for (std::size_t c = 0; c < C; ++c) {
          rmean[r] += g2[r * C + c];
          cmean[c] += g2[r * C + c];
        }
      }
      double vr_mean = 0.0;
      for (std::size_t r = 0; r < R; ++r) {
        s.vr[r] = static_cast<float>(b2 * s.vr[r] + (1.0 - b2) * rmean[r] / static_cast<double>(C));
        vr_mean += s.vr[r];
      }
      vr_mean /= static_cast<double>(R);
      for (std::size_t c = 0; c < C; ++c) {
        s.vc[c] = static_cast<float>(b2 * s.vc[c] + (1.0 - b2) * cmean[c] / static_cast<double>(R));
      }
      // vhat[r][c] = vr[r] * vc[c] / mean(vr) / corr2, split into row and column factors.
      std::vector<double> col_f(C);
      for (std::size_t c = 0; c < C; ++c) col_f[c] = 1.0 / std::sqrt(static_cast<double>(s.vc[c]));
      for (std::size_t r = 0; r < R; ++r) {
        const double row_f = 1.0 / std::sqrt(static_cast<double>(s.vr[r]) / vr_mean / corr2);
        double* ur = u.data() + r * C;
        for (std::size_t c = 0; c < C; ++c) ur[c] *= row_f * col_f[c];
      }
    } else {
      for (std::size_t j = 0; j < n; ++j) {
        s.v[j] = static_cast<float>(b2 * s.v[j] + (1.0 - b2) * g2[j]);
        u[j] /= std::sqrt(static_cast<double>(s.v[j]) / corr2);
      }
    }
    double rms = 0.0;
    for (double x : u) rms += x * x;
    rms = std::sqrt(rms / static_cast<double>(n));
    const double denom = std::max(1.0, rms / cfg_.update_clip);

    // First moment: dequantize, update, requantize.
    m.resize(n);
    double absmax = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      m[j] = b1 * static_cast<double>(s.m_q[j]) * s.m_scale + (1.0 - b1) * u[j] / denom;
      absmax = std::max(absmax, std::abs(m[j]));
    }
    if (cfg_.track_float_moment) {
      for (std::size_t j = 0; j < n; ++j) s.m_shadow[j] = static_cast<float>(m[j]);
    }
    s.m_scale = static_cast<float>(absmax / 127.0);
    const double inv_scale = s.m_scale > 0.0f ? 1.0 / static_cast<double>(s.m_scale) : 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      // Round half away from zero; |m| <= absmax keeps the result within int8.
      const double q = m[j] * inv_scale;
      s.m_q[j] = static_cast<std::int8_t>(std::clamp(static_cast<int>(q + (q < 0.0 ? -0.5 : 0.5)), -127, 127));
    }

    const bool decay = params_[i].rank() >= 2 && cfg_.weight_decay > 0.0;
    auto w = params_[i].mutable_data();
    for (std::size_t j = 0; j < n; ++j) {
      double next = w[j] - st.lr * (m[j] / corr1);
      if (decay) next -= st.lr * cfg_.weight_decay * w[j];
      w[j] = static_cast<float>(next);
    }
  }
  return st;
}

}  // namespace arimg
