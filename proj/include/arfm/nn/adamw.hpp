#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "arfm/nn/params.hpp"

namespace arfm::nn {

/// Linear warmup to `peak`, then cosine decay to zero at `total_steps`.
struct LrSchedule {
  double peak = 1e-4;
  long warmup_steps = 4000;
  long total_steps = 2000;

  double at(long step) const {
    if (step <= 0) return 0.0;
    if (step < warmup_steps) return peak * double(step) / double(warmup_steps);
    if (step >= total_steps) return 0.0;
    const double span = double(total_steps - warmup_steps);
    const double prog = span > 0.0 ? double(step - warmup_steps) / span : 1.0;
    return peak * 0.5 * (1.0 + std::cos(std::numbers::pi * prog));
  }
};

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;  // <= 0 disables global-norm clipping
};

/// Decoupled-weight-decay Adam. Decay applies to matrix parameters only
/// (entries with more than one row); gains and biases are exempt.
class AdamW {
 public:
  AdamW(const ParamLayout& layout, AdamWConfig cfg = {})
      : layout_(&layout), cfg_(cfg), m_(layout.total(), 0.0f), v_(layout.total(), 0.0f) {}

  long steps() const noexcept { return t_; }

  /// Returns the pre-clip global gradient norm.
  double step(ParamVec& params, ParamVec& grads, double lr) {
    ARFM_CHECK(params.size() == m_.size() && grads.size() == m_.size(), ErrorKind::kShape,
               "adamw: buffer size mismatch");
    double sq = 0.0;
    for (float g : grads) sq += double(g) * double(g);
    const double norm = std::sqrt(sq);
    ARFM_CHECK(std::isfinite(norm), ErrorKind::kNumeric, "adamw: non-finite gradient");
    const float scale = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? float(cfg_.clip_norm / norm) : 1.0f;
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, double(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, double(t_));
    const float b1 = float(cfg_.beta1), b2 = float(cfg_.beta2);
    const float step_size = float(lr / bc1);
    const float inv_bc2 = float(1.0 / bc2);
    const float eps = float(cfg_.eps);
    for (const ParamEntry& e : layout_->entries()) {
      const float wd = e.rows > 1 ? float(lr * cfg_.weight_decay) : 0.0f;
      for (std::size_t i = e.offset; i < e.offset + e.size(); ++i) {
        const float g = grads[i] * scale;
        m_[i] = b1 * m_[i] + (1.0f - b1) * g;
        v_[i] = b2 * v_[i] + (1.0f - b2) * g * g;
        params[i] -= step_size * m_[i] / (std::sqrt(v_[i] * inv_bc2) + eps) + wd * params[i];
      }
    }
    return norm;
  }

 private:
  const ParamLayout* layout_;
  AdamWConfig cfg_;
  ParamVec m_, v_;
  long t_ = 0;
};

}  // namespace arfm::nn
