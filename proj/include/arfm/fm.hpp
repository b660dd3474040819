#pragma once

// Conditional flow matching on the optimal-transport path
//   psi_t(y0, y1) = (1 - (1 - s) t) y0 + t y1,   s = sigma_min,
// whose conditional field (y1 - (1 - s) y) / (1 - (1 - s) t) is constant along
// the path. States are [L, D] row-major (frame-major).

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "arfm/model.hpp"

namespace arfm::fm {

using nn::Mat;
using State = Mat<float>;

struct OtPath {
  double sigma_min = 1e-4;

  void validate() const {
    ARFM_CHECK(sigma_min > 0.0 && sigma_min < 1.0, ErrorKind::kConfig, "ot path: sigma_min must lie in (0, 1)");
  }
};

// Templated on the matrix type so the path can also be evaluated in double.
template <class M>
M psi(const OtPath& path, double tau, const M& y0, const M& y1) {
  using T = typename M::Scalar;
  ARFM_CHECK(tau >= 0.0 && tau <= 1.0, ErrorKind::kInvalidArgument, "psi: tau must lie in [0, 1]");
  const T a = T(1.0 - (1.0 - path.sigma_min) * tau);
  return (a * y0 + T(tau) * y1).eval();
}

template <class M>
M target_field(const OtPath& path, double tau, const M& y, const M& y1) {
  using T = typename M::Scalar;
  const double den = 1.0 - (1.0 - path.sigma_min) * tau;
  ARFM_CHECK(den >= 1e-8, ErrorKind::kNumeric, "target_field: denominator vanishes at tau=" + std::to_string(tau));
  return ((y1 - T(1.0 - path.sigma_min) * y) / T(den)).eval();
}

enum class Solver { kEuler, kDopri5 };

inline Solver parse_solver(const std::string& s) {
  if (s == "euler") return Solver::kEuler;
  if (s == "dopri5") return Solver::kDopri5;
  throw Error(ErrorKind::kConfig, "unknown solver '" + s + "' (expected euler or dopri5)");
}
inline const char* to_string(Solver s) { return s == Solver::kEuler ? "euler" : "dopri5"; }

struct FmSamplerConfig {
  Solver solver = Solver::kEuler;
  int n_steps = 50;
  double rtol = 1e-3;
  double atol = 1e-5;
  std::size_t max_evals = 1000;
  double cfg_coef = 3.0;
  double inversion_cfg_coef = 1.0;

  void validate() const {
    ARFM_CHECK(n_steps >= 1, ErrorKind::kConfig, "fm sampler: n_steps must be >= 1");
    ARFM_CHECK(rtol > 0.0 && atol > 0.0, ErrorKind::kConfig, "fm sampler: tolerances must be > 0");
    ARFM_CHECK(max_evals >= 1, ErrorKind::kConfig, "fm sampler: max_evals must be >= 1");
    ARFM_CHECK(cfg_coef >= 0.0 && inversion_cfg_coef >= 0.0, ErrorKind::kConfig, "fm sampler: cfg_coef must be >= 0");
  }
};

/// Vector field v(y, tau). The counter tracks evaluations.
struct Field {
  std::function<State(const State&, double)> fn;
  std::size_t* evals = nullptr;

  State operator()(const State& y, double tau) const {
    if (evals) ++*evals;
    return fn(y, tau);
  }
};

inline void ensure_finite(const State& y, const std::string& where) {
  ARFM_CHECK(y.allFinite(), ErrorKind::kNumeric, "non-finite state " + where);
}

/// Fixed-grid Euler: y <- y + v(y, (k-1)/N) / N for k = 1..N.
inline State euler(const Field& v, State y, int n_steps, const std::function<void(int, double)>& on_step = {}) {
  ARFM_CHECK(n_steps >= 1, ErrorKind::kInvalidArgument, "euler: n_steps must be >= 1");
  const double dt = 1.0 / n_steps;
  for (int k = 0; k < n_steps; ++k) {
    const double tau = double(k) / n_steps;
    y += float(dt) * v(y, tau);
    ensure_finite(y, "after euler step " + std::to_string(k + 1));
    if (on_step) on_step(k + 1, tau);
  }
  return y;
}

struct TraceRow {
  double tau = 0.0, h = 0.0, err = 0.0;
  bool accepted = false;
};

/// Thrown when the adaptive solver runs out of evaluations.
class BudgetError : public Error {
 public:
  BudgetError(std::string msg, State partial, double tau)
      : Error(ErrorKind::kBudget, std::move(msg)), partial(std::move(partial)), tau(tau) {}
  State partial;
  double tau;
};

struct Dopri5Result {
  State y;
  std::size_t evals = 0, accepted = 0, rejected = 0;
  std::vector<TraceRow> trace;
};

/// Dormand-Prince 5(4) with FSAL on tau in [0, 1].
inline Dopri5Result dopri5(const Field& v, State y, double rtol, double atol, std::size_t max_evals,
                           double h0 = 0.05) {
  static constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  static constexpr double a21 = 1.0 / 5;
  static constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  static constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  static constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  static constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                          a65 = -5103.0 / 18656;
  static constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  // Fifth-order minus embedded fourth-order weights.
  static constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200,
                          e6 = 22.0 / 525, e7 = -1.0 / 40;
  static constexpr double kSafety = 0.9, kMinFactor = 0.2, kMaxFactor = 5.0;

  Dopri5Result res;
  std::size_t local = 0;
  Field f{v.fn, &local};
  auto budget = [&](double tau) {
    if (local + 6 > max_evals)
      throw BudgetError("dopri5: max_evals=" + std::to_string(max_evals) + " exceeded at tau=" + std::to_string(tau),
                        y, tau);
  };
  double tau = 0.0, h = std::min(h0, 1.0);
  if (max_evals < 1) throw BudgetError("dopri5: max_evals exhausted", y, 0.0);
  State k1 = f(y, 0.0);
  while (tau < 1.0) {
    budget(tau);
    const bool last = tau + h >= 1.0;
    if (last) h = 1.0 - tau;
    const State k2 = f((y + float(h * a21) * k1).eval(), tau + c2 * h);
    const State k3 = f((y + float(h * a31) * k1 + float(h * a32) * k2).eval(), tau + c3 * h);
    const State k4 = f((y + float(h * a41) * k1 + float(h * a42) * k2 + float(h * a43) * k3).eval(), tau + c4 * h);
    const State k5 =
        f((y + float(h * a51) * k1 + float(h * a52) * k2 + float(h * a53) * k3 + float(h * a54) * k4).eval(),
          tau + c5 * h);
    const State k6 = f((y + float(h * a61) * k1 + float(h * a62) * k2 + float(h * a63) * k3 + float(h * a64) * k4 +
                        float(h * a65) * k5)
                           .eval(),
                       last ? 1.0 : tau + h);
    const State y5 =
        (y + float(h * b1) * k1 + float(h * b3) * k3 + float(h * b4) * k4 + float(h * b5) * k5 + float(h * b6) * k6)
            .eval();
    const State k7 = f(y5, last ? 1.0 : tau + h);
    const State e =
        (float(h * e1) * k1 + float(h * e3) * k3 + float(h * e4) * k4 + float(h * e5) * k5 + float(h * e6) * k6 +
         float(h * e7) * k7)
            .eval();
    double acc = 0.0;
    for (Eigen::Index i = 0; i < e.size(); ++i) {
      const double sc = atol + rtol * std::max(std::abs(double(y.data()[i])), std::abs(double(y5.data()[i])));
      const double r = double(e.data()[i]) / sc;
      acc += r * r;
    }
    const double err = std::sqrt(acc / double(std::max<Eigen::Index>(1, e.size())));
    ARFM_CHECK(std::isfinite(err), ErrorKind::kNumeric, "dopri5: non-finite error estimate at tau=" + std::to_string(tau));
    const bool ok = err <= 1.0;
    res.trace.push_back({tau, h, err, ok});
    if (ok) {
      tau = last ? 1.0 : tau + h;
      y = y5;
      k1 = k7;
      ++res.accepted;
      ensure_finite(y, "at tau=" + std::to_string(tau));
    } else {
      ++res.rejected;
    }
    const double factor = err == 0.0 ? kMaxFactor : std::clamp(kSafety * std::pow(err, -0.2), kMinFactor, kMaxFactor);
    h *= ok ? factor : std::min(1.0, factor);
  }
  res.y = std::move(y);
  res.evals = local;
  if (v.evals) *v.evals += local;
  return res;
}

/// Inversion loop: from tau = 1 downwards, z <- z - v(z, t) / N; the
/// states are returned in reverse order (most-noised first).
inline std::vector<State> invert(const Field& v, State z, int n_steps) {
  ARFM_CHECK(n_steps >= 1, ErrorKind::kInvalidArgument, "invert: n_steps must be >= 1");
  const double dt = 1.0 / n_steps;
  std::vector<State> noises;
  noises.reserve(std::size_t(n_steps));
  double t = 1.0;
  for (int i = 0; i < n_steps; ++i) {
    z -= float(dt) * v(z, t);
    ensure_finite(z, "after inversion step " + std::to_string(i + 1));
    noises.push_back(z);
    t -= dt;
  }
  std::reverse(noises.begin(), noises.end());
  return noises;
}

inline void check_mask(std::size_t len, std::size_t s, std::size_t e) {
  ARFM_CHECK(s <= e && e <= len, ErrorKind::kInvalidArgument,
             "inpaint: mask [" + std::to_string(s) + ", " + std::to_string(e) + ") invalid for L=" + std::to_string(len));
}

/// Copies rows outside [s, e) from `src` into `dst`.
inline void replace_context(State& dst, const State& src, std::size_t s, std::size_t e) {
  const auto len = dst.rows();
  dst.topRows(Eigen::Index(s)) = src.topRows(Eigen::Index(s));
  dst.bottomRows(len - Eigen::Index(e)) = src.bottomRows(len - Eigen::Index(e));
}

/// Zero-shot inpainting: invert z0 with `inv`, then integrate fresh noise with
/// `fwd`, overwriting the context by the matching inversion state each step.
inline State zs_inpaint(const Field& fwd, const Field& inv, const State& z0, std::size_t s, std::size_t e,
                        int n_steps, SeededRng& rng) {
  check_mask(std::size_t(z0.rows()), s, e);
  const std::vector<State> noises = invert(inv, z0, n_steps);
  State z(z0.rows(), z0.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
  const double dt = 1.0 / n_steps;
  double t = 0.0;
  for (const State& n : noises) {
    replace_context(z, n, s, e);
    z += float(dt) * fwd(z, t);
    ensure_finite(z, "during zero-shot inpainting at t=" + std::to_string(t));
    t += dt;
  }
  replace_context(z, z0, s, e);
  return z;
}

/// Supervised inpainting: the context is plugged in from z0 before
/// every Euler step. The initial state is Gaussian noise.
inline State sup_inpaint(const Field& fwd, const State& z0, std::size_t s, std::size_t e, int n_steps,
                         SeededRng& rng) {
  check_mask(std::size_t(z0.rows()), s, e);
  ARFM_CHECK(n_steps >= 1, ErrorKind::kInvalidArgument, "sup_inpaint: n_steps must be >= 1");
  State z(z0.rows(), z0.cols());
  for (Eigen::Index i = 0; i < z.size(); ++i) z.data()[i] = rng.normal();
  const double dt = 1.0 / n_steps;
  double t = 0.0;
  for (int k = 0; k < n_steps; ++k) {
    replace_context(z, z0, s, e);
    z += float(dt) * fwd(z, t);
    ensure_finite(z, "during supervised inpainting step " + std::to_string(k + 1));
    t += dt;
  }
  replace_context(z, z0, s, e);
  return z;
}

// ---------------------------------------------------------------------------
// Masks.

enum class MaskPolicy { kPaper, kMargin };

inline MaskPolicy parse_mask_policy(const std::string& s) {
  if (s == "paper") return MaskPolicy::kPaper;
  if (s == "margin") return MaskPolicy::kMargin;
  throw Error(ErrorKind::kConfig, "unknown mask policy '" + s + "' (expected paper or margin)");
}
inline const char* to_string(MaskPolicy p) { return p == MaskPolicy::kPaper ? "paper" : "margin"; }

struct Span {
  std::size_t s = 0, e = 0;
};

/// paper: width L/2, start uniform in [0.1 L, 0.9 L] clamped so the span ends by 0.9 L.
/// margin: a 5 s span with at least 1 s of context on both sides (shrunk for short inputs).
inline Span draw_mask(MaskPolicy policy, std::size_t len, double frame_rate, SeededRng& rng) {
  ARFM_CHECK(len >= 3, ErrorKind::kInvalidArgument, "draw_mask: sequence too short");
  if (policy == MaskPolicy::kPaper) {
    const std::size_t m = len / 2;
    const auto lo = std::size_t(std::llround(0.1 * double(len)));
    const auto end_cap = std::size_t(std::llround(0.9 * double(len)));
    const std::size_t hi = end_cap >= lo + m ? end_cap - m : lo;
    const std::size_t s = lo + rng.below(std::uint32_t(hi - lo + 1));
    return {s, std::min(len, s + m)};
  }
  std::size_t margin = std::max<std::size_t>(1, std::min<std::size_t>(std::size_t(std::llround(frame_rate)), len / 5));
  std::size_t width = std::min<std::size_t>(std::size_t(std::llround(5.0 * frame_rate)), len - 2 * margin);
  width = std::max<std::size_t>(1, width);
  const std::size_t hi = len - margin - width;
  const std::size_t s = margin + rng.below(std::uint32_t(hi - margin + 1));
  return {s, s + width};
}

// ---------------------------------------------------------------------------
// Model plumbing.

inline State to_state(const Tensor& t) {
  ARFM_CHECK(t.rank() == 2, ErrorKind::kShape, "fm: latent must be [L, D]");
  State s(Eigen::Index(t.dim(0)), Eigen::Index(t.dim(1)));
  std::copy(t.data().begin(), t.data().end(), s.data());
  return s;
}

inline Tensor to_tensor(const State& s) {
  return Tensor({std::size_t(s.rows()), std::size_t(s.cols())}, std::vector<float>(s.data(), s.data() + s.size()));
}

/// Conditional inputs for one sequence, plus their unconditional counterpart.
struct Conditioning {
  ConditionGrid cond, uncond;
  std::vector<int> caption, null_caption{CaptionVocab::kNull};
};

inline Conditioning make_conditioning(const Model& m, const WorldSample& smp, const DropMask& mask = {}) {
  const std::size_t len = smp.tokens.length() ? smp.tokens.length() : smp.latent.dim(0);
  Conditioning c;
  c.cond = m.cond().build(m.params.data(), smp.controls, mask, len);
  c.uncond = m.cond().null_grid(m.params.data(), len);
  c.caption = effective_caption(smp.caption, mask.caption);
  return c;
}

/// Model field on normalized states; `alpha` mixes conditional and unconditional
/// predictions and the endpoints 0 and 1 skip the unused pass.
inline Field guided_field(const Model& m, const Conditioning& c, double alpha, std::size_t* evals = nullptr) {
  ARFM_CHECK(m.paradigm() == Paradigm::kFm, ErrorKind::kInvalidArgument, "fm: model is not a flow model");
  auto fn = [&m, &c, alpha](const State& y, double tau) -> State {
    auto run = [&](const ConditionGrid& g, const std::vector<int>& cap) {
      nn::SeqInput<float> in;
      in.features = y;
      in.cond = g.values;
      in.caption = cap;
      in.tau = float(tau);
      return m.net().forward(m.params.data(), in);
    };
    if (alpha == 1.0) return run(c.cond, c.caption);
    if (alpha == 0.0) return run(c.uncond, c.null_caption);
    const State vc = run(c.cond, c.caption);
    const State vu = run(c.uncond, c.null_caption);
    return (vu + float(alpha) * (vc - vu)).eval();
  };
  return Field{fn, evals};
}

inline std::size_t evals_per_call(double alpha) { return (alpha == 0.0 || alpha == 1.0) ? 1 : 2; }

struct SampleStats {
  std::size_t model_evals = 0;
  std::vector<TraceRow> trace;
};

/// Draws one latent (unnormalized, [L, D]) from the conditioned model.
inline Tensor sample(const Model& m, const Conditioning& c, std::size_t len, const FmSamplerConfig& cfg, SeededRng& rng,
                     SampleStats* stats = nullptr) {
  cfg.validate();
  const auto d = Eigen::Index(m.spec().world.latent_dim);
  State y(Eigen::Index(len), d);
  for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = rng.normal();
  std::size_t calls = 0;
  const Field v = guided_field(m, c, cfg.cfg_coef, &calls);
  State out;
  if (cfg.solver == Solver::kEuler) {
    out = euler(v, std::move(y), cfg.n_steps, [&](int, double tau) {
      if (stats) stats->trace.push_back({tau, 1.0 / cfg.n_steps, 0.0, true});
    });
  } else {
    Dopri5Result r = dopri5(v, std::move(y), cfg.rtol, cfg.atol, cfg.max_evals);
    if (stats) stats->trace = std::move(r.trace);
    out = std::move(r.y);
  }
  if (stats) stats->model_evals += calls * evals_per_call(cfg.cfg_coef);
  return unnormalize(to_tensor(out), m.spec().norm);
}

inline Tensor zs_inpaint(const Model& m, const WorldSample& smp, std::size_t s, std::size_t e,
                         const FmSamplerConfig& cfg, SeededRng& rng) {
  cfg.validate();
  const Conditioning c = make_conditioning(m, smp);
  const State z0 = to_state(normalize(smp.latent, m.spec().norm));
  const State z = zs_inpaint(guided_field(m, c, cfg.cfg_coef), guided_field(m, c, cfg.inversion_cfg_coef), z0, s, e,
                             cfg.n_steps, rng);
  Tensor out = unnormalize(to_tensor(z), m.spec().norm);
  // Context comes back through an affine round trip; restore it bit-exactly.
  for (std::size_t j = 0; j < out.dim(0); ++j)
    if (j < s || j >= e)
      for (std::size_t q = 0; q < out.dim(1); ++q) out.at(j, q) = smp.latent.at(j, q);
  return out;
}

inline Tensor sup_inpaint(const Model& m, const WorldSample& smp, std::size_t s, std::size_t e,
                          const FmSamplerConfig& cfg, SeededRng& rng) {
  cfg.validate();
  const Conditioning c = make_conditioning(m, smp);
  const State z0 = to_state(normalize(smp.latent, m.spec().norm));
  const State z = sup_inpaint(guided_field(m, c, cfg.cfg_coef), z0, s, e, cfg.n_steps, rng);
  Tensor out = unnormalize(to_tensor(z), m.spec().norm);
  for (std::size_t j = 0; j < out.dim(0); ++j)
    if (j < s || j >= e)
      for (std::size_t q = 0; q < out.dim(1); ++q) out.at(j, q) = smp.latent.at(j, q);
  return out;
}

// ---------------------------------------------------------------------------
// Training loss.

/// Per-element loss weights: all ones, or ones only on the frames of a span.
struct LossSpan {
  bool masked = false;
  std::size_t s = 0, e = 0;
};

/// (1 + tau) * mean squared field error for one sequence; accumulates scaled
/// gradients into `grads` when non-null. With a span, context frames of the
/// state are replaced by the clean latent and only the span is scored.
inline double sequence_loss(const Model& m, const OtPath& path, const State& z, const WorldSample& smp,
                            const DropMask& mask, double tau, const State& y0, const LossSpan& span,
                            float grad_scale, float* grads) {
  ARFM_CHECK(m.paradigm() == Paradigm::kFm, ErrorKind::kInvalidArgument, "fm: model is not a flow model");
  const float* p = m.params.data();
  State y = psi(path, tau, y0, z);
  const State target = (z - float(1.0 - path.sigma_min) * y0).eval();
  if (span.masked) replace_context(y, z, span.s, span.e);
  const ConditionGrid grid = m.cond().build(p, smp.controls, mask, std::size_t(z.rows()));
  nn::SeqInput<float> in;
  in.features = y;
  in.cond = grid.values;
  in.caption = effective_caption(smp.caption, mask.caption);
  in.tau = float(tau);
  nn::ForwardTrace<float> tr;
  const State out = m.net().forward(p, in, grads ? &tr : nullptr);
  State diff = out - target;
  if (span.masked) {
    diff.topRows(Eigen::Index(span.s)).setZero();
    diff.bottomRows(diff.rows() - Eigen::Index(span.e)).setZero();
  }
  const double count = span.masked ? double(span.e - span.s) * double(z.cols()) : double(z.size());
  const double w = 1.0 + tau;
  const double loss = w * double(diff.squaredNorm()) / count;
  if (grads) {
    const State d_out = (float(2.0 * w / count) * grad_scale) * diff;
    const Mat<float> d_cond = m.net().backward(p, tr, d_out, grads);
    m.cond().backward(d_cond, grid, grads);
  }
  return loss;
}

}  // namespace arfm::fm
