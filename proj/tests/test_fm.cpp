#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "arfm/fm.hpp"

using namespace arfm;
using namespace arfm::fm;

namespace {

const World& default_world() {
  static const World w{WorldSpec{}};
  return w;
}

State random_state(SeededRng& rng, Eigen::Index rows, Eigen::Index cols) {
  State s(rows, cols);
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = float(rng.normal());
  return s;
}

Field constant_field(const State& c) {
  return Field{[c](const State&, double) { return c; }};
}

Model small_model(std::uint64_t seed = 1) {
  ModelSpec spec;
  spec.paradigm = Paradigm::kFm;
  spec.shape = {2, 16, 2, 32, 4, 128};
  spec.norm.mean = 0.1f;
  spec.norm.mean_std = 0.7f;
  Model m(spec);
  m.init_params(seed);
  return m;
}

double max_abs(const State& a) { return a.cwiseAbs().maxCoeff(); }

}  // namespace

TEST(OtPath, Endpoints) {
  SeededRng rng(1);
  const OtPath path;
  const State y0 = random_state(rng, 4, 3), y1 = random_state(rng, 4, 3);
  EXPECT_EQ(psi(path, 0.0, y0, y1), y0);
  EXPECT_LT(max_abs(psi(path, 1.0, y0, y1) - (float(path.sigma_min) * y0 + y1)), 1e-6);
  EXPECT_THROW(psi(path, 1.5, y0, y1), Error);
}

TEST(OtPath, FieldIsConstantAlongThePath) {
  SeededRng rng(2);
  const OtPath path;
  for (int t = 0; t < 100; ++t) {
    const State y0 = random_state(rng, 5, 4), y1 = random_state(rng, 5, 4);
    const double tau = rng.uniform_double();
    const nn::Mat<double> d0 = y0.cast<double>(), d1 = y1.cast<double>();
    const nn::Mat<double> u = target_field(path, tau, psi(path, tau, d0, d1), d1);
    EXPECT_LT((u - (d1 - (1.0 - path.sigma_min) * d0)).cwiseAbs().maxCoeff(), 1e-12) << "tau=" << tau;
    // In float the rounding of psi is amplified by 1 / (1 - (1 - s) tau).
    const State uf = target_field(path, tau, psi(path, tau, y0, y1), y1);
    const double den = 1.0 - (1.0 - path.sigma_min) * tau;
    EXPECT_LT(max_abs(uf - (y1 - float(1.0 - path.sigma_min) * y0)), 1e-6 / den) << "tau=" << tau;
  }
}

TEST(OtPath, EulerOnOracleFieldLandsOnTarget) {
  SeededRng rng(3);
  const OtPath path;
  const State y0 = random_state(rng, 6, 4), y1 = random_state(rng, 6, 4);
  const Field v{[&](const State& y, double tau) { return target_field(path, tau, y, y1); }};
  const State target = float(path.sigma_min) * y0 + y1;
  for (int n : {1, 7, 50}) EXPECT_LT(max_abs(euler(v, y0, n) - target), 1e-5) << n;
}

TEST(Euler, ConstantFieldAndExponentialGrowth) {
  SeededRng rng(4);
  const State c = random_state(rng, 3, 2), y0 = random_state(rng, 3, 2);
  EXPECT_LT(max_abs(euler(constant_field(c), y0, 13) - (y0 + c)), 1e-5);
  State one = State::Ones(1, 1);
  const Field grow{[](const State& y, double) { return y; }};
  EXPECT_NEAR(euler(grow, one, 10)(0, 0), std::pow(1.1, 10), 1e-5);
  int calls = 0;
  euler(grow, one, 4, [&](int k, double tau) {
    ++calls;
    EXPECT_DOUBLE_EQ(tau, (k - 1) / 4.0);
  });
  EXPECT_EQ(calls, 4);
  EXPECT_THROW(euler(grow, one, 0), Error);
}

TEST(Dopri5, ExponentialReachesE) {
  const Field grow{[](const State& y, double) { return y; }};
  const Dopri5Result r = dopri5(grow, State::Ones(1, 1), 1e-4, 1e-7, 1000);
  const double err = std::abs(r.y(0, 0) - std::numbers::e);
  EXPECT_LT(err, 1e-3);
  // Euler's error on the same problem is e - (1 + 1/N)^N; find the N that matches.
  long n = 1;
  while (std::numbers::e - std::pow(1.0 + 1.0 / double(n), double(n)) > std::max(err, 1e-6)) ++n;
  EXPECT_LT(r.evals, std::size_t(n));
  EXPECT_EQ(r.evals, 1 + 6 * (r.accepted + r.rejected));
}

TEST(Dopri5, PolynomialAndConstantFieldsAreExact) {
  const Field cubic{[](const State& y, double tau) { return State::Constant(y.rows(), y.cols(), float(3 * tau * tau)); }};
  EXPECT_NEAR(dopri5(cubic, State::Zero(1, 1), 1e-6, 1e-9, 1000).y(0, 0), 1.0, 1e-6);
  SeededRng rng(5);
  const State c = random_state(rng, 2, 3), y0 = random_state(rng, 2, 3);
  const Dopri5Result r = dopri5(constant_field(c), y0, 1e-3, 1e-6, 1000);
  EXPECT_LT(max_abs(r.y - (y0 + c)), 1e-5);
  EXPECT_EQ(r.rejected, 0u);
}

TEST(Dopri5, TighterToleranceIsMoreAccurate) {
  const Field f{[](const State& y, double tau) { return (std::cos(6.0 * tau) * y).eval(); }};
  const double exact = std::exp(std::sin(6.0) / 6.0);
  double prev = 1e9;
  std::size_t prev_evals = 0;
  for (double rtol : {1e-2, 1e-4, 1e-6}) {
    const Dopri5Result r = dopri5(f, State::Ones(1, 1), rtol, rtol * 1e-3, 10000);
    const double err = std::abs(r.y(0, 0) - exact);
    EXPECT_LE(err, prev);
    EXPECT_GE(r.evals, prev_evals);
    prev = err;
    prev_evals = r.evals;
  }
  EXPECT_LT(prev, 1e-5);
}

TEST(Dopri5, BudgetErrorCarriesPartialState) {
  const Field f{[](const State& y, double tau) { return (std::cos(40.0 * tau) * y).eval(); }};
  try {
    dopri5(f, State::Ones(1, 1), 1e-8, 1e-10, 20);
    FAIL() << "expected BudgetError";
  } catch (const BudgetError& e) {
    EXPECT_EQ(e.kind(), ErrorKind::kBudget);
    EXPECT_LT(e.tau, 1.0);
    EXPECT_EQ(e.partial.rows(), 1);
  }
}

TEST(Dopri5, CountsIntoCallerCounter) {
  std::size_t evals = 0;
  const Field grow{[](const State& y, double) { return y; }, &evals};
  const Dopri5Result r = dopri5(grow, State::Ones(1, 1), 1e-3, 1e-6, 1000);
  EXPECT_EQ(evals, r.evals);
  ASSERT_FALSE(r.trace.empty());
  double tau = 0.0;
  for (const TraceRow& row : r.trace) {
    EXPECT_GE(row.tau, tau);
    if (row.accepted) tau = row.tau + row.h;
  }
  EXPECT_NEAR(tau, 1.0, 1e-12);
}

TEST(Invert, SingleStepAndOrdering) {
  SeededRng rng(6);
  const State z = random_state(rng, 3, 2), c = random_state(rng, 3, 2);
  std::vector<double> taus;
  const Field v{[&](const State&, double t) {
    taus.push_back(t);
    return c;
  }};
  const auto one = invert(v, z, 1);
  ASSERT_EQ(one.size(), 1u);
  EXPECT_LT(max_abs(one[0] - (z - c)), 1e-6);
  EXPECT_EQ(taus, std::vector<double>{1.0});
  const auto four = invert(v, z, 4);
  // Most-noised state first.
  EXPECT_LT(max_abs(four[0] - (z - c)), 1e-5);
  EXPECT_LT(max_abs(four[3] - (z - 0.25f * c)), 1e-5);
  // A constant field integrates back to where inversion started.
  EXPECT_LT(max_abs(euler(v, four[0], 4) - z), 1e-5);
}

TEST(Inpaint, ContextIsBitwiseAndSpanChanges) {
  SeededRng rng(7);
  const Field v{[](const State& y, double tau) { return (std::sin(3.0 * tau) * y.array().tanh()).matrix().eval(); }};
  for (int t = 0; t < 50; ++t) {
    const Eigen::Index len = 8 + Eigen::Index(rng.below(20));
    const State z0 = random_state(rng, len, 3);
    const std::size_t s = rng.below(std::uint32_t(len));
    const std::size_t e = s + 1 + rng.below(std::uint32_t(len - Eigen::Index(s)));
    for (int mode = 0; mode < 2; ++mode) {
      SeededRng r(t);
      const State out = mode == 0 ? zs_inpaint(v, v, z0, s, e, 5, r) : sup_inpaint(v, z0, s, e, 5, r);
      for (Eigen::Index j = 0; j < len; ++j) {
        if (j >= Eigen::Index(s) && j < Eigen::Index(e)) continue;
        for (Eigen::Index q = 0; q < 3; ++q) ASSERT_EQ(out(j, q), z0(j, q));
      }
      EXPECT_NE(out.middleRows(Eigen::Index(s), Eigen::Index(e - s)), z0.middleRows(Eigen::Index(s), Eigen::Index(e - s)));
    }
  }
}

TEST(Inpaint, FullAndEmptyMasks) {
  SeededRng rng(8);
  const State z0 = random_state(rng, 10, 2), c = random_state(rng, 10, 2);
  const Field v = constant_field(c);
  SeededRng a(1), b(1);
  EXPECT_EQ(sup_inpaint(v, z0, 4, 4, 6, a), z0);
  EXPECT_EQ(zs_inpaint(v, v, z0, 0, 0, 6, b), z0);
  // With everything masked, supervised inpainting is plain sampling from its noise.
  SeededRng c1(2), c2(2);
  const State noise = random_state(c2, 10, 2);
  EXPECT_LT(max_abs(sup_inpaint(v, z0, 0, 10, 6, c1) - (noise + c)), 1e-5);
  SeededRng d(3);
  EXPECT_THROW(sup_inpaint(v, z0, 6, 4, 6, d), Error);
  EXPECT_THROW(sup_inpaint(v, z0, 2, 11, 6, d), Error);
}

TEST(Masks, PaperPolicy) {
  SeededRng rng(9);
  for (int t = 0; t < 500; ++t) {
    const Span m = draw_mask(MaskPolicy::kPaper, 500, 50.0, rng);
    EXPECT_EQ(m.e - m.s, 250u);
    EXPECT_GE(m.s, 50u);
    EXPECT_LE(m.e, 450u);
  }
}

TEST(Masks, MarginPolicy) {
  SeededRng rng(10);
  std::size_t lo = 1000, hi = 0;
  for (int t = 0; t < 500; ++t) {
    const Span m = draw_mask(MaskPolicy::kMargin, 500, 50.0, rng);
    EXPECT_EQ(m.e - m.s, 250u);
    EXPECT_GE(m.s, 50u);
    EXPECT_LE(m.e, 450u);
    lo = std::min(lo, m.s);
    hi = std::max(hi, m.s);
  }
  EXPECT_EQ(lo, 50u);
  EXPECT_EQ(hi, 200u);
  const Span small = draw_mask(MaskPolicy::kMargin, 20, 50.0, rng);
  EXPECT_GE(small.s, 1u);
  EXPECT_LE(small.e, 19u);
  EXPECT_LT(small.s, small.e);
}

TEST(FmModel, GuidanceEndpointsAreExact) {
  const Model m = small_model();
  SeededRng rng(11);
  const WorldSample smp = gen_sample(default_world(), rng, 0.2);
  const Conditioning c = make_conditioning(m, smp);
  const State y = random_state(rng, 10, 8);
  std::size_t evals = 0;
  const State v1 = guided_field(m, c, 1.0, &evals)(y, 0.3);
  const State v0 = guided_field(m, c, 0.0, &evals)(y, 0.3);
  const State v3 = guided_field(m, c, 3.0, &evals)(y, 0.3);
  EXPECT_EQ(evals, 3u);
  EXPECT_NE(v1, v0);
  EXPECT_LT(max_abs(v3 - (v0 + 3.0f * (v1 - v0))), 1e-4);
  nn::SeqInput<float> in;
  in.features = y;
  in.cond = c.cond.values;
  in.caption = c.caption;
  in.tau = 0.3f;
  EXPECT_EQ(v1, m.net().forward(m.params.data(), in));
  EXPECT_EQ(evals_per_call(0.0), 1u);
  EXPECT_EQ(evals_per_call(1.0), 1u);
  EXPECT_EQ(evals_per_call(2.5), 2u);
}

TEST(FmModel, SampleCountsEvaluations) {
  const Model m = small_model();
  SeededRng rng(12);
  const WorldSample smp = gen_sample(default_world(), rng, 0.2);
  const Conditioning c = make_conditioning(m, smp);
  FmSamplerConfig cfg;
  cfg.n_steps = 50;
  SampleStats st;
  const Tensor out = sample(m, c, 10, cfg, rng, &st);
  EXPECT_EQ(out.shape(), (Shape{10, 8}));
  EXPECT_EQ(st.model_evals, 100u);
  EXPECT_EQ(st.trace.size(), 50u);
}

TEST(FmModel, InpaintingKeepsContextBitwise) {
  const Model m = small_model(2);
  SeededRng rng(13);
  FmSamplerConfig cfg;
  cfg.n_steps = 4;
  for (int t = 0; t < 3; ++t) {
    const WorldSample smp = gen_sample(default_world(), rng, 0.3);
    for (int mode = 0; mode < 2; ++mode) {
      SeededRng r(t);
      const Tensor out = mode == 0 ? zs_inpaint(m, smp, 4, 9, cfg, r) : sup_inpaint(m, smp, 4, 9, cfg, r);
      for (std::size_t j = 0; j < 15; ++j)
        for (std::size_t q = 0; q < 8; ++q)
          if (j < 4 || j >= 9) ASSERT_EQ(out.at(j, q), smp.latent.at(j, q));
    }
  }
}

TEST(FmModel, LossIsWeightedMeanSquaredError) {
  const Model m = small_model(3);
  SeededRng rng(14);
  const WorldSample smp = gen_sample(default_world(), rng, 0.2);
  const OtPath path;
  const State z = to_state(smp.latent), y0 = random_state(rng, 10, 8);
  const double tau = 0.5;
  nn::SeqInput<float> in;
  in.features = psi(path, tau, y0, z);
  in.cond = m.cond().build(m.params.data(), smp.controls, DropMask::none(), 10).values;
  in.caption = smp.caption;
  in.tau = float(tau);
  const State err = m.net().forward(m.params.data(), in) - (z - float(1.0 - path.sigma_min) * y0);
  const double mse = double(err.squaredNorm()) / double(err.size());
  const double loss = sequence_loss(m, path, z, smp, DropMask::none(), tau, y0, {}, 1.0f, nullptr);
  EXPECT_NEAR(loss, 1.5 * mse, 1e-5 * loss);
}

TEST(FmModel, MaskedLossScoresOnlyTheSpan) {
  const Model m = small_model(4);
  SeededRng rng(15);
  const WorldSample smp = gen_sample(default_world(), rng, 0.2);
  const OtPath path;
  const State z = to_state(smp.latent), y0 = random_state(rng, 10, 8);
  const LossSpan span{true, 3, 7};
  std::vector<float> g(m.params.size(), 0.0f);
  const double a = sequence_loss(m, path, z, smp, DropMask::none(), 0.4, y0, span, 1.0f, g.data());
  // Context noise is replaced by the clean latent, so changing it changes nothing.
  State y0b = y0;
  y0b.topRows(3) = random_state(rng, 3, 8);
  y0b.bottomRows(3) = random_state(rng, 3, 8);
  const double b = sequence_loss(m, path, z, smp, DropMask::none(), 0.4, y0b, span, 1.0f, nullptr);
  EXPECT_EQ(a, b);
  double gn = 0.0;
  for (float x : g) gn += double(x) * x;
  EXPECT_GT(gn, 0.0);
}
