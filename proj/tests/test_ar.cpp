#include <gtest/gtest.h>

#include <cmath>

#include "arfm/ar.hpp"

using namespace arfm;
using namespace arfm::ar;

namespace {

const World& default_world() {
  static const World w{WorldSpec{}};
  return w;
}

Model small_model(std::uint64_t seed = 1) {
  ModelSpec spec;
  spec.paradigm = Paradigm::kAr;
  spec.shape = {2, 16, 2, 32, 4, 128};
  Model m(spec);
  m.init_params(seed);
  return m;
}

ArSamplerConfig greedy_config(double alpha = 3.0) {
  ArSamplerConfig c;
  c.temperature = 1e-6;
  c.cfg_coef = alpha;
  return c;
}

TokenGrid random_tokens(SeededRng& rng, std::size_t nq, std::size_t len, int card) {
  TokenGrid g(nq, len);
  for (int& c : g.cells()) c = int(rng.below(std::uint32_t(card)));
  return g;
}

}  // namespace

TEST(CrossEntropy, UniformLogitsGiveLogCard) {
  const int card = 4;
  TokenGrid target(1, 6);
  for (std::size_t j = 0; j < 6; ++j) target.at(0, j) = int(j % card);
  const Mat<float> logits = Mat<float>::Zero(6, card);
  const double std_loss = ce_loss(logits, target, card, card, CeMode::kStandard).loss;
  const double paper = ce_loss(logits, target, card, card, CeMode::kPaper).loss;
  EXPECT_NEAR(std_loss, std::log(4.0), 1e-9);
  EXPECT_NEAR(paper, std::log(4.0) / 4.0, 1e-9);
}

TEST(CrossEntropy, PaperModeIsStandardOverCard) {
  SeededRng rng(1);
  const Vocab v{32};
  for (int t = 0; t < 20; ++t) {
    const TokenGrid target = apply_delay(random_tokens(rng, 4, 12, v.card), v);
    Mat<float> logits(Eigen::Index(target.length()), 4 * v.total());
    for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = 3.0f * float(rng.normal());
    const auto a = ce_loss(logits, target, v.total(), v.card, CeMode::kStandard);
    const auto b = ce_loss(logits, target, v.total(), v.card, CeMode::kPaper);
    EXPECT_EQ(a.cells, 48u);
    EXPECT_NEAR(b.loss, a.loss / v.card, 1e-6);
  }
}

TEST(CrossEntropy, PerfectPredictionIsNearZero) {
  TokenGrid target(2, 3);
  for (int& c : target.cells()) c = 1;
  Mat<float> logits = Mat<float>::Zero(3, 2 * 5);
  for (Eigen::Index r = 0; r < 3; ++r) logits(r, 1) = logits(r, 5 + 1) = 60.0f;
  EXPECT_LT(ce_loss(logits, target, 5, 4, CeMode::kStandard).loss, 1e-20);
}

TEST(CrossEntropy, PadCellsAreExcluded) {
  SeededRng rng(2);
  const int card = 4, vocab = 10;
  TokenGrid target(1, 4);
  target.cells() = {0, 3, card, 2};
  Mat<float> logits(4, vocab);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = float(rng.normal());
  const auto full = ce_loss(logits, target, vocab, card, CeMode::kStandard);
  EXPECT_EQ(full.cells, 3u);
  // Scrambling the PAD position's logits must not change anything.
  Mat<float> other = logits;
  other.row(2).setConstant(100.0f);
  EXPECT_EQ(ce_loss(other, target, vocab, card, CeMode::kStandard).loss, full.loss);
  EXPECT_EQ(ce_loss(logits, TokenGrid(1, 4, card), vocab, card, CeMode::kStandard).cells, 0u);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  SeededRng rng(3);
  const int card = 5, vocab = 8;
  TokenGrid target(2, 3);
  target.cells() = {0, 4, card, 1, 2, 3};
  Mat<float> logits(3, 2 * vocab);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits.data()[i] = float(rng.normal());
  for (CeMode mode : {CeMode::kStandard, CeMode::kPaper}) {
    Mat<float> grad;
    ce_loss(logits, target, vocab, card, mode, &grad);
    for (Eigen::Index i = 0; i < logits.size(); ++i) {
      Mat<float> lp = logits, lm = logits;
      lp.data()[i] += 1e-2f;
      lm.data()[i] -= 1e-2f;
      const double num = (ce_loss(lp, target, vocab, card, mode).loss - ce_loss(lm, target, vocab, card, mode).loss) / 2e-2;
      EXPECT_NEAR(grad.data()[i], num, 1e-4);
    }
  }
}

TEST(Filters, TopPExample) {
  const auto p = top_p_filter({0.5, 0.3, 0.2}, 0.7);
  EXPECT_NEAR(p[0], 0.625, 1e-12);
  EXPECT_NEAR(p[1], 0.375, 1e-12);
  EXPECT_EQ(p[2], 0.0);
}

TEST(Filters, FullTopKAndTopPAreIdentity) {
  const std::vector<double> p = {0.1, 0.4, 0.2, 0.3};
  EXPECT_EQ(top_k_filter(p, 4), p);
  const auto q = top_p_filter(p, 1.0);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_NEAR(q[i], p[i], 1e-12);
  const auto one = top_k_filter(p, 1);
  EXPECT_EQ(one, (std::vector<double>{0.0, 1.0, 0.0, 0.0}));
  const auto two = top_k_filter(p, 2);
  EXPECT_NEAR(two[1], 4.0 / 7.0, 1e-12);
  EXPECT_NEAR(two[3], 3.0 / 7.0, 1e-12);
}

TEST(Filters, TemperatureAndAllowedMask) {
  const std::vector<float> logits = {1.0f, 2.0f, 3.0f};
  ArSamplerConfig c;
  c.temperature = 0.5;
  const auto p = sampling_distribution(logits, {true, true, false}, c);
  EXPECT_EQ(p[2], 0.0);
  EXPECT_NEAR(p[1] / p[0], std::exp(2.0), 1e-9);
  EXPECT_EQ(argmax_allowed(logits, {true, true, false}), 1);
}

TEST(Filters, GuidanceEndpointsAreExact) {
  const std::vector<float> c = {0.1f, -2.0f, 3.3f}, u = {1.7f, 0.4f, -0.9f};
  std::vector<float> out(3);
  guide(c, u, 1.0, out);
  EXPECT_EQ(out, c);
  guide(c, u, 0.0, out);
  EXPECT_EQ(out, u);
  guide(c, u, 3.0, out);
  for (int i = 0; i < 3; ++i) EXPECT_FLOAT_EQ(out[i], u[i] + 3.0f * (c[i] - u[i]));
}

TEST(Filters, ConfigValidation) {
  ArSamplerConfig c;
  c.top_k = 5;
  c.top_p = 0.9;
  EXPECT_THROW(c.validate(), Error);
  c.top_k.reset();
  c.top_p = 0.0;
  EXPECT_THROW(c.validate(), Error);
  c.top_p.reset();
  c.temperature = 0.0;
  EXPECT_THROW(c.validate(), Error);
}

TEST(Fim, PrepareAndRestore) {
  SeededRng rng(4);
  const Vocab v{32};
  const TokenGrid g = random_tokens(rng, 4, 10, v.card);
  const TokenGrid f = fim_prepare(g, 3, 7, v);
  ASSERT_EQ(f.length(), 13u);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(f.at(k, 0), v.fim_a());
    EXPECT_EQ(f.at(k, 4), v.fim_c());
    EXPECT_EQ(f.at(k, 8), v.fim_b());
    EXPECT_EQ(f.at(k, 1), g.at(k, 0));
    EXPECT_EQ(f.at(k, 5), g.at(k, 7));
    EXPECT_EQ(f.at(k, 9), g.at(k, 3));
  }
  EXPECT_EQ(fim_restore(f, 3, 7), g);
  EXPECT_EQ(fim_restore(fim_prepare(g, 1, 9, v), 1, 9), g);
  EXPECT_THROW(fim_prepare(g, 0, 5, v), Error);
  EXPECT_THROW(fim_prepare(g, 3, 10, v), Error);
  EXPECT_THROW(fim_prepare(g, 5, 5, v), Error);
}

TEST(Fim, SequenceEndsWithEosAndCarriesSourceConditions) {
  SeededRng rng(5);
  const WorldSample s = gen_sample(default_world(), rng, 0.2);
  const Vocab v{32};
  const ArSequence seq = fim_sequence(s, 2, 6, v);
  ASSERT_EQ(seq.frames.length(), 14u);
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(seq.frames.at(k, 13), v.eos());
  const auto order = fim_order(10, 2, 6);
  for (std::size_t c = 0; c < order.size(); ++c)
    EXPECT_EQ(seq.cond[kChords][c], order[c] < 0 ? -1 : s.controls.chords[std::size_t(order[c])]);
  EXPECT_EQ(seq.cond[kChords][13], -1);
  // The delayed training grid is well-formed with the reserved ids allowed.
  EXPECT_NO_THROW(apply_delay(seq.frames, v, true));
}

TEST(ArModel, InitialLossIsNearLogCard) {
  const Model m = small_model();
  SeededRng rng(6);
  const WorldSample s = gen_sample(default_world(), rng, 1.0);
  const double loss = sequence_loss(m, plain_sequence(s), DropMask::none(), 1.0f, nullptr);
  const double expect = std::log(32.0);
  EXPECT_NEAR(loss, expect, 0.1 * expect);
}

TEST(ArModel, ShiftedInputStartsWithStart) {
  const Vocab v{32};
  TokenGrid d(2, 3);
  d.cells() = {1, 2, v.pad(), v.pad(), 4, 5};
  const auto in = shifted_input(d, v);
  EXPECT_EQ(in, (std::vector<int>{v.start(), v.start(), 1, v.pad(), 2, 4}));
}

TEST(ArDecode, CachedEqualsUncached) {
  const Model m = small_model(2);
  SeededRng rng(7);
  for (int t = 0; t < 5; ++t) {
    const WorldSample s = gen_sample(default_world(), rng, 0.3);
    DecodeRequest q;
    q.caption = s.caption;
    q.cond = control_ids(s.controls);
    q.prompt = s.tokens.columns(0, 1 + rng.below(5));
    q.gen_frames = s.tokens.length() - q.prompt.length();
    for (double alpha : {0.0, 1.0, 3.0}) {
      const auto a = decode(m, {q}, greedy_config(alpha), SeededRng(1), true);
      const auto b = decode(m, {q}, greedy_config(alpha), SeededRng(1), false);
      EXPECT_EQ(a[0].frames, b[0].frames);
    }
    ArSamplerConfig stoch;
    stoch.top_k = 8;
    EXPECT_EQ(decode(m, {q}, stoch, SeededRng(9), true)[0].frames,
              decode(m, {q}, stoch, SeededRng(9), false)[0].frames);
  }
}

TEST(ArDecode, PromptIsKeptAndOutputIsRegular) {
  const Model m = small_model(3);
  SeededRng rng(8);
  const WorldSample s = gen_sample(default_world(), rng, 0.4);
  DecodeRequest q;
  q.caption = s.caption;
  q.cond = control_ids(s.controls);
  q.prompt = s.tokens.columns(0, 6);
  q.gen_frames = 14;
  ArSamplerConfig cfg;
  const DecodeResult r = decode(m, {q}, cfg, SeededRng(2)).front();
  ASSERT_EQ(r.frames.length(), 20u);
  EXPECT_EQ(r.generated, 14u);
  EXPECT_EQ(r.frames.columns(0, 6), q.prompt);
  for (int c : r.frames.cells()) EXPECT_TRUE(Vocab{32}.is_regular(c));
}

TEST(ArDecode, ModelEvalsPerPosition) {
  const Model m = small_model();
  SeededRng rng(9);
  const WorldSample s = gen_sample(default_world(), rng, 0.2);
  for (double alpha : {1.0, 3.0}) {
    DecodeStats st;
    sample(m, {&s, &s}, 10, greedy_config(alpha), SeededRng(1), &st);
    const std::size_t per = (10 + 4 - 1) * (alpha == 1.0 ? 1 : 2);
    EXPECT_EQ(st.model_evals, 2 * per);
  }
}

TEST(ArDecode, UnconditionalEndpointMatchesNullRequest) {
  const Model m = small_model(4);
  SeededRng rng(10);
  const WorldSample s = gen_sample(default_world(), rng, 0.3);
  DecodeRequest q;
  q.caption = s.caption;
  q.cond = control_ids(s.controls);
  q.gen_frames = 15;
  DecodeRequest null = q;
  null.caption.clear();
  for (auto& ids : null.cond) ids.assign(ids.size(), -1);
  EXPECT_EQ(decode(m, {q}, greedy_config(0.0), SeededRng(1))[0].frames,
            decode(m, {null}, greedy_config(1.0), SeededRng(1))[0].frames);
}

TEST(ArDecode, BatchingDoesNotChangeResults) {
  const Model m = small_model(5);
  SeededRng rng(11);
  const WorldSample a = gen_sample(default_world(), rng, 0.2), b = gen_sample(default_world(), rng, 0.2);
  ArSamplerConfig cfg;
  const auto both = sample(m, {&a, &b}, 10, cfg, SeededRng(3));
  // Request r draws from rng.split(r), so a lone request matches slot 0.
  EXPECT_EQ(sample(m, {&a}, 10, cfg, SeededRng(3))[0], both[0]);
  EXPECT_EQ(sample(m, {&a, &b}, 10, cfg, SeededRng(3)), both);
}

TEST(ArFim, ContextIsPreservedBitwise) {
  const Model m = small_model(6);
  SeededRng rng(12);
  for (int t = 0; t < 5; ++t) {
    const WorldSample s = gen_sample(default_world(), rng, 0.4);
    const std::size_t len = s.tokens.length();
    const std::size_t st = 1 + rng.below(std::uint32_t(len - 3));
    const std::size_t en = st + 1 + rng.below(std::uint32_t(len - 1 - st));
    const TokenGrid out = fim_inpaint(m, s, st, en, ArSamplerConfig{}, SeededRng(t));
    ASSERT_EQ(out.length(), len);
    for (std::size_t k = 0; k < out.n_books(); ++k)
      for (std::size_t j = 0; j < len; ++j)
        if (j < st || j >= en) EXPECT_EQ(out.at(k, j), s.tokens.at(k, j));
  }
}
