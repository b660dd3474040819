#include <gtest/gtest.h>

#include "arfm/ar.hpp"
#include "arfm/conditioning.hpp"

using namespace arfm;

namespace {

const World& default_world() {
  static const World w{WorldSpec{}};
  return w;
}

struct Embedder {
  nn::ParamLayout layout;
  CondEmbedder emb;
  nn::ParamVec params;
  explicit Embedder(int dim = 8) : emb(WorldSpec{}, dim, layout) { params = layout.initialize(SeededRng(3)); }
};

ControlSet constant_controls(std::size_t len, int chord, int mel, int drum) {
  ControlSet c;
  c.chords.assign(len, chord);
  c.melody.assign(len, mel);
  c.drums.assign(len, drum);
  c.beats.assign(len, 0);
  return c;
}

}  // namespace

TEST(Resample, SameRateIsIdentity) {
  SeededRng rng(1);
  const WorldSample s = gen_sample(default_world(), rng, 4.0);
  const ControlSet r = resample_controls(s.controls, 50.0, s.tokens.length());
  EXPECT_EQ(r, s.controls);
}

TEST(Resample, ChordSwitchAtFourSecondsLandsOnFrame200) {
  ControlSet c = constant_controls(10, 0, 16, 0);
  c.chord_rate = 1.0;  // one chord per second
  c.melody_rate = c.drum_rate = 1.0;
  for (std::size_t i = 0; i < 10; ++i) c.chords[i] = i < 4 ? 2 : 7;
  c.beats.assign(10, 0);
  const ControlSet r = resample_controls(c, 50.0, 500);
  ASSERT_EQ(r.chords.size(), 500u);
  EXPECT_EQ(r.chords[199], 2);
  EXPECT_EQ(r.chords[200], 7);
  for (std::size_t j = 0; j < 500; ++j) EXPECT_EQ(r.chords[j], j < 200 ? 2 : 7);
}

TEST(Resample, MelodyNullStaysNull) {
  ControlSet c = constant_controls(250, 3, 16, 1);
  c.chord_rate = c.melody_rate = c.drum_rate = 25.0;
  const ControlSet r = resample_controls(c, 50.0, 500);
  for (int m : r.melody) EXPECT_EQ(m, 16);
}

TEST(Resample, DurationMismatchIsRejected) {
  const ControlSet c = constant_controls(100, 0, 0, 0);
  EXPECT_THROW(resample_controls(c, 50.0, 500), Error);
  EXPECT_THROW(resample_controls(ControlSet{}, 50.0, 10), Error);
}

TEST(Conditioning, ChannelCountIsThreeEmbeddings) {
  Embedder e(8);
  EXPECT_EQ(e.emb.dim(), 24);
  const ConditionGrid g = e.emb.build(e.params.data(), constant_controls(6, 1, 2, 3), DropMask::none(), 6);
  EXPECT_EQ(g.values.rows(), 6);
  EXPECT_EQ(g.values.cols(), 24);
}

TEST(Conditioning, NullRowsFollowEachTable) {
  Embedder e;
  const WorldSpec w;
  EXPECT_EQ(e.emb.null_id(kChords), w.chord_vocab);
  // The melody table keeps its "no melody" id below the dropout null.
  EXPECT_EQ(e.emb.null_id(kMelody), w.melody_vocab + 1);
  EXPECT_EQ(e.emb.null_id(kDrums), w.codebook_size);
}

TEST(Conditioning, AllDroppedGridEqualsNullEmbeddings) {
  Embedder e;
  SeededRng rng(4);
  const WorldSample s = gen_sample(default_world(), rng, 1.0);
  const std::size_t n = s.tokens.length();
  const ConditionGrid dropped = e.emb.build(e.params.data(), s.controls, DropMask::everything(), n);
  const ConditionGrid null = e.emb.null_grid(e.params.data(), n);
  EXPECT_EQ(dropped.values, null.values);
  for (int st = 0; st < kNumStreams; ++st)
    for (int id : dropped.ids[st]) EXPECT_EQ(id, e.emb.null_id(st));
  // Every row of the null grid is the same concatenation of null rows.
  for (Eigen::Index r = 1; r < null.values.rows(); ++r) EXPECT_EQ(null.values.row(r), null.values.row(0));
}

TEST(Conditioning, SingleLiveStreamKeepsOnlyItsIds) {
  Embedder e;
  const ControlSet c = constant_controls(5, 4, 9, 11);
  for (int live = 0; live < kNumStreams; ++live) {
    const ConditionGrid g = e.emb.build(e.params.data(), c, DropMask::only(live), 5);
    const int expect[] = {4, 9, 11};
    for (int st = 0; st < kNumStreams; ++st)
      for (int id : g.ids[st]) EXPECT_EQ(id, st == live ? expect[st] : e.emb.null_id(st));
  }
}

TEST(Conditioning, ShiftPlacesFrameZeroAtShiftPosition) {
  Embedder e;
  ControlSet c = constant_controls(4, 0, 0, 0);
  c.chords = {1, 2, 3, 4};
  const ConditionGrid g = e.emb.build(e.params.data(), c, DropMask::none(), 6, 1);
  EXPECT_EQ(g.ids[kChords], (std::vector<int>{12, 1, 2, 3, 4, 12}));
}

TEST(Conditioning, ArFrameZeroConditionSitsAtStartPosition) {
  // Position 0 holds the start token; frame t's condition must be visible at
  // position t, before frame t's first token is fed at position t + 1.
  std::array<std::vector<int>, kNumStreams> frame_ids = {std::vector<int>{5, 6, 7}, std::vector<int>{1, 1, 1},
                                                         std::vector<int>{2, 3, 4}};
  const auto ids = ar::position_cond_ids(frame_ids, 6, DropMask::none());
  EXPECT_EQ(ids[kChords], (std::vector<int>{5, 6, 7, -1, -1, -1}));
  EXPECT_EQ(ids[kDrums], (std::vector<int>{2, 3, 4, -1, -1, -1}));
  const auto dropped = ar::position_cond_ids(frame_ids, 6, DropMask::only(kMelody));
  EXPECT_EQ(dropped[kChords], std::vector<int>(6, -1));
  EXPECT_EQ(dropped[kMelody], (std::vector<int>{1, 1, 1, -1, -1, -1}));
}

TEST(Conditioning, OutOfRangeIdIsRejected) {
  Embedder e;
  EXPECT_THROW(e.emb.build(e.params.data(), constant_controls(3, 12, 0, 0), DropMask::none(), 3), Error);
  EXPECT_THROW(e.emb.build(e.params.data(), constant_controls(3, 0, 0, -1), DropMask::none(), 3), Error);
}

TEST(Conditioning, BackwardScattersIntoRows) {
  Embedder e(2);
  const ControlSet c = constant_controls(3, 5, 16, 0);
  const ConditionGrid g = e.emb.build(e.params.data(), c, DropMask::none(), 3);
  nn::Mat<float> d = nn::Mat<float>::Ones(3, 6);
  std::vector<float> grads(e.params.size(), 0.0f);
  e.emb.backward(d, g, grads.data());
  const auto chord = nn::pmat(e.layout, grads.data(), *e.layout.find("cond.chords"));
  EXPECT_EQ(chord(5, 0), 3.0f);
  EXPECT_EQ(chord(4, 0), 0.0f);
  const auto mel = nn::pmat(e.layout, grads.data(), *e.layout.find("cond.melody"));
  EXPECT_EQ(mel(16, 1), 3.0f);
}

TEST(Dropout, ProbabilityEndpoints) {
  SeededRng rng(5);
  for (int i = 0; i < 200; ++i) EXPECT_TRUE(drop_conditions(rng, 0.0, 1.0).all());
  for (int i = 0; i < 200; ++i) {
    const DropMask m = drop_conditions(rng, 0.0, 0.0);
    EXPECT_FALSE(m.dropped[0] || m.dropped[1] || m.dropped[2] || m.caption);
  }
  EXPECT_THROW(drop_conditions(rng, 1.5, 0.0), Error);
}

TEST(Dropout, HalfRateIsHalfPerStream) {
  SeededRng rng(6);
  std::array<int, kNumStreams> hits{};
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const DropMask m = drop_conditions(rng, 0.5, 0.0);
    for (int s = 0; s < kNumStreams; ++s) hits[s] += m.dropped[s];
    EXPECT_FALSE(m.caption);
  }
  for (int h : hits) EXPECT_NEAR(double(h) / n, 0.5, 0.02);
}

TEST(Dropout, AllDropRate) {
  SeededRng rng(7);
  int all = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) all += drop_conditions(rng, 0.0, 0.2).all();
  EXPECT_NEAR(double(all) / n, 0.2, 0.02);
}
