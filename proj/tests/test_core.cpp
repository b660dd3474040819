#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "arfm/core/rng.hpp"
#include "arfm/core/tensor.hpp"

namespace fs = std::filesystem;
using namespace arfm;

namespace {

fs::path temp_path(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "arfm_test_core";
  fs::create_directories(dir);
  return dir / name;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

}  // namespace

TEST(Tensor, ZeroTwoByTwoIsThirtyTwoBytes) {
  const fs::path p = temp_path("zeros.pft");
  save_tensor(Tensor({2, 2}), p);
  const std::string bytes = slurp(p);
  ASSERT_EQ(bytes.size(), 32u);
  EXPECT_EQ(bytes.substr(0, 4), "PFT1");
  // rank 2, extents 2 and 2, little-endian
  const unsigned char expect_hdr[] = {2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0};
  EXPECT_EQ(std::memcmp(bytes.data() + 4, expect_hdr, sizeof expect_hdr), 0);
  for (std::size_t i = 16; i < 32; ++i) EXPECT_EQ(bytes[i], '\0');
}

TEST(Tensor, KnownValueEncoding) {
  const std::string b = encode_tensor(Tensor({1}, std::vector<float>{1.0f}));
  ASSERT_EQ(b.size(), 4u + 4 + 4 + 4);
  // 1.0f = 0x3f800000
  EXPECT_EQ((unsigned char)b[12], 0x00);
  EXPECT_EQ((unsigned char)b[14], 0x80);
  EXPECT_EQ((unsigned char)b[15], 0x3f);
}

TEST(Tensor, ScalarHasRankZeroAndOneValue) {
  const Tensor s({}, std::vector<float>{3.5f});
  EXPECT_EQ(s.rank(), 0u);
  EXPECT_EQ(s.size(), 1u);
  const fs::path p = temp_path("scalar.pft");
  save_tensor(s, p);
  EXPECT_EQ(slurp(p).size(), 4u + 4 + 4);
  const Tensor back = load_tensor(p);
  EXPECT_EQ(back.rank(), 0u);
  EXPECT_EQ(back[0], 3.5f);
}

TEST(Tensor, RandomRoundTripIsBitwise) {
  SeededRng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    Shape shape;
    const int rank = int(rng.below(4));
    for (int r = 0; r < rank; ++r) shape.push_back(rng.below(6));
    Tensor t = gauss_sample(rng, shape);
    for (float& v : t.data()) v *= std::ldexp(1.0f, int(rng.below(40)) - 20);
    const fs::path p = temp_path("rt.pft");
    save_tensor(t, p);
    const Tensor back = load_tensor(p);
    EXPECT_EQ(back.shape(), t.shape());
    EXPECT_TRUE(back == t);
  }
}

TEST(Tensor, RejectsBadFiles) {
  EXPECT_THROW(load_tensor(temp_path("does_not_exist.pft")), Error);
  std::string b = encode_tensor(Tensor({2}));
  b[0] = 'X';
  EXPECT_THROW(decode_tensor(b), Error);
  const std::string good = encode_tensor(Tensor({2}));
  EXPECT_THROW(decode_tensor(good.substr(0, good.size() - 1)), Error);
  EXPECT_THROW(decode_tensor(good + "x"), Error);
}

TEST(Tensor, NonFiniteValuesAreRejected) {
  EXPECT_THROW(Tensor({2}, std::vector<float>{1.0f, NAN}), Error);
  EXPECT_THROW(Tensor({1}, std::vector<float>{INFINITY}), Error);
  EXPECT_THROW(Tensor({3}, std::vector<float>{1.0f}), Error);
}

TEST(Rng, PhiloxKnownAnswers) {
  using W = std::array<std::uint32_t, 4>;
  EXPECT_EQ(philox4x32_10({0, 0, 0, 0}, {0, 0}), (W{0x6627e8d5u, 0xe169c58du, 0xbc57ac4cu, 0x9b00dbd8u}));
  EXPECT_EQ(philox4x32_10({~0u, ~0u, ~0u, ~0u}, {~0u, ~0u}),
            (W{0x408f276du, 0x41c83b0eu, 0xa20bc7c6u, 0x6d5451fdu}));
  EXPECT_EQ(philox4x32_10({0x243f6a88u, 0x85a308d3u, 0x13198a2eu, 0x03707344u}, {0xa4093822u, 0x299f31d0u}),
            (W{0xd16cfe09u, 0x94fdccebu, 0x5001e420u, 0x24126ea1u}));
}

TEST(Rng, MatchesGoldenFile) {
  std::ifstream f(std::string(ARFM_GOLDEN_DIR) + "/rng_golden.txt");
  ASSERT_TRUE(f.good());
  std::string line;
  int checked = 0;
  while (std::getline(f, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream in(line);
    unsigned long long seed = 0;
    std::string kind;
    in >> seed >> kind;
    SeededRng rng(seed);
    for (int i = 0; i < 16; ++i) {
      if (kind == "u32") {
        std::string hex;
        in >> hex;
        EXPECT_EQ(rng.next_u32(), std::uint32_t(std::stoul(hex, nullptr, 16))) << "seed " << seed << " draw " << i;
      } else {
        double v = 0;
        in >> v;
        EXPECT_NEAR(rng.normal(), v, 1e-6) << "seed " << seed << " draw " << i;
      }
    }
    ++checked;
  }
  EXPECT_EQ(checked, 10);
}

TEST(Rng, GaussMeanWithinBound) {
  SeededRng rng(2024);
  const Tensor t = gauss_sample(rng, {100000});
  double s = 0.0, ss = 0.0;
  for (float v : t.data()) {
    s += v;
    ss += double(v) * v;
  }
  const double mean = s / 1e5;
  EXPECT_GE(mean, -0.02);
  EXPECT_LE(mean, 0.02);
  EXPECT_NEAR(ss / 1e5 - mean * mean, 1.0, 0.02);
}

TEST(Rng, SameSeedSameTensorAndEmptyShape) {
  SeededRng a(99), b(99);
  EXPECT_TRUE(gauss_sample(a, {4, 5}) == gauss_sample(b, {4, 5}));
  SeededRng c(1);
  const Tensor e = gauss_sample(c, {0});
  EXPECT_EQ(e.size(), 0u);
  EXPECT_EQ(e.shape(), Shape{0});
}

TEST(Rng, SplitStreamsAreDistinctAndReproducible) {
  const SeededRng root(5);
  SeededRng a = root.split(0), b = root.split(1), a2 = root.split(0);
  int same = 0;
  for (int i = 0; i < 64; ++i) {
    const auto x = a.next_u32();
    same += x == b.next_u32();
    EXPECT_EQ(x, a2.next_u32());
  }
  EXPECT_LT(same, 2);
}

TEST(Rng, BelowIsInRangeAndRoughlyUniform) {
  SeededRng rng(3);
  std::vector<int> hist(7, 0);
  for (int i = 0; i < 70000; ++i) {
    const auto v = rng.below(7);
    ASSERT_LT(v, 7u);
    ++hist[v];
  }
  for (int h : hist) EXPECT_NEAR(h, 10000, 500);
}
