#pragma once

// Temporal control streams -> per-frame condition vectors.
//
// Each stream (chords, melody, drums) has its own embedding table whose last
// row is a learned null used when the stream is dropped. The per-stream
// embeddings are concatenated over the channel axis; the projection to model
// width is the backbone input layer.

#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "arfm/controls.hpp"
#include "arfm/core/rng.hpp"
#include "arfm/nn/params.hpp"
#include "arfm/world/world.hpp"

namespace arfm {

enum Stream { kChords = 0, kMelody = 1, kDrums = 2 };
inline constexpr int kNumStreams = 3;

inline const char* stream_name(int s) {
  static const char* names[] = {"chords", "melody", "drums"};
  return names[s];
}

/// Resamples every stream to `f_r` and exactly `len` frames.
inline ControlSet resample_controls(const ControlSet& c, double f_r, std::size_t len) {
  ARFM_CHECK(f_r > 0.0 && len > 0, ErrorKind::kInvalidArgument, "resample_controls: bad target grid");
  const double dur = double(len) / f_r;
  auto check = [&](const std::vector<int>& v, double rate, const char* what) {
    ARFM_CHECK(!v.empty(), ErrorKind::kInvalidArgument, std::string("resample_controls: empty ") + what);
    ARFM_CHECK(rate > 0.0, ErrorKind::kInvalidArgument, std::string("resample_controls: bad rate for ") + what);
    ARFM_CHECK(std::abs(double(v.size()) / rate - dur) <= 1.0 / rate + 1e-9, ErrorKind::kInvalidArgument,
               std::string("resample_controls: ") + what + " duration does not match the target");
  };
  check(c.chords, c.chord_rate, "chords");
  check(c.melody, c.melody_rate, "melody");
  check(c.drums, c.drum_rate, "drums");

  auto clampi = [](double x, std::size_t n) {
    return std::size_t(std::clamp<double>(x, 0.0, double(n - 1)));
  };
  ControlSet out;
  out.chord_rate = out.melody_rate = out.drum_rate = f_r;
  out.chords.resize(len);
  out.melody.resize(len);
  out.drums.resize(len);
  for (std::size_t j = 0; j < len; ++j) {
    const double t = double(j) / f_r;
    // Hold the most recent chord switch; the epsilon absorbs float error at exact boundaries.
    out.chords[j] = c.chords[clampi(std::floor(t * c.chord_rate + 1e-9), c.chords.size())];
    out.melody[j] = c.melody[clampi(std::round(t * c.melody_rate), c.melody.size())];
    out.drums[j] = c.drums[clampi(std::round(t * c.drum_rate), c.drums.size())];
  }
  out.beats.assign(len, 0);
  for (std::size_t i = 0; i < c.beats.size(); ++i)
    if (c.beats[i]) {
      const double j = std::round(double(i) / c.drum_rate * f_r);
      if (j < double(len)) out.beats[std::size_t(j)] = 1;
    }
  return out;
}

struct DropMask {
  std::array<bool, kNumStreams> dropped{};
  bool caption = false;

  bool all() const { return dropped[0] && dropped[1] && dropped[2] && caption; }
  static DropMask none() { return {}; }
  static DropMask everything() { return {{true, true, true}, true}; }
  /// Only stream `s` live; the caption stays.
  static DropMask only(int s) {
    DropMask m{{true, true, true}, false};
    m.dropped[std::size_t(s)] = false;
    return m;
  }
};

/// With probability p_all every stream and the caption are dropped; otherwise
/// each stream is dropped independently with probability p_drop.
inline DropMask drop_conditions(SeededRng& rng, double p_drop, double p_all) {
  ARFM_CHECK(p_drop >= 0.0 && p_drop <= 1.0 && p_all >= 0.0 && p_all <= 1.0, ErrorKind::kInvalidArgument,
             "drop_conditions: probabilities must lie in [0, 1]");
  if (rng.bernoulli(p_all)) return DropMask::everything();
  DropMask m;
  for (bool& d : m.dropped) d = rng.bernoulli(p_drop);
  return m;
}

/// Table indices per stream and position; the values are the concatenated rows.
struct ConditionGrid {
  std::array<std::vector<int>, kNumStreams> ids;
  nn::Mat<float> values;  // [positions, cond_dim]
  std::size_t length() const { return std::size_t(values.rows()); }
};

class CondEmbedder {
 public:
  CondEmbedder() = default;
  CondEmbedder(const WorldSpec& w, int emb_dim, nn::ParamLayout& layout, const std::string& prefix = "cond.")
      : emb_dim_(emb_dim), layout_(&layout) {
    ARFM_CHECK(emb_dim > 0, ErrorKind::kConfig, "conditioning: embedding dim must be positive");
    // Melody keeps its "no melody" id; the dropout null comes after it.
    rows_ = {w.chord_vocab + 1, w.melody_vocab + 2, w.codebook_size + 1};
    for (int s = 0; s < kNumStreams; ++s)
      table_[s] = layout.add(prefix + stream_name(s), std::size_t(rows_[s]), std::size_t(emb_dim),
                             {nn::ParamInit::kNormal, 1.0f});
  }

  int dim() const { return kNumStreams * emb_dim_; }
  int null_id(int s) const { return rows_[s] - 1; }

  /// Builds the grid over `positions`. Frame t of the controls sits at position
  /// t + shift; positions without a frame get the null rows.
  ConditionGrid build(const float* p, const ControlSet& c, const DropMask& mask, std::size_t positions,
                      std::ptrdiff_t shift = 0) const {
    ConditionGrid g;
    const std::array<const std::vector<int>*, kNumStreams> src = {&c.chords, &c.melody, &c.drums};
    for (int s = 0; s < kNumStreams; ++s) {
      auto& ids = g.ids[s];
      ids.assign(positions, null_id(s));
      if (mask.dropped[std::size_t(s)]) continue;
      const auto& v = *src[s];
      for (std::size_t pos = 0; pos < positions; ++pos) {
        const std::ptrdiff_t t = std::ptrdiff_t(pos) - shift;
        if (t < 0 || t >= std::ptrdiff_t(v.size())) continue;
        const int id = v[std::size_t(t)];
        ARFM_CHECK(id >= 0 && id < null_id(s), ErrorKind::kInvalidArgument,
                   std::string("conditioning: ") + stream_name(s) + " id " + std::to_string(id) + " out of range");
        ids[pos] = id;
      }
    }
    fill_values(p, g);
    return g;
  }

  /// Grid with explicit per-position ids (-1 = null), used for reordered sequences.
  ConditionGrid build_from_ids(const float* p, std::array<std::vector<int>, kNumStreams> ids) const {
    ConditionGrid g;
    for (int s = 0; s < kNumStreams; ++s) {
      for (int& id : ids[s]) {
        if (id < 0) id = null_id(s);
        ARFM_CHECK(id <= null_id(s), ErrorKind::kInvalidArgument, "conditioning: id out of range");
      }
      g.ids[s] = std::move(ids[s]);
    }
    fill_values(p, g);
    return g;
  }

  ConditionGrid null_grid(const float* p, std::size_t positions) const {
    return build(p, ControlSet{}, DropMask::everything(), positions);
  }

  /// Scatters d(values) into the embedding tables.
  void backward(const nn::Mat<float>& d_values, const ConditionGrid& g, float* grads) const {
    for (int s = 0; s < kNumStreams; ++s) {
      auto tab = nn::pmat(*layout_, grads, table_[s]);
      for (std::size_t pos = 0; pos < g.ids[s].size(); ++pos)
        tab.row(g.ids[s][pos]) += d_values.row(Eigen::Index(pos)).segment(s * emb_dim_, emb_dim_);
    }
  }

 private:
  void fill_values(const float* p, ConditionGrid& g) const {
    const std::size_t n = g.ids[0].size();
    g.values.resize(Eigen::Index(n), dim());
    for (int s = 0; s < kNumStreams; ++s) {
      const auto tab = nn::pmat(*layout_, p, table_[s]);
      for (std::size_t pos = 0; pos < n; ++pos)
        g.values.row(Eigen::Index(pos)).segment(s * emb_dim_, emb_dim_) = tab.row(g.ids[s][pos]);
    }
  }

  int emb_dim_ = 0;
  const nn::ParamLayout* layout_ = nullptr;
  std::array<int, kNumStreams> rows_{};
  std::array<std::size_t, kNumStreams> table_{};
};

}  // namespace arfm
