#pragma once

// Seeded synthetic world standing in for a dataset plus an audio codec.
//
// A latent frame is an additive mix of three control embeddings plus noise:
//   z_j = chord_rows[chord_j] + melody_rows[melody_j] + beat_j * drum_row + eps * n_j
// Because the control space is small, the controls of any latent frame can be
// recovered exactly by enumeration, which gives the adherence metrics an oracle.
// The codec is a residual vector quantizer whose codebooks are fit by residual
// k-means on frames drawn from the world itself.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "arfm/controls.hpp"
#include "arfm/core/rng.hpp"
#include "arfm/core/tensor.hpp"
#include "arfm/token_grid.hpp"

namespace arfm {

struct WorldSpec {
  std::uint64_t seed = 1234;
  double frame_rate = 50.0;
  int latent_dim = 8;
  int n_codebooks = 4;
  int codebook_size = 32;
  int chord_vocab = 12;
  int melody_vocab = 16;
  int beat_period = 10;
  float noise_std = 0.05f;

  Vocab vocab() const { return Vocab{codebook_size}; }
  int melody_null() const { return melody_vocab; }
  std::size_t frames(double seconds) const {
    return static_cast<std::size_t>(std::llround(frame_rate * seconds));
  }

  friend bool operator==(const WorldSpec&, const WorldSpec&) = default;
};

// Caption template vocabulary.
struct CaptionVocab {
  static constexpr int kSize = 64;
  static constexpr int kNull = 0;
  static constexpr int kChordsTag = 1;
  static constexpr int kBeatTag = 2;
  static constexpr int kFirstChord = 3;
  static int chord(int c) { return kFirstChord + c; }
  static int period(const WorldSpec& w, int p) {
    const int first = kFirstChord + w.chord_vocab;
    return first + std::clamp(p - 1, 0, kSize - 1 - first);
  }
};

struct WorldSample {
  std::vector<int> caption;
  ControlSet controls;
  Tensor latent;  // [L, D]
  TokenGrid tokens;  // [N_q, L]
  double duration = 0.0;
};

struct NormStats {
  float mean = 0.0f;
  float mean_std = 1.0f;
  std::size_t n_segments = 0;
  bool clamped = false;
};

namespace detail {

inline float sq_dist(const float* a, const float* b, int d) {
  float s = 0.0f;
  for (int i = 0; i < d; ++i) {
    const float t = a[i] - b[i];
    s += t * t;
  }
  return s;
}

/// Index of the row of `rows` ([n, d]) nearest to x; ties go to the lowest index.
inline int nearest_row(const Tensor& rows, const float* x) {
  const int n = static_cast<int>(rows.dim(0)), d = static_cast<int>(rows.dim(1));
  int best = 0;
  float best_d = std::numeric_limits<float>::infinity();
  for (int i = 0; i < n; ++i) {
    const float di = sq_dist(rows.ptr() + std::size_t(i) * d, x, d);
    if (di < best_d) {
      best_d = di;
      best = i;
    }
  }
  return best;
}

inline float min_pairwise_distance(const Tensor& rows) {
  const std::size_t n = rows.dim(0);
  const int d = static_cast<int>(rows.dim(1));
  float m = std::numeric_limits<float>::infinity();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      m = std::min(m, std::sqrt(sq_dist(rows.ptr() + i * d, rows.ptr() + j * d, d)));
  return m;
}

/// Lloyd's k-means with k-means++ seeding; deterministic for a given rng.
inline Tensor kmeans(const std::vector<float>& pts, int d, int k, SeededRng rng, int iters) {
  const std::size_t n = pts.size() / d;
  Tensor cent({std::size_t(k), std::size_t(d)});
  std::vector<float> closest(n, std::numeric_limits<float>::infinity());
  std::size_t pick = rng.below(static_cast<std::uint32_t>(n));
  for (int c = 0; c < k; ++c) {
    std::copy_n(&pts[pick * d], d, cent.ptr() + std::size_t(c) * d);
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      closest[i] = std::min(closest[i], sq_dist(&pts[i * d], cent.ptr() + std::size_t(c) * d, d));
      total += closest[i];
    }
    if (total <= 0.0) {
      pick = rng.below(static_cast<std::uint32_t>(n));
      continue;
    }
    double r = rng.uniform_double() * total;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      r -= closest[i];
      if (r < 0.0) {
        pick = i;
        break;
      }
    }
  }
  std::vector<int> assign(n, 0);
  std::vector<double> acc(std::size_t(k) * d);
  std::vector<std::size_t> count(k);
  for (int it = 0; it < iters; ++it) {
    std::fill(acc.begin(), acc.end(), 0.0);
    std::fill(count.begin(), count.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
      assign[i] = nearest_row(cent, &pts[i * d]);
      ++count[assign[i]];
      for (int q = 0; q < d; ++q) acc[std::size_t(assign[i]) * d + q] += pts[i * d + q];
    }
    for (int c = 0; c < k; ++c) {
      if (count[c] == 0) {
        // Re-seed an empty cluster at the point worst served by its centroid.
        std::size_t worst = 0;
        float worst_d = -1.0f;
        for (std::size_t i = 0; i < n; ++i) {
          const float di = sq_dist(&pts[i * d], cent.ptr() + std::size_t(assign[i]) * d, d);
          if (di > worst_d) {
            worst_d = di;
            worst = i;
          }
        }
        std::copy_n(&pts[worst * d], d, cent.ptr() + std::size_t(c) * d);
        continue;
      }
      for (int q = 0; q < d; ++q)
        cent.at(c, q) = static_cast<float>(acc[std::size_t(c) * d + q] / double(count[c]));
    }
  }
  return cent;
}

}  // namespace detail

class World {
 public:
  static constexpr float kChordScale = 1.0f;
  static constexpr float kMelodyScale = 0.35f;
  static constexpr float kDrumScale = 0.8f;
  static constexpr int kCodecTrainFrames = 8192;
  static constexpr int kCodecIters = 20;

  explicit World(const WorldSpec& spec) : spec_(spec) {
    validate();
    const auto d = std::size_t(spec.latent_dim);
    // Rejection: redraw until rows (and all control combinations) are well separated.
    for (std::uint64_t attempt = 0;; ++attempt) {
      SeededRng rng = SeededRng(spec.seed, 0x5157).split(attempt);
      chord_rows_ = scaled_gauss(rng, std::size_t(spec.chord_vocab), d, kChordScale);
      melody_rows_ = scaled_gauss(rng, std::size_t(spec.melody_vocab) + 1, d, kMelodyScale);
      std::fill(melody_rows_.row(spec.melody_null()).begin(), melody_rows_.row(spec.melody_null()).end(), 0.0f);
      drum_row_ = scaled_gauss(rng, 1, d, kDrumScale);
      if (well_separated()) break;
      ARFM_CHECK(attempt < 1000, ErrorKind::kInvalidArgument,
                 "world: could not draw separated synthesis matrices; noise_std too large");
    }
    build_combos();
    fit_codebooks();
  }

  /// World with caller-provided synthesis matrices (used by tests).
  static World from_matrices(const WorldSpec& spec, Tensor chord_rows, Tensor melody_rows,
                             Tensor drum_row) {
    World w(spec, 0);
    w.chord_rows_ = std::move(chord_rows);
    w.melody_rows_ = std::move(melody_rows);
    w.drum_row_ = std::move(drum_row);
    ARFM_CHECK(w.chord_rows_.rank() == 2 && w.chord_rows_.dim(0) == std::size_t(spec.chord_vocab) &&
                   w.melody_rows_.dim(0) == std::size_t(spec.melody_vocab) + 1 &&
                   w.drum_row_.size() == std::size_t(spec.latent_dim),
               ErrorKind::kShape, "world: synthesis matrix shapes do not match spec");
    w.build_combos();
    w.fit_codebooks();
    return w;
  }

  const WorldSpec& spec() const noexcept { return spec_; }
  const Tensor& chord_rows() const noexcept { return chord_rows_; }
  const Tensor& melody_rows() const noexcept { return melody_rows_; }
  const Tensor& drum_row() const noexcept { return drum_row_; }
  const std::vector<Tensor>& codebooks() const noexcept { return codebooks_; }

  /// Noise-free latent of a single control combination.
  void mean_frame(int chord, int melody, int beat, float* out) const {
    const int d = spec_.latent_dim;
    for (int q = 0; q < d; ++q)
      out[q] = chord_rows_.at(chord, q) + melody_rows_.at(melody, q) + (beat ? drum_row_[q] : 0.0f);
  }

  /// Combination table used by the control decoder: row index
  /// (chord * (melody_vocab + 1) + melody) * 2 + beat.
  const Tensor& combos() const noexcept { return combos_; }

 private:
  World(const WorldSpec& spec, int) : spec_(spec) { validate(); }

  void validate() const {
    ARFM_CHECK(spec_.latent_dim > 0 && spec_.n_codebooks > 0 && spec_.codebook_size > 1 &&
                   spec_.chord_vocab > 0 && spec_.melody_vocab > 0 && spec_.beat_period > 0 &&
                   spec_.frame_rate > 0.0 && spec_.noise_std >= 0.0f,
               ErrorKind::kInvalidArgument, "world: invalid spec");
    ARFM_CHECK(CaptionVocab::kFirstChord + spec_.chord_vocab < CaptionVocab::kSize,
               ErrorKind::kInvalidArgument, "world: chord vocabulary too large for captions");
  }

  static Tensor scaled_gauss(SeededRng& rng, std::size_t n, std::size_t d, float scale) {
    Tensor t({n, d});
    for (float& v : t.data()) v = scale * rng.normal();
    return t;
  }

  bool well_separated() const {
    const float min_sep = 4.0f * spec_.noise_std;
    Tensor drum2({2, std::size_t(spec_.latent_dim)});
    std::copy(drum_row_.data().begin(), drum_row_.data().end(), drum2.row(1).begin());
    if (detail::min_pairwise_distance(chord_rows_) <= min_sep ||
        detail::min_pairwise_distance(melody_rows_) <= min_sep ||
        detail::min_pairwise_distance(drum2) <= min_sep)
      return false;
    World probe(spec_, 0);
    probe.chord_rows_ = chord_rows_;
    probe.melody_rows_ = melody_rows_;
    probe.drum_row_ = drum_row_;
    probe.build_combos();
    return detail::min_pairwise_distance(probe.combos_) > 2.0f * min_sep;
  }

  void build_combos() {
    const int nm = spec_.melody_vocab + 1;
    combos_ = Tensor({std::size_t(spec_.chord_vocab) * nm * 2, std::size_t(spec_.latent_dim)});
    for (int c = 0; c < spec_.chord_vocab; ++c)
      for (int m = 0; m < nm; ++m)
        for (int b = 0; b < 2; ++b) mean_frame(c, m, b, combos_.row((c * nm + m) * 2 + b).data());
  }

  // Residual k-means over frames drawn i.i.d. from the world's frame distribution.
  void fit_codebooks() {
    const int d = spec_.latent_dim;
    SeededRng rng(spec_.seed, 0xC0DEC);
    std::vector<float> pts(std::size_t(kCodecTrainFrames) * d);
    for (int i = 0; i < kCodecTrainFrames; ++i) {
      const int c = int(rng.below(std::uint32_t(spec_.chord_vocab)));
      const int m = rng.bernoulli(0.2) ? spec_.melody_null()
                                       : int(rng.below(std::uint32_t(spec_.melody_vocab)));
      const int b = rng.bernoulli(1.0 / spec_.beat_period) ? 1 : 0;
      mean_frame(c, m, b, &pts[std::size_t(i) * d]);
      for (int q = 0; q < d; ++q) pts[std::size_t(i) * d + q] += spec_.noise_std * rng.normal();
    }
    codebooks_.clear();
    for (int stage = 0; stage < spec_.n_codebooks; ++stage) {
      // Residual stages keep a zero codeword (last index) so that adding a stage
      // never increases the per-frame error.
      const int fitted = stage == 0 ? spec_.codebook_size : spec_.codebook_size - 1;
      Tensor cb = detail::kmeans(pts, d, fitted, rng.split(stage), kCodecIters);
      if (stage > 0) {
        Tensor padded({std::size_t(spec_.codebook_size), std::size_t(d)});
        std::copy(cb.data().begin(), cb.data().end(), padded.data().begin());
        cb = std::move(padded);
      }
      for (int i = 0; i < kCodecTrainFrames; ++i) {
        float* p = &pts[std::size_t(i) * d];
        const int k = detail::nearest_row(cb, p);
        for (int q = 0; q < d; ++q) p[q] -= cb.at(k, q);
      }
      codebooks_.push_back(std::move(cb));
    }
  }

  WorldSpec spec_;
  Tensor chord_rows_, melody_rows_, drum_row_, combos_;
  std::vector<Tensor> codebooks_;
};

// ---------------------------------------------------------------------------

/// Residual vector quantization of a [L, D] latent using the first `n_books`
/// codebooks (all when n_books < 0).
inline TokenGrid tokenize(const World& world, const Tensor& latent, int n_books = -1) {
  const int d = world.spec().latent_dim;
  ARFM_CHECK(latent.rank() == 2 && latent.dim(1) == std::size_t(d), ErrorKind::kShape,
             "tokenize: latent must be [L, " + std::to_string(d) + "], got " + shape_str(latent.shape()));
  const int nq = n_books < 0 ? world.spec().n_codebooks : std::min(n_books, world.spec().n_codebooks);
  const std::size_t len = latent.dim(0);
  TokenGrid g(std::size_t(nq), len);
  std::vector<float> res(d);
  for (std::size_t j = 0; j < len; ++j) {
    std::copy(latent.row(j).begin(), latent.row(j).end(), res.begin());
    for (int k = 0; k < nq; ++k) {
      const Tensor& cb = world.codebooks()[k];
      const int idx = detail::nearest_row(cb, res.data());
      g.at(k, j) = idx;
      for (int q = 0; q < d; ++q) res[q] -= cb.at(idx, q);
    }
  }
  return g;
}

/// Sum of the selected codewords per frame.
inline Tensor detokenize(const World& world, const TokenGrid& tokens) {
  const int d = world.spec().latent_dim;
  ARFM_CHECK(tokens.n_books() >= 1 && tokens.n_books() <= std::size_t(world.spec().n_codebooks),
             ErrorKind::kShape, "detokenize: unexpected book count");
  Tensor out({tokens.length(), std::size_t(d)});
  const Vocab vocab = world.spec().vocab();
  for (std::size_t k = 0; k < tokens.n_books(); ++k) {
    for (std::size_t j = 0; j < tokens.length(); ++j) {
      const int id = tokens.at(k, j);
      ARFM_CHECK(vocab.is_regular(id), ErrorKind::kInvalidArgument,
                 "detokenize: id " + std::to_string(id) + " at (" + std::to_string(k) + "," +
                     std::to_string(j) + ") is not a codebook entry");
      for (int q = 0; q < d; ++q) out.at(j, q) += world.codebooks()[k].at(id, q);
    }
  }
  return out;
}

/// Replaces each frame by the mean of its window of `window` consecutive frames;
/// the last window may be shorter.
inline Tensor temporal_blur(const Tensor& latent, std::size_t window = 5) {
  ARFM_CHECK(latent.rank() == 2 && latent.dim(0) >= 1 && window >= 1, ErrorKind::kShape,
             "temporal_blur: need a non-empty [L, D] latent");
  const std::size_t len = latent.dim(0), d = latent.dim(1);
  Tensor out({len, d});
  for (std::size_t w0 = 0; w0 < len; w0 += window) {
    const std::size_t w1 = std::min(len, w0 + window);
    for (std::size_t q = 0; q < d; ++q) {
      double s = 0.0;
      for (std::size_t j = w0; j < w1; ++j) s += latent.at(j, q);
      const auto m = static_cast<float>(s / double(w1 - w0));
      for (std::size_t j = w0; j < w1; ++j) out.at(j, q) = m;
    }
  }
  return out;
}

/// Drum condition ids: first-codebook ids of the blurred latent.
inline std::vector<int> drum_condition_ids(const World& world, const Tensor& latent) {
  const TokenGrid g = tokenize(world, temporal_blur(latent), 1);
  return {g.cells().begin(), g.cells().end()};
}

/// Noise-added latent for the given frame-rate controls (chords, melody, beats).
inline Tensor render_latent(const World& world, const ControlSet& c, SeededRng& rng) {
  const WorldSpec& w = world.spec();
  const std::size_t len = c.chords.size();
  ARFM_CHECK(c.melody.size() == len && c.beats.size() == len, ErrorKind::kShape,
             "render_latent: control streams differ in length");
  Tensor z({len, std::size_t(w.latent_dim)});
  for (std::size_t j = 0; j < len; ++j) {
    world.mean_frame(c.chords[j], c.melody[j], c.beats[j], z.row(j).data());
    if (w.noise_std > 0.0f)
      for (float& v : z.row(j)) v += w.noise_std * rng.normal();
  }
  return z;
}

inline std::vector<int> make_caption(const WorldSpec& w, const std::vector<int>& chords) {
  std::vector<int> cap = {CaptionVocab::kChordsTag};
  std::vector<bool> seen(std::size_t(w.chord_vocab), false);
  for (int c : chords) {
    if (!seen[c]) {
      seen[c] = true;
      cap.push_back(CaptionVocab::chord(c));
    }
  }
  cap.push_back(CaptionVocab::kBeatTag);
  cap.push_back(CaptionVocab::period(w, w.beat_period));
  return cap;
}

/// Draws controls for `seconds` of material, renders and tokenizes it.
inline WorldSample gen_sample(const World& world, SeededRng& rng, double seconds) {
  ARFM_CHECK(seconds > 0.0, ErrorKind::kInvalidArgument, "gen_sample: duration must be positive");
  const WorldSpec& w = world.spec();
  const std::size_t len = w.frames(seconds);
  ARFM_CHECK(len >= 1, ErrorKind::kInvalidArgument, "gen_sample: duration shorter than one frame");
  ControlSet c;
  c.chord_rate = c.melody_rate = c.drum_rate = w.frame_rate;
  c.chords.resize(len);
  c.melody.resize(len);
  c.beats.resize(len);
  // Chord segments are geometric with a mean of two seconds.
  const double p_switch = 1.0 / (2.0 * w.frame_rate);
  int chord = int(rng.below(std::uint32_t(w.chord_vocab)));
  int mel = rng.bernoulli(0.2) ? w.melody_null() : int(rng.below(std::uint32_t(w.melody_vocab)));
  for (std::size_t j = 0; j < len; ++j) {
    if (j > 0) {
      if (w.chord_vocab > 1 && rng.bernoulli(p_switch)) {
        const int next = int(rng.below(std::uint32_t(w.chord_vocab - 1)));
        chord = next >= chord ? next + 1 : next;
      }
      if (mel == w.melody_null()) {
        if (rng.bernoulli(0.05)) mel = int(rng.below(std::uint32_t(w.melody_vocab)));
      } else if (rng.bernoulli(0.02)) {
        mel = w.melody_null();
      } else {
        const double u = rng.uniform_double();
        if (u < 0.1) mel = std::max(0, mel - 1);
        else if (u < 0.2) mel = std::min(w.melody_vocab - 1, mel + 1);
      }
    }
    c.chords[j] = chord;
    c.melody[j] = mel;
    c.beats[j] = (j % std::size_t(w.beat_period) == 0) ? 1 : 0;
  }
  WorldSample s;
  s.duration = seconds;
  s.latent = render_latent(world, c, rng);
  s.tokens = tokenize(world, s.latent);
  c.drums = drum_condition_ids(world, s.latent);
  s.caption = make_caption(w, c.chords);
  s.controls = std::move(c);
  return s;
}

/// Per-frame exact inversion over the product control space. Ties resolve to the
/// lowest (chord, melody, beat) combination in lexicographic order.
inline ControlSet decode_controls(const World& world, const Tensor& latent) {
  const WorldSpec& w = world.spec();
  ARFM_CHECK(latent.rank() == 2 && latent.dim(1) == std::size_t(w.latent_dim), ErrorKind::kShape,
             "decode_controls: latent must be [L, D]");
  const std::size_t len = latent.dim(0);
  const int nm = w.melody_vocab + 1;
  ControlSet c;
  c.chord_rate = c.melody_rate = c.drum_rate = w.frame_rate;
  c.chords.resize(len);
  c.melody.resize(len);
  c.beats.resize(len);
  for (std::size_t j = 0; j < len; ++j) {
    const int best = detail::nearest_row(world.combos(), latent.row(j).data());
    c.beats[j] = best % 2;
    c.melody[j] = (best / 2) % nm;
    c.chords[j] = best / 2 / nm;
  }
  c.drums = drum_condition_ids(world, latent);
  return c;
}

// ---------------------------------------------------------------------------
// Latent normalization: a single scalar mean and "mean std", where the std is
// taken per sample over the temporal axis (unbiased) and then averaged.

class NormAccumulator {
 public:
  void add(const Tensor& latent) {
    const std::size_t len = latent.dim(0), d = latent.dim(1);
    for (std::size_t q = 0; q < d; ++q) {
      double s = 0.0;
      for (std::size_t j = 0; j < len; ++j) s += latent.at(j, q);
      const double m = s / double(len);
      double ss = 0.0;
      for (std::size_t j = 0; j < len; ++j) {
        const double t = latent.at(j, q) - m;
        ss += t * t;
      }
      std_sum_ += len > 1 ? std::sqrt(ss / double(len - 1)) : 0.0;
      ++std_count_;
      sum_ += s;
    }
    count_ += len * d;
    ++segments_;
  }

  NormStats finish() const {
    ARFM_CHECK(segments_ > 0, ErrorKind::kInvalidArgument, "norm stats: no segments");
    NormStats st;
    st.mean = static_cast<float>(sum_ / double(count_));
    st.mean_std = static_cast<float>(std_sum_ / double(std_count_));
    st.n_segments = segments_;
    if (!(st.mean_std > kMinStd)) {
      st.mean_std = kMinStd;
      st.clamped = true;
    }
    return st;
  }

  static constexpr float kMinStd = 1e-6f;

 private:
  double sum_ = 0.0, std_sum_ = 0.0;
  std::size_t count_ = 0, std_count_ = 0, segments_ = 0;
};

inline constexpr std::size_t kDefaultNormSegments = 2048;

inline NormStats compute_norm_stats(const World& world, std::size_t n, SeededRng& rng,
                                    double seconds = 10.0) {
  ARFM_CHECK(n >= 1, ErrorKind::kInvalidArgument, "compute_norm_stats: n must be >= 1");
  NormAccumulator acc;
  for (std::size_t i = 0; i < n; ++i) {
    SeededRng r = rng.split(i);
    acc.add(gen_sample(world, r, seconds).latent);
  }
  return acc.finish();
}

inline Tensor normalize(const Tensor& z, const NormStats& st) {
  ARFM_CHECK(st.mean_std > 0.0f, ErrorKind::kInvalidArgument, "normalize: mean_std must be > 0");
  Tensor out = z;
  for (float& v : out.data()) v = (v - st.mean) / st.mean_std;
  return out;
}

inline Tensor unnormalize(const Tensor& z, const NormStats& st) {
  Tensor out = z;
  for (float& v : out.data()) v = v * st.mean_std + st.mean;
  return out;
}

}  // namespace arfm
