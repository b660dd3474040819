#pragma once

// Temporal adherence metrics: chord IOU over label segmentations, beat F1 with
// a matching window, and chroma cosine similarity of melodies.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "arfm/world/world.hpp"

namespace arfm::metrics {

struct Segment {
  int label = 0;
  double start = 0.0, end = 0.0;
};
using LabelSegments = std::vector<Segment>;
using BeatList = std::vector<double>;

inline void validate_segments(const LabelSegments& s, const char* what) {
  ARFM_CHECK(!s.empty(), ErrorKind::kInvalidArgument, std::string(what) + ": empty segmentation");
  ARFM_CHECK(s.front().start == 0.0, ErrorKind::kInvalidArgument, std::string(what) + ": must start at 0");
  for (std::size_t i = 0; i < s.size(); ++i) {
    ARFM_CHECK(s[i].end > s[i].start, ErrorKind::kInvalidArgument, std::string(what) + ": empty segment");
    ARFM_CHECK(i == 0 || s[i].start == s[i - 1].end, ErrorKind::kInvalidArgument,
               std::string(what) + ": segments are not contiguous");
  }
}

/// Fraction of the timeline on which the labels agree.
inline double chord_iou(const LabelSegments& ref, const LabelSegments& gen) {
  validate_segments(ref, "chord_iou(ref)");
  validate_segments(gen, "chord_iou(gen)");
  const double dur = ref.back().end;
  ARFM_CHECK(std::abs(gen.back().end - dur) <= 1e-9 * std::max(1.0, dur), ErrorKind::kInvalidArgument,
             "chord_iou: durations differ");
  double agree = 0.0;
  std::size_t i = 0, j = 0;
  while (i < ref.size() && j < gen.size()) {
    const double lo = std::max(ref[i].start, gen[j].start);
    const double hi = std::min(ref[i].end, gen[j].end);
    if (hi > lo && ref[i].label == gen[j].label) agree += hi - lo;
    if (ref[i].end <= gen[j].end) ++i;
    else ++j;
  }
  return agree / dur;
}

/// Greedy one-to-one matching in time order: each generated beat takes the
/// nearest unmatched reference beat within `tol`.
inline double beat_f1(const BeatList& ref, const BeatList& gen, double tol = 0.050) {
  if (ref.empty() && gen.empty()) return 1.0;
  if (ref.empty() || gen.empty()) return 0.0;
  std::vector<bool> used(ref.size(), false);
  std::size_t hits = 0;
  for (double g : gen) {
    int best = -1;
    double best_d = 0.0;
    for (std::size_t r = 0; r < ref.size(); ++r) {
      if (used[r]) continue;
      const double d = std::abs(ref[r] - g);
      if (d <= tol + 1e-12 && (best < 0 || d < best_d)) {
        best = int(r);
        best_d = d;
      }
    }
    if (best >= 0) {
      used[std::size_t(best)] = true;
      ++hits;
    }
  }
  if (hits == 0) return 0.0;
  const double p = double(hits) / double(gen.size());
  const double r = double(hits) / double(ref.size());
  return 2.0 * p * r / (p + r);
}

/// Cosine similarity of one-hot pitch-class chromagrams; `null_id` frames are silent.
inline double melody_similarity(const std::vector<int>& ref, const std::vector<int>& gen, int null_id,
                                int n_bins = 12) {
  ARFM_CHECK(ref.size() == gen.size(), ErrorKind::kInvalidArgument, "melody_similarity: length mismatch");
  double dot = 0.0, nr = 0.0, ng = 0.0;
  for (std::size_t j = 0; j < ref.size(); ++j) {
    ARFM_CHECK(ref[j] >= 0 && gen[j] >= 0, ErrorKind::kInvalidArgument, "melody_similarity: negative pitch id");
    const bool rv = ref[j] != null_id, gv = gen[j] != null_id;
    nr += rv;
    ng += gv;
    if (rv && gv && ref[j] % n_bins == gen[j] % n_bins) dot += 1.0;
  }
  if (nr == 0.0 || ng == 0.0) return 0.0;
  return dot / std::sqrt(nr * ng);
}

/// Run-length segments of per-frame labels at `rate` frames per second.
inline LabelSegments to_segments(const std::vector<int>& labels, double rate) {
  LabelSegments out;
  for (std::size_t j = 0; j < labels.size(); ++j) {
    const double t0 = double(j) / rate, t1 = double(j + 1) / rate;
    if (!out.empty() && out.back().label == labels[j]) out.back().end = t1;
    else out.push_back({labels[j], t0, t1});
  }
  return out;
}

inline BeatList to_beats(const std::vector<int>& flags, double rate) {
  BeatList out;
  for (std::size_t j = 0; j < flags.size(); ++j)
    if (flags[j]) out.push_back(double(j) / rate);
  return out;
}

struct MetricRecord {
  std::string sample_id;
  double chord_iou = 0.0, beat_f1 = 0.0, melody_sim = 0.0;
};

/// Decodes the generated latent and scores it against the conditioning controls.
inline MetricRecord eval_generation(const World& world, const Tensor& latent, const ControlSet& ref,
                                    std::string id = {}) {
  const ControlSet gen = decode_controls(world, latent);
  ARFM_CHECK(gen.chords.size() == ref.chords.size(), ErrorKind::kShape,
             "eval_generation: generated length differs from the conditioning");
  const double rate = world.spec().frame_rate;
  MetricRecord m;
  m.sample_id = std::move(id);
  m.chord_iou = chord_iou(to_segments(ref.chords, rate), to_segments(gen.chords, rate));
  m.beat_f1 = beat_f1(to_beats(ref.beats, rate), to_beats(gen.beats, rate));
  m.melody_sim = melody_similarity(ref.melody, gen.melody, world.spec().melody_null());
  return m;
}

inline MetricRecord eval_generation(const World& world, const TokenGrid& tokens, const ControlSet& ref,
                                    std::string id = {}) {
  return eval_generation(world, detokenize(world, tokens), ref, std::move(id));
}

struct MetricSummary {
  double chord_iou = 0.0, beat_f1 = 0.0, melody_sim = 0.0;
  std::size_t n = 0;
};

inline MetricSummary summarize(const std::vector<MetricRecord>& rows) {
  MetricSummary s;
  for (const MetricRecord& r : rows) {
    s.chord_iou += r.chord_iou;
    s.beat_f1 += r.beat_f1;
    s.melody_sim += r.melody_sim;
  }
  s.n = rows.size();
  if (s.n) {
    s.chord_iou /= double(s.n);
    s.beat_f1 /= double(s.n);
    s.melody_sim /= double(s.n);
  }
  return s;
}

inline void write_metrics_csv(const std::vector<MetricRecord>& rows, const std::filesystem::path& path) {
  std::ofstream f(path);
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot write " + path.string());
  f << "sample_id,chord_iou,beat_f1,melody_sim\n";
  char buf[128];
  for (const MetricRecord& r : rows) {
    std::snprintf(buf, sizeof buf, ",%.6f,%.6f,%.6f\n", r.chord_iou, r.beat_f1, r.melody_sim);
    f << r.sample_id << buf;
  }
  ARFM_CHECK(f.good(), ErrorKind::kIo, "write failed for " + path.string());
}

}  // namespace arfm::metrics
