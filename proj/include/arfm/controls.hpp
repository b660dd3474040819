#pragma once

#include <vector>

namespace arfm {

/// Frame-aligned control streams. `drums` holds the drum condition ids
/// (first-codebook ids of the temporally blurred latent); `beats` holds the
/// per-frame onset flags they were derived from, which the metrics use as the
/// beat reference.
struct ControlSet {
  std::vector<int> chords;
  std::vector<int> melody;  // id == melody_vocab means "no melody"
  std::vector<int> drums;
  std::vector<int> beats;  // 0/1
  double chord_rate = 50.0;
  double melody_rate = 50.0;
  double drum_rate = 50.0;

  friend bool operator==(const ControlSet&, const ControlSet&) = default;
};

}  // namespace arfm
