#pragma once

// Multi-stream delay pattern. In 1-indexed notation the mapping is
// P(i, j) = (i, j + i - 1); storage is 0-indexed, so book k (0-based) at frame j
// lands in column j + k of a grid that is N_q - 1 columns longer.

#include "arfm/token_grid.hpp"

namespace arfm {

/// True iff column `col` of book `book` is a padding cell in a delayed grid built
/// from `length` frames.
inline bool is_delay_pad(std::size_t book, std::size_t col, std::size_t length) {
  return col < book || col >= length + book;
}

/// Shifts book k right by k columns and fills the uncovered cells with PAD.
/// Regular ids only, unless `allow_special` admits the non-PAD reserved ids
/// (used for fill-in-the-middle sequences whose separator columns are delayed too).
inline TokenGrid apply_delay(const TokenGrid& g, const Vocab& vocab, bool allow_special = false) {
  const std::size_t nq = g.n_books(), len = g.length();
  TokenGrid out(nq, nq == 0 ? 0 : len + nq - 1, vocab.pad());
  for (std::size_t k = 0; k < nq; ++k) {
    for (std::size_t j = 0; j < len; ++j) {
      const int id = g.at(k, j);
      const bool ok = vocab.is_regular(id) || (allow_special && vocab.is_valid(id) && id != vocab.pad());
      ARFM_CHECK(ok, ErrorKind::kInvalidArgument,
                 "apply_delay: reserved or out-of-range id " + std::to_string(id) + " at (" +
                     std::to_string(k) + "," + std::to_string(j) + ")");
      out.at(k, j + k) = id;
    }
  }
  return out;
}

/// Inverse of apply_delay. Verifies that PAD sits exactly on the unmapped cells.
inline TokenGrid revert_delay(const TokenGrid& g, const Vocab& vocab) {
  const std::size_t nq = g.n_books();
  ARFM_CHECK(nq > 0 && g.length() + 1 >= nq, ErrorKind::kFormat,
             "revert_delay: grid too short for its book count");
  const std::size_t len = g.length() + 1 - nq;
  TokenGrid out(nq, len);
  for (std::size_t k = 0; k < nq; ++k) {
    for (std::size_t c = 0; c < g.length(); ++c) {
      const int id = g.at(k, c);
      const bool pad_cell = is_delay_pad(k, c, len);
      if (pad_cell != (id == vocab.pad()))
        throw Error(ErrorKind::kFormat, "revert_delay: malformed pad structure at (" +
                                            std::to_string(k) + "," + std::to_string(c) + ")");
      if (!pad_cell) out.at(k, c - k) = id;
    }
  }
  return out;
}

}  // namespace arfm
