#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "arfm/core/error.hpp"
#include "arfm/core/tensor.hpp"

namespace arfm {

/// Token-id layout for a codebook of `card` regular entries. Regular ids are
/// [0, card); the reserved ids follow directly after.
struct Vocab {
  int card = 32;

  int pad() const { return card; }
  int start() const { return card + 1; }
  int fim_a() const { return card + 2; }
  int fim_b() const { return card + 3; }
  int fim_c() const { return card + 4; }
  int eos() const { return card + 5; }
  /// Total id count including reserved ids.
  int total() const { return card + 6; }

  bool is_regular(int id) const { return id >= 0 && id < card; }
  bool is_valid(int id) const { return id >= 0 && id < total(); }
};

/// N_q x L integer grid; row k is codebook stream k.
class TokenGrid {
 public:
  TokenGrid() = default;
  TokenGrid(std::size_t n_books, std::size_t length, int fill = 0)
      : n_books_(n_books), length_(length), cells_(n_books * length, fill) {}

  std::size_t n_books() const noexcept { return n_books_; }
  std::size_t length() const noexcept { return length_; }

  int& at(std::size_t book, std::size_t frame) { return cells_[book * length_ + frame]; }
  int at(std::size_t book, std::size_t frame) const { return cells_[book * length_ + frame]; }

  const std::vector<int>& cells() const noexcept { return cells_; }
  std::vector<int>& cells() noexcept { return cells_; }

  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;

  /// Column slice [begin, end) across all books.
  TokenGrid columns(std::size_t begin, std::size_t end) const {
    ARFM_CHECK(begin <= end && end <= length_, ErrorKind::kShape, "TokenGrid::columns out of range");
    TokenGrid out(n_books_, end - begin);
    for (std::size_t k = 0; k < n_books_; ++k)
      for (std::size_t j = begin; j < end; ++j) out.at(k, j - begin) = at(k, j);
    return out;
  }

  Tensor to_tensor() const {
    Tensor t({n_books_, length_});
    for (std::size_t i = 0; i < cells_.size(); ++i) t[i] = static_cast<float>(cells_[i]);
    return t;
  }

  static TokenGrid from_tensor(const Tensor& t) {
    ARFM_CHECK(t.rank() == 2, ErrorKind::kShape, "token grid tensor must be rank 2");
    TokenGrid g(t.dim(0), t.dim(1));
    for (std::size_t i = 0; i < t.size(); ++i) {
      const float v = t[i];
      ARFM_CHECK(v == std::floor(v) && v >= 0.0f, ErrorKind::kFormat,
                 "token grid tensor holds a non-integer id");
      g.cells_[i] = static_cast<int>(v);
    }
    return g;
  }

 private:
  std::size_t n_books_ = 0;
  std::size_t length_ = 0;
  std::vector<int> cells_;
};

}  // namespace arfm
