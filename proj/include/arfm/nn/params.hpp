#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "arfm/core/rng.hpp"
#include "arfm/core/tensor.hpp"

namespace arfm::nn {

template <class T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;
template <class T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Eigen picks its vectorized code path by pointer alignment, and that path
// decides the summation order. Flat buffers are over-aligned and every entry
// starts on an aligned offset so results do not depend on where the heap put them.
inline constexpr std::size_t kParamAlign = 16;  // floats (64 bytes)
using ParamVec = std::vector<float, Eigen::aligned_allocator<float>>;

struct ParamInit {
  enum Kind { kNormal, kZeros, kOnes, kLeftIdentity } kind = kNormal;
  float std = 0.02f;
};

struct ParamEntry {
  std::string name;
  std::size_t rows = 0, cols = 0, offset = 0;
  ParamInit init;
  std::size_t size() const { return rows * cols; }
};

/// Named parameter tensors laid out in one flat buffer. The topology is a pure
/// function of the registration order, so two models built from the same config
/// share offsets.
class ParamLayout {
 public:
  std::size_t add(std::string name, std::size_t rows, std::size_t cols, ParamInit init = {}) {
    ARFM_CHECK(!index_.count(name), ErrorKind::kInvalidArgument, "duplicate parameter " + name);
    entries_.push_back({name, rows, cols, total_, init});
    index_[name] = entries_.size() - 1;
    total_ += (rows * cols + kParamAlign - 1) / kParamAlign * kParamAlign;
    return entries_.size() - 1;
  }

  std::size_t total() const noexcept { return total_; }
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  const ParamEntry& at(std::size_t i) const { return entries_.at(i); }

  std::optional<std::size_t> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  ParamVec initialize(SeededRng rng) const {
    ParamVec v(total_, 0.0f);
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      const ParamEntry& e = entries_[i];
      SeededRng r = rng.split(i);
      float* p = v.data() + e.offset;
      switch (e.init.kind) {
        case ParamInit::kNormal:
          for (std::size_t j = 0; j < e.size(); ++j) p[j] = e.init.std * r.normal();
          break;
        case ParamInit::kZeros: break;
        case ParamInit::kOnes: std::fill(p, p + e.size(), 1.0f); break;
        case ParamInit::kLeftIdentity:
          for (std::size_t j = 0; j < e.size(); ++j) p[j] = e.init.std * r.normal();
          for (std::size_t d = 0; d < std::min(e.rows, e.cols); ++d) p[d * e.cols + d] += 1.0f;
          break;
      }
    }
    return v;
  }

 private:
  std::vector<ParamEntry> entries_;
  std::map<std::string, std::size_t> index_;
  std::size_t total_ = 0;
};

template <class T>
Eigen::Map<const Mat<T>> pmat(const ParamLayout& l, const T* base, std::size_t i) {
  const ParamEntry& e = l.at(i);
  return {base + e.offset, Eigen::Index(e.rows), Eigen::Index(e.cols)};
}

template <class T>
Eigen::Map<Mat<T>> pmat(const ParamLayout& l, T* base, std::size_t i) {
  const ParamEntry& e = l.at(i);
  return {base + e.offset, Eigen::Index(e.rows), Eigen::Index(e.cols)};
}

template <class T>
Eigen::Map<const RowVec<T>> pvec(const ParamLayout& l, const T* base, std::size_t i) {
  const ParamEntry& e = l.at(i);
  return {base + e.offset, Eigen::Index(e.size())};
}

template <class T>
Eigen::Map<RowVec<T>> pvec(const ParamLayout& l, T* base, std::size_t i) {
  const ParamEntry& e = l.at(i);
  return {base + e.offset, Eigen::Index(e.size())};
}

/// Writes every parameter as <dir>/<name>.pft.
inline void save_params(const ParamLayout& l, const ParamVec& values,
                        const std::filesystem::path& dir) {
  ARFM_CHECK(values.size() == l.total(), ErrorKind::kShape, "save_params: buffer size mismatch");
  std::filesystem::create_directories(dir);
  for (const ParamEntry& e : l.entries()) {
    std::vector<float> data(values.begin() + std::ptrdiff_t(e.offset),
                            values.begin() + std::ptrdiff_t(e.offset + e.size()));
    save_tensor(Tensor({e.rows, e.cols}, std::move(data)), dir / (e.name + ".pft"));
  }
}

inline ParamVec load_params(const ParamLayout& l, const std::filesystem::path& dir) {
  ParamVec values(l.total(), 0.0f);
  for (const ParamEntry& e : l.entries()) {
    const Tensor t = load_tensor(dir / (e.name + ".pft"));
    ARFM_CHECK(t.shape() == Shape({e.rows, e.cols}), ErrorKind::kShape,
               "load_params: " + e.name + " has shape " + shape_str(t.shape()));
    std::copy(t.data().begin(), t.data().end(), values.begin() + std::ptrdiff_t(e.offset));
  }
  return values;
}

}  // namespace arfm::nn
