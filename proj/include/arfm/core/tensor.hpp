#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "arfm/core/error.hpp"

namespace arfm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Dense row-major float32 tensor. A rank-0 tensor holds a single value.
class Tensor {
 public:
  Tensor() : shape_{}, data_(1, 0.0f) {}

  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    ARFM_CHECK(std::isfinite(fill), ErrorKind::kNumeric, "tensor fill value is not finite");
  }

  Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    ARFM_CHECK(shape_numel(shape_) == data_.size(), ErrorKind::kShape,
               "tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                   shape_str(shape_));
    ensure_finite();
  }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<float> data() noexcept { return data_; }
  std::span<const float> data() const noexcept { return data_; }
  float* ptr() noexcept { return data_.data(); }
  const float* ptr() const noexcept { return data_.data(); }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  // 2-D accessors; callers guarantee rank 2.
  float& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  float at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<float> row(std::size_t r) { return {data_.data() + r * shape_[1], shape_[1]}; }
  std::span<const float> row(std::size_t r) const {
    return {data_.data() + r * shape_[1], shape_[1]};
  }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  void ensure_finite(const std::string& what = "tensor") const {
    ARFM_CHECK(all_finite(), ErrorKind::kNumeric, what + " contains non-finite values");
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ &&
           std::memcmp(a.data_.data(), b.data_.data(), a.data_.size() * sizeof(float)) == 0;
  }

 private:
  Shape shape_;
  std::vector<float> data_;
};

inline float max_abs_diff(const Tensor& a, const Tensor& b) {
  ARFM_CHECK(a.shape() == b.shape(), ErrorKind::kShape, "max_abs_diff: shape mismatch");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

// ---------------------------------------------------------------------------
// PFT1 file format: "PFT1" | rank:u32 | extents:u32[rank] | data:f32[numel], all little-endian.

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFFu));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
         (std::uint32_t(p[3]) << 24);
}

}  // namespace detail

inline std::string encode_tensor(const Tensor& t) {
  std::string out = "PFT1";
  out.reserve(8 + 4 * t.rank() + 4 * t.size());
  detail::put_u32(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) {
    ARFM_CHECK(e <= 0xFFFFFFFFu, ErrorKind::kFormat, "tensor extent exceeds u32");
    detail::put_u32(out, static_cast<std::uint32_t>(e));
  }
  for (float v : t.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    detail::put_u32(out, bits);
  }
  return out;
}

inline Tensor decode_tensor(std::string_view bytes, const std::string& context = "<memory>") {
  auto fail = [&](const std::string& why) {
    throw Error(ErrorKind::kFormat, context + ": " + why);
  };
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 8 || std::memcmp(p, "PFT1", 4) != 0) fail("missing PFT1 header");
  const std::uint32_t rank = detail::get_u32(p + 4);
  std::size_t off = 8;
  if (bytes.size() < off + 4ull * rank) fail("truncated extents");
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i, off += 4) shape[i] = detail::get_u32(p + off);
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != off + 4 * n) fail("data length does not match extents");
  std::vector<float> data(n);
  for (std::size_t i = 0; i < n; ++i, off += 4) {
    const std::uint32_t bits = detail::get_u32(p + off);
    std::memcpy(&data[i], &bits, 4);
  }
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const Tensor& t, const std::filesystem::path& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot open for writing: " + path.string());
  const std::string bytes = encode_tensor(t);
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  ARFM_CHECK(f.good(), ErrorKind::kIo, "write failed: " + path.string());
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  ARFM_CHECK(f.good(), ErrorKind::kIo, "cannot open for reading: " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return decode_tensor(bytes, path.string());
}

}  // namespace arfm
