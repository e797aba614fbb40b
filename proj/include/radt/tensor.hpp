#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

#include "radt/common.hpp"

namespace radt {

// Row-major 2-D buffer. Deliberately minimal: shape plus contiguous storage.
template <typename T>
struct Matrix {
  int rows = 0;
  int cols = 0;
  std::vector<T> data;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, T(0)) {}

  void resize(int r, int c) {
    rows = r;
    cols = c;
    data.assign(static_cast<std::size_t>(r) * c, T(0));
  }

  // resize without clearing previously allocated capacity (hot-loop reuse)
  void reshape(int r, int c) {
    rows = r;
    cols = c;
    data.resize(static_cast<std::size_t>(r) * c);
  }

  std::size_t size() const { return data.size(); }

  T* row(int r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const T* row(int r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  T& at(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& at(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }
  void zero() { fill(T(0)); }

  u64 digest(u64 h = kFnvBasis) const {
    return fnv1a(data.data(), data.size() * sizeof(T), h);
  }
};

}  // namespace radt
