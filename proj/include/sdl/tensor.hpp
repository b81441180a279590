#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "sdl/error.hpp"

namespace sdl {

// Dense row-major double tensor. Plain value type; `node` links it to the
// active Tape when the tensor was produced while recording (-1 otherwise).
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;
  int node = -1;

  Tensor() = default;
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(count(shape)), 0.0);
  }
  Tensor(std::vector<int64_t> s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    require(count(shape) == static_cast<int64_t>(data.size()), Err::ShapeMismatch,
            "tensor data length does not match shape");
  }

  static int64_t count(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) {
      require(d > 0, Err::InvalidDims, "tensor dimensions must be positive");
      n *= d;
    }
    return n;
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor zeros(std::vector<int64_t> s) { return Tensor(std::move(s)); }
  static Tensor full(std::vector<int64_t> s, double v) {
    Tensor t(std::move(s));
    for (double& x : t.data) x = v;
    return t;
  }

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  size_t ndim() const { return shape.size(); }
  int64_t dim(size_t i) const { return shape.at(i); }
  bool is_scalar() const { return numel() == 1; }

  // 2D accessors; last dim treated as the inner (contiguous) axis
  int64_t rows() const {
    require(ndim() == 2, Err::ShapeMismatch, "rows() requires a 2-D tensor");
    return shape[0];
  }
  int64_t cols() const {
    require(ndim() == 2, Err::ShapeMismatch, "cols() requires a 2-D tensor");
    return shape[1];
  }
  int64_t last_dim() const {
    require(!shape.empty(), Err::ShapeMismatch, "last_dim() on empty shape");
    return shape.back();
  }

  double& at2(int64_t r, int64_t c) { return data[static_cast<size_t>(r * cols() + c)]; }
  double at2(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols() + c)]; }
  double& operator[](size_t i) { return data[i]; }
  double operator[](size_t i) const { return data[i]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "[";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + "]";
  }
};

inline bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace sdl
