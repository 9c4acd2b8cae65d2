#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace lungdet::nn {

/// Dense row-major n-d array. Layout conventions used across the project:
///   2-d feature maps: (N, C, H, W)
///   3-d feature maps: (N, C, D, H, W)
/// Template parameter T is float in the training/inference paths and double
/// in the numeric verification suites.
template <typename T>
struct Tensor {
  std::vector<int> shape;
  std::vector<T> data;

  Tensor() = default;
  explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(count(shape)), T(0));
  }
  Tensor(std::vector<int> s, std::vector<T> d) : shape(std::move(s)), data(std::move(d)) {
    if (static_cast<int64_t>(data.size()) != count(shape))
      throw std::invalid_argument("tensor: data size does not match shape");
  }

  static int64_t count(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) {
      if (d < 0) throw std::invalid_argument("tensor: negative dimension");
      n *= d;
    }
    return n;
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  T* ptr() { return data.data(); }
  const T* ptr() const { return data.data(); }

  T& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  const T& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  void fill(T v) { std::fill(data.begin(), data.end(), v); }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  /// Spatial element count, i.e. everything after the channel axis.
  int64_t spatial_size() const {
    int64_t n = 1;
    for (int i = 2; i < rank(); ++i) n *= shape[static_cast<size_t>(i)];
    return n;
  }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

template <typename T>
Tensor<T> tensor_cast(const Tensor<float>& x) {
  Tensor<T> out(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) out[i] = static_cast<T>(x[i]);
  return out;
}

}  // namespace lungdet::nn
