// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <vector>

namespace pixelpost {

// Raised when an operation receives tensors whose shapes cannot be combined.
// The message names the operation and the offending shapes.
class ShapeError : public std::runtime_error {
 public:
  explicit ShapeError(const std::string& what) : std::runtime_error(what) {}
};

// Raised when a scalar argument or configuration field is outside its domain.
class ValueError : public std::runtime_error {
 public:
  explicit ValueError(const std::string& what) : std::runtime_error(what) {}
};

// Raised on serialization problems: truncated files, checksum mismatches,
// unknown format versions.
class IoError : public std::runtime_error {
 public:
  explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// Dense row-major tensor over a flat buffer. The float instantiation is the
// one every training-path API speaks; the double instantiation exists so the
// finite-difference oracle can evaluate forward graphs at higher precision
// than the gradients it is checking.
template <typename S>
struct TensorT {
  std::vector<int> shape;
  std::vector<S> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> shp) : shape(std::move(shp)) {
    data.assign(static_cast<size_t>(numel_of(shape)), S(0));
  }

  static TensorT zeros(std::vector<int> shp) { return TensorT(std::move(shp)); }

  static TensorT full(std::vector<int> shp, S value) {
    TensorT t(std::move(shp));
    std::fill(t.data.begin(), t.data.end(), value);
    return t;
  }

  static TensorT scalar(S value) { return full({1}, value); }

  static TensorT from_vector(std::vector<int> shp, std::vector<S> values) {
    if (numel_of(shp) != static_cast<int64_t>(values.size())) {
      throw ShapeError("from_vector: " + shape_str(shp) + " wants " +
                       std::to_string(numel_of(shp)) + " values, got " +
                       std::to_string(values.size()));
    }
    TensorT t;
    t.shape = std::move(shp);
    t.data = std::move(values);
    return t;
  }

  int rank() const { return static_cast<int>(shape.size()); }

  int dim(int i) const { return shape.at(static_cast<size_t>(i)); }

  int64_t numel() const { return numel_of(shape); }

  S& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
  S operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

  bool same_shape(const TensorT& other) const { return shape == other.shape; }

  static int64_t numel_of(const std::vector<int>& shp) {
    int64_t n = 1;
    for (int d : shp) {
      if (d <= 0) throw ShapeError("tensor dims must be positive, got " + shape_str(shp));
      n *= d;
    }
    return n;
  }

  static std::string shape_str(const std::vector<int>& shp) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shp.size(); ++i) os << (i ? "," : "") << shp[i];
    os << "]";
    return os.str();
  }
};

using Tensor = TensorT<float>;
using TensorD = TensorT<double>;

inline TensorD widen(const Tensor& t) {
  TensorD out;
  out.shape = t.shape;
  out.data.assign(t.data.begin(), t.data.end());
  return out;
}

inline Tensor narrow(const TensorD& t) {
  Tensor out;
  out.shape = t.shape;
  out.data.reserve(t.data.size());
  for (double v : t.data) out.data.push_back(static_cast<float>(v));
  return out;
}

// Lifts a float tensor to the requested scalar type; identity for float.
// Lets scalar-templated graph builders feed float-held data to either tape.
template <typename S>
TensorT<S> to_scalar(const Tensor& t) {
  if constexpr (std::is_same_v<S, float>) {
    return t;
  } else {
    return widen(t);
  }
}

}  // namespace pixelpost
