#pragma once

#include <cstddef>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "metaforge/errors.hpp"
#include "metaforge/matrix.hpp"

namespace metaforge {

enum class Dtype { f32, f64 };

/// N-dimensional row-major array of doubles, the in-memory form of an NPY file.
struct Tensor {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  Dtype dtype = Dtype::f64;  // on-disk precision

  static std::size_t count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
  }

  Tensor() = default;
  Tensor(std::vector<std::size_t> s, std::vector<double> d, Dtype t = Dtype::f64)
      : shape(std::move(s)), data(std::move(d)), dtype(t) {
    if (data.size() != count(shape)) throw ShapeError("tensor data does not match shape");
  }

  static Tensor from_matrix(const RealMatrix& m) {
    return Tensor({m.rows(), m.cols()}, m.storage());
  }

  RealMatrix to_matrix() const {
    if (shape.size() != 2) throw ShapeError("expected a 2-D tensor, got " + std::to_string(shape.size()) + "-D");
    return RealMatrix(shape[0], shape[1], data);
  }

  std::string shape_string() const {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
      s += std::to_string(shape[i]);
      if (shape.size() == 1 || i + 1 < shape.size()) s += ",";
      if (i + 1 < shape.size()) s += " ";
    }
    return s + ")";
  }
};

}  // namespace metaforge
