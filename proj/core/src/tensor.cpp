#include "cdet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cdet {

std::string Shape::str() const {
  return "(" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) + ")";
}

Tensor::Tensor(Shape shape, double fill) : shape_(shape), data_(shape.size(), fill) {
  if (shape.c < 0 || shape.h < 0 || shape.w < 0) {
    throw std::invalid_argument("Tensor: negative dimension");
  }
}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape.size()) {
    throw std::invalid_argument("Tensor: value count does not match shape " + shape.str());
  }
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

}  // namespace cdet
