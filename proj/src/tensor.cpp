// SPDX-License-Identifier: Apache-2.0
#include "tsmoe/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tsmoe {

std::size_t shape_size(const Shape& shape) noexcept {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(values.begin(), values.end()) {
    if (shape_size(shape_) != data_.size()) {
        throw std::invalid_argument("tensor shape " + shape_string(shape_) + " does not match " +
                                    std::to_string(data_.size()) + " values");
    }
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

Tensor Tensor::vector(std::vector<double> values) {
    const std::size_t n = values.size();
    return Tensor(Shape{n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    return Tensor(Shape{rows, cols}, std::move(values));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) throw std::out_of_range("tensor axis out of range");
    return shape_[axis];
}

std::size_t Tensor::rows() const noexcept {
    if (shape_.size() < 2) return 1;
    return shape_[0];
}

std::size_t Tensor::cols() const noexcept {
    const std::size_t r = rows();
    return r == 0 ? 0 : data_.size() / r;
}

double Tensor::item() const {
    if (data_.size() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
}

void Tensor::fill(double value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

bool Tensor::identical(const Tensor& other) const noexcept {
    return shape_ == other.shape_ &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

} // namespace tsmoe
