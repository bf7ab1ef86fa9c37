// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

namespace tsmoe {

using Shape = std::vector<std::size_t>;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
/// Storage aligned to Eigen's maximum alignment: vectorized kernels then split
/// every buffer the same way, which keeps reductions bit-reproducible.
using AlignedStorage = std::vector<double, Eigen::aligned_allocator<double>>;

std::string shape_string(const Shape& shape);

/// Dense row-major tensor of doubles. Rank 0 is a scalar.
///
/// Two-dimensional views treat the first extent as rows and the product of
/// the remaining extents as columns, so a rank-1 tensor of length n is a
/// 1 x n row when viewed as a matrix.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double value);
    static Tensor vector(std::vector<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const;
    std::size_t rows() const noexcept;
    std::size_t cols() const noexcept;

    double* data() noexcept { return data_.data(); }
    const double* data() const noexcept { return data_.data(); }
    std::span<double> values() noexcept { return data_; }
    std::span<const double> values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    /// Value of a single-element tensor.
    double item() const;

    MatrixMap matrix() { return {data_.data(), Eigen::Index(rows()), Eigen::Index(cols())}; }
    ConstMatrixMap matrix() const { return {data_.data(), Eigen::Index(rows()), Eigen::Index(cols())}; }
    std::span<double> row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }
    std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }

    void fill(double value);
    bool all_finite() const noexcept;
    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }

    /// Bitwise equality of shape and every value.
    bool identical(const Tensor& other) const noexcept;

private:
    Shape shape_;
    AlignedStorage data_;
};

std::size_t shape_size(const Shape& shape) noexcept;

} // namespace tsmoe
