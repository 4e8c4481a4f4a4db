#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace hitrans {

using Index = Eigen::Index;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowMatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

class ShapeError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

std::string shape_to_string(const std::vector<Index>& shape);

/// Dense row-major array of rank 1..4 backed by an Eigen vector.
///
/// Feature maps use NCHW; token sequences use (batch, length, dim).
template <typename Scalar>
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<Index> shape) : shape_(std::move(shape)) {
        data_.setZero(numel_of(shape_));
    }
    Tensor(std::initializer_list<Index> shape) : Tensor(std::vector<Index>(shape)) {}

    static Tensor filled(std::vector<Index> shape, Scalar value) {
        Tensor t(std::move(shape));
        t.data_.setConstant(value);
        return t;
    }

    const std::vector<Index>& shape() const { return shape_; }
    Index rank() const { return static_cast<Index>(shape_.size()); }
    Index dim(Index i) const { return shape_.at(static_cast<std::size_t>(i)); }
    Index size() const { return data_.size(); }
    bool empty() const { return data_.size() == 0; }

    Vector<Scalar>& values() { return data_; }
    const Vector<Scalar>& values() const { return data_; }
    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }

    Scalar& operator[](Index i) { return data_[i]; }
    Scalar operator[](Index i) const { return data_[i]; }

    // NCHW accessors; also used for (B, L, D) with the leading index omitted.
    Scalar& at(Index n, Index c, Index h, Index w) {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    Scalar at(Index n, Index c, Index h, Index w) const {
        return data_[((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
    }
    Scalar& at(Index b, Index l, Index d) { return data_[(b * shape_[1] + l) * shape_[2] + d]; }
    Scalar at(Index b, Index l, Index d) const { return data_[(b * shape_[1] + l) * shape_[2] + d]; }

    /// Trailing two dims of slice `outer` viewed as a row-major matrix.
    RowMatrixMap<Scalar> matrix(Index outer = 0) {
        const auto [rows, cols] = trailing_dims();
        return RowMatrixMap<Scalar>(data_.data() + outer * rows * cols, rows, cols);
    }
    ConstRowMatrixMap<Scalar> matrix(Index outer = 0) const {
        const auto [rows, cols] = trailing_dims();
        return ConstRowMatrixMap<Scalar>(data_.data() + outer * rows * cols, rows, cols);
    }

    /// Sample `n` of an NCHW tensor as a (C, H*W) matrix.
    RowMatrixMap<Scalar> sample_matrix(Index n) {
        const Index cols = numel() / (shape_[0] * shape_[1]);
        return RowMatrixMap<Scalar>(data_.data() + n * shape_[1] * cols, shape_[1], cols);
    }
    ConstRowMatrixMap<Scalar> sample_matrix(Index n) const {
        const Index cols = numel() / (shape_[0] * shape_[1]);
        return ConstRowMatrixMap<Scalar>(data_.data() + n * shape_[1] * cols, shape_[1], cols);
    }

    /// All leading dims flattened into rows: (prod(shape[:-1]), shape[-1]).
    RowMatrixMap<Scalar> rows_view() {
        return RowMatrixMap<Scalar>(data_.data(), numel() / shape_.back(), shape_.back());
    }
    ConstRowMatrixMap<Scalar> rows_view() const {
        return ConstRowMatrixMap<Scalar>(data_.data(), numel() / shape_.back(), shape_.back());
    }

    Tensor reshaped(std::vector<Index> shape) const {
        if (numel_of(shape) != size()) {
            throw ShapeError("cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
        }
        Tensor t;
        t.shape_ = std::move(shape);
        t.data_ = data_;
        return t;
    }

    template <typename Other>
    Tensor<Other> cast() const {
        Tensor<Other> t(shape_);
        t.values() = data_.template cast<Other>();
        return t;
    }

    void set_zero() { data_.setZero(); }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.data_ == b.data_;
    }

    static Index numel_of(const std::vector<Index>& shape) {
        return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
    }

  private:
    Index numel() const { return data_.size(); }
    std::pair<Index, Index> trailing_dims() const {
        if (shape_.size() < 2) return {1, shape_.empty() ? 1 : shape_[0]};
        return {shape_[shape_.size() - 2], shape_.back()};
    }

    std::vector<Index> shape_;
    Vector<Scalar> data_;
};

inline std::string shape_to_string(const std::vector<Index>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ", ";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

template <typename Scalar>
void require_shape(const Tensor<Scalar>& t, const std::vector<Index>& shape, const std::string& what) {
    if (t.shape() != shape) {
        throw ShapeError(what + ": expected " + shape_to_string(shape) + ", got " + shape_to_string(t.shape()));
    }
}

/// A feature map is an NCHW tensor; the alias documents intent at API boundaries.
template <typename Scalar>
using FeatureMap = Tensor<Scalar>;

}  // namespace hitrans
