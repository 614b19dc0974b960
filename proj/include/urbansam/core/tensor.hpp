#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <vector>

#include "urbansam/core/errors.hpp"

namespace urbansam {

// Dense n-d array over a flat Eigen buffer, row-major logical indexing.
// Feature maps use [channels, height, width]; matrices [rows, cols].
template <class Scalar>
class Tensor {
public:
    using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
    using MatrixMap = Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
    using ConstMatrixMap =
        Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

    Tensor() = default;
    explicit Tensor(std::vector<Eigen::Index> shape) : shape_(std::move(shape)) {
        data_ = Storage::Zero(count(shape_));
    }
    Tensor(std::initializer_list<Eigen::Index> shape) : Tensor(std::vector<Eigen::Index>(shape)) {}

    static Tensor zeros(std::vector<Eigen::Index> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<Eigen::Index> shape, Scalar v) {
        Tensor t(std::move(shape));
        t.data_.setConstant(v);
        return t;
    }
    static Tensor scalar(Scalar v) {
        Tensor t(std::vector<Eigen::Index>{});
        t.data_.resize(1);
        t.data_(0) = v;
        return t;
    }

    const std::vector<Eigen::Index>& shape() const { return shape_; }
    Eigen::Index numel() const { return data_.size(); }
    Eigen::Index rank() const { return static_cast<Eigen::Index>(shape_.size()); }
    Eigen::Index dim(std::size_t i) const { return shape_.at(i); }

    Storage& array() { return data_; }
    const Storage& array() const { return data_; }
    Scalar* data() { return data_.data(); }
    const Scalar* data() const { return data_.data(); }

    Scalar& operator[](Eigen::Index i) { return data_(i); }
    Scalar operator[](Eigen::Index i) const { return data_(i); }

    // 3-d accessors for [C,H,W] maps.
    Scalar& at(Eigen::Index c, Eigen::Index h, Eigen::Index w) {
        return data_(c * shape_[1] * shape_[2] + h * shape_[2] + w);
    }
    Scalar at(Eigen::Index c, Eigen::Index h, Eigen::Index w) const {
        return data_(c * shape_[1] * shape_[2] + h * shape_[2] + w);
    }
    Scalar& at(Eigen::Index r, Eigen::Index c) { return data_(r * shape_[1] + c); }
    Scalar at(Eigen::Index r, Eigen::Index c) const { return data_(r * shape_[1] + c); }

    Scalar value() const { return data_(0); }  // rank-0 / single-element read

    // View a rank-2 tensor (or [C, H*W]) as a row-major matrix.
    MatrixMap mat(Eigen::Index rows, Eigen::Index cols) { return MatrixMap(data_.data(), rows, cols); }
    ConstMatrixMap mat(Eigen::Index rows, Eigen::Index cols) const {
        return ConstMatrixMap(data_.data(), rows, cols);
    }
    MatrixMap mat() { return mat(shape_.at(0), shape_.at(1)); }
    ConstMatrixMap mat() const { return mat(shape_.at(0), shape_.at(1)); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }
    bool all_finite() const { return data_.isFinite().all(); }

    void set_zero() { data_.setZero(); }

    std::string shape_str() const {
        std::ostringstream os;
        os << '[';
        for (std::size_t i = 0; i < shape_.size(); ++i) os << (i ? "," : "") << shape_[i];
        os << ']';
        return os.str();
    }

    static Eigen::Index count(const std::vector<Eigen::Index>& s) {
        Eigen::Index n = 1;
        for (auto d : s) n *= d;
        return n;
    }

private:
    std::vector<Eigen::Index> shape_;
    Storage data_;
};

template <class Scalar>
void require_same_shape(const Tensor<Scalar>& a, const Tensor<Scalar>& b, const char* what) {
    if (!a.same_shape(b))
        throw ValidationError(std::string(what) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

using TensorD = Tensor<double>;

}  // namespace urbansam
