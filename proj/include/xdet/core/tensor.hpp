#pragma once

#include <Eigen/Core>

#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xdet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

// Configuration mistakes (bad hyperparameters, invalid architecture wiring).
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Malformed runtime inputs (bad tensor shapes, out-of-range taps).
struct input_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// File / serialization problems.
struct io_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite values where finite math is required.
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline Index shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Index{1},
                         [](Index a, Index b) { return a * b; });
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

template <typename E>
inline void check(bool cond, const std::string& msg) {
  if (!cond) throw E(msg);
}

// Dense row-major tensor with shared storage. Copies alias the same buffer;
// ops always allocate fresh outputs, so aliasing stays local to reshapes.
template <typename T>
class Tensor {
 public:
  using Scalar = T;
  using Storage = Eigen::Array<T, Eigen::Dynamic, 1>;
  using MatMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
  using ConstMatMap =
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

  Tensor() = default;
  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        store_(std::make_shared<Storage>(Storage::Zero(shape_numel(shape_)))) {}
  Tensor(Shape shape, std::shared_ptr<Storage> store)
      : shape_(std::move(shape)), store_(std::move(store)) {
    check<input_error>(store_ && store_->size() == shape_numel(shape_),
                       "tensor storage does not match shape " + shape_str(shape_));
  }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }

  static Tensor full(Shape shape, T v) {
    Tensor t(std::move(shape));
    t.arr().setConstant(v);
    return t;
  }

  static Tensor from(Shape shape, const std::vector<T>& values) {
    Tensor t(std::move(shape));
    check<input_error>(static_cast<Index>(values.size()) == t.size(),
                       "value count does not match shape " + shape_str(t.shape()));
    std::copy(values.begin(), values.end(), t.data());
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  bool defined() const { return static_cast<bool>(store_); }
  const Shape& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  Index size() const { return defined() ? store_->size() : 0; }

  Index dim(int i) const {
    int n = ndim();
    if (i < 0) i += n;
    check<input_error>(i >= 0 && i < n, "dim index out of range");
    return shape_[static_cast<size_t>(i)];
  }

  T* data() { return store_->data(); }
  const T* data() const { return store_->data(); }
  Storage& arr() { return *store_; }
  const Storage& arr() const { return *store_; }

  T& operator[](Index i) { return (*store_)[i]; }
  T operator[](Index i) const { return (*store_)[i]; }

  T& at(std::initializer_list<Index> idx) { return (*store_)[flat_index(idx)]; }
  T at(std::initializer_list<Index> idx) const { return (*store_)[flat_index(idx)]; }

  // Shares storage; shape must cover the same element count.
  Tensor reshaped(Shape shape) const {
    check<input_error>(shape_numel(shape) == size(),
                       "reshape " + shape_str(shape_) + " -> " + shape_str(shape) +
                           " changes element count");
    return Tensor(std::move(shape), store_);
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    t.store_ = std::make_shared<Storage>(*store_);
    return t;
  }

  MatMap mat(Index rows, Index cols) {
    check<input_error>(rows * cols == size(), "matrix view does not cover tensor");
    return MatMap(data(), rows, cols);
  }
  ConstMatMap mat(Index rows, Index cols) const {
    check<input_error>(rows * cols == size(), "matrix view does not cover tensor");
    return ConstMatMap(data(), rows, cols);
  }

  // Row-major 2-d view with the last axis as columns.
  MatMap mat2d() { return mat(size() / last_dim(), last_dim()); }
  ConstMatMap mat2d() const { return mat(size() / last_dim(), last_dim()); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    return defined() ? store_->isFinite().all() : true;
  }

 private:
  Index last_dim() const {
    check<input_error>(ndim() >= 1, "mat2d on 0-d tensor");
    return shape_.back();
  }

  Index flat_index(std::initializer_list<Index> idx) const {
    check<input_error>(static_cast<int>(idx.size()) == ndim(), "index rank mismatch");
    Index flat = 0;
    size_t k = 0;
    for (Index i : idx) {
      flat = flat * shape_[k] + i;
      ++k;
    }
    return flat;
  }

  Shape shape_;
  std::shared_ptr<Storage> store_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

}  // namespace xdet
