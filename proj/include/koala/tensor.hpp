#ifndef KOALA_TENSOR_HPP
#define KOALA_TENSOR_HPP

#include <cstdint>
#include <memory>
#include <sstream>
#include <vector>

#include "koala/common.hpp"
#include "koala/rng.hpp"

namespace koala {

// Dense 4-D (batch, channel, height, width) shape.
struct Shape {
  int n = 0, c = 0, h = 0, w = 0;

  int64_t numel() const {
    return static_cast<int64_t>(n) * c * h * w;
  }
  bool operator==(const Shape& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }
  bool operator!=(const Shape& o) const { return !(*this == o); }

  std::string str() const {
    std::ostringstream os;
    os << "[" << n << "," << c << "," << h << "," << w << "]";
    return os.str();
  }
};

// Dense NCHW tensor handle with value-semantics at the handle level and
// shared storage underneath, so tape closures can hold cheap copies while
// gradients accumulate in one place.
//
// T is float for training/inference; double instantiations exist for
// finite-difference gradient checking.
template <typename T>
class TensorT {
 public:
  TensorT() : shape_{0, 0, 0, 0} {}

  explicit TensorT(Shape s, T fill = T(0)) : shape_(s) {
    check_value(s.n >= 0 && s.c >= 0 && s.h >= 0 && s.w >= 0,
                "tensor shape must be non-negative: " + s.str());
    st_ = std::make_shared<Storage>();
    st_->value.assign(static_cast<size_t>(s.numel()), fill);
  }

  TensorT(Shape s, std::vector<T> data) : shape_(s) {
    check_shape(static_cast<int64_t>(data.size()) == s.numel(),
                "data length does not match shape " + s.str());
    st_ = std::make_shared<Storage>();
    st_->value = std::move(data);
  }

  bool defined() const { return static_cast<bool>(st_); }
  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  int64_t numel() const { return shape_.numel(); }

  T* data() { return st_->value.data(); }
  const T* data() const { return st_->value.data(); }
  std::vector<T>& vec() { return st_->value; }
  const std::vector<T>& vec() const { return st_->value; }

  int64_t index(int in, int ic, int iy, int ix) const {
    return ((static_cast<int64_t>(in) * shape_.c + ic) * shape_.h + iy) * shape_.w + ix;
  }
  T& at(int in, int ic, int iy, int ix) { return st_->value[index(in, ic, iy, ix)]; }
  const T& at(int in, int ic, int iy, int ix) const {
    return st_->value[index(in, ic, iy, ix)];
  }

  bool requires_grad() const { return st_ && st_->requires_grad; }
  TensorT& set_requires_grad(bool v) {
    st_->requires_grad = v;
    if (v) st_->tracked = true;
    return *this;
  }

  // Tracked tensors participate in the tape (leaves with requires_grad and
  // every op output derived from one).
  bool tracked() const { return st_ && st_->tracked; }
  void mark_tracked() { st_->tracked = true; }

  bool has_grad() const { return st_ && !st_->grad.empty(); }
  T* grad() { return st_->grad.data(); }
  const T* grad() const { return st_->grad.data(); }
  std::vector<T>& grad_vec() { return st_->grad; }

  // Allocates (zeroed) gradient storage on first use.
  void ensure_grad() {
    if (st_->grad.empty()) st_->grad.assign(st_->value.size(), T(0));
  }
  void zero_grad() {
    if (!st_->grad.empty()) st_->grad.assign(st_->grad.size(), T(0));
  }

  bool same_storage(const TensorT& o) const { return st_ == o.st_; }

  // Deep copy (fresh storage, gradient state not copied).
  TensorT clone() const {
    TensorT out(shape_);
    out.st_->value = st_->value;
    return out;
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out(Shape{shape_.n, shape_.c, shape_.h, shape_.w});
    for (int64_t i = 0; i < numel(); ++i) out.data()[i] = static_cast<U>(data()[i]);
    return out;
  }

 private:
  struct Storage {
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    bool tracked = false;
  };

  Shape shape_;
  std::shared_ptr<Storage> st_;
};

using Tensor = TensorT<float>;

template <typename T>
TensorT<T> full(Shape s, T v) {
  return TensorT<T>(s, v);
}

template <typename T>
TensorT<T> random_uniform(Shape s, Rng& rng, T lo = T(-1), T hi = T(1)) {
  TensorT<T> t(s);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<T>(rng.uniform(static_cast<double>(lo), static_cast<double>(hi)));
  return t;
}

template <typename T>
TensorT<T> random_normal(Shape s, Rng& rng, T stddev = T(1)) {
  TensorT<T> t(s);
  for (int64_t i = 0; i < t.numel(); ++i)
    t.data()[i] = static_cast<T>(rng.normal() * static_cast<double>(stddev));
  return t;
}

}  // namespace koala

#endif  // KOALA_TENSOR_HPP
