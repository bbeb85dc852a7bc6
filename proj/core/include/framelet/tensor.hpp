#pragma once

#include <cassert>
#include <cmath>
#include <complex>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace framelet {

using cplx = std::complex<double>;

std::string shape_to_string(const std::vector<std::size_t>& shape);

// Dense row-major N-dimensional array over double or complex<double>.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    if (shape_.empty()) throw std::invalid_argument("Tensor: empty shape");
    std::size_t n = 1;
    for (std::size_t e : shape_) {
      if (e == 0) throw std::invalid_argument("Tensor: zero extent in shape " + shape_to_string(shape_));
      n *= e;
    }
    strides_.assign(shape_.size(), 1);
    for (std::size_t a = shape_.size(); a-- > 1;) strides_[a - 1] = strides_[a] * shape_[a];
    data_.assign(n, T{});
  }

  Tensor(std::vector<std::size_t> shape, std::vector<T> data) : Tensor(std::move(shape)) {
    if (data.size() != data_.size())
      throw std::invalid_argument("Tensor: data length does not match shape " + shape_to_string(shape_));
    data_ = std::move(data);
  }

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }
  std::size_t stride(std::size_t axis) const { return strides_.at(axis); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t flat) { return data_[flat]; }
  const T& operator[](std::size_t flat) const { return data_[flat]; }

  template <typename... Ix>
  T& operator()(Ix... ix) {
    return data_[offset(ix...)];
  }
  template <typename... Ix>
  const T& operator()(Ix... ix) const {
    return data_[offset(ix...)];
  }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  template <typename... Ix>
  std::size_t offset(Ix... ix) const {
    assert(sizeof...(ix) == shape_.size());
    const std::size_t idx[] = {static_cast<std::size_t>(ix)...};
    std::size_t flat = 0;
    for (std::size_t a = 0; a < sizeof...(ix); ++a) {
      assert(idx[a] < shape_[a]);
      flat += idx[a] * strides_[a];
    }
    return flat;
  }

 private:
  std::vector<std::size_t> shape_;
  std::vector<std::size_t> strides_;
  std::vector<T> data_;
};

using RealTensor = Tensor<double>;
using ComplexTensor = Tensor<cplx>;

inline double abs2(double x) { return x * x; }
inline double abs2(const cplx& x) { return x.real() * x.real() + x.imag() * x.imag(); }

template <typename T>
double norm2(const Tensor<T>& t) {
  double s = 0.0;
  for (const T& v : t.storage()) s += abs2(v);
  return std::sqrt(s);
}

// Inner product, conjugate-linear in the first argument for complex tensors.
inline double dot(const RealTensor& a, const RealTensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("dot: shape mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline cplx dot(const ComplexTensor& a, const ComplexTensor& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("dot: shape mismatch");
  cplx s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += std::conj(a[i]) * b[i];
  return s;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  for (const T& v : t.storage())
    if (!std::isfinite(abs2(v))) return false;
  return true;
}

template <typename T>
double max_abs(const Tensor<T>& t) {
  double m = 0.0;
  for (const T& v : t.storage()) m = std::max(m, std::sqrt(abs2(v)));
  return m;
}

// Relative l2 distance with a guard for zero reference.
template <typename T>
double rel_error(const Tensor<T>& got, const Tensor<T>& want) {
  if (!got.same_shape(want)) throw std::invalid_argument("rel_error: shape mismatch");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < got.size(); ++i) {
    num += abs2(got[i] - want[i]);
    den += abs2(want[i]);
  }
  if (den == 0.0) return std::sqrt(num);
  return std::sqrt(num / den);
}

}  // namespace framelet
