#include "framelet/fft.hpp"

#include <cmath>
#include <stdexcept>

namespace framelet {

namespace detail {

double fft_normalization_tweak = 1.0;

namespace {

constexpr double kPi = 3.14159265358979323846;

bool is_pow2(std::size_t n) { return n != 0 && (n & (n - 1)) == 0; }

std::size_t next_pow2(std::size_t n) {
  std::size_t p = 1;
  while (p < n) p <<= 1;
  return p;
}

// In-place iterative Cooley-Tukey, n a power of two, unnormalized.
void fft_pow2(std::vector<cplx>& a, bool inverse) {
  const std::size_t n = a.size();
  for (std::size_t i = 1, j = 0; i < n; ++i) {
    std::size_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (std::size_t len = 2; len <= n; len <<= 1) {
    const double ang = (inverse ? 2.0 : -2.0) * kPi / static_cast<double>(len);
    const cplx wlen(std::cos(ang), std::sin(ang));
    for (std::size_t i = 0; i < n; i += len) {
      cplx w(1.0, 0.0);
      for (std::size_t k = 0; k < len / 2; ++k) {
        const cplx u = a[i + k];
        const cplx v = a[i + k + len / 2] * w;
        a[i + k] = u + v;
        a[i + k + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

// Bluestein chirp-z for arbitrary n, forward unnormalized. The chirp angle
// uses k*k mod 2n so large indices keep full precision.
void bluestein_forward(std::vector<cplx>& a) {
  const std::size_t n = a.size();
  std::vector<cplx> chirp(n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t sq = (k * k) % (2 * n);
    const double ang = -kPi * static_cast<double>(sq) / static_cast<double>(n);
    chirp[k] = cplx(std::cos(ang), std::sin(ang));
  }
  const std::size_t m = next_pow2(2 * n - 1);
  std::vector<cplx> fa(m, cplx(0.0, 0.0)), fb(m, cplx(0.0, 0.0));
  for (std::size_t k = 0; k < n; ++k) fa[k] = a[k] * chirp[k];
  fb[0] = std::conj(chirp[0]);
  for (std::size_t k = 1; k < n; ++k) fb[k] = fb[m - k] = std::conj(chirp[k]);
  fft_pow2(fa, false);
  fft_pow2(fb, false);
  for (std::size_t k = 0; k < m; ++k) fa[k] *= fb[k];
  fft_pow2(fa, true);
  const double inv_m = 1.0 / static_cast<double>(m);
  for (std::size_t k = 0; k < n; ++k) a[k] = fa[k] * inv_m * chirp[k];
}

}  // namespace

void fft_any(std::vector<cplx>& a, bool inverse) {
  if (a.size() <= 1) return;
  if (is_pow2(a.size())) {
    fft_pow2(a, inverse);
    return;
  }
  if (inverse) {
    for (auto& v : a) v = std::conj(v);
    bluestein_forward(a);
    for (auto& v : a) v = std::conj(v);
  } else {
    bluestein_forward(a);
  }
}

}  // namespace detail

namespace {

// Applies the unnormalized 1-D transform along `axis` of x, in place.
void transform_axis(ComplexTensor& x, std::size_t axis, bool inverse) {
  const std::size_t n = x.extent(axis);
  const std::size_t stride = x.stride(axis);
  const std::size_t total = x.size();
  const std::size_t block = stride * n;
  std::vector<cplx> line(n);
  for (std::size_t base = 0; base < total; base += block) {
    for (std::size_t off = 0; off < stride; ++off) {
      cplx* p = x.data() + base + off;
      for (std::size_t k = 0; k < n; ++k) line[k] = p[k * stride];
      detail::fft_any(line, inverse);
      for (std::size_t k = 0; k < n; ++k) p[k * stride] = line[k];
    }
  }
}

ComplexTensor transform2(const ComplexTensor& x, std::pair<std::size_t, std::size_t> axes,
                         bool inverse) {
  if (axes.first >= x.rank() || axes.second >= x.rank())
    throw std::invalid_argument("fft2: axis out of range for shape " + shape_to_string(x.shape()));
  if (axes.first == axes.second) throw std::invalid_argument("fft2: axes must be distinct");
  ComplexTensor out = x;
  transform_axis(out, axes.first, inverse);
  transform_axis(out, axes.second, inverse);
  const double n = static_cast<double>(x.extent(axes.first)) * static_cast<double>(x.extent(axes.second));
  const double scale = detail::fft_normalization_tweak / std::sqrt(n);
  for (auto& v : out.storage()) v *= scale;
  return out;
}

std::pair<std::size_t, std::size_t> last_two_axes(const ComplexTensor& x) {
  if (x.rank() < 2) throw std::invalid_argument("fft2: rank must be >= 2 to pick default axes");
  return {x.rank() - 2, x.rank() - 1};
}

}  // namespace

ComplexTensor fft2(const ComplexTensor& x, std::pair<std::size_t, std::size_t> axes) {
  return transform2(x, axes, false);
}

ComplexTensor ifft2(const ComplexTensor& x, std::pair<std::size_t, std::size_t> axes) {
  return transform2(x, axes, true);
}

ComplexTensor fft2(const ComplexTensor& x) { return fft2(x, last_two_axes(x)); }

ComplexTensor ifft2(const ComplexTensor& x) { return ifft2(x, last_two_axes(x)); }

}  // namespace framelet
