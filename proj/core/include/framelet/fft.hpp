#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "framelet/tensor.hpp"

namespace framelet {

// Unitary 2-D DFT over the two given axes (1/sqrt(N) scaling per axis).
// Radix-2 for power-of-two extents, Bluestein otherwise, so any extent works.
ComplexTensor fft2(const ComplexTensor& x, std::pair<std::size_t, std::size_t> axes);
ComplexTensor ifft2(const ComplexTensor& x, std::pair<std::size_t, std::size_t> axes);

// Convenience: transform the last two axes (rank must be >= 2).
ComplexTensor fft2(const ComplexTensor& x);
ComplexTensor ifft2(const ComplexTensor& x);

namespace detail {

// Unnormalized length-n transform of a contiguous vector:
//   forward: X[k] = sum_j x[j] exp(-2*pi*i*j*k/n)
//   inverse: X[k] = sum_j x[j] exp(+2*pi*i*j*k/n)   (no 1/n factor)
void fft_any(std::vector<cplx>& a, bool inverse);

// Multiplies the unitary normalization; selftest flips it away from 1.0 as a
// negative control for the norm-preservation check. Leave at 1.0 otherwise.
extern double fft_normalization_tweak;

}  // namespace detail

}  // namespace framelet
