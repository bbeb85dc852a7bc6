#pragma once

#include <cstddef>
#include <vector>

#include "framelet/tensor.hpp"

namespace framelet {

// Real-valued multi-channel filter bank, taps indexed [out][in][k1][k2].
// 1-D filters use r2 == 1.
struct FilterBank {
  std::size_t out_channels = 0;
  std::size_t in_channels = 0;
  std::size_t r1 = 1;
  std::size_t r2 = 1;
  std::vector<double> taps;

  FilterBank() = default;
  FilterBank(std::size_t out_ch, std::size_t in_ch, std::size_t k1, std::size_t k2);

  double& at(std::size_t o, std::size_t i, std::size_t a, std::size_t b) {
    return taps[((o * in_channels + i) * r1 + a) * r2 + b];
  }
  double at(std::size_t o, std::size_t i, std::size_t a, std::size_t b) const {
    return taps[((o * in_channels + i) * r1 + a) * r2 + b];
  }

  // Single-tap identity: output channel i copies input channel i.
  static FilterBank identity(std::size_t channels);
};

// Circular multi-channel filtering. The fixed convention, used everywhere in
// the library, is
//
//   Correlate:  out[o](i,j) = sum_c sum_{a,b} z[c]((i+a) mod H, (j+b) mod W) * f[o][c](a,b)
//   Convolve :  out[o](i,j) = sum_c sum_{a,b} z[c]((i-a) mod H, (j-b) mod W) * f[o][c](a,b)
//
// so that in 1-D with m=3 and taps [1,2] the Correlate matrix acting on z has
// rows [1,2,0], [0,1,2], [2,0,1] and maps [1,2,3] to [5,8,5]. Convolve is the
// adjoint wrap direction (true convolution); analysis passes use Correlate and
// synthesis passes use Convolve.
//
// Accepted input ranks: [m] (single channel 1-D), [C,m] (multi-channel 1-D),
// [C,H,W]. Output is [q_out,m] / [q_out,H,W]; a rank-1 input with q_out == 1
// stays rank-1.
enum class ConvMode { Correlate, Convolve };

template <typename T>
Tensor<T> circ_conv_mc(const Tensor<T>& z, const FilterBank& f, ConvMode mode = ConvMode::Correlate);

extern template Tensor<double> circ_conv_mc<double>(const Tensor<double>&, const FilterBank&, ConvMode);
extern template Tensor<cplx> circ_conv_mc<cplx>(const Tensor<cplx>&, const FilterBank&, ConvMode);

}  // namespace framelet
