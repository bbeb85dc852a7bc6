#include "framelet/conv.hpp"

#include <stdexcept>

namespace framelet {

FilterBank::FilterBank(std::size_t out_ch, std::size_t in_ch, std::size_t k1, std::size_t k2)
    : out_channels(out_ch), in_channels(in_ch), r1(k1), r2(k2) {
  if (out_ch == 0 || in_ch == 0 || k1 == 0 || k2 == 0)
    throw std::invalid_argument("FilterBank: all extents must be >= 1");
  taps.assign(out_ch * in_ch * k1 * k2, 0.0);
}

FilterBank FilterBank::identity(std::size_t channels) {
  FilterBank f(channels, channels, 1, 1);
  for (std::size_t c = 0; c < channels; ++c) f.at(c, c, 0, 0) = 1.0;
  return f;
}

namespace {

// out_row[j] += w * z_row[(j + shift) mod W], wrap handled by a split loop.
template <typename T>
void axpy_shifted(double w, const T* zrow, std::size_t width, std::size_t shift, T* orow) {
  const std::size_t split = width - shift;
  for (std::size_t j = 0; j < split; ++j) orow[j] += w * zrow[j + shift];
  for (std::size_t j = split; j < width; ++j) orow[j] += w * zrow[j + shift - width];
}

}  // namespace

template <typename T>
Tensor<T> circ_conv_mc(const Tensor<T>& z, const FilterBank& f, ConvMode mode) {
  std::size_t channels, height, width;
  if (z.rank() == 1) {
    channels = 1;
    height = z.extent(0);
    width = 1;
  } else if (z.rank() == 2) {
    channels = z.extent(0);
    height = z.extent(1);
    width = 1;
  } else if (z.rank() == 3) {
    channels = z.extent(0);
    height = z.extent(1);
    width = z.extent(2);
  } else {
    throw std::invalid_argument("circ_conv_mc: rank must be 1, 2 or 3, got shape " +
                                shape_to_string(z.shape()));
  }
  if (channels != f.in_channels)
    throw std::invalid_argument("circ_conv_mc: input has " + std::to_string(channels) +
                                " channels but filter expects " + std::to_string(f.in_channels));
  std::vector<std::size_t> out_shape;
  if (z.rank() == 1 && f.out_channels == 1)
    out_shape = {height};
  else if (z.rank() <= 2)
    out_shape = {f.out_channels, height};
  else
    out_shape = {f.out_channels, height, width};
  Tensor<T> out(out_shape);

  const std::size_t plane = height * width;
  for (std::size_t o = 0; o < f.out_channels; ++o) {
    T* op = out.data() + o * plane;
    for (std::size_t c = 0; c < channels; ++c) {
      const T* zp = z.data() + c * plane;
      // Filters longer than the signal wrap around, so shifts are reduced modulo
      // the extent before the split loops.
      for (std::size_t a = 0; a < f.r1; ++a) {
        const std::size_t sa = mode == ConvMode::Correlate ? a % height : (height - a % height) % height;
        for (std::size_t b = 0; b < f.r2; ++b) {
          const double w = f.at(o, c, a, b);
          if (w == 0.0) continue;
          const std::size_t sb = mode == ConvMode::Correlate ? b % width : (width - b % width) % width;
          for (std::size_t i = 0; i < height; ++i) {
            const std::size_t zi = i + sa < height ? i + sa : i + sa - height;
            axpy_shifted(w, zp + zi * width, width, sb, op + i * width);
          }
        }
      }
    }
  }
  return out;
}

template Tensor<double> circ_conv_mc<double>(const Tensor<double>&, const FilterBank&, ConvMode);
template Tensor<cplx> circ_conv_mc<cplx>(const Tensor<cplx>&, const FilterBank&, ConvMode);

}  // namespace framelet
