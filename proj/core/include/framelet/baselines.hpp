#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "framelet/mri.hpp"
#include "framelet/net.hpp"
#include "framelet/rng.hpp"
#include "framelet/tensor.hpp"

namespace framelet {

// Lattice steps (r1, r2) of an undersampling mask: the unique steps such that
// every selected point outside the ACS satisfies i % r1 == 0 && j % r2 == 0
// and every such lattice point is selected. Fully sampled masks (and masks
// whose only structure is the ACS) give (1, 1); rank-1 grids report r2 = 1.
// Throws std::invalid_argument when the selection is not a lattice + ACS.
std::array<std::size_t, 2> lattice_factors(const SamplingMask& mask);

// Autocalibrated linear k-space interpolation weights.
//
// A missing position (i, j) falls in the offset class (di, dj) =
// (i mod r1, j mod r2) != (0, 0). Each class is predicted from a fixed
// constellation of k1 x k2 sampled lattice points around it: with
// a0 = (k1 - 1) / 2 and b0 = (k2 - 1) / 2, the sources sit at
//
//   (i - di + (a - a0) * r1,  j - dj + (b - b0) * r2),   a < k1, b < k2,
//
// i.e. a0 lattice steps on the negative side of the enclosing lattice point
// and the remainder on the positive side. For r1 = r2 = 2, k1 = k2 = 4 and
// class (1, 1) the constellation around the target [x] is
//
//        j-3 j-2 j-1  j  j+1 j+2 j+3
//   i-3   S   .   S   .   S   .   S
//   i-2   .   .   .   .   .   .   .
//   i-1   S   .   S   .   S   .   S
//   i     .   .   .  [x]  .   .   .
//   i+1   S   .   S   .   S   .   S
//   i+2   .   .   .   .   .   .   .
//   i+3   S   .   S   .   S   .   S
//
// Calibration slides this constellation over the ACS block only (no wrap);
// reconstruction gathers sources with circular wrap, which stays on the
// lattice because the grid extents must be divisible by the steps.
struct GrappaKernel {
  std::size_t k1 = 0, k2 = 0;  // constellation extents, in lattice steps
  std::size_t r1 = 1, r2 = 1;  // lattice steps per axis
  std::size_t n_coils = 0;
  // weights[(di, dj)]: (k1 * k2 * n_coils) x n_coils. Column = target coil,
  // row = (a * k2 + b) * n_coils + source_coil.
  std::map<std::pair<std::size_t, std::size_t>, Eigen::MatrixXcd> weights;

  bool empty() const { return weights.empty(); }
};

// Fits one weight matrix per missing-offset class by ridge least squares over
// all ACS positions of that class whose constellation lies inside the ACS.
// kspace is [n_coils][H][W] and must hold true values on the ACS (an
// undersampled tensor qualifies). A fully sampled mask yields an empty
// kernel. Throws when the constellation is degenerate (k1 or k2 == 0), the
// grid is not divisible by the lattice steps, or any class has fewer
// equations than unknowns.
GrappaKernel grappa_calibrate(const ComplexTensor& kspace, const SamplingMask& mask,
                              std::size_t k1, std::size_t k2, double ridge = 1e-9);

// Copies sampled entries through unchanged and synthesizes every missing
// entry from its constellation; the output grid is fully populated. Throws
// when the kernel does not match the mask geometry or coil count. An empty
// kernel (R = 1) returns the input unchanged.
ComplexTensor grappa_reconstruct(const ComplexTensor& kspace, const SamplingMask& mask,
                                 const GrappaKernel& kernel);

// Synthetic multi-coil scan that a lattice interpolator with kernel extents
// (k1, k2) completes exactly: sampled entries are unit-scale complex
// gaussians and every missing entry is a fixed per-class linear combination
// of its circularly wrapped source constellation. The label image is the
// inverse transform of the completed k-space, so reconstruction metrics have
// an exact ground truth. Serves as an end-to-end correctness probe for the
// calibration baselines.
Sample make_lattice_model_sample(const SamplingMask& mask, std::size_t n_coils, std::size_t k1,
                                 std::size_t k2, Seed seed);

// Scan-specific nonlinear k-space interpolation for 1-D undersampling.
//
// The sampled rows (every r1-th row) are stacked into a dense grid of
// 2 * n_coils real/imag channels and fed to a three-layer circular CNN
// (conv + ReLU, conv + ReLU, conv); output channel block (di - 1) predicts
// the missing rows of class di at each dense position. Training runs on this
// scan only: the loss is the mean squared residual over output rows whose
// target row lies inside the ACS, with the scan normalized so its maximum
// k-space magnitude is 0.015. Fixed (non-trainable) gain layers convert
// between that tiny data scale and unit-scale internal activations; without
// them the ReLU units die under any workable optimizer step size.
struct RakiConfig {
  std::size_t epochs = 300;  // one full-batch Adam step per epoch
  double lr = 3e-3;
  std::size_t hidden1 = 16;
  std::size_t hidden2 = 8;
  // Conv extents (dense rows x columns) of the first and last layer; the
  // middle layer is 1x1. Small extents generalize much better from the few
  // ACS rows a desk-scale scan provides.
  std::array<std::size_t, 2> layer1_extents = {2, 3};
  std::array<std::size_t, 2> layer3_extents = {1, 1};
  double weight_decay = 0.0;  // decoupled per-step shrinkage
  std::uint64_t seed = 0;
};

struct RakiModel {
  NetworkSpec spec;
  ParamStore params;
  std::size_t r1 = 1;      // row lattice step the net was built for
  std::size_t n_coils = 0;
  double scale = 1.0;      // training normalization factor 0.015 / max |k|
  std::vector<double> epoch_loss;  // calibration loss after each epoch
};

// Trains the scan-specific net on the ACS rows. Requires a rank-2 grid with
// a row-only (1-D) sampling pattern, r1 > 1, H divisible by r1, and at least
// one ACS row per missing class. Throws std::invalid_argument otherwise.
RakiModel raki_train(const ComplexTensor& kspace, const SamplingMask& mask,
                     const RakiConfig& config);

// Fills the missing rows with the net's predictions (denormalized), then
// copies every sampled entry through unchanged. Geometry checks mirror
// raki_train; the input is normalized with its own maximum magnitude.
ComplexTensor raki_reconstruct(const ComplexTensor& kspace, const SamplingMask& mask,
                               const RakiModel& model);

}  // namespace framelet
