#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "framelet/rng.hpp"
#include "framelet/tensor.hpp"

namespace framelet {

// Binary k-space selection set over a 1-D or 2-D grid, with a fully sampled
// rectangular ACS block that is always part of the selection.
struct SamplingMask {
  std::vector<std::size_t> grid;        // extents, rank 1 or 2
  std::vector<std::uint8_t> selected;   // flat row-major {0,1}, length prod(grid)
  std::vector<std::size_t> acs_offset;  // per-axis start of the ACS block
  std::vector<std::size_t> acs_extent;  // per-axis ACS size

  std::size_t total() const;
  std::size_t n_selected() const;
  // Acceleration factor R = |grid| / |selected|.
  double acceleration() const;

  bool is_selected(std::size_t flat) const { return selected[flat] != 0; }
  bool in_acs(std::size_t flat) const;

  // True when the selection pattern varies along the first axis only (every
  // grid row is taken or dropped as a whole); trivially true for 1-D grids.
  bool is_1d_pattern() const;

  // Checks the structural invariants: rank, lengths, nonempty selection,
  // ACS block inside the grid and fully selected. Throws on violation.
  void validate() const;
};

struct CoilSet {
  std::size_t n_coils = 0;
  ComplexTensor maps;  // [n_coils][H][W]
};

// One synthetic acquisition: fully sampled k-space, its mask, and the
// coil-weighted ground-truth image the k-space was generated from.
struct Sample {
  ComplexTensor full_kspace;  // [n_coils][H][W]
  SamplingMask mask;
  ComplexTensor label_image;  // [n_coils][H][W], inverse transform of full_kspace
  std::uint64_t seed = 0;
  double accel = 1.0;
};

// Sum of smooth-edged random ellipses with intensities in [0.2, 1.0], under a
// smooth low-order polynomial phase. Magnitude bounded by 2.
ComplexTensor make_phantom(std::size_t height, std::size_t width, std::size_t n_ellipses,
                           Seed seed);

// Smooth complex Gaussian-lobe sensitivity profiles, normalized per pixel so
// the coil SSoS is exactly 1.
CoilSet make_coil_maps(std::size_t height, std::size_t width, std::size_t n_coils, Seed seed);

// Uniform lattice (every accel-th index per axis) plus a centered ACS block;
// ACS offsets are floor((grid - acs) / 2).
SamplingMask make_mask(std::vector<std::size_t> grid, std::vector<std::size_t> accel,
                       std::vector<std::size_t> acs);

// Keeps entries of Lambda, zeroes the complement. Accepts tensors of the
// grid's rank or with one leading channel axis.
ComplexTensor apply_forward(const ComplexTensor& full_kspace, const SamplingMask& mask);

// N random sub-masks: each keeps the whole ACS plus round(keep_ratio * n) of
// the n non-ACS selected points. Distinct masks are enforced (with bounded
// retries) whenever keep_ratio < 1 and enough points exist.
std::vector<SamplingMask> bootstrap_masks(const SamplingMask& base, std::size_t n,
                                          double keep_ratio, Seed seed);

// Phantom + coil maps + forward transform, all derived from one seed.
Sample make_sample(std::size_t height, std::size_t width, std::size_t n_coils,
                   std::size_t n_ellipses, const SamplingMask& mask, Seed seed);

// Dataset directory layout: one `sample_%05d` directory per sample holding
// `full.ctns`, `mask.bin` and `meta.json`. The label image is reconstructed
// from full.ctns on load.
void write_mask(const std::filesystem::path& path, const SamplingMask& mask);
SamplingMask read_mask(const std::filesystem::path& path);

void save_sample(const std::filesystem::path& sample_dir, const Sample& sample);
Sample load_sample(const std::filesystem::path& sample_dir);

std::vector<std::filesystem::path> list_samples(const std::filesystem::path& dataset_dir);

struct DatasetParams {
  std::size_t n_samples = 1;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t n_coils = 4;
  std::vector<std::size_t> accel = {4, 1};
  std::vector<std::size_t> acs = {16, 64};
  std::size_t n_ellipses = 8;
  std::uint64_t seed = 0;
};

// Generates n samples under dataset_dir; sample i uses the child seed
// derive_seed(seed, i), so generation is reproducible and order-independent.
void generate_dataset(const std::filesystem::path& dataset_dir, const DatasetParams& params);

}  // namespace framelet
