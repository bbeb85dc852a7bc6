#pragma once

#include <filesystem>
#include <vector>

#include "framelet/tensor.hpp"

namespace framelet {

// Tensor container format "CTNS v1". Layout, all little-endian:
//   magic "CTNS" | u32 version=1 | u32 rank | u64 extents[rank] |
//   row-major float64 (re, im) pairs.
// Writing then reading returns a bit-identical tensor.
void write_ctns(const std::filesystem::path& path, const ComplexTensor& t);
ComplexTensor read_ctns(const std::filesystem::path& path);

// Flat real vectors (checkpoints) ride in the same container with zero
// imaginary parts.
void write_ctns_real(const std::filesystem::path& path, const std::vector<double>& v);
std::vector<double> read_ctns_real(const std::filesystem::path& path);

// 16-bit binary PGM (maxval 65535, big-endian samples per the format). Values
// are min-max scaled to the full range; the scaling is recorded in a JSON
// sidecar at `path + ".json"` so the original range is recoverable.
void write_pgm16(const std::filesystem::path& path, const RealTensor& image);

}  // namespace framelet
