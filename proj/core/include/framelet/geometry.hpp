#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "framelet/net.hpp"
#include "framelet/rng.hpp"

namespace framelet {

// Dense materialization keeps the analysis exact but is quadratic in the
// signal size, so every op below refuses dimensions past this cap.
inline constexpr std::size_t kDenseCap = 4096;

// One layer as an explicit affine map on flattened [C][H][W] vectors:
// y = op * x + bias. Only defined for the linear layer kinds.
struct LayerMatrix {
  Eigen::MatrixXd op;
  Eigen::VectorXd bias;
  // [[op, bias], [0, 1]] acting on [x; 1].
  Eigen::MatrixXd augmented() const;
};
LayerMatrix layer_matrices(const NetworkSpec& spec, const ParamStore& params, std::size_t layer,
                           std::size_t height, std::size_t width, std::size_t cap = kDenseCap);

// Affine map of the layer range [first, last) under a fixed activation
// trace: y = main * x + skip * chi + offset. chi stacks the signals of skip
// tags joined inside the range but emitted before it (column blocks ordered
// by emit layer, widths in skip_cols). y stacks the segment output followed
// by the signals emitted inside the range whose joins lie at or past `last`
// (row blocks ordered by emit layer, heights in emit_rows). height/width
// are the extents of the *network* input, from which all per-layer shapes
// follow.
struct AffineSegment {
  Eigen::MatrixXd main;
  Eigen::MatrixXd skip;
  Eigen::VectorXd offset;
  std::vector<std::string> skip_tags;
  std::vector<std::size_t> skip_cols;
  std::vector<std::string> emit_tags;
  std::vector<std::size_t> emit_rows;
  std::array<std::size_t, 3> in_shape{};
  std::array<std::size_t, 3> out_shape{};  // the leading output block
};
AffineSegment materialize_segment(const NetworkSpec& spec, const ParamStore& params,
                                  std::size_t first, std::size_t last,
                                  std::size_t height, std::size_t width,
                                  const ActivationTrace* patterns, bool linear_relu,
                                  std::size_t cap = kDenseCap);

// Two-sided basis factorization of a network around split_layer: columns of
// B analyze the (bias-augmented) input, columns of B_tilde synthesize the
// output, and sum_i <b_i, [z;1]> b_tilde_i reproduces the forward pass. The
// analysis side covers layers [0, split_layer) plus every skip signal that
// crosses the split; the synthesis side starts at split_layer (for a ReLU
// split layer its pattern becomes part of the synthesis factor). The factors
// are taken at z's activation pattern; with linear_relu every ReLU passes
// through as identity instead and z matters only through its extents.
struct BasisDecomposition {
  Eigen::MatrixXd B;        // (input_dim + 1) x n_atoms, last row = constant
  Eigen::MatrixXd B_tilde;  // output_dim x n_atoms
  ActivationTrace pattern;
  std::vector<std::string> skip_tags;
  std::vector<std::size_t> atom_blocks;  // [split dim, skip dims..., 1]
};
BasisDecomposition extract_basis(const NetworkSpec& spec, const ParamStore& params,
                                 const RealTensor& z, std::size_t split_layer,
                                 bool linear_relu = false, std::size_t cap = kDenseCap);
Eigen::VectorXd basis_reconstruct(const BasisDecomposition& basis, const RealTensor& z);

// Single-level full Haar transform: orthogonal m x m, pairwise averages in
// the top half and pairwise differences in the bottom half. m must be even.
Eigen::MatrixXd haar_matrix(std::size_t m);

// Filters for one analysis/synthesis level. psi rows are indexed (channel,
// tap), columns by output channel; psi * psi_tilde^T = c I with c = 1/(r a)
// or 1/(r (a+1)) when the level carries a skip branch. phi = phi_tilde =
// sqrt(a) * haar, so phi_tilde * phi^T = a I exactly.
struct FrameLevel {
  Eigen::MatrixXd psi, psi_tilde;  // (r*q_in) x q_out
  Eigen::MatrixXd phi, phi_tilde;  // m x m
  double alpha = 1.0;
  double c = 0.0;
  std::size_t q_in = 0, q_out = 0, r = 0, m = 0;
  bool skip = false;
};
FrameLevel build_frame_filters(std::size_t q_in, std::size_t q_out, std::size_t r, std::size_t m,
                               double alpha, bool skip, Seed seed);

struct FrameReport {
  struct Level {
    double psi_residual = 0.0;  // ||psi psi_tilde^T - c I||_F
    double phi_residual = 0.0;  // ||phi_tilde phi^T - alpha I||_F
  };
  std::vector<Level> levels;
  double alpha = 0.0;
  double tol = 0.0;
  bool pass = false;
};
FrameReport frame_report(std::span<const FrameLevel> levels, double tol = 1e-12);
std::string frame_report_to_json(const FrameReport& report);

// Symmetric analysis/synthesis chain over 1-D signals [q_0][m][1]: per level
// filter -> (skip branch) -> projection, mirrored on the way back, with the
// synthesis filters applied in Convolve mode (the adjoint pairing). With
// relu=true every level boundary except the final output gets a ReLU and
// split_layer names the innermost one; without it the network is linear and
// reconstructs its input perfectly when built from frame filters.
struct FrameNet {
  NetworkSpec spec;
  ParamStore params;
  std::size_t split_layer = 0;
};
FrameNet build_frame_net(std::span<const FrameLevel> levels, bool relu);

struct PrReport {
  double max_rel_error = 0.0;
  std::size_t n_probes = 0;
  bool pass = false;
};
PrReport check_perfect_reconstruction(const NetworkSpec& spec, const ParamStore& params,
                                      std::size_t height, std::size_t width,
                                      std::size_t n_probes = 50, Seed seed = Seed{0});

// Per-neuron hyperplane data at a ReLU layer, expressed against the
// unconstrained (pre-ReLU) feature of the previous ReLU layer, or against
// the network input when none precedes. Coordinates of the previous layer's
// inactive neurons are exactly zero in every effective normal; a neuron
// whose normal vanishes entirely is flagged degenerate and reports distance
// zero.
struct HyperplaneReport {
  std::size_t layer = 0;
  std::size_t prev_relu_layer = 0;  // npos when the reference is the input
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::vector<std::uint8_t> prev_pattern;
  Eigen::MatrixXd normals;  // one row per neuron
  Eigen::VectorXd offsets;
  Eigen::VectorXd pre_activation;
  Eigen::VectorXd activation;
  Eigen::VectorXd norm;
  Eigen::VectorXd distance;  // pre_activation / norm, 0 when degenerate
  std::vector<std::uint8_t> degenerate;
};
HyperplaneReport hyperplane_report(const NetworkSpec& spec, const ParamStore& params,
                                   const RealTensor& z, std::size_t relu_layer,
                                   std::size_t cap = kDenseCap);
void write_hyperplane_csv(const std::filesystem::path& path, const HyperplaneReport& report);

// The synthesis map that consumes a ReLU layer's output, together with the
// column subset its activation pattern retains: the layer output equals
// D[:, selected] * xi[selected] (+ skip columns + offset).
struct DecoderFrameSubset {
  std::size_t layer = 0;
  Eigen::MatrixXd synthesis;       // all columns
  Eigen::MatrixXd skip_synthesis;  // columns for signals joined in range
  Eigen::VectorXd offset;
  Eigen::VectorXd xi;  // pre-activations feeding the ReLU
  std::vector<std::size_t> selected;
  double ratio = 0.0;
  double reconstruction_error = 0.0;
  std::vector<std::string> skip_tags;
};
DecoderFrameSubset decoder_frame_subset(const NetworkSpec& spec, const ParamStore& params,
                                        const RealTensor& z, std::size_t relu_layer,
                                        std::size_t cap = kDenseCap);

// Activation-pattern census over a probe set. For several networks the
// fingerprint concatenates every constituent's pattern, so the distinct
// count can only grow when networks are added.
struct ProbeGrid {
  double lo = -1.0, hi = 1.0;
  std::size_t n = 0;  // points per axis, n^dim probes
};
struct ProbeCloud {
  std::size_t count = 0;
  Seed seed{0};
  double scale = 1.0;
};
struct NetView {
  const NetworkSpec* spec = nullptr;
  const ParamStore* params = nullptr;
};
struct RegionCensus {
  std::string probe_desc;
  std::size_t n_probes = 0;
  std::size_t n_distinct = 0;
  std::size_t n_neurons = 0;
  double pattern_bound = 0.0;  // min(n_probes, 2^n_neurons)
};
RegionCensus region_census(std::span<const NetView> nets, std::array<std::size_t, 3> in_shape,
                           const ProbeGrid& grid);
RegionCensus region_census(std::span<const NetView> nets, std::array<std::size_t, 3> in_shape,
                           const ProbeCloud& cloud);
std::string census_to_json(const RegionCensus& census);

}  // namespace framelet
