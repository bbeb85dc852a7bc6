#pragma once

#include <Eigen/Dense>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "framelet/geometry.hpp"
#include "framelet/mri.hpp"
#include "framelet/net.hpp"

namespace framelet {

// Aggregation schemes over one shared backbone network T:
//   Baseline   v = T(z)
//   Bootstrap  v = sum_n w_n * T(M_n z)   (M_n = per-branch sampling masks)
//   Residual   v = w_1 * z + w_2 * T(z)
//   Iterative  v = sum_n w_n * T^n(z)
// with the weighted sums realized either by scalar attention weights (Mlp)
// or by a trainable 1x1 convolution over the concatenated branches (Conv1x1).
enum class SchemeKind { Baseline, Bootstrap, Residual, Iterative };
enum class AttentionKind { Mlp, Conv1x1 };

const char* scheme_name(SchemeKind kind);
const char* attention_name(AttentionKind kind);
SchemeKind scheme_from_name(const std::string& name);
AttentionKind attention_from_name(const std::string& name);

inline constexpr std::size_t kAttentionHidden = 64;

struct SchemeConfig {
  SchemeKind kind = SchemeKind::Baseline;
  AttentionKind attention = AttentionKind::Mlp;
  std::size_t n_branches = 1;   // bootstrap mask count / iterative depth
  double keep_ratio = 0.92;     // bootstrap: fraction of non-ACS samples kept
  bool pool_magnitude = true;   // Mlp pooling over coil magnitudes vs raw mean
};

// Backbone network plus attention parameters in one flat store. Attention
// lives in the "attention.*" slices so optimizers see a single vector.
// For Mlp the weights are sigmoid(W2 relu(W1 g + b1) + b2) with g the global
// average pool of each branch, so every weight is strictly inside (0,1);
// biases of +-746 saturate the sigmoid to exactly 1 / 0 in double precision,
// which the degenerate-reduction tests rely on.
struct SchemeModel {
  NetworkSpec net;
  SchemeConfig scheme;
  ParamStore params;
  std::vector<SamplingMask> masks;  // bootstrap branches, one per branch
  // Masks multiply the input planes directly when the model consumes raw
  // frequency data; otherwise they act through the unitary transform pair.
  bool input_is_kspace = true;
};

// Initializes backbone and attention so the initial aggregate is the plain
// branch average (output weights zero, output bias at logit(1/N); identity
// averaging taps for Conv1x1). Bootstrap models additionally need
// set_bootstrap_masks before running.
SchemeModel build_scheme_model(const NetworkSpec& net, const SchemeConfig& config, Seed seed);
void set_bootstrap_masks(SchemeModel& model, const SamplingMask& base, Seed seed);

// The linear per-branch input subsampling; self-adjoint, so it is its own
// backward map.
RealTensor apply_branch_mask(const SchemeModel& model, std::size_t branch, const RealTensor& z);

std::size_t attention_param_count(const SchemeModel& model);

// Scalar attention weights for a pooled branch vector (Mlp models only).
std::vector<double> attention_weights(const SchemeModel& model, std::span<const double> pooled);

struct SchemeForward {
  RealTensor output;
  std::vector<RealTensor> branches;  // the aggregated units, scheme order
  std::vector<double> pooled;        // Mlp pooling vector (empty for Conv1x1)
  std::vector<double> weights;       // Mlp sigmoid outputs (empty for Conv1x1)
};
SchemeForward scheme_forward(const SchemeModel& model, const RealTensor& z,
                             bool linear_relu = false);
RealTensor scheme_output(const SchemeModel& model, const RealTensor& z);

// Gradient of <upstream, output> with respect to every parameter (backbone
// and attention, accumulated into grads) and the input.
RealTensor scheme_backward(const SchemeModel& model, const RealTensor& z,
                           const RealTensor& upstream, std::vector<double>& grads);

// Two-sided factorization of the whole aggregate at z:
// output = B_tilde_at * (B_at^T [z;1]). Branch blocks sit side by side; for
// bootstrap the n-th block is the masked backbone analysis basis, for
// residual the identity block precedes the backbone block, for iterative the
// n-th block chains n-1 augmented transfer factors before the analysis side.
// Conv1x1 attention folds its channel-mixing taps into the synthesis blocks
// and appends one constant atom for its bias.
struct AggregatedBasis {
  Eigen::MatrixXd B_at;        // (input_dim + 1) x n_atoms
  Eigen::MatrixXd B_tilde_at;  // output_dim x n_atoms
  std::vector<std::size_t> branch_atoms;
  std::vector<double> weights;  // scalar weights (Mlp attention)
};
AggregatedBasis aggregated_basis(const SchemeModel& model, const RealTensor& z,
                                 std::size_t split_layer, bool linear_relu = false,
                                 std::size_t cap = kDenseCap);
Eigen::VectorXd aggregated_reconstruct(const AggregatedBasis& basis, const RealTensor& z);

// Attention parameter count under this artifact's convention: every weight
// plus one bias per hidden and output unit (Mlp: N*64*2 + 64 + N;
// Conv1x1: N*(2*n_coils)^2 + 2*n_coils). percent = 100 * params / base.
struct OverheadReport {
  std::size_t params = 0;
  double percent = 0.0;
};
OverheadReport param_overhead(AttentionKind kind, std::size_t n_branches, std::size_t n_coils,
                              std::size_t base_params);

// Concatenated backbone activation patterns at every branch input (masked
// inputs for bootstrap, successive iterates for iterative). Two inputs share
// a fingerprint exactly when every branch treats them with the same linear
// map. The attention module is excluded: its sigmoid output is not piecewise
// linear and defines no pattern.
std::vector<std::uint8_t> scheme_fingerprint(const SchemeModel& model, const RealTensor& z);

// Activation-pattern census of the aggregate over a probe cloud; adding
// branches extends every fingerprint, so it can only refine the partition.
RegionCensus scheme_census(const SchemeModel& model, std::array<std::size_t, 3> in_shape,
                           const ProbeCloud& probes);

}  // namespace framelet
