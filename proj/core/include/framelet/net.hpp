#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "framelet/conv.hpp"
#include "framelet/rng.hpp"
#include "framelet/tensor.hpp"

namespace framelet {

// Fixed (non-trainable) matrix applied along the height axis of every channel
// and width position: y[c,k,w] = sum_t m[k,t] * x[c,t,w]. Used for the
// projection pooling / unpooling pairs of analysis networks.
struct HeightMatrix {
  std::size_t out_len = 0;
  std::size_t in_len = 0;
  std::vector<double> m;  // row-major out_len x in_len

  HeightMatrix() = default;
  HeightMatrix(std::size_t rows, std::size_t cols) : out_len(rows), in_len(cols), m(rows * cols, 0.0) {}
  double& at(std::size_t r, std::size_t c) { return m[r * in_len + c]; }
  double at(std::size_t r, std::size_t c) const { return m[r * in_len + c]; }
  static HeightMatrix identity(std::size_t n);
};

enum class LayerKind {
  Conv,        // circular filtering (Correlate or Convolve) + optional bias
  Relu,        // pre-activation exactly 0 counts as inactive
  AvgPool,     // 2x2 mean, halves both extents
  ZeroUnpool,  // 2x2 zero-insertion upsampling, doubles both extents
  LinearH,     // fixed matrix along the height axis (projection pool/unpool)
  AffineBn,    // trainable per-channel scale and shift; no batch statistics
  SkipEmit,    // records its input under a tag, passes it through
  SkipJoin,    // combines the running tensor with a recorded one
};

enum class SkipMode { Add, Concat };

struct LayerSpec {
  LayerKind kind{};
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  // Conv only
  std::size_t r1 = 1, r2 = 1;
  ConvMode mode = ConvMode::Correlate;
  bool bias = true;
  // LinearH only
  HeightMatrix proj;
  // SkipEmit / SkipJoin only. For Concat joins the channel order is
  // [running tensor, recorded tensor].
  std::string tag;
  SkipMode skip_mode = SkipMode::Add;
};

struct NetworkSpec {
  std::vector<LayerSpec> layers;
  std::size_t n_stages = 0;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;

  // Checks channel chaining, one emit per join tag, and concat arithmetic.
  void validate() const;
  std::size_t n_relu_layers() const;
};

struct ParamSlice {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
};

// Flat trainable-parameter table with named per-layer slices and a matching
// gradient vector.
struct ParamStore {
  std::vector<double> values;
  std::vector<double> grads;
  std::vector<ParamSlice> slices;

  std::size_t size() const { return values.size(); }
  void zero_grads() { std::fill(grads.begin(), grads.end(), 0.0); }
  std::size_t add_slice(const std::string& name, std::size_t n);
  bool has_slice(const std::string& name) const;
  const ParamSlice& slice(const std::string& name) const;
  double* slice_values(const std::string& name);
  const double* slice_values(const std::string& name) const;
};

// Fan-in-scaled uniform init (+-sqrt(6/fan_in)) for conv taps, zero biases,
// unit scales / zero shifts for affine layers. Layer i draws from the seed's
// child stream i, so adding layers never perturbs earlier ones.
ParamStore init_params(const NetworkSpec& spec, Seed seed);

// Per-ReLU-layer binary activation patterns (1 = strictly positive
// pre-activation) and the pre-activation tensors themselves.
struct ActivationTrace {
  std::vector<std::size_t> relu_layers;  // indices into NetworkSpec::layers
  std::vector<std::vector<std::uint8_t>> patterns;
  std::vector<RealTensor> pre_activations;
};

struct ForwardOptions {
  bool linear_mode = false;  // every ReLU acts as identity
  bool want_trace = false;
  // When set, ReLU layers multiply by these fixed patterns instead of
  // thresholding (trace replay).
  const ActivationTrace* fixed_patterns = nullptr;
};

struct ForwardResult {
  RealTensor output;
  ActivationTrace trace;
};

ForwardResult forward_ex(const NetworkSpec& spec, const ParamStore& params,
                         const RealTensor& input, const ForwardOptions& opts);
RealTensor forward(const NetworkSpec& spec, const ParamStore& params, const RealTensor& input);

// Reverse-mode gradients of <upstream, output>: accumulates parameter
// gradients into param_grads (which must have the store's size) and returns
// the gradient with respect to the input.
RealTensor backward(const NetworkSpec& spec, const ParamStore& params, const RealTensor& input,
                    const RealTensor& upstream, std::vector<double>& param_grads,
                    const ForwardOptions& opts = {});

// Runs the layer range [first, last) on its own. ReLU layers threshold as
// usual unless linear_relu is set (identity) or patterns is set (replay; the
// ordinal offset into the trace is derived from `first`). Joins consume
// locally recorded emits first, then skip_in; with neither present they
// throw. All emits recorded inside the range are exported through emit_out
// when it is non-null.
struct SegmentOptions {
  std::size_t first = 0;
  std::size_t last = static_cast<std::size_t>(-1);  // clamped to layer count
  bool linear_relu = false;
  const ActivationTrace* patterns = nullptr;
  const std::map<std::string, RealTensor>* skip_in = nullptr;
  std::map<std::string, RealTensor>* emit_out = nullptr;
};
RealTensor run_segment(const NetworkSpec& spec, const ParamStore& params, const RealTensor& input,
                       const SegmentOptions& opts);

// Shape flow for a given input size; throws where extents stop matching
// (odd extents at a pool, height mismatches at a projection, skip shape
// conflicts). Index i holds the shapes around spec.layers[i].
struct LayerShapes {
  std::vector<std::array<std::size_t, 3>> in;   // (C, H, W)
  std::vector<std::array<std::size_t, 3>> out;  // (C, H, W)
};
LayerShapes compute_shapes(const NetworkSpec& spec, std::size_t height, std::size_t width);

// Scaled-down U-Net: per stage three (conv3x3 -> optional affine -> ReLU)
// blocks with channel doubling, 2x2 average pooling between encoder stages,
// decoder deconvolution as 3x3 filtering followed by zero-insertion
// unpooling, concat skips across matching stages, and a final 1x1 conv back
// to 2*n_coils channels. Input is the [re..., im...] channel stack.
NetworkSpec build_unet(std::size_t stages, std::size_t base_channels, std::size_t n_coils,
                       bool batchnorm = true);

// Channel order [re_1..re_Nc, im_1..im_Nc]; round trips are bit-exact.
RealTensor complex_to_channels(const ComplexTensor& x);
ComplexTensor channels_to_complex(const RealTensor& x);

// Plain-text layer list (one "layer ..." line per layer; LinearH matrices
// inline). network_from_text inverts network_to_text.
std::string network_to_text(const NetworkSpec& spec);
NetworkSpec network_from_text(const std::string& text);

// Checkpoint = flat parameter vector in a CTNS container at `path` plus a
// JSON manifest at `path.json` holding the network text, the slice layout,
// and a caller-supplied extra JSON object (scheme settings and the like).
struct Checkpoint {
  NetworkSpec net;
  ParamStore params;
  std::string extra_json;
};
void save_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec,
                     const ParamStore& params, const std::string& extra_json = "{}");
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace framelet
