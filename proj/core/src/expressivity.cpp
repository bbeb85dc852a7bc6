#include "framelet/expressivity.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

#include "framelet/fft.hpp"

namespace framelet {

namespace {

constexpr std::uint64_t kAttentionStream = 0xA77E4710ull;

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Eigen::VectorXd flatten(const RealTensor& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
}

void add_into(RealTensor& acc, const RealTensor& t) {
  if (!acc.same_shape(t)) throw std::logic_error("scheme: branch shape drifted");
  for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += t[k];
}

std::size_t effective_branches(const SchemeConfig& config) {
  switch (config.kind) {
    case SchemeKind::Baseline: return 1;
    case SchemeKind::Residual: return 2;
    case SchemeKind::Bootstrap:
    case SchemeKind::Iterative: return config.n_branches;
  }
  return 1;
}

// Mean of all entries, or of the per-coil magnitudes when configured.
double branch_pool(const SchemeModel& model, const RealTensor& t) {
  if (!model.scheme.pool_magnitude) {
    double s = 0.0;
    for (double v : t.storage()) s += v;
    return s / t.size();
  }
  const std::size_t channels = t.extent(0);
  if (channels % 2 != 0)
    throw std::invalid_argument("attention pooling: magnitude mode needs re/im channel pairs");
  const std::size_t n_coils = channels / 2;
  const std::size_t plane = t.extent(1) * t.extent(2);
  double s = 0.0;
  for (std::size_t c = 0; c < n_coils; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      const double re = t[c * plane + p];
      const double im = t[(n_coils + c) * plane + p];
      s += std::sqrt(re * re + im * im);
    }
  return s / (n_coils * plane);
}

// d(pool)/d(tensor) scaled by the upstream scalar.
RealTensor branch_pool_backward(const SchemeModel& model, const RealTensor& t, double upstream) {
  RealTensor g(t.shape());
  if (!model.scheme.pool_magnitude) {
    const double d = upstream / t.size();
    for (double& v : g.storage()) v = d;
    return g;
  }
  const std::size_t n_coils = t.extent(0) / 2;
  const std::size_t plane = t.extent(1) * t.extent(2);
  const double d = upstream / (n_coils * plane);
  for (std::size_t c = 0; c < n_coils; ++c)
    for (std::size_t p = 0; p < plane; ++p) {
      const double re = t[c * plane + p];
      const double im = t[(n_coils + c) * plane + p];
      const double mag = std::sqrt(re * re + im * im);
      if (mag > 0.0) {
        g[c * plane + p] = d * re / mag;
        g[(n_coils + c) * plane + p] = d * im / mag;
      }
    }
  return g;
}

struct MlpState {
  std::vector<double> g, a1, h, w;
};

MlpState run_mlp(const SchemeModel& model, std::span<const double> pooled) {
  const std::size_t n = effective_branches(model.scheme);
  if (pooled.size() != n)
    throw std::invalid_argument("attention: pooled vector has wrong branch count");
  const double* w1 = model.params.slice_values("attention.w1");
  const double* b1 = model.params.slice_values("attention.b1");
  const double* w2 = model.params.slice_values("attention.w2");
  const double* b2 = model.params.slice_values("attention.b2");

  MlpState s;
  s.g.assign(pooled.begin(), pooled.end());
  s.a1.resize(kAttentionHidden);
  s.h.resize(kAttentionHidden);
  for (std::size_t j = 0; j < kAttentionHidden; ++j) {
    double a = b1[j];
    for (std::size_t k = 0; k < n; ++k) a += w1[j * n + k] * s.g[k];
    s.a1[j] = a;
    s.h[j] = a > 0.0 ? a : 0.0;
  }
  s.w.resize(n);
  for (std::size_t k = 0; k < n; ++k) {
    double a = b2[k];
    for (std::size_t j = 0; j < kAttentionHidden; ++j) a += w2[k * kAttentionHidden + j] * s.h[j];
    s.w[k] = stable_sigmoid(a);
  }
  return s;
}

// Accumulates attention-parameter gradients for d<loss>/dw and returns
// d<loss>/d(pooled).
std::vector<double> mlp_backward(const SchemeModel& model, const MlpState& s,
                                 std::span<const double> dw, std::vector<double>& grads) {
  const std::size_t n = s.w.size();
  const ParamStore& p = model.params;
  double* dw1 = grads.data() + p.slice("attention.w1").offset;
  double* db1 = grads.data() + p.slice("attention.b1").offset;
  double* dw2 = grads.data() + p.slice("attention.w2").offset;
  double* db2 = grads.data() + p.slice("attention.b2").offset;
  const double* w2 = p.slice_values("attention.w2");
  const double* w1 = p.slice_values("attention.w1");

  std::vector<double> da2(n), dh(kAttentionHidden, 0.0), dg(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    da2[k] = dw[k] * s.w[k] * (1.0 - s.w[k]);
    db2[k] += da2[k];
    for (std::size_t j = 0; j < kAttentionHidden; ++j) {
      dw2[k * kAttentionHidden + j] += da2[k] * s.h[j];
      dh[j] += w2[k * kAttentionHidden + j] * da2[k];
    }
  }
  for (std::size_t j = 0; j < kAttentionHidden; ++j) {
    const double da1 = s.a1[j] > 0.0 ? dh[j] : 0.0;
    db1[j] += da1;
    for (std::size_t k = 0; k < n; ++k) {
      dw1[j * n + k] += da1 * s.g[k];
      dg[k] += w1[j * n + k] * da1;
    }
  }
  return dg;
}

void check_branch_shapes(const std::vector<RealTensor>& branches) {
  for (std::size_t n = 1; n < branches.size(); ++n)
    if (!branches[n].same_shape(branches[0]))
      throw std::invalid_argument("attention: branch outputs disagree in shape");
}

RealTensor conv_attention(const SchemeModel& model, const std::vector<RealTensor>& branches) {
  check_branch_shapes(branches);
  const std::size_t n = branches.size();
  const std::size_t channels = model.net.out_channels;
  if (branches[0].extent(0) != channels)
    throw std::invalid_argument("attention: branch channel count mismatch");
  const std::size_t plane = branches[0].extent(1) * branches[0].extent(2);
  const double* taps = model.params.slice_values("attention.taps");
  const double* bias = model.params.slice_values("attention.bias");

  RealTensor out({channels, branches[0].extent(1), branches[0].extent(2)});
  for (std::size_t o = 0; o < channels; ++o) {
    for (std::size_t p = 0; p < plane; ++p) out[o * plane + p] = bias[o];
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t c = 0; c < channels; ++c) {
        const double w = taps[(o * n + k) * channels + c];
        if (w == 0.0) continue;
        const double* src = branches[k].data() + c * plane;
        double* dst = out.data() + o * plane;
        for (std::size_t p = 0; p < plane; ++p) dst[p] += w * src[p];
      }
  }
  return out;
}

std::vector<RealTensor> conv_attention_backward(const SchemeModel& model,
                                                const std::vector<RealTensor>& branches,
                                                const RealTensor& upstream,
                                                std::vector<double>& grads) {
  const std::size_t n = branches.size();
  const std::size_t channels = model.net.out_channels;
  const std::size_t plane = branches[0].extent(1) * branches[0].extent(2);
  const double* taps = model.params.slice_values("attention.taps");
  double* dtaps = grads.data() + model.params.slice("attention.taps").offset;
  double* dbias = grads.data() + model.params.slice("attention.bias").offset;

  std::vector<RealTensor> dbranch;
  dbranch.reserve(n);
  for (std::size_t k = 0; k < n; ++k) dbranch.emplace_back(branches[k].shape());
  for (std::size_t o = 0; o < channels; ++o) {
    const double* u = upstream.data() + o * plane;
    for (std::size_t p = 0; p < plane; ++p) dbias[o] += u[p];
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t c = 0; c < channels; ++c) {
        const double w = taps[(o * n + k) * channels + c];
        const double* src = branches[k].data() + c * plane;
        double* dst = dbranch[k].data() + c * plane;
        double acc = 0.0;
        for (std::size_t p = 0; p < plane; ++p) {
          acc += u[p] * src[p];
          dst[p] += w * u[p];
        }
        dtaps[(o * n + k) * channels + c] += acc;
      }
  }
  return dbranch;
}

void require_masks(const SchemeModel& model) {
  if (model.masks.size() != effective_branches(model.scheme))
    throw std::runtime_error("bootstrap: masks not set (call set_bootstrap_masks)");
}

// Channel-mixing block of the 1x1 attention for one branch, applied to the
// rows of a flattened [C][H][W] matrix.
Eigen::MatrixXd conv_mix_rows(const SchemeModel& model, std::size_t branch,
                              const Eigen::MatrixXd& m, std::size_t plane) {
  const std::size_t channels = model.net.out_channels;
  const std::size_t n = effective_branches(model.scheme);
  const double* taps = model.params.slice_values("attention.taps");
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(m.rows(), m.cols());
  for (std::size_t o = 0; o < channels; ++o)
    for (std::size_t c = 0; c < channels; ++c) {
      const double w = taps[(o * n + branch) * channels + c];
      if (w == 0.0) continue;
      out.middleRows(o * plane, plane) += w * m.middleRows(c * plane, plane);
    }
  return out;
}

}  // namespace

const char* scheme_name(SchemeKind kind) {
  switch (kind) {
    case SchemeKind::Baseline: return "baseline";
    case SchemeKind::Bootstrap: return "bootstrap";
    case SchemeKind::Residual: return "residual";
    case SchemeKind::Iterative: return "iterative";
  }
  return "?";
}

const char* attention_name(AttentionKind kind) {
  return kind == AttentionKind::Mlp ? "mlp" : "conv1x1";
}

SchemeKind scheme_from_name(const std::string& name) {
  for (SchemeKind k : {SchemeKind::Baseline, SchemeKind::Bootstrap, SchemeKind::Residual,
                       SchemeKind::Iterative})
    if (name == scheme_name(k)) return k;
  throw std::invalid_argument("unknown scheme: " + name);
}

AttentionKind attention_from_name(const std::string& name) {
  for (AttentionKind k : {AttentionKind::Mlp, AttentionKind::Conv1x1})
    if (name == attention_name(k)) return k;
  throw std::invalid_argument("unknown attention kind: " + name);
}

SchemeModel build_scheme_model(const NetworkSpec& net, const SchemeConfig& config, Seed seed) {
  net.validate();
  SchemeModel model;
  model.net = net;
  model.scheme = config;
  model.scheme.n_branches = effective_branches(config);
  const std::size_t n = model.scheme.n_branches;
  if (n == 0) throw std::invalid_argument("scheme: need at least one branch");
  if (config.kind == SchemeKind::Bootstrap &&
      !(config.keep_ratio > 0.0 && config.keep_ratio <= 1.0))
    throw std::invalid_argument("scheme: keep_ratio must lie in (0, 1]");
  if ((config.kind == SchemeKind::Residual || config.kind == SchemeKind::Iterative) &&
      net.in_channels != net.out_channels)
    throw std::invalid_argument(std::string(scheme_name(config.kind)) +
                                " scheme needs matching input/output channels");

  model.params = init_params(net, seed);
  if (config.kind == SchemeKind::Baseline) return model;

  Rng rng(Seed{derive_seed(seed.value, kAttentionStream)});
  if (model.scheme.attention == AttentionKind::Mlp) {
    model.params.add_slice("attention.w1", kAttentionHidden * n);
    model.params.add_slice("attention.b1", kAttentionHidden);
    model.params.add_slice("attention.w2", n * kAttentionHidden);
    model.params.add_slice("attention.b2", n);
    double* w1 = model.params.slice_values("attention.w1");
    const double bound = std::sqrt(6.0 / n);
    for (std::size_t k = 0; k < kAttentionHidden * n; ++k) w1[k] = rng.uniform(-bound, bound);
    // Zero output weights with bias at logit(1/N): the initial aggregate is
    // the exact branch average, independent of the pooled values.
    const double p0 = 1.0 / std::max<std::size_t>(n, 2);
    double* b2 = model.params.slice_values("attention.b2");
    for (std::size_t k = 0; k < n; ++k) b2[k] = std::log(p0 / (1.0 - p0));
  } else {
    const std::size_t channels = net.out_channels;
    model.params.add_slice("attention.taps", channels * n * channels);
    model.params.add_slice("attention.bias", channels);
    double* taps = model.params.slice_values("attention.taps");
    for (std::size_t o = 0; o < channels; ++o)
      for (std::size_t k = 0; k < n; ++k) taps[(o * n + k) * channels + o] = 1.0 / n;
  }
  return model;
}

void set_bootstrap_masks(SchemeModel& model, const SamplingMask& base, Seed seed) {
  if (model.scheme.kind != SchemeKind::Bootstrap)
    throw std::invalid_argument("set_bootstrap_masks: not a bootstrap model");
  model.masks = bootstrap_masks(base, model.scheme.n_branches, model.scheme.keep_ratio, seed);
}

RealTensor apply_branch_mask(const SchemeModel& model, std::size_t branch, const RealTensor& z) {
  require_masks(model);
  if (branch >= model.masks.size())
    throw std::invalid_argument("apply_branch_mask: branch out of range");
  if (z.rank() != 3) throw std::invalid_argument("apply_branch_mask: need [C][H][W] input");
  const SamplingMask& mask = model.masks[branch];
  const bool row_mask = mask.grid.size() == 1;
  if (row_mask ? mask.grid[0] != z.extent(1)
               : (mask.grid[0] != z.extent(1) || mask.grid[1] != z.extent(2)))
    throw std::invalid_argument("apply_branch_mask: mask grid does not match input extents");

  if (!model.input_is_kspace) {
    // Subsample in the transform domain; the round trip is linear and, with
    // a unitary transform and real diagonal mask, exactly self-adjoint.
    const ComplexTensor k = fft2(channels_to_complex(z));
    return complex_to_channels(ifft2(apply_forward(k, mask)));
  }
  RealTensor out = z;
  const std::size_t h = z.extent(1), w = z.extent(2);
  for (std::size_t c = 0; c < z.extent(0); ++c)
    for (std::size_t i = 0; i < h; ++i) {
      if (row_mask) {
        if (!mask.is_selected(i))
          for (std::size_t j = 0; j < w; ++j) out(c, i, j) = 0.0;
        continue;
      }
      for (std::size_t j = 0; j < w; ++j)
        if (!mask.is_selected(i * w + j)) out(c, i, j) = 0.0;
    }
  return out;
}

std::size_t attention_param_count(const SchemeModel& model) {
  std::size_t n = 0;
  for (const ParamSlice& s : model.params.slices)
    if (s.name.starts_with("attention.")) n += s.size;
  return n;
}

std::vector<double> attention_weights(const SchemeModel& model, std::span<const double> pooled) {
  if (model.scheme.kind == SchemeKind::Baseline ||
      model.scheme.attention != AttentionKind::Mlp)
    throw std::invalid_argument("attention_weights: model has no MLP attention");
  return run_mlp(model, pooled).w;
}

SchemeForward scheme_forward(const SchemeModel& model, const RealTensor& z, bool linear_relu) {
  ForwardOptions opts;
  opts.linear_mode = linear_relu;
  const auto run = [&](const RealTensor& x) {
    return forward_ex(model.net, model.params, x, opts).output;
  };

  SchemeForward out;
  switch (model.scheme.kind) {
    case SchemeKind::Baseline:
      out.output = run(z);
      out.branches.push_back(out.output);
      return out;
    case SchemeKind::Bootstrap:
      require_masks(model);
      for (std::size_t n = 0; n < model.masks.size(); ++n)
        out.branches.push_back(run(apply_branch_mask(model, n, z)));
      break;
    case SchemeKind::Residual:
      out.branches.push_back(z);
      out.branches.push_back(run(z));
      break;
    case SchemeKind::Iterative: {
      RealTensor x = z;
      for (std::size_t n = 0; n < model.scheme.n_branches; ++n) {
        x = run(x);
        if (!x.same_shape(z))
          throw std::invalid_argument("iterative scheme needs a shape-preserving backbone");
        out.branches.push_back(x);
      }
      break;
    }
  }
  check_branch_shapes(out.branches);

  if (model.scheme.attention == AttentionKind::Mlp) {
    out.pooled.reserve(out.branches.size());
    for (const RealTensor& b : out.branches) out.pooled.push_back(branch_pool(model, b));
    const MlpState mlp = run_mlp(model, out.pooled);
    out.weights = mlp.w;
    out.output = RealTensor(out.branches[0].shape());
    for (std::size_t n = 0; n < out.branches.size(); ++n) {
      const RealTensor& b = out.branches[n];
      for (std::size_t k = 0; k < b.size(); ++k) out.output[k] += out.weights[n] * b[k];
    }
  } else {
    out.output = conv_attention(model, out.branches);
  }
  return out;
}

RealTensor scheme_output(const SchemeModel& model, const RealTensor& z) {
  return scheme_forward(model, z).output;
}

RealTensor scheme_backward(const SchemeModel& model, const RealTensor& z,
                           const RealTensor& upstream, std::vector<double>& grads) {
  if (grads.size() != model.params.size())
    throw std::invalid_argument("scheme_backward: gradient buffer size mismatch");
  if (model.scheme.kind == SchemeKind::Baseline)
    return backward(model.net, model.params, z, upstream, grads);

  const SchemeForward fwd = scheme_forward(model, z);
  if (!upstream.same_shape(fwd.output))
    throw std::invalid_argument("scheme_backward: upstream shape mismatch");
  const std::size_t n = fwd.branches.size();

  // Direct gradient on each aggregated unit (attention path included).
  std::vector<RealTensor> unit_grad;
  unit_grad.reserve(n);
  if (model.scheme.attention == AttentionKind::Mlp) {
    const MlpState mlp = run_mlp(model, fwd.pooled);
    std::vector<double> dw(n);
    for (std::size_t k = 0; k < n; ++k) {
      double acc = 0.0;
      for (std::size_t i = 0; i < upstream.size(); ++i) acc += upstream[i] * fwd.branches[k][i];
      dw[k] = acc;
    }
    const std::vector<double> dg = mlp_backward(model, mlp, dw, grads);
    for (std::size_t k = 0; k < n; ++k) {
      RealTensor g = branch_pool_backward(model, fwd.branches[k], dg[k]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += fwd.weights[k] * upstream[i];
      unit_grad.push_back(std::move(g));
    }
  } else {
    unit_grad = conv_attention_backward(model, fwd.branches, upstream, grads);
  }

  switch (model.scheme.kind) {
    case SchemeKind::Bootstrap: {
      RealTensor dz(z.shape());
      for (std::size_t k = 0; k < n; ++k) {
        const RealTensor masked = apply_branch_mask(model, k, z);
        const RealTensor din = backward(model.net, model.params, masked, unit_grad[k], grads);
        add_into(dz, apply_branch_mask(model, k, din));
      }
      return dz;
    }
    case SchemeKind::Residual: {
      RealTensor dz = backward(model.net, model.params, z, unit_grad[1], grads);
      add_into(dz, unit_grad[0]);
      return dz;
    }
    case SchemeKind::Iterative: {
      RealTensor carry = std::move(unit_grad[n - 1]);
      for (std::size_t k = n; k-- > 0;) {
        const RealTensor& input = k == 0 ? z : fwd.branches[k - 1];
        RealTensor next = backward(model.net, model.params, input, carry, grads);
        if (k > 0) add_into(next, unit_grad[k - 1]);
        carry = std::move(next);
      }
      return carry;
    }
    case SchemeKind::Baseline: break;
  }
  throw std::logic_error("scheme_backward: unreachable");
}

AggregatedBasis aggregated_basis(const SchemeModel& model, const RealTensor& z,
                                 std::size_t split_layer, bool linear_relu, std::size_t cap) {
  const std::size_t d_in = z.size();
  const bool conv_att = model.scheme.kind != SchemeKind::Baseline &&
                        model.scheme.attention == AttentionKind::Conv1x1;

  AggregatedBasis agg;
  std::vector<Eigen::MatrixXd> b_blocks, bt_blocks;
  const std::size_t plane = z.extent(1) * z.extent(2);

  const auto push_branch = [&](std::size_t branch, const BasisDecomposition& basis,
                               const Eigen::MatrixXd& b_override, bool use_override) {
    b_blocks.push_back(use_override ? b_override : basis.B);
    if (conv_att) {
      bt_blocks.push_back(conv_mix_rows(model, branch, basis.B_tilde, plane));
    } else if (model.scheme.kind == SchemeKind::Baseline) {
      bt_blocks.push_back(basis.B_tilde);
    } else {
      bt_blocks.push_back(agg.weights[branch] * basis.B_tilde);
    }
    agg.branch_atoms.push_back(b_blocks.back().cols());
  };

  if (model.scheme.kind != SchemeKind::Baseline &&
      model.scheme.attention == AttentionKind::Mlp)
    agg.weights = scheme_forward(model, z, linear_relu).weights;

  switch (model.scheme.kind) {
    case SchemeKind::Baseline: {
      const BasisDecomposition basis =
          extract_basis(model.net, model.params, z, split_layer, linear_relu, cap);
      push_branch(0, basis, {}, false);
      break;
    }
    case SchemeKind::Bootstrap: {
      require_masks(model);
      for (std::size_t k = 0; k < model.masks.size(); ++k) {
        const RealTensor zk = apply_branch_mask(model, k, z);
        const BasisDecomposition basis =
            extract_basis(model.net, model.params, zk, split_layer, linear_relu, cap);
        // Fold the branch mask into the analysis side: masking the input of
        // every atom's inner product is the adjoint of masking z.
        Eigen::MatrixXd masked = basis.B;
        for (Eigen::Index j = 0; j < masked.cols(); ++j) {
          RealTensor col(z.shape());
          for (std::size_t i = 0; i < d_in; ++i) col[i] = masked(static_cast<Eigen::Index>(i), j);
          const RealTensor mcol = apply_branch_mask(model, k, col);
          for (std::size_t i = 0; i < d_in; ++i) masked(static_cast<Eigen::Index>(i), j) = mcol[i];
        }
        push_branch(k, basis, masked, true);
      }
      break;
    }
    case SchemeKind::Residual: {
      const BasisDecomposition basis =
          extract_basis(model.net, model.params, z, split_layer, linear_relu, cap);
      if (basis.B_tilde.rows() != static_cast<Eigen::Index>(d_in))
        throw std::invalid_argument("residual basis needs matching input/output size");
      // Identity branch: analysis atoms are the coordinate vectors.
      Eigen::MatrixXd b_id = Eigen::MatrixXd::Zero(d_in + 1, d_in);
      b_id.topRows(d_in).setIdentity();
      BasisDecomposition id_basis;
      id_basis.B_tilde = Eigen::MatrixXd::Identity(d_in, d_in);
      push_branch(0, id_basis, b_id, true);
      push_branch(1, basis, {}, false);
      break;
    }
    case SchemeKind::Iterative: {
      RealTensor x = z;
      Eigen::MatrixXd chain = Eigen::MatrixXd::Identity(d_in + 1, d_in + 1);
      for (std::size_t k = 0; k < model.scheme.n_branches; ++k) {
        const BasisDecomposition basis =
            extract_basis(model.net, model.params, x, split_layer, linear_relu, cap);
        if (basis.B_tilde.rows() != static_cast<Eigen::Index>(d_in))
          throw std::invalid_argument("iterative basis needs a shape-preserving backbone");
        push_branch(k, basis, chain.transpose() * basis.B, true);
        if (k + 1 < model.scheme.n_branches) {
          Eigen::MatrixXd transfer = Eigen::MatrixXd::Zero(d_in + 1, d_in + 1);
          transfer.topRows(d_in) = basis.B_tilde * basis.B.transpose();
          transfer(d_in, d_in) = 1.0;
          chain = transfer * chain;
          ForwardOptions opts;
          opts.linear_mode = linear_relu;
          x = forward_ex(model.net, model.params, x, opts).output;
        }
      }
      break;
    }
  }

  if (conv_att) {
    // One constant atom carries the attention bias.
    Eigen::MatrixXd b_const = Eigen::MatrixXd::Zero(d_in + 1, 1);
    b_const(d_in, 0) = 1.0;
    b_blocks.push_back(b_const);
    const double* bias = model.params.slice_values("attention.bias");
    Eigen::MatrixXd bt_const(bt_blocks.front().rows(), 1);
    for (std::size_t o = 0; o < model.net.out_channels; ++o)
      for (std::size_t p = 0; p < plane; ++p)
        bt_const(static_cast<Eigen::Index>(o * plane + p), 0) = bias[o];
    bt_blocks.push_back(bt_const);
    agg.branch_atoms.push_back(1);
  }

  Eigen::Index cols = 0;
  for (const auto& b : b_blocks) cols += b.cols();
  agg.B_at.resize(d_in + 1, cols);
  agg.B_tilde_at.resize(bt_blocks.front().rows(), cols);
  Eigen::Index at = 0;
  for (std::size_t k = 0; k < b_blocks.size(); ++k) {
    agg.B_at.middleCols(at, b_blocks[k].cols()) = b_blocks[k];
    agg.B_tilde_at.middleCols(at, bt_blocks[k].cols()) = bt_blocks[k];
    at += b_blocks[k].cols();
  }
  return agg;
}

Eigen::VectorXd aggregated_reconstruct(const AggregatedBasis& basis, const RealTensor& z) {
  if (static_cast<Eigen::Index>(z.size()) + 1 != basis.B_at.rows())
    throw std::invalid_argument("aggregated_reconstruct: input dimension mismatch");
  Eigen::VectorXd aug(basis.B_at.rows());
  aug.head(z.size()) = flatten(z);
  aug(z.size()) = 1.0;
  return basis.B_tilde_at * (basis.B_at.transpose() * aug);
}

OverheadReport param_overhead(AttentionKind kind, std::size_t n_branches, std::size_t n_coils,
                              std::size_t base_params) {
  if (n_branches == 0 || base_params == 0)
    throw std::invalid_argument("param_overhead: empty configuration");
  OverheadReport report;
  if (kind == AttentionKind::Mlp) {
    report.params = n_branches * kAttentionHidden * 2 + kAttentionHidden + n_branches;
  } else {
    if (n_coils == 0) throw std::invalid_argument("param_overhead: empty configuration");
    const std::size_t channels = 2 * n_coils;
    report.params = n_branches * channels * channels + channels;
  }
  report.percent = 100.0 * static_cast<double>(report.params) / base_params;
  return report;
}

std::vector<std::uint8_t> scheme_fingerprint(const SchemeModel& model, const RealTensor& z) {
  if (model.scheme.kind == SchemeKind::Bootstrap) require_masks(model);
  ForwardOptions opts;
  opts.want_trace = true;
  std::vector<std::uint8_t> fp;
  const auto absorb = [&](const ActivationTrace& trace) {
    for (const auto& pattern : trace.patterns) fp.insert(fp.end(), pattern.begin(), pattern.end());
  };
  switch (model.scheme.kind) {
    case SchemeKind::Baseline:
    case SchemeKind::Residual:
      absorb(forward_ex(model.net, model.params, z, opts).trace);
      break;
    case SchemeKind::Bootstrap:
      for (std::size_t k = 0; k < model.masks.size(); ++k)
        absorb(forward_ex(model.net, model.params, apply_branch_mask(model, k, z), opts).trace);
      break;
    case SchemeKind::Iterative: {
      RealTensor x = z;
      for (std::size_t k = 0; k < model.scheme.n_branches; ++k) {
        ForwardResult res = forward_ex(model.net, model.params, x, opts);
        absorb(res.trace);
        x = std::move(res.output);
      }
      break;
    }
  }
  return fp;
}

RegionCensus scheme_census(const SchemeModel& model, std::array<std::size_t, 3> in_shape,
                           const ProbeCloud& probes) {
  if (probes.count == 0) throw std::invalid_argument("scheme_census: no probes");
  if (model.scheme.kind == SchemeKind::Bootstrap) require_masks(model);
  const std::size_t n_traces =
      model.scheme.kind == SchemeKind::Bootstrap || model.scheme.kind == SchemeKind::Iterative
          ? model.scheme.n_branches
          : 1;

  RegionCensus census;
  {
    const LayerShapes shapes = compute_shapes(model.net, in_shape[1], in_shape[2]);
    std::size_t per_net = 0;
    for (std::size_t i = 0; i < model.net.layers.size(); ++i)
      if (model.net.layers[i].kind == LayerKind::Relu)
        per_net += shapes.in[i][0] * shapes.in[i][1] * shapes.in[i][2];
    census.n_neurons = per_net * n_traces;
  }

  Rng rng(probes.seed);
  std::set<std::vector<std::uint8_t>> fingerprints;
  for (std::size_t p = 0; p < probes.count; ++p) {
    RealTensor probe({in_shape[0], in_shape[1], in_shape[2]});
    for (auto& v : probe.storage()) v = probes.scale * rng.normal();
    fingerprints.insert(scheme_fingerprint(model, probe));
  }
  census.n_probes = probes.count;
  census.n_distinct = fingerprints.size();
  census.pattern_bound = std::min(static_cast<double>(census.n_probes),
                                  std::pow(2.0, static_cast<double>(census.n_neurons)));
  std::ostringstream desc;
  desc << "scheme=" << scheme_name(model.scheme.kind) << " cloud n=" << probes.count
       << " scale=" << probes.scale << " seed=" << probes.seed.value;
  census.probe_desc = desc.str();
  return census;
}

}  // namespace framelet
