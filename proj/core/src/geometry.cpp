#include "framelet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace framelet {

namespace {

std::size_t flat_size(const std::array<std::size_t, 3>& s) { return s[0] * s[1] * s[2]; }

Eigen::VectorXd flatten(const RealTensor& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
}

RealTensor unflatten(const Eigen::VectorXd& v, const std::array<std::size_t, 3>& shape) {
  RealTensor t({shape[0], shape[1], shape[2]});
  if (static_cast<std::size_t>(v.size()) != t.size())
    throw std::invalid_argument("unflatten: size mismatch");
  std::copy_n(v.data(), t.size(), t.data());
  return t;
}

void check_cap(std::size_t need, std::size_t cap, const char* what) {
  if (need > cap)
    throw std::runtime_error(std::string("dense cap exceeded: ") + what + " needs " +
                             std::to_string(need) + " > cap " + std::to_string(cap));
}

std::string param_name(std::size_t layer, const char* field) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%03zu", layer);
  return "layer" + std::string(buf) + "." + field;
}

std::size_t relu_ordinal_of(const NetworkSpec& spec, std::size_t layer) {
  std::size_t ord = 0;
  for (std::size_t i = 0; i < layer; ++i) ord += spec.layers[i].kind == LayerKind::Relu;
  return ord;
}

// Skip tags emitted before `split` with at least one join at or past it,
// ascending by emit layer, together with the emit layer index.
std::vector<std::pair<std::string, std::size_t>> crossing_tags(const NetworkSpec& spec,
                                                               std::size_t split,
                                                               std::size_t last) {
  std::vector<std::pair<std::string, std::size_t>> out;
  for (std::size_t i = 0; i < split; ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind != LayerKind::SkipEmit) continue;
    for (std::size_t j = split; j < last; ++j)
      if (spec.layers[j].kind == LayerKind::SkipJoin && spec.layers[j].tag == l.tag) {
        out.emplace_back(l.tag, i);
        break;
      }
  }
  return out;
}

}  // namespace

Eigen::MatrixXd LayerMatrix::augmented() const {
  Eigen::MatrixXd a = Eigen::MatrixXd::Zero(op.rows() + 1, op.cols() + 1);
  a.topLeftCorner(op.rows(), op.cols()) = op;
  a.topRightCorner(op.rows(), 1) = bias;
  a(op.rows(), op.cols()) = 1.0;
  return a;
}

LayerMatrix layer_matrices(const NetworkSpec& spec, const ParamStore& params, std::size_t layer,
                           std::size_t height, std::size_t width, std::size_t cap) {
  if (layer >= spec.layers.size()) throw std::invalid_argument("layer_matrices: no such layer");
  const LayerShapes shapes = compute_shapes(spec, height, width);
  const auto in = shapes.in[layer], out = shapes.out[layer];
  const std::size_t d_in = flat_size(in), d_out = flat_size(out);
  check_cap(d_in, cap, "layer input");
  check_cap(d_out, cap, "layer output");
  const std::size_t h = in[1], w = in[2];

  LayerMatrix m;
  m.op = Eigen::MatrixXd::Zero(d_out, d_in);
  m.bias = Eigen::VectorXd::Zero(d_out);
  const LayerSpec& l = spec.layers[layer];
  const auto in_idx = [&](std::size_t c, std::size_t i, std::size_t j) {
    return (c * h + i) * w + j;
  };
  switch (l.kind) {
    case LayerKind::Conv: {
      const double* taps = params.slice_values(param_name(layer, "taps"));
      for (std::size_t o = 0; o < l.out_channels; ++o)
        for (std::size_t c = 0; c < l.in_channels; ++c)
          for (std::size_t a = 0; a < l.r1; ++a)
            for (std::size_t b = 0; b < l.r2; ++b) {
              const double wgt = taps[((o * l.in_channels + c) * l.r1 + a) * l.r2 + b];
              for (std::size_t i = 0; i < h; ++i)
                for (std::size_t j = 0; j < w; ++j) {
                  const std::size_t zi = l.mode == ConvMode::Correlate
                                             ? (i + a) % h
                                             : (i + h - a % h) % h;
                  const std::size_t zj = l.mode == ConvMode::Correlate
                                             ? (j + b) % w
                                             : (j + w - b % w) % w;
                  m.op(in_idx(o, i, j), in_idx(c, zi, zj)) += wgt;
                }
            }
      if (l.bias) {
        const double* bias = params.slice_values(param_name(layer, "bias"));
        for (std::size_t o = 0; o < l.out_channels; ++o)
          for (std::size_t k = 0; k < h * w; ++k) m.bias(o * h * w + k) = bias[o];
      }
      break;
    }
    case LayerKind::AvgPool:
      for (std::size_t c = 0; c < l.out_channels; ++c)
        for (std::size_t i = 0; i < out[1]; ++i)
          for (std::size_t j = 0; j < out[2]; ++j) {
            const std::size_t row = (c * out[1] + i) * out[2] + j;
            for (std::size_t di = 0; di < 2; ++di)
              for (std::size_t dj = 0; dj < 2; ++dj)
                m.op(row, in_idx(c, 2 * i + di, 2 * j + dj)) = 0.25;
          }
      break;
    case LayerKind::ZeroUnpool:
      for (std::size_t c = 0; c < l.out_channels; ++c)
        for (std::size_t i = 0; i < h; ++i)
          for (std::size_t j = 0; j < w; ++j)
            m.op((c * out[1] + 2 * i) * out[2] + 2 * j, in_idx(c, i, j)) = 1.0;
      break;
    case LayerKind::LinearH:
      for (std::size_t c = 0; c < l.out_channels; ++c)
        for (std::size_t k = 0; k < l.proj.out_len; ++k)
          for (std::size_t t = 0; t < l.proj.in_len; ++t)
            for (std::size_t j = 0; j < w; ++j)
              m.op((c * out[1] + k) * w + j, in_idx(c, t, j)) = l.proj.at(k, t);
      break;
    case LayerKind::AffineBn: {
      const double* gamma = params.slice_values(param_name(layer, "gamma"));
      const double* beta = params.slice_values(param_name(layer, "beta"));
      for (std::size_t c = 0; c < l.out_channels; ++c)
        for (std::size_t k = 0; k < h * w; ++k) {
          m.op(c * h * w + k, c * h * w + k) = gamma[c];
          m.bias(c * h * w + k) = beta[c];
        }
      break;
    }
    case LayerKind::Relu:
    case LayerKind::SkipEmit:
    case LayerKind::SkipJoin:
      throw std::invalid_argument("layer_matrices: layer " + std::to_string(layer) +
                                  " is not a linear map");
  }
  return m;
}

AffineSegment materialize_segment(const NetworkSpec& spec, const ParamStore& params,
                                  std::size_t first, std::size_t last,
                                  std::size_t height, std::size_t width,
                                  const ActivationTrace* patterns, bool linear_relu,
                                  std::size_t cap) {
  const std::size_t n = spec.layers.size();
  last = std::min(last, n);
  if (first > last) throw std::invalid_argument("materialize_segment: empty range inverted");
  const LayerShapes shapes = compute_shapes(spec, height, width);

  AffineSegment seg;
  seg.in_shape = first < n ? shapes.in[first]
                           : (n ? shapes.out[n - 1]
                                : std::array<std::size_t, 3>{spec.in_channels, height, width});
  seg.out_shape = last > first ? shapes.out[last - 1] : seg.in_shape;

  // External inputs: joined inside, emitted before the range.
  std::map<std::string, std::array<std::size_t, 3>> emit_shape;
  for (const auto& [tag, layer] : crossing_tags(spec, first, last)) {
    seg.skip_tags.push_back(tag);
    seg.skip_cols.push_back(flat_size(shapes.out[layer]));
    emit_shape[tag] = shapes.out[layer];
  }
  // Extra outputs: emitted inside, joined at or past `last`.
  std::vector<std::array<std::size_t, 3>> emit_out_shapes;
  for (const auto& [tag, layer] : crossing_tags(spec, last, n))
    if (layer >= first) {
      seg.emit_tags.push_back(tag);
      seg.emit_rows.push_back(flat_size(shapes.out[layer]));
      emit_out_shapes.push_back(shapes.out[layer]);
    }

  const std::size_t d_in = flat_size(seg.in_shape);
  const std::size_t d_chi =
      std::accumulate(seg.skip_cols.begin(), seg.skip_cols.end(), std::size_t{0});
  const std::size_t d_out =
      flat_size(seg.out_shape) +
      std::accumulate(seg.emit_rows.begin(), seg.emit_rows.end(), std::size_t{0});
  check_cap(d_in, cap, "segment input");
  check_cap(d_chi, cap, "segment skip input");
  check_cap(d_out, cap, "segment output");

  const auto run = [&](const Eigen::VectorXd& x, const Eigen::VectorXd& chi) {
    std::map<std::string, RealTensor> skip_in;
    std::size_t off = 0;
    for (std::size_t k = 0; k < seg.skip_tags.size(); ++k) {
      skip_in[seg.skip_tags[k]] =
          unflatten(chi.segment(off, seg.skip_cols[k]), emit_shape[seg.skip_tags[k]]);
      off += seg.skip_cols[k];
    }
    std::map<std::string, RealTensor> emitted;
    SegmentOptions opts;
    opts.first = first;
    opts.last = last;
    opts.linear_relu = linear_relu;
    opts.patterns = patterns;
    opts.skip_in = &skip_in;
    opts.emit_out = &emitted;
    const RealTensor y = run_segment(spec, params, unflatten(x, seg.in_shape), opts);
    Eigen::VectorXd packed(d_out);
    packed.head(y.size()) = flatten(y);
    std::size_t row = y.size();
    for (std::size_t k = 0; k < seg.emit_tags.size(); ++k) {
      packed.segment(row, seg.emit_rows[k]) = flatten(emitted.at(seg.emit_tags[k]));
      row += seg.emit_rows[k];
    }
    return packed;
  };

  const Eigen::VectorXd zero_x = Eigen::VectorXd::Zero(d_in);
  const Eigen::VectorXd zero_chi = Eigen::VectorXd::Zero(d_chi);
  seg.offset = run(zero_x, zero_chi);
  seg.main.resize(d_out, d_in);
  for (std::size_t j = 0; j < d_in; ++j) {
    Eigen::VectorXd e = zero_x;
    e(j) = 1.0;
    seg.main.col(j) = run(e, zero_chi) - seg.offset;
  }
  seg.skip.resize(d_out, d_chi);
  for (std::size_t j = 0; j < d_chi; ++j) {
    Eigen::VectorXd e = zero_chi;
    e(j) = 1.0;
    seg.skip.col(j) = run(zero_x, e) - seg.offset;
  }
  return seg;
}

BasisDecomposition extract_basis(const NetworkSpec& spec, const ParamStore& params,
                                 const RealTensor& z, std::size_t split_layer, bool linear_relu,
                                 std::size_t cap) {
  if (split_layer > spec.layers.size())
    throw std::invalid_argument("extract_basis: split layer out of range");
  const std::size_t height = z.extent(1), width = z.extent(2);

  ActivationTrace trace;
  if (!linear_relu) {
    ForwardOptions opts;
    opts.want_trace = true;
    trace = forward_ex(spec, params, z, opts).trace;
  }
  const ActivationTrace* patterns = linear_relu ? nullptr : &trace;
  const AffineSegment analysis =
      materialize_segment(spec, params, 0, split_layer, height, width, patterns, linear_relu, cap);
  const AffineSegment synthesis = materialize_segment(spec, params, split_layer,
                                                      spec.layers.size(), height, width,
                                                      patterns, linear_relu, cap);
  if (analysis.emit_tags != synthesis.skip_tags)
    throw std::logic_error("extract_basis: crossing skip bookkeeping disagrees");

  const std::size_t d_in = analysis.main.cols();
  const std::size_t d_mid = analysis.main.rows();
  const std::size_t d_out = synthesis.main.rows() -
                            std::accumulate(synthesis.emit_rows.begin(),
                                            synthesis.emit_rows.end(), std::size_t{0});
  if (static_cast<std::size_t>(synthesis.main.cols()) + synthesis.skip.cols() != d_mid)
    throw std::logic_error("extract_basis: split dimensions disagree");

  BasisDecomposition basis;
  basis.pattern = std::move(trace);
  basis.skip_tags = analysis.emit_tags;
  basis.atom_blocks.push_back(synthesis.main.cols());
  for (std::size_t cols : synthesis.skip_cols) basis.atom_blocks.push_back(cols);
  basis.atom_blocks.push_back(1);

  basis.B = Eigen::MatrixXd::Zero(d_in + 1, d_mid + 1);
  basis.B.topLeftCorner(d_in, d_mid) = analysis.main.transpose();
  basis.B.bottomLeftCorner(1, d_mid) = analysis.offset.transpose();
  basis.B(d_in, d_mid) = 1.0;

  basis.B_tilde.resize(d_out, d_mid + 1);
  basis.B_tilde.leftCols(synthesis.main.cols()) = synthesis.main.topRows(d_out);
  basis.B_tilde.middleCols(synthesis.main.cols(), synthesis.skip.cols()) =
      synthesis.skip.topRows(d_out);
  basis.B_tilde.rightCols(1) = synthesis.offset.head(d_out);
  return basis;
}

Eigen::VectorXd basis_reconstruct(const BasisDecomposition& basis, const RealTensor& z) {
  if (static_cast<Eigen::Index>(z.size()) + 1 != basis.B.rows())
    throw std::invalid_argument("basis_reconstruct: input dimension mismatch");
  Eigen::VectorXd aug(basis.B.rows());
  aug.head(z.size()) = flatten(z);
  aug(z.size()) = 1.0;
  return basis.B_tilde * (basis.B.transpose() * aug);
}

Eigen::MatrixXd haar_matrix(std::size_t m) {
  if (m == 0 || m % 2 != 0) throw std::invalid_argument("haar_matrix: size must be even");
  const double s = std::sqrt(0.5);
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(m, m);
  for (std::size_t i = 0; i < m / 2; ++i) {
    h(i, 2 * i) = s;
    h(i, 2 * i + 1) = s;
    h(m / 2 + i, 2 * i) = s;
    h(m / 2 + i, 2 * i + 1) = -s;
  }
  return h;
}

FrameLevel build_frame_filters(std::size_t q_in, std::size_t q_out, std::size_t r, std::size_t m,
                               double alpha, bool skip, Seed seed) {
  if (q_in == 0 || q_out == 0 || r == 0) throw std::invalid_argument("frame filters: empty extents");
  if (r * q_in > q_out)
    throw std::invalid_argument("frame filters: q_out " + std::to_string(q_out) +
                                " infeasible, need >= r*q_in = " + std::to_string(r * q_in));
  if (!(alpha > 0.0)) throw std::invalid_argument("frame filters: alpha must be positive");

  FrameLevel level;
  level.q_in = q_in;
  level.q_out = q_out;
  level.r = r;
  level.m = m;
  level.alpha = alpha;
  level.skip = skip;
  level.c = skip ? 1.0 / (r * (alpha + 1.0)) : 1.0 / (r * alpha);

  Rng rng(seed);
  Eigen::MatrixXd g(q_out, q_out);
  for (Eigen::Index i = 0; i < g.rows(); ++i)
    for (Eigen::Index j = 0; j < g.cols(); ++j) g(i, j) = rng.normal();
  const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
  level.psi = std::sqrt(level.c) * q.topRows(r * q_in);
  level.psi_tilde = level.psi;
  level.phi = std::sqrt(alpha) * haar_matrix(m);
  level.phi_tilde = level.phi;
  return level;
}

FrameReport frame_report(std::span<const FrameLevel> levels, double tol) {
  FrameReport report;
  report.tol = tol;
  report.pass = !levels.empty();
  for (const FrameLevel& level : levels) {
    FrameReport::Level row;
    const Eigen::MatrixXd psi_g = level.psi * level.psi_tilde.transpose();
    row.psi_residual = (psi_g - level.c * Eigen::MatrixXd::Identity(psi_g.rows(), psi_g.cols()))
                           .norm();
    const Eigen::MatrixXd phi_g = level.phi_tilde * level.phi.transpose();
    row.phi_residual =
        (phi_g - level.alpha * Eigen::MatrixXd::Identity(phi_g.rows(), phi_g.cols())).norm();
    report.levels.push_back(row);
    report.alpha = level.alpha;
    if (row.psi_residual > tol || row.phi_residual > tol) report.pass = false;
  }
  return report;
}

std::string frame_report_to_json(const FrameReport& report) {
  nlohmann::json j;
  j["alpha"] = report.alpha;
  j["tolerance"] = report.tol;
  j["pass"] = report.pass;
  j["levels"] = nlohmann::json::array();
  for (const auto& level : report.levels)
    j["levels"].push_back(
        {{"filter_residual", level.psi_residual}, {"pooling_residual", level.phi_residual}});
  return j.dump(2);
}

FrameNet build_frame_net(std::span<const FrameLevel> levels, bool relu) {
  if (levels.empty()) throw std::invalid_argument("build_frame_net: no levels");
  for (std::size_t l = 1; l < levels.size(); ++l) {
    if (levels[l].q_in != levels[l - 1].q_out)
      throw std::invalid_argument("build_frame_net: channel chain broken at level " +
                                  std::to_string(l));
    if (levels[l].m != levels[l - 1].m)
      throw std::invalid_argument("build_frame_net: mixed signal lengths");
  }

  FrameNet net;
  net.spec.in_channels = net.spec.out_channels = levels.front().q_in;
  net.spec.n_stages = levels.size();
  const std::size_t m = levels.front().m;

  const auto proj_from = [&](const Eigen::MatrixXd& mat, bool transpose) {
    HeightMatrix h(m, m);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < m; ++j) h.at(i, j) = transpose ? mat(j, i) : mat(i, j);
    return h;
  };

  std::size_t last_encoder_relu = 0;
  for (std::size_t l = 0; l < levels.size(); ++l) {
    const FrameLevel& lev = levels[l];
    LayerSpec conv;
    conv.kind = LayerKind::Conv;
    conv.in_channels = lev.q_in;
    conv.out_channels = lev.q_out;
    conv.r1 = lev.r;
    conv.r2 = 1;
    conv.mode = ConvMode::Correlate;
    conv.bias = false;
    net.spec.layers.push_back(conv);
    if (lev.skip) {
      LayerSpec emit;
      emit.kind = LayerKind::SkipEmit;
      emit.in_channels = emit.out_channels = lev.q_out;
      emit.tag = "level" + std::to_string(l);
      net.spec.layers.push_back(emit);
    }
    LayerSpec pool;
    pool.kind = LayerKind::LinearH;
    pool.in_channels = pool.out_channels = lev.q_out;
    pool.proj = proj_from(lev.phi, true);  // analysis applies phi^T
    net.spec.layers.push_back(pool);
    if (relu) {
      LayerSpec act;
      act.kind = LayerKind::Relu;
      act.in_channels = act.out_channels = lev.q_out;
      last_encoder_relu = net.spec.layers.size();
      net.spec.layers.push_back(act);
    }
  }
  net.split_layer = relu ? last_encoder_relu : net.spec.layers.size();

  for (std::size_t l = levels.size(); l-- > 0;) {
    const FrameLevel& lev = levels[l];
    LayerSpec unpool;
    unpool.kind = LayerKind::LinearH;
    unpool.in_channels = unpool.out_channels = lev.q_out;
    unpool.proj = proj_from(lev.phi_tilde, false);
    net.spec.layers.push_back(unpool);
    if (lev.skip) {
      LayerSpec join;
      join.kind = LayerKind::SkipJoin;
      join.skip_mode = SkipMode::Add;
      join.tag = "level" + std::to_string(l);
      join.in_channels = join.out_channels = lev.q_out;
      net.spec.layers.push_back(join);
    }
    LayerSpec conv;
    conv.kind = LayerKind::Conv;
    conv.in_channels = lev.q_out;
    conv.out_channels = lev.q_in;
    conv.r1 = lev.r;
    conv.r2 = 1;
    conv.mode = ConvMode::Convolve;
    conv.bias = false;
    net.spec.layers.push_back(conv);
    if (relu && l > 0) {
      LayerSpec act;
      act.kind = LayerKind::Relu;
      act.in_channels = act.out_channels = lev.q_in;
      net.spec.layers.push_back(act);
    }
  }
  net.spec.validate();

  net.params = init_params(net.spec, Seed{0});
  std::size_t level_fwd = 0, level_bwd = levels.size();
  for (std::size_t i = 0; i < net.spec.layers.size(); ++i) {
    const LayerSpec& l = net.spec.layers[i];
    if (l.kind != LayerKind::Conv) continue;
    char buf[8];
    std::snprintf(buf, sizeof(buf), "%03zu", i);
    double* taps = net.params.slice_values("layer" + std::string(buf) + ".taps");
    if (l.mode == ConvMode::Correlate) {
      const FrameLevel& lev = levels[level_fwd++];
      // taps[i_out][j_in][a] = psi((j_in, a), i_out)
      for (std::size_t o = 0; o < l.out_channels; ++o)
        for (std::size_t c = 0; c < l.in_channels; ++c)
          for (std::size_t a = 0; a < l.r1; ++a)
            taps[(o * l.in_channels + c) * l.r1 + a] = lev.psi(c * lev.r + a, o);
    } else {
      const FrameLevel& lev = levels[--level_bwd];
      // Transposed bank: the Convolve pairing makes this the exact adjoint.
      for (std::size_t o = 0; o < l.out_channels; ++o)
        for (std::size_t c = 0; c < l.in_channels; ++c)
          for (std::size_t a = 0; a < l.r1; ++a)
            taps[(o * l.in_channels + c) * l.r1 + a] = lev.psi_tilde(o * lev.r + a, c);
    }
  }
  return net;
}

PrReport check_perfect_reconstruction(const NetworkSpec& spec, const ParamStore& params,
                                      std::size_t height, std::size_t width,
                                      std::size_t n_probes, Seed seed) {
  for (const LayerSpec& l : spec.layers)
    if (l.kind == LayerKind::Relu)
      throw std::invalid_argument("check_perfect_reconstruction: network has ReLU layers");
  if (n_probes == 0)
    throw std::invalid_argument("check_perfect_reconstruction: need at least one probe");

  PrReport report;
  report.n_probes = n_probes;
  Rng rng(seed);
  for (std::size_t p = 0; p < n_probes; ++p) {
    RealTensor z({spec.in_channels, height, width});
    for (auto& v : z.storage()) v = rng.normal();
    const RealTensor v = forward(spec, params, z);
    double diff = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) diff += (v[k] - z[k]) * (v[k] - z[k]);
    report.max_rel_error = std::max(report.max_rel_error, std::sqrt(diff) / norm2(z));
  }
  report.pass = report.max_rel_error <= 1e-8;
  return report;
}

HyperplaneReport hyperplane_report(const NetworkSpec& spec, const ParamStore& params,
                                   const RealTensor& z, std::size_t relu_layer, std::size_t cap) {
  if (relu_layer >= spec.layers.size() ||
      spec.layers[relu_layer].kind != LayerKind::Relu)
    throw std::invalid_argument("hyperplane_report: layer " + std::to_string(relu_layer) +
                                " is not a ReLU layer");
  ForwardOptions opts;
  opts.want_trace = true;
  const ActivationTrace trace = forward_ex(spec, params, z, opts).trace;

  HyperplaneReport report;
  report.layer = relu_layer;
  report.prev_relu_layer = HyperplaneReport::npos;
  for (std::size_t i = relu_layer; i-- > 0;)
    if (spec.layers[i].kind == LayerKind::Relu) {
      report.prev_relu_layer = i;
      break;
    }
  const std::size_t first =
      report.prev_relu_layer == HyperplaneReport::npos ? 0 : report.prev_relu_layer + 1;

  const AffineSegment seg = materialize_segment(spec, params, first, relu_layer, z.extent(1),
                                                z.extent(2), &trace, false, cap);
  if (!seg.skip_tags.empty())
    throw std::invalid_argument(
        "hyperplane_report: a skip joined between the reference feature and the layer "
        "prevents a single-normal description");

  const std::size_t d_prev = seg.main.cols();
  const std::size_t n_neurons = flat_size(seg.out_shape);
  report.prev_pattern.assign(d_prev, 1);
  if (report.prev_relu_layer != HyperplaneReport::npos)
    report.prev_pattern = trace.patterns.at(relu_ordinal_of(spec, report.prev_relu_layer));

  report.normals = seg.main.topRows(n_neurons);
  for (std::size_t j = 0; j < d_prev; ++j)
    if (!report.prev_pattern[j]) report.normals.col(j).setZero();
  report.offsets = seg.offset.head(n_neurons);
  report.pre_activation =
      flatten(trace.pre_activations.at(relu_ordinal_of(spec, relu_layer)));
  report.activation = report.pre_activation.cwiseMax(0.0);
  report.norm.resize(n_neurons);
  report.distance.resize(n_neurons);
  report.degenerate.assign(n_neurons, 0);
  for (std::size_t i = 0; i < n_neurons; ++i) {
    report.norm(i) = report.normals.row(i).norm();
    if (report.norm(i) == 0.0) {
      report.degenerate[i] = 1;
      report.distance(i) = 0.0;
    } else {
      report.distance(i) = report.pre_activation(i) / report.norm(i);
    }
  }
  return report;
}

void write_hyperplane_csv(const std::filesystem::path& path, const HyperplaneReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write failed: " + path.string());
  out << "neuron,offset,pre_activation,activation,norm,signed_distance,degenerate\n";
  char line[256];
  for (Eigen::Index i = 0; i < report.pre_activation.size(); ++i) {
    std::snprintf(line, sizeof(line), "%lld,%.17g,%.17g,%.17g,%.17g,%.17g,%d\n",
                  static_cast<long long>(i), report.offsets(i), report.pre_activation(i),
                  report.activation(i), report.norm(i), report.distance(i),
                  static_cast<int>(report.degenerate[i]));
    out << line;
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

DecoderFrameSubset decoder_frame_subset(const NetworkSpec& spec, const ParamStore& params,
                                        const RealTensor& z, std::size_t relu_layer,
                                        std::size_t cap) {
  if (relu_layer >= spec.layers.size() ||
      spec.layers[relu_layer].kind != LayerKind::Relu)
    throw std::invalid_argument("decoder_frame_subset: layer " + std::to_string(relu_layer) +
                                " is not a ReLU layer");
  ForwardOptions fwd;
  fwd.want_trace = true;
  const ActivationTrace trace = forward_ex(spec, params, z, fwd).trace;
  std::map<std::string, RealTensor> emitted;
  {
    SegmentOptions all;
    all.emit_out = &emitted;
    run_segment(spec, params, z, all);
  }

  std::size_t next = spec.layers.size();
  for (std::size_t i = relu_layer + 1; i < spec.layers.size(); ++i)
    if (spec.layers[i].kind == LayerKind::Relu) {
      next = i;
      break;
    }
  const AffineSegment seg = materialize_segment(spec, params, relu_layer + 1, next, z.extent(1),
                                                z.extent(2), &trace, false, cap);

  DecoderFrameSubset subset;
  subset.layer = relu_layer;
  const std::size_t ord = relu_ordinal_of(spec, relu_layer);
  subset.xi = flatten(trace.pre_activations.at(ord));
  const auto& pattern = trace.patterns.at(ord);
  for (std::size_t i = 0; i < pattern.size(); ++i)
    if (pattern[i]) subset.selected.push_back(i);
  subset.ratio = pattern.empty()
                     ? 0.0
                     : static_cast<double>(subset.selected.size()) / pattern.size();
  const std::size_t d_out = flat_size(seg.out_shape);
  subset.synthesis = seg.main.topRows(d_out);
  subset.skip_synthesis = seg.skip.topRows(d_out);
  subset.offset = seg.offset.head(d_out);
  subset.skip_tags = seg.skip_tags;

  // Reduced-frame reconstruction against the network's own computation.
  Eigen::VectorXd via_subset = subset.offset;
  for (std::size_t i : subset.selected) via_subset += subset.synthesis.col(i) * subset.xi(i);
  std::size_t col = 0;
  for (std::size_t k = 0; k < seg.skip_tags.size(); ++k) {
    via_subset += subset.skip_synthesis.middleCols(col, seg.skip_cols[k]) *
                  flatten(emitted.at(seg.skip_tags[k]));
    col += seg.skip_cols[k];
  }
  RealTensor relu_out({seg.in_shape[0], seg.in_shape[1], seg.in_shape[2]});
  for (std::size_t k = 0; k < relu_out.size(); ++k)
    relu_out[k] = subset.xi(k) > 0.0 ? subset.xi(k) : 0.0;
  SegmentOptions seg_opts;
  seg_opts.first = relu_layer + 1;
  seg_opts.last = next;
  seg_opts.patterns = &trace;
  seg_opts.skip_in = &emitted;
  const Eigen::VectorXd direct =
      flatten(run_segment(spec, params, relu_out, seg_opts)).head(d_out);
  subset.reconstruction_error =
      (via_subset - direct).norm() / std::max(1.0, direct.norm());
  return subset;
}

namespace {

RegionCensus census_impl(std::span<const NetView> nets, std::array<std::size_t, 3> in_shape,
                         const std::vector<RealTensor>& probes, std::string desc) {
  RegionCensus census;
  census.probe_desc = std::move(desc);
  census.n_probes = probes.size();
  for (const NetView& net : nets) {
    const LayerShapes shapes = compute_shapes(*net.spec, in_shape[1], in_shape[2]);
    for (std::size_t i = 0; i < net.spec->layers.size(); ++i)
      if (net.spec->layers[i].kind == LayerKind::Relu)
        census.n_neurons += flat_size(shapes.in[i]);
  }

  std::set<std::vector<std::uint8_t>> fingerprints;
  for (const RealTensor& probe : probes) {
    std::vector<std::uint8_t> fp;
    for (const NetView& net : nets) {
      ForwardOptions opts;
      opts.want_trace = true;
      const ActivationTrace trace = forward_ex(*net.spec, *net.params, probe, opts).trace;
      for (const auto& pattern : trace.patterns) fp.insert(fp.end(), pattern.begin(), pattern.end());
    }
    fingerprints.insert(std::move(fp));
  }
  census.n_distinct = fingerprints.size();
  census.pattern_bound =
      std::min(static_cast<double>(census.n_probes),
               std::pow(2.0, static_cast<double>(census.n_neurons)));
  return census;
}

}  // namespace

RegionCensus region_census(std::span<const NetView> nets, std::array<std::size_t, 3> in_shape,
                           const ProbeGrid& grid) {
  if (nets.empty()) throw std::invalid_argument("region_census: no networks");
  if (grid.n < 2) throw std::invalid_argument("region_census: grid needs >= 2 points per axis");
  const std::size_t dim = flat_size(in_shape);
  std::size_t total = 1;
  for (std::size_t k = 0; k < dim; ++k) {
    if (total > 100'000'000 / grid.n)
      throw std::invalid_argument("region_census: grid too large");
    total *= grid.n;
  }
  std::vector<RealTensor> probes;
  probes.reserve(total);
  for (std::size_t idx = 0; idx < total; ++idx) {
    RealTensor probe({in_shape[0], in_shape[1], in_shape[2]});
    std::size_t rest = idx;
    for (std::size_t k = 0; k < dim; ++k) {
      const std::size_t step = rest % grid.n;
      rest /= grid.n;
      probe[k] = grid.lo + (grid.hi - grid.lo) * static_cast<double>(step) /
                               static_cast<double>(grid.n - 1);
    }
    probes.push_back(std::move(probe));
  }
  std::ostringstream desc;
  desc << "grid[" << grid.lo << "," << grid.hi << "]^" << dim << " n=" << grid.n;
  return census_impl(nets, in_shape, probes, desc.str());
}

RegionCensus region_census(std::span<const NetView> nets, std::array<std::size_t, 3> in_shape,
                           const ProbeCloud& cloud) {
  if (nets.empty()) throw std::invalid_argument("region_census: no networks");
  if (cloud.count == 0) throw std::invalid_argument("region_census: no probes");
  Rng rng(cloud.seed);
  std::vector<RealTensor> probes;
  probes.reserve(cloud.count);
  for (std::size_t p = 0; p < cloud.count; ++p) {
    RealTensor probe({in_shape[0], in_shape[1], in_shape[2]});
    for (auto& v : probe.storage()) v = cloud.scale * rng.normal();
    probes.push_back(std::move(probe));
  }
  std::ostringstream desc;
  desc << "cloud n=" << cloud.count << " scale=" << cloud.scale << " seed=" << cloud.seed.value;
  return census_impl(nets, in_shape, probes, desc.str());
}

std::string census_to_json(const RegionCensus& census) {
  nlohmann::json j;
  j["probes"] = census.probe_desc;
  j["n_probes"] = census.n_probes;
  j["distinct_patterns"] = census.n_distinct;
  j["n_neurons"] = census.n_neurons;
  j["pattern_bound"] = census.pattern_bound;
  return j.dump(2);
}

}  // namespace framelet
