#include "framelet/net.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "framelet/io.hpp"

namespace framelet {

namespace {

std::string layer_param_name(std::size_t layer, const char* field) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "layer%03zu.%s", layer, field);
  return buf;
}

FilterBank bank_from_params(const LayerSpec& layer, const double* taps) {
  FilterBank f(layer.out_channels, layer.in_channels, layer.r1, layer.r2);
  std::copy(taps, taps + f.taps.size(), f.taps.begin());
  return f;
}

FilterBank transpose_bank(const FilterBank& f) {
  FilterBank t(f.in_channels, f.out_channels, f.r1, f.r2);
  for (std::size_t o = 0; o < f.out_channels; ++o)
    for (std::size_t c = 0; c < f.in_channels; ++c)
      for (std::size_t a = 0; a < f.r1; ++a)
        for (std::size_t b = 0; b < f.r2; ++b) t.at(c, o, a, b) = f.at(o, c, a, b);
  return t;
}

// sum_{i,j} g(i,j) * z((i+sa) mod H, (j+sb) mod W)
double dot_shifted(const double* g, const double* z, std::size_t height, std::size_t width,
                   std::size_t sa, std::size_t sb) {
  double acc = 0.0;
  for (std::size_t i = 0; i < height; ++i) {
    const double* grow = g + i * width;
    const std::size_t zi = i + sa < height ? i + sa : i + sa - height;
    const double* zrow = z + zi * width;
    const std::size_t split = width - sb;
    double s = 0.0;
    for (std::size_t j = 0; j < split; ++j) s += grow[j] * zrow[j + sb];
    for (std::size_t j = split; j < width; ++j) s += grow[j] * zrow[j + sb - width];
    acc += s;
  }
  return acc;
}

const char* kind_name(LayerKind k) {
  switch (k) {
    case LayerKind::Conv: return "conv";
    case LayerKind::Relu: return "relu";
    case LayerKind::AvgPool: return "avg_pool";
    case LayerKind::ZeroUnpool: return "zero_unpool";
    case LayerKind::LinearH: return "linear_h";
    case LayerKind::AffineBn: return "affine_bn";
    case LayerKind::SkipEmit: return "skip_emit";
    case LayerKind::SkipJoin: return "skip_join";
  }
  return "?";
}

}  // namespace

HeightMatrix HeightMatrix::identity(std::size_t n) {
  HeightMatrix h(n, n);
  for (std::size_t i = 0; i < n; ++i) h.at(i, i) = 1.0;
  return h;
}

void NetworkSpec::validate() const {
  if (in_channels == 0 || out_channels == 0)
    throw std::invalid_argument("NetworkSpec: channel counts must be set");
  std::size_t cur = in_channels;
  std::map<std::string, std::size_t> emits;  // tag -> channels
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const LayerSpec& l = layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + kind_name(l.kind) + ")";
    if (l.in_channels != cur)
      throw std::invalid_argument("NetworkSpec: " + where + " expects " +
                                  std::to_string(l.in_channels) + " channels but receives " +
                                  std::to_string(cur));
    switch (l.kind) {
      case LayerKind::Conv:
        if (l.out_channels == 0 || l.r1 == 0 || l.r2 == 0)
          throw std::invalid_argument("NetworkSpec: " + where + " has empty extents");
        cur = l.out_channels;
        break;
      case LayerKind::Relu:
      case LayerKind::AvgPool:
      case LayerKind::ZeroUnpool:
      case LayerKind::AffineBn:
      case LayerKind::LinearH:
        if (l.out_channels != l.in_channels)
          throw std::invalid_argument("NetworkSpec: " + where + " cannot change channels");
        break;
      case LayerKind::SkipEmit:
        if (l.out_channels != l.in_channels)
          throw std::invalid_argument("NetworkSpec: " + where + " cannot change channels");
        if (!emits.emplace(l.tag, cur).second)
          throw std::invalid_argument("NetworkSpec: duplicate skip_emit tag '" + l.tag + "'");
        break;
      case LayerKind::SkipJoin: {
        const auto it = emits.find(l.tag);
        if (it == emits.end())
          throw std::invalid_argument("NetworkSpec: skip_join tag '" + l.tag +
                                      "' has no matching skip_emit");
        if (l.skip_mode == SkipMode::Add) {
          if (it->second != cur)
            throw std::invalid_argument("NetworkSpec: " + where + " adds " +
                                        std::to_string(it->second) + " channels onto " +
                                        std::to_string(cur));
        } else {
          cur += it->second;
        }
        if (l.out_channels != cur)
          throw std::invalid_argument("NetworkSpec: " + where + " out_channels mismatch");
        break;
      }
    }
    if (l.kind != LayerKind::Conv && l.kind != LayerKind::SkipJoin && l.out_channels != cur)
      throw std::invalid_argument("NetworkSpec: " + where + " out_channels mismatch");
  }
  if (cur != out_channels)
    throw std::invalid_argument("NetworkSpec: network ends with " + std::to_string(cur) +
                                " channels, declared " + std::to_string(out_channels));
}

std::size_t NetworkSpec::n_relu_layers() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.kind == LayerKind::Relu;
  return n;
}

std::size_t ParamStore::add_slice(const std::string& name, std::size_t n) {
  const std::size_t offset = values.size();
  slices.push_back({name, offset, n});
  values.resize(offset + n, 0.0);
  grads.resize(offset + n, 0.0);
  return offset;
}

bool ParamStore::has_slice(const std::string& name) const {
  for (const auto& s : slices)
    if (s.name == name) return true;
  return false;
}

const ParamSlice& ParamStore::slice(const std::string& name) const {
  for (const auto& s : slices)
    if (s.name == name) return s;
  throw std::invalid_argument("ParamStore: no slice named '" + name + "'");
}

double* ParamStore::slice_values(const std::string& name) { return values.data() + slice(name).offset; }

const double* ParamStore::slice_values(const std::string& name) const {
  return values.data() + slice(name).offset;
}

ParamStore init_params(const NetworkSpec& spec, Seed seed) {
  spec.validate();
  ParamStore store;
  Rng master(seed);
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    if (l.kind == LayerKind::Conv) {
      Rng rng = master.child(i);
      const std::size_t n_taps = l.out_channels * l.in_channels * l.r1 * l.r2;
      const std::size_t off = store.add_slice(layer_param_name(i, "taps"), n_taps);
      const double fan_in = static_cast<double>(l.in_channels * l.r1 * l.r2);
      const double bound = std::sqrt(6.0 / fan_in);
      for (std::size_t k = 0; k < n_taps; ++k) store.values[off + k] = rng.uniform(-bound, bound);
      if (l.bias) store.add_slice(layer_param_name(i, "bias"), l.out_channels);
    } else if (l.kind == LayerKind::AffineBn) {
      const std::size_t off = store.add_slice(layer_param_name(i, "gamma"), l.in_channels);
      for (std::size_t c = 0; c < l.in_channels; ++c) store.values[off + c] = 1.0;
      store.add_slice(layer_param_name(i, "beta"), l.in_channels);
    }
  }
  return store;
}

LayerShapes compute_shapes(const NetworkSpec& spec, std::size_t height, std::size_t width) {
  spec.validate();
  LayerShapes shapes;
  std::array<std::size_t, 3> cur = {spec.in_channels, height, width};
  std::map<std::string, std::array<std::size_t, 3>> emits;
  for (std::size_t i = 0; i < spec.layers.size(); ++i) {
    const LayerSpec& l = spec.layers[i];
    const std::string where = "layer " + std::to_string(i) + " (" + kind_name(l.kind) + ")";
    shapes.in.push_back(cur);
    switch (l.kind) {
      case LayerKind::Conv:
        cur[0] = l.out_channels;
        break;
      case LayerKind::Relu:
      case LayerKind::AffineBn:
        break;
      case LayerKind::AvgPool:
        if (cur[1] % 2 != 0 || cur[2] % 2 != 0)
          throw std::invalid_argument(where + ": extents " + std::to_string(cur[1]) + "x" +
                                      std::to_string(cur[2]) +
                                      " not divisible by 2 (input extents must be divisible by "
                                      "2^stages)");
        cur[1] /= 2;
        cur[2] /= 2;
        break;
      case LayerKind::ZeroUnpool:
        cur[1] *= 2;
        cur[2] *= 2;
        break;
      case LayerKind::LinearH:
        if (l.proj.in_len != cur[1])
          throw std::invalid_argument(where + ": matrix expects height " +
                                      std::to_string(l.proj.in_len) + ", got " +
                                      std::to_string(cur[1]));
        cur[1] = l.proj.out_len;
        break;
      case LayerKind::SkipEmit:
        emits[l.tag] = cur;
        break;
      case LayerKind::SkipJoin: {
        const auto rec = emits.at(l.tag);
        if (rec[1] != cur[1] || rec[2] != cur[2])
          throw std::invalid_argument(where + ": recorded extents " + std::to_string(rec[1]) + "x" +
                                      std::to_string(rec[2]) + " do not match " +
                                      std::to_string(cur[1]) + "x" + std::to_string(cur[2]));
        if (l.skip_mode == SkipMode::Concat) cur[0] += rec[0];
        break;
      }
    }
    shapes.out.push_back(cur);
  }
  return shapes;
}

namespace {

struct LayerIO {
  std::vector<RealTensor> inputs;  // input tensor of every layer
  ActivationTrace trace;
};

struct ReluMode {
  bool linear = false;
  const ActivationTrace* fixed = nullptr;
  std::size_t base_ordinal = 0;  // relu ordinal of the first layer in range
};

RealTensor apply_layers(const NetworkSpec& spec, const ParamStore& params, RealTensor cur,
                        std::size_t first, std::size_t last, const ReluMode& relu_mode,
                        const std::map<std::string, RealTensor>* skip_in,
                        std::map<std::string, RealTensor>* emit_out, LayerIO* io) {
  std::map<std::string, RealTensor> skips;
  std::size_t relu_ordinal = relu_mode.base_ordinal;
  for (std::size_t i = first; i < last; ++i) {
    const LayerSpec& l = spec.layers[i];
    if (io) io->inputs.push_back(cur);
    const std::size_t height = cur.extent(1), width = cur.extent(2);
    switch (l.kind) {
      case LayerKind::Conv: {
        const FilterBank f = bank_from_params(l, params.slice_values(layer_param_name(i, "taps")));
        RealTensor out = circ_conv_mc(cur, f, l.mode);
        if (l.bias) {
          const double* bias = params.slice_values(layer_param_name(i, "bias"));
          const std::size_t plane = height * width;
          for (std::size_t o = 0; o < l.out_channels; ++o) {
            double* p = out.data() + o * plane;
            for (std::size_t k = 0; k < plane; ++k) p[k] += bias[o];
          }
        }
        cur = std::move(out);
        break;
      }
      case LayerKind::Relu: {
        if (io) {
          io->trace.relu_layers.push_back(i);
          io->trace.pre_activations.push_back(cur);
          std::vector<std::uint8_t> pattern(cur.size());
          for (std::size_t k = 0; k < cur.size(); ++k) pattern[k] = cur[k] > 0.0 ? 1 : 0;
          io->trace.patterns.push_back(std::move(pattern));
        }
        if (relu_mode.linear) {
          // identity
        } else if (relu_mode.fixed) {
          const auto& pat = relu_mode.fixed->patterns.at(relu_ordinal);
          if (pat.size() != cur.size())
            throw std::invalid_argument("forward: fixed pattern size mismatch at layer " +
                                        std::to_string(i));
          for (std::size_t k = 0; k < cur.size(); ++k)
            if (!pat[k]) cur[k] = 0.0;
        } else {
          for (auto& v : cur.storage()) v = v > 0.0 ? v : 0.0;
        }
        ++relu_ordinal;
        break;
      }
      case LayerKind::AvgPool: {
        RealTensor out({l.out_channels, height / 2, width / 2});
        for (std::size_t c = 0; c < l.out_channels; ++c)
          for (std::size_t ii = 0; ii < height / 2; ++ii)
            for (std::size_t jj = 0; jj < width / 2; ++jj)
              out(c, ii, jj) = 0.25 * (cur(c, 2 * ii, 2 * jj) + cur(c, 2 * ii, 2 * jj + 1) +
                                       cur(c, 2 * ii + 1, 2 * jj) + cur(c, 2 * ii + 1, 2 * jj + 1));
        cur = std::move(out);
        break;
      }
      case LayerKind::ZeroUnpool: {
        RealTensor out({l.out_channels, height * 2, width * 2});
        for (std::size_t c = 0; c < l.out_channels; ++c)
          for (std::size_t ii = 0; ii < height; ++ii)
            for (std::size_t jj = 0; jj < width; ++jj) out(c, 2 * ii, 2 * jj) = cur(c, ii, jj);
        cur = std::move(out);
        break;
      }
      case LayerKind::LinearH: {
        RealTensor out({l.out_channels, l.proj.out_len, width});
        for (std::size_t c = 0; c < l.out_channels; ++c)
          for (std::size_t k = 0; k < l.proj.out_len; ++k)
            for (std::size_t t = 0; t < l.proj.in_len; ++t) {
              const double w = l.proj.at(k, t);
              if (w == 0.0) continue;
              for (std::size_t j = 0; j < width; ++j) out(c, k, j) += w * cur(c, t, j);
            }
        cur = std::move(out);
        break;
      }
      case LayerKind::AffineBn: {
        const double* gamma = params.slice_values(layer_param_name(i, "gamma"));
        const double* beta = params.slice_values(layer_param_name(i, "beta"));
        const std::size_t plane = height * width;
        for (std::size_t c = 0; c < l.out_channels; ++c) {
          double* p = cur.data() + c * plane;
          for (std::size_t k = 0; k < plane; ++k) p[k] = gamma[c] * p[k] + beta[c];
        }
        break;
      }
      case LayerKind::SkipEmit:
        skips[l.tag] = cur;
        break;
      case LayerKind::SkipJoin: {
        const auto local = skips.find(l.tag);
        const RealTensor* recp = local != skips.end() ? &local->second : nullptr;
        if (!recp && skip_in) {
          const auto ext = skip_in->find(l.tag);
          if (ext != skip_in->end()) recp = &ext->second;
        }
        if (!recp)
          throw std::runtime_error("segment: skip_join tag '" + l.tag +
                                   "' has no recorded value in range");
        const RealTensor& rec = *recp;
        if (l.skip_mode == SkipMode::Add) {
          for (std::size_t k = 0; k < cur.size(); ++k) cur[k] += rec[k];
        } else {
          RealTensor out({l.out_channels, height, width});
          std::copy(cur.storage().begin(), cur.storage().end(), out.storage().begin());
          std::copy(rec.storage().begin(), rec.storage().end(),
                    out.storage().begin() + static_cast<std::ptrdiff_t>(cur.size()));
          cur = std::move(out);
        }
        break;
      }
    }
  }
  if (emit_out)
    for (auto& [tag, value] : skips) (*emit_out)[tag] = std::move(value);
  return cur;
}

RealTensor run_forward(const NetworkSpec& spec, const ParamStore& params, const RealTensor& input,
                       const ForwardOptions& opts, LayerIO* io) {
  if (input.rank() != 3)
    throw std::invalid_argument("forward: input must be rank 3 [channels][H][W]");
  if (input.extent(0) != spec.in_channels)
    throw std::invalid_argument("forward: input has " + std::to_string(input.extent(0)) +
                                " channels, spec wants " + std::to_string(spec.in_channels));
  compute_shapes(spec, input.extent(1), input.extent(2));
  if (opts.linear_mode && opts.fixed_patterns)
    throw std::invalid_argument("forward: linear_mode and fixed_patterns are exclusive");
  RealTensor out = apply_layers(spec, params, input, 0, spec.layers.size(),
                                {opts.linear_mode, opts.fixed_patterns, 0}, nullptr, nullptr, io);
  if (!all_finite(out)) throw std::runtime_error("forward: output contains non-finite values");
  return out;
}

}  // namespace

ForwardResult forward_ex(const NetworkSpec& spec, const ParamStore& params, const RealTensor& input,
                         const ForwardOptions& opts) {
  ForwardResult result;
  if (opts.want_trace) {
    LayerIO io;
    result.output = run_forward(spec, params, input, opts, &io);
    result.trace = std::move(io.trace);
  } else {
    result.output = run_forward(spec, params, input, opts, nullptr);
  }
  return result;
}

RealTensor forward(const NetworkSpec& spec, const ParamStore& params, const RealTensor& input) {
  return run_forward(spec, params, input, {}, nullptr);
}

RealTensor run_segment(const NetworkSpec& spec, const ParamStore& params, const RealTensor& input,
                       const SegmentOptions& opts) {
  const std::size_t last = std::min(opts.last, spec.layers.size());
  if (opts.first > last)
    throw std::invalid_argument("run_segment: first layer " + std::to_string(opts.first) +
                                " is past the end of the range");
  if (opts.linear_relu && opts.patterns)
    throw std::invalid_argument("run_segment: linear_relu and patterns are exclusive");
  std::size_t base = 0;
  for (std::size_t i = 0; i < opts.first; ++i) base += spec.layers[i].kind == LayerKind::Relu;
  return apply_layers(spec, params, input, opts.first, last,
                      {opts.linear_relu, opts.patterns, base}, opts.skip_in, opts.emit_out,
                      nullptr);
}

RealTensor backward(const NetworkSpec& spec, const ParamStore& params, const RealTensor& input,
                    const RealTensor& upstream, std::vector<double>& param_grads,
                    const ForwardOptions& opts) {
  if (param_grads.size() != params.size())
    throw std::invalid_argument("backward: gradient buffer size mismatch");
  LayerIO io;
  const RealTensor output = run_forward(spec, params, input, opts, &io);
  if (!upstream.same_shape(output))
    throw std::invalid_argument("backward: upstream gradient has shape " +
                                shape_to_string(upstream.shape()) + ", output has " +
                                shape_to_string(output.shape()));

  RealTensor g = upstream;
  std::map<std::string, RealTensor> pending;  // tag -> accumulated skip gradient
  std::size_t relu_ordinal = io.trace.relu_layers.size();
  for (std::size_t ri = spec.layers.size(); ri-- > 0;) {
    const LayerSpec& l = spec.layers[ri];
    const RealTensor& zin = io.inputs[ri];
    const std::size_t height = zin.extent(1), width = zin.extent(2);
    switch (l.kind) {
      case LayerKind::Conv: {
        const FilterBank f = bank_from_params(l, params.slice_values(layer_param_name(ri, "taps")));
        if (l.bias) {
          double* db = param_grads.data() + params.slice(layer_param_name(ri, "bias")).offset;
          const std::size_t plane = height * width;
          for (std::size_t o = 0; o < l.out_channels; ++o) {
            const double* p = g.data() + o * plane;
            double s = 0.0;
            for (std::size_t k = 0; k < plane; ++k) s += p[k];
            db[o] += s;
          }
        }
        double* df = param_grads.data() + params.slice(layer_param_name(ri, "taps")).offset;
        const std::size_t plane = height * width;
        for (std::size_t o = 0; o < l.out_channels; ++o)
          for (std::size_t c = 0; c < l.in_channels; ++c)
            for (std::size_t a = 0; a < l.r1; ++a)
              for (std::size_t b = 0; b < l.r2; ++b) {
                const std::size_t sa =
                    l.mode == ConvMode::Correlate ? a % height : (height - a % height) % height;
                const std::size_t sb =
                    l.mode == ConvMode::Correlate ? b % width : (width - b % width) % width;
                df[((o * l.in_channels + c) * l.r1 + a) * l.r2 + b] +=
                    dot_shifted(g.data() + o * plane, zin.data() + c * plane, height, width, sa, sb);
              }
        g = circ_conv_mc(g, transpose_bank(f),
                         l.mode == ConvMode::Correlate ? ConvMode::Convolve : ConvMode::Correlate);
        break;
      }
      case LayerKind::Relu: {
        --relu_ordinal;
        if (!opts.linear_mode) {
          const auto& pat = opts.fixed_patterns ? opts.fixed_patterns->patterns.at(relu_ordinal)
                                                : io.trace.patterns.at(relu_ordinal);
          for (std::size_t k = 0; k < g.size(); ++k)
            if (!pat[k]) g[k] = 0.0;
        }
        break;
      }
      case LayerKind::AvgPool: {
        RealTensor down({l.in_channels, height, width});
        for (std::size_t c = 0; c < l.in_channels; ++c)
          for (std::size_t ii = 0; ii < height / 2; ++ii)
            for (std::size_t jj = 0; jj < width / 2; ++jj) {
              const double v = 0.25 * g(c, ii, jj);
              down(c, 2 * ii, 2 * jj) = v;
              down(c, 2 * ii, 2 * jj + 1) = v;
              down(c, 2 * ii + 1, 2 * jj) = v;
              down(c, 2 * ii + 1, 2 * jj + 1) = v;
            }
        g = std::move(down);
        break;
      }
      case LayerKind::ZeroUnpool: {
        RealTensor down({l.in_channels, height, width});
        for (std::size_t c = 0; c < l.in_channels; ++c)
          for (std::size_t ii = 0; ii < height; ++ii)
            for (std::size_t jj = 0; jj < width; ++jj) down(c, ii, jj) = g(c, 2 * ii, 2 * jj);
        g = std::move(down);
        break;
      }
      case LayerKind::LinearH: {
        RealTensor down({l.in_channels, l.proj.in_len, width});
        for (std::size_t c = 0; c < l.in_channels; ++c)
          for (std::size_t k = 0; k < l.proj.out_len; ++k)
            for (std::size_t t = 0; t < l.proj.in_len; ++t) {
              const double w = l.proj.at(k, t);
              if (w == 0.0) continue;
              for (std::size_t j = 0; j < width; ++j) down(c, t, j) += w * g(c, k, j);
            }
        g = std::move(down);
        break;
      }
      case LayerKind::AffineBn: {
        const double* gamma = params.slice_values(layer_param_name(ri, "gamma"));
        double* dgamma = param_grads.data() + params.slice(layer_param_name(ri, "gamma")).offset;
        double* dbeta = param_grads.data() + params.slice(layer_param_name(ri, "beta")).offset;
        const std::size_t plane = height * width;
        for (std::size_t c = 0; c < l.in_channels; ++c) {
          const double* x = zin.data() + c * plane;
          double* gp = g.data() + c * plane;
          double sg = 0.0, sxg = 0.0;
          for (std::size_t k = 0; k < plane; ++k) {
            sg += gp[k];
            sxg += x[k] * gp[k];
            gp[k] *= gamma[c];
          }
          dgamma[c] += sxg;
          dbeta[c] += sg;
        }
        break;
      }
      case LayerKind::SkipEmit: {
        const auto it = pending.find(l.tag);
        if (it != pending.end()) {
          for (std::size_t k = 0; k < g.size(); ++k) g[k] += it->second[k];
          pending.erase(it);
        }
        break;
      }
      case LayerKind::SkipJoin: {
        const std::size_t main_ch = l.in_channels;
        if (l.skip_mode == SkipMode::Add) {
          auto [it, fresh] = pending.emplace(l.tag, g);
          if (!fresh)
            for (std::size_t k = 0; k < g.size(); ++k) it->second[k] += g[k];
        } else {
          const std::size_t skip_ch = l.out_channels - main_ch;
          RealTensor gmain({main_ch, height, width});
          RealTensor gskip({skip_ch, height, width});
          std::copy(g.storage().begin(), g.storage().begin() + static_cast<std::ptrdiff_t>(gmain.size()),
                    gmain.storage().begin());
          std::copy(g.storage().begin() + static_cast<std::ptrdiff_t>(gmain.size()),
                    g.storage().end(), gskip.storage().begin());
          const auto it = pending.find(l.tag);
          if (it == pending.end()) {
            pending.emplace(l.tag, std::move(gskip));
          } else {
            for (std::size_t k = 0; k < it->second.size(); ++k) it->second[k] += gskip[k];
          }
          g = std::move(gmain);
        }
        break;
      }
    }
  }
  if (!pending.empty())
    throw std::runtime_error("backward: unconsumed skip gradient for tag '" +
                             pending.begin()->first + "'");
  return g;
}

NetworkSpec build_unet(std::size_t stages, std::size_t base_channels, std::size_t n_coils,
                       bool batchnorm) {
  if (stages == 0) throw std::invalid_argument("build_unet: stages must be >= 1");
  if (base_channels == 0) throw std::invalid_argument("build_unet: base_channels must be >= 1");
  if (n_coils == 0) throw std::invalid_argument("build_unet: n_coils must be >= 1");

  NetworkSpec spec;
  spec.n_stages = stages;
  spec.in_channels = spec.out_channels = 2 * n_coils;

  const auto conv = [&](std::size_t in, std::size_t out, std::size_t r, ConvMode mode) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.in_channels = in;
    l.out_channels = out;
    l.r1 = l.r2 = r;
    l.mode = mode;
    l.bias = true;
    spec.layers.push_back(std::move(l));
  };
  const auto same = [&](LayerKind kind, std::size_t ch) {
    LayerSpec l;
    l.kind = kind;
    l.in_channels = l.out_channels = ch;
    spec.layers.push_back(std::move(l));
  };
  const auto block = [&](std::size_t in, std::size_t out, ConvMode mode) {
    conv(in, out, 3, mode);
    if (batchnorm) same(LayerKind::AffineBn, out);
    same(LayerKind::Relu, out);
  };

  const auto stage_ch = [&](std::size_t s) { return base_channels << s; };

  std::size_t cur = spec.in_channels;
  for (std::size_t s = 0; s < stages; ++s) {
    block(cur, stage_ch(s), ConvMode::Correlate);
    block(stage_ch(s), stage_ch(s), ConvMode::Correlate);
    block(stage_ch(s), stage_ch(s), ConvMode::Correlate);
    LayerSpec emit;
    emit.kind = LayerKind::SkipEmit;
    emit.in_channels = emit.out_channels = stage_ch(s);
    emit.tag = "stage" + std::to_string(s);
    spec.layers.push_back(std::move(emit));
    same(LayerKind::AvgPool, stage_ch(s));
    cur = stage_ch(s);
  }
  block(cur, stage_ch(stages), ConvMode::Correlate);
  block(stage_ch(stages), stage_ch(stages), ConvMode::Correlate);
  block(stage_ch(stages), stage_ch(stages), ConvMode::Correlate);
  cur = stage_ch(stages);

  for (std::size_t s = stages; s-- > 0;) {
    // Deconvolution: decoder filtering first, then zero-insertion unpooling.
    conv(cur, stage_ch(s), 3, ConvMode::Convolve);
    same(LayerKind::ZeroUnpool, stage_ch(s));
    if (batchnorm) same(LayerKind::AffineBn, stage_ch(s));
    same(LayerKind::Relu, stage_ch(s));
    LayerSpec join;
    join.kind = LayerKind::SkipJoin;
    join.skip_mode = SkipMode::Concat;
    join.tag = "stage" + std::to_string(s);
    join.in_channels = stage_ch(s);
    join.out_channels = 2 * stage_ch(s);
    spec.layers.push_back(std::move(join));
    block(2 * stage_ch(s), stage_ch(s), ConvMode::Convolve);
    block(stage_ch(s), stage_ch(s), ConvMode::Convolve);
    block(stage_ch(s), stage_ch(s), ConvMode::Convolve);
    cur = stage_ch(s);
  }
  conv(cur, spec.out_channels, 1, ConvMode::Correlate);
  spec.validate();
  return spec;
}

RealTensor complex_to_channels(const ComplexTensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("complex_to_channels: input must be rank 3");
  const std::size_t n_coils = x.extent(0), height = x.extent(1), width = x.extent(2);
  RealTensor out({2 * n_coils, height, width});
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < n_coils; ++c)
    for (std::size_t k = 0; k < plane; ++k) {
      out[c * plane + k] = x[c * plane + k].real();
      out[(n_coils + c) * plane + k] = x[c * plane + k].imag();
    }
  return out;
}

ComplexTensor channels_to_complex(const RealTensor& x) {
  if (x.rank() != 3) throw std::invalid_argument("channels_to_complex: input must be rank 3");
  if (x.extent(0) % 2 != 0)
    throw std::invalid_argument("channels_to_complex: odd channel count " +
                                std::to_string(x.extent(0)));
  const std::size_t n_coils = x.extent(0) / 2, height = x.extent(1), width = x.extent(2);
  ComplexTensor out({n_coils, height, width});
  const std::size_t plane = height * width;
  for (std::size_t c = 0; c < n_coils; ++c)
    for (std::size_t k = 0; k < plane; ++k)
      out[c * plane + k] = cplx(x[c * plane + k], x[(n_coils + c) * plane + k]);
  return out;
}

std::string network_to_text(const NetworkSpec& spec) {
  spec.validate();
  std::ostringstream out;
  out << "framelet-network 1\n";
  out << "in_channels " << spec.in_channels << "\n";
  out << "out_channels " << spec.out_channels << "\n";
  out << "stages " << spec.n_stages << "\n";
  char num[40];
  for (const LayerSpec& l : spec.layers) {
    out << "layer " << kind_name(l.kind);
    switch (l.kind) {
      case LayerKind::Conv:
        out << " in " << l.in_channels << " out " << l.out_channels << " r " << l.r1 << " " << l.r2
            << " mode " << (l.mode == ConvMode::Correlate ? "corr" : "conv") << " bias "
            << (l.bias ? 1 : 0);
        break;
      case LayerKind::Relu:
      case LayerKind::AvgPool:
      case LayerKind::ZeroUnpool:
      case LayerKind::AffineBn:
        out << " ch " << l.in_channels;
        break;
      case LayerKind::LinearH:
        out << " ch " << l.in_channels << " rows " << l.proj.out_len << " cols " << l.proj.in_len;
        for (double v : l.proj.m) {
          std::snprintf(num, sizeof(num), " %.17g", v);
          out << num;
        }
        break;
      case LayerKind::SkipEmit:
        out << " ch " << l.in_channels << " tag " << l.tag;
        break;
      case LayerKind::SkipJoin:
        out << " main " << l.in_channels << " out " << l.out_channels << " tag " << l.tag
            << " mode " << (l.skip_mode == SkipMode::Add ? "add" : "concat");
        break;
    }
    out << "\n";
  }
  return out.str();
}

NetworkSpec network_from_text(const std::string& text) {
  std::istringstream in(text);
  std::string word;
  int version = 0;
  if (!(in >> word >> version) || word != "framelet-network" || version != 1)
    throw std::runtime_error("network_from_text: bad header");
  NetworkSpec spec;
  const auto expect = [&](const char* key) {
    std::string k;
    if (!(in >> k) || k != key)
      throw std::runtime_error(std::string("network_from_text: expected '") + key + "'");
  };
  expect("in_channels");
  in >> spec.in_channels;
  expect("out_channels");
  in >> spec.out_channels;
  expect("stages");
  in >> spec.n_stages;
  while (in >> word) {
    if (word != "layer") throw std::runtime_error("network_from_text: expected 'layer'");
    std::string kind;
    in >> kind;
    LayerSpec l;
    if (kind == "conv") {
      l.kind = LayerKind::Conv;
      std::string mode;
      int bias = 1;
      expect("in");
      in >> l.in_channels;
      expect("out");
      in >> l.out_channels;
      expect("r");
      in >> l.r1 >> l.r2;
      expect("mode");
      in >> mode;
      expect("bias");
      in >> bias;
      l.mode = mode == "corr" ? ConvMode::Correlate : ConvMode::Convolve;
      l.bias = bias != 0;
    } else if (kind == "relu" || kind == "avg_pool" || kind == "zero_unpool" ||
               kind == "affine_bn") {
      l.kind = kind == "relu"        ? LayerKind::Relu
               : kind == "avg_pool"  ? LayerKind::AvgPool
               : kind == "zero_unpool" ? LayerKind::ZeroUnpool
                                       : LayerKind::AffineBn;
      expect("ch");
      in >> l.in_channels;
      l.out_channels = l.in_channels;
    } else if (kind == "linear_h") {
      l.kind = LayerKind::LinearH;
      std::size_t rows = 0, cols = 0;
      expect("ch");
      in >> l.in_channels;
      expect("rows");
      in >> rows;
      expect("cols");
      in >> cols;
      l.out_channels = l.in_channels;
      l.proj = HeightMatrix(rows, cols);
      for (double& v : l.proj.m)
        if (!(in >> v)) throw std::runtime_error("network_from_text: truncated matrix");
    } else if (kind == "skip_emit") {
      l.kind = LayerKind::SkipEmit;
      expect("ch");
      in >> l.in_channels;
      expect("tag");
      in >> l.tag;
      l.out_channels = l.in_channels;
    } else if (kind == "skip_join") {
      l.kind = LayerKind::SkipJoin;
      std::string mode;
      expect("main");
      in >> l.in_channels;
      expect("out");
      in >> l.out_channels;
      expect("tag");
      in >> l.tag;
      expect("mode");
      in >> mode;
      l.skip_mode = mode == "add" ? SkipMode::Add : SkipMode::Concat;
    } else {
      throw std::runtime_error("network_from_text: unknown layer kind '" + kind + "'");
    }
    spec.layers.push_back(std::move(l));
  }
  spec.validate();
  return spec;
}

void save_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec,
                     const ParamStore& params, const std::string& extra_json) {
  write_ctns_real(path, params.values);
  nlohmann::json manifest;
  manifest["format"] = 1;
  manifest["network"] = network_to_text(spec);
  auto& slices = manifest["slices"] = nlohmann::json::array();
  for (const auto& s : params.slices)
    slices.push_back({{"name", s.name}, {"offset", s.offset}, {"size", s.size}});
  manifest["extra"] = nlohmann::json::parse(extra_json);
  std::ofstream out(path.string() + ".json", std::ios::trunc);
  out << manifest.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + path.string() + ".json");
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  Checkpoint ckpt;
  std::ifstream in(path.string() + ".json");
  if (!in) throw std::runtime_error("missing checkpoint manifest: " + path.string() + ".json");
  const nlohmann::json manifest = nlohmann::json::parse(in);
  if (manifest.at("format").get<int>() != 1)
    throw std::runtime_error("unsupported checkpoint format");
  ckpt.net = network_from_text(manifest.at("network").get<std::string>());
  ckpt.params.values = read_ctns_real(path);
  ckpt.params.grads.assign(ckpt.params.values.size(), 0.0);
  for (const auto& s : manifest.at("slices"))
    ckpt.params.slices.push_back({s.at("name").get<std::string>(),
                                  s.at("offset").get<std::size_t>(),
                                  s.at("size").get<std::size_t>()});
  ckpt.extra_json = manifest.at("extra").dump();
  return ckpt;
}

}  // namespace framelet
