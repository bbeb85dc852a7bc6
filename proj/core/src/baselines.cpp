#include "framelet/baselines.hpp"

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <stdexcept>
#include <string>

#include "framelet/fft.hpp"
#include "framelet/linalg.hpp"
#include "framelet/trainer.hpp"

namespace framelet {

namespace {

std::size_t wrap_index(std::ptrdiff_t v, std::size_t n) {
  std::ptrdiff_t m = v % static_cast<std::ptrdiff_t>(n);
  if (m < 0) m += static_cast<std::ptrdiff_t>(n);
  return static_cast<std::size_t>(m);
}

void check_grid(const ComplexTensor& kspace, const SamplingMask& mask, const char* who) {
  if (mask.grid.size() != 2)
    throw std::invalid_argument(std::string(who) + ": mask grid must be rank 2");
  if (kspace.rank() != 3 || kspace.extent(1) != mask.grid[0] || kspace.extent(2) != mask.grid[1])
    throw std::invalid_argument(std::string(who) + ": k-space does not match the mask grid");
}

void check_divisible(std::size_t h, std::size_t w, std::size_t r1, std::size_t r2,
                     const char* who) {
  if (h % r1 != 0 || w % r2 != 0)
    throw std::invalid_argument(std::string(who) +
                                ": grid extents must be divisible by the lattice steps");
}

struct RakiGeometry {
  std::size_t h = 0, w = 0, nc = 0;
  std::size_t r1 = 1;
  std::size_t dense_rows = 0;  // sampled lattice rows stacked contiguously
};

RakiGeometry raki_geometry(const ComplexTensor& kspace, const SamplingMask& mask) {
  check_grid(kspace, mask, "raki");
  if (!mask.is_1d_pattern())
    throw std::invalid_argument("raki: needs a 1-D (row-only) sampling pattern");
  const auto factors = lattice_factors(mask);
  RakiGeometry g;
  g.h = mask.grid[0];
  g.w = mask.grid[1];
  g.nc = kspace.extent(0);
  g.r1 = factors[0];
  if (g.r1 == 1) throw std::invalid_argument("raki: mask has no missing rows");
  if (g.h % g.r1 != 0)
    throw std::invalid_argument("raki: grid height must be divisible by the row lattice step");
  g.dense_rows = g.h / g.r1;
  return g;
}

// Sampled rows restacked as a dense [2 nc][h / r1][w] channel tensor.
RealTensor dense_input(const ComplexTensor& kspace, const RakiGeometry& g, double scale) {
  ComplexTensor dense({g.nc, g.dense_rows, g.w});
  for (std::size_t c = 0; c < g.nc; ++c)
    for (std::size_t l = 0; l < g.dense_rows; ++l)
      for (std::size_t j = 0; j < g.w; ++j) dense(c, l, j) = kspace(c, l * g.r1, j) * scale;
  return complex_to_channels(dense);
}

// The 0.015 magnitude cap leaves activations far too small for healthy ReLU
// training (bias steps dwarf pre-activations and units die), so the trainable
// stack is wrapped in fixed unit-conversion gains: x 1/0.015 at entry and
// x 0.015 at exit. Inputs, outputs and the loss all stay in 0.015 units.
constexpr double kRakiGain = 1.0 / 0.015;

NetworkSpec raki_spec(std::size_t nc, std::size_t r1, std::size_t dense_rows,
                      const RakiConfig& config) {
  if (config.hidden1 == 0 || config.hidden2 == 0)
    throw std::invalid_argument("raki: hidden widths must be positive");
  if (config.layer1_extents[0] == 0 || config.layer1_extents[1] == 0 ||
      config.layer3_extents[0] == 0 || config.layer3_extents[1] == 0)
    throw std::invalid_argument("raki: conv extents must be positive");
  // Bias-free convolutions keep the net positively homogeneous: the
  // interpolation rule learned on the high-energy ACS rows then applies
  // proportionally across k-space's huge dynamic range, and the degenerate
  // "predict the mean" solution is unavailable.
  auto conv = [](std::size_t cin, std::size_t cout, std::size_t e1, std::size_t e2) {
    LayerSpec l;
    l.kind = LayerKind::Conv;
    l.in_channels = cin;
    l.out_channels = cout;
    l.r1 = e1;
    l.r2 = e2;
    l.mode = ConvMode::Correlate;
    l.bias = false;
    return l;
  };
  auto relu = [](std::size_t ch) {
    LayerSpec l;
    l.kind = LayerKind::Relu;
    l.in_channels = ch;
    l.out_channels = ch;
    return l;
  };
  auto gain = [dense_rows](std::size_t ch, double g) {
    LayerSpec l;
    l.kind = LayerKind::LinearH;
    l.in_channels = ch;
    l.out_channels = ch;
    l.proj = HeightMatrix::identity(dense_rows);
    for (auto& v : l.proj.m) v *= g;
    return l;
  };
  NetworkSpec spec;
  spec.in_channels = 2 * nc;
  spec.out_channels = 2 * nc * (r1 - 1);
  spec.layers = {gain(spec.in_channels, kRakiGain),
                 conv(spec.in_channels, config.hidden1, config.layer1_extents[0],
                      config.layer1_extents[1]),
                 relu(config.hidden1),
                 conv(config.hidden1, config.hidden2, 1, 1),
                 relu(config.hidden2),
                 conv(config.hidden2, spec.out_channels, config.layer3_extents[0],
                      config.layer3_extents[1]),
                 gain(spec.out_channels, 1.0 / kRakiGain)};
  spec.validate();
  return spec;
}

struct RakiTargets {
  RealTensor values;                   // [2 nc (r1 - 1)][dense_rows][w]
  std::vector<std::uint8_t> row_used;  // (class - 1) * dense_rows + l
  std::size_t count = 0;               // scalar entries in the loss
};

RakiTargets raki_targets(const ComplexTensor& kspace, const SamplingMask& mask,
                         const RakiGeometry& g, double scale) {
  const std::size_t acs_r0 = mask.acs_offset[0];
  const std::size_t acs_r1 = acs_r0 + mask.acs_extent[0];
  RakiTargets t;
  t.values = RealTensor({2 * g.nc * (g.r1 - 1), g.dense_rows, g.w});
  t.row_used.assign((g.r1 - 1) * g.dense_rows, 0);
  for (std::size_t di = 1; di < g.r1; ++di) {
    std::size_t used_rows = 0;
    for (std::size_t l = 0; l < g.dense_rows; ++l) {
      const std::size_t i = l * g.r1 + di;
      if (i < acs_r0 || i >= acs_r1) continue;
      t.row_used[(di - 1) * g.dense_rows + l] = 1;
      ++used_rows;
      for (std::size_t c = 0; c < g.nc; ++c)
        for (std::size_t j = 0; j < g.w; ++j) {
          const cplx v = kspace(c, i, j) * scale;
          t.values((di - 1) * 2 * g.nc + c, l, j) = v.real();
          t.values((di - 1) * 2 * g.nc + g.nc + c, l, j) = v.imag();
        }
    }
    if (used_rows == 0)
      throw std::invalid_argument("raki: ACS too small to cover every missing class");
    t.count += used_rows * 2 * g.nc * g.w;
  }
  return t;
}

// Mean squared residual over ACS-covered rows; grad, when given, receives
// the matching gradient (zero elsewhere).
double raki_loss(const RealTensor& out, const RakiTargets& t, const RakiGeometry& g,
                 RealTensor* grad) {
  double acc = 0.0;
  if (grad != nullptr) *grad = RealTensor(out.shape());
  for (std::size_t ch = 0; ch < out.extent(0); ++ch) {
    const std::size_t block = ch / (2 * g.nc);
    for (std::size_t l = 0; l < g.dense_rows; ++l) {
      if (t.row_used[block * g.dense_rows + l] == 0) continue;
      for (std::size_t j = 0; j < g.w; ++j) {
        const double d = out(ch, l, j) - t.values(ch, l, j);
        acc += d * d;
        if (grad != nullptr) (*grad)(ch, l, j) = 2.0 * d / static_cast<double>(t.count);
      }
    }
  }
  return acc / static_cast<double>(t.count);
}

double normalization(const ComplexTensor& kspace) {
  const double mx = max_abs(kspace);
  if (mx == 0.0) throw std::invalid_argument("raki: k-space is identically zero");
  return 0.015 / mx;
}

}  // namespace

std::array<std::size_t, 2> lattice_factors(const SamplingMask& mask) {
  mask.validate();
  const std::size_t w = mask.grid.size() == 2 ? mask.grid[1] : 1;
  std::size_t g1 = 0, g2 = 0;
  for (std::size_t flat = 0; flat < mask.selected.size(); ++flat) {
    if (!mask.is_selected(flat) || mask.in_acs(flat)) continue;
    g1 = std::gcd(g1, flat / w);
    g2 = std::gcd(g2, flat % w);
  }
  const std::size_t r1 = g1 == 0 ? 1 : g1;
  const std::size_t r2 = g2 == 0 ? 1 : g2;
  for (std::size_t flat = 0; flat < mask.selected.size(); ++flat) {
    if (mask.in_acs(flat)) continue;
    const bool on_lattice = (flat / w) % r1 == 0 && (flat % w) % r2 == 0;
    if (on_lattice != mask.is_selected(flat))
      throw std::invalid_argument("lattice_factors: selection is not a uniform lattice plus ACS");
  }
  return {r1, r2};
}

GrappaKernel grappa_calibrate(const ComplexTensor& kspace, const SamplingMask& mask,
                              std::size_t k1, std::size_t k2, double ridge) {
  if (k1 == 0 || k2 == 0)
    throw std::invalid_argument("grappa_calibrate: degenerate constellation (zero extent)");
  check_grid(kspace, mask, "grappa_calibrate");
  const auto factors = lattice_factors(mask);
  const std::size_t h = mask.grid[0], w = mask.grid[1];
  const std::size_t nc = kspace.extent(0);
  const std::size_t plane = h * w;
  check_divisible(h, w, factors[0], factors[1], "grappa_calibrate");

  GrappaKernel kernel;
  kernel.k1 = k1;
  kernel.k2 = k2;
  kernel.r1 = factors[0];
  kernel.r2 = factors[1];
  kernel.n_coils = nc;
  if (kernel.r1 == 1 && kernel.r2 == 1) return kernel;  // nothing missing

  const auto a0 = static_cast<std::ptrdiff_t>((k1 - 1) / 2);
  const auto b0 = static_cast<std::ptrdiff_t>((k2 - 1) / 2);
  const std::size_t unknowns = k1 * k2 * nc;
  const auto acs_row0 = static_cast<std::ptrdiff_t>(mask.acs_offset[0]);
  const auto acs_col0 = static_cast<std::ptrdiff_t>(mask.acs_offset[1]);
  const auto acs_row1 = acs_row0 + static_cast<std::ptrdiff_t>(mask.acs_extent[0]);
  const auto acs_col1 = acs_col0 + static_cast<std::ptrdiff_t>(mask.acs_extent[1]);

  for (std::size_t di = 0; di < kernel.r1; ++di)
    for (std::size_t dj = 0; dj < kernel.r2; ++dj) {
      if (di == 0 && dj == 0) continue;
      // Target positions of this class whose whole constellation stays
      // inside the ACS block.
      std::vector<std::pair<std::size_t, std::size_t>> targets;
      for (std::ptrdiff_t i = acs_row0; i < acs_row1; ++i) {
        if (static_cast<std::size_t>(i) % kernel.r1 != di) continue;
        bool rows_ok = true;
        for (std::size_t a = 0; a < k1 && rows_ok; ++a) {
          const std::ptrdiff_t row = i - static_cast<std::ptrdiff_t>(di) +
                                     (static_cast<std::ptrdiff_t>(a) - a0) *
                                         static_cast<std::ptrdiff_t>(kernel.r1);
          rows_ok = row >= acs_row0 && row < acs_row1;
        }
        if (!rows_ok) continue;
        for (std::ptrdiff_t j = acs_col0; j < acs_col1; ++j) {
          if (static_cast<std::size_t>(j) % kernel.r2 != dj) continue;
          bool cols_ok = true;
          for (std::size_t b = 0; b < k2 && cols_ok; ++b) {
            const std::ptrdiff_t col = j - static_cast<std::ptrdiff_t>(dj) +
                                       (static_cast<std::ptrdiff_t>(b) - b0) *
                                           static_cast<std::ptrdiff_t>(kernel.r2);
            cols_ok = col >= acs_col0 && col < acs_col1;
          }
          if (cols_ok)
            targets.emplace_back(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
        }
      }
      if (targets.size() < unknowns)
        throw std::invalid_argument(
            "grappa_calibrate: underdetermined calibration for offset class (" +
            std::to_string(di) + ", " + std::to_string(dj) + "): " +
            std::to_string(targets.size()) + " equations for " + std::to_string(unknowns) +
            " unknowns");

      Eigen::MatrixXcd A(targets.size(), unknowns);
      Eigen::MatrixXcd B(targets.size(), nc);
      for (std::size_t eq = 0; eq < targets.size(); ++eq) {
        const auto [i, j] = targets[eq];
        for (std::size_t a = 0; a < k1; ++a)
          for (std::size_t b = 0; b < k2; ++b) {
            const auto row = static_cast<std::size_t>(
                static_cast<std::ptrdiff_t>(i - di) +
                (static_cast<std::ptrdiff_t>(a) - a0) * static_cast<std::ptrdiff_t>(kernel.r1));
            const auto col = static_cast<std::size_t>(
                static_cast<std::ptrdiff_t>(j - dj) +
                (static_cast<std::ptrdiff_t>(b) - b0) * static_cast<std::ptrdiff_t>(kernel.r2));
            for (std::size_t cs = 0; cs < nc; ++cs)
              A(eq, (a * k2 + b) * nc + cs) = kspace[cs * plane + row * w + col];
          }
        for (std::size_t ct = 0; ct < nc; ++ct) B(eq, ct) = kspace[ct * plane + i * w + j];
      }
      kernel.weights[{di, dj}] = lstsq(A, B, ridge);
    }
  return kernel;
}

ComplexTensor grappa_reconstruct(const ComplexTensor& kspace, const SamplingMask& mask,
                                 const GrappaKernel& kernel) {
  check_grid(kspace, mask, "grappa_reconstruct");
  if (kspace.extent(0) != kernel.n_coils)
    throw std::invalid_argument("grappa_reconstruct: kernel was calibrated for " +
                                std::to_string(kernel.n_coils) + " coils, got " +
                                std::to_string(kspace.extent(0)));
  const auto factors = lattice_factors(mask);
  if (factors[0] != kernel.r1 || factors[1] != kernel.r2)
    throw std::invalid_argument("grappa_reconstruct: kernel does not match the mask lattice");
  const std::size_t h = mask.grid[0], w = mask.grid[1];
  const std::size_t plane = h * w;
  const std::size_t nc = kernel.n_coils;
  check_divisible(h, w, kernel.r1, kernel.r2, "grappa_reconstruct");

  const auto a0 = static_cast<std::ptrdiff_t>((kernel.k1 - 1) / 2);
  const auto b0 = static_cast<std::ptrdiff_t>((kernel.k2 - 1) / 2);
  ComplexTensor out = kspace;
  Eigen::VectorXcd sources(kernel.k1 * kernel.k2 * nc);
  for (std::size_t flat = 0; flat < mask.selected.size(); ++flat) {
    if (mask.is_selected(flat)) continue;
    const std::size_t i = flat / w, j = flat % w;
    const std::size_t di = i % kernel.r1, dj = j % kernel.r2;
    const auto it = kernel.weights.find({di, dj});
    if (it == kernel.weights.end())
      throw std::runtime_error("grappa_reconstruct: kernel has no weights for offset class (" +
                               std::to_string(di) + ", " + std::to_string(dj) + ")");
    for (std::size_t a = 0; a < kernel.k1; ++a)
      for (std::size_t b = 0; b < kernel.k2; ++b) {
        const std::size_t row = wrap_index(
            static_cast<std::ptrdiff_t>(i - di) +
                (static_cast<std::ptrdiff_t>(a) - a0) * static_cast<std::ptrdiff_t>(kernel.r1),
            h);
        const std::size_t col = wrap_index(
            static_cast<std::ptrdiff_t>(j - dj) +
                (static_cast<std::ptrdiff_t>(b) - b0) * static_cast<std::ptrdiff_t>(kernel.r2),
            w);
        for (std::size_t cs = 0; cs < nc; ++cs)
          sources((a * kernel.k2 + b) * nc + cs) = kspace[cs * plane + row * w + col];
      }
    const Eigen::MatrixXcd& weights = it->second;
    for (std::size_t ct = 0; ct < nc; ++ct) {
      cplx acc = 0.0;
      for (Eigen::Index r = 0; r < weights.rows(); ++r) acc += weights(r, ct) * sources(r);
      out[ct * plane + flat] = acc;
    }
  }
  return out;
}

Sample make_lattice_model_sample(const SamplingMask& mask, std::size_t n_coils, std::size_t k1,
                                 std::size_t k2, Seed seed) {
  if (mask.grid.size() != 2)
    throw std::invalid_argument("make_lattice_model_sample: needs a rank-2 grid");
  if (n_coils == 0) throw std::invalid_argument("make_lattice_model_sample: need at least one coil");
  if (k1 == 0 || k2 == 0)
    throw std::invalid_argument("make_lattice_model_sample: degenerate kernel extents");
  const auto factors = lattice_factors(mask);
  const std::size_t r1 = factors[0], r2 = factors[1];
  const std::size_t h = mask.grid[0], w = mask.grid[1];
  const std::size_t plane = h * w;
  check_divisible(h, w, r1, r2, "make_lattice_model_sample");

  Rng rng(seed);
  ComplexTensor full({n_coils, h, w});
  for (std::size_t flat = 0; flat < plane; ++flat) {
    if (!mask.is_selected(flat)) continue;
    for (std::size_t c = 0; c < n_coils; ++c)
      full[c * plane + flat] = cplx(rng.normal(), rng.normal());
  }

  // One weight matrix per missing-offset class, scaled so filled entries
  // stay near unit magnitude.
  const double scale = 1.0 / static_cast<double>(k1 * k2 * n_coils);
  std::map<std::pair<std::size_t, std::size_t>, Eigen::MatrixXcd> weights;
  for (std::size_t di = 0; di < r1; ++di)
    for (std::size_t dj = 0; dj < r2; ++dj) {
      if (di == 0 && dj == 0) continue;
      Eigen::MatrixXcd m(k1 * k2 * n_coils, n_coils);
      for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c)
          m(r, c) = scale * cplx(rng.normal(), rng.normal());
      weights.emplace(std::make_pair(di, dj), std::move(m));
    }

  // A mask point with class (0, 0) is always selected, so every missing
  // entry has a weight matrix and draws only from selected lattice sources.
  const auto a0 = static_cast<std::ptrdiff_t>((k1 - 1) / 2);
  const auto b0 = static_cast<std::ptrdiff_t>((k2 - 1) / 2);
  for (std::size_t flat = 0; flat < plane; ++flat) {
    if (mask.is_selected(flat)) continue;
    const std::size_t i = flat / w, j = flat % w;
    const Eigen::MatrixXcd& m = weights.at({i % r1, j % r2});
    const std::size_t di = i % r1, dj = j % r2;
    for (std::size_t ct = 0; ct < n_coils; ++ct) {
      cplx acc = 0.0;
      for (std::size_t a = 0; a < k1; ++a)
        for (std::size_t b = 0; b < k2; ++b) {
          const std::size_t row = wrap_index(static_cast<std::ptrdiff_t>(i - di) +
                                                 (static_cast<std::ptrdiff_t>(a) - a0) *
                                                     static_cast<std::ptrdiff_t>(r1),
                                             h);
          const std::size_t col = wrap_index(static_cast<std::ptrdiff_t>(j - dj) +
                                                 (static_cast<std::ptrdiff_t>(b) - b0) *
                                                     static_cast<std::ptrdiff_t>(r2),
                                             w);
          for (std::size_t cs = 0; cs < n_coils; ++cs)
            acc += m((a * k2 + b) * n_coils + cs, ct) * full[cs * plane + row * w + col];
        }
      full[ct * plane + flat] = acc;
    }
  }

  Sample sample;
  sample.full_kspace = std::move(full);
  sample.mask = mask;
  sample.label_image = ifft2(sample.full_kspace);
  sample.seed = seed.value;
  sample.accel = mask.acceleration();
  return sample;
}

RakiModel raki_train(const ComplexTensor& kspace, const SamplingMask& mask,
                     const RakiConfig& config) {
  const RakiGeometry g = raki_geometry(kspace, mask);
  RakiModel model;
  model.r1 = g.r1;
  model.n_coils = g.nc;
  model.scale = normalization(kspace);
  model.spec = raki_spec(g.nc, g.r1, g.dense_rows, config);
  model.params = init_params(model.spec, Seed{config.seed});

  const RealTensor input = dense_input(kspace, g, model.scale);
  const RakiTargets targets = raki_targets(kspace, mask, g, model.scale);
  AdamState adam = make_adam_state(model.params.size());
  std::vector<double> grads(model.params.size(), 0.0);
  RealTensor upstream;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const RealTensor out = forward(model.spec, model.params, input);
    const double value = raki_loss(out, targets, g, &upstream);
    if (!std::isfinite(value)) throw std::runtime_error("raki: training diverged");
    if (epoch > 0) model.epoch_loss.push_back(value);
    std::fill(grads.begin(), grads.end(), 0.0);
    backward(model.spec, model.params, input, upstream, grads);
    if (config.weight_decay > 0.0)
      for (double& v : model.params.values) v *= 1.0 - config.lr * config.weight_decay;
    adam_step(model.params.values, grads, adam, config.lr);
  }
  if (config.epochs > 0) {
    const RealTensor out = forward(model.spec, model.params, input);
    model.epoch_loss.push_back(raki_loss(out, targets, g, nullptr));
  }
  return model;
}

ComplexTensor raki_reconstruct(const ComplexTensor& kspace, const SamplingMask& mask,
                               const RakiModel& model) {
  const RakiGeometry g = raki_geometry(kspace, mask);
  if (g.r1 != model.r1 || g.nc != model.n_coils ||
      model.spec.out_channels != 2 * g.nc * (g.r1 - 1) || model.spec.layers.empty() ||
      model.spec.layers.front().proj.in_len != g.dense_rows)
    throw std::invalid_argument("raki_reconstruct: model does not match the mask geometry");
  const double scale = normalization(kspace);
  const RealTensor input = dense_input(kspace, g, scale);
  const RealTensor out = forward(model.spec, model.params, input);

  ComplexTensor result = kspace;
  const std::size_t plane = g.h * g.w;
  for (std::size_t di = 1; di < g.r1; ++di)
    for (std::size_t l = 0; l < g.dense_rows; ++l)
      for (std::size_t c = 0; c < g.nc; ++c)
        for (std::size_t j = 0; j < g.w; ++j) {
          const cplx v(out((di - 1) * 2 * g.nc + c, l, j),
                       out((di - 1) * 2 * g.nc + g.nc + c, l, j));
          result(c, l * g.r1 + di, j) = v / scale;
        }
  // Hard data consistency: every sampled entry comes straight from the input.
  for (std::size_t flat = 0; flat < mask.selected.size(); ++flat) {
    if (!mask.is_selected(flat)) continue;
    for (std::size_t c = 0; c < g.nc; ++c) result[c * plane + flat] = kspace[c * plane + flat];
  }
  return result;
}

}  // namespace framelet
