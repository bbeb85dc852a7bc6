#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "framelet/expressivity.hpp"
#include "framelet/geometry.hpp"
#include "framelet/net.hpp"
#include "test_util.hpp"

using namespace framelet;
using framelet::testing::random_real;

namespace {

LayerSpec conv_layer(std::size_t in, std::size_t out, std::size_t r1, std::size_t r2,
                     ConvMode mode, bool bias) {
  LayerSpec l;
  l.kind = LayerKind::Conv;
  l.in_channels = in;
  l.out_channels = out;
  l.r1 = r1;
  l.r2 = r2;
  l.mode = mode;
  l.bias = bias;
  return l;
}

LayerSpec plain_layer(LayerKind kind, std::size_t ch) {
  LayerSpec l;
  l.kind = kind;
  l.in_channels = l.out_channels = ch;
  return l;
}

// Shape-preserving conv-relu-conv backbone with two in/out channels.
NetworkSpec backbone(std::size_t hidden = 4) {
  NetworkSpec spec;
  spec.in_channels = 2;
  spec.out_channels = 2;
  spec.layers.push_back(conv_layer(2, hidden, 3, 3, ConvMode::Correlate, true));
  spec.layers.push_back(plain_layer(LayerKind::Relu, hidden));
  spec.layers.push_back(conv_layer(hidden, 2, 3, 3, ConvMode::Convolve, true));
  return spec;
}

SamplingMask row_lattice_mask(std::size_t h, std::size_t w) {
  return make_mask({h, w}, {2, 1}, {2, w});
}

void randomize_attention(SchemeModel& model, std::uint64_t seed) {
  Rng rng(seed);
  for (const ParamSlice& s : model.params.slices)
    if (s.name.starts_with("attention."))
      for (std::size_t k = 0; k < s.size; ++k)
        model.params.values[s.offset + k] = rng.uniform(-0.6, 0.6);
}

double inner(const RealTensor& a, const RealTensor& b) {
  REQUIRE(a.size() == b.size());
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

double max_abs(const RealTensor& t) {
  double m = 0.0;
  for (double v : t.storage()) m = std::max(m, std::abs(v));
  return m;
}

double scheme_loss(const SchemeModel& model, const RealTensor& z, const RealTensor& u) {
  return inner(u, scheme_output(model, z));
}

// Central-difference check of scheme_backward over a stride of parameter and
// input coordinates.
void check_gradients(SchemeModel& model, const RealTensor& z, std::uint64_t seed,
                     std::size_t param_stride = 7) {
  const RealTensor v0 = scheme_output(model, z);
  RealTensor u(v0.shape());
  {
    Rng rng(seed);
    for (auto& x : u.storage()) x = rng.normal();
  }

  std::vector<double> grads(model.params.size(), 0.0);
  const RealTensor dz = scheme_backward(model, z, u, grads);
  REQUIRE(dz.same_shape(z));

  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t i = 0; i < model.params.size(); i += param_stride) {
    const double saved = model.params.values[i];
    model.params.values[i] = saved + h;
    const double up = scheme_loss(model, z, u);
    model.params.values[i] = saved - h;
    const double dn = scheme_loss(model, z, u);
    model.params.values[i] = saved;
    const double fd = (up - dn) / (2.0 * h);
    worst = std::max(worst, std::abs(fd - grads[i]) / std::max(1.0, std::abs(fd)));
  }
  CHECK(worst < 1e-5);

  RealTensor zp = z;
  double worst_in = 0.0;
  for (std::size_t i = 0; i < z.size(); i += 3) {
    const double saved = zp[i];
    zp[i] = saved + h;
    const double up = scheme_loss(model, zp, u);
    zp[i] = saved - h;
    const double dn = scheme_loss(model, zp, u);
    zp[i] = saved;
    const double fd = (up - dn) / (2.0 * h);
    worst_in = std::max(worst_in, std::abs(fd - dz[i]) / std::max(1.0, std::abs(fd)));
  }
  CHECK(worst_in < 1e-5);
}

// Max elementwise gap between the scheme output and its two-sided
// factorization, relative to the output scale.
double basis_identity_gap(const SchemeModel& model, const RealTensor& z, std::size_t split,
                          bool linear_relu) {
  const RealTensor v = scheme_forward(model, z, linear_relu).output;
  const AggregatedBasis basis = aggregated_basis(model, z, split, linear_relu);
  std::size_t atoms = 0;
  for (std::size_t a : basis.branch_atoms) atoms += a;
  CHECK(static_cast<Eigen::Index>(atoms) == basis.B_at.cols());
  CHECK(basis.B_at.cols() == basis.B_tilde_at.cols());

  const Eigen::VectorXd recon = aggregated_reconstruct(basis, z);
  REQUIRE(recon.size() == static_cast<Eigen::Index>(v.size()));
  double gap = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k)
    gap = std::max(gap, std::abs(v[k] - recon[static_cast<Eigen::Index>(k)]));
  return gap / std::max(1.0, max_abs(v));
}

}  // namespace

TEST_SUITE("expressivity") {

TEST_CASE("scheme and attention names round-trip") {
  for (SchemeKind k : {SchemeKind::Baseline, SchemeKind::Bootstrap, SchemeKind::Residual,
                       SchemeKind::Iterative})
    CHECK(scheme_from_name(scheme_name(k)) == k);
  for (AttentionKind k : {AttentionKind::Mlp, AttentionKind::Conv1x1})
    CHECK(attention_from_name(attention_name(k)) == k);
  CHECK_THROWS_AS(scheme_from_name("banded"), std::invalid_argument);
  CHECK_THROWS_AS(attention_from_name("se"), std::invalid_argument);
}

TEST_CASE("attention weights match a direct evaluation of the gating network") {
  SchemeConfig config;
  config.kind = SchemeKind::Iterative;
  config.n_branches = 3;
  SchemeModel model = build_scheme_model(backbone(), config, Seed{11});

  SUBCASE("fresh models weight every branch equally") {
    const std::vector<double> w = attention_weights(model, std::vector<double>{0.4, 2.0, -1.3});
    REQUIRE(w.size() == 3);
    // Zeroed output weights leave only the logit(1/3) bias.
    for (double v : w) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));

    SchemeConfig pair = config;
    pair.kind = SchemeKind::Residual;
    SchemeModel two = build_scheme_model(backbone(), pair, Seed{11});
    const std::vector<double> w2 = attention_weights(two, std::vector<double>{5.0, -5.0});
    CHECK(w2[0] == 0.5);
    CHECK(w2[1] == 0.5);
  }

  SUBCASE("randomized parameters agree with the explicit formula") {
    randomize_attention(model, 77);
    const std::vector<double> pooled = {0.3, 1.2, 0.7};
    const std::vector<double> w = attention_weights(model, pooled);

    const double* w1 = model.params.slice_values("attention.w1");
    const double* b1 = model.params.slice_values("attention.b1");
    const double* w2 = model.params.slice_values("attention.w2");
    const double* b2 = model.params.slice_values("attention.b2");
    std::vector<double> h(kAttentionHidden);
    for (std::size_t j = 0; j < kAttentionHidden; ++j) {
      double a = b1[j];
      for (std::size_t k = 0; k < 3; ++k) a += w1[j * 3 + k] * pooled[k];
      h[j] = std::max(a, 0.0);
    }
    for (std::size_t k = 0; k < 3; ++k) {
      double a = b2[k];
      for (std::size_t j = 0; j < kAttentionHidden; ++j) a += w2[k * kAttentionHidden + j] * h[j];
      CHECK(std::abs(w[k] - 1.0 / (1.0 + std::exp(-a))) <= 1e-15);
    }
  }

  SUBCASE("moderate and saturating biases") {
    double* b2 = model.params.slice_values("attention.b2");
    b2[0] = 10.0;
    b2[1] = 746.0;
    b2[2] = -746.0;
    const std::vector<double> w = attention_weights(model, std::vector<double>{0.0, 0.0, 0.0});
    CHECK(w[0] == 1.0 / (1.0 + std::exp(-10.0)));
    CHECK(w[1] == 1.0);
    CHECK(w[2] == 0.0);
  }

  SUBCASE("wrong pooled size and missing attention are rejected") {
    CHECK_THROWS_AS(attention_weights(model, std::vector<double>{1.0}), std::invalid_argument);
    SchemeModel base = build_scheme_model(backbone(), SchemeConfig{}, Seed{3});
    CHECK_THROWS_AS(attention_weights(base, std::vector<double>{1.0}), std::invalid_argument);
    SchemeConfig conv = config;
    conv.attention = AttentionKind::Conv1x1;
    SchemeModel cmodel = build_scheme_model(backbone(), conv, Seed{3});
    CHECK_THROWS_AS(attention_weights(cmodel, std::vector<double>{1.0, 1.0, 1.0}),
                    std::invalid_argument);
  }
}

TEST_CASE("saturated gates reduce the schemes to exact special cases") {
  const RealTensor z = random_real({2, 6, 6}, 421);

  SUBCASE("residual with both gates open adds input and backbone output") {
    SchemeConfig config;
    config.kind = SchemeKind::Residual;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{5});
    double* b2 = model.params.slice_values("attention.b2");
    b2[0] = b2[1] = 746.0;
    const SchemeForward fwd = scheme_forward(model, z);
    CHECK(fwd.weights[0] == 1.0);
    CHECK(fwd.weights[1] == 1.0);
    const RealTensor t = forward(model.net, model.params, z);
    for (std::size_t k = 0; k < z.size(); ++k) CHECK(fwd.output[k] == z[k] + t[k]);
  }

  SUBCASE("a one-hot bootstrap gate leaves a single masked branch") {
    SchemeConfig config;
    config.kind = SchemeKind::Bootstrap;
    config.n_branches = 2;
    config.keep_ratio = 0.75;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{5});
    set_bootstrap_masks(model, row_lattice_mask(6, 6), Seed{17});
    double* b2 = model.params.slice_values("attention.b2");
    b2[0] = 746.0;
    b2[1] = -746.0;
    const SchemeForward fwd = scheme_forward(model, z);
    const RealTensor kept = forward(model.net, model.params, apply_branch_mask(model, 0, z));
    for (std::size_t k = 0; k < kept.size(); ++k) CHECK(fwd.output[k] == kept[k]);
  }

  SUBCASE("identical sub-masks collapse the bootstrap aggregate onto one branch") {
    SchemeConfig config;
    config.kind = SchemeKind::Bootstrap;
    config.n_branches = 3;
    config.keep_ratio = 1.0;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{5});
    const SamplingMask base = row_lattice_mask(6, 6);
    set_bootstrap_masks(model, base, Seed{17});
    for (const SamplingMask& m : model.masks) CHECK(m.selected == base.selected);
    const SchemeForward fwd = scheme_forward(model, z);
    for (std::size_t n = 1; n < 3; ++n)
      for (std::size_t k = 0; k < fwd.output.size(); ++k)
        CHECK(fwd.branches[n][k] == fwd.branches[0][k]);
    // Fresh gates average, so the collapsed aggregate is the single branch.
    for (std::size_t k = 0; k < fwd.output.size(); ++k)
      CHECK(fwd.output[k] == doctest::Approx(fwd.branches[0][k]).epsilon(1e-14));
  }
}

TEST_CASE("branch masks subsample the input and are self-adjoint") {
  SchemeConfig config;
  config.kind = SchemeKind::Bootstrap;
  config.n_branches = 2;
  config.keep_ratio = 0.7;
  SchemeModel model = build_scheme_model(backbone(), config, Seed{9});
  CHECK_THROWS_AS(scheme_output(model, random_real({2, 6, 6}, 1)), std::runtime_error);
  set_bootstrap_masks(model, row_lattice_mask(6, 6), Seed{23});

  const RealTensor x = random_real({2, 6, 6}, 31);
  const RealTensor y = random_real({2, 6, 6}, 32);

  SUBCASE("frequency-domain masks zero unselected grid points") {
    const RealTensor mx = apply_branch_mask(model, 0, x);
    const SamplingMask& m = model.masks[0];
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j)
          CHECK(mx(c, i, j) == (m.is_selected(i * 6 + j) ? x(c, i, j) : 0.0));
    // Idempotent and self-adjoint as an operator on the input space.
    const RealTensor mmx = apply_branch_mask(model, 0, mx);
    for (std::size_t k = 0; k < mx.size(); ++k) CHECK(mmx[k] == mx[k]);
    CHECK(inner(mx, y) == doctest::Approx(inner(x, apply_branch_mask(model, 0, y))).epsilon(1e-14));
    const SchemeForward fwd = scheme_forward(model, x);
    for (std::size_t n = 0; n < 2; ++n) {
      const RealTensor direct = forward(model.net, model.params, apply_branch_mask(model, n, x));
      for (std::size_t k = 0; k < direct.size(); ++k) CHECK(fwd.branches[n][k] == direct[k]);
    }
  }

  SUBCASE("image-domain masks act through the unitary transform pair") {
    model.input_is_kspace = false;
    const RealTensor mx = apply_branch_mask(model, 0, x);
    CHECK(max_abs(mx) > 0.0);
    double gap = 0.0;
    const RealTensor mmx = apply_branch_mask(model, 0, mx);
    for (std::size_t k = 0; k < mx.size(); ++k) gap = std::max(gap, std::abs(mmx[k] - mx[k]));
    CHECK(gap < 1e-12);
    CHECK(inner(mx, y) == doctest::Approx(inner(x, apply_branch_mask(model, 0, y))).epsilon(1e-12));
  }

  SUBCASE("rank-1 masks blank whole rows") {
    SchemeModel rows = build_scheme_model(backbone(), config, Seed{9});
    set_bootstrap_masks(rows, make_mask({6}, {2}, {2}), Seed{23});
    const RealTensor mx = apply_branch_mask(rows, 1, x);
    const SamplingMask& m = rows.masks[1];
    for (std::size_t c = 0; c < 2; ++c)
      for (std::size_t i = 0; i < 6; ++i)
        for (std::size_t j = 0; j < 6; ++j)
          CHECK(mx(c, i, j) == (m.is_selected(i) ? x(c, i, j) : 0.0));
  }

  SUBCASE("mismatched grids and ranks are rejected") {
    CHECK_THROWS_AS(apply_branch_mask(model, 0, random_real({2, 4, 4}, 3)),
                    std::invalid_argument);
    CHECK_THROWS_AS(apply_branch_mask(model, 7, x), std::invalid_argument);
    RealTensor flat({2, 36});
    CHECK_THROWS_AS(apply_branch_mask(model, 0, flat), std::invalid_argument);
  }
}

TEST_CASE("pooling feeds coil magnitudes or the raw mean into the gates") {
  SchemeConfig config;
  config.kind = SchemeKind::Residual;
  SchemeModel model = build_scheme_model(backbone(), config, Seed{13});
  const RealTensor z = random_real({2, 5, 5}, 99);
  const SchemeForward fwd = scheme_forward(model, z);
  REQUIRE(fwd.pooled.size() == 2);
  for (std::size_t n = 0; n < 2; ++n) {
    const RealTensor& b = fwd.branches[n];
    double s = 0.0;
    for (std::size_t p = 0; p < 25; ++p) s += std::sqrt(b[p] * b[p] + b[25 + p] * b[25 + p]);
    CHECK(fwd.pooled[n] == doctest::Approx(s / 25.0).epsilon(1e-15));
  }

  SchemeConfig raw = config;
  raw.pool_magnitude = false;
  SchemeModel rmodel = build_scheme_model(backbone(), raw, Seed{13});
  const SchemeForward rfwd = scheme_forward(rmodel, z);
  for (std::size_t n = 0; n < 2; ++n) {
    double s = 0.0;
    for (double v : rfwd.branches[n].storage()) s += v;
    CHECK(rfwd.pooled[n] == doctest::Approx(s / 50.0).epsilon(1e-15));
  }

  // Magnitude pooling needs paired re/im channels.
  NetworkSpec odd;
  odd.in_channels = 3;
  odd.out_channels = 3;
  odd.layers.push_back(conv_layer(3, 3, 3, 3, ConvMode::Correlate, true));
  SchemeModel omodel = build_scheme_model(odd, config, Seed{13});
  CHECK_THROWS_AS(scheme_output(omodel, random_real({3, 5, 5}, 1)), std::invalid_argument);
}

TEST_CASE("scheme gradients match finite differences") {
  const RealTensor z = random_real({2, 6, 6}, 2024);

  SUBCASE("baseline") {
    SchemeModel model = build_scheme_model(backbone(), SchemeConfig{}, Seed{41});
    check_gradients(model, z, 1);
  }

  SUBCASE("bootstrap with scalar gates") {
    SchemeConfig config;
    config.kind = SchemeKind::Bootstrap;
    config.n_branches = 2;
    config.keep_ratio = 0.75;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{42});
    set_bootstrap_masks(model, row_lattice_mask(6, 6), Seed{421});
    randomize_attention(model, 61);
    check_gradients(model, z, 2);
  }

  SUBCASE("bootstrap with channel mixing") {
    SchemeConfig config;
    config.kind = SchemeKind::Bootstrap;
    config.attention = AttentionKind::Conv1x1;
    config.n_branches = 2;
    config.keep_ratio = 0.75;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{43});
    set_bootstrap_masks(model, row_lattice_mask(6, 6), Seed{422});
    randomize_attention(model, 62);
    check_gradients(model, z, 3);
  }

  SUBCASE("bootstrap acting in the image domain") {
    SchemeConfig config;
    config.kind = SchemeKind::Bootstrap;
    config.n_branches = 2;
    config.keep_ratio = 0.75;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{44});
    set_bootstrap_masks(model, row_lattice_mask(6, 6), Seed{423});
    model.input_is_kspace = false;
    randomize_attention(model, 63);
    check_gradients(model, z, 4);
  }

  SUBCASE("residual with scalar gates") {
    SchemeConfig config;
    config.kind = SchemeKind::Residual;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{45});
    randomize_attention(model, 64);
    check_gradients(model, z, 5);
  }

  SUBCASE("residual with channel mixing") {
    SchemeConfig config;
    config.kind = SchemeKind::Residual;
    config.attention = AttentionKind::Conv1x1;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{46});
    randomize_attention(model, 65);
    check_gradients(model, z, 6);
  }

  SUBCASE("iterative with scalar gates") {
    SchemeConfig config;
    config.kind = SchemeKind::Iterative;
    config.n_branches = 3;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{47});
    randomize_attention(model, 66);
    check_gradients(model, z, 7);
  }

  SUBCASE("iterative with channel mixing") {
    SchemeConfig config;
    config.kind = SchemeKind::Iterative;
    config.attention = AttentionKind::Conv1x1;
    config.n_branches = 2;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{48});
    randomize_attention(model, 67);
    check_gradients(model, z, 8);
  }

  SUBCASE("iterative with raw-mean pooling") {
    SchemeConfig config;
    config.kind = SchemeKind::Iterative;
    config.n_branches = 2;
    config.pool_magnitude = false;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{49});
    randomize_attention(model, 68);
    check_gradients(model, z, 9);
  }

  SUBCASE("buffer and shape mismatches are rejected") {
    SchemeModel model = build_scheme_model(backbone(), SchemeConfig{}, Seed{41});
    std::vector<double> wrong(model.params.size() + 1, 0.0);
    RealTensor u({2, 6, 6});
    CHECK_THROWS_AS(scheme_backward(model, z, u, wrong), std::invalid_argument);
    SchemeConfig config;
    config.kind = SchemeKind::Residual;
    SchemeModel rmodel = build_scheme_model(backbone(), config, Seed{45});
    std::vector<double> grads(rmodel.params.size(), 0.0);
    RealTensor bad({2, 3, 3});
    CHECK_THROWS_AS(scheme_backward(rmodel, z, bad, grads), std::invalid_argument);
  }
}

TEST_CASE("the aggregated basis factorizes every scheme") {
  const RealTensor z = random_real({2, 6, 6}, 777);
  const std::size_t split = 2;  // after the backbone ReLU

  const auto check_both_modes = [&](SchemeModel& model, double tol) {
    CHECK(basis_identity_gap(model, z, split, false) < tol);
    CHECK(basis_identity_gap(model, z, split, true) < tol);
  };

  SUBCASE("baseline") {
    SchemeModel model = build_scheme_model(backbone(), SchemeConfig{}, Seed{51});
    check_both_modes(model, 1e-10);
  }

  SUBCASE("bootstrap with scalar gates") {
    SchemeConfig config;
    config.kind = SchemeKind::Bootstrap;
    config.n_branches = 3;
    config.keep_ratio = 0.7;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{52});
    set_bootstrap_masks(model, row_lattice_mask(6, 6), Seed{520});
    randomize_attention(model, 71);
    check_both_modes(model, 1e-10);

    const AggregatedBasis basis = aggregated_basis(model, z, split);
    REQUIRE(basis.branch_atoms.size() == 3);
    REQUIRE(basis.weights.size() == 3);
    // Analysis atoms vanish off the branch's sampling set.
    const SamplingMask& m = model.masks[1];
    const Eigen::Index start = static_cast<Eigen::Index>(basis.branch_atoms[0]);
    for (Eigen::Index j = 0; j < 5; ++j)
      for (std::size_t i = 0; i < 36; ++i)
        if (!m.is_selected(i)) {
          CHECK(basis.B_at(static_cast<Eigen::Index>(i), start + j) == 0.0);
          CHECK(basis.B_at(static_cast<Eigen::Index>(36 + i), start + j) == 0.0);
        }
  }

  SUBCASE("bootstrap with channel mixing in the image domain") {
    SchemeConfig config;
    config.kind = SchemeKind::Bootstrap;
    config.attention = AttentionKind::Conv1x1;
    config.n_branches = 2;
    config.keep_ratio = 0.75;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{53});
    set_bootstrap_masks(model, row_lattice_mask(6, 6), Seed{530});
    model.input_is_kspace = false;
    randomize_attention(model, 72);
    check_both_modes(model, 1e-9);
  }

  SUBCASE("residual with scalar gates keeps an identity block") {
    SchemeConfig config;
    config.kind = SchemeKind::Residual;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{54});
    randomize_attention(model, 73);
    check_both_modes(model, 1e-10);

    const AggregatedBasis basis = aggregated_basis(model, z, split);
    REQUIRE(basis.branch_atoms[0] == z.size());
    for (std::size_t k = 0; k < z.size(); ++k) {
      const Eigen::Index j = static_cast<Eigen::Index>(k);
      CHECK(basis.B_at(j, j) == 1.0);
      CHECK(basis.B_at(static_cast<Eigen::Index>(z.size()), j) == 0.0);
      CHECK(basis.B_tilde_at(j, j) == basis.weights[0]);
    }
  }

  SUBCASE("residual with channel mixing appends one constant atom") {
    SchemeConfig config;
    config.kind = SchemeKind::Residual;
    config.attention = AttentionKind::Conv1x1;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{55});
    randomize_attention(model, 74);
    check_both_modes(model, 1e-10);

    const AggregatedBasis basis = aggregated_basis(model, z, split);
    REQUIRE(basis.branch_atoms.back() == 1);
    const Eigen::Index last = basis.B_at.cols() - 1;
    for (std::size_t k = 0; k < z.size(); ++k)
      CHECK(basis.B_at(static_cast<Eigen::Index>(k), last) == 0.0);
    CHECK(basis.B_at(static_cast<Eigen::Index>(z.size()), last) == 1.0);
    const double* bias = model.params.slice_values("attention.bias");
    for (std::size_t p = 0; p < 36; ++p) {
      CHECK(basis.B_tilde_at(static_cast<Eigen::Index>(p), last) == bias[0]);
      CHECK(basis.B_tilde_at(static_cast<Eigen::Index>(36 + p), last) == bias[1]);
    }
  }

  SUBCASE("iterative with scalar gates chains transfer factors") {
    SchemeConfig config;
    config.kind = SchemeKind::Iterative;
    config.n_branches = 3;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{56});
    randomize_attention(model, 75);
    check_both_modes(model, 1e-9);
  }

  SUBCASE("iterative with channel mixing") {
    SchemeConfig config;
    config.kind = SchemeKind::Iterative;
    config.attention = AttentionKind::Conv1x1;
    config.n_branches = 2;
    SchemeModel model = build_scheme_model(backbone(), config, Seed{57});
    randomize_attention(model, 76);
    check_both_modes(model, 1e-9);
  }

  SUBCASE("input dimension mismatches are rejected") {
    SchemeModel model = build_scheme_model(backbone(), SchemeConfig{}, Seed{51});
    const AggregatedBasis basis = aggregated_basis(model, z, split);
    CHECK_THROWS_AS(aggregated_reconstruct(basis, random_real({2, 4, 4}, 1)),
                    std::invalid_argument);
  }
}

TEST_CASE("parameter overhead follows the published counting convention") {
  const std::size_t base = 25'154'336;
  CHECK(param_overhead(AttentionKind::Mlp, 10, 4, base).params == 1354);
  CHECK(param_overhead(AttentionKind::Mlp, 4, 4, base).params == 4 * 128 + 64 + 4);
  CHECK(param_overhead(AttentionKind::Conv1x1, 2, 16, base).params == 2080);
  CHECK(param_overhead(AttentionKind::Conv1x1, 4, 16, base).params == 4128);
  CHECK(param_overhead(AttentionKind::Mlp, 10, 4, base).percent ==
        doctest::Approx(100.0 * 1354 / base).epsilon(1e-15));
  CHECK(param_overhead(AttentionKind::Conv1x1, 4, 16, base).percent < 0.02);
  CHECK_THROWS_AS(param_overhead(AttentionKind::Mlp, 0, 4, base), std::invalid_argument);
  CHECK_THROWS_AS(param_overhead(AttentionKind::Mlp, 10, 4, 0), std::invalid_argument);
  CHECK_THROWS_AS(param_overhead(AttentionKind::Conv1x1, 2, 0, base), std::invalid_argument);

  SchemeConfig config;
  config.kind = SchemeKind::Iterative;
  config.n_branches = 3;
  SchemeModel model = build_scheme_model(backbone(), config, Seed{61});
  CHECK(attention_param_count(model) == param_overhead(AttentionKind::Mlp, 3, 1, base).params);

  config.attention = AttentionKind::Conv1x1;
  SchemeModel cmodel = build_scheme_model(backbone(), config, Seed{61});
  CHECK(attention_param_count(cmodel) == param_overhead(AttentionKind::Conv1x1, 3, 1, base).params);

  SchemeModel bmodel = build_scheme_model(backbone(), SchemeConfig{}, Seed{61});
  CHECK(attention_param_count(bmodel) == 0);
}

TEST_CASE("the scheme census refines as branches are added") {
  NetworkSpec tiny;
  tiny.in_channels = 2;
  tiny.out_channels = 2;
  tiny.layers.push_back(conv_layer(2, 2, 1, 1, ConvMode::Correlate, true));
  tiny.layers.push_back(plain_layer(LayerKind::Relu, 2));
  tiny.layers.push_back(conv_layer(2, 2, 1, 1, ConvMode::Correlate, true));
  const std::array<std::size_t, 3> shape = {2, 2, 2};
  const ProbeCloud cloud{96, Seed{314}, 1.0};

  SUBCASE("the baseline census equals the plain network census") {
    SchemeModel model = build_scheme_model(tiny, SchemeConfig{}, Seed{71});
    const RegionCensus ours = scheme_census(model, shape, cloud);
    const std::vector<NetView> views = {{&model.net, &model.params}};
    const RegionCensus plain = region_census(views, shape, cloud);
    CHECK(ours.n_distinct == plain.n_distinct);
    CHECK(ours.n_neurons == plain.n_neurons);
    CHECK(ours.n_probes == plain.n_probes);
    CHECK(ours.pattern_bound == plain.pattern_bound);
    const RegionCensus again = scheme_census(model, shape, cloud);
    CHECK(again.n_distinct == ours.n_distinct);
  }

  SUBCASE("iterative depth never coarsens the partition") {
    SchemeConfig one;
    one.kind = SchemeKind::Iterative;
    one.n_branches = 1;
    SchemeConfig two = one;
    two.n_branches = 2;
    SchemeModel m1 = build_scheme_model(tiny, one, Seed{72});
    SchemeModel m2 = build_scheme_model(tiny, two, Seed{72});
    const RegionCensus c1 = scheme_census(m1, shape, cloud);
    const RegionCensus c2 = scheme_census(m2, shape, cloud);
    CHECK(c2.n_neurons == 2 * c1.n_neurons);
    CHECK(c2.n_distinct >= c1.n_distinct);
    CHECK(static_cast<double>(c2.n_distinct) <= c2.pattern_bound);
  }

  SUBCASE("bootstrap branches only split masked single-branch regions") {
    SchemeConfig config;
    config.kind = SchemeKind::Bootstrap;
    config.n_branches = 2;
    config.keep_ratio = 0.5;
    SchemeModel model = build_scheme_model(tiny, config, Seed{73});
    set_bootstrap_masks(model, make_mask({2, 2}, {1, 1}, {1, 1}), Seed{730});
    const RegionCensus both = scheme_census(model, shape, cloud);
    SchemeModel first = model;
    first.scheme.n_branches = 1;
    first.masks.resize(1);
    const RegionCensus single = scheme_census(first, shape, cloud);
    CHECK(both.n_distinct >= single.n_distinct);
    CHECK(both.n_neurons == 2 * single.n_neurons);
  }

  SUBCASE("empty clouds are rejected") {
    SchemeModel model = build_scheme_model(tiny, SchemeConfig{}, Seed{71});
    CHECK_THROWS_AS(scheme_census(model, shape, ProbeCloud{0, Seed{1}, 1.0}),
                    std::invalid_argument);
  }
}

TEST_CASE("model construction rejects inconsistent configurations") {
  NetworkSpec widen;
  widen.in_channels = 2;
  widen.out_channels = 4;
  widen.layers.push_back(conv_layer(2, 4, 3, 3, ConvMode::Correlate, true));

  SchemeConfig residual;
  residual.kind = SchemeKind::Residual;
  CHECK_THROWS_AS(build_scheme_model(widen, residual, Seed{1}), std::invalid_argument);

  SchemeConfig iterative;
  iterative.kind = SchemeKind::Iterative;
  iterative.n_branches = 2;
  CHECK_THROWS_AS(build_scheme_model(widen, iterative, Seed{1}), std::invalid_argument);

  SchemeConfig bootstrap;
  bootstrap.kind = SchemeKind::Bootstrap;
  bootstrap.n_branches = 0;
  CHECK_THROWS_AS(build_scheme_model(backbone(), bootstrap, Seed{1}), std::invalid_argument);
  bootstrap.n_branches = 2;
  bootstrap.keep_ratio = 0.0;
  CHECK_THROWS_AS(build_scheme_model(backbone(), bootstrap, Seed{1}), std::invalid_argument);
  bootstrap.keep_ratio = 1.5;
  CHECK_THROWS_AS(build_scheme_model(backbone(), bootstrap, Seed{1}), std::invalid_argument);

  // Residual always carries two branches, baseline one.
  SchemeConfig wide_residual;
  wide_residual.kind = SchemeKind::Residual;
  wide_residual.n_branches = 5;
  CHECK(build_scheme_model(backbone(), wide_residual, Seed{1}).scheme.n_branches == 2);
  CHECK(build_scheme_model(backbone(), SchemeConfig{}, Seed{1}).scheme.n_branches == 1);

  // set_bootstrap_masks only applies to bootstrap models.
  SchemeModel rmodel = build_scheme_model(backbone(), wide_residual, Seed{1});
  CHECK_THROWS_AS(set_bootstrap_masks(rmodel, row_lattice_mask(6, 6), Seed{2}),
                  std::invalid_argument);

  // The iterative scheme needs a shape-preserving backbone at run time.
  NetworkSpec shrink;
  shrink.in_channels = 2;
  shrink.out_channels = 2;
  shrink.layers.push_back(conv_layer(2, 2, 3, 3, ConvMode::Correlate, true));
  shrink.layers.push_back(plain_layer(LayerKind::AvgPool, 2));
  SchemeConfig it2 = iterative;
  SchemeModel smodel = build_scheme_model(shrink, it2, Seed{1});
  CHECK_THROWS_AS(scheme_output(smodel, random_real({2, 6, 6}, 5)), std::invalid_argument);
}

}  // TEST_SUITE
