#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

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

LayerSpec tagged_layer(LayerKind kind, std::size_t ch, std::string tag,
                       SkipMode mode = SkipMode::Add) {
  LayerSpec l = plain_layer(kind, ch);
  l.tag = std::move(tag);
  l.skip_mode = mode;
  return l;
}

ParamStore randomized_params(const NetworkSpec& spec, std::uint64_t seed) {
  ParamStore p = init_params(spec, Seed{seed});
  Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
  for (double& v : p.values) v = rng.uniform(-0.7, 0.7);
  return p;
}

Eigen::VectorXd flat(const RealTensor& t) {
  return Eigen::Map<const Eigen::VectorXd>(t.data(), static_cast<Eigen::Index>(t.size()));
}

double max_abs_diff(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b) {
  REQUIRE(a.rows() == b.rows());
  REQUIRE(a.cols() == b.cols());
  return (a - b).cwiseAbs().maxCoeff();
}

void set_taps(ParamStore& params, std::size_t layer, std::initializer_list<double> taps) {
  char buf[8];
  std::snprintf(buf, sizeof(buf), "%03zu", layer);
  double* t = params.slice_values("layer" + std::string(buf) + ".taps");
  std::size_t k = 0;
  for (double v : taps) t[k++] = v;
}

}  // namespace

TEST_SUITE("geometry") {

TEST_CASE("layer matrices agree with the running layers") {
  NetworkSpec spec;
  spec.in_channels = 2;
  spec.out_channels = 2;
  spec.layers.push_back(conv_layer(2, 3, 3, 2, ConvMode::Correlate, true));
  spec.layers.push_back(plain_layer(LayerKind::AffineBn, 3));
  spec.layers.push_back(conv_layer(3, 2, 2, 3, ConvMode::Convolve, false));
  spec.layers.push_back(plain_layer(LayerKind::AvgPool, 2));
  spec.layers.push_back(plain_layer(LayerKind::ZeroUnpool, 2));
  LayerSpec lin = plain_layer(LayerKind::LinearH, 2);
  lin.proj = HeightMatrix(3, 4);
  {
    Rng rng(400);
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 4; ++j) lin.proj.at(i, j) = rng.uniform(-1.0, 1.0);
  }
  spec.layers.push_back(lin);
  spec.layers.push_back(plain_layer(LayerKind::Relu, 2));
  spec.validate();
  const ParamStore params = randomized_params(spec, 41);
  const LayerShapes shapes = compute_shapes(spec, 4, 4);

  for (std::size_t i = 0; i + 1 < spec.layers.size(); ++i) {
    CAPTURE(i);
    const LayerMatrix lm = layer_matrices(spec, params, i, 4, 4);
    const auto in = shapes.in[i];
    for (std::uint64_t trial = 0; trial < 3; ++trial) {
      const RealTensor x = random_real({in[0], in[1], in[2]}, 1000 * i + trial);
      SegmentOptions opts;
      opts.first = i;
      opts.last = i + 1;
      const Eigen::VectorXd direct = flat(run_segment(spec, params, x, opts));
      const Eigen::VectorXd via = lm.op * flat(x) + lm.bias;
      CHECK(max_abs_diff(direct, via) < 1e-12);
    }
    const Eigen::MatrixXd aug = lm.augmented();
    CHECK(aug.rows() == lm.op.rows() + 1);
    CHECK(aug.cols() == lm.op.cols() + 1);
    CHECK(aug.bottomLeftCorner(1, lm.op.cols()).isZero(0.0));
    CHECK(aug(lm.op.rows(), lm.op.cols()) == 1.0);
    CHECK(max_abs_diff(aug.topRightCorner(lm.op.rows(), 1), lm.bias) == 0.0);
  }

  CHECK_THROWS_AS(layer_matrices(spec, params, 6, 4, 4), std::invalid_argument);
  CHECK_THROWS_AS(layer_matrices(spec, params, 99, 4, 4), std::invalid_argument);
  CHECK_THROWS_AS(layer_matrices(spec, params, 0, 4, 4, /*cap=*/8), std::runtime_error);
}

TEST_CASE("a two-tap filter on a length-3 signal yields the circulant rows") {
  NetworkSpec spec;
  spec.in_channels = spec.out_channels = 1;
  spec.layers.push_back(conv_layer(1, 1, 2, 1, ConvMode::Correlate, false));
  spec.validate();
  ParamStore params = init_params(spec, Seed{0});
  set_taps(params, 0, {1.0, 2.0});

  const LayerMatrix lm = layer_matrices(spec, params, 0, 3, 1);
  const double expected[3][3] = {{1, 2, 0}, {0, 1, 2}, {2, 0, 1}};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(lm.op(i, j) == expected[i][j]);
  CHECK(lm.bias.isZero(0.0));
}

TEST_CASE("segment probing reproduces products of layer factors") {
  SUBCASE("purely linear chain") {
    NetworkSpec spec;
    spec.in_channels = spec.out_channels = 2;
    spec.layers.push_back(conv_layer(2, 2, 2, 2, ConvMode::Correlate, true));
    spec.layers.push_back(plain_layer(LayerKind::AffineBn, 2));
    spec.layers.push_back(plain_layer(LayerKind::AvgPool, 2));
    spec.validate();
    const ParamStore params = randomized_params(spec, 77);

    Eigen::MatrixXd product = layer_matrices(spec, params, 0, 4, 4).augmented();
    product = layer_matrices(spec, params, 1, 4, 4).augmented() * product;
    product = layer_matrices(spec, params, 2, 4, 4).augmented() * product;

    const AffineSegment seg = materialize_segment(spec, params, 0, 3, 4, 4, nullptr, false);
    CHECK(seg.skip_tags.empty());
    CHECK(seg.emit_tags.empty());
    const std::size_t rows = seg.main.rows();
    CHECK(max_abs_diff(seg.main, product.topLeftCorner(rows, seg.main.cols())) < 1e-12);
    CHECK(max_abs_diff(seg.offset, product.topRightCorner(rows, 1)) < 1e-12);
  }

  SUBCASE("traced ReLU becomes a fixed mask between the factors") {
    NetworkSpec spec;
    spec.in_channels = spec.out_channels = 1;
    spec.layers.push_back(conv_layer(1, 1, 2, 2, ConvMode::Correlate, true));
    spec.layers.push_back(plain_layer(LayerKind::Relu, 1));
    spec.layers.push_back(conv_layer(1, 1, 2, 2, ConvMode::Convolve, true));
    spec.validate();
    const ParamStore params = randomized_params(spec, 5);
    const RealTensor z = random_real({1, 3, 3}, 99);

    ForwardOptions fwd;
    fwd.want_trace = true;
    const ActivationTrace trace = forward_ex(spec, params, z, fwd).trace;
    REQUIRE(trace.patterns.size() == 1);

    const LayerMatrix m1 = layer_matrices(spec, params, 0, 3, 3);
    const LayerMatrix m2 = layer_matrices(spec, params, 2, 3, 3);
    Eigen::VectorXd mask(9);
    for (int k = 0; k < 9; ++k) mask(k) = trace.patterns[0][k] ? 1.0 : 0.0;
    const Eigen::MatrixXd masked = m2.op * mask.asDiagonal();

    const AffineSegment seg = materialize_segment(spec, params, 0, 3, 3, 3, &trace, false);
    CHECK(max_abs_diff(seg.main, masked * m1.op) < 1e-12);
    CHECK(max_abs_diff(seg.offset, masked * m1.bias + m2.bias) < 1e-12);

    // With the mask active the segment is an exact linear-in-x map even
    // across the kink, evaluated here off z's own pattern region.
    const RealTensor far = random_real({1, 3, 3}, 123);
    SegmentOptions opts;
    opts.patterns = &trace;
    const Eigen::VectorXd via_run = flat(run_segment(spec, params, far, opts));
    const Eigen::VectorXd via_mat = seg.main * flat(far) + seg.offset;
    CHECK(max_abs_diff(via_run, via_mat) < 1e-12);
  }
}

TEST_CASE("segments account for skip signals crossing either boundary") {
  NetworkSpec spec;
  spec.in_channels = spec.out_channels = 1;
  spec.layers.push_back(conv_layer(1, 1, 1, 1, ConvMode::Correlate, true));
  spec.layers.push_back(tagged_layer(LayerKind::SkipEmit, 1, "a"));
  spec.layers.push_back(conv_layer(1, 1, 2, 1, ConvMode::Correlate, true));
  spec.layers.push_back(tagged_layer(LayerKind::SkipJoin, 1, "a"));
  spec.layers.push_back(conv_layer(1, 1, 1, 2, ConvMode::Convolve, true));
  spec.validate();
  const ParamStore params = randomized_params(spec, 9);
  const LayerMatrix m0 = layer_matrices(spec, params, 0, 2, 2);
  const LayerMatrix m2 = layer_matrices(spec, params, 2, 2, 2);
  const LayerMatrix m4 = layer_matrices(spec, params, 4, 2, 2);

  SUBCASE("join inside, emit before: the recorded signal becomes an input block") {
    const AffineSegment seg = materialize_segment(spec, params, 2, 5, 2, 2, nullptr, false);
    REQUIRE(seg.skip_tags == std::vector<std::string>{"a"});
    REQUIRE(seg.skip_cols == std::vector<std::size_t>{4});
    CHECK(seg.emit_tags.empty());
    CHECK(max_abs_diff(seg.main, m4.op * m2.op) < 1e-12);
    CHECK(max_abs_diff(seg.skip, m4.op) < 1e-12);
    CHECK(max_abs_diff(seg.offset, m4.op * m2.bias + m4.bias) < 1e-12);
  }

  SUBCASE("emit inside, join after: the recorded signal becomes an output block") {
    const AffineSegment seg = materialize_segment(spec, params, 0, 2, 2, 2, nullptr, false);
    CHECK(seg.skip_tags.empty());
    REQUIRE(seg.emit_tags == std::vector<std::string>{"a"});
    REQUIRE(seg.emit_rows == std::vector<std::size_t>{4});
    REQUIRE(seg.main.rows() == 8);
    CHECK(max_abs_diff(seg.main.topRows(4), m0.op) < 1e-12);
    CHECK(max_abs_diff(seg.main.bottomRows(4), m0.op) < 1e-12);
    CHECK(max_abs_diff(seg.offset.head(4), m0.bias) < 1e-12);
    CHECK(max_abs_diff(seg.offset.tail(4), m0.bias) < 1e-12);
  }

  SUBCASE("the two half-segments compose to the whole network") {
    const AffineSegment head = materialize_segment(spec, params, 0, 2, 2, 2, nullptr, false);
    const AffineSegment tail = materialize_segment(spec, params, 2, 5, 2, 2, nullptr, false);
    const RealTensor x = random_real({1, 2, 2}, 31);
    const Eigen::VectorXd mid = head.main * flat(x) + head.offset;
    const Eigen::VectorXd out =
        tail.main * mid.head(4) + tail.skip * mid.tail(4) + tail.offset;
    CHECK(max_abs_diff(out, flat(forward(spec, params, x))) < 1e-12);
  }
}

TEST_CASE("basis factors reproduce the forward pass") {
  NetworkSpec spec;
  spec.in_channels = 1;
  spec.out_channels = 1;
  spec.layers.push_back(conv_layer(1, 2, 2, 1, ConvMode::Correlate, true));
  spec.layers.push_back(plain_layer(LayerKind::Relu, 2));
  spec.layers.push_back(tagged_layer(LayerKind::SkipEmit, 2, "s"));
  spec.layers.push_back(conv_layer(2, 2, 2, 2, ConvMode::Correlate, true));
  spec.layers.push_back(plain_layer(LayerKind::Relu, 2));
  spec.layers.push_back(conv_layer(2, 2, 1, 1, ConvMode::Convolve, true));
  spec.layers.push_back(tagged_layer(LayerKind::SkipJoin, 2, "s"));
  spec.layers.push_back(conv_layer(2, 1, 2, 2, ConvMode::Convolve, true));
  spec.validate();
  const ParamStore params = randomized_params(spec, 17);

  SUBCASE("identity at the activation pattern, at several split points") {
    for (std::size_t split : {std::size_t{0}, std::size_t{1}, std::size_t{4},
                              std::size_t{6}, spec.layers.size()}) {
      CAPTURE(split);
      for (std::uint64_t t = 0; t < 5; ++t) {
        const RealTensor z = random_real({1, 2, 2}, 700 + t);
        const BasisDecomposition basis = extract_basis(spec, params, z, split);
        const Eigen::VectorXd recon = basis_reconstruct(basis, z);
        const Eigen::VectorXd direct = flat(forward(spec, params, z));
        CHECK(max_abs_diff(recon, direct) < 1e-10);
        std::size_t atoms = 0;
        for (std::size_t b : basis.atom_blocks) atoms += b;
        CHECK(static_cast<Eigen::Index>(atoms) == basis.B.cols());
        CHECK(basis.B.cols() == basis.B_tilde.cols());
        CHECK(basis.atom_blocks.back() == 1);
      }
    }
  }

  SUBCASE("skip signals crossing the split appear as extra atoms") {
    const RealTensor z = random_real({1, 2, 2}, 55);
    const BasisDecomposition basis = extract_basis(spec, params, z, 4);
    CHECK(basis.skip_tags == std::vector<std::string>{"s"});
    // leading split block, one skip block, constant atom
    REQUIRE(basis.atom_blocks.size() == 3);
    CHECK(basis.atom_blocks[0] == 8);
    CHECK(basis.atom_blocks[1] == 8);
    const BasisDecomposition late = extract_basis(spec, params, z, 7);
    CHECK(late.skip_tags.empty());
    CHECK(late.atom_blocks.size() == 2);
  }

  SUBCASE("linear mode matches the ReLU-free forward pass") {
    const RealTensor z = random_real({1, 2, 2}, 88);
    const BasisDecomposition basis = extract_basis(spec, params, z, 4, true);
    ForwardOptions lin;
    lin.linear_mode = true;
    const Eigen::VectorXd direct = flat(forward_ex(spec, params, z, lin).output);
    CHECK(max_abs_diff(basis_reconstruct(basis, z), direct) < 1e-10);
    CHECK(basis.pattern.patterns.empty());
  }

  SUBCASE("an identity network factors into identity bases") {
    NetworkSpec id_spec;
    id_spec.in_channels = id_spec.out_channels = 1;
    id_spec.layers.push_back(conv_layer(1, 1, 1, 1, ConvMode::Correlate, false));
    id_spec.validate();
    ParamStore id_params = init_params(id_spec, Seed{0});
    set_taps(id_params, 0, {1.0});

    const RealTensor z = random_real({1, 2, 2}, 3);
    const BasisDecomposition basis = extract_basis(id_spec, id_params, z, 0);
    CHECK(basis.B.rows() == 5);
    CHECK(basis.B.cols() == 5);
    CHECK(max_abs_diff(basis.B, Eigen::MatrixXd::Identity(5, 5)) == 0.0);
    const Eigen::VectorXd recon = basis_reconstruct(basis, z);
    for (int k = 0; k < 4; ++k) CHECK(recon(k) == z[static_cast<std::size_t>(k)]);
  }

  CHECK_THROWS_AS(extract_basis(spec, params, random_real({1, 2, 2}, 1), 99),
                  std::invalid_argument);
}

TEST_CASE("haar matrix is orthogonal and frame filters satisfy their identities") {
  const Eigen::MatrixXd h = haar_matrix(6);
  CHECK(max_abs_diff(h * h.transpose(), Eigen::MatrixXd::Identity(6, 6)) < 1e-15);
  CHECK(max_abs_diff(h.transpose() * h, Eigen::MatrixXd::Identity(6, 6)) < 1e-15);
  CHECK_THROWS_AS(haar_matrix(5), std::invalid_argument);
  CHECK_THROWS_AS(haar_matrix(0), std::invalid_argument);

  SUBCASE("plain level") {
    const FrameLevel level = build_frame_filters(1, 2, 2, 4, 1.0, false, Seed{7});
    CHECK(level.c == 0.5);
    CHECK(level.psi.rows() == 2);
    CHECK(level.psi.cols() == 2);
    const Eigen::MatrixXd gram = level.psi * level.psi_tilde.transpose();
    CHECK(max_abs_diff(gram, 0.5 * Eigen::MatrixXd::Identity(2, 2)) < 1e-14);
    const Eigen::MatrixXd pool = level.phi_tilde * level.phi.transpose();
    CHECK(max_abs_diff(pool, Eigen::MatrixXd::Identity(4, 4)) < 1e-14);
  }

  SUBCASE("skip level rescales the tap constant") {
    const FrameLevel level = build_frame_filters(1, 3, 2, 4, 1.0, true, Seed{8});
    CHECK(level.c == 0.25);
    const Eigen::MatrixXd gram = level.psi * level.psi_tilde.transpose();
    CHECK(max_abs_diff(gram, 0.25 * Eigen::MatrixXd::Identity(2, 2)) < 1e-14);
  }

  SUBCASE("report covers every level") {
    std::vector<FrameLevel> levels;
    levels.push_back(build_frame_filters(2, 4, 2, 4, 2.0, false, Seed{1}));
    levels.push_back(build_frame_filters(4, 9, 2, 4, 2.0, true, Seed{2}));
    const FrameReport report = frame_report(levels);
    REQUIRE(report.levels.size() == 2);
    CHECK(report.pass);
    for (const auto& row : report.levels) {
      CHECK(row.psi_residual < 1e-12);
      CHECK(row.phi_residual < 1e-12);
    }
    const std::string json = frame_report_to_json(report);
    CHECK(json.find("\"pass\": true") != std::string::npos);
    CHECK(json.find("filter_residual") != std::string::npos);

    std::vector<FrameLevel> broken = levels;
    broken[0].psi(0, 0) += 1e-6;
    CHECK_FALSE(frame_report(broken).pass);
  }

  CHECK_THROWS_AS(build_frame_filters(2, 3, 2, 4, 1.0, false, Seed{0}),
                  std::invalid_argument);  // q_out < r * q_in
  CHECK_THROWS_AS(build_frame_filters(1, 2, 2, 5, 1.0, false, Seed{0}),
                  std::invalid_argument);  // odd pooling size
  CHECK_THROWS_AS(build_frame_filters(1, 2, 2, 4, 0.0, false, Seed{0}),
                  std::invalid_argument);  // alpha must be positive
}

TEST_CASE("linear frame networks reconstruct their input exactly") {
  struct Setup {
    std::vector<FrameLevel> levels;
    const char* label;
  };
  std::vector<Setup> setups;
  setups.push_back({{build_frame_filters(2, 4, 2, 4, 1.0, false, Seed{21})}, "one level"});
  setups.push_back({{build_frame_filters(2, 4, 2, 4, 1.5, true, Seed{22})}, "one level skip"});
  setups.push_back({{build_frame_filters(2, 4, 2, 4, 2.0, false, Seed{23}),
                     build_frame_filters(4, 9, 2, 4, 2.0, false, Seed{24})},
                    "two levels"});
  setups.push_back({{build_frame_filters(1, 2, 2, 2, 2.0, true, Seed{25}),
                     build_frame_filters(2, 5, 2, 2, 0.5, false, Seed{26}),
                     build_frame_filters(5, 10, 2, 2, 1.0, true, Seed{27})},
                    "three levels mixed skips"});

  for (const Setup& setup : setups) {
    CAPTURE(setup.label);
    CHECK(frame_report(setup.levels).pass);
    const FrameNet net = build_frame_net(setup.levels, false);
    const std::size_t m = setup.levels.front().m;
    const PrReport report =
        check_perfect_reconstruction(net.spec, net.params, m, 3, 20, Seed{500});
    CHECK(report.pass);
    CHECK(report.max_rel_error < 1e-12);
    CHECK(report.n_probes == 20);
  }

  SUBCASE("a perturbed tap breaks reconstruction") {
    const FrameNet net = build_frame_net(setups[0].levels, false);
    ParamStore bad = net.params;
    bad.values.at(0) += 1e-3;
    const PrReport report = check_perfect_reconstruction(net.spec, bad, 4, 3, 20, Seed{500});
    CHECK_FALSE(report.pass);
    CHECK(report.max_rel_error > 1e-6);
  }

  SUBCASE("networks with ReLUs are rejected") {
    const FrameNet net = build_frame_net(setups[0].levels, true);
    CHECK_THROWS_AS(check_perfect_reconstruction(net.spec, net.params, 4, 3, 5, Seed{1}),
                    std::invalid_argument);
  }

  SUBCASE("level chains must connect") {
    std::vector<FrameLevel> levels = {build_frame_filters(2, 4, 2, 4, 1.0, false, Seed{1}),
                                      build_frame_filters(3, 7, 2, 4, 1.0, false, Seed{2})};
    CHECK_THROWS_AS(build_frame_net(levels, false), std::invalid_argument);
  }
}

TEST_CASE("hyperplane report returns the circulant normals of a two-tap filter") {
  NetworkSpec spec;
  spec.in_channels = spec.out_channels = 1;
  spec.layers.push_back(conv_layer(1, 1, 2, 1, ConvMode::Correlate, false));
  spec.layers.push_back(plain_layer(LayerKind::Relu, 1));
  spec.validate();
  ParamStore params = init_params(spec, Seed{0});
  set_taps(params, 0, {1.0, 2.0});

  RealTensor z({1, 3, 1});
  z[0] = 0.3;
  z[1] = -0.2;
  z[2] = 0.5;
  const HyperplaneReport report = hyperplane_report(spec, params, z, 1);
  CHECK(report.layer == 1);
  CHECK(report.prev_relu_layer == HyperplaneReport::npos);
  CHECK(report.prev_pattern == std::vector<std::uint8_t>(3, 1));

  const double expected[3][3] = {{1, 2, 0}, {0, 1, 2}, {2, 0, 1}};
  REQUIRE(report.normals.rows() == 3);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) CHECK(report.normals(i, j) == expected[i][j]);
  CHECK(report.offsets.isZero(0.0));

  const double pre[3] = {0.3 + 2 * -0.2, -0.2 + 2 * 0.5, 0.5 + 2 * 0.3};
  const double root5 = std::sqrt(5.0);
  for (int i = 0; i < 3; ++i) {
    CHECK(report.pre_activation(i) == doctest::Approx(pre[i]).epsilon(1e-14));
    CHECK(report.norm(i) == doctest::Approx(root5).epsilon(1e-14));
    CHECK(report.distance(i) == doctest::Approx(pre[i] / root5).epsilon(1e-13));
    CHECK(report.activation(i) == doctest::Approx(std::max(0.0, pre[i])).epsilon(1e-14));
    CHECK(report.degenerate[i] == 0);
  }

  SUBCASE("csv round trip") {
    namespace fs = std::filesystem;
    const fs::path path = fs::temp_directory_path() / "framelet_hyperplane_test.csv";
    write_hyperplane_csv(path, report);
    std::ifstream in(path);
    REQUIRE(in.good());
    std::string header;
    std::getline(in, header);
    CHECK(header == "neuron,offset,pre_activation,activation,norm,signed_distance,degenerate");
    std::size_t rows = 0;
    std::string line;
    while (std::getline(in, line))
      if (!line.empty()) ++rows;
    CHECK(rows == 3);
    fs::remove(path);
  }
}

TEST_CASE("a zero-weight neuron is reported degenerate with distance zero") {
  NetworkSpec spec;
  spec.in_channels = spec.out_channels = 1;
  spec.layers.push_back(conv_layer(1, 1, 2, 1, ConvMode::Correlate, true));
  spec.layers.push_back(plain_layer(LayerKind::Relu, 1));
  spec.validate();
  ParamStore params = init_params(spec, Seed{0});
  set_taps(params, 0, {0.0, 0.0});
  params.slice_values("layer000.bias")[0] = -1.0;

  const RealTensor z = random_real({1, 3, 1}, 6);
  const HyperplaneReport report = hyperplane_report(spec, params, z, 1);
  for (int i = 0; i < 3; ++i) {
    CHECK(report.norm(i) == 0.0);
    CHECK(report.degenerate[i] == 1);
    CHECK(report.distance(i) == 0.0);
    CHECK(report.pre_activation(i) == -1.0);
    CHECK(report.activation(i) == 0.0);
  }
}

TEST_CASE("normals vanish exactly on upstream-inactive coordinates") {
  NetworkSpec spec;
  spec.in_channels = spec.out_channels = 2;
  spec.layers.push_back(conv_layer(2, 2, 1, 1, ConvMode::Correlate, false));
  spec.layers.push_back(plain_layer(LayerKind::Relu, 2));
  spec.layers.push_back(conv_layer(2, 2, 1, 1, ConvMode::Correlate, true));
  spec.layers.push_back(plain_layer(LayerKind::Relu, 2));
  spec.validate();
  ParamStore params = init_params(spec, Seed{0});
  set_taps(params, 0, {1.0, 0.0, 0.0, 1.0});
  set_taps(params, 2, {0.6, -0.4, 0.8, 0.9});
  params.slice_values("layer002.bias")[0] = 0.05;
  params.slice_values("layer002.bias")[1] = -0.02;

  RealTensor z({2, 1, 1});
  z[0] = 0.7;
  z[1] = -0.4;  // second first-layer neuron inactive
  const HyperplaneReport report = hyperplane_report(spec, params, z, 3);
  CHECK(report.prev_relu_layer == 1);
  REQUIRE(report.prev_pattern == std::vector<std::uint8_t>{1, 0});

  REQUIRE(report.normals.rows() == 2);
  CHECK(report.normals(0, 0) == 0.6);
  CHECK(report.normals(0, 1) == 0.0);  // exact, not just small
  CHECK(report.normals(1, 0) == 0.8);
  CHECK(report.normals(1, 1) == 0.0);

  // The masked normal against the unconstrained previous pre-activation
  // recovers the pre-activation of this layer.
  const ForwardOptions fwd{.want_trace = true};
  const ActivationTrace trace = forward_ex(spec, params, z, fwd).trace;
  const Eigen::VectorXd pre_prev = flat(trace.pre_activations[0]);
  for (int i = 0; i < 2; ++i) {
    const double via_normal = report.normals.row(i).dot(pre_prev) + report.offsets(i);
    CHECK(via_normal == doctest::Approx(report.pre_activation(i)).epsilon(1e-12));
  }

  SUBCASE("a skip joining between the layers is rejected") {
    NetworkSpec skip_spec;
    skip_spec.in_channels = skip_spec.out_channels = 1;
    skip_spec.layers.push_back(conv_layer(1, 1, 1, 1, ConvMode::Correlate, true));
    skip_spec.layers.push_back(tagged_layer(LayerKind::SkipEmit, 1, "a"));
    skip_spec.layers.push_back(plain_layer(LayerKind::Relu, 1));
    skip_spec.layers.push_back(conv_layer(1, 1, 1, 1, ConvMode::Correlate, true));
    skip_spec.layers.push_back(tagged_layer(LayerKind::SkipJoin, 1, "a"));
    skip_spec.layers.push_back(plain_layer(LayerKind::Relu, 1));
    skip_spec.validate();
    const ParamStore skip_params = randomized_params(skip_spec, 3);
    const RealTensor x = random_real({1, 2, 2}, 4);
    CHECK_THROWS_AS(hyperplane_report(skip_spec, skip_params, x, 5), std::invalid_argument);
    CHECK_NOTHROW(hyperplane_report(skip_spec, skip_params, x, 2));
    CHECK_THROWS_AS(hyperplane_report(skip_spec, skip_params, x, 0), std::invalid_argument);
  }
}

TEST_CASE("decoder frame subset tracks the activation pattern") {
  SUBCASE("identity encoder, scaled decoder") {
    NetworkSpec spec;
    spec.in_channels = spec.out_channels = 1;
    spec.layers.push_back(conv_layer(1, 1, 1, 1, ConvMode::Correlate, false));
    spec.layers.push_back(plain_layer(LayerKind::Relu, 1));
    spec.layers.push_back(conv_layer(1, 1, 1, 1, ConvMode::Correlate, false));
    spec.validate();
    ParamStore params = init_params(spec, Seed{0});
    set_taps(params, 0, {1.0});
    set_taps(params, 2, {2.0});

    RealTensor z({1, 2, 2});
    for (std::size_t k = 0; k < 4; ++k) z[k] = 0.25 * (k + 1);
    const DecoderFrameSubset all = decoder_frame_subset(spec, params, z, 1);
    CHECK(all.selected.size() == 4);
    CHECK(all.ratio == 1.0);
    CHECK(all.reconstruction_error < 1e-15);
    CHECK(max_abs_diff(all.synthesis, 2.0 * Eigen::MatrixXd::Identity(4, 4)) == 0.0);
    CHECK(max_abs_diff(all.xi, flat(z)) == 0.0);

    for (std::size_t k = 0; k < 4; ++k) z[k] = -z[k];
    const DecoderFrameSubset none = decoder_frame_subset(spec, params, z, 1);
    CHECK(none.selected.empty());
    CHECK(none.ratio == 0.0);
    CHECK(none.reconstruction_error < 1e-15);
  }

  SUBCASE("frame network with skips") {
    std::vector<FrameLevel> levels = {build_frame_filters(2, 4, 2, 4, 1.0, true, Seed{60}),
                                      build_frame_filters(4, 8, 2, 4, 1.0, true, Seed{61})};
    const FrameNet net = build_frame_net(levels, true);
    REQUIRE(net.spec.layers[net.split_layer].kind == LayerKind::Relu);
    const RealTensor z = random_real({2, 4, 3}, 77);
    const DecoderFrameSubset subset =
        decoder_frame_subset(net.spec, net.params, z, net.split_layer);
    CHECK(subset.reconstruction_error < 1e-12);
    CHECK(!subset.selected.empty());
    CHECK(subset.selected.size() < static_cast<std::size_t>(subset.xi.size()));
    CHECK(subset.ratio ==
          static_cast<double>(subset.selected.size()) / subset.xi.size());
    for (std::size_t i : subset.selected) CHECK(subset.xi(i) > 0.0);
  }

  NetworkSpec spec;
  spec.in_channels = spec.out_channels = 1;
  spec.layers.push_back(conv_layer(1, 1, 1, 1, ConvMode::Correlate, true));
  spec.validate();
  const ParamStore params = randomized_params(spec, 1);
  CHECK_THROWS_AS(decoder_frame_subset(spec, params, random_real({1, 2, 2}, 1), 0),
                  std::invalid_argument);
}

TEST_CASE("census counts activation patterns") {
  SUBCASE("one neuron splits the plane in two") {
    NetworkSpec spec;
    spec.in_channels = 2;
    spec.out_channels = 1;
    spec.layers.push_back(conv_layer(2, 1, 1, 1, ConvMode::Correlate, false));
    spec.layers.push_back(plain_layer(LayerKind::Relu, 1));
    spec.validate();
    ParamStore params = init_params(spec, Seed{0});
    set_taps(params, 0, {1.0, -1.0});

    const NetView views[] = {{&spec, &params}};
    ProbeGrid grid;
    grid.n = 21;
    const RegionCensus census = region_census(views, {2, 1, 1}, grid);
    CHECK(census.n_probes == 441);
    CHECK(census.n_distinct == 2);
    CHECK(census.n_neurons == 1);
    CHECK(census.pattern_bound == 2.0);
    const std::string json = census_to_json(census);
    CHECK(json.find("\"distinct_patterns\": 2") != std::string::npos);
  }

  SUBCASE("two-layer net matches a direct arrangement scan") {
    const double w1[2][2] = {{0.9, -0.3}, {0.4, 0.8}};
    const double b1[2] = {0.05, -0.1};
    const double w2[2][2] = {{-0.7, 0.6}, {0.5, 0.45}};
    const double b2[2] = {0.02, -0.03};

    NetworkSpec spec;
    spec.in_channels = spec.out_channels = 2;
    spec.layers.push_back(conv_layer(2, 2, 1, 1, ConvMode::Correlate, true));
    spec.layers.push_back(plain_layer(LayerKind::Relu, 2));
    spec.layers.push_back(conv_layer(2, 2, 1, 1, ConvMode::Correlate, true));
    spec.layers.push_back(plain_layer(LayerKind::Relu, 2));
    spec.validate();
    ParamStore params = init_params(spec, Seed{0});
    set_taps(params, 0, {w1[0][0], w1[0][1], w1[1][0], w1[1][1]});
    set_taps(params, 2, {w2[0][0], w2[0][1], w2[1][0], w2[1][1]});
    params.slice_values("layer000.bias")[0] = b1[0];
    params.slice_values("layer000.bias")[1] = b1[1];
    params.slice_values("layer002.bias")[0] = b2[0];
    params.slice_values("layer002.bias")[1] = b2[1];

    const std::size_t n = 101;
    std::set<std::array<bool, 4>> oracle;
    for (std::size_t ix = 0; ix < n; ++ix)
      for (std::size_t iy = 0; iy < n; ++iy) {
        const double x = -1.0 + 2.0 * ix / (n - 1.0);
        const double y = -1.0 + 2.0 * iy / (n - 1.0);
        std::array<bool, 4> fp{};
        double h[2];
        for (int i = 0; i < 2; ++i) {
          const double pre = w1[i][0] * x + w1[i][1] * y + b1[i];
          fp[i] = pre > 0.0;
          h[i] = fp[i] ? pre : 0.0;
        }
        for (int i = 0; i < 2; ++i)
          fp[2 + i] = w2[i][0] * h[0] + w2[i][1] * h[1] + b2[i] > 0.0;
        oracle.insert(fp);
      }

    const NetView views[] = {{&spec, &params}};
    ProbeGrid grid;
    grid.n = n;
    const RegionCensus census = region_census(views, {2, 1, 1}, grid);
    CHECK(census.n_probes == n * n);
    CHECK(census.n_distinct == oracle.size());
    CHECK(census.n_neurons == 4);
    CHECK(census.n_distinct <= 16);
    CHECK(census.pattern_bound == 16.0);

    SUBCASE("aggregating networks never loses resolution") {
      NetworkSpec half_spec;
      half_spec.in_channels = 2;
      half_spec.out_channels = 1;
      half_spec.layers.push_back(conv_layer(2, 1, 1, 1, ConvMode::Correlate, false));
      half_spec.layers.push_back(plain_layer(LayerKind::Relu, 1));
      half_spec.validate();
      ParamStore half_params = init_params(half_spec, Seed{0});
      set_taps(half_params, 0, {0.3, 1.0});

      const NetView both[] = {{&spec, &params}, {&half_spec, &half_params}};
      const RegionCensus combined = region_census(both, {2, 1, 1}, grid);
      CHECK(combined.n_neurons == 5);
      CHECK(combined.n_distinct >= census.n_distinct);
    }
  }

  SUBCASE("cloud probes are deterministic in the seed") {
    NetworkSpec spec;
    spec.in_channels = spec.out_channels = 1;
    spec.layers.push_back(conv_layer(1, 1, 2, 2, ConvMode::Correlate, true));
    spec.layers.push_back(plain_layer(LayerKind::Relu, 1));
    spec.validate();
    const ParamStore params = randomized_params(spec, 12);
    const NetView views[] = {{&spec, &params}};
    ProbeCloud cloud;
    cloud.count = 200;
    cloud.seed = Seed{42};
    const RegionCensus a = region_census(views, {1, 3, 3}, cloud);
    const RegionCensus b = region_census(views, {1, 3, 3}, cloud);
    CHECK(a.n_distinct == b.n_distinct);
    CHECK(a.n_probes == 200);
    CHECK(a.n_neurons == 9);
    CHECK(a.probe_desc == b.probe_desc);
    CHECK(a.n_distinct <= a.pattern_bound);
  }
}

}  // TEST_SUITE
