#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "framelet/expressivity.hpp"
#include "framelet/mri.hpp"
#include "framelet/trainer.hpp"

namespace framelet {

// Reconstruction methods the experiment runner can evaluate. The first two
// are calibration baselines; the rest train the backbone network under the
// named aggregation scheme.
enum class MethodKind { Grappa, Raki, BaselineUnet, Bootstrap, Residual, Iterative };
const char* method_name(MethodKind kind);
MethodKind method_from_name(const std::string& name);
bool method_is_network(MethodKind kind);
SchemeKind method_scheme(MethodKind kind);  // network methods only

// Test data families: synthetic scans, or k-space whose missing entries
// follow an exact lattice-interpolation model (see make_lattice_model_sample)
// so calibration baselines can reconstruct them perfectly.
enum class DataKind { Phantom, ExactLinear };
const char* data_kind_name(DataKind kind);
DataKind data_kind_from_name(const std::string& name);

// Child streams of the master seed. Every random consumer derives its own
// seed as derive_seed(master, stream), so runs are reproducible from the one
// master value and no consumer perturbs another.
namespace seed_stream {
inline constexpr std::uint64_t kTrainData = 1;
inline constexpr std::uint64_t kValData = 2;
inline constexpr std::uint64_t kTestData = 3;
inline constexpr std::uint64_t kTraining = 4;
inline constexpr std::uint64_t kCensus = 5;
inline constexpr std::uint64_t kFrame = 6;
inline constexpr std::uint64_t kRaki = 7;
}  // namespace seed_stream

// Complete experiment description: one master seed plus the [data],
// [network], [scheme], [training], and [evaluation] sections. Every key has
// a default, so the empty file is a valid config. The hash covers the fully
// resolved configuration, which makes it stable under key reordering and
// under spelling out defaults explicitly.
struct ExperimentConfig {
  std::uint64_t seed = 0;  // master seed; FRAMELET_SEED overrides at load time

  struct Data {
    DataKind kind = DataKind::Phantom;
    std::size_t n_train = 8;
    std::size_t n_val = 2;
    std::size_t n_test = 4;
    std::size_t height = 64;
    std::size_t width = 64;
    std::size_t n_coils = 4;
    std::size_t accel_rows = 4;
    std::size_t accel_cols = 1;
    std::size_t acs_rows = 16;
    std::size_t acs_cols = 64;
    std::size_t n_ellipses = 8;
  } data;

  struct Network {
    std::size_t stages = 2;
    std::size_t base_channels = 8;
    bool batchnorm = true;
  } network;

  SchemeConfig scheme;

  struct Training {
    TrainDomain domain = TrainDomain::Kspace;
    std::size_t epochs = 4;
    double lr0 = 1e-2;
    double lr_floor = 1e-4;
    std::size_t halve_period = 10;
    LossVariant loss = LossVariant::SquaredL2;
    bool normalize = true;
  } training;

  struct Evaluation {
    std::vector<MethodKind> methods;
    bool geometry = false;
    // Calibration kernel extents; the default stays solvable over the
    // default 16-row calibration region at fourfold row acceleration.
    std::size_t grappa_rows = 2;
    std::size_t grappa_cols = 4;
    std::size_t raki_epochs = 300;
    std::size_t census_probes = 64;
  } evaluation;

  void validate() const;  // throws std::invalid_argument on bad ranges

  // Resolved key = value dump in a fixed section and key order; parsing it
  // back reproduces this config exactly.
  std::string canonical_text() const;
  // 16-hex-digit FNV-1a of canonical_text().
  std::string hash() const;

  // Section views assembled for the other modules, seeded from the named
  // child stream of the master seed.
  DatasetParams dataset_params(std::uint64_t stream, std::size_t n_samples) const;
  TrainConfig train_config() const;
};

// 64-bit FNV-1a; the config hash is this over the canonical text.
std::uint64_t fnv1a64(const std::string& text);

// Parses the plain-text format: `key = value` lines, `[section]` headers,
// `#` comments, blank lines ignored. Unknown sections or keys, malformed
// values, and duplicated keys throw std::invalid_argument naming the line.
ExperimentConfig parse_config(const std::string& text);

// parse_config over the file contents, then applies the FRAMELET_SEED
// environment override (the only recognized environment variable) to the
// master seed.
ExperimentConfig load_config(const std::filesystem::path& file);

}  // namespace framelet
