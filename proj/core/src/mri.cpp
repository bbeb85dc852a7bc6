#include "framelet/mri.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "framelet/fft.hpp"
#include "framelet/io.hpp"

namespace framelet {

namespace {

constexpr double kPi = 3.14159265358979323846;

std::size_t product(const std::vector<std::size_t>& v) {
  std::size_t p = 1;
  for (std::size_t e : v) p *= e;
  return p;
}

double smoothstep01(double t) {
  t = std::clamp(t, 0.0, 1.0);
  return t * t * (3.0 - 2.0 * t);
}

}  // namespace

std::size_t SamplingMask::total() const { return product(grid); }

std::size_t SamplingMask::n_selected() const {
  std::size_t n = 0;
  for (std::uint8_t s : selected) n += s != 0;
  return n;
}

double SamplingMask::acceleration() const {
  const std::size_t n = n_selected();
  if (n == 0) throw std::runtime_error("SamplingMask: empty selection");
  return static_cast<double>(total()) / static_cast<double>(n);
}

bool SamplingMask::in_acs(std::size_t flat) const {
  if (grid.size() == 1) {
    return flat >= acs_offset[0] && flat < acs_offset[0] + acs_extent[0];
  }
  const std::size_t i = flat / grid[1], j = flat % grid[1];
  return i >= acs_offset[0] && i < acs_offset[0] + acs_extent[0] && j >= acs_offset[1] &&
         j < acs_offset[1] + acs_extent[1];
}

bool SamplingMask::is_1d_pattern() const {
  if (grid.size() == 1) return true;
  for (std::size_t i = 0; i < grid[0]; ++i) {
    const std::uint8_t first = selected[i * grid[1]];
    for (std::size_t j = 1; j < grid[1]; ++j)
      if (selected[i * grid[1] + j] != first) return false;
  }
  return true;
}

void SamplingMask::validate() const {
  if (grid.size() != 1 && grid.size() != 2)
    throw std::invalid_argument("SamplingMask: grid rank must be 1 or 2");
  if (acs_offset.size() != grid.size() || acs_extent.size() != grid.size())
    throw std::invalid_argument("SamplingMask: ACS rank does not match grid rank");
  if (selected.size() != total())
    throw std::invalid_argument("SamplingMask: selection length does not match grid");
  std::size_t n_sel = 0;
  for (std::uint8_t s : selected) n_sel += s != 0;
  if (n_sel == 0) throw std::invalid_argument("SamplingMask: selection is empty");
  for (std::size_t a = 0; a < grid.size(); ++a) {
    if (acs_extent[a] == 0) throw std::invalid_argument("SamplingMask: ACS is empty");
    if (acs_offset[a] + acs_extent[a] > grid[a])
      throw std::invalid_argument("SamplingMask: ACS extends past the grid");
  }
  for (std::size_t flat = 0; flat < selected.size(); ++flat)
    if (in_acs(flat) && !is_selected(flat))
      throw std::invalid_argument("SamplingMask: ACS point not selected");
}

ComplexTensor make_phantom(std::size_t height, std::size_t width, std::size_t n_ellipses,
                           Seed seed) {
  if (height < 16 || width < 16)
    throw std::invalid_argument("make_phantom: extents must be >= 16 per axis");
  if (n_ellipses == 0) throw std::invalid_argument("make_phantom: need at least one ellipse");

  Rng master(seed);
  Rng shapes = master.child(0);
  Rng phase_rng = master.child(1);

  struct Ellipse {
    double cx, cy, a, b, cos_t, sin_t, intensity;
  };
  std::vector<Ellipse> ellipses(n_ellipses);
  for (auto& e : ellipses) {
    e.cx = shapes.uniform(-0.6, 0.6);
    e.cy = shapes.uniform(-0.6, 0.6);
    e.a = shapes.uniform(0.15, 0.55);
    e.b = shapes.uniform(0.15, 0.55);
    const double theta = shapes.uniform(0.0, kPi);
    e.cos_t = std::cos(theta);
    e.sin_t = std::sin(theta);
    e.intensity = shapes.uniform(0.2, 1.0);
  }
  double phase_coeff[6];
  for (double& c : phase_coeff) c = phase_rng.uniform(-1.2, 1.2);

  constexpr double kEdge = 0.12;  // soft boundary width in normalized units
  ComplexTensor img({height, width});
  double max_mag = 0.0;
  for (std::size_t i = 0; i < height; ++i) {
    const double py = (2.0 * static_cast<double>(i) - static_cast<double>(height - 1)) /
                      static_cast<double>(height);
    for (std::size_t j = 0; j < width; ++j) {
      const double px = (2.0 * static_cast<double>(j) - static_cast<double>(width - 1)) /
                        static_cast<double>(width);
      double mag = 0.0;
      for (const auto& e : ellipses) {
        const double dx = px - e.cx, dy = py - e.cy;
        const double u = dx * e.cos_t + dy * e.sin_t;
        const double v = -dx * e.sin_t + dy * e.cos_t;
        const double q = (u / e.a) * (u / e.a) + (v / e.b) * (v / e.b);
        mag += e.intensity * smoothstep01((1.0 - q) / kEdge);
      }
      const double phi = phase_coeff[0] + phase_coeff[1] * px + phase_coeff[2] * py +
                         phase_coeff[3] * px * py + phase_coeff[4] * px * px +
                         phase_coeff[5] * py * py;
      img(i, j) = mag * cplx(std::cos(phi), std::sin(phi));
      max_mag = std::max(max_mag, mag);
    }
  }
  if (max_mag > 2.0) {
    const double scale = 2.0 / max_mag;
    for (auto& v : img.storage()) v *= scale;
  }
  return img;
}

CoilSet make_coil_maps(std::size_t height, std::size_t width, std::size_t n_coils, Seed seed) {
  if (n_coils == 0) throw std::invalid_argument("make_coil_maps: need at least one coil");
  Rng rng(seed);

  struct Lobe {
    double cx, cy, inv_two_sigma2, p0, p1, p2;
  };
  std::vector<Lobe> lobes(n_coils);
  for (std::size_t c = 0; c < n_coils; ++c) {
    const double angle =
        2.0 * kPi * static_cast<double>(c) / static_cast<double>(n_coils) + rng.uniform(-0.2, 0.2);
    lobes[c].cx = 0.75 * std::cos(angle);
    lobes[c].cy = 0.75 * std::sin(angle);
    const double sigma = rng.uniform(0.8, 1.0);
    lobes[c].inv_two_sigma2 = 1.0 / (2.0 * sigma * sigma);
    lobes[c].p0 = rng.uniform(-kPi, kPi);
    lobes[c].p1 = rng.uniform(-0.5, 0.5);
    lobes[c].p2 = rng.uniform(-0.5, 0.5);
  }

  CoilSet coils;
  coils.n_coils = n_coils;
  coils.maps = ComplexTensor({n_coils, height, width});
  for (std::size_t i = 0; i < height; ++i) {
    const double py = (2.0 * static_cast<double>(i) - static_cast<double>(height - 1)) /
                      static_cast<double>(height);
    for (std::size_t j = 0; j < width; ++j) {
      const double px = (2.0 * static_cast<double>(j) - static_cast<double>(width - 1)) /
                        static_cast<double>(width);
      double ssq = 0.0;
      for (std::size_t c = 0; c < n_coils; ++c) {
        const auto& l = lobes[c];
        const double d2 = (px - l.cx) * (px - l.cx) + (py - l.cy) * (py - l.cy);
        const double m = std::exp(-d2 * l.inv_two_sigma2);
        const double phi = l.p0 + l.p1 * px + l.p2 * py;
        coils.maps(c, i, j) = m * cplx(std::cos(phi), std::sin(phi));
        ssq += m * m;
      }
      const double inv = 1.0 / std::sqrt(ssq);
      for (std::size_t c = 0; c < n_coils; ++c) coils.maps(c, i, j) *= inv;
    }
  }
  return coils;
}

SamplingMask make_mask(std::vector<std::size_t> grid, std::vector<std::size_t> accel,
                       std::vector<std::size_t> acs) {
  if (grid.size() != 1 && grid.size() != 2)
    throw std::invalid_argument("make_mask: grid rank must be 1 or 2");
  if (accel.size() != grid.size() || acs.size() != grid.size())
    throw std::invalid_argument("make_mask: accel/acs rank must match the grid");
  for (std::size_t a = 0; a < grid.size(); ++a) {
    if (grid[a] == 0) throw std::invalid_argument("make_mask: zero grid extent");
    if (accel[a] == 0) throw std::invalid_argument("make_mask: acceleration factors must be >= 1");
    if (acs[a] == 0) throw std::invalid_argument("make_mask: ACS must be nonempty");
    if (acs[a] > grid[a]) throw std::invalid_argument("make_mask: ACS larger than grid");
  }

  SamplingMask mask;
  mask.grid = grid;
  mask.acs_extent = acs;
  mask.acs_offset.resize(grid.size());
  for (std::size_t a = 0; a < grid.size(); ++a) mask.acs_offset[a] = (grid[a] - acs[a]) / 2;
  mask.selected.assign(product(grid), 0);
  if (grid.size() == 1) {
    for (std::size_t i = 0; i < grid[0]; ++i)
      mask.selected[i] = (i % accel[0] == 0) || mask.in_acs(i);
  } else {
    for (std::size_t i = 0; i < grid[0]; ++i)
      for (std::size_t j = 0; j < grid[1]; ++j) {
        const std::size_t flat = i * grid[1] + j;
        mask.selected[flat] = (i % accel[0] == 0 && j % accel[1] == 0) || mask.in_acs(flat);
      }
  }
  return mask;
}

ComplexTensor apply_forward(const ComplexTensor& full_kspace, const SamplingMask& mask) {
  mask.validate();
  const std::size_t g_rank = mask.grid.size();
  if (full_kspace.rank() != g_rank && full_kspace.rank() != g_rank + 1)
    throw std::invalid_argument("apply_forward: tensor rank does not fit the mask grid");
  const std::size_t lead = full_kspace.rank() - g_rank;
  for (std::size_t a = 0; a < g_rank; ++a)
    if (full_kspace.extent(lead + a) != mask.grid[a])
      throw std::invalid_argument("apply_forward: tensor extents do not match the mask grid");

  const std::size_t channels = lead == 0 ? 1 : full_kspace.extent(0);
  const std::size_t plane = mask.total();
  ComplexTensor out = full_kspace;
  for (std::size_t c = 0; c < channels; ++c) {
    cplx* p = out.data() + c * plane;
    for (std::size_t k = 0; k < plane; ++k)
      if (!mask.is_selected(k)) p[k] = cplx(0.0, 0.0);
  }
  return out;
}

std::vector<SamplingMask> bootstrap_masks(const SamplingMask& base, std::size_t n,
                                          double keep_ratio, Seed seed) {
  base.validate();
  if (n == 0) throw std::invalid_argument("bootstrap_masks: need at least one mask");
  if (!(keep_ratio > 0.0) || keep_ratio > 1.0)
    throw std::invalid_argument("bootstrap_masks: keep_ratio must be in (0, 1]");

  std::vector<std::size_t> non_acs;
  for (std::size_t flat = 0; flat < base.selected.size(); ++flat)
    if (base.is_selected(flat) && !base.in_acs(flat)) non_acs.push_back(flat);
  const auto keep = static_cast<std::size_t>(
      std::llround(keep_ratio * static_cast<double>(non_acs.size())));

  const bool need_distinct = keep_ratio < 1.0 && non_acs.size() >= n;
  Rng rng(seed);
  std::vector<SamplingMask> out;
  std::set<std::vector<std::size_t>> seen;
  for (std::size_t m = 0; m < n; ++m) {
    constexpr int kMaxAttempts = 1000;
    bool accepted = false;
    for (int attempt = 0; attempt < kMaxAttempts && !accepted; ++attempt) {
      std::vector<std::size_t> pool = non_acs;
      // Fisher-Yates prefix shuffle: the first `keep` entries are a uniform
      // subset in uniform order.
      for (std::size_t k = 0; k < keep && k + 1 < pool.size(); ++k) {
        const std::size_t pick = k + rng.below(pool.size() - k);
        std::swap(pool[k], pool[pick]);
      }
      std::vector<std::size_t> chosen(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep));
      std::sort(chosen.begin(), chosen.end());
      if (need_distinct && !seen.insert(chosen).second) continue;

      SamplingMask sub;
      sub.grid = base.grid;
      sub.acs_offset = base.acs_offset;
      sub.acs_extent = base.acs_extent;
      sub.selected.assign(base.selected.size(), 0);
      for (std::size_t flat = 0; flat < sub.selected.size(); ++flat)
        if (base.in_acs(flat) && base.is_selected(flat)) sub.selected[flat] = 1;
      for (std::size_t flat : chosen) sub.selected[flat] = 1;
      out.push_back(std::move(sub));
      accepted = true;
    }
    if (!accepted)
      throw std::runtime_error("bootstrap_masks: cannot produce " + std::to_string(n) +
                               " distinct sub-masks");
  }
  return out;
}

Sample make_sample(std::size_t height, std::size_t width, std::size_t n_coils,
                   std::size_t n_ellipses, const SamplingMask& mask, Seed seed) {
  mask.validate();
  if (mask.grid.size() != 2 || mask.grid[0] != height || mask.grid[1] != width)
    throw std::invalid_argument("make_sample: mask grid must equal the image extents");

  const ComplexTensor phantom =
      make_phantom(height, width, n_ellipses, Seed{derive_seed(seed.value, 0)});
  const CoilSet coils = make_coil_maps(height, width, n_coils, Seed{derive_seed(seed.value, 1)});

  Sample s;
  s.seed = seed.value;
  s.mask = mask;
  s.accel = mask.acceleration();
  s.label_image = ComplexTensor({n_coils, height, width});
  for (std::size_t c = 0; c < n_coils; ++c)
    for (std::size_t i = 0; i < height; ++i)
      for (std::size_t j = 0; j < width; ++j)
        s.label_image(c, i, j) = phantom(i, j) * coils.maps(c, i, j);
  s.full_kspace = fft2(s.label_image);
  return s;
}

void write_mask(const std::filesystem::path& path, const SamplingMask& mask) {
  mask.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  const auto put_u32 = [&](std::uint32_t v) { out.write(reinterpret_cast<const char*>(&v), 4); };
  const auto put_u64 = [&](std::uint64_t v) { out.write(reinterpret_cast<const char*>(&v), 8); };
  out.write("MASK", 4);
  put_u32(1);
  put_u32(static_cast<std::uint32_t>(mask.grid.size()));
  for (std::size_t e : mask.grid) put_u64(e);
  for (std::size_t e : mask.acs_offset) put_u64(e);
  for (std::size_t e : mask.acs_extent) put_u64(e);
  std::vector<std::uint8_t> bits((mask.selected.size() + 7) / 8, 0);
  for (std::size_t k = 0; k < mask.selected.size(); ++k)
    if (mask.selected[k]) bits[k / 8] |= static_cast<std::uint8_t>(1u << (k % 8));
  out.write(reinterpret_cast<const char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

SamplingMask read_mask(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (in.gcount() != 4 || std::memcmp(magic, "MASK", 4) != 0)
    throw std::runtime_error("not a MASK file: " + path.string());
  const auto get_u32 = [&] {
    std::uint32_t v;
    in.read(reinterpret_cast<char*>(&v), 4);
    return v;
  };
  const auto get_u64 = [&] {
    std::uint64_t v;
    in.read(reinterpret_cast<char*>(&v), 8);
    return v;
  };
  const auto version = get_u32();
  if (version != 1) throw std::runtime_error("unsupported MASK version " + std::to_string(version));
  const auto rank = get_u32();
  if (rank != 1 && rank != 2) throw std::runtime_error("bad MASK rank " + std::to_string(rank));
  SamplingMask mask;
  mask.grid.resize(rank);
  mask.acs_offset.resize(rank);
  mask.acs_extent.resize(rank);
  for (auto& e : mask.grid) e = static_cast<std::size_t>(get_u64());
  for (auto& e : mask.acs_offset) e = static_cast<std::size_t>(get_u64());
  for (auto& e : mask.acs_extent) e = static_cast<std::size_t>(get_u64());
  const std::size_t n = product(mask.grid);
  std::vector<std::uint8_t> bits((n + 7) / 8);
  in.read(reinterpret_cast<char*>(bits.data()), static_cast<std::streamsize>(bits.size()));
  if (static_cast<std::size_t>(in.gcount()) != bits.size())
    throw std::runtime_error("truncated MASK file: " + path.string());
  mask.selected.assign(n, 0);
  for (std::size_t k = 0; k < n; ++k) mask.selected[k] = (bits[k / 8] >> (k % 8)) & 1u;
  mask.validate();
  return mask;
}

void save_sample(const std::filesystem::path& sample_dir, const Sample& sample) {
  std::filesystem::create_directories(sample_dir);
  write_ctns(sample_dir / "full.ctns", sample.full_kspace);
  write_mask(sample_dir / "mask.bin", sample.mask);
  nlohmann::json meta;
  meta["seed"] = sample.seed;
  meta["R"] = sample.accel;
  meta["n_coils"] = sample.full_kspace.extent(0);
  std::ofstream out(sample_dir / "meta.json", std::ios::trunc);
  out << meta.dump(2) << "\n";
  if (!out) throw std::runtime_error("write failed: " + (sample_dir / "meta.json").string());
}

Sample load_sample(const std::filesystem::path& sample_dir) {
  Sample s;
  s.full_kspace = read_ctns(sample_dir / "full.ctns");
  if (s.full_kspace.rank() != 3)
    throw std::runtime_error("sample k-space must be rank 3: " + sample_dir.string());
  s.mask = read_mask(sample_dir / "mask.bin");
  std::ifstream in(sample_dir / "meta.json");
  if (!in) throw std::runtime_error("missing meta.json in " + sample_dir.string());
  nlohmann::json meta = nlohmann::json::parse(in);
  s.seed = meta.at("seed").get<std::uint64_t>();
  s.accel = s.mask.acceleration();
  s.label_image = ifft2(s.full_kspace);
  return s;
}

std::vector<std::filesystem::path> list_samples(const std::filesystem::path& dataset_dir) {
  std::vector<std::filesystem::path> dirs;
  if (!std::filesystem::is_directory(dataset_dir))
    throw std::runtime_error("dataset directory not found: " + dataset_dir.string());
  for (const auto& entry : std::filesystem::directory_iterator(dataset_dir))
    if (entry.is_directory() && entry.path().filename().string().rfind("sample_", 0) == 0)
      dirs.push_back(entry.path());
  std::sort(dirs.begin(), dirs.end());
  return dirs;
}

void generate_dataset(const std::filesystem::path& dataset_dir, const DatasetParams& params) {
  if (params.n_samples == 0) throw std::invalid_argument("generate_dataset: n_samples must be >= 1");
  const SamplingMask mask =
      make_mask({params.height, params.width}, params.accel, params.acs);
  std::filesystem::create_directories(dataset_dir);
  for (std::size_t i = 0; i < params.n_samples; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "sample_%05zu", i);
    const Sample s = make_sample(params.height, params.width, params.n_coils, params.n_ellipses,
                                 mask, Seed{derive_seed(params.seed, i)});
    save_sample(dataset_dir / name, s);
  }
}

}  // namespace framelet
