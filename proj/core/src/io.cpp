#include "framelet/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts are unsupported");

namespace framelet {

namespace {

void write_bytes(std::ofstream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

void read_bytes(std::ifstream& in, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw std::runtime_error("truncated file while reading " + std::to_string(n) + " bytes");
}

template <typename T>
void write_pod(std::ofstream& out, T v) {
  write_bytes(out, &v, sizeof(v));
}

template <typename T>
T read_pod(std::ifstream& in) {
  T v;
  read_bytes(in, &v, sizeof(v));
  return v;
}

}  // namespace

void write_ctns(const std::filesystem::path& path, const ComplexTensor& t) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  write_bytes(out, "CTNS", 4);
  write_pod<std::uint32_t>(out, 1);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) write_pod<std::uint64_t>(out, e);
  // std::complex<double> is layout-compatible with double[2] = (re, im).
  write_bytes(out, t.data(), t.size() * sizeof(cplx));
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

ComplexTensor read_ctns(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open for reading: " + path.string());
  char magic[4];
  read_bytes(in, magic, 4);
  if (std::memcmp(magic, "CTNS", 4) != 0)
    throw std::runtime_error("not a CTNS file: " + path.string());
  const auto version = read_pod<std::uint32_t>(in);
  if (version != 1) throw std::runtime_error("unsupported CTNS version " + std::to_string(version));
  const auto rank = read_pod<std::uint32_t>(in);
  if (rank == 0 || rank > 64) throw std::runtime_error("bad CTNS rank " + std::to_string(rank));
  std::vector<std::size_t> shape(rank);
  for (auto& e : shape) {
    const auto v = read_pod<std::uint64_t>(in);
    if (v == 0) throw std::runtime_error("zero extent in CTNS file: " + path.string());
    e = static_cast<std::size_t>(v);
  }
  ComplexTensor t(shape);
  read_bytes(in, t.data(), t.size() * sizeof(cplx));
  return t;
}

void write_ctns_real(const std::filesystem::path& path, const std::vector<double>& v) {
  ComplexTensor t({v.empty() ? 1 : v.size()});
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = cplx(v[i], 0.0);
  write_ctns(path, t);
}

std::vector<double> read_ctns_real(const std::filesystem::path& path) {
  const ComplexTensor t = read_ctns(path);
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (t[i].imag() != 0.0)
      throw std::runtime_error("expected real-valued CTNS data: " + path.string());
    v[i] = t[i].real();
  }
  return v;
}

void write_pgm16(const std::filesystem::path& path, const RealTensor& image) {
  if (image.rank() != 2) throw std::invalid_argument("write_pgm16: image must be rank 2");
  const std::size_t h = image.extent(0), w = image.extent(1);
  double lo = image[0], hi = image[0];
  for (double v : image.storage()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double scale = hi > lo ? 65535.0 / (hi - lo) : 0.0;

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
  out << "P5\n" << w << " " << h << "\n65535\n";
  for (double v : image.storage()) {
    const auto q = static_cast<std::uint16_t>(std::lround((v - lo) * scale));
    const char bytes[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
    write_bytes(out, bytes, 2);
  }
  if (!out) throw std::runtime_error("write failed: " + path.string());

  nlohmann::json sidecar;
  sidecar["min"] = lo;
  sidecar["max"] = hi;
  sidecar["width"] = w;
  sidecar["height"] = h;
  std::ofstream side(path.string() + ".json", std::ios::trunc);
  side << sidecar.dump(2) << "\n";
  if (!side) throw std::runtime_error("write failed: " + path.string() + ".json");
}

}  // namespace framelet
