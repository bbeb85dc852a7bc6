#include "framelet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <stdexcept>
#include <vector>

namespace framelet {

namespace {

void require_same_image(const RealTensor& a, const RealTensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || !a.same_shape(b))
    throw std::invalid_argument("metrics: need two equally sized rank-2 images");
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

nlohmann::ordered_json json_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

// Summed-area table with a zero border row/column.
std::vector<double> integral(const RealTensor& a, const RealTensor& b) {
  const std::size_t h = a.extent(0), w = a.extent(1);
  std::vector<double> s((h + 1) * (w + 1), 0.0);
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j)
      s[(i + 1) * (w + 1) + (j + 1)] = a(i, j) * b(i, j) + s[i * (w + 1) + (j + 1)] +
                                       s[(i + 1) * (w + 1) + j] - s[i * (w + 1) + j];
  return s;
}

double window_sum(const std::vector<double>& s, std::size_t stride, std::size_t i, std::size_t j,
                  std::size_t n) {
  return s[(i + n) * stride + (j + n)] - s[i * stride + (j + n)] - s[(i + n) * stride + j] +
         s[i * stride + j];
}

}  // namespace

RealTensor ssos(const ComplexTensor& coil_images) {
  if (coil_images.rank() != 3)
    throw std::invalid_argument("ssos: need a [coil][height][width] tensor");
  const std::size_t n_coils = coil_images.extent(0);
  const std::size_t h = coil_images.extent(1), w = coil_images.extent(2);
  RealTensor out({h, w});
  for (std::size_t i = 0; i < h; ++i)
    for (std::size_t j = 0; j < w; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < n_coils; ++c) acc += std::norm(coil_images(c, i, j));
      out(i, j) = std::sqrt(acc);
    }
  return out;
}

double psnr(const RealTensor& x, const RealTensor& x_star) {
  require_same_image(x, x_star);
  double acc = 0.0;
  double peak = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double d = x[k] - x_star[k];
    acc += d * d;
    peak = std::max(peak, x_star[k]);
  }
  const double mse = acc / x.size();
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(peak / std::sqrt(mse));
}

double ssim(const RealTensor& x, const RealTensor& x_star, double dynamic_range,
            const SsimOptions& options) {
  require_same_image(x, x_star);
  if (!(dynamic_range > 0.0)) throw std::invalid_argument("ssim: dynamic range must be positive");
  const std::size_t h = x.extent(0), w = x.extent(1), win = options.window;
  if (win == 0 || win > h || win > w)
    throw std::invalid_argument("ssim: window does not fit inside the image");

  const double c1 = (options.k1 * dynamic_range) * (options.k1 * dynamic_range);
  const double c2 = (options.k2 * dynamic_range) * (options.k2 * dynamic_range);
  const double n = static_cast<double>(win) * static_cast<double>(win);

  RealTensor ones(x.shape());
  for (auto& v : ones.storage()) v = 1.0;
  const std::vector<double> sx = integral(x, ones);
  const std::vector<double> sy = integral(x_star, ones);
  const std::vector<double> sxx = integral(x, x);
  const std::vector<double> syy = integral(x_star, x_star);
  const std::vector<double> sxy = integral(x, x_star);

  const std::size_t stride = w + 1;
  double acc = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i + win <= h; ++i)
    for (std::size_t j = 0; j + win <= w; ++j) {
      const double mx = window_sum(sx, stride, i, j, win) / n;
      const double my = window_sum(sy, stride, i, j, win) / n;
      const double vx = window_sum(sxx, stride, i, j, win) / n - mx * mx;
      const double vy = window_sum(syy, stride, i, j, win) / n - my * my;
      const double cov = window_sum(sxy, stride, i, j, win) / n - mx * my;
      acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) /
             ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return acc / count;
}

void finalize_means(ReconReport& report) {
  double psnr_acc = 0.0, ssim_acc = 0.0;
  for (const SampleMetrics& s : report.samples) {
    psnr_acc += s.psnr_db;
    ssim_acc += s.ssim;
  }
  const double n = report.samples.empty() ? 1.0 : static_cast<double>(report.samples.size());
  report.mean_psnr = psnr_acc / n;
  report.mean_ssim = ssim_acc / n;
}

std::string report_to_json(const ReconReport& report) {
  nlohmann::ordered_json j;
  j["method"] = report.method;
  j["domain"] = report.domain;
  j["config_hash"] = report.config_hash;
  j["mean_psnr_db"] = json_metric(report.mean_psnr);
  j["mean_ssim"] = json_metric(report.mean_ssim);
  j["samples"] = nlohmann::ordered_json::array();
  for (const SampleMetrics& s : report.samples) {
    nlohmann::ordered_json row;
    row["sample_id"] = s.sample_id;
    row["psnr_db"] = json_metric(s.psnr_db);
    row["ssim"] = json_metric(s.ssim);
    j["samples"].push_back(std::move(row));
  }
  return j.dump(2) + "\n";
}

std::string report_to_csv(const ReconReport& report) {
  std::string out = "sample_id,method,psnr_db,ssim\n";
  for (const SampleMetrics& s : report.samples)
    out += s.sample_id + "," + report.method + "," + fmt17(s.psnr_db) + "," + fmt17(s.ssim) + "\n";
  return out;
}

void write_report(const ReconReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream f(dir / "report.json", std::ios::binary);
    f << report_to_json(report);
    if (!f) throw std::runtime_error("write_report: cannot write report.json");
  }
  {
    std::ofstream f(dir / "report.csv", std::ios::binary);
    f << report_to_csv(report);
    if (!f) throw std::runtime_error("write_report: cannot write report.csv");
  }
  {
    nlohmann::ordered_json t;
    t["method"] = report.method;
    t["runtime_seconds"] = report.runtime_seconds;
    std::ofstream f(dir / "timings.json", std::ios::binary);
    f << t.dump(2) << "\n";
    if (!f) throw std::runtime_error("write_report: cannot write timings.json");
  }
}

void write_pgm16(const RealTensor& image, const std::filesystem::path& file) {
  if (image.rank() != 2) throw std::invalid_argument("write_pgm16: need a rank-2 image");
  double lo = image[0], hi = image[0];
  for (double v : image.storage()) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  const double scale = hi > lo ? 65535.0 / (hi - lo) : 0.0;

  std::ofstream f(file, std::ios::binary);
  f << "P5\n" << image.extent(1) << " " << image.extent(0) << "\n65535\n";
  for (double v : image.storage()) {
    const long q = std::lround((v - lo) * scale);
    const auto u = static_cast<unsigned>(std::clamp(q, 0L, 65535L));
    const char bytes[2] = {static_cast<char>(u >> 8), static_cast<char>(u & 0xFF)};
    f.write(bytes, 2);
  }
  if (!f) throw std::runtime_error("write_pgm16: cannot write " + file.string());

  nlohmann::ordered_json side;
  side["min"] = lo;
  side["max"] = hi;
  std::ofstream s(file.string() + ".json", std::ios::binary);
  s << side.dump(2) << "\n";
  if (!s) throw std::runtime_error("write_pgm16: cannot write sidecar");
}

}  // namespace framelet
