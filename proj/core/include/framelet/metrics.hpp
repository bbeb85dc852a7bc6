#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "framelet/tensor.hpp"

namespace framelet {

// Square root of the per-pixel sum of squared coil magnitudes:
// out(i,j) = sqrt(sum_c |coil_images(c,i,j)|^2).
RealTensor ssos(const ComplexTensor& coil_images);

// 20*log10(max(x_star) / sqrt(mean((x - x_star)^2))); identical images give
// +infinity.
double psnr(const RealTensor& x, const RealTensor& x_star);

struct SsimOptions {
  double k1 = 0.01;
  double k2 = 0.03;
  std::size_t window = 8;  // uniform square window, stride 1
};

// Mean structural similarity over all fully contained windows with
// c1 = (k1*L)^2 and c2 = (k2*L)^2; symmetric in its image arguments and
// exactly 1 when they are identical.
double ssim(const RealTensor& x, const RealTensor& x_star, double dynamic_range,
            const SsimOptions& options = {});

struct SampleMetrics {
  std::string sample_id;
  double psnr_db = 0.0;
  double ssim = 0.0;
};

struct ReconReport {
  std::string method;
  std::string domain;
  std::string config_hash;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
  double runtime_seconds = 0.0;  // written to the timings sidecar only
  std::vector<SampleMetrics> samples;
};

// Sets the means to the arithmetic mean of the per-sample values.
void finalize_means(ReconReport& report);

std::string report_to_json(const ReconReport& report);
std::string report_to_csv(const ReconReport& report);

// Writes report.json and report.csv (both deterministic given the metric
// values) plus a timings.json sidecar that carries the wall-clock field and
// is excluded from reproducibility comparisons.
void write_report(const ReconReport& report, const std::filesystem::path& dir);

// 16-bit binary PGM with min-max scaling; the applied range goes into a
// <file>.json sidecar so values can be mapped back.
void write_pgm16(const RealTensor& image, const std::filesystem::path& file);

}  // namespace framelet
