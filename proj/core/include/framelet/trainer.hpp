#pragma once

#include <span>
#include <string>
#include <vector>

#include "framelet/expressivity.hpp"
#include "framelet/mri.hpp"

namespace framelet {

enum class LossVariant { L2, SquaredL2 };
const char* loss_name(LossVariant variant);
LossVariant loss_from_name(const std::string& name);

struct LossResult {
  double value = 0.0;
  RealTensor grad;  // d value / d v
};

// Per-sample reconstruction error ||target - v||_2, or its square. The norm
// is not differentiable where v equals the target; the gradient is defined
// as zero there.
LossResult loss(const RealTensor& target, const RealTensor& v,
                LossVariant variant = LossVariant::L2);

struct AdamState {
  std::vector<double> m, v;
  std::size_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};
AdamState make_adam_state(std::size_t n);

// Standard bias-corrected update, applied in place; rejects non-finite
// gradients.
void adam_step(std::vector<double>& params, std::span<const double> grads, AdamState& state,
               double lr);

enum class TrainDomain { Kspace, Image };
const char* domain_name(TrainDomain domain);
TrainDomain domain_from_name(const std::string& name);

struct TrainConfig {
  TrainDomain domain = TrainDomain::Kspace;
  SchemeConfig scheme;
  double lr0 = 1e-2;
  double lr_floor = 1e-4;
  std::size_t halve_period = 10;  // epochs between halvings
  std::size_t epochs = 1;
  Seed seed{0};
  // The squared norm is the training default; the flag restores the plain
  // norm form.
  LossVariant loss = LossVariant::SquaredL2;
  bool normalize = true;  // divide each example by the std of its magnitudes
  void validate() const;  // lr0 > lr_floor > 0, epochs and period >= 1
};

// lr(epoch) = max(floor, lr0 * 2^-(epoch / period)).
double scheduled_lr(const TrainConfig& config, std::size_t epoch);

// Input/target channel pair in the training domain: subsampled k-space vs
// full k-space, or the zero-filled coil images vs the label coil images.
// Both sides carry the same normalization; multiplying outputs by `scale`
// undoes it.
struct TrainExample {
  RealTensor input;
  RealTensor target;
  double scale = 1.0;
};
TrainExample make_example(const Sample& sample, TrainDomain domain, bool normalize);

// Image-domain SSoS of a network output (inverse transform first for
// k-space outputs), rescaled back to sample units.
RealTensor reconstruct_ssos(const RealTensor& output, TrainDomain domain, double scale);

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;
  double val_psnr = 0.0;
  double val_ssim = 0.0;
};
std::string train_log_to_csv(std::span<const EpochLog> log);

struct TrainResult {
  SchemeModel model;
  std::vector<EpochLog> log;
  bool diverged = false;   // training hit a non-finite loss
  std::size_t steps = 0;   // optimizer steps taken
};

// Seeded batch-size-1 training of the configured scheme. A non-finite loss
// aborts the run and rolls the parameters back to the end of the last
// completed epoch. Bootstrap branch masks derive per sample from the run
// seed.
TrainResult train(const TrainConfig& config, std::span<const Sample> train_set,
                  std::span<const Sample> val_set, const NetworkSpec& net);

// Held-out scoring of a trained model on one sample: rebuilds the example in
// the training domain, reconstructs the SSoS image, and scores it against
// the label (PSNR in dB, SSIM at the label's peak). Bootstrap models
// re-derive their branch masks from the sample index and the run seed on a
// dedicated stream, so scores do not depend on evaluation order.
struct SampleEval {
  RealTensor recon;  // SSoS image in sample units
  RealTensor truth;
  double psnr_db = 0.0;
  double ssim = 0.0;
};
SampleEval evaluate_sample(SchemeModel& model, const TrainConfig& config, const Sample& sample,
                           std::size_t index);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t n_checked = 0;
  std::vector<std::size_t> skipped;  // coordinates whose probes crossed a kink
};

// Central differences on random parameter coordinates against the analytic
// gradient of the scalar loss. A probe whose two evaluation points fall into
// different activation patterns straddles a kink; it is excluded and listed
// rather than failed. Relative error uses max(|analytic|, |fd|, 1e-12).
GradCheckReport grad_check(SchemeModel& model, const RealTensor& input, const RealTensor& target,
                           LossVariant variant, std::size_t n_coords, Seed seed,
                           double step = 1e-5);

}  // namespace framelet
