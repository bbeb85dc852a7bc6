#include "framelet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <stdexcept>

#include "framelet/fft.hpp"
#include "framelet/metrics.hpp"

namespace framelet {

namespace {

constexpr std::uint64_t kTrainMaskStream = 0x7261696Eull;
constexpr std::uint64_t kValMaskStream = 0x76616C69ull;
constexpr std::uint64_t kEvalMaskStream = 0x6576616Cull;

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

// Population standard deviation of the entry magnitudes.
double magnitude_std(const ComplexTensor& t) {
  double s1 = 0.0, s2 = 0.0;
  for (const auto& z : t.storage()) {
    const double m = std::abs(z);
    s1 += m;
    s2 += m * m;
  }
  const double n = static_cast<double>(t.size());
  const double var = s2 / n - (s1 / n) * (s1 / n);
  return var > 0.0 ? std::sqrt(var) : 0.0;
}

void scale_in_place(ComplexTensor& t, double factor) {
  for (auto& z : t.storage()) z *= factor;
}

std::vector<SamplingMask> derive_branch_masks(const SchemeConfig& scheme, const SamplingMask& base,
                                              std::uint64_t stream, std::size_t index, Seed seed) {
  return bootstrap_masks(base, scheme.n_branches, scheme.keep_ratio,
                         Seed{derive_seed(seed.value, stream + index)});
}

}  // namespace

const char* loss_name(LossVariant variant) {
  return variant == LossVariant::L2 ? "l2" : "squared-l2";
}

LossVariant loss_from_name(const std::string& name) {
  if (name == "l2") return LossVariant::L2;
  if (name == "squared-l2") return LossVariant::SquaredL2;
  throw std::invalid_argument("unknown loss variant: " + name);
}

const char* domain_name(TrainDomain domain) {
  return domain == TrainDomain::Kspace ? "kspace" : "image";
}

TrainDomain domain_from_name(const std::string& name) {
  if (name == "kspace") return TrainDomain::Kspace;
  if (name == "image") return TrainDomain::Image;
  throw std::invalid_argument("unknown training domain: " + name);
}

LossResult loss(const RealTensor& target, const RealTensor& v, LossVariant variant) {
  if (!target.same_shape(v)) throw std::invalid_argument("loss: shape mismatch");
  LossResult out;
  out.grad = RealTensor(v.shape());
  double acc = 0.0;
  for (std::size_t k = 0; k < v.size(); ++k) {
    const double d = v[k] - target[k];
    acc += d * d;
    out.grad[k] = d;
  }
  if (variant == LossVariant::SquaredL2) {
    out.value = acc;
    for (auto& g : out.grad.storage()) g *= 2.0;
    return out;
  }
  out.value = std::sqrt(acc);
  if (out.value == 0.0) {
    for (auto& g : out.grad.storage()) g = 0.0;
  } else {
    for (auto& g : out.grad.storage()) g /= out.value;
  }
  return out;
}

AdamState make_adam_state(std::size_t n) {
  AdamState state;
  state.m.assign(n, 0.0);
  state.v.assign(n, 0.0);
  return state;
}

void adam_step(std::vector<double>& params, std::span<const double> grads, AdamState& state,
               double lr) {
  if (params.size() != grads.size() || params.size() != state.m.size() ||
      params.size() != state.v.size())
    throw std::invalid_argument("adam_step: layout mismatch");
  for (double g : grads)
    if (!std::isfinite(g)) throw std::runtime_error("adam_step: non-finite gradient");

  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grads[i];
    state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grads[i] * grads[i];
    params[i] -= lr * (state.m[i] / bc1) / (std::sqrt(state.v[i] / bc2) + state.eps);
  }
}

void TrainConfig::validate() const {
  if (!(lr0 > lr_floor) || !(lr_floor > 0.0))
    throw std::invalid_argument("TrainConfig: need lr0 > lr_floor > 0");
  if (epochs == 0) throw std::invalid_argument("TrainConfig: need at least one epoch");
  if (halve_period == 0) throw std::invalid_argument("TrainConfig: halving period must be >= 1");
}

double scheduled_lr(const TrainConfig& config, std::size_t epoch) {
  const auto halvings = static_cast<int>(epoch / config.halve_period);
  return std::max(config.lr_floor, std::ldexp(config.lr0, -halvings));
}

TrainExample make_example(const Sample& sample, TrainDomain domain, bool normalize) {
  ComplexTensor masked = apply_forward(sample.full_kspace, sample.mask);
  ComplexTensor input = domain == TrainDomain::Kspace ? std::move(masked) : ifft2(masked);
  ComplexTensor target = domain == TrainDomain::Kspace ? sample.full_kspace : sample.label_image;

  TrainExample ex;
  if (normalize) {
    const double s = magnitude_std(input);
    if (s > 0.0) {
      ex.scale = s;
      scale_in_place(input, 1.0 / s);
      scale_in_place(target, 1.0 / s);
    }
  }
  ex.input = complex_to_channels(input);
  ex.target = complex_to_channels(target);
  return ex;
}

RealTensor reconstruct_ssos(const RealTensor& output, TrainDomain domain, double scale) {
  ComplexTensor coils = channels_to_complex(output);
  if (domain == TrainDomain::Kspace) coils = ifft2(coils);
  RealTensor img = ssos(coils);
  for (auto& v : img.storage()) v *= scale;
  return img;
}

std::string train_log_to_csv(std::span<const EpochLog> log) {
  std::string out = "epoch,lr,train_loss,val_psnr,val_ssim\n";
  for (const EpochLog& e : log)
    out += std::to_string(e.epoch) + "," + fmt17(e.lr) + "," + fmt17(e.train_loss) + "," +
           fmt17(e.val_psnr) + "," + fmt17(e.val_ssim) + "\n";
  return out;
}

TrainResult train(const TrainConfig& config, std::span<const Sample> train_set,
                  std::span<const Sample> val_set, const NetworkSpec& net) {
  config.validate();
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");

  TrainResult result;
  result.model = build_scheme_model(net, config.scheme, config.seed);
  const bool bootstrap = result.model.scheme.kind == SchemeKind::Bootstrap;

  std::vector<TrainExample> train_ex, val_ex;
  std::vector<std::vector<SamplingMask>> train_masks, val_masks;
  for (std::size_t i = 0; i < train_set.size(); ++i) {
    train_ex.push_back(make_example(train_set[i], config.domain, config.normalize));
    if (bootstrap)
      train_masks.push_back(derive_branch_masks(result.model.scheme, train_set[i].mask,
                                                kTrainMaskStream, i, config.seed));
  }
  for (std::size_t i = 0; i < val_set.size(); ++i) {
    val_ex.push_back(make_example(val_set[i], config.domain, config.normalize));
    if (bootstrap)
      val_masks.push_back(derive_branch_masks(result.model.scheme, val_set[i].mask,
                                              kValMaskStream, i, config.seed));
  }

  AdamState adam = make_adam_state(result.model.params.size());
  std::vector<double> grads(result.model.params.size(), 0.0);
  std::vector<double> last_good = result.model.params.values;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const double lr = scheduled_lr(config, epoch);
    double loss_acc = 0.0;
    for (std::size_t i = 0; i < train_ex.size(); ++i) {
      if (bootstrap) result.model.masks = train_masks[i];
      // The forward pass reports non-finite activations by throwing; both
      // that and a non-finite loss mean the run has diverged.
      try {
        const RealTensor v = scheme_output(result.model, train_ex[i].input);
        const LossResult l = loss(train_ex[i].target, v, config.loss);
        if (!std::isfinite(l.value)) throw std::runtime_error("train: non-finite loss");
        loss_acc += l.value;
        std::fill(grads.begin(), grads.end(), 0.0);
        scheme_backward(result.model, train_ex[i].input, l.grad, grads);
        adam_step(result.model.params.values, grads, adam, lr);
      } catch (const std::runtime_error&) {
        result.model.params.values = last_good;
        result.diverged = true;
        return result;
      }
      result.steps += 1;
    }

    EpochLog entry;
    entry.epoch = epoch;
    entry.lr = lr;
    entry.train_loss = loss_acc / static_cast<double>(train_ex.size());
    if (!val_ex.empty()) {
      double psnr_acc = 0.0, ssim_acc = 0.0;
      for (std::size_t i = 0; i < val_ex.size(); ++i) {
        if (bootstrap) result.model.masks = val_masks[i];
        const RealTensor v = scheme_output(result.model, val_ex[i].input);
        const RealTensor recon = reconstruct_ssos(v, config.domain, val_ex[i].scale);
        const RealTensor truth = ssos(val_set[i].label_image);
        double peak = truth[0];
        for (double t : truth.storage()) peak = std::max(peak, t);
        psnr_acc += psnr(recon, truth);
        ssim_acc += ssim(recon, truth, peak);
      }
      entry.val_psnr = psnr_acc / static_cast<double>(val_ex.size());
      entry.val_ssim = ssim_acc / static_cast<double>(val_ex.size());
    }
    result.log.push_back(entry);
    last_good = result.model.params.values;
  }
  return result;
}

SampleEval evaluate_sample(SchemeModel& model, const TrainConfig& config, const Sample& sample,
                           std::size_t index) {
  if (model.scheme.kind == SchemeKind::Bootstrap)
    model.masks =
        derive_branch_masks(model.scheme, sample.mask, kEvalMaskStream, index, config.seed);
  const TrainExample ex = make_example(sample, config.domain, config.normalize);
  const RealTensor v = scheme_output(model, ex.input);
  SampleEval out;
  out.recon = reconstruct_ssos(v, config.domain, ex.scale);
  out.truth = ssos(sample.label_image);
  double peak = out.truth[0];
  for (double t : out.truth.storage()) peak = std::max(peak, t);
  out.psnr_db = psnr(out.recon, out.truth);
  out.ssim = framelet::ssim(out.recon, out.truth, peak);
  return out;
}

GradCheckReport grad_check(SchemeModel& model, const RealTensor& input, const RealTensor& target,
                           LossVariant variant, std::size_t n_coords, Seed seed, double step) {
  if (n_coords == 0) throw std::invalid_argument("grad_check: need at least one coordinate");
  const std::size_t n_params = model.params.size();
  if (n_params == 0) throw std::invalid_argument("grad_check: model has no parameters");

  // Distinct coordinates via a partial shuffle.
  Rng rng(seed);
  std::vector<std::size_t> order(n_params);
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t count = std::min(n_coords, n_params);
  for (std::size_t k = 0; k < count && k + 1 < order.size(); ++k)
    std::swap(order[k], order[k + rng.below(order.size() - k)]);

  std::vector<double> grads(n_params, 0.0);
  {
    const RealTensor v = scheme_output(model, input);
    const LossResult l = loss(target, v, variant);
    scheme_backward(model, input, l.grad, grads);
  }

  const auto eval = [&](std::size_t i, double delta, std::vector<std::uint8_t>& fp) {
    const double saved = model.params.values[i];
    model.params.values[i] = saved + delta;
    fp = scheme_fingerprint(model, input);
    const double value = loss(target, scheme_output(model, input), variant).value;
    model.params.values[i] = saved;
    return value;
  };

  GradCheckReport report;
  for (std::size_t k = 0; k < count; ++k) {
    const std::size_t i = order[k];
    std::vector<std::uint8_t> fp_plus, fp_minus;
    const double up = eval(i, step, fp_plus);
    const double dn = eval(i, -step, fp_minus);
    if (fp_plus != fp_minus) {
      report.skipped.push_back(i);
      continue;
    }
    const double fd = (up - dn) / (2.0 * step);
    const double rel =
        std::abs(fd - grads[i]) / std::max({std::abs(fd), std::abs(grads[i]), 1e-12});
    report.max_rel_error = std::max(report.max_rel_error, rel);
    report.n_checked += 1;
  }
  return report;
}

}  // namespace framelet
