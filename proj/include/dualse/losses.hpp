#pragma once

// Training objectives: multi-scale mel + SI-SDR reconstruction, LS-GAN
// discriminator/generator losses, feature matching, the energy-max collapse
// guard, and the weighted generator total. Tensor versions build the autograd
// graph; Waveform versions are the pure double-precision metric path.

#include <cmath>
#include <string>
#include <vector>

#include "dualse/discriminators.hpp"
#include "dualse/dsp.hpp"
#include "dualse/ops.hpp"

namespace dualse {

struct LossWeights {
  double g_cs = 1.0;
  double g_n = 1.0;
  double g_ns = 1.0;
  double feat = 2.0;
  double rec = 1.0;
  double emax = 0.01;
  // Internal mix of the reconstruction term: rec = mel_weight * mel + sisdr_weight * (-si_sdr).
  double mel_weight = 15.0;
  double sisdr_weight = 1.0;

  void validate() const {
    for (double v : {g_cs, g_n, g_ns, feat, rec, emax, mel_weight, sisdr_weight}) {
      if (!(v >= 0.0) || !std::isfinite(v)) {
        throw std::invalid_argument("loss weights must be finite and >= 0");
      }
    }
  }
};

// Per-step scalar breakdown. `total` obeys the weighted-sum identity exactly.
struct LossReport {
  double mel = 0, sisdr = 0, g_cs = 0, g_n = 0, g_ns = 0, feat = 0, emax = 0, total = 0;
  double d_cs = 0, d_n = 0, d_ns = 0;
};

struct MelScale {
  int window;
  int n_mels;
};

inline std::vector<MelScale> toy_mel_scales() {
  return {{512, 40}, {256, 20}, {128, 10}, {64, 5}};
}

inline std::vector<MelScale> paper_mel_scales() {
  return {{2048, 160}, {1024, 80}, {512, 40}, {256, 20}, {128, 10}, {64, 5}};
}

constexpr double kLogMelFloor = 1e-5;
constexpr double kSiSdrEps = 1e-8;
constexpr double kEnergyEps = 1e-8;

// Precomputed mel filterbanks for the tensor loss path.
template <typename S>
class MelLossStack {
 public:
  MelLossStack(const std::vector<MelScale>& scales, int sample_rate, double floor = kLogMelFloor)
      : floor_(floor) {
    for (const auto& sc : scales) {
      const MelFilterbank fb =
          build_mel_filterbank(sample_rate, sc.window, sc.n_mels, 0.0, sample_rate / 2.0);
      auto w = std::make_shared<std::vector<S>>(fb.weights.data.begin(), fb.weights.data.end());
      scales_.push_back({sc.window, sc.n_mels, static_cast<int64_t>(fb.weights.cols), w});
    }
  }

  // log(max(fb |STFT|^2, floor)) as a graph tensor, [B, n_mels, frames].
  ag::Tensor<S> log_mel(const ag::Tensor<S>& x, size_t scale_idx) const {
    const auto& sc = scales_[scale_idx];
    auto spec = ag::stft_tensor(x, sc.window, sc.window / 4);  // [B,2,F,T]
    const int64_t B = spec.dim(0), F = spec.dim(2), T = spec.dim(3);
    auto re = ag::reshape(ag::slice(spec, 1, 0, 1), {B, F, T});
    auto im = ag::reshape(ag::slice(spec, 1, 1, 1), {B, F, T});
    auto power = ag::add(ag::square(re), ag::square(im));
    auto mel = ag::apply_filterbank<S>(sc.weights, sc.n_mels, F, power);
    return ag::log(ag::clamp_min(mel, floor_));
  }

  size_t num_scales() const { return scales_.size(); }
  double floor() const { return floor_; }

 private:
  struct Scale {
    int window;
    int n_mels;
    int64_t bins;
    std::shared_ptr<const std::vector<S>> weights;
  };
  std::vector<Scale> scales_;
  double floor_;
};

// ---------------------------------------------------------------------------
// Tensor-path losses
// ---------------------------------------------------------------------------

template <typename S>
ag::Tensor<S> multiscale_mel_loss_t(const ag::Tensor<S>& x, const ag::Tensor<S>& x_hat,
                                    const MelLossStack<S>& stack) {
  ag::check_same_shape(x, x_hat, "multiscale_mel_loss");
  ag::Tensor<S> total = ag::Tensor<S>::scalar(S(0));
  for (size_t i = 0; i < stack.num_scales(); ++i) {
    ag::Tensor<S> target;
    {
      ag::NoGradGuard ng;
      target = stack.log_mel(ag::detach(x), i);
    }
    auto lm = stack.log_mel(x_hat, i);
    total = ag::add(total, ag::mean_all(ag::abs_t(ag::sub(lm, target))));
  }
  return total;
}

// Mean over the batch of per-utterance SI-SDR in dB. The eps guard appears in
// both ratio terms, capping the perfect-reconstruction case at 10*log10(1/eps)
// and flooring the orthogonal case symmetrically.
template <typename S>
ag::Tensor<S> si_sdr_t(const ag::Tensor<S>& estimate, const ag::Tensor<S>& reference,
                       double eps = kSiSdrEps) {
  ag::check_same_shape(estimate, reference, "si_sdr");
  for (size_t r = 0; r < reference.data().size(); r += reference.dim(-1)) {
    S acc = S(0);
    for (int64_t i = 0; i < reference.dim(-1); ++i) acc += reference.data()[r + i] * reference.data()[r + i];
    if (acc == S(0)) throw std::invalid_argument("si_sdr: all-zero reference");
  }
  auto ref = ag::detach(reference);
  auto dot_tt = ag::sum_lastdim(ag::square(ref));
  auto dot_et = ag::sum_lastdim(ag::mul(estimate, ref));
  auto alpha = ag::divide(dot_et, dot_tt);
  auto num = ag::mul(ag::square(alpha), dot_tt);
  auto diff = ag::sub(ag::scale_rows(ref, alpha), estimate);
  auto den = ag::sum_lastdim(ag::square(diff));
  constexpr double tiny = 1e-30;
  auto ratio = ag::divide(ag::add_scalar(ag::add(num, ag::mul_scalar(den, eps)), tiny),
                          ag::add_scalar(ag::add(den, ag::mul_scalar(num, eps)), tiny));
  return ag::mean_all(ag::mul_scalar(ag::log(ratio), 10.0 / std::log(10.0)));
}

// rec = mel_weight * mel + sisdr_weight * (-si_sdr); applied to the combined
// reconstruction only.
template <typename S>
ag::Tensor<S> reconstruction_loss_t(const ag::Tensor<S>& x, const ag::Tensor<S>& x_hat,
                                    const LossWeights& w, const MelLossStack<S>& stack) {
  auto mel = multiscale_mel_loss_t(x, x_hat, stack);
  auto si = si_sdr_t(x_hat, x);
  return ag::add(ag::mul_scalar(mel, w.mel_weight), ag::mul_scalar(si, -w.sisdr_weight));
}

// Eq. 3/4: sum over sub-discriminators of E[D(fake)^2 + (1 - D(real))^2],
// the expectation taken as the mean over each logit map.
template <typename S>
ag::Tensor<S> lsgan_d_loss_t(const std::vector<DiscriminatorOutput<S>>& real,
                             const std::vector<DiscriminatorOutput<S>>& fake) {
  if (real.size() != fake.size()) {
    throw std::invalid_argument("lsgan_d_loss: sub-discriminator count mismatch");
  }
  ag::Tensor<S> total = ag::Tensor<S>::scalar(S(0));
  for (size_t k = 0; k < real.size(); ++k) {
    auto fake_term = ag::mean_all(ag::square(fake[k].logits));
    auto real_term = ag::mean_all(ag::square(ag::add_scalar(ag::neg(real[k].logits), 1.0)));
    total = ag::add(total, ag::add(fake_term, real_term));
  }
  return total;
}

// Eq. 6: sum over sub-discriminators of E[(1 - D(fake))^2].
template <typename S>
ag::Tensor<S> lsgan_g_loss_t(const std::vector<DiscriminatorOutput<S>>& fake) {
  ag::Tensor<S> total = ag::Tensor<S>::scalar(S(0));
  for (const auto& out : fake) {
    total = ag::add(total, ag::mean_all(ag::square(ag::add_scalar(ag::neg(out.logits), 1.0))));
  }
  return total;
}

// Eq. 5 with the final logit layer excluded: sum_k sum_{l<M_k-1} of the mean
// absolute difference within each feature map.
template <typename S>
ag::Tensor<S> feature_matching_loss_t(const std::vector<DiscriminatorOutput<S>>& real,
                                      const std::vector<DiscriminatorOutput<S>>& fake) {
  if (real.size() != fake.size()) {
    throw std::invalid_argument("feature_matching: sub-discriminator count mismatch");
  }
  ag::Tensor<S> total = ag::Tensor<S>::scalar(S(0));
  for (size_t k = 0; k < real.size(); ++k) {
    if (real[k].features.size() != fake[k].features.size()) {
      throw std::invalid_argument("feature_matching: layer count mismatch at sub-discriminator " +
                                  std::to_string(k));
    }
    for (size_t l = 0; l + 1 < real[k].features.size(); ++l) {
      if (real[k].features[l].shape() != fake[k].features[l].shape()) {
        throw std::invalid_argument("feature_matching: shape mismatch at (k=" + std::to_string(k) +
                                    ", l=" + std::to_string(l) + ")");
      }
      auto real_const = ag::detach(real[k].features[l]);
      total = ag::add(total, ag::mean_all(ag::abs_t(ag::sub(fake[k].features[l], real_const))));
    }
  }
  return total;
}

// Eq. 7: -log(mean square) per utterance, eps-floored, mean over the batch.
template <typename S>
ag::Tensor<S> energy_max_loss_t(const ag::Tensor<S>& x, double eps = kEnergyEps) {
  if (eps <= 0) throw std::invalid_argument("energy_max: eps must be > 0");
  const int64_t t = x.dim(-1);
  auto ms = ag::mul_scalar(ag::sum_lastdim(ag::square(x)), 1.0 / static_cast<double>(t));
  return ag::mean_all(ag::neg(ag::log(ag::clamp_min(ms, eps))));
}

// ---------------------------------------------------------------------------
// Pure (double, Waveform) versions: the metric/oracle path
// ---------------------------------------------------------------------------

inline double multiscale_mel_loss(const Waveform& x, const Waveform& x_hat,
                                  const std::vector<MelScale>& scales,
                                  double floor = kLogMelFloor) {
  if (x.samples.size() != x_hat.samples.size()) {
    throw std::invalid_argument("multiscale_mel_loss: length mismatch");
  }
  double total = 0.0;
  for (const auto& sc : scales) {
    StftConfig cfg{.window_size = sc.window, .hop = sc.window / 4, .window = WindowKind::Hann,
                   .center_pad = true};
    const auto fb = build_mel_filterbank(x.sample_rate, sc.window, sc.n_mels, 0.0,
                                         x.sample_rate / 2.0);
    const Matrix a = log_mel(x, cfg, fb, floor);
    const Matrix b = log_mel(x_hat, cfg, fb, floor);
    double acc = 0.0;
    for (size_t i = 0; i < a.data.size(); ++i) acc += std::abs(a.data[i] - b.data[i]);
    total += acc / static_cast<double>(a.data.size());
  }
  return total;
}

inline double si_sdr(const Waveform& estimate, const Waveform& reference,
                     double eps = kSiSdrEps) {
  if (estimate.samples.size() != reference.samples.size()) {
    throw std::invalid_argument("si_sdr: length mismatch");
  }
  double tt = 0, et = 0;
  for (size_t i = 0; i < reference.samples.size(); ++i) {
    tt += static_cast<double>(reference.samples[i]) * reference.samples[i];
    et += static_cast<double>(estimate.samples[i]) * reference.samples[i];
  }
  if (tt == 0.0) throw std::invalid_argument("si_sdr: all-zero reference");
  const double alpha = et / tt;
  const double num = alpha * alpha * tt;
  double den = 0;
  for (size_t i = 0; i < reference.samples.size(); ++i) {
    const double d = alpha * reference.samples[i] - estimate.samples[i];
    den += d * d;
  }
  return 10.0 * std::log10((num + eps * den) / (den + eps * num));
}

inline double energy_max_loss(const Waveform& x, double eps = kEnergyEps) {
  if (eps <= 0) throw std::invalid_argument("energy_max: eps must be > 0");
  double ms = 0;
  for (float v : x.samples) ms += static_cast<double>(v) * v;
  ms /= static_cast<double>(x.samples.size());
  return -std::log(std::max(ms, eps));
}

// Per-sub-discriminator LS-GAN values on plain logit vectors (closed-value path).
inline double lsgan_d_loss(const std::vector<std::vector<double>>& real_logits,
                           const std::vector<std::vector<double>>& fake_logits) {
  if (real_logits.size() != fake_logits.size()) {
    throw std::invalid_argument("lsgan_d_loss: sub-discriminator count mismatch");
  }
  double total = 0;
  for (size_t k = 0; k < real_logits.size(); ++k) {
    double f = 0, r = 0;
    for (double v : fake_logits[k]) f += v * v;
    for (double v : real_logits[k]) r += (1.0 - v) * (1.0 - v);
    total += f / fake_logits[k].size() + r / real_logits[k].size();
  }
  return total;
}

inline double lsgan_g_loss(const std::vector<std::vector<double>>& fake_logits) {
  double total = 0;
  for (const auto& map : fake_logits) {
    double f = 0;
    for (double v : map) f += (1.0 - v) * (1.0 - v);
    total += f / map.size();
  }
  return total;
}

// Eq. 8 assembly: populates `total` and returns the filled report.
inline LossReport generator_total_loss(LossReport parts, const LossWeights& w) {
  w.validate();
  const double rec = w.mel_weight * parts.mel - w.sisdr_weight * parts.sisdr;
  parts.total = w.g_cs * parts.g_cs + w.g_n * parts.g_n + w.g_ns * parts.g_ns +
                w.feat * parts.feat + w.rec * rec + w.emax * parts.emax;
  return parts;
}

}  // namespace dualse
