#pragma once

// The three discriminator ensembles. The noisy-reconstruction ensemble pairs
// multi-period waveform sub-discriminators with a multi-band multi-scale STFT
// stack; the branch-prior ensembles use single-band MS-STFT only.

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "dualse/nn.hpp"

namespace dualse {

struct MpdConfig {
  std::vector<int> periods = {2, 3, 5, 7, 11};
  std::vector<int> channels = {8, 16, 32};

  void validate() const {
    for (size_t i = 1; i < periods.size(); ++i) {
      if (periods[i] <= periods[i - 1]) {
        throw std::invalid_argument("mpd: periods must be strictly increasing");
      }
    }
    for (size_t i = 0; i < periods.size(); ++i) {
      for (size_t j = i + 1; j < periods.size(); ++j) {
        int a = periods[i], b = periods[j];
        while (b) {
          const int t = a % b;
          a = b;
          b = t;
        }
        if (a != 1) {
          std::fprintf(stderr, "warning: mpd periods %d and %d are not coprime\n", periods[i],
                       periods[j]);
        }
      }
    }
  }
};

struct MsStftConfig {
  std::vector<int> window_sizes = {512, 256, 128};
  int n_bands = 1;
  int filters = 32;
  int layers = 3;  // hidden conv layers before the 1-channel output conv

  int64_t hop(int win) const { return win / 4; }

  void validate() const {
    if (n_bands < 1) throw std::invalid_argument("msstft: n_bands must be >= 1");
    if (filters < 1) throw std::invalid_argument("msstft: filters must be >= 1");
    for (int w : window_sizes) {
      if (!is_power_of_two(w)) {
        throw std::invalid_argument("msstft: window sizes must be powers of two");
      }
    }
  }
};

struct EnsembleConfig {
  bool use_mpd = false;
  MpdConfig mpd;
  MsStftConfig msstft;
  bool empty = false;  // ablation: no sub-discriminators at all
};

enum class EnsembleKind { NS, CS, N };

inline EnsembleConfig toy_ensemble_config(EnsembleKind kind) {
  EnsembleConfig cfg;
  if (kind == EnsembleKind::NS) {
    cfg.use_mpd = true;
    cfg.msstft = {{512, 256, 128}, 5, 16, 3};
  } else {
    cfg.use_mpd = false;
    cfg.msstft = {{512, 256, 128}, 1, 32, 3};
  }
  return cfg;
}

inline EnsembleConfig paper_ensemble_config(EnsembleKind kind) {
  EnsembleConfig cfg;
  if (kind == EnsembleKind::NS) {
    cfg.use_mpd = true;
    cfg.msstft = {{2048, 1024, 512}, 5, 32, 3};
  } else {
    cfg.use_mpd = false;
    cfg.msstft = {{2048, 1024, 512, 256, 128}, 1, 128, 3};
  }
  return cfg;
}

// Logits plus the ordered conv feature maps (shallow to deep; the final entry
// is the logit map itself, so feature matching consumes all but the last).
template <typename S>
struct DiscriminatorOutput {
  ag::Tensor<S> logits;
  std::vector<ag::Tensor<S>> features;
};

namespace nn {

// One period's sub-discriminator: the waveform is reflect-padded to a multiple
// of p, viewed as a (time/p x p) map and convolved along the folded time axis.
template <typename S>
class MpdSubDiscriminator : public Module<S> {
 public:
  MpdSubDiscriminator(int period, const std::vector<int>& channels, RandomStream& rs)
      : period_(period) {
    int64_t cin = 1;
    for (int c : channels) {
      convs_.push_back(std::make_unique<Conv2d<S>>(cin, c, std::pair<int64_t, int64_t>{5, 1},
                                                   std::pair<int64_t, int64_t>{3, 1},
                                                   std::pair<int64_t, int64_t>{2, 0}, rs));
      cin = c;
    }
    out_ = std::make_unique<Conv2d<S>>(cin, 1, std::pair<int64_t, int64_t>{3, 1},
                                       std::pair<int64_t, int64_t>{1, 1},
                                       std::pair<int64_t, int64_t>{1, 0}, rs);
  }

  DiscriminatorOutput<S> forward(const ag::Tensor<S>& x) const {  // [B, T]
    const int64_t B = x.dim(0), T = x.dim(1);
    const int64_t pad = (period_ - T % period_) % period_;
    auto padded = pad > 0 ? ag::reflect_pad_last(x, 0, pad) : x;
    auto map = ag::reshape(padded, {B, 1, (T + pad) / period_, static_cast<int64_t>(period_)});
    DiscriminatorOutput<S> out;
    auto h = map;
    for (const auto& conv : convs_) {
      h = ag::leaky_relu(conv->forward(h), 0.1);
      out.features.push_back(h);
    }
    out.logits = out_->forward(h);
    out.features.push_back(out.logits);
    return out;
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    for (size_t i = 0; i < convs_.size(); ++i) {
      convs_[i]->collect_params(p + "conv" + std::to_string(i) + ".", out);
    }
    out_->collect_params(p + "out.", out);
  }

 private:
  int period_;
  std::vector<std::unique_ptr<Conv2d<S>>> convs_;
  std::unique_ptr<Conv2d<S>> out_;
};

// One (scale, band) STFT sub-discriminator over a [B, 2, bins, frames] slice.
template <typename S>
class StftSubDiscriminator : public Module<S> {
 public:
  StftSubDiscriminator(int filters, int layers, RandomStream& rs) {
    int64_t cin = 2;
    for (int l = 0; l < layers; ++l) {
      const bool wide = l < 2;
      convs_.push_back(std::make_unique<Conv2d<S>>(
          cin, filters,
          wide ? std::pair<int64_t, int64_t>{3, 9} : std::pair<int64_t, int64_t>{3, 3},
          wide ? std::pair<int64_t, int64_t>{2, 2} : std::pair<int64_t, int64_t>{2, 1},
          wide ? std::pair<int64_t, int64_t>{1, 4} : std::pair<int64_t, int64_t>{1, 1}, rs));
      cin = filters;
    }
    out_ = std::make_unique<Conv2d<S>>(cin, 1, std::pair<int64_t, int64_t>{3, 3},
                                       std::pair<int64_t, int64_t>{1, 1},
                                       std::pair<int64_t, int64_t>{1, 1}, rs);
  }

  DiscriminatorOutput<S> forward(const ag::Tensor<S>& spec_band) const {
    DiscriminatorOutput<S> out;
    auto h = spec_band;
    for (const auto& conv : convs_) {
      h = ag::leaky_relu(conv->forward(h), 0.1);
      out.features.push_back(h);
    }
    out.logits = out_->forward(h);
    out.features.push_back(out.logits);
    return out;
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    for (size_t i = 0; i < convs_.size(); ++i) {
      convs_[i]->collect_params(p + "conv" + std::to_string(i) + ".", out);
    }
    out_->collect_params(p + "out.", out);
  }

 private:
  std::vector<std::unique_ptr<Conv2d<S>>> convs_;
  std::unique_ptr<Conv2d<S>> out_;
};

}  // namespace nn

// Contiguous near-equal frequency band edges: sizes differ by at most one and
// partition [0, bins) without gaps.
inline std::vector<std::pair<int64_t, int64_t>> band_partition(int64_t bins, int n_bands) {
  std::vector<std::pair<int64_t, int64_t>> bands;
  for (int b = 0; b < n_bands; ++b) {
    const int64_t start = b * bins / n_bands;
    const int64_t end = (b + 1) * bins / n_bands;
    bands.push_back({start, end - start});
  }
  return bands;
}

template <typename S>
class DiscriminatorEnsemble : public nn::Module<S> {
 public:
  DiscriminatorEnsemble(const EnsembleConfig& cfg, RandomStream& rs) : cfg_(cfg) {
    if (cfg_.empty) return;
    cfg_.msstft.validate();
    if (cfg_.use_mpd) {
      cfg_.mpd.validate();
      for (int p : cfg_.mpd.periods) {
        mpd_.push_back(std::make_unique<nn::MpdSubDiscriminator<S>>(p, cfg_.mpd.channels, rs));
      }
    }
    for (size_t s = 0; s < cfg_.msstft.window_sizes.size(); ++s) {
      for (int b = 0; b < cfg_.msstft.n_bands; ++b) {
        stft_.push_back(std::make_unique<nn::StftSubDiscriminator<S>>(cfg_.msstft.filters,
                                                                      cfg_.msstft.layers, rs));
      }
    }
  }

  int64_t num_sub_discriminators() const {
    return static_cast<int64_t>(mpd_.size() + stft_.size());
  }

  std::vector<DiscriminatorOutput<S>> forward(const ag::Tensor<S>& x) const {  // [B, T]
    std::vector<DiscriminatorOutput<S>> outs;
    if (cfg_.empty) return outs;
    for (const auto& sub : mpd_) outs.push_back(sub->forward(x));
    size_t idx = 0;
    for (int win : cfg_.msstft.window_sizes) {
      if (x.dim(1) < win / 2 + 1) {
        throw std::invalid_argument("msstft: input too short for window size " +
                                    std::to_string(win));
      }
      auto spec = ag::stft_tensor(x, win, cfg_.msstft.hop(win));  // [B,2,bins,frames]
      const auto bands = band_partition(spec.dim(2), cfg_.msstft.n_bands);
      for (const auto& [start, len] : bands) {
        auto band = ag::slice(spec, 2, start, len);
        outs.push_back(stft_[idx++]->forward(band));
      }
    }
    return outs;
  }

  void collect_params(const std::string& p, std::vector<nn::NamedParam<S>>& out) const override {
    for (size_t i = 0; i < mpd_.size(); ++i) {
      mpd_[i]->collect_params(p + "mpd" + std::to_string(i) + ".", out);
    }
    for (size_t i = 0; i < stft_.size(); ++i) {
      stft_[i]->collect_params(p + "stft" + std::to_string(i) + ".", out);
    }
  }

  const EnsembleConfig& config() const { return cfg_; }

 private:
  EnsembleConfig cfg_;
  std::vector<std::unique_ptr<nn::MpdSubDiscriminator<S>>> mpd_;
  std::vector<std::unique_ptr<nn::StftSubDiscriminator<S>>> stft_;
};

}  // namespace dualse
