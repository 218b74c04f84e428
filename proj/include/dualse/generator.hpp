#pragma once

// Dual-branch generator: convolutional encoder, two RoPE transformer branches
// with disjoint parameters, one shared convolutional decoder, and the
// closed-form two-signal mixture solver.

#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "dualse/dsp.hpp"
#include "dualse/nn.hpp"

namespace dualse {

struct GeneratorConfig {
  int sample_rate = 8000;
  std::vector<int> downsample_factors = {2, 4, 5};
  int latent_dim = 64;
  int branch_layers = 2;
  int branch_heads = 4;
  int branch_ff_dim = 384;
  int base_channels = 12;
  double rope_base = 10000.0;
  double ridge = 1e-8;
  bool stop_grad_mix = false;  // detach alpha*/beta* from the graph

  int total_downsample() const {
    int r = 1;
    for (int f : downsample_factors) r *= f;
    return r;
  }

  void validate() const {
    if (downsample_factors.empty()) throw std::invalid_argument("generator: no stages");
    for (int f : downsample_factors) {
      if (f < 1) throw std::invalid_argument("generator: downsample factors must be positive");
    }
    if (latent_dim % (2 * branch_heads) != 0) {
      throw std::invalid_argument("generator: latent_dim must be divisible by 2*branch_heads");
    }
    if (ridge < 0) throw std::invalid_argument("generator: ridge must be >= 0");
  }

  // Channel width entering stage i (stage 0 is the stem output).
  std::vector<int64_t> channel_plan() const {
    std::vector<int64_t> c{base_channels};
    for (size_t i = 0; i < downsample_factors.size(); ++i) c.push_back(c.back() * 2);
    return c;
  }
};

inline GeneratorConfig toy_generator_config() { return GeneratorConfig{}; }

// The configuration used at full scale in the original recipe; constructible
// but far too heavy for the desk-scale tests.
inline GeneratorConfig paper_generator_config() {
  GeneratorConfig cfg;
  cfg.sample_rate = 16000;
  cfg.downsample_factors = {2, 4, 5, 8};
  cfg.latent_dim = 1024;
  cfg.branch_layers = 8;
  cfg.branch_heads = 8;
  cfg.branch_ff_dim = 1536;
  cfg.base_channels = 64;
  return cfg;
}

// Latent sequence, L frames x M dims.
struct LatentSequence {
  Matrix values;      // [L x M]
  double frame_rate;  // Hz
};

// One generator pass over a single utterance. All three waveforms share the
// padded input length; combined == alpha*noise + beta*clean elementwise.
struct BranchOutputs {
  Waveform clean;
  Waveform noise;
  Waveform combined;
  double alpha = 0.0;
  double beta = 0.0;
};

// Closed-form ridge solution of min_{alpha,beta} ||x - (alpha a + beta b)||^2:
// [aa + r, ab; ab, bb + r] [alpha; beta] = [ax; bx]. With ridge > 0 the system
// is always solvable (Cauchy-Schwarz bounds the determinant away from zero).
template <typename T>
std::pair<double, double> solve_mix_weights(const std::vector<T>& x, const std::vector<T>& a,
                                            const std::vector<T>& b, double ridge) {
  if (x.size() != a.size() || x.size() != b.size()) {
    throw std::invalid_argument("solve_mix_weights: length mismatch");
  }
  if (ridge < 0) throw std::invalid_argument("solve_mix_weights: ridge must be >= 0");
  double aa = 0, bb = 0, ab = 0, ax = 0, bx = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    const double ai = a[i], bi = b[i], xi = x[i];
    aa += ai * ai;
    bb += bi * bi;
    ab += ai * bi;
    ax += ai * xi;
    bx += bi * xi;
  }
  const double a11 = aa + ridge, a22 = bb + ridge;
  double det = a11 * a22 - ab * ab;
  if (det <= 0 || !std::isfinite(det)) {
    // Degenerate (ridge = 0 with collinear a, b): fall back to the pseudo
    // solution along the dominant column.
    if (aa >= bb && aa > 0) return {ax / aa, 0.0};
    if (bb > 0) return {0.0, bx / bb};
    return {0.0, 0.0};
  }
  return {(a22 * ax - ab * bx) / det, (a11 * bx - ab * ax) / det};
}

namespace nn {

template <typename S>
class ResUnit : public Module<S> {
 public:
  ResUnit(int64_t channels, RandomStream& rs)
      : act1_(channels), conv1_(channels, channels, 7, 1, rs), act2_(channels),
        conv2_(channels, channels, 1, 1, rs) {}

  Tensor<S> forward(const Tensor<S>& x) const {
    return ag::add(x, conv2_.forward(act2_.forward(conv1_.forward(act1_.forward(x)))));
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    act1_.collect_params(p + "act1.", out);
    conv1_.collect_params(p + "conv1.", out);
    act2_.collect_params(p + "act2.", out);
    conv2_.collect_params(p + "conv2.", out);
  }

 private:
  Snake<S> act1_;
  Conv1d<S> conv1_;
  Snake<S> act2_;
  Conv1d<S> conv2_;
};

template <typename S>
class Encoder : public Module<S> {
 public:
  Encoder(const GeneratorConfig& cfg, RandomStream& rs) {
    const auto ch = cfg.channel_plan();
    stem_ = std::make_unique<Conv1d<S>>(1, ch[0], 7, 1, rs);
    for (size_t i = 0; i < cfg.downsample_factors.size(); ++i) {
      const int64_t f = cfg.downsample_factors[i];
      down_.push_back(std::make_unique<Conv1d<S>>(ch[i], ch[i + 1], 2 * f, f, rs));
      res_.push_back(std::make_unique<ResUnit<S>>(ch[i + 1], rs));
    }
    out_act_ = std::make_unique<Snake<S>>(ch.back());
    proj_ = std::make_unique<Conv1d<S>>(ch.back(), cfg.latent_dim, 3, 1, rs);
  }

  Tensor<S> forward(const Tensor<S>& x) const {  // [B,1,T] -> [B,M,L]
    auto h = stem_->forward(x);
    for (size_t i = 0; i < down_.size(); ++i) h = res_[i]->forward(down_[i]->forward(h));
    return proj_->forward(out_act_->forward(h));
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    stem_->collect_params(p + "stem.", out);
    for (size_t i = 0; i < down_.size(); ++i) {
      down_[i]->collect_params(p + "down" + std::to_string(i) + ".", out);
      res_[i]->collect_params(p + "res" + std::to_string(i) + ".", out);
    }
    out_act_->collect_params(p + "out_act.", out);
    proj_->collect_params(p + "proj.", out);
  }

 private:
  std::unique_ptr<Conv1d<S>> stem_;
  std::vector<std::unique_ptr<Conv1d<S>>> down_;
  std::vector<std::unique_ptr<ResUnit<S>>> res_;
  std::unique_ptr<Snake<S>> out_act_;
  std::unique_ptr<Conv1d<S>> proj_;
};

template <typename S>
class Decoder : public Module<S> {
 public:
  Decoder(const GeneratorConfig& cfg, RandomStream& rs) {
    const auto ch = cfg.channel_plan();
    const auto& fs = cfg.downsample_factors;
    proj_ = std::make_unique<Conv1d<S>>(cfg.latent_dim, ch.back(), 3, 1, rs);
    for (size_t i = fs.size(); i-- > 0;) {
      const int64_t f = fs[i];
      acts_.push_back(std::make_unique<Snake<S>>(ch[i + 1]));
      up_.push_back(std::make_unique<ConvTranspose1d<S>>(ch[i + 1], ch[i], 2 * f, f, rs));
      res_.push_back(std::make_unique<ResUnit<S>>(ch[i], rs));
    }
    out_act_ = std::make_unique<Snake<S>>(ch[0]);
    out_ = std::make_unique<Conv1d<S>>(ch[0], 1, 7, 1, rs);
  }

  Tensor<S> forward(const Tensor<S>& z) const {  // [B,M,L] -> [B,1,T]
    auto h = proj_->forward(z);
    for (size_t i = 0; i < up_.size(); ++i) h = res_[i]->forward(up_[i]->forward(acts_[i]->forward(h)));
    return ag::tanh_t(out_->forward(out_act_->forward(h)));
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    proj_->collect_params(p + "proj.", out);
    for (size_t i = 0; i < up_.size(); ++i) {
      acts_[i]->collect_params(p + "act" + std::to_string(i) + ".", out);
      up_[i]->collect_params(p + "up" + std::to_string(i) + ".", out);
      res_[i]->collect_params(p + "res" + std::to_string(i) + ".", out);
    }
    out_act_->collect_params(p + "out_act.", out);
    out_->collect_params(p + "out.", out);
  }

 private:
  std::unique_ptr<Conv1d<S>> proj_;
  std::vector<std::unique_ptr<Snake<S>>> acts_;
  std::vector<std::unique_ptr<ConvTranspose1d<S>>> up_;
  std::vector<std::unique_ptr<ResUnit<S>>> res_;
  std::unique_ptr<Snake<S>> out_act_;
  std::unique_ptr<Conv1d<S>> out_;
};

template <typename S>
class BranchTransformer : public Module<S> {
 public:
  BranchTransformer(const GeneratorConfig& cfg, RandomStream& rs) {
    for (int i = 0; i < cfg.branch_layers; ++i) {
      blocks_.push_back(std::make_unique<TransformerBlock<S>>(
          cfg.latent_dim, cfg.branch_heads, cfg.branch_ff_dim, cfg.rope_base, rs));
    }
    final_ln_ = std::make_unique<LayerNorm<S>>(cfg.latent_dim);
  }

  Tensor<S> forward(const Tensor<S>& z) const {  // [B,L,M]
    auto h = z;
    for (const auto& b : blocks_) h = b->forward(h);
    return final_ln_->forward(h);
  }

  void collect_params(const std::string& p, std::vector<NamedParam<S>>& out) const override {
    for (size_t i = 0; i < blocks_.size(); ++i) {
      blocks_[i]->collect_params(p + "block" + std::to_string(i) + ".", out);
    }
    final_ln_->collect_params(p + "final_ln.", out);
  }

 private:
  std::vector<std::unique_ptr<TransformerBlock<S>>> blocks_;
  std::unique_ptr<LayerNorm<S>> final_ln_;
};

}  // namespace nn

enum class Branch { Clean, Noise };

// Batched generator outputs (graph tensors; alpha/beta are per-sample).
template <typename S>
struct GeneratorBatchOut {
  ag::Tensor<S> clean;     // [B, T]
  ag::Tensor<S> noise;     // [B, T]
  ag::Tensor<S> combined;  // [B, T]
  ag::Tensor<S> alpha;     // [B]
  ag::Tensor<S> beta;      // [B]
};

template <typename S>
class Generator : public nn::Module<S> {
 public:
  Generator(const GeneratorConfig& cfg, RandomStream& rs) : cfg_(cfg) {
    cfg.validate();
    encoder_ = std::make_unique<nn::Encoder<S>>(cfg, rs);
    branch_clean_ = std::make_unique<nn::BranchTransformer<S>>(cfg, rs);
    branch_noise_ = std::make_unique<nn::BranchTransformer<S>>(cfg, rs);
    decoder_ = std::make_unique<nn::Decoder<S>>(cfg, rs);
  }

  const GeneratorConfig& config() const { return cfg_; }

  // [B, T] -> [B, L, M]; requires T to be a multiple of the downsampling ratio.
  ag::Tensor<S> encode_batch(const ag::Tensor<S>& x) const {
    const int64_t R = cfg_.total_downsample();
    if (x.ndim() != 2 || x.dim(1) < R) {
      throw std::invalid_argument("encode: input shorter than the downsampling ratio (" +
                                  std::to_string(R) + ")");
    }
    if (x.dim(1) % R != 0) {
      throw std::invalid_argument("encode: length must be a multiple of " + std::to_string(R) +
                                  "; right-pad first");
    }
    for (S v : x.data()) {
      if (!std::isfinite(static_cast<double>(v))) {
        throw std::invalid_argument("encode: non-finite sample");
      }
    }
    const int64_t B = x.dim(0), T = x.dim(1);
    auto z = encoder_->forward(ag::reshape(x, {B, 1, T}));  // [B, M, L]
    return ag::permute(z, {0, 2, 1});                       // [B, L, M]
  }

  ag::Tensor<S> branch_batch(const ag::Tensor<S>& z, Branch which) const {
    return which == Branch::Clean ? branch_clean_->forward(z) : branch_noise_->forward(z);
  }

  // [B, L, M] -> [B, T = L*R]; the same decoder instance serves both branches.
  ag::Tensor<S> decode_batch(const ag::Tensor<S>& z) const {
    const int64_t B = z.dim(0), L = z.dim(1), M = z.dim(2);
    auto wav = decoder_->forward(ag::permute(z, {0, 2, 1}));  // [B,1,T]
    (void)M;
    return ag::reshape(wav, {B, L * cfg_.total_downsample()});
  }

  // Full pass, Eq-style: encode, two branches, shared decode, closed-form mix.
  GeneratorBatchOut<S> forward_batch(const ag::Tensor<S>& x) const {
    auto z = encode_batch(x);
    auto clean = decode_batch(branch_batch(z, Branch::Clean));
    auto noise = decode_batch(branch_batch(z, Branch::Noise));

    // Ridge-regularized normal equations on per-sample dot products.
    auto x_const = ag::detach(x);
    auto aa = ag::sum_lastdim(ag::square(noise));
    auto bb = ag::sum_lastdim(ag::square(clean));
    auto ab = ag::sum_lastdim(ag::mul(noise, clean));
    auto ax = ag::sum_lastdim(ag::mul(noise, x_const));
    auto bx = ag::sum_lastdim(ag::mul(clean, x_const));
    auto a11 = ag::add_scalar(aa, cfg_.ridge);
    auto a22 = ag::add_scalar(bb, cfg_.ridge);
    auto det = ag::sub(ag::mul(a11, a22), ag::square(ab));
    auto alpha = ag::divide(ag::sub(ag::mul(a22, ax), ag::mul(ab, bx)), det);
    auto beta = ag::divide(ag::sub(ag::mul(a11, bx), ag::mul(ab, ax)), det);
    if (cfg_.stop_grad_mix) {
      alpha = ag::detach(alpha);
      beta = ag::detach(beta);
    }
    auto combined = ag::add(ag::scale_rows(noise, alpha), ag::scale_rows(clean, beta));
    return {clean, noise, combined, alpha, beta};
  }

  // --- single-utterance API -------------------------------------------------

  // Zero right-padding to the next multiple of the downsampling ratio.
  Waveform pad_to_ratio(const Waveform& x) const {
    const int64_t R = cfg_.total_downsample();
    Waveform out = x;
    out.samples.resize((out.length() + R - 1) / R * R, 0.0f);
    return out;
  }

  void check_min_length(const Waveform& x) const {
    const int64_t R = cfg_.total_downsample();
    if (x.length() < R) {
      throw std::invalid_argument("generator: input length " + std::to_string(x.length()) +
                                  " below the downsampling ratio " + std::to_string(R));
    }
  }

  LatentSequence encode(const Waveform& x) const {
    ag::NoGradGuard ng;
    check_min_length(x);
    const Waveform padded = pad_to_ratio(x);
    auto z = encode_batch(to_tensor(padded));
    LatentSequence seq;
    seq.values = Matrix(z.dim(1), z.dim(2));
    for (int64_t i = 0; i < z.numel(); ++i) seq.values.data[i] = z.data()[i];
    seq.frame_rate = static_cast<double>(cfg_.sample_rate) / cfg_.total_downsample();
    return seq;
  }

  BranchOutputs forward(const Waveform& x) const {
    ag::NoGradGuard ng;
    check_min_length(x);
    const Waveform padded = pad_to_ratio(x);
    auto out = forward_batch(to_tensor(padded));
    BranchOutputs res;
    res.clean = from_tensor(out.clean, x.sample_rate);
    res.noise = from_tensor(out.noise, x.sample_rate);
    res.combined = from_tensor(out.combined, x.sample_rate);
    res.alpha = static_cast<double>(out.alpha.data()[0]);
    res.beta = static_cast<double>(out.beta.data()[0]);
    return res;
  }

  // Enhancement = clean branch trimmed back to the caller's length.
  Waveform enhance(const Waveform& x) const {
    BranchOutputs out = forward(x);
    out.clean.samples.resize(x.samples.size());
    return out.clean;
  }

  void collect_params(const std::string& p, std::vector<nn::NamedParam<S>>& out) const override {
    encoder_->collect_params(p + "encoder.", out);
    branch_clean_->collect_params(p + "branch_clean.", out);
    branch_noise_->collect_params(p + "branch_noise.", out);
    decoder_->collect_params(p + "decoder.", out);
  }

  const nn::Decoder<S>& decoder() const { return *decoder_; }

  ag::Tensor<S> to_tensor(const Waveform& x) const {
    std::vector<S> data(x.samples.begin(), x.samples.end());
    return ag::Tensor<S>::from(std::move(data), {1, x.length()});
  }

  static Waveform from_tensor(const ag::Tensor<S>& t, int sample_rate) {
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.assign(t.data().begin(), t.data().end());
    return w;
  }

 private:
  GeneratorConfig cfg_;
  std::unique_ptr<nn::Encoder<S>> encoder_;
  std::unique_ptr<nn::BranchTransformer<S>> branch_clean_;
  std::unique_ptr<nn::BranchTransformer<S>> branch_noise_;
  std::unique_ptr<nn::Decoder<S>> decoder_;
};

}  // namespace dualse
