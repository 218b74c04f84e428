#include "dualse/dsp.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <stdexcept>

namespace dualse {

namespace {
constexpr double kPi = 3.14159265358979323846264338327950288;

bool is_pow2(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

// Reflect padding index (no repeated edge sample), matching numpy "reflect".
int64_t reflect_index(int64_t i, int64_t n) {
  if (n == 1) return 0;
  const int64_t period = 2 * (n - 1);
  i = ((i % period) + period) % period;
  return i < n ? i : period - i;
}
}  // namespace

std::vector<double> make_window(WindowKind kind, int size) {
  std::vector<double> w(static_cast<size_t>(size), 1.0);
  if (kind == WindowKind::Hann) {
    // Periodic Hann: satisfies the COLA-squared property at hop = size/4.
    for (int i = 0; i < size; ++i) {
      w[i] = 0.5 * (1.0 - std::cos(2.0 * kPi * i / size));
    }
  }
  return w;
}

int64_t stft_frame_count(int64_t num_samples, const StftConfig& cfg) {
  if (cfg.hop <= 0 || cfg.hop > cfg.window_size) {
    throw std::invalid_argument("stft: require 0 < hop <= window_size");
  }
  if (cfg.center_pad) {
    const int64_t padded = num_samples + 2 * (cfg.window_size / 2);
    return 1 + (padded - cfg.window_size) / cfg.hop;
  }
  if (num_samples < cfg.window_size) {
    throw std::invalid_argument("stft: signal shorter than one window (" +
                                std::to_string(num_samples) + " < " +
                                std::to_string(cfg.window_size) + ") with center_pad off");
  }
  return 1 + (num_samples - cfg.window_size) / cfg.hop;
}

void fft_inplace(std::complex<double>* a, int64_t n, int sign) {
  // Iterative radix-2 Cooley-Tukey.
  for (int64_t i = 1, j = 0; i < n; ++i) {
    int64_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  for (int64_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * 2.0 * kPi / static_cast<double>(len);
    const std::complex<double> wlen(std::cos(ang), std::sin(ang));
    for (int64_t i = 0; i < n; i += len) {
      std::complex<double> w(1.0, 0.0);
      for (int64_t j = 0; j < len / 2; ++j) {
        const std::complex<double> u = a[i + j];
        const std::complex<double> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

ComplexSpectrogram stft(const Waveform& x, const StftConfig& cfg) {
  const int64_t n = x.length();
  if (n < 1) throw std::invalid_argument("stft: empty signal");
  for (float v : x.samples) {
    if (!std::isfinite(v)) throw std::invalid_argument("stft: non-finite sample");
  }
  const int64_t frames = stft_frame_count(n, cfg);
  const int w = cfg.window_size;
  const int bins = cfg.bins();
  const std::vector<double> window = make_window(cfg.window, w);

  ComplexSpectrogram out;
  out.n_bins = bins;
  out.n_frames = frames;
  out.config = cfg;
  out.sample_rate = x.sample_rate;
  out.bins.assign(static_cast<size_t>(bins) * frames, {0.0, 0.0});

  const int64_t offset = cfg.center_pad ? -(w / 2) : 0;
  std::vector<std::complex<double>> buf(static_cast<size_t>(w));
  const bool pow2 = is_pow2(w);

  for (int64_t t = 0; t < frames; ++t) {
    const int64_t start = offset + t * cfg.hop;
    for (int i = 0; i < w; ++i) {
      int64_t idx = start + i;
      if (cfg.center_pad) idx = reflect_index(idx, n);
      buf[i] = {window[i] * x.samples[idx], 0.0};
    }
    if (pow2) {
      fft_inplace(buf.data(), w, -1);
      for (int k = 0; k < bins; ++k) out.at(k, t) = buf[k];
    } else {
      // Direct DFT for non power-of-two windows (reference path only).
      for (int k = 0; k < bins; ++k) {
        std::complex<double> acc(0.0, 0.0);
        for (int i = 0; i < w; ++i) {
          const double ang = -2.0 * kPi * k * i / w;
          acc += buf[i].real() * std::complex<double>(std::cos(ang), std::sin(ang));
        }
        out.at(k, t) = acc;
      }
    }
  }
  return out;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

MelFilterbank build_mel_filterbank(int sample_rate, int window_size, int n_mels,
                                   double f_min, double f_max) {
  if (n_mels < 1) throw std::invalid_argument("mel: n_mels must be >= 1");
  if (!(f_min >= 0.0 && f_min < f_max && f_max <= sample_rate / 2.0)) {
    throw std::invalid_argument("mel: require 0 <= f_min < f_max <= sample_rate/2");
  }
  const int bins = window_size / 2 + 1;
  const double bin_hz = static_cast<double>(sample_rate) / window_size;

  std::vector<double> edges(static_cast<size_t>(n_mels) + 2);
  const double mel_lo = hz_to_mel(f_min);
  const double mel_hi = hz_to_mel(f_max);
  for (int i = 0; i < n_mels + 2; ++i) {
    edges[i] = mel_to_hz(mel_lo + (mel_hi - mel_lo) * i / (n_mels + 1));
  }

  MelFilterbank fb;
  fb.f_min = f_min;
  fb.f_max = f_max;
  fb.n_mels = n_mels;
  fb.weights = Matrix(n_mels, bins);
  for (int m = 0; m < n_mels; ++m) {
    const double lo = edges[m], center = edges[m + 1], hi = edges[m + 2];
    double row_sum = 0.0;
    for (int k = 0; k < bins; ++k) {
      const double f = k * bin_hz;
      double wgt = 0.0;
      if (f > lo && f < center) {
        wgt = (f - lo) / (center - lo);
      } else if (f >= center && f < hi) {
        wgt = (hi - f) / (hi - center);
      }
      fb.weights.at(m, k) = wgt;
      row_sum += wgt;
    }
    if (row_sum <= 0.0) {
      throw std::invalid_argument("mel: band " + std::to_string(m) +
                                  " covers no FFT bin; reduce n_mels or widen the range");
    }
  }
  return fb;
}

Matrix log_mel(const Waveform& x, const StftConfig& cfg, const MelFilterbank& fb,
               double floor) {
  if (floor <= 0.0) throw std::invalid_argument("log_mel: floor must be > 0");
  const ComplexSpectrogram spec = stft(x, cfg);
  if (fb.weights.cols != spec.n_bins) {
    throw std::invalid_argument("log_mel: filterbank built for a different window size");
  }
  Matrix out(fb.n_mels, spec.n_frames);
  for (int64_t t = 0; t < spec.n_frames; ++t) {
    for (int m = 0; m < fb.n_mels; ++m) {
      double acc = 0.0;
      for (int64_t k = 0; k < spec.n_bins; ++k) {
        acc += fb.weights.at(m, k) * std::norm(spec.at(k, t));
      }
      out.at(m, t) = std::log(std::max(acc, floor));
    }
  }
  return out;
}

namespace {
struct RiffHeader {
  uint32_t chunk_size;
  uint16_t format;
  uint16_t channels;
  uint32_t sample_rate;
  uint16_t bits;
};

uint32_t read_u32(const unsigned char* p) {
  return p[0] | (p[1] << 8) | (p[2] << 16) | (uint32_t(p[3]) << 24);
}
uint16_t read_u16(const unsigned char* p) { return p[0] | (p[1] << 8); }
}  // namespace

Waveform read_wav(const std::string& path) {
  FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("read_wav: cannot open " + path);
  std::vector<unsigned char> bytes;
  unsigned char tmp[4096];
  size_t got;
  while ((got = std::fread(tmp, 1, sizeof(tmp), f)) > 0) bytes.insert(bytes.end(), tmp, tmp + got);
  std::fclose(f);

  if (bytes.size() < 44 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw std::runtime_error("read_wav: not a RIFF/WAVE file: " + path);
  }
  size_t pos = 12;
  RiffHeader hdr{};
  bool have_fmt = false;
  Waveform w;
  while (pos + 8 <= bytes.size()) {
    const std::string id(reinterpret_cast<char*>(bytes.data() + pos), 4);
    const uint32_t sz = read_u32(bytes.data() + pos + 4);
    pos += 8;
    if (pos + sz > bytes.size()) throw std::runtime_error("read_wav: truncated chunk in " + path);
    if (id == "fmt ") {
      hdr.format = read_u16(bytes.data() + pos);
      hdr.channels = read_u16(bytes.data() + pos + 2);
      hdr.sample_rate = read_u32(bytes.data() + pos + 4);
      hdr.bits = read_u16(bytes.data() + pos + 14);
      have_fmt = true;
    } else if (id == "data") {
      if (!have_fmt) throw std::runtime_error("read_wav: data before fmt in " + path);
      if (hdr.format != 1 || hdr.bits != 16) {
        throw std::runtime_error("read_wav: only 16-bit PCM supported: " + path);
      }
      if (hdr.channels != 1) {
        throw std::runtime_error("read_wav: multi-channel files rejected (" +
                                 std::to_string(hdr.channels) + " channels): " + path);
      }
      const size_t n = sz / 2;
      w.samples.resize(n);
      for (size_t i = 0; i < n; ++i) {
        const int16_t s = static_cast<int16_t>(read_u16(bytes.data() + pos + 2 * i));
        w.samples[i] = static_cast<float>(s) / 32768.0f;
      }
      w.sample_rate = static_cast<int>(hdr.sample_rate);
      return w;
    }
    pos += sz + (sz & 1);
  }
  throw std::runtime_error("read_wav: no data chunk in " + path);
}

void write_wav(const std::string& path, const Waveform& w) {
  if (w.sample_rate <= 0) throw std::invalid_argument("write_wav: invalid sample rate");
  FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("write_wav: cannot open " + path);
  const uint32_t n = static_cast<uint32_t>(w.samples.size());
  const uint32_t data_size = n * 2;
  const uint32_t sr = static_cast<uint32_t>(w.sample_rate);
  unsigned char hdr[44];
  std::memcpy(hdr, "RIFF", 4);
  const uint32_t riff_size = 36 + data_size;
  hdr[4] = riff_size & 0xff; hdr[5] = (riff_size >> 8) & 0xff;
  hdr[6] = (riff_size >> 16) & 0xff; hdr[7] = (riff_size >> 24) & 0xff;
  std::memcpy(hdr + 8, "WAVEfmt ", 8);
  const uint32_t fmt_size = 16;
  hdr[16] = fmt_size; hdr[17] = hdr[18] = hdr[19] = 0;
  hdr[20] = 1; hdr[21] = 0;  // PCM
  hdr[22] = 1; hdr[23] = 0;  // mono
  hdr[24] = sr & 0xff; hdr[25] = (sr >> 8) & 0xff;
  hdr[26] = (sr >> 16) & 0xff; hdr[27] = (sr >> 24) & 0xff;
  const uint32_t byte_rate = sr * 2;
  hdr[28] = byte_rate & 0xff; hdr[29] = (byte_rate >> 8) & 0xff;
  hdr[30] = (byte_rate >> 16) & 0xff; hdr[31] = (byte_rate >> 24) & 0xff;
  hdr[32] = 2; hdr[33] = 0;   // block align
  hdr[34] = 16; hdr[35] = 0;  // bits
  std::memcpy(hdr + 36, "data", 4);
  hdr[40] = data_size & 0xff; hdr[41] = (data_size >> 8) & 0xff;
  hdr[42] = (data_size >> 16) & 0xff; hdr[43] = (data_size >> 24) & 0xff;
  std::fwrite(hdr, 1, 44, f);
  std::vector<unsigned char> pcm(static_cast<size_t>(n) * 2);
  for (uint32_t i = 0; i < n; ++i) {
    const float v = std::clamp(w.samples[i], -1.0f, 1.0f);
    const long q = std::lrintf(v * 32768.0f);
    const int16_t s = static_cast<int16_t>(std::clamp(q, -32768L, 32767L));
    pcm[2 * i] = static_cast<unsigned char>(s & 0xff);
    pcm[2 * i + 1] = static_cast<unsigned char>((s >> 8) & 0xff);
  }
  std::fwrite(pcm.data(), 1, pcm.size(), f);
  std::fclose(f);
}

}  // namespace dualse
