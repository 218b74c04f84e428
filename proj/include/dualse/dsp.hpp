#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

namespace dualse {

// Mono audio signal. Samples are nominally in [-1, 1] but are not clipped.
struct Waveform {
  std::vector<float> samples;
  int sample_rate = 0;

  int64_t length() const { return static_cast<int64_t>(samples.size()); }
  double duration_sec() const {
    return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
  }
};

enum class WindowKind { Hann, Rect };

struct StftConfig {
  int window_size = 512;
  int hop = 128;
  WindowKind window = WindowKind::Hann;
  bool center_pad = true;

  int bins() const { return window_size / 2 + 1; }
};

// Frame count rule, identical for every STFT path in the project:
//   center_pad: the signal is reflect-padded by window_size/2 on both sides,
//               frames = 1 + floor((T + 2*(window_size/2) - window_size) / hop)
//   otherwise:  frames = 1 + floor((T - window_size) / hop), requires T >= window_size.
int64_t stft_frame_count(int64_t num_samples, const StftConfig& cfg);

// One-sided complex spectrogram, bins x frames, row-major.
struct ComplexSpectrogram {
  std::vector<std::complex<double>> bins;  // [n_bins * n_frames]
  int64_t n_bins = 0;
  int64_t n_frames = 0;
  StftConfig config;
  int sample_rate = 0;

  std::complex<double>& at(int64_t k, int64_t t) { return bins[k * n_frames + t]; }
  const std::complex<double>& at(int64_t k, int64_t t) const { return bins[k * n_frames + t]; }
};

// Real matrix helper used for log-mel outputs and filterbank weights.
struct Matrix {
  std::vector<double> data;  // row-major [rows * cols]
  int64_t rows = 0;
  int64_t cols = 0;

  Matrix() = default;
  Matrix(int64_t r, int64_t c) : data(static_cast<size_t>(r * c), 0.0), rows(r), cols(c) {}
  double& at(int64_t r, int64_t c) { return data[r * cols + c]; }
  double at(int64_t r, int64_t c) const { return data[r * cols + c]; }
};

// Triangular mel filterbank: weights are [n_mels x n_bins], every row unimodal.
struct MelFilterbank {
  Matrix weights;
  double f_min = 0.0;
  double f_max = 0.0;
  int n_mels = 0;
};

std::vector<double> make_window(WindowKind kind, int size);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

// Short-time Fourier transform of x under cfg. Throws std::invalid_argument on
// non-finite samples or when the signal is too short for a single frame.
ComplexSpectrogram stft(const Waveform& x, const StftConfig& cfg);

// Builds a filterbank with centers equally spaced on the mel scale in
// (f_min, f_max). Throws if any band would cover no FFT bin, naming the band.
MelFilterbank build_mel_filterbank(int sample_rate, int window_size, int n_mels,
                                   double f_min, double f_max);

// log(max(fb * |stft(x)|^2, floor)) elementwise, [n_mels x n_frames].
Matrix log_mel(const Waveform& x, const StftConfig& cfg, const MelFilterbank& fb,
               double floor);

// In-place complex FFT, length must be a power of two. sign=-1 forward, +1 inverse
// direction (no 1/N normalization applied).
void fft_inplace(std::complex<double>* data, int64_t n, int sign);

// WAV I/O: mono 16-bit PCM little-endian only. The reader rejects anything else.
Waveform read_wav(const std::string& path);
void write_wav(const std::string& path, const Waveform& w);

}  // namespace dualse
