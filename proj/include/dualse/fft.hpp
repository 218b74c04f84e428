#pragma once

#include <complex>
#include <cstdint>

namespace dualse {

// Iterative radix-2 Cooley-Tukey, in place. n must be a power of two.
// sign = -1: forward convention e^{-i 2 pi k n / N}; sign = +1: reverse
// direction, no 1/N normalization.
template <typename S>
void fft_radix2(std::complex<S>* a, int64_t n, int sign) {
  for (int64_t i = 1, j = 0; i < n; ++i) {
    int64_t bit = n >> 1;
    for (; j & bit; bit >>= 1) j ^= bit;
    j ^= bit;
    if (i < j) std::swap(a[i], a[j]);
  }
  constexpr double kTwoPi = 6.283185307179586476925286766559;
  for (int64_t len = 2; len <= n; len <<= 1) {
    const double ang = sign * kTwoPi / static_cast<double>(len);
    const std::complex<S> wlen(static_cast<S>(std::cos(ang)), static_cast<S>(std::sin(ang)));
    for (int64_t i = 0; i < n; i += len) {
      std::complex<S> w(S(1), S(0));
      for (int64_t j = 0; j < len / 2; ++j) {
        const std::complex<S> u = a[i + j];
        const std::complex<S> v = a[i + j + len / 2] * w;
        a[i + j] = u + v;
        a[i + j + len / 2] = u - v;
        w *= wlen;
      }
    }
  }
}

inline bool is_power_of_two(int64_t n) { return n > 0 && (n & (n - 1)) == 0; }

}  // namespace dualse
