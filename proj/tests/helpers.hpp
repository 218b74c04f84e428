#pragma once

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "dualse/rng.hpp"
#include "dualse/tensor.hpp"

namespace dualse::testing {

inline ag::TensorD random_tensor(ag::Shape shape, RandomStream& rs, double scale = 1.0,
                                 bool requires_grad = true) {
  ag::TensorD t = ag::TensorD::zeros(shape, requires_grad);
  for (auto& v : t.data()) v = scale * rs.normal();
  return t;
}

inline ag::TensorF random_tensor_f(ag::Shape shape, RandomStream& rs, double scale = 1.0,
                                   bool requires_grad = true) {
  ag::TensorF t = ag::TensorF::zeros(shape, requires_grad);
  for (auto& v : t.data()) v = static_cast<float>(scale * rs.normal());
  return t;
}

// Central finite-difference check of d(f)/d(x) against the autograd gradient.
// f must rebuild the graph from x's current values on every call. Returns the
// max relative error over `coords` randomly chosen coordinates.
inline double grad_check(const std::function<ag::TensorD(const ag::TensorD&)>& f,
                         ag::TensorD x, int coords, RandomStream& rs, double eps = 1e-5) {
  x.zero_grad();
  ag::TensorD y = f(x);
  y.backward();
  std::vector<double> analytic = x.grad();

  double worst = 0.0;
  const int64_t n = x.numel();
  for (int c = 0; c < coords; ++c) {
    const int64_t i = rs.randint(0, n);
    const double keep = x.data()[i];
    x.data()[i] = keep + eps;
    const double yp = f(x).item();
    x.data()[i] = keep - eps;
    const double ym = f(x).item();
    x.data()[i] = keep;
    const double fd = (yp - ym) / (2.0 * eps);
    const double denom = std::max({1e-8, std::abs(fd), std::abs(analytic[i])});
    worst = std::max(worst, std::abs(fd - analytic[i]) / denom);
  }
  return worst;
}

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("dualse_test_" + tag + "_" + std::to_string(::getpid()));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  std::string str() const { return path.string(); }
};

}  // namespace dualse::testing
