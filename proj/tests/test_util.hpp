#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "fsaa/tensor.hpp"

namespace fsaa::testing {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = false, double scale = 1.0) {
  std::normal_distribution<double> dist(0.0, scale);
  std::vector<T> v(shape_numel(shape));
  for (T& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v), requires_grad);
}

template <typename T>
double max_abs_diff(std::span<const T> a, std::span<const double> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  return m;
}

// Loop oracles, written for readability over speed.

inline std::vector<double> naive_conv2d(const std::vector<double>& x, std::size_t b, std::size_t ci, std::size_t h,
                                        std::size_t w, const std::vector<double>& k, std::size_t co,
                                        const std::vector<double>& bias) {
  std::vector<double> out(b * co * h * w, 0.0);
  for (std::size_t n = 0; n < b; ++n)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx) {
          double acc = bias[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ky = 0; ky < 3; ++ky)
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const long sy = static_cast<long>(y + ky) - 1;
                const long sx = static_cast<long>(xx + kx) - 1;
                if (sy < 0 || sx < 0 || sy >= static_cast<long>(h) || sx >= static_cast<long>(w)) continue;
                acc += x[((n * ci + c) * h + sy) * w + sx] * k[((o * ci + c) * 3 + ky) * 3 + kx];
              }
          out[((n * co + o) * h + y) * w + xx] = acc;
        }
  return out;
}

inline std::vector<double> naive_spp(const std::vector<double>& x, std::size_t c, std::size_t h, std::size_t w,
                                     const std::vector<std::size_t>& levels) {
  std::vector<double> out;
  for (std::size_t l : levels)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t i = 0; i < l; ++i)
        for (std::size_t j = 0; j < l; ++j) {
          double best = -1e300;
          for (std::size_t y = i * h / l; y < (i + 1) * h / l; ++y)
            for (std::size_t xx = j * w / l; xx < (j + 1) * w / l; ++xx) best = std::max(best, x[(ch * h + y) * w + xx]);
          out.push_back(best);
        }
  return out;
}

}  // namespace fsaa::testing
