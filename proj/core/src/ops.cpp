#include "fsaa/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

#include "fsaa/errors.hpp"

namespace fsaa {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

struct SpatialDims {
  std::size_t batch = 1;
  std::size_t channels = 0;
  std::size_t height = 0;
  std::size_t width = 0;
  bool batched = false;
  std::size_t plane() const { return height * width; }
};

template <typename T>
SpatialDims spatial_dims(const Tensor<T>& t, const char* op) {
  const Shape& s = t.shape();
  if (s.size() == 3) return {1, s[0], s[1], s[2], false};
  if (s.size() == 4) return {s[0], s[1], s[2], s[3], true};
  throw DimensionError(std::string(op) + ": expected [C,H,W] or [B,C,H,W], got " + shape_str(s));
}

Shape spatial_shape(const SpatialDims& d, std::size_t channels, std::size_t h, std::size_t w) {
  if (d.batched) return {d.batch, channels, h, w};
  return {channels, h, w};
}

template <typename T>
void require_shape(const Tensor<T>& t, const Shape& expected, const char* op, const char* what) {
  if (t.shape() != expected)
    throw DimensionError(std::string(op) + ": " + what + " must be " + shape_str(expected) + ", got " +
                         shape_str(t.shape()));
}

template <typename T>
using Buffer = std::shared_ptr<std::vector<T>>;

// Double-precision reductions with independent partial sums, so the loops
// vectorize without the compiler having to reassociate.
constexpr std::size_t kLanes = 8;

double combine(const double (&acc)[kLanes]) {
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

template <typename T>
double sum_d(const T* p, std::size_t n) {
  double acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += static_cast<double>(p[i + j]);
  double tail = 0.0;
  for (; i < n; ++i) tail += static_cast<double>(p[i]);
  return combine(acc) + tail;
}

template <typename T>
double dot_d(const T* a, const T* b, std::size_t n) {
  double acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) acc[j] += static_cast<double>(a[i + j]) * static_cast<double>(b[i + j]);
  double tail = 0.0;
  for (; i < n; ++i) tail += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return combine(acc) + tail;
}

template <typename T>
double sq_dev_d(const T* p, std::size_t n, double mu) {
  double acc[kLanes] = {};
  std::size_t i = 0;
  for (; i + kLanes <= n; i += kLanes)
    for (std::size_t j = 0; j < kLanes; ++j) {
      const double dv = static_cast<double>(p[i + j]) - mu;
      acc[j] += dv * dv;
    }
  double tail = 0.0;
  for (; i < n; ++i) tail += (static_cast<double>(p[i]) - mu) * (static_cast<double>(p[i]) - mu);
  return combine(acc) + tail;
}

template <typename T>
Buffer<T> make_buffer(std::size_t n) {
  return std::make_shared<std::vector<T>>(n);
}

// col[(ci*9 + ky*3 + kx), b*H*W + y*W + x] = in[b, ci, y+ky-1, x+kx-1] (zero outside).
// For each kernel tap the valid x range is contiguous, so rows copy in runs.
template <typename T>
void im2col(const T* in, const SpatialDims& d, T* col) {
  const std::size_t hw = d.plane();
  const std::size_t n = d.batch * hw;
  const auto H = static_cast<std::ptrdiff_t>(d.height);
  const auto W = static_cast<std::ptrdiff_t>(d.width);
  for (std::size_t ci = 0; ci < d.channels; ++ci)
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky)
      for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
        T* row = col + ((ci * 3 + static_cast<std::size_t>(ky)) * 3 + static_cast<std::size_t>(kx)) * n;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, 1 - kx);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(W, W + 1 - kx);
        for (std::size_t b = 0; b < d.batch; ++b) {
          const T* plane = in + (b * d.channels + ci) * hw;
          T* dst = row + b * hw;
          for (std::ptrdiff_t y = 0; y < H; ++y) {
            T* out = dst + y * W;
            const std::ptrdiff_t sy = y + ky - 1;
            if (sy < 0 || sy >= H) {
              std::fill(out, out + W, T(0));
              continue;
            }
            std::fill(out, out + x_lo, T(0));
            const T* src = plane + sy * W + (kx - 1);
            std::copy(src + x_lo, src + x_hi, out + x_lo);
            std::fill(out + x_hi, out + W, T(0));
          }
        }
      }
}

template <typename T>
void col2im_add(const T* col, const SpatialDims& d, T* in_grad) {
  const std::size_t hw = d.plane();
  const std::size_t n = d.batch * hw;
  const auto H = static_cast<std::ptrdiff_t>(d.height);
  const auto W = static_cast<std::ptrdiff_t>(d.width);
  for (std::size_t ci = 0; ci < d.channels; ++ci)
    for (std::ptrdiff_t ky = 0; ky < 3; ++ky)
      for (std::ptrdiff_t kx = 0; kx < 3; ++kx) {
        const T* row = col + ((ci * 3 + static_cast<std::size_t>(ky)) * 3 + static_cast<std::size_t>(kx)) * n;
        const std::ptrdiff_t x_lo = std::max<std::ptrdiff_t>(0, 1 - kx);
        const std::ptrdiff_t x_hi = std::min<std::ptrdiff_t>(W, W + 1 - kx);
        for (std::size_t b = 0; b < d.batch; ++b) {
          T* plane = in_grad + (b * d.channels + ci) * hw;
          const T* src_plane = row + b * hw;
          for (std::ptrdiff_t y = 0; y < H; ++y) {
            const std::ptrdiff_t sy = y + ky - 1;
            if (sy < 0 || sy >= H) continue;
            const T* src = src_plane + y * W;
            T* dst = plane + sy * W + (kx - 1);
            for (std::ptrdiff_t x = x_lo; x < x_hi; ++x) dst[x] += src[x];
          }
        }
      }
}

}  // namespace

// ---------------------------------------------------------------------------
// conv2d

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias) {
  const SpatialDims d = spatial_dims(input, "conv2d");
  if (kernel.rank() != 4 || kernel.dim(2) != 3 || kernel.dim(3) != 3)
    throw DimensionError("conv2d: kernel must be [C_out,C_in,3,3], got " + shape_str(kernel.shape()));
  if (kernel.dim(1) != d.channels)
    throw DimensionError("conv2d: input has " + std::to_string(d.channels) + " channels, kernel expects " +
                         std::to_string(kernel.dim(1)));
  const std::size_t c_out = kernel.dim(0);
  require_shape(bias, Shape{c_out}, "conv2d", "bias");

  const std::size_t hw = d.plane();
  const std::size_t n = d.batch * hw;
  const std::size_t k = d.channels * 9;

  auto col = make_buffer<T>(k * n);
  im2col(input.data().data(), d, col->data());
  std::vector<T> tmp(c_out * n);
  MatMap<T>(tmp.data(), c_out, n).noalias() =
      ConstMatMap<T>(kernel.data().data(), c_out, k) * ConstMatMap<T>(col->data(), k, n);

  Tensor<T> out(spatial_shape(d, c_out, d.height, d.width));
  auto o = out.mutable_data();
  const auto bv = bias.data();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t co = 0; co < c_out; ++co) {
      const T* src = tmp.data() + co * n + b * hw;
      T* dst = o.data() + (b * c_out + co) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] = src[i] + bv[co];
    }

  if (detail::should_record<T>({&input, &kernel, &bias})) {
    detail::attach<T>(out, "conv2d", {&input, &kernel, &bias},
                      [input, kernel, bias, col, d, c_out, hw, n, k](std::span<const T> g) {
                        std::vector<T> dtmp(c_out * n);
                        for (std::size_t b = 0; b < d.batch; ++b)
                          for (std::size_t co = 0; co < c_out; ++co)
                            std::copy_n(g.data() + (b * c_out + co) * hw, hw, dtmp.data() + co * n + b * hw);
                        if (auto gk = detail::grad_sink(kernel); !gk.empty())
                          MatMap<T>(gk.data(), c_out, k).noalias() +=
                              ConstMatMap<T>(dtmp.data(), c_out, n) * ConstMatMap<T>(col->data(), k, n).transpose();
                        if (auto gb = detail::grad_sink(bias); !gb.empty())
                          for (std::size_t co = 0; co < c_out; ++co) {
                            gb[co] += static_cast<T>(sum_d(dtmp.data() + co * n, n));
                          }
                        if (auto gi = detail::grad_sink(input); !gi.empty()) {
                          std::vector<T> dcol(k * n);
                          MatMap<T>(dcol.data(), k, n).noalias() =
                              ConstMatMap<T>(kernel.data().data(), c_out, k).transpose() *
                              ConstMatMap<T>(dtmp.data(), c_out, n);
                          col2im_add(dcol.data(), d, gi.data());
                        }
                      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// maxpool2

template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input) {
  const SpatialDims d = spatial_dims(input, "maxpool2");
  if (d.height < 2 || d.width < 2)
    throw DimensionError("maxpool2: spatial dims must be >= 2, got " + shape_str(input.shape()));
  const std::size_t oh = d.height / 2;
  const std::size_t ow = d.width / 2;
  Tensor<T> out(spatial_shape(d, d.channels, oh, ow));
  auto o = out.mutable_data();
  auto argmax = std::make_shared<std::vector<std::size_t>>(o.size());
  const auto x = input.data();
  const std::size_t planes = d.batch * d.channels;
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t base = p * d.plane();
    for (std::size_t y = 0; y < oh; ++y)
      for (std::size_t xo = 0; xo < ow; ++xo) {
        std::size_t best = base + (2 * y) * d.width + 2 * xo;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = base + (2 * y + dy) * d.width + 2 * xo + dx;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t oi = (p * oh + y) * ow + xo;
        o[oi] = x[best];
        (*argmax)[oi] = best;
      }
  }
  if (detail::should_record<T>({&input})) {
    detail::attach<T>(out, "maxpool2", {&input}, [input, argmax](std::span<const T> g) {
      auto gi = detail::grad_sink(input);
      for (std::size_t i = 0; i < g.size(); ++i) gi[(*argmax)[i]] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// batchnorm

template <typename T>
BatchNormState<T>::BatchNormState(std::size_t channels)
    : scale(Tensor<T>::full({channels}, T(1))),
      shift(Tensor<T>({channels})),
      running_mean(channels, T(0)),
      running_var(channels, T(1)) {
  scale.set_requires_grad(true);
  shift.set_requires_grad(true);
}

template <typename T>
BatchNormState<T> BatchNormState<T>::clone() const {
  BatchNormState copy;
  copy.scale = scale.clone();
  copy.shift = shift.clone();
  copy.running_mean = running_mean;
  copy.running_var = running_var;
  copy.momentum = momentum;
  copy.epsilon = epsilon;
  return copy;
}

namespace {

template <typename T>
Tensor<T> batchnorm_impl(const Tensor<T>& input, const BatchNormState<T>& state, bool training,
                         BatchNormState<T>* running) {
  if (input.rank() != 4) throw DimensionError("batchnorm: expected [B,C,H,W], got " + shape_str(input.shape()));
  const SpatialDims d = spatial_dims(input, "batchnorm");
  const std::size_t c_count = d.channels;
  if (state.channels() != c_count)
    throw DimensionError("batchnorm: state has " + std::to_string(state.channels()) + " channels, input has " +
                         std::to_string(c_count));
  const std::size_t hw = d.plane();
  const std::size_t count = d.batch * hw;
  if (training && count < 2)
    throw DimensionError("batchnorm: degenerate batch, need B*H*W >= 2 in training mode, got " +
                         std::to_string(count));

  const auto x = input.data();
  auto xhat = make_buffer<T>(x.size());
  auto inv_std = make_buffer<double>(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    double mu;
    double var;
    if (training) {
      double acc = 0.0;
      for (std::size_t b = 0; b < d.batch; ++b) acc += sum_d(x.data() + (b * c_count + c) * hw, hw);
      mu = acc / static_cast<double>(count);
      double sq = 0.0;
      for (std::size_t b = 0; b < d.batch; ++b) sq += sq_dev_d(x.data() + (b * c_count + c) * hw, hw, mu);
      var = sq / static_cast<double>(count);
      const double unbiased = sq / static_cast<double>(count - 1);
      if (running) {
        const double m = running->momentum;
        running->running_mean[c] = static_cast<T>((1.0 - m) * running->running_mean[c] + m * mu);
        running->running_var[c] = static_cast<T>((1.0 - m) * running->running_var[c] + m * unbiased);
      }
    } else {
      mu = state.running_mean[c];
      var = state.running_var[c];
    }
    const double is = 1.0 / std::sqrt(var + static_cast<double>(state.epsilon));
    (*inv_std)[c] = is;
    for (std::size_t b = 0; b < d.batch; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c_count + c) * hw + i;
        (*xhat)[idx] = static_cast<T>((x[idx] - mu) * is);
      }
  }

  Tensor<T> out(input.shape());
  auto o = out.mutable_data();
  const auto gamma = state.scale.data();
  const auto beta = state.shift.data();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t c = 0; c < c_count; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * c_count + c) * hw + i;
        o[idx] = gamma[c] * (*xhat)[idx] + beta[c];
      }

  const Tensor<T> scale_t = state.scale;
  const Tensor<T> shift_t = state.shift;
  if (detail::should_record<T>({&input, &scale_t, &shift_t})) {
    detail::attach<T>(
        out, "batchnorm", {&input, &scale_t, &shift_t},
        [input, scale_t, shift_t, xhat, inv_std, d, hw, count, training](std::span<const T> g) {
          const std::size_t c_count = d.channels;
          auto gi = detail::grad_sink(input);
          auto gs = detail::grad_sink(scale_t);
          auto gt = detail::grad_sink(shift_t);
          const auto gamma = scale_t.data();
          for (std::size_t c = 0; c < c_count; ++c) {
            double sum_g = 0.0;
            double sum_gx = 0.0;
            for (std::size_t b = 0; b < d.batch; ++b) {
              const std::size_t base = (b * c_count + c) * hw;
              sum_g += sum_d(g.data() + base, hw);
              sum_gx += dot_d(g.data() + base, xhat->data() + base, hw);
            }
            if (!gs.empty()) gs[c] += static_cast<T>(sum_gx);
            if (!gt.empty()) gt[c] += static_cast<T>(sum_g);
            if (gi.empty()) continue;
            const double k = static_cast<double>(gamma[c]) * (*inv_std)[c];
            const double n = static_cast<double>(count);
            for (std::size_t b = 0; b < d.batch; ++b)
              for (std::size_t i = 0; i < hw; ++i) {
                const std::size_t idx = (b * c_count + c) * hw + i;
                if (training) {
                  gi[idx] += static_cast<T>(k * (g[idx] - sum_g / n - (*xhat)[idx] * sum_gx / n));
                } else {
                  gi[idx] += static_cast<T>(k * g[idx]);
                }
              }
          }
        });
  }
  return out;
}

}  // namespace

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, BatchNormState<T>& state, bool training) {
  return batchnorm_impl(input, state, training, training ? &state : static_cast<BatchNormState<T>*>(nullptr));
}

template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const BatchNormState<T>& state) {
  return batchnorm_impl(input, state, false, static_cast<BatchNormState<T>*>(nullptr));
}

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  auto o = out.mutable_data();
  const auto x = input.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = x[i] > T(0) ? x[i] : T(0);
  if (detail::should_record<T>({&input})) {
    detail::attach<T>(out, "relu", {&input}, [input](std::span<const T> g) {
      auto gi = detail::grad_sink(input);
      const auto x = input.data();
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += x[i] > T(0) ? g[i] : T(0);
    });
  }
  return out;
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input) {
  Tensor<T> out(input.shape());
  auto o = out.mutable_data();
  const auto x = input.data();
  for (std::size_t i = 0; i < x.size(); ++i) o[i] = T(1) / (T(1) + std::exp(-x[i]));
  if (detail::should_record<T>({&input})) {
    auto y = std::make_shared<std::vector<T>>(o.begin(), o.end());
    detail::attach<T>(out, "sigmoid", {&input}, [input, y](std::span<const T> g) {
      auto gi = detail::grad_sink(input);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * (*y)[i] * (T(1) - (*y)[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// linear

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (input.rank() != 2) throw DimensionError("linear: input must be [B,D_in], got " + shape_str(input.shape()));
  if (weight.rank() != 2) throw DimensionError("linear: weight must be [D_out,D_in], got " + shape_str(weight.shape()));
  const std::size_t batch = input.dim(0);
  const std::size_t d_in = input.dim(1);
  const std::size_t d_out = weight.dim(0);
  if (weight.dim(1) != d_in)
    throw DimensionError("linear: input width " + std::to_string(d_in) + " does not match weight " +
                         shape_str(weight.shape()));
  require_shape(bias, Shape{d_out}, "linear", "bias");

  Tensor<T> out({batch, d_out});
  auto o = MatMap<T>(out.mutable_data().data(), batch, d_out);
  o.noalias() = ConstMatMap<T>(input.data().data(), batch, d_in) *
                ConstMatMap<T>(weight.data().data(), d_out, d_in).transpose();
  o.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias.data().data(), d_out);

  if (detail::should_record<T>({&input, &weight, &bias})) {
    detail::attach<T>(out, "linear", {&input, &weight, &bias},
                      [input, weight, bias, batch, d_in, d_out](std::span<const T> g) {
                        ConstMatMap<T> gm(g.data(), batch, d_out);
                        if (auto gi = detail::grad_sink(input); !gi.empty())
                          MatMap<T>(gi.data(), batch, d_in).noalias() +=
                              gm * ConstMatMap<T>(weight.data().data(), d_out, d_in);
                        if (auto gw = detail::grad_sink(weight); !gw.empty())
                          MatMap<T>(gw.data(), d_out, d_in).noalias() +=
                              gm.transpose() * ConstMatMap<T>(input.data().data(), batch, d_in);
                        if (auto gb = detail::grad_sink(bias); !gb.empty())
                          for (std::size_t j = 0; j < d_out; ++j) {
                            double acc = 0.0;
                            for (std::size_t b = 0; b < batch; ++b) acc += g[b * d_out + j];
                            gb[j] += static_cast<T>(acc);
                          }
                      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling to vectors

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  const SpatialDims d = spatial_dims(input, "global_avg_pool");
  const std::size_t hw = d.plane();
  Shape shape = d.batched ? Shape{d.batch, d.channels} : Shape{d.channels};
  Tensor<T> out(shape);
  auto o = out.mutable_data();
  const auto x = input.data();
  for (std::size_t p = 0; p < d.batch * d.channels; ++p) {
    o[p] = static_cast<T>(sum_d(x.data() + p * hw, hw) / static_cast<double>(hw));
  }
  if (detail::should_record<T>({&input})) {
    detail::attach<T>(out, "global_avg_pool", {&input}, [input, hw](std::span<const T> g) {
      auto gi = detail::grad_sink(input);
      const T inv = T(1) / static_cast<T>(hw);
      for (std::size_t p = 0; p < g.size(); ++p)
        for (std::size_t i = 0; i < hw; ++i) gi[p * hw + i] += g[p] * inv;
    });
  }
  return out;
}

template <typename T>
Tensor<T> spatial_pyramid_pool(const Tensor<T>& input, std::span<const std::size_t> levels) {
  const SpatialDims d = spatial_dims(input, "spatial_pyramid_pool");
  if (levels.empty()) throw DimensionError("spatial_pyramid_pool: no pyramid levels");
  std::size_t cells = 0;
  for (std::size_t l : levels) {
    if (l == 0 || l > d.height || l > d.width)
      throw DimensionError("spatial_pyramid_pool: level " + std::to_string(l) + " does not fit a " +
                           std::to_string(d.height) + "x" + std::to_string(d.width) + " map");
    cells += l * l;
  }
  const std::size_t width = d.channels * cells;
  Tensor<T> out(d.batched ? Shape{d.batch, width} : Shape{width});
  auto o = out.mutable_data();
  auto argmax = std::make_shared<std::vector<std::size_t>>(o.size());
  const auto x = input.data();
  const std::size_t hw = d.plane();
  for (std::size_t b = 0; b < d.batch; ++b) {
    std::size_t oi = b * width;
    for (std::size_t l : levels)
      for (std::size_t c = 0; c < d.channels; ++c) {
        const std::size_t base = (b * d.channels + c) * hw;
        for (std::size_t i = 0; i < l; ++i) {
          const std::size_t r0 = i * d.height / l;
          const std::size_t r1 = (i + 1) * d.height / l;
          for (std::size_t j = 0; j < l; ++j) {
            const std::size_t c0 = j * d.width / l;
            const std::size_t c1 = (j + 1) * d.width / l;
            std::size_t best = base + r0 * d.width + c0;
            for (std::size_t r = r0; r < r1; ++r)
              for (std::size_t cc = c0; cc < c1; ++cc) {
                const std::size_t idx = base + r * d.width + cc;
                if (x[idx] > x[best]) best = idx;
              }
            o[oi] = x[best];
            (*argmax)[oi] = best;
            ++oi;
          }
        }
      }
  }
  if (detail::should_record<T>({&input})) {
    detail::attach<T>(out, "spatial_pyramid_pool", {&input}, [input, argmax](std::span<const T> g) {
      auto gi = detail::grad_sink(input);
      for (std::size_t i = 0; i < g.size(); ++i) gi[(*argmax)[i]] += g[i];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// feature modulation

template <typename T>
Tensor<T> channel_scale(const Tensor<T>& feature, const Tensor<T>& weights) {
  const SpatialDims d = spatial_dims(feature, "channel_scale");
  const Shape expected = d.batched ? Shape{d.batch, d.channels} : Shape{d.channels};
  require_shape(weights, expected, "channel_scale", "weights");
  const std::size_t hw = d.plane();
  Tensor<T> out(feature.shape());
  auto o = out.mutable_data();
  const auto f = feature.data();
  const auto w = weights.data();
  for (std::size_t p = 0; p < d.batch * d.channels; ++p)
    for (std::size_t i = 0; i < hw; ++i) o[p * hw + i] = f[p * hw + i] * w[p];
  if (detail::should_record<T>({&feature, &weights})) {
    detail::attach<T>(out, "channel_scale", {&feature, &weights}, [feature, weights, hw](std::span<const T> g) {
      auto gf = detail::grad_sink(feature);
      auto gw = detail::grad_sink(weights);
      const auto f = feature.data();
      const auto w = weights.data();
      for (std::size_t p = 0; p < w.size(); ++p) {
        if (!gf.empty())
          for (std::size_t i = 0; i < hw; ++i) gf[p * hw + i] += g[p * hw + i] * w[p];
        if (!gw.empty()) {
          gw[p] += static_cast<T>(dot_d(g.data() + p * hw, f.data() + p * hw, hw));
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> broadcast_mul(const Tensor<T>& feature, const Tensor<T>& map) {
  const SpatialDims d = spatial_dims(feature, "broadcast_mul");
  require_shape(map, spatial_shape(d, 1, d.height, d.width), "broadcast_mul", "map");
  const std::size_t hw = d.plane();
  Tensor<T> out(feature.shape());
  auto o = out.mutable_data();
  const auto f = feature.data();
  const auto m = map.data();
  for (std::size_t b = 0; b < d.batch; ++b)
    for (std::size_t c = 0; c < d.channels; ++c)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t idx = (b * d.channels + c) * hw + i;
        o[idx] = f[idx] * m[b * hw + i];
      }
  if (detail::should_record<T>({&feature, &map})) {
    detail::attach<T>(out, "broadcast_mul", {&feature, &map}, [feature, map, d, hw](std::span<const T> g) {
      auto gf = detail::grad_sink(feature);
      auto gm = detail::grad_sink(map);
      const auto f = feature.data();
      const auto m = map.data();
      for (std::size_t b = 0; b < d.batch; ++b) {
        if (!gf.empty())
          for (std::size_t c = 0; c < d.channels; ++c)
            for (std::size_t i = 0; i < hw; ++i) {
              const std::size_t idx = (b * d.channels + c) * hw + i;
              gf[idx] += g[idx] * m[b * hw + i];
            }
        if (!gm.empty())
          for (std::size_t i = 0; i < hw; ++i) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d.channels; ++c) {
              const std::size_t idx = (b * d.channels + c) * hw + i;
              acc += static_cast<double>(g[idx]) * f[idx];
            }
            gm[b * hw + i] += static_cast<T>(acc);
          }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// loss

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets) {
  if (logits.rank() != 2)
    throw DimensionError("softmax_cross_entropy: logits must be [B,K], got " + shape_str(logits.shape()));
  const std::size_t batch = logits.dim(0);
  const std::size_t k = logits.dim(1);
  if (targets.size() != batch)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(batch) + " rows");
  for (std::size_t t : targets)
    if (t >= k)
      throw IndexError("softmax_cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(k) +
                       ")");
  const auto z = logits.data();
  auto probs = make_buffer<double>(batch * k);
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const T* row = z.data() + b * k;
    const double mx = *std::max_element(row, row + k);
    double denom = 0.0;
    for (std::size_t i = 0; i < k; ++i) denom += std::exp(static_cast<double>(row[i]) - mx);
    for (std::size_t i = 0; i < k; ++i) (*probs)[b * k + i] = std::exp(static_cast<double>(row[i]) - mx) / denom;
    total += std::log(denom) + mx - static_cast<double>(row[targets[b]]);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(total / static_cast<double>(batch)));
  if (detail::should_record<T>({&logits})) {
    std::vector<std::size_t> tgt(targets.begin(), targets.end());
    detail::attach<T>(out, "softmax_cross_entropy", {&logits},
                      [logits, probs, tgt = std::move(tgt), batch, k](std::span<const T> g) {
                        auto gl = detail::grad_sink(logits);
                        const double s = static_cast<double>(g[0]) / static_cast<double>(batch);
                        for (std::size_t b = 0; b < batch; ++b)
                          for (std::size_t i = 0; i < k; ++i) {
                            const double onehot = (i == tgt[b]) ? 1.0 : 0.0;
                            gl[b * k + i] += static_cast<T>(s * ((*probs)[b * k + i] - onehot));
                          }
                      });
  }
  return out;
}

// ---------------------------------------------------------------------------
// structural helpers

template <typename T>
Tensor<T> index_select(const Tensor<T>& input, std::span<const std::size_t> rows) {
  if (input.rank() < 1) throw DimensionError("index_select: scalar input");
  if (rows.empty()) throw DimensionError("index_select: empty row list");
  const std::size_t n = input.dim(0);
  const std::size_t stride = input.numel() / n;
  for (std::size_t r : rows)
    if (r >= n) throw IndexError("index_select: row " + std::to_string(r) + " outside [0," + std::to_string(n) + ")");
  Shape shape = input.shape();
  shape[0] = rows.size();
  Tensor<T> out(shape);
  auto o = out.mutable_data();
  const auto x = input.data();
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(x.data() + rows[i] * stride, stride, o.data() + i * stride);
  if (detail::should_record<T>({&input})) {
    std::vector<std::size_t> idx(rows.begin(), rows.end());
    detail::attach<T>(out, "index_select", {&input}, [input, idx = std::move(idx), stride](std::span<const T> g) {
      auto gi = detail::grad_sink(input);
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t j = 0; j < stride; ++j) gi[idx[i] * stride + j] += g[i * stride + j];
    });
  }
  return out;
}

template <typename T>
Tensor<T> group_mean(const Tensor<T>& input, const std::vector<std::vector<std::size_t>>& groups) {
  if (input.rank() < 1) throw DimensionError("group_mean: scalar input");
  if (groups.empty()) throw DimensionError("group_mean: no groups");
  const std::size_t n = input.dim(0);
  const std::size_t stride = input.numel() / n;
  for (const auto& grp : groups) {
    if (grp.empty()) throw ContractError("group_mean: empty group");
    for (std::size_t r : grp)
      if (r >= n) throw IndexError("group_mean: row " + std::to_string(r) + " outside [0," + std::to_string(n) + ")");
  }
  Shape shape = input.shape();
  shape[0] = groups.size();
  Tensor<T> out(shape);
  auto o = out.mutable_data();
  const auto x = input.data();
  std::vector<double> acc(stride);
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (std::size_t r : groups[gi])
      for (std::size_t j = 0; j < stride; ++j) acc[j] += x[r * stride + j];
    const double inv = 1.0 / static_cast<double>(groups[gi].size());
    for (std::size_t j = 0; j < stride; ++j) o[gi * stride + j] = static_cast<T>(acc[j] * inv);
  }
  if (detail::should_record<T>({&input})) {
    detail::attach<T>(out, "group_mean", {&input}, [input, groups, stride](std::span<const T> g) {
      auto gin = detail::grad_sink(input);
      for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const T inv = T(1) / static_cast<T>(groups[gi].size());
        for (std::size_t r : groups[gi])
          for (std::size_t j = 0; j < stride; ++j) gin[r * stride + j] += g[gi * stride + j] * inv;
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("stack: no tensors");
  const Shape& row = parts.front().shape();
  const std::size_t stride = parts.front().numel();
  Shape shape = row;
  shape.insert(shape.begin(), parts.size());
  Tensor<T> out(shape);
  auto o = out.mutable_data();
  bool record = false;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].shape() != row)
      throw DimensionError("stack: shape " + shape_str(parts[i].shape()) + " differs from " + shape_str(row));
    std::copy_n(parts[i].data().data(), stride, o.data() + i * stride);
    record = record || detail::should_record<T>({&parts[i]});
  }
  if (record) {
    std::vector<Tensor<T>> inputs(parts.begin(), parts.end());
    auto node = std::make_shared<detail::Node<T>>();
    node->op = "stack";
    for (const Tensor<T>& t : inputs)
      if (t.requires_grad()) node->inputs.push_back(t.impl_ptr());
    node->backward = [inputs, stride](std::span<const T> g) {
      for (std::size_t i = 0; i < inputs.size(); ++i)
        if (auto gi = detail::grad_sink(inputs[i]); !gi.empty())
          for (std::size_t j = 0; j < stride; ++j) gi[j] += g[i * stride + j];
    };
    out.impl().requires_grad = true;
    out.impl().grad_fn = std::move(node);
  }
  return out;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  const SpatialDims da = spatial_dims(a, "concat_channels");
  const SpatialDims db = spatial_dims(b, "concat_channels");
  if (da.batched != db.batched || da.batch != db.batch || da.height != db.height || da.width != db.width)
    throw DimensionError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  const std::size_t hw = da.plane();
  const std::size_t c = da.channels + db.channels;
  Tensor<T> out(spatial_shape(da, c, da.height, da.width));
  auto o = out.mutable_data();
  const auto xa = a.data();
  const auto xb = b.data();
  for (std::size_t n = 0; n < da.batch; ++n) {
    std::copy_n(xa.data() + n * da.channels * hw, da.channels * hw, o.data() + n * c * hw);
    std::copy_n(xb.data() + n * db.channels * hw, db.channels * hw, o.data() + (n * c + da.channels) * hw);
  }
  if (detail::should_record<T>({&a, &b})) {
    detail::attach<T>(out, "concat_channels", {&a, &b}, [a, b, da, db, c, hw](std::span<const T> g) {
      auto ga = detail::grad_sink(a);
      auto gb = detail::grad_sink(b);
      for (std::size_t n = 0; n < da.batch; ++n) {
        if (!ga.empty())
          for (std::size_t j = 0; j < da.channels * hw; ++j) ga[n * da.channels * hw + j] += g[n * c * hw + j];
        if (!gb.empty())
          for (std::size_t j = 0; j < db.channels * hw; ++j)
            gb[n * db.channels * hw + j] += g[(n * c + da.channels) * hw + j];
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape) {
  if (shape_numel(shape) != input.numel())
    throw DimensionError("reshape: cannot view " + shape_str(input.shape()) + " as " + shape_str(shape));
  Tensor<T> out(std::move(shape), std::vector<T>(input.data().begin(), input.data().end()));
  if (detail::should_record<T>({&input})) {
    detail::attach<T>(out, "reshape", {&input}, [input](std::span<const T> g) {
      auto gi = detail::grad_sink(input);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw DimensionError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " differ");
  Tensor<T> out(a.shape());
  auto o = out.mutable_data();
  const auto xa = a.data();
  const auto xb = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = xa[i] + xb[i];
  if (detail::should_record<T>({&a, &b})) {
    detail::attach<T>(out, "add", {&a, &b}, [a, b](std::span<const T> g) {
      // a and b may alias; fetch each sink separately.
      if (auto ga = detail::grad_sink(a); !ga.empty())
        for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
      if (auto gb = detail::grad_sink(b); !gb.empty())
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor) {
  Tensor<T> out(input.shape());
  auto o = out.mutable_data();
  const auto x = input.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * factor;
  if (detail::should_record<T>({&input})) {
    detail::attach<T>(out, "scale", {&input}, [input, factor](std::span<const T> g) {
      auto gi = detail::grad_sink(input);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i] * factor;
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum(const Tensor<T>& input) {
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(sum_d(input.data().data(), input.numel())));
  if (detail::should_record<T>({&input})) {
    detail::attach<T>(out, "sum", {&input}, [input](std::span<const T> g) {
      auto gi = detail::grad_sink(input);
      for (T& v : gi) v += g[0];
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& input) {
  return scale(sum(input), T(1) / static_cast<T>(input.numel()));
}

template <typename T>
bool all_finite(const Tensor<T>& input) {
  for (T v : input.data())
    if (!std::isfinite(v)) return false;
  return true;
}

#define FSAA_INSTANTIATE_OPS(T)                                                                      \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> maxpool2(const Tensor<T>&);                                                     \
  template struct BatchNormState<T>;                                                                 \
  template Tensor<T> batchnorm(const Tensor<T>&, BatchNormState<T>&, bool);                          \
  template Tensor<T> batchnorm(const Tensor<T>&, const BatchNormState<T>&);                          \
  template Tensor<T> relu(const Tensor<T>&);                                                         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> global_avg_pool(const Tensor<T>&);                                              \
  template Tensor<T> spatial_pyramid_pool(const Tensor<T>&, std::span<const std::size_t>);           \
  template Tensor<T> channel_scale(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> broadcast_mul(const Tensor<T>&, const Tensor<T>&);                              \
  template Tensor<T> softmax_cross_entropy(const Tensor<T>&, std::span<const std::size_t>);          \
  template Tensor<T> index_select(const Tensor<T>&, std::span<const std::size_t>);                   \
  template Tensor<T> group_mean(const Tensor<T>&, const std::vector<std::vector<std::size_t>>&);     \
  template Tensor<T> stack(std::span<const Tensor<T>>);                                              \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> scale(const Tensor<T>&, T);                                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                          \
  template Tensor<T> mean(const Tensor<T>&);                                                         \
  template bool all_finite(const Tensor<T>&);

FSAA_INSTANTIATE_OPS(float)
FSAA_INSTANTIATE_OPS(double)

#undef FSAA_INSTANTIATE_OPS

}  // namespace fsaa
