#pragma once

// Central finite-difference checks of reverse-mode gradients, in double.
//
// Relative error of an analytic gradient a against a numeric estimate n is
// max_i |a_i - n_i| / max(max_i |a_i|, max_i |n_i|), i.e. the error measured
// against the gradient's own scale.

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fsaa/tensor.hpp"

namespace fsaa {

struct GradCheckOptions {
  std::uint64_t seed = 0;
  double step = 1e-3;
  double tolerance = 1e-4;
  int instances = 5;
};

struct GradCheckResult {
  std::string op;
  double worst_relative_error = 0.0;
  int instances = 0;
  bool passed = false;
};

double relative_error(std::span<const double> analytic, std::span<const double> numeric);

/// One scalar entry of a tensor to probe.
struct GradProbe {
  Tensor<double> tensor;
  std::size_t index = 0;
};

struct ProbeGradients {
  std::vector<double> analytic;
  std::vector<double> numeric;
};

/// Runs `loss` once with gradients to read d(loss)/d(probe), then estimates
/// each probe by central differences with the given step. Grad buffers of the
/// probed tensors are zeroed first and left holding the analytic gradient.
ProbeGradients probe_gradients(const std::function<Tensor<double>()>& loss, std::span<const GradProbe> probes,
                               double step);

/// Worst relative error over all elements of every tensor in `inputs`.
double check_gradients(const std::function<Tensor<double>()>& loss, std::span<const Tensor<double>> inputs,
                       double step);

/// Names of every differentiable operation with a registered check.
std::vector<std::string> differentiable_ops();

/// Throws std::invalid_argument for an unknown op name.
GradCheckResult check_op(std::string_view name, const GradCheckOptions& options);

}  // namespace fsaa
