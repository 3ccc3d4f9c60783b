#include "fsaa/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <stdexcept>

#include "fsaa/ops.hpp"

namespace fsaa {

double relative_error(std::span<const double> analytic, std::span<const double> numeric) {
  double err = 0.0;
  double scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    err = std::max(err, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  if (scale == 0.0) return err;
  return err / scale;
}

ProbeGradients probe_gradients(const std::function<Tensor<double>()>& loss, std::span<const GradProbe> probes,
                               double step) {
  for (const GradProbe& p : probes) {
    Tensor<double> t = p.tensor;
    t.mutable_grad();
    t.zero_grad();
  }
  backward(loss());
  ProbeGradients out;
  for (const GradProbe& p : probes) out.analytic.push_back(p.tensor.grad()[p.index]);

  NoGradGuard no_grad;
  for (const GradProbe& p : probes) {
    Tensor<double> t = p.tensor;
    double& x = t.mutable_data()[p.index];
    const double saved = x;
    x = saved + step;
    const double up = loss().item();
    x = saved - step;
    const double down = loss().item();
    x = saved;
    out.numeric.push_back((up - down) / (2.0 * step));
  }
  return out;
}

double check_gradients(const std::function<Tensor<double>()>& loss, std::span<const Tensor<double>> inputs,
                       double step) {
  double worst = 0.0;
  for (const Tensor<double>& input : inputs) {
    std::vector<GradProbe> probes;
    for (std::size_t i = 0; i < input.numel(); ++i) probes.push_back({input, i});
    const ProbeGradients g = probe_gradients(loss, probes, step);
    worst = std::max(worst, relative_error(g.analytic, g.numeric));
  }
  return worst;
}

namespace {

using Rng = std::mt19937_64;
using T64 = Tensor<double>;

T64 random_tensor(Shape shape, Rng& rng, bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return T64(std::move(shape), std::move(v), requires_grad);
}

// Shuffled, evenly spaced values: no ties and no near-ties for max selection.
T64 distinct_tensor(Shape shape, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.05 * static_cast<double>(i) - 0.025 * v.size();
  std::shuffle(v.begin(), v.end(), rng);
  return T64(std::move(shape), std::move(v), true);
}

// Values bounded away from the relu kink.
T64 kink_free_tensor(Shape shape, Rng& rng) {
  T64 t = random_tensor(std::move(shape), rng);
  for (double& x : t.mutable_data()) x = (x >= 0 ? 0.1 : -0.1) + x;
  return t;
}

// sum(out * weights), built from linear so no extra primitive is needed.
T64 weighted_sum(const T64& out, const T64& weights) {
  const T64 row = reshape(out, {1, out.numel()});
  const T64 w = reshape(weights, {1, weights.numel()});
  return sum(linear(row, w, T64({1})));
}

struct Instance {
  std::function<T64()> loss;
  std::vector<T64> inputs;
};

using Factory = std::function<Instance(Rng&)>;

// Wraps an op producing a tensor into a scalar loss with fixed random weights.
template <typename F>
Instance projected(F f, std::vector<T64> inputs, Rng& rng) {
  NoGradGuard no_grad;
  const T64 probe_out = f();
  T64 weights = random_tensor(probe_out.shape(), rng, false);
  return Instance{[f, weights] { return weighted_sum(f(), weights); }, std::move(inputs)};
}

const std::map<std::string, Factory, std::less<>>& registry() {
  static const std::map<std::string, Factory, std::less<>> ops = {
      {"conv2d",
       [](Rng& rng) {
         T64 x = random_tensor({2, 3, 5, 5}, rng);
         T64 k = random_tensor({4, 3, 3, 3}, rng);
         T64 b = random_tensor({4}, rng);
         return projected([=] { return conv2d(x, k, b); }, {x, k, b}, rng);
       }},
      {"maxpool2",
       [](Rng& rng) {
         T64 x = distinct_tensor({2, 3, 5, 4}, rng);
         return projected([=] { return maxpool2(x); }, {x}, rng);
       }},
      {"batchnorm",
       [](Rng& rng) {
         T64 x = random_tensor({3, 2, 3, 3}, rng);
         auto state = std::make_shared<BatchNormState<double>>(2);
         state->scale = random_tensor({2}, rng);
         state->shift = random_tensor({2}, rng);
         return projected([=] { return batchnorm(x, *state, true); }, {x, state->scale, state->shift}, rng);
       }},
      {"batchnorm_eval",
       [](Rng& rng) {
         T64 x = random_tensor({2, 2, 3, 3}, rng);
         auto state = std::make_shared<BatchNormState<double>>(2);
         state->scale = random_tensor({2}, rng);
         state->shift = random_tensor({2}, rng);
         state->running_mean = {0.3, -0.2};
         state->running_var = {1.5, 0.7};
         return projected([=] { return batchnorm(x, *state, false); }, {x, state->scale, state->shift}, rng);
       }},
      {"relu",
       [](Rng& rng) {
         T64 x = kink_free_tensor({3, 7}, rng);
         return projected([=] { return relu(x); }, {x}, rng);
       }},
      {"sigmoid",
       [](Rng& rng) {
         T64 x = random_tensor({3, 7}, rng);
         return projected([=] { return sigmoid(x); }, {x}, rng);
       }},
      {"linear",
       [](Rng& rng) {
         T64 x = random_tensor({3, 5}, rng);
         T64 w = random_tensor({4, 5}, rng);
         T64 b = random_tensor({4}, rng);
         return projected([=] { return linear(x, w, b); }, {x, w, b}, rng);
       }},
      {"global_avg_pool",
       [](Rng& rng) {
         T64 x = random_tensor({2, 3, 4, 4}, rng);
         return projected([=] { return global_avg_pool(x); }, {x}, rng);
       }},
      {"spatial_pyramid_pool",
       [](Rng& rng) {
         T64 x = distinct_tensor({2, 3, 5, 6}, rng);
         return projected(
             [=] {
               const std::size_t levels[] = {1, 2, 3};
               return spatial_pyramid_pool(x, levels);
             },
             {x}, rng);
       }},
      {"channel_scale",
       [](Rng& rng) {
         T64 f = random_tensor({2, 3, 4, 4}, rng);
         T64 w = random_tensor({2, 3}, rng);
         return projected([=] { return channel_scale(f, w); }, {f, w}, rng);
       }},
      {"broadcast_mul",
       [](Rng& rng) {
         T64 f = random_tensor({2, 3, 4, 4}, rng);
         T64 m = random_tensor({2, 1, 4, 4}, rng);
         return projected([=] { return broadcast_mul(f, m); }, {f, m}, rng);
       }},
      {"softmax_cross_entropy",
       [](Rng& rng) {
         T64 z = random_tensor({4, 5}, rng);
         std::uniform_int_distribution<std::size_t> pick(0, 4);
         std::vector<std::size_t> targets(4);
         for (auto& t : targets) t = pick(rng);
         return Instance{[=] { return softmax_cross_entropy(z, targets); }, {z}};
       }},
      {"index_select",
       [](Rng& rng) {
         T64 x = random_tensor({4, 2, 3}, rng);
         const std::vector<std::size_t> rows = {3, 0, 3, 1};
         return projected([=] { return index_select(x, rows); }, {x}, rng);
       }},
      {"group_mean",
       [](Rng& rng) {
         T64 x = random_tensor({5, 3}, rng);
         const std::vector<std::vector<std::size_t>> groups = {{0, 1}, {2}, {1, 3, 4}};
         return projected([=] { return group_mean(x, groups); }, {x}, rng);
       }},
      {"stack",
       [](Rng& rng) {
         std::vector<T64> parts = {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)};
         return projected([=] { return stack(std::span<const T64>(parts)); }, parts, rng);
       }},
      {"concat_channels",
       [](Rng& rng) {
         T64 a = random_tensor({2, 2, 3, 3}, rng);
         T64 b = random_tensor({2, 3, 3, 3}, rng);
         return projected([=] { return concat_channels(a, b); }, {a, b}, rng);
       }},
      {"reshape",
       [](Rng& rng) {
         T64 x = random_tensor({2, 6}, rng);
         return projected([=] { return reshape(x, {3, 4}); }, {x}, rng);
       }},
      {"add",
       [](Rng& rng) {
         T64 a = random_tensor({3, 4}, rng);
         T64 b = random_tensor({3, 4}, rng);
         return projected([=] { return add(a, b); }, {a, b}, rng);
       }},
      {"scale",
       [](Rng& rng) {
         T64 x = random_tensor({3, 4}, rng);
         return projected([=] { return scale(x, 2.5); }, {x}, rng);
       }},
      {"sum",
       [](Rng& rng) {
         T64 x = random_tensor({3, 4}, rng);
         return projected([=] { return sum(x); }, {x}, rng);
       }},
      {"mean",
       [](Rng& rng) {
         T64 x = random_tensor({3, 4}, rng);
         return projected([=] { return mean(x); }, {x}, rng);
       }},
  };
  return ops;
}

}  // namespace

std::vector<std::string> differentiable_ops() {
  std::vector<std::string> names;
  for (const auto& [name, factory] : registry()) names.push_back(name);
  return names;
}

GradCheckResult check_op(std::string_view name, const GradCheckOptions& options) {
  const auto it = registry().find(name);
  if (it == registry().end()) throw std::invalid_argument("unknown differentiable op: " + std::string(name));
  // Per-op stream so results do not depend on which other ops were checked.
  std::uint32_t name_hash = 2166136261u;
  for (char c : name) name_hash = (name_hash ^ static_cast<unsigned char>(c)) * 16777619u;
  std::seed_seq seq{static_cast<std::uint32_t>(options.seed), static_cast<std::uint32_t>(options.seed >> 32), name_hash};
  Rng rng(seq);
  GradCheckResult result{std::string(name), 0.0, 0, false};
  for (int i = 0; i < options.instances; ++i) {
    Instance inst = it->second(rng);
    result.worst_relative_error =
        std::max(result.worst_relative_error, check_gradients(inst.loss, inst.inputs, options.step));
    ++result.instances;
  }
  result.passed = result.worst_relative_error < options.tolerance;
  return result;
}

}  // namespace fsaa
