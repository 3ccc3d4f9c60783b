#pragma once

// Differentiable primitives. Spatial operations take [C,H,W] or batched
// [B,C,H,W] tensors. Reductions accumulate in double regardless of T.

#include <cstddef>
#include <span>
#include <vector>

#include "fsaa/tensor.hpp"

namespace fsaa {

/// 3x3 convolution, stride 1, zero padding 1. kernel [C_out,C_in,3,3], bias [C_out].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias);

/// 2x2 max pooling with stride 2; a trailing odd row or column is dropped.
/// The gradient goes to the first maximal element in row-major order.
template <typename T>
Tensor<T> maxpool2(const Tensor<T>& input);

template <typename T>
struct BatchNormState {
  Tensor<T> scale;  // trainable, [C]
  Tensor<T> shift;  // trainable, [C]
  std::vector<T> running_mean;
  std::vector<T> running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels);
  std::size_t channels() const { return running_mean.size(); }
  BatchNormState clone() const;
};

/// Per-channel normalization of [B,C,H,W]. Training mode normalizes with
/// batch statistics and updates the running estimates (unbiased variance);
/// evaluation mode uses the running estimates.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, BatchNormState<T>& state, bool training);

/// Evaluation mode; never touches the running statistics.
template <typename T>
Tensor<T> batchnorm(const Tensor<T>& input, const BatchNormState<T>& state);

template <typename T>
Tensor<T> relu(const Tensor<T>& input);

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& input);

/// input [B,D_in], weight [D_out,D_in], bias [D_out] -> [B,D_out].
template <typename T>
Tensor<T> linear(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias);

/// [...,C,H,W] -> [...,C], mean over H*W.
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

/// [...,C,H,W] -> [...,C*sum(l*l)]. Level l splits rows into cells
/// [floor(i*H/l), floor((i+1)*H/l)) (columns likewise) and max-pools each
/// cell. Output is level-major, then channel, then cells in row-major order.
template <typename T>
Tensor<T> spatial_pyramid_pool(const Tensor<T>& input, std::span<const std::size_t> levels);

/// out[b,c,h,w] = feature[b,c,h,w] * weights[b,c]; also [C,H,W] with [C].
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& feature, const Tensor<T>& weights);

/// out[b,c,h,w] = feature[b,c,h,w] * map[b,0,h,w]; also [C,H,W] with [1,H,W].
template <typename T>
Tensor<T> broadcast_mul(const Tensor<T>& feature, const Tensor<T>& map);

/// Mean over rows of -log softmax(logits)[target]. logits [B,K].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const std::size_t> targets);

/// Rows of `input` along axis 0, in the order given (repeats allowed).
template <typename T>
Tensor<T> index_select(const Tensor<T>& input, std::span<const std::size_t> rows);

/// Mean of the listed rows (axis 0) for each group -> [groups.size(), ...].
template <typename T>
Tensor<T> group_mean(const Tensor<T>& input, const std::vector<std::vector<std::size_t>>& groups);

/// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> parts);

/// Concatenates along the channel axis: [B,Ca,H,W] + [B,Cb,H,W] (or unbatched).
template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> reshape(const Tensor<T>& input, Shape shape);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& input, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& input);

template <typename T>
Tensor<T> mean(const Tensor<T>& input);

template <typename T>
bool all_finite(const Tensor<T>& input);

}  // namespace fsaa
