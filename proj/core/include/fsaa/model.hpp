#pragma once

// Adaptive-attention few-shot network.
//
//   F    feature extractor: four conv3x3 -> batchnorm -> relu blocks, the first
//        three followed by 2x2 max pooling (28 -> 3x3, 84 -> 10x10 features).
//   A_R  meta-weight generator: SPP -> linear 200 -> linear 200 -> linear C.
//   A_S  spatial attention generator: conv3x3 (C) + relu -> conv3x3 (1).
//   C    classifier: SPP -> linear 200 -> linear 200 -> linear 1.
//
// The attention map for a support/query pair is A_S(f_q * A_R(f_s)) with a
// channel-wise product ("reweight"), or A_S'(concat(f_s, f_q)) in the
// concatenation ablation. The pair score is symmetric:
//   d(f_s, f_q) = C(f_q . sigmoid(A(f_s, f_q))) + C(f_s . sigmoid(A(f_q, f_s))).

#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "fsaa/ops.hpp"
#include "fsaa/tensor.hpp"

namespace fsaa {

enum class CombineMode : std::uint32_t { reweight = 0, concatenate = 1 };
enum class MapActivation : std::uint32_t { sigmoid = 0 };

std::string to_string(CombineMode mode);
CombineMode parse_combine_mode(const std::string& text);

struct ModelConfig {
  std::size_t input_channels = 1;
  std::size_t input_size = 28;
  std::size_t feature_channels = 64;
  std::vector<std::size_t> spp_levels{1, 2, 3};
  CombineMode combine_mode = CombineMode::reweight;
  bool classifier_enabled = true;
  MapActivation map_activation = MapActivation::sigmoid;

  static constexpr std::size_t kHiddenUnits = 200;

  /// Spatial side of the extracted features (three floor-halvings).
  std::size_t feature_size() const { return input_size / 8; }
  std::size_t spp_width() const;
  /// Throws ConfigError when the features cannot hold the largest SPP level.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

template <typename T>
struct ConvLayer {
  Tensor<T> weight;  // [C_out,C_in,3,3]
  Tensor<T> bias;    // [C_out]
};

template <typename T>
struct ConvBlock {
  ConvLayer<T> conv;
  BatchNormState<T> bn;
  bool pool = true;
};

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // [D_out,D_in]
  Tensor<T> bias;    // [D_out]
};

template <typename T>
struct ModelParams {
  std::vector<ConvBlock<T>> extractor;
  std::vector<LinearLayer<T>> meta_weight_gen;
  ConvLayer<T> attention_conv1;
  ConvLayer<T> attention_conv2;
  std::vector<LinearLayer<T>> classifier;

  /// Kaiming fan-in normal weights, zero biases, unit BN scale.
  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  /// Trainable tensors with stable names. The handles alias the parameters.
  std::vector<std::pair<std::string, Tensor<T>>> trainable() const;
  /// BN running statistics as named (non-trainable) tensors, by copy.
  std::vector<std::pair<std::string, Tensor<T>>> buffers() const;
  /// Writes running statistics back from tensors named as in buffers().
  void set_buffer(const std::string& name, std::span<const T> values);

  ModelParams clone() const;

  template <typename U>
  ModelParams<U> cast() const;
};

/// Single-channel pre-activation attention map(s): [1,H,W] or [P,1,H,W].
template <typename T>
struct AttentionMap {
  Tensor<T> values;
};

template <typename T>
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed);
  Model(ModelConfig config, ModelParams<T> params);

  const ModelConfig& config() const { return config_; }
  const ModelParams<T>& params() const { return params_; }
  ModelParams<T>& params() { return params_; }

  Model clone() const { return Model(config_, params_.clone()); }

  /// Images [B,C_in,S,S] -> features [B,C,S/8,S/8], batchnorm on running statistics.
  Tensor<T> extract_features(const Tensor<T>& images) const;
  /// As extract_features, but normalizing with batch statistics and updating
  /// the running estimates.
  Tensor<T> extract_features_training(const Tensor<T>& images);

  /// A_R: [C,H,W] -> [C], or [N,C,H,W] -> [N,C]. Raw linear output.
  Tensor<T> meta_weights(const Tensor<T>& features) const;

  /// What a support contributes to an attention map: its meta weights in
  /// reweight mode, the feature itself in concatenate mode. Batched [N,...].
  Tensor<T> conditioning(const Tensor<T>& features) const;

  /// Batched attention maps [P,1,H,W] for aligned rows of conditioning and
  /// target features [P,C,H,W].
  Tensor<T> attention_maps(const Tensor<T>& conditioning, const Tensor<T>& target) const;

  /// A(f_s, f_q) for one pair of [C,H,W] features.
  AttentionMap<T> adaptive_attention_map(const Tensor<T>& support, const Tensor<T>& query) const;

  /// f_q . sigmoid(map), for [C,H,W] with [1,H,W] or batched.
  Tensor<T> refine(const Tensor<T>& features, const AttentionMap<T>& map) const;

  /// C applied to refined features: [P,C,H,W] -> [P].
  Tensor<T> classify(const Tensor<T>& refined) const;

  /// d for P aligned pairs -> [P]. cond_* are conditioning rows for each
  /// side (the support side may be replaced, e.g. by augmented averages).
  Tensor<T> pair_scores(const Tensor<T>& support, const Tensor<T>& support_cond, const Tensor<T>& query,
                        const Tensor<T>& query_cond) const;

  /// d(f_s, f_q) for one pair of [C,H,W] features -> scalar.
  Tensor<T> pair_score(const Tensor<T>& support, const Tensor<T>& query) const;

  /// a_i = mean(A_S(f_q * w_i)) for each class weight -> [K].
  Tensor<T> attention_logits(const std::vector<Tensor<T>>& class_weights, const Tensor<T>& query) const;

 private:
  ModelConfig config_;
  ModelParams<T> params_;
};

extern template struct ModelParams<float>;
extern template struct ModelParams<double>;
extern template class Model<float>;
extern template class Model<double>;

}  // namespace fsaa
