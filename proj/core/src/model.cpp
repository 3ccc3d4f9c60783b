#include "fsaa/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <type_traits>

#include "fsaa/errors.hpp"

namespace fsaa {

std::string to_string(CombineMode mode) {
  return mode == CombineMode::reweight ? "reweight" : "concatenate";
}

CombineMode parse_combine_mode(const std::string& text) {
  if (text == "reweight") return CombineMode::reweight;
  if (text == "concatenate" || text == "concat") return CombineMode::concatenate;
  throw ConfigError("unknown combination mode '" + text + "' (expected reweight or concatenate)");
}

std::size_t ModelConfig::spp_width() const {
  std::size_t cells = 0;
  for (std::size_t l : spp_levels) cells += l * l;
  return feature_channels * cells;
}

void ModelConfig::validate() const {
  if (input_channels == 0) throw ConfigError("input_channels must be positive");
  if (feature_channels == 0) throw ConfigError("feature_channels must be positive");
  if (spp_levels.empty()) throw ConfigError("at least one SPP level is required");
  const std::size_t top = *std::max_element(spp_levels.begin(), spp_levels.end());
  if (std::find(spp_levels.begin(), spp_levels.end(), 0) != spp_levels.end())
    throw ConfigError("SPP levels must be positive");
  if (feature_size() < top)
    throw ConfigError("input size " + std::to_string(input_size) + " yields " + std::to_string(feature_size()) +
                      "x" + std::to_string(feature_size()) + " features, smaller than SPP level " +
                      std::to_string(top));
}

// ---------------------------------------------------------------------------
// parameters

namespace {

template <typename T>
Tensor<T> kaiming(Shape shape, std::size_t fan_in, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<T> values(shape_numel(shape));
  for (T& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values), true);
}

template <typename T>
ConvLayer<T> make_conv(std::size_t c_in, std::size_t c_out, std::mt19937_64& rng) {
  return {kaiming<T>({c_out, c_in, 3, 3}, c_in * 9, rng), Tensor<T>({c_out}, true)};
}

template <typename T>
LinearLayer<T> make_linear(std::size_t d_in, std::size_t d_out, std::mt19937_64& rng) {
  return {kaiming<T>({d_out, d_in}, d_in, rng), Tensor<T>({d_out}, true)};
}

template <typename T, typename U>
Tensor<U> cast_tensor(const Tensor<T>& t) {
  return t.template cast<U>();
}

}  // namespace

template <typename T>
ModelParams<T> ModelParams<T>::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  const std::size_t c = config.feature_channels;
  const std::size_t hidden = ModelConfig::kHiddenUnits;
  ModelParams p;
  for (std::size_t i = 0; i < 4; ++i) {
    ConvBlock<T> block;
    block.conv = make_conv<T>(i == 0 ? config.input_channels : c, c, rng);
    block.bn = BatchNormState<T>(c);
    block.pool = i < 3;
    p.extractor.push_back(std::move(block));
  }
  const std::size_t spp = config.spp_width();
  p.meta_weight_gen = {make_linear<T>(spp, hidden, rng), make_linear<T>(hidden, hidden, rng),
                       make_linear<T>(hidden, c, rng)};
  const std::size_t attn_in = config.combine_mode == CombineMode::concatenate ? 2 * c : c;
  p.attention_conv1 = make_conv<T>(attn_in, c, rng);
  p.attention_conv2 = make_conv<T>(c, 1, rng);
  p.classifier = {make_linear<T>(spp, hidden, rng), make_linear<T>(hidden, hidden, rng),
                  make_linear<T>(hidden, 1, rng)};
  return p;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelParams<T>::trainable() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (std::size_t i = 0; i < extractor.size(); ++i) {
    const std::string prefix = "extractor." + std::to_string(i);
    out.emplace_back(prefix + ".conv.weight", extractor[i].conv.weight);
    out.emplace_back(prefix + ".conv.bias", extractor[i].conv.bias);
    out.emplace_back(prefix + ".bn.scale", extractor[i].bn.scale);
    out.emplace_back(prefix + ".bn.shift", extractor[i].bn.shift);
  }
  for (std::size_t i = 0; i < meta_weight_gen.size(); ++i) {
    const std::string prefix = "meta_weight_gen." + std::to_string(i);
    out.emplace_back(prefix + ".weight", meta_weight_gen[i].weight);
    out.emplace_back(prefix + ".bias", meta_weight_gen[i].bias);
  }
  out.emplace_back("attention.conv1.weight", attention_conv1.weight);
  out.emplace_back("attention.conv1.bias", attention_conv1.bias);
  out.emplace_back("attention.conv2.weight", attention_conv2.weight);
  out.emplace_back("attention.conv2.bias", attention_conv2.bias);
  for (std::size_t i = 0; i < classifier.size(); ++i) {
    const std::string prefix = "classifier." + std::to_string(i);
    out.emplace_back(prefix + ".weight", classifier[i].weight);
    out.emplace_back(prefix + ".bias", classifier[i].bias);
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> ModelParams<T>::buffers() const {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (std::size_t i = 0; i < extractor.size(); ++i) {
    const std::string prefix = "extractor." + std::to_string(i) + ".bn.";
    const auto& bn = extractor[i].bn;
    out.emplace_back(prefix + "running_mean", Tensor<T>({bn.channels()}, bn.running_mean));
    out.emplace_back(prefix + "running_var", Tensor<T>({bn.channels()}, bn.running_var));
  }
  return out;
}

template <typename T>
void ModelParams<T>::set_buffer(const std::string& name, std::span<const T> values) {
  for (std::size_t i = 0; i < extractor.size(); ++i) {
    const std::string prefix = "extractor." + std::to_string(i) + ".bn.";
    auto& bn = extractor[i].bn;
    std::vector<T>* target = nullptr;
    if (name == prefix + "running_mean") target = &bn.running_mean;
    if (name == prefix + "running_var") target = &bn.running_var;
    if (!target) continue;
    if (values.size() != target->size())
      throw DimensionError("buffer " + name + " expects " + std::to_string(target->size()) + " values");
    target->assign(values.begin(), values.end());
    return;
  }
  throw IndexError("unknown buffer " + name);
}

template <typename T>
ModelParams<T> ModelParams<T>::clone() const {
  ModelParams p;
  for (const auto& b : extractor)
    p.extractor.push_back({{b.conv.weight.clone(), b.conv.bias.clone()}, b.bn.clone(), b.pool});
  for (const auto& l : meta_weight_gen) p.meta_weight_gen.push_back({l.weight.clone(), l.bias.clone()});
  p.attention_conv1 = {attention_conv1.weight.clone(), attention_conv1.bias.clone()};
  p.attention_conv2 = {attention_conv2.weight.clone(), attention_conv2.bias.clone()};
  for (const auto& l : classifier) p.classifier.push_back({l.weight.clone(), l.bias.clone()});
  return p;
}

template <typename T>
template <typename U>
ModelParams<U> ModelParams<T>::cast() const {
  ModelParams<U> p;
  for (const auto& b : extractor) {
    ConvBlock<U> block;
    block.conv = {cast_tensor<T, U>(b.conv.weight), cast_tensor<T, U>(b.conv.bias)};
    block.bn = BatchNormState<U>(b.bn.channels());
    block.bn.scale = cast_tensor<T, U>(b.bn.scale);
    block.bn.shift = cast_tensor<T, U>(b.bn.shift);
    block.bn.running_mean.assign(b.bn.running_mean.begin(), b.bn.running_mean.end());
    block.bn.running_var.assign(b.bn.running_var.begin(), b.bn.running_var.end());
    block.bn.momentum = static_cast<U>(b.bn.momentum);
    block.bn.epsilon = static_cast<U>(b.bn.epsilon);
    block.pool = b.pool;
    p.extractor.push_back(std::move(block));
  }
  for (const auto& l : meta_weight_gen)
    p.meta_weight_gen.push_back({cast_tensor<T, U>(l.weight), cast_tensor<T, U>(l.bias)});
  p.attention_conv1 = {cast_tensor<T, U>(attention_conv1.weight), cast_tensor<T, U>(attention_conv1.bias)};
  p.attention_conv2 = {cast_tensor<T, U>(attention_conv2.weight), cast_tensor<T, U>(attention_conv2.bias)};
  for (const auto& l : classifier) p.classifier.push_back({cast_tensor<T, U>(l.weight), cast_tensor<T, U>(l.bias)});
  return p;
}

// ---------------------------------------------------------------------------
// model

template <typename T>
Model<T>::Model(ModelConfig config, std::uint64_t seed)
    : config_(std::move(config)), params_(ModelParams<T>::init(config_, seed)) {}

template <typename T>
Model<T>::Model(ModelConfig config, ModelParams<T> params) : config_(std::move(config)), params_(std::move(params)) {
  config_.validate();
}

namespace {

template <typename T>
Tensor<T> mlp(const Tensor<T>& x, const std::vector<LinearLayer<T>>& layers) {
  Tensor<T> h = x;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    h = linear(h, layers[i].weight, layers[i].bias);
    if (i + 1 < layers.size()) h = relu(h);
  }
  return h;
}

template <typename T>
Tensor<T> unsqueeze0(const Tensor<T>& t) {
  Shape s = t.shape();
  s.insert(s.begin(), 1);
  return reshape(t, std::move(s));
}

template <typename T>
Tensor<T> squeeze0(const Tensor<T>& t) {
  Shape s = t.shape();
  s.erase(s.begin());
  return reshape(t, std::move(s));
}

}  // namespace

namespace {

// Params is ModelParams<T> (training) or const ModelParams<T> (inference).
template <typename T, typename Params>
Tensor<T> run_extractor(const ModelConfig& config, Params& params, const Tensor<T>& images) {
  constexpr bool training = !std::is_const_v<Params>;
  if (images.rank() != 4 || images.dim(1) != config.input_channels || images.dim(2) != config.input_size ||
      images.dim(3) != config.input_size)
    throw DimensionError("extract_features: expected [B," + std::to_string(config.input_channels) + "," +
                         std::to_string(config.input_size) + "," + std::to_string(config.input_size) + "], got " +
                         shape_str(images.shape()));
  Tensor<T> h = images;
  for (auto& block : params.extractor) {
    h = conv2d(h, block.conv.weight, block.conv.bias);
    if constexpr (training) {
      h = batchnorm(h, block.bn, true);
    } else {
      h = batchnorm(h, block.bn);
    }
    h = relu(h);
    if (block.pool) h = maxpool2(h);
  }
  return h;
}

}  // namespace

template <typename T>
Tensor<T> Model<T>::extract_features(const Tensor<T>& images) const {
  return run_extractor(config_, params_, images);
}

template <typename T>
Tensor<T> Model<T>::extract_features_training(const Tensor<T>& images) {
  return run_extractor(config_, params_, images);
}

template <typename T>
Tensor<T> Model<T>::meta_weights(const Tensor<T>& features) const {
  if (features.rank() == 3) return squeeze0(meta_weights(unsqueeze0(features)));
  return mlp(spatial_pyramid_pool(features, std::span<const std::size_t>(config_.spp_levels)),
             params_.meta_weight_gen);
}

template <typename T>
Tensor<T> Model<T>::conditioning(const Tensor<T>& features) const {
  if (config_.combine_mode == CombineMode::concatenate) return features;
  return meta_weights(features);
}

template <typename T>
Tensor<T> Model<T>::attention_maps(const Tensor<T>& conditioning, const Tensor<T>& target) const {
  const Tensor<T> combined = config_.combine_mode == CombineMode::reweight ? channel_scale(target, conditioning)
                                                                           : concat_channels(conditioning, target);
  const Tensor<T> hidden = relu(conv2d(combined, params_.attention_conv1.weight, params_.attention_conv1.bias));
  return conv2d(hidden, params_.attention_conv2.weight, params_.attention_conv2.bias);
}

template <typename T>
AttentionMap<T> Model<T>::adaptive_attention_map(const Tensor<T>& support, const Tensor<T>& query) const {
  if (support.shape() != query.shape())
    throw DimensionError("attention map: support " + shape_str(support.shape()) + " and query " +
                         shape_str(query.shape()) + " differ");
  const Tensor<T> cond = conditioning(unsqueeze0(support));
  return {squeeze0(attention_maps(cond, unsqueeze0(query)))};
}

template <typename T>
Tensor<T> Model<T>::refine(const Tensor<T>& features, const AttentionMap<T>& map) const {
  return broadcast_mul(features, sigmoid(map.values));
}

template <typename T>
Tensor<T> Model<T>::classify(const Tensor<T>& refined) const {
  if (!config_.classifier_enabled) throw ContractError("classifier component is disabled; use attention logits");
  const Tensor<T> scores =
      mlp(spatial_pyramid_pool(refined, std::span<const std::size_t>(config_.spp_levels)), params_.classifier);
  return reshape(scores, {scores.dim(0)});
}

template <typename T>
Tensor<T> Model<T>::pair_scores(const Tensor<T>& support, const Tensor<T>& support_cond, const Tensor<T>& query,
                                const Tensor<T>& query_cond) const {
  if (!config_.classifier_enabled) throw ContractError("pair score needs the classifier component");
  if (support.shape() != query.shape())
    throw DimensionError("pair score: support " + shape_str(support.shape()) + " and query " +
                         shape_str(query.shape()) + " differ");
  const Tensor<T> forward = classify(refine(query, {attention_maps(support_cond, query)}));
  const Tensor<T> reverse = classify(refine(support, {attention_maps(query_cond, support)}));
  return add(forward, reverse);
}

template <typename T>
Tensor<T> Model<T>::pair_score(const Tensor<T>& support, const Tensor<T>& query) const {
  const Tensor<T> s = unsqueeze0(support);
  const Tensor<T> q = unsqueeze0(query);
  return reshape(pair_scores(s, conditioning(s), q, conditioning(q)), Shape{});
}

template <typename T>
Tensor<T> Model<T>::attention_logits(const std::vector<Tensor<T>>& class_weights, const Tensor<T>& query) const {
  if (class_weights.size() < 2) throw ConfigError("attention logits need at least two classes");
  const std::size_t k = class_weights.size();
  const Tensor<T> cond = stack(std::span<const Tensor<T>>(class_weights));
  const std::vector<std::size_t> repeat(k, 0);
  const Tensor<T> queries = index_select(unsqueeze0(query), repeat);
  const Tensor<T> logits = global_avg_pool(attention_maps(cond, queries));
  return reshape(logits, {k});
}

template struct ModelParams<float>;
template struct ModelParams<double>;
template ModelParams<double> ModelParams<float>::cast<double>() const;
template ModelParams<float> ModelParams<double>::cast<float>() const;
template class Model<float>;
template class Model<double>;

}  // namespace fsaa
