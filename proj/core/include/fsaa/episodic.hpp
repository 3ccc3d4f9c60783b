#pragma once

// Episode sampling, the attention and classifier losses, episodic training,
// test-time augmentation, one-step fine-tuning and the evaluation protocol.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "fsaa/data.hpp"
#include "fsaa/model.hpp"
#include "fsaa/tensor.hpp"

namespace fsaa {

struct EpisodeSpec {
  std::size_t way = 5;
  std::size_t shot = 1;
  std::size_t query = 15;

  /// Throws ConfigError unless way >= 2 and shot, query >= 1.
  void validate() const;
  bool operator==(const EpisodeSpec&) const = default;
};

struct Sample {
  std::size_t dataset_class = 0;
  std::size_t image = 0;
  std::size_t label = 0;  // episode-local class index
  bool operator==(const Sample&) const = default;
};

/// Supports and queries are grouped by label, label 0 first.
struct Episode {
  EpisodeSpec spec;
  std::vector<Sample> support;
  std::vector<Sample> query;

  std::vector<std::size_t> support_labels() const;
  std::vector<std::size_t> query_labels() const;
};

/// Classes without replacement, then shot+query distinct images per class.
/// The order of the drawn classes is the label assignment. Throws
/// DatasetError when the dataset is too small for the requested way, shot and query.
Episode sample_episode(const Dataset& dataset, const EpisodeSpec& spec, std::mt19937_64& rng);

/// Which supports represent class k for query q. The standard plan uses every
/// support of class k; the leave-one-out plan (supports scored against each
/// other) drops the query itself from its own class when that class has
/// other members.
struct ScoringPlan {
  std::size_t way = 0;
  std::vector<std::vector<std::vector<std::size_t>>> members;  // [query][class] -> support rows

  static ScoringPlan standard(std::span<const std::size_t> support_labels, std::size_t way, std::size_t queries);
  static ScoringPlan leave_one_out(std::span<const std::size_t> support_labels, std::size_t way);
  std::size_t queries() const { return members.size(); }
};

template <typename T>
struct EpisodeScores {
  Tensor<T> attention_logits;  // [Q,K]
  Tensor<T> class_scores;      // [Q,K]; undefined when the classifier is disabled

  /// Class scores when available, otherwise the attention logits.
  const Tensor<T>& decision() const { return class_scores.defined() ? class_scores : attention_logits; }
};

/// Per-class averages of support conditioning (meta weights in reweight mode).
/// support_features [N,C,H,W] -> K tensors.
template <typename T>
std::vector<Tensor<T>> class_weight_average(const Model<T>& model, const Tensor<T>& support_features,
                                            std::span<const std::size_t> support_labels, std::size_t way);

/// Scores queries against supports. support_cond holds one conditioning row
/// per support, normally model.conditioning(support) or a TTA average.
template <typename T>
EpisodeScores<T> score_features(const Model<T>& model, const Tensor<T>& support, const Tensor<T>& support_cond,
                                const Tensor<T>& query, const ScoringPlan& plan);

template <typename T>
struct EpisodeBatch {
  Tensor<T> images;  // supports first, then queries
  std::size_t supports = 0;
  std::vector<std::size_t> support_labels;
  std::vector<std::size_t> query_labels;
};

template <typename T>
EpisodeBatch<T> episode_batch(const Dataset& dataset, const Episode& episode);

/// One extractor pass over supports and queries with running BN statistics.
template <typename T>
EpisodeScores<T> score_episode(const Model<T>& model, const Dataset& dataset, const Episode& episode);

/// As score_episode, with batch BN statistics and running-estimate updates.
template <typename T>
EpisodeScores<T> score_episode_training(Model<T>& model, const Dataset& dataset, const Episode& episode);

/// Mean softmax cross-entropy of the attention logits.
template <typename T>
Tensor<T> attention_loss(const EpisodeScores<T>& scores, std::span<const std::size_t> query_labels);

/// Mean softmax cross-entropy of the pair-score logits. ContractError when
/// the classifier is disabled.
template <typename T>
Tensor<T> classification_loss(const EpisodeScores<T>& scores, std::span<const std::size_t> query_labels);

/// L_CE + L_Att, or L_Att alone when the classifier is disabled.
template <typename T>
Tensor<T> total_loss(const EpisodeScores<T>& scores, std::span<const std::size_t> query_labels);

// --- training ---------------------------------------------------------------

template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
       double epsilon = 1e-8);

  void zero_grad();
  /// One bias-corrected update from the accumulated gradients.
  void step();
  std::size_t steps() const { return steps_; }
  double learning_rate() const { return lr_; }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  double lr_, beta1_, beta2_, epsilon_;
  std::size_t steps_ = 0;
};

struct TrainConfig {
  EpisodeSpec spec;
  std::size_t episodes = 2000;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t seed = 1;
  std::size_t tta_copies = 10;
  double finetune_lr = 1e-4;

  /// Throws ConfigError on a non-positive learning rate or bad spec.
  void validate() const;
};

struct StepLosses {
  double attention = 0.0;
  double classification = std::numeric_limits<double>::quiet_NaN();  // NaN when the classifier is off
  double total = 0.0;
};

/// Zeroes gradients, scores the episode in training mode, back-propagates the
/// total loss and applies one Adam update. Throws TrainingError on a
/// non-finite loss or parameter.
template <typename T>
StepLosses train_step(Model<T>& model, Adam<T>& optimizer, const Dataset& dataset, const Episode& episode);

using StepCallback = std::function<void(std::size_t episode, const StepLosses& losses)>;

/// Trains for config.episodes episodes drawn from mt19937_64(config.seed).
template <typename T>
void train(Model<T>& model, const Dataset& dataset, const TrainConfig& config, const StepCallback& on_step = {});

// --- test time ----------------------------------------------------------------

/// Character and synthetic data: crop only, no flip.
inline AugmentSpec default_tta_augment() { return AugmentSpec{0.875, false}; }

/// Per-support conditioning averaged over the original image and `copies`
/// augmented versions -> [N,...]. copies == 0 gives model.conditioning.
template <typename T>
Tensor<T> tta_conditioning(const Model<T>& model, const Dataset& dataset, const Episode& episode, std::size_t copies,
                           const AugmentSpec& augment, std::mt19937_64& rng);

/// Class averages of tta_conditioning.
template <typename T>
std::vector<Tensor<T>> tta_class_weights(const Model<T>& model, const Dataset& dataset, const Episode& episode,
                                         std::size_t copies, const AugmentSpec& augment, std::mt19937_64& rng);

/// A copy of the model after one SGD step on the total loss of the support
/// self-episode (leave-one-out within class when shot > 1). BN uses running
/// statistics. The input model is not modified.
template <typename T>
Model<T> finetune_one_step(const Model<T>& model, const Dataset& dataset, const Episode& episode,
                           double learning_rate);

struct EvalOptions {
  std::size_t tta_copies = 0;
  bool finetune = false;
  double finetune_lr = 1e-4;
  AugmentSpec augment = default_tta_augment();
  std::size_t threads = 1;
};

/// Predicted label per query: argmax of class scores (attention logits when
/// the classifier is disabled).
template <typename T>
std::vector<std::size_t> predict(const Model<T>& model, const Dataset& dataset, const Episode& episode,
                                 const EvalOptions& options, std::mt19937_64& rng);

struct EvalReport {
  std::vector<double> accuracies;
  double mean = 0.0;
  double ci95 = 0.0;  // 1.96 * sample std / sqrt(episodes)
  std::size_t episodes = 0;
  std::string config;
};

/// Mean and 95% half-width from per-episode accuracies.
EvalReport summarize(std::vector<double> accuracies);

/// Per-episode generator used by evaluation: a pure function of (seed, index).
std::mt19937_64 episode_rng(std::uint64_t seed, std::size_t index);

using Predictor = std::function<std::vector<std::size_t>(const Episode&, std::mt19937_64& rng)>;

/// Samples `episodes` episodes, each from episode_rng(seed, i), and scores
/// the predictor's labels. Episodes may run on several threads; results are
/// collected by episode index.
EvalReport evaluate_with(const Dataset& dataset, const EpisodeSpec& spec, std::size_t episodes, std::uint64_t seed,
                         const Predictor& predictor, std::size_t threads = 1);

template <typename T>
EvalReport evaluate(const Model<T>& model, const Dataset& dataset, const EpisodeSpec& spec, std::size_t episodes,
                    std::uint64_t seed, const EvalOptions& options = {});

}  // namespace fsaa
