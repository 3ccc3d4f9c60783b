#include "fsaa/episodic.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <optional>
#include <sstream>
#include <thread>

#include "fsaa/errors.hpp"
#include "fsaa/ops.hpp"

namespace fsaa {

void EpisodeSpec::validate() const {
  if (way < 2) throw ConfigError("way must be at least 2, got " + std::to_string(way));
  if (shot < 1) throw ConfigError("shot must be at least 1");
  if (query < 1) throw ConfigError("query must be at least 1");
}

std::vector<std::size_t> Episode::support_labels() const {
  std::vector<std::size_t> out;
  for (const Sample& s : support) out.push_back(s.label);
  return out;
}

std::vector<std::size_t> Episode::query_labels() const {
  std::vector<std::size_t> out;
  for (const Sample& s : query) out.push_back(s.label);
  return out;
}

Episode sample_episode(const Dataset& dataset, const EpisodeSpec& spec, std::mt19937_64& rng) {
  spec.validate();
  if (dataset.num_classes() < spec.way)
    throw DatasetError("episode needs " + std::to_string(spec.way) + " classes, dataset has " +
                       std::to_string(dataset.num_classes()));
  const std::size_t per_class = spec.shot + spec.query;
  std::vector<std::size_t> eligible;
  for (std::size_t c = 0; c < dataset.num_classes(); ++c)
    if (dataset.classes[c].images.size() >= per_class) eligible.push_back(c);
  if (eligible.size() < spec.way)
    throw DatasetError("only " + std::to_string(eligible.size()) + " classes hold " + std::to_string(per_class) +
                       " images, episode needs " + std::to_string(spec.way));

  // Partial Fisher-Yates: the first `way` entries are a uniform ordered draw.
  for (std::size_t i = 0; i < spec.way; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, eligible.size() - 1);
    std::swap(eligible[i], eligible[pick(rng)]);
  }

  Episode ep;
  ep.spec = spec;
  std::vector<std::vector<std::size_t>> drawn(spec.way);
  for (std::size_t k = 0; k < spec.way; ++k) {
    std::vector<std::size_t> images(dataset.classes[eligible[k]].images.size());
    std::iota(images.begin(), images.end(), 0);
    for (std::size_t i = 0; i < per_class; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, images.size() - 1);
      std::swap(images[i], images[pick(rng)]);
    }
    images.resize(per_class);
    drawn[k] = std::move(images);
  }
  for (std::size_t k = 0; k < spec.way; ++k)
    for (std::size_t i = 0; i < spec.shot; ++i) ep.support.push_back({eligible[k], drawn[k][i], k});
  for (std::size_t k = 0; k < spec.way; ++k)
    for (std::size_t i = spec.shot; i < per_class; ++i) ep.query.push_back({eligible[k], drawn[k][i], k});
  return ep;
}

// ---------------------------------------------------------------------------
// scoring

namespace {

std::vector<std::vector<std::size_t>> members_by_class(std::span<const std::size_t> labels, std::size_t way) {
  std::vector<std::vector<std::size_t>> members(way);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= way)
      throw IndexError("support label " + std::to_string(labels[i]) + " out of range for " + std::to_string(way) +
                       "-way episode");
    members[labels[i]].push_back(i);
  }
  for (std::size_t k = 0; k < way; ++k)
    if (members[k].empty()) throw ContractError("class " + std::to_string(k) + " has no supports");
  return members;
}

template <typename T>
Tensor<T> row(const Tensor<T>& t, std::size_t i) {
  const std::size_t idx[] = {i};
  Shape s = t.shape();
  s.erase(s.begin());
  return reshape(index_select(t, idx), std::move(s));
}

std::size_t argmax_row(std::span<const float> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::size_t argmax_row(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

ScoringPlan ScoringPlan::standard(std::span<const std::size_t> support_labels, std::size_t way,
                                  std::size_t queries) {
  ScoringPlan plan;
  plan.way = way;
  plan.members.assign(queries, members_by_class(support_labels, way));
  return plan;
}

ScoringPlan ScoringPlan::leave_one_out(std::span<const std::size_t> support_labels, std::size_t way) {
  const auto members = members_by_class(support_labels, way);
  ScoringPlan plan;
  plan.way = way;
  for (std::size_t q = 0; q < support_labels.size(); ++q) {
    auto own = members;
    auto& same = own[support_labels[q]];
    if (same.size() > 1) same.erase(std::find(same.begin(), same.end(), q));
    plan.members.push_back(std::move(own));
  }
  return plan;
}

template <typename T>
std::vector<Tensor<T>> class_weight_average(const Model<T>& model, const Tensor<T>& support_features,
                                            std::span<const std::size_t> support_labels, std::size_t way) {
  const Tensor<T> averaged = group_mean(model.conditioning(support_features), members_by_class(support_labels, way));
  std::vector<Tensor<T>> out;
  for (std::size_t k = 0; k < way; ++k) out.push_back(row(averaged, k));
  return out;
}

template <typename T>
EpisodeScores<T> score_features(const Model<T>& model, const Tensor<T>& support, const Tensor<T>& support_cond,
                                const Tensor<T>& query, const ScoringPlan& plan) {
  const std::size_t q_count = query.dim(0);
  const std::size_t way = plan.way;
  if (plan.queries() != q_count)
    throw DimensionError("scoring plan covers " + std::to_string(plan.queries()) + " queries, got " +
                         std::to_string(q_count));

  std::vector<std::vector<std::size_t>> class_groups;
  std::vector<std::size_t> query_rows;
  for (std::size_t q = 0; q < q_count; ++q)
    for (std::size_t k = 0; k < way; ++k) {
      class_groups.push_back(plan.members[q][k]);
      query_rows.push_back(q);
    }
  const Tensor<T> class_cond = group_mean(support_cond, class_groups);
  const Tensor<T> maps = model.attention_maps(class_cond, index_select(query, query_rows));
  EpisodeScores<T> out;
  out.attention_logits = reshape(global_avg_pool(maps), {q_count, way});
  if (!model.config().classifier_enabled) return out;

  std::vector<std::size_t> s_rows;
  std::vector<std::size_t> q_rows;
  std::vector<std::vector<std::size_t>> pair_groups;
  for (std::size_t q = 0; q < q_count; ++q)
    for (std::size_t k = 0; k < way; ++k) {
      std::vector<std::size_t> group;
      for (std::size_t s : plan.members[q][k]) {
        group.push_back(s_rows.size());
        s_rows.push_back(s);
        q_rows.push_back(q);
      }
      pair_groups.push_back(std::move(group));
    }
  const Tensor<T> query_cond = model.conditioning(query);
  const Tensor<T> scores = model.pair_scores(index_select(support, s_rows), index_select(support_cond, s_rows),
                                             index_select(query, q_rows), index_select(query_cond, q_rows));
  out.class_scores = reshape(group_mean(reshape(scores, {s_rows.size(), 1}), pair_groups), {q_count, way});
  return out;
}

template <typename T>
EpisodeBatch<T> episode_batch(const Dataset& dataset, const Episode& episode) {
  std::vector<const Image*> images;
  EpisodeBatch<T> batch;
  for (const Sample& s : episode.support) images.push_back(&dataset.classes.at(s.dataset_class).images.at(s.image));
  for (const Sample& s : episode.query) images.push_back(&dataset.classes.at(s.dataset_class).images.at(s.image));
  batch.images = images_to_tensor<T>(images);
  batch.supports = episode.support.size();
  batch.support_labels = episode.support_labels();
  batch.query_labels = episode.query_labels();
  return batch;
}

namespace {

template <typename T>
EpisodeScores<T> score_split(const Model<T>& model, const Tensor<T>& features, const EpisodeBatch<T>& batch) {
  std::vector<std::size_t> s_idx(batch.supports);
  std::vector<std::size_t> q_idx(batch.query_labels.size());
  std::iota(s_idx.begin(), s_idx.end(), 0);
  std::iota(q_idx.begin(), q_idx.end(), batch.supports);
  const Tensor<T> support = index_select(features, s_idx);
  const Tensor<T> query = index_select(features, q_idx);
  const std::size_t way = *std::max_element(batch.support_labels.begin(), batch.support_labels.end()) + 1;
  return score_features(model, support, model.conditioning(support), query,
                        ScoringPlan::standard(batch.support_labels, way, q_idx.size()));
}

}  // namespace

template <typename T>
EpisodeScores<T> score_episode(const Model<T>& model, const Dataset& dataset, const Episode& episode) {
  const EpisodeBatch<T> batch = episode_batch<T>(dataset, episode);
  return score_split(model, model.extract_features(batch.images), batch);
}

template <typename T>
EpisodeScores<T> score_episode_training(Model<T>& model, const Dataset& dataset, const Episode& episode) {
  const EpisodeBatch<T> batch = episode_batch<T>(dataset, episode);
  return score_split(model, model.extract_features_training(batch.images), batch);
}

template <typename T>
Tensor<T> attention_loss(const EpisodeScores<T>& scores, std::span<const std::size_t> query_labels) {
  return softmax_cross_entropy(scores.attention_logits, query_labels);
}

template <typename T>
Tensor<T> classification_loss(const EpisodeScores<T>& scores, std::span<const std::size_t> query_labels) {
  if (!scores.class_scores.defined()) throw ContractError("classification loss needs the classifier component");
  return softmax_cross_entropy(scores.class_scores, query_labels);
}

template <typename T>
Tensor<T> total_loss(const EpisodeScores<T>& scores, std::span<const std::size_t> query_labels) {
  const Tensor<T> att = attention_loss(scores, query_labels);
  if (!scores.class_scores.defined()) return att;
  return add(classification_loss(scores, query_labels), att);
}

// ---------------------------------------------------------------------------
// training

template <typename T>
Adam<T>::Adam(std::vector<Tensor<T>> params, double learning_rate, double beta1, double beta2, double epsilon)
    : params_(std::move(params)), lr_(learning_rate), beta1_(beta1), beta2_(beta2), epsilon_(epsilon) {
  if (!(learning_rate >= 0.0)) throw ConfigError("learning rate must be non-negative");
  for (const Tensor<T>& p : params_) {
    m_.emplace_back(p.numel(), 0.0);
    v_.emplace_back(p.numel(), 0.0);
  }
}

template <typename T>
void Adam<T>::zero_grad() {
  for (Tensor<T>& p : params_) p.zero_grad();
}

template <typename T>
void Adam<T>::step() {
  ++steps_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(steps_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!params_[i].has_grad()) continue;
    const std::span<const T> g = params_[i].grad();
    const std::span<T> w = params_[i].mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      const double step = lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + epsilon_);
      w[j] = static_cast<T>(static_cast<double>(w[j]) - step);
    }
  }
}

void TrainConfig::validate() const {
  spec.validate();
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning rate must be positive, got " + std::to_string(learning_rate));
  if (!(finetune_lr >= 0.0)) throw ConfigError("fine-tune learning rate must be non-negative");
}

namespace {

template <typename T>
std::vector<Tensor<T>> trainable_handles(const Model<T>& model) {
  std::vector<Tensor<T>> out;
  for (auto& [name, t] : model.params().trainable()) out.push_back(t);
  return out;
}

}  // namespace

template <typename T>
StepLosses train_step(Model<T>& model, Adam<T>& optimizer, const Dataset& dataset, const Episode& episode) {
  optimizer.zero_grad();
  const EpisodeScores<T> scores = score_episode_training(model, dataset, episode);
  const std::vector<std::size_t> labels = episode.query_labels();
  const Tensor<T> att = attention_loss(scores, labels);
  StepLosses out;
  out.attention = static_cast<double>(att.item());
  Tensor<T> total = att;
  if (scores.class_scores.defined()) {
    const Tensor<T> ce = classification_loss(scores, labels);
    out.classification = static_cast<double>(ce.item());
    total = add(ce, att);
  }
  out.total = static_cast<double>(total.item());
  if (!std::isfinite(out.total))
    throw TrainingError("non-finite loss (attention " + std::to_string(out.attention) + ", classification " +
                        std::to_string(out.classification) + ") after " + std::to_string(optimizer.steps()) +
                        " steps");
  backward(total);
  optimizer.step();
  for (const auto& [name, t] : model.params().trainable())
    if (!all_finite(t)) throw TrainingError("parameter " + name + " became non-finite");
  return out;
}

template <typename T>
void train(Model<T>& model, const Dataset& dataset, const TrainConfig& config, const StepCallback& on_step) {
  config.validate();
  Adam<T> optimizer(trainable_handles(model), config.learning_rate, config.beta1, config.beta2, config.epsilon);
  std::mt19937_64 rng(config.seed);
  for (std::size_t e = 0; e < config.episodes; ++e) {
    const Episode episode = sample_episode(dataset, config.spec, rng);
    const StepLosses losses = train_step(model, optimizer, dataset, episode);
    if (on_step) on_step(e, losses);
  }
}

// ---------------------------------------------------------------------------
// test time

template <typename T>
Tensor<T> tta_conditioning(const Model<T>& model, const Dataset& dataset, const Episode& episode, std::size_t copies,
                           const AugmentSpec& augment, std::mt19937_64& rng) {
  std::vector<Image> images;
  std::vector<std::vector<std::size_t>> groups(episode.support.size());
  for (std::size_t i = 0; i < episode.support.size(); ++i) {
    const Sample& s = episode.support[i];
    const Image& original = dataset.classes.at(s.dataset_class).images.at(s.image);
    groups[i].push_back(images.size());
    images.push_back(original);
    for (std::size_t c = 0; c < copies; ++c) {
      groups[i].push_back(images.size());
      images.push_back(random_crop_flip(original, augment, rng));
    }
  }
  std::vector<const Image*> ptrs;
  for (const Image& img : images) ptrs.push_back(&img);
  const Tensor<T> cond = model.conditioning(model.extract_features(images_to_tensor<T>(ptrs)));
  if (copies == 0) return cond;
  return group_mean(cond, groups);
}

template <typename T>
std::vector<Tensor<T>> tta_class_weights(const Model<T>& model, const Dataset& dataset, const Episode& episode,
                                         std::size_t copies, const AugmentSpec& augment, std::mt19937_64& rng) {
  const Tensor<T> cond = tta_conditioning(model, dataset, episode, copies, augment, rng);
  const Tensor<T> averaged = group_mean(cond, members_by_class(episode.support_labels(), episode.spec.way));
  std::vector<Tensor<T>> out;
  for (std::size_t k = 0; k < episode.spec.way; ++k) out.push_back(row(averaged, k));
  return out;
}

template <typename T>
Model<T> finetune_one_step(const Model<T>& model, const Dataset& dataset, const Episode& episode,
                           double learning_rate) {
  Model<T> adapted = model.clone();
  if (learning_rate == 0.0) return adapted;
  std::vector<const Image*> images;
  for (const Sample& s : episode.support) images.push_back(&dataset.classes.at(s.dataset_class).images.at(s.image));
  const std::vector<std::size_t> labels = episode.support_labels();

  const auto params = trainable_handles(adapted);
  for (Tensor<T> p : params) p.zero_grad();
  {
    const Tensor<T> features = adapted.extract_features(images_to_tensor<T>(images));
    const EpisodeScores<T> scores =
        score_features(adapted, features, adapted.conditioning(features), features,
                       ScoringPlan::leave_one_out(labels, episode.spec.way));
    backward(total_loss(scores, labels));
  }
  for (Tensor<T> p : params) {
    if (!p.has_grad()) continue;
    const std::span<const T> g = p.grad();
    const std::span<T> w = p.mutable_data();
    for (std::size_t j = 0; j < w.size(); ++j)
      w[j] = static_cast<T>(static_cast<double>(w[j]) - learning_rate * static_cast<double>(g[j]));
    p.zero_grad();
  }
  return adapted;
}

template <typename T>
std::vector<std::size_t> predict(const Model<T>& model, const Dataset& dataset, const Episode& episode,
                                 const EvalOptions& options, std::mt19937_64& rng) {
  std::optional<Model<T>> tuned;
  if (options.finetune) tuned.emplace(finetune_one_step(model, dataset, episode, options.finetune_lr));
  const Model<T>& adapted = tuned ? *tuned : model;
  NoGradGuard no_grad;
  const EpisodeBatch<T> batch = episode_batch<T>(dataset, episode);
  const Tensor<T> features = adapted.extract_features(batch.images);
  std::vector<std::size_t> s_idx(batch.supports);
  std::vector<std::size_t> q_idx(batch.query_labels.size());
  std::iota(s_idx.begin(), s_idx.end(), 0);
  std::iota(q_idx.begin(), q_idx.end(), batch.supports);
  const Tensor<T> support = index_select(features, s_idx);
  const Tensor<T> query = index_select(features, q_idx);
  const Tensor<T> support_cond =
      options.tta_copies > 0 ? tta_conditioning(adapted, dataset, episode, options.tta_copies, options.augment, rng)
                             : adapted.conditioning(support);
  const EpisodeScores<T> scores =
      score_features(adapted, support, support_cond, query,
                     ScoringPlan::standard(batch.support_labels, episode.spec.way, q_idx.size()));
  const Tensor<T>& decision = scores.decision();
  std::vector<std::size_t> out;
  for (std::size_t q = 0; q < q_idx.size(); ++q)
    out.push_back(argmax_row(decision.data().subspan(q * episode.spec.way, episode.spec.way)));
  return out;
}

EvalReport summarize(std::vector<double> accuracies) {
  EvalReport r;
  r.episodes = accuracies.size();
  if (accuracies.empty()) return r;
  double total = 0.0;
  for (double a : accuracies) total += a;
  r.mean = total / static_cast<double>(accuracies.size());
  if (accuracies.size() > 1) {
    double ss = 0.0;
    for (double a : accuracies) ss += (a - r.mean) * (a - r.mean);
    const double std_dev = std::sqrt(ss / static_cast<double>(accuracies.size() - 1));
    r.ci95 = 1.96 * std_dev / std::sqrt(static_cast<double>(accuracies.size()));
  }
  r.accuracies = std::move(accuracies);
  return r;
}

std::mt19937_64 episode_rng(std::uint64_t seed, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(index), static_cast<std::uint32_t>(static_cast<std::uint64_t>(index) >> 32)};
  return std::mt19937_64(seq);
}

EvalReport evaluate_with(const Dataset& dataset, const EpisodeSpec& spec, std::size_t episodes, std::uint64_t seed,
                         const Predictor& predictor, std::size_t threads) {
  if (episodes == 0) throw ConfigError("evaluation needs at least one episode");
  spec.validate();
  std::vector<double> accuracies(episodes, 0.0);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto worker = [&] {
    for (std::size_t i = next++; i < episodes; i = next++) {
      try {
        std::mt19937_64 rng = episode_rng(seed, i);
        const Episode ep = sample_episode(dataset, spec, rng);
        const std::vector<std::size_t> predicted = predictor(ep, rng);
        if (predicted.size() != ep.query.size())
          throw ContractError("predictor returned " + std::to_string(predicted.size()) + " labels for " +
                              std::to_string(ep.query.size()) + " queries");
        std::size_t correct = 0;
        for (std::size_t q = 0; q < predicted.size(); ++q) correct += predicted[q] == ep.query[q].label;
        accuracies[i] = static_cast<double>(correct) / static_cast<double>(predicted.size());
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = episodes;
      }
    }
  };
  const std::size_t count = std::max<std::size_t>(1, std::min(threads, episodes));
  if (count == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < count; ++t) pool.emplace_back(worker);
    for (auto& th : pool) th.join();
  }
  if (failure) std::rethrow_exception(failure);
  EvalReport report = summarize(std::move(accuracies));
  std::ostringstream cfg;
  cfg << spec.way << "-way " << spec.shot << "-shot " << spec.query << "-query seed " << seed;
  report.config = cfg.str();
  return report;
}

template <typename T>
EvalReport evaluate(const Model<T>& model, const Dataset& dataset, const EpisodeSpec& spec, std::size_t episodes,
                    std::uint64_t seed, const EvalOptions& options) {
  EvalReport report = evaluate_with(
      dataset, spec, episodes, seed,
      [&](const Episode& ep, std::mt19937_64& rng) { return predict(model, dataset, ep, options, rng); },
      options.threads);
  std::ostringstream cfg;
  cfg << report.config << ' ' << to_string(model.config().combine_mode)
      << (model.config().classifier_enabled ? " ac-on" : " ac-off") << " tta " << options.tta_copies
      << (options.finetune ? " finetune" : "");
  report.config = cfg.str();
  return report;
}

#define FSAA_INSTANTIATE_EPISODIC(T)                                                                                \
  template std::vector<Tensor<T>> class_weight_average(const Model<T>&, const Tensor<T>&,                          \
                                                       std::span<const std::size_t>, std::size_t);                  \
  template EpisodeScores<T> score_features(const Model<T>&, const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,   \
                                           const ScoringPlan&);                                                     \
  template EpisodeBatch<T> episode_batch<T>(const Dataset&, const Episode&);                                        \
  template EpisodeScores<T> score_episode(const Model<T>&, const Dataset&, const Episode&);                         \
  template EpisodeScores<T> score_episode_training(Model<T>&, const Dataset&, const Episode&);                      \
  template Tensor<T> attention_loss(const EpisodeScores<T>&, std::span<const std::size_t>);                         \
  template Tensor<T> classification_loss(const EpisodeScores<T>&, std::span<const std::size_t>);                    \
  template Tensor<T> total_loss(const EpisodeScores<T>&, std::span<const std::size_t>);                             \
  template class Adam<T>;                                                                                           \
  template StepLosses train_step(Model<T>&, Adam<T>&, const Dataset&, const Episode&);                              \
  template void train(Model<T>&, const Dataset&, const TrainConfig&, const StepCallback&);                          \
  template Tensor<T> tta_conditioning(const Model<T>&, const Dataset&, const Episode&, std::size_t,                 \
                                      const AugmentSpec&, std::mt19937_64&);                                        \
  template std::vector<Tensor<T>> tta_class_weights(const Model<T>&, const Dataset&, const Episode&, std::size_t,   \
                                                    const AugmentSpec&, std::mt19937_64&);                          \
  template Model<T> finetune_one_step(const Model<T>&, const Dataset&, const Episode&, double);                     \
  template std::vector<std::size_t> predict(const Model<T>&, const Dataset&, const Episode&, const EvalOptions&,    \
                                            std::mt19937_64&);                                                      \
  template EvalReport evaluate(const Model<T>&, const Dataset&, const EpisodeSpec&, std::size_t, std::uint64_t,     \
                               const EvalOptions&);

FSAA_INSTANTIATE_EPISODIC(float)
FSAA_INSTANTIATE_EPISODIC(double)

}  // namespace fsaa
