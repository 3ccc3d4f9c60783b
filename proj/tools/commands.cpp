#include "commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <ostream>
#include <sstream>

#include "fsaa/checkpoint.hpp"
#include "fsaa/errors.hpp"
#include "fsaa/gradcheck.hpp"

namespace fsaa::cli {

namespace {

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::string hex32(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08x", v);
  return buf;
}

// --- data sources --------------------------------------------------------------

struct DataOptions {
  std::string dir;
  bool synthetic = false;
  bool rotate = false;
  std::size_t image_size = 28;
  std::uint64_t corpus_seed = kSyntheticCorpusSeed;
};

void add_data_options(CLI::App* cmd, DataOptions& d, bool with_size) {
  auto* data = cmd->add_option("--data", d.dir, "Directory of class folders holding PGM/PPM images");
  auto* syn = cmd->add_flag("--synthetic", d.synthetic, "Use the built-in synthetic shape benchmark");
  data->excludes(syn);
  syn->excludes(data);
  cmd->add_flag("--rotate", d.rotate, "Add 90/180/270 degree rotations of every class as new classes")->needs(data);
  cmd->add_option("--corpus-seed", d.corpus_seed, "Seed of the synthetic corpus")->needs(syn);
  if (with_size) cmd->add_option("--image-size", d.image_size, "Side length images are resized to");
}

/// Synthetic data: the training or held-out half of the benchmark. A
/// directory is used as given.
Dataset resolve_data(const DataOptions& d, bool training, std::size_t image_size) {
  if (d.synthetic) {
    auto [train_set, test_set] = synthetic_benchmark(d.corpus_seed);
    if (image_size != 28) throw UsageError("the synthetic benchmark is 28x28; got --image-size " +
                                           std::to_string(image_size));
    return training ? std::move(train_set) : std::move(test_set);
  }
  if (d.dir.empty()) throw UsageError("one of --data <dir> or --synthetic is required");
  Dataset ds = load_directory_dataset(d.dir, image_size);
  if (d.rotate) ds = rotation_class_augment(ds);
  return ds;
}

std::size_t dataset_channels(const Dataset& ds) { return ds.classes.front().images.front().channels; }

Model<float> load_model(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  return Model<float>(ck.config, std::move(ck.params));
}

// --- train -----------------------------------------------------------------------

struct TrainOptions {
  DataOptions data;
  EpisodeSpec spec;
  std::size_t episodes = 2000;
  double lr = 1e-3;
  std::uint64_t seed = 1;
  std::string combine = "reweight";
  bool no_classifier = false;
  std::string out;
  std::string log;
};

int cmd_train(const TrainOptions& o, std::ostream& out, std::ostream& err) {
  const Dataset train_set = resolve_data(o.data, true, o.data.image_size);
  ModelConfig config;
  config.input_channels = dataset_channels(train_set);
  config.input_size = o.data.image_size;
  config.combine_mode = parse_combine_mode(o.combine);
  config.classifier_enabled = !o.no_classifier;
  config.validate();

  TrainConfig tc;
  tc.spec = o.spec;
  tc.episodes = o.episodes;
  tc.learning_rate = o.lr;
  tc.seed = o.seed;
  tc.validate();

  const std::string log_path = o.log.empty() ? o.out + ".log" : o.log;
  std::ofstream log(log_path);
  if (!log) throw std::runtime_error(log_path + ": cannot open for writing");
  log << "# episode\tl_att\tl_ce\ttotal\n";

  Model<float> model(config, o.seed);
  double window = 0.0;
  train(model, train_set, tc, [&](std::size_t e, const StepLosses& l) {
    log << e << '\t' << fixed(l.attention, 6) << '\t' << fixed(l.classification, 6) << '\t' << fixed(l.total, 6)
        << '\n';
    window += l.total;
    if ((e + 1) % 100 == 0 || e + 1 == tc.episodes) {
      const std::size_t span = (e % 100) + 1;
      err << "episode " << e + 1 << "/" << tc.episodes << "  mean loss " << fixed(window / span, 4) << '\n';
      window = 0.0;
    }
  });
  if (!log) throw std::runtime_error(log_path + ": write failed");
  save_checkpoint(o.out, config, model.params());
  out << "checkpoint\t" << o.out << "\nlog\t" << log_path << '\n';
  return 0;
}

// --- eval ----------------------------------------------------------------------

struct EvalCmdOptions {
  std::string ckpt;
  DataOptions data;
  EpisodeSpec spec;
  std::size_t episodes = 600;
  std::size_t tta = 0;
  bool finetune = false;
  double finetune_lr = 1e-4;
  std::uint64_t seed = 1;
  std::size_t threads = 1;
};

int cmd_eval(const EvalCmdOptions& o, std::ostream& out, std::ostream& err) {
  const Model<float> model = load_model(o.ckpt);
  const ModelConfig& config = model.config();
  const Dataset test_set = resolve_data(o.data, false, config.input_size);
  if (dataset_channels(test_set) != config.input_channels)
    throw LoadError(o.ckpt + ": checkpoint expects " + std::to_string(config.input_channels) +
                    "-channel images, data has " + std::to_string(dataset_channels(test_set)) + "-channel images");
  EvalOptions eo;
  eo.tta_copies = o.tta;
  eo.finetune = o.finetune;
  eo.finetune_lr = o.finetune_lr;
  eo.threads = o.threads;
  const EvalReport r = evaluate(model, test_set, o.spec, o.episodes, o.seed, eo);
  err << r.config << '\n';
  out << "accuracy " << fixed(r.mean, 4) << "\xC2\xB1" << fixed(r.ci95, 4) << '\n';
  out << fixed(r.mean, 6) << '\t' << fixed(r.ci95, 6) << '\t' << r.episodes << '\t' << hex32(config_hash(config))
      << '\n';
  return 0;
}

// --- visualize -------------------------------------------------------------------

struct VisualizeOptions {
  std::string ckpt;
  std::string support;
  std::string query;
  std::string prefix;
};

int cmd_visualize(const VisualizeOptions& o, std::ostream& out, std::ostream&) {
  const Model<float> model = load_model(o.ckpt);
  const ModelConfig& c = model.config();
  const Image support = read_pnm(o.support);
  const Image query = read_pnm(o.query);
  for (const Image* img : {&support, &query})
    if (img->channels != c.input_channels || img->height != c.input_size || img->width != c.input_size)
      throw UsageError("image is " + std::to_string(img->channels) + "x" + std::to_string(img->height) + "x" +
                       std::to_string(img->width) + ", checkpoint expects " + std::to_string(c.input_channels) +
                       "x" + std::to_string(c.input_size) + "x" + std::to_string(c.input_size));
  const Heatmap h = attention_heatmap(model, support, query);
  const std::string heat_path = o.prefix + "_heatmap.pgm";
  const std::string overlay_path = o.prefix + "_overlay.pgm";
  write_pnm(heat_path, h.normalized);
  write_pnm(overlay_path, h.overlay);
  out << "heatmap\t" << heat_path << "\noverlay\t" << overlay_path << '\n';
  return 0;
}

// --- gradcheck -------------------------------------------------------------------

struct GradcheckOptions {
  std::uint64_t seed = 0;
  std::vector<std::string> ops{"all"};
  double tolerance = 1e-4;
  int instances = 5;
};

int cmd_gradcheck(const GradcheckOptions& o, std::ostream& out, std::ostream& err) {
  const std::vector<std::string> known = differentiable_ops();
  std::vector<std::string> selected;
  for (const std::string& name : o.ops) {
    if (name == "all") {
      selected.insert(selected.end(), known.begin(), known.end());
    } else if (std::find(known.begin(), known.end(), name) != known.end()) {
      selected.push_back(name);
    } else {
      throw UsageError("unknown op '" + name + "'");
    }
  }
  if (o.instances < 1) throw UsageError("--instances must be at least 1");
  GradCheckOptions gc;
  gc.seed = o.seed;
  gc.tolerance = o.tolerance;
  gc.instances = o.instances;
  bool all_passed = true;
  out << "# op\tworst_relative_error\tinstances\tresult\n";
  for (const std::string& name : selected) {
    const GradCheckResult r = check_op(name, gc);
    char err_buf[32];
    std::snprintf(err_buf, sizeof err_buf, "%.3e", r.worst_relative_error);
    out << r.op << '\t' << err_buf << '\t' << r.instances << '\t' << (r.passed ? "PASS" : "FAIL") << '\n';
    all_passed = all_passed && r.passed;
  }
  if (!all_passed) err << "gradient check failed at tolerance " << o.tolerance << '\n';
  return all_passed ? 0 : 1;
}

// --- ablate ----------------------------------------------------------------------

struct AblateOptions {
  DataOptions data;
  EpisodeSpec spec;
  std::size_t episodes_train = 2000;
  std::size_t episodes_eval = 600;
  std::size_t tta = 10;
  std::uint64_t seed = 1;
  std::string test_dir;
};

int cmd_ablate(const AblateOptions& o, std::ostream& out, std::ostream& err) {
  if (!o.data.synthetic && o.test_dir.empty()) throw UsageError("--test-data <dir> is required with --data");
  const Dataset train_set = resolve_data(o.data, true, o.data.image_size);
  Dataset test_set;
  if (o.data.synthetic) {
    test_set = resolve_data(o.data, false, o.data.image_size);
  } else {
    test_set = load_directory_dataset(o.test_dir, o.data.image_size);
  }
  ModelConfig base;
  base.input_channels = dataset_channels(train_set);
  base.input_size = o.data.image_size;
  TrainConfig tc;
  tc.spec = o.spec;
  tc.episodes = o.episodes_train;
  tc.seed = o.seed;
  const auto rows = run_ablation(train_set, test_set, base, tc, o.episodes_eval, o.tta, o.seed, err);
  out << format_ablation(rows);
  return 0;
}

}  // namespace

// ---------------------------------------------------------------------------------

Heatmap attention_heatmap(const Model<float>& model, const Image& support, const Image& query) {
  NoGradGuard no_grad;
  const Image* pair[] = {&support, &query};
  const Tensor<float> features = model.extract_features(images_to_tensor<float>(pair));
  const std::size_t c = features.dim(1), h = features.dim(2), w = features.dim(3);
  const auto f = features.data();
  const Tensor<float> fs({c, h, w}, std::vector<float>(f.begin(), f.begin() + c * h * w));
  const Tensor<float> fq({c, h, w}, std::vector<float>(f.begin() + c * h * w, f.end()));
  const AttentionMap<float> map = model.adaptive_attention_map(fs, fq);

  Image small(1, h, w);
  std::copy(map.values.data().begin(), map.values.data().end(), small.pixels.begin());
  Heatmap out;
  out.raw = resize_bilinear(small, query.height, query.width);
  const auto [lo, hi] = std::minmax_element(out.raw.pixels.begin(), out.raw.pixels.end());
  const float range = *hi - *lo;
  out.normalized = Image(1, query.height, query.width);
  for (std::size_t i = 0; i < out.raw.pixels.size(); ++i)
    out.normalized.pixels[i] = range > 0.0f ? (out.raw.pixels[i] - *lo) / range : 0.0f;
  out.overlay = Image(1, query.height, query.width);
  for (std::size_t y = 0; y < query.height; ++y)
    for (std::size_t x = 0; x < query.width; ++x) {
      float gray = 0.0f;
      for (std::size_t ch = 0; ch < query.channels; ++ch) gray += query.at(ch, y, x);
      gray /= static_cast<float>(query.channels);
      out.overlay.at(0, y, x) = 0.5f * gray + 0.5f * out.normalized.at(0, y, x);
    }
  return out;
}

std::vector<AblationRow> run_ablation(const Dataset& train_set, const Dataset& test_set, const ModelConfig& base,
                                      const TrainConfig& train_config, std::size_t eval_episodes,
                                      std::size_t tta_copies, std::uint64_t eval_seed, std::ostream& log) {
  std::vector<AblationRow> rows;
  for (CombineMode mode : {CombineMode::concatenate, CombineMode::reweight})
    for (bool classifier : {false, true}) {
      ModelConfig config = base;
      config.combine_mode = mode;
      config.classifier_enabled = classifier;
      Model<float> model(config, train_config.seed);
      log << "training " << to_string(mode) << (classifier ? " +AC" : " -AC") << " for " << train_config.episodes
          << " episodes\n";
      train(model, train_set, train_config);
      for (bool tta : {false, true}) {
        EvalOptions eo;
        eo.tta_copies = tta ? tta_copies : 0;
        AblationRow row{mode, classifier, tta, evaluate(model, test_set, train_config.spec, eval_episodes,
                                                          eval_seed, eo)};
        log << "  " << (tta ? "+TA " : "-TA ") << fixed(row.report.mean, 4) << '\n';
        rows.push_back(std::move(row));
      }
    }
  return rows;
}

std::string format_ablation(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << std::left << std::setw(13) << "combination" << std::setw(5) << "AC" << std::setw(5) << "TA"
     << "accuracy\n";
  for (const AblationRow& r : rows) {
    os << std::left << std::setw(13) << to_string(r.combine) << std::setw(5) << (r.classifier ? "yes" : "no")
       << std::setw(5) << (r.tta ? "yes" : "no") << fixed(100.0 * r.report.mean, 2) << " +- "
       << fixed(100.0 * r.report.ci95, 2) << '\n';
  }
  return os.str();
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot classification with adaptive attention"};
  app.require_subcommand(1);

  TrainOptions train_o;
  auto* train_cmd = app.add_subcommand("train", "Episodic training; writes a checkpoint and a loss log");
  add_data_options(train_cmd, train_o.data, true);
  train_cmd->add_option("--way", train_o.spec.way, "Classes per episode")->capture_default_str();
  train_cmd->add_option("--shot", train_o.spec.shot, "Supports per class")->capture_default_str();
  train_cmd->add_option("--query", train_o.spec.query, "Queries per class")->capture_default_str();
  train_cmd->add_option("--episodes", train_o.episodes, "Training episodes")->capture_default_str();
  train_cmd->add_option("--lr", train_o.lr, "Adam learning rate")->capture_default_str();
  train_cmd->add_option("--seed", train_o.seed, "Seed for initialization and episode sampling")
      ->capture_default_str();
  train_cmd->add_option("--combine", train_o.combine, "reweight or concatenate")
      ->check(CLI::IsMember({"reweight", "concatenate", "concat"}))
      ->capture_default_str();
  train_cmd->add_flag("--no-classifier", train_o.no_classifier, "Train the attention loss only");
  train_cmd->add_option("--out", train_o.out, "Checkpoint path")->required();
  train_cmd->add_option("--log", train_o.log, "Loss log path (default: <out>.log)");

  EvalCmdOptions eval_o;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint over random episodes");
  eval_cmd->add_option("--ckpt", eval_o.ckpt, "Checkpoint path")->required();
  add_data_options(eval_cmd, eval_o.data, false);
  eval_cmd->add_option("--way", eval_o.spec.way)->capture_default_str();
  eval_cmd->add_option("--shot", eval_o.spec.shot)->capture_default_str();
  eval_cmd->add_option("--query", eval_o.spec.query)->capture_default_str();
  eval_cmd->add_option("--episodes", eval_o.episodes)->capture_default_str();
  eval_cmd->add_option("--tta", eval_o.tta, "Augmented copies per support (0 disables)")->capture_default_str();
  eval_cmd->add_flag("--finetune", eval_o.finetune, "One adaptation step on the supports of each episode");
  eval_cmd->add_option("--finetune-lr", eval_o.finetune_lr)->capture_default_str();
  eval_cmd->add_option("--seed", eval_o.seed)->capture_default_str();
  eval_cmd->add_option("--threads", eval_o.threads, "Worker threads over episodes")->capture_default_str();

  VisualizeOptions vis_o;
  auto* vis_cmd = app.add_subcommand("visualize", "Render the attention map of a support/query pair");
  vis_cmd->add_option("--ckpt", vis_o.ckpt)->required();
  vis_cmd->add_option("--support", vis_o.support, "Support image (PGM/PPM)")->required();
  vis_cmd->add_option("--query", vis_o.query, "Query image (PGM/PPM)")->required();
  vis_cmd->add_option("--out-prefix", vis_o.prefix, "Writes <prefix>_heatmap.pgm and <prefix>_overlay.pgm")
      ->required();

  GradcheckOptions gc_o;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference checks of every differentiable op");
  gc_cmd->add_option("--seed", gc_o.seed)->capture_default_str();
  gc_cmd->add_option("--ops", gc_o.ops, "Comma-separated op names or 'all'")->delimiter(',')->capture_default_str();
  gc_cmd->add_option("--tolerance", gc_o.tolerance)->capture_default_str();
  gc_cmd->add_option("--instances", gc_o.instances)->capture_default_str();

  AblateOptions ab_o;
  auto* ab_cmd = app.add_subcommand("ablate", "Train and evaluate the combination x AC x TA grid");
  add_data_options(ab_cmd, ab_o.data, true);
  ab_cmd->add_option("--test-data", ab_o.test_dir, "Held-out class directory (with --data)");
  ab_cmd->add_option("--way", ab_o.spec.way)->capture_default_str();
  ab_cmd->add_option("--shot", ab_o.spec.shot)->capture_default_str();
  ab_cmd->add_option("--query", ab_o.spec.query)->capture_default_str();
  ab_cmd->add_option("--episodes-train", ab_o.episodes_train)->capture_default_str();
  ab_cmd->add_option("--episodes-eval", ab_o.episodes_eval)->capture_default_str();
  ab_cmd->add_option("--tta", ab_o.tta)->capture_default_str();
  ab_cmd->add_option("--seed", ab_o.seed)->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(train_o, out, err);
    if (*eval_cmd) return cmd_eval(eval_o, out, err);
    if (*vis_cmd) return cmd_visualize(vis_o, out, err);
    if (*gc_cmd) return cmd_gradcheck(gc_o, out, err);
    if (*ab_cmd) return cmd_ablate(ab_o, out, err);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const ConfigError& e) {
    err << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  std::vector<const char*> argv{"fsaa"};
  for (const std::string& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data(), out, err);
}

}  // namespace fsaa::cli
