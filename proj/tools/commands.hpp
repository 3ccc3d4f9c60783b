#pragma once

// Command-line front end: train, eval, visualize, gradcheck, ablate.
//
// Exit codes: 0 success, 1 runtime failure (including failed gradient
// checks), 2 usage error. Results go to `out`; diagnostics go to `err`.

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fsaa/data.hpp"
#include "fsaa/episodic.hpp"
#include "fsaa/model.hpp"

namespace fsaa::cli {

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

/// Convenience for tests: args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

/// Raw attention map A(f_s, f_q) upsampled to the query's resolution, its
/// per-image min-max normalization, and 0.5 * query + 0.5 * heatmap.
struct Heatmap {
  Image raw;
  Image normalized;
  Image overlay;
};

Heatmap attention_heatmap(const Model<float>& model, const Image& support, const Image& query);

struct AblationRow {
  CombineMode combine = CombineMode::reweight;
  bool classifier = true;
  bool tta = false;
  EvalReport report;
};

/// Trains the four (combination x classifier) arms with identical budgets and
/// seeds, then evaluates each with and without test-time augmentation.
std::vector<AblationRow> run_ablation(const Dataset& train_set, const Dataset& test_set, const ModelConfig& base,
                                      const TrainConfig& train_config, std::size_t eval_episodes,
                                      std::size_t tta_copies, std::uint64_t eval_seed, std::ostream& log);

/// Aligned text table, one row per arm.
std::string format_ablation(const std::vector<AblationRow>& rows);

}  // namespace fsaa::cli
