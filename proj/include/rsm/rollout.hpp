#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rsm/dataset.hpp"
#include "rsm/model.hpp"
#include "rsm/puzzles.hpp"

namespace rsm {

// Decoded outputs after every outer step of one long inference rollout.
// Verdicts come from the domain verifier, never from the model.
struct RolloutTrace {
  std::vector<std::vector<int>> decoded;  // index h-1 holds step h, h = 1..H_test
  std::vector<bool> verifier_pass;
  std::vector<bool> changed;  // step h differs from step h-1 (first step: false)

  int length() const { return static_cast<int>(decoded.size()); }
};

using Verifier = std::function<bool(const std::vector<int>&)>;

// Long inference rollout; memory stays constant in H_test (only the current
// latents plus the decoded token trace are kept).
RolloutTrace run_rollout(const Model<float>& model, const TokenizedExample& example,
                         int h_test, int l_test, const Verifier& verifier);

// Smallest step whose output passes the verifier and never changes again
// within the trace.
std::optional<int> steps_to_solve(const RolloutTrace& trace);

// Smallest h with k consecutive unchanged comparisons after it; a two-cycle
// oscillation never settles.
std::optional<int> settled_at(const RolloutTrace& trace, int k);

enum class GateResult { accept, reject_not_settled, reject_settled_invalid };

// Accept only settled outputs that pass the verifier.
GateResult reliability_gate(const RolloutTrace& trace, int k);

const char* gate_result_name(GateResult gate);

struct InstanceReport {
  int id = 0;
  bool solved = false;               // verifier passes at the final step
  bool final_matches_target = false; // exact token match against the target
  std::optional<int> steps_to_solve;
  std::optional<int> settled_at;
  GateResult gate = GateResult::reject_not_settled;
  std::string maze_verdict;  // "", or invalid/valid_path/optimal for mazes
};

struct EvalReport {
  double exact_accuracy = 0.0;
  std::optional<double> mean_steps_to_solve;
  std::optional<double> median_steps_to_solve;
  double settle_rate = 0.0;
  double gate_accept_rate = 0.0;
  int instances = 0;
  std::vector<InstanceReport> rows;
};

struct EvalOptions {
  int h_test = 1;
  int l_test = 1;
  int settle_k = 3;
  int threads = 1;
};

// Builds the per-instance verifier for the dataset's domain. Sudoku checks
// constraints plus agreement with the givens; maze accepts any valid path
// (optimality is reported separately).
Verifier make_verifier(const Dataset& dataset, const TokenizedExample& example);

EvalReport evaluate(const Model<float>& model, const Dataset& dataset,
                    const EvalOptions& options);

void write_eval_report(const EvalReport& report, const std::string& summary_path,
                       const std::string& per_instance_path);

}  // namespace rsm
