#include "rsm/rollout.hpp"

#include <algorithm>
#include <fstream>
#include <thread>

#include <json.hpp>

namespace rsm {

using json = nlohmann::ordered_json;

RolloutTrace run_rollout(const Model<float>& model, const TokenizedExample& example,
                         int h_test, int l_test, const Verifier& verifier) {
  if (h_test < 1 || l_test < 1)
    throw usage_error("run_rollout: h_test and l_test must be >= 1");
  RolloutTrace trace;
  trace.decoded.reserve(static_cast<std::size_t>(h_test));
  auto per_step = [&](int /*step*/, const std::vector<int>& decoded) {
    trace.changed.push_back(!trace.decoded.empty() && decoded != trace.decoded.back());
    trace.verifier_pass.push_back(verifier ? verifier(decoded) : false);
    trace.decoded.push_back(decoded);
  };
  model.forward_infer(example.input, {example.puzzle_id}, /*batch=*/1, h_test, l_test,
                      per_step);
  return trace;
}

std::optional<int> steps_to_solve(const RolloutTrace& trace) {
  if (trace.decoded.empty()) return std::nullopt;
  // the trace is frozen from the step after its last change
  int stable_from = 1;
  for (int h = 2; h <= trace.length(); ++h)
    if (trace.changed[static_cast<std::size_t>(h - 1)]) stable_from = h;
  // every step >= stable_from decodes identically, so one verdict decides
  if (trace.verifier_pass[static_cast<std::size_t>(stable_from - 1)]) return stable_from;
  return std::nullopt;
}

std::optional<int> settled_at(const RolloutTrace& trace, int k) {
  if (k < 1) throw usage_error("settled_at: k must be >= 1");
  // h settles when steps h..h+k all decode identically (k comparisons)
  for (int h = 1; h + k <= trace.length(); ++h) {
    bool stable = true;
    for (int j = h + 1; j <= h + k; ++j)
      if (trace.changed[static_cast<std::size_t>(j - 1)]) {
        stable = false;
        break;
      }
    if (stable) return h;
  }
  return std::nullopt;
}

GateResult reliability_gate(const RolloutTrace& trace, int k) {
  const std::optional<int> settled = settled_at(trace, k);
  if (!settled) return GateResult::reject_not_settled;
  return trace.verifier_pass[static_cast<std::size_t>(*settled - 1)]
             ? GateResult::accept
             : GateResult::reject_settled_invalid;
}

const char* gate_result_name(GateResult gate) {
  switch (gate) {
    case GateResult::accept:
      return "accept";
    case GateResult::reject_not_settled:
      return "reject_not_settled";
    case GateResult::reject_settled_invalid:
      return "reject_settled_invalid";
  }
  return "unknown";
}

Verifier make_verifier(const Dataset& dataset, const TokenizedExample& example) {
  if (dataset.domain == "sudoku") {
    const std::vector<int> input = example.input;
    return [input](const std::vector<int>& decoded) {
      return sudoku_prediction_valid(input, decoded);
    };
  }
  if (dataset.domain == "maze") {
    const MazeInstance maze =
        maze_from_input_tokens(example.input, dataset.maze_width, dataset.maze_height);
    return [maze](const std::vector<int>& decoded) {
      return verify_maze(maze, decoded) != MazeVerdict::invalid;
    };
  }
  throw data_error("make_verifier: unknown domain " + dataset.domain);
}

namespace {

InstanceReport evaluate_instance(const Model<float>& model, const Dataset& dataset,
                                 int index, const EvalOptions& options) {
  const TokenizedExample& example = dataset.examples[static_cast<std::size_t>(index)];
  InstanceReport report;
  report.id = index;
  RolloutTrace trace =
      run_rollout(model, example, options.h_test, options.l_test,
                  make_verifier(dataset, example));
  const std::vector<int>& final_decoded = trace.decoded.back();
  report.solved = trace.verifier_pass.back();
  report.final_matches_target = final_decoded == example.target;
  report.steps_to_solve = steps_to_solve(trace);
  report.settled_at = settled_at(trace, options.settle_k);
  report.gate = reliability_gate(trace, options.settle_k);
  if (dataset.domain == "maze") {
    const MazeInstance maze =
        maze_from_input_tokens(example.input, dataset.maze_width, dataset.maze_height);
    switch (verify_maze(maze, final_decoded)) {
      case MazeVerdict::invalid:
        report.maze_verdict = "invalid";
        break;
      case MazeVerdict::valid_path:
        report.maze_verdict = "valid_path";
        break;
      case MazeVerdict::optimal:
        report.maze_verdict = "optimal";
        break;
    }
  }
  return report;
}

}  // namespace

EvalReport evaluate(const Model<float>& model, const Dataset& dataset,
                    const EvalOptions& options) {
  if (dataset.examples.empty()) throw data_error("evaluate: empty dataset");
  const int n = static_cast<int>(dataset.examples.size());
  EvalReport report;
  report.instances = n;
  report.rows.resize(static_cast<std::size_t>(n));

  const int threads = std::max(1, std::min(options.threads, n));
  if (threads == 1) {
    for (int i = 0; i < n; ++i)
      report.rows[static_cast<std::size_t>(i)] = evaluate_instance(model, dataset, i, options);
  } else {
    // instances are independent; weights are read-shared and the merge is by
    // index, so the report is deterministic regardless of thread count
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    for (int t = 0; t < threads; ++t)
      pool.emplace_back([&, t]() {
        for (int i = t; i < n; i += threads)
          report.rows[static_cast<std::size_t>(i)] =
              evaluate_instance(model, dataset, i, options);
      });
    for (auto& th : pool) th.join();
  }

  int exact = 0, settled = 0, accepted = 0;
  std::vector<int> solves;
  for (const auto& row : report.rows) {
    exact += row.final_matches_target ? 1 : 0;
    settled += row.settled_at ? 1 : 0;
    accepted += row.gate == GateResult::accept ? 1 : 0;
    if (row.steps_to_solve) solves.push_back(*row.steps_to_solve);
  }
  report.exact_accuracy = static_cast<double>(exact) / n;
  report.settle_rate = static_cast<double>(settled) / n;
  report.gate_accept_rate = static_cast<double>(accepted) / n;
  if (!solves.empty()) {
    double sum = 0.0;
    for (int s : solves) sum += s;
    report.mean_steps_to_solve = sum / static_cast<double>(solves.size());
    std::sort(solves.begin(), solves.end());
    const std::size_t mid = solves.size() / 2;
    report.median_steps_to_solve =
        solves.size() % 2 ? static_cast<double>(solves[mid])
                          : 0.5 * (solves[mid - 1] + solves[mid]);
  }
  return report;
}

void write_eval_report(const EvalReport& report, const std::string& summary_path,
                       const std::string& per_instance_path) {
  {
    std::ofstream out(per_instance_path, std::ios::binary);
    if (!out) throw io_error("cannot open " + per_instance_path);
    for (const auto& row : report.rows) {
      json obj = {{"id", row.id},
                  {"solved", row.solved},
                  {"steps_to_solve",
                   row.steps_to_solve ? json(*row.steps_to_solve) : json(nullptr)},
                  {"settled_at", row.settled_at ? json(*row.settled_at) : json(nullptr)},
                  {"gate", gate_result_name(row.gate)},
                  {"final_matches_target", row.final_matches_target}};
      if (!row.maze_verdict.empty()) obj["maze_verdict"] = row.maze_verdict;
      out << obj.dump() << "\n";
    }
  }
  {
    std::ofstream out(summary_path, std::ios::binary);
    if (!out) throw io_error("cannot open " + summary_path);
    json summary = {
        {"instances", report.instances},
        {"exact_accuracy", report.exact_accuracy},
        {"mean_steps_to_solve",
         report.mean_steps_to_solve ? json(*report.mean_steps_to_solve) : json(nullptr)},
        {"median_steps_to_solve", report.median_steps_to_solve
                                      ? json(*report.median_steps_to_solve)
                                      : json(nullptr)},
        {"settle_rate", report.settle_rate},
        {"gate_accept_rate", report.gate_accept_rate}};
    out << summary.dump(2) << "\n";
  }
}

}  // namespace rsm
