#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "rsm/dataset.hpp"
#include "rsm/model.hpp"

namespace rsm {

struct Milestone {
  double percent = 0.0;
  int delta = 0;
};

struct TrainConfig {
  long long total_steps = 1000;
  int batch_size = 32;
  double lr_max = 1e-3;
  double lr_min = 1e-5;
  long long warmup_steps = 0;
  double detach_prob = 1.0;
  std::vector<Milestone> outer_milestones;  // (percent, +outer depth)
  std::vector<Milestone> inner_milestones;  // (percent, +inner depth)
  double clip_norm = 1.0;
  double ema_decay = 0.0;  // 0 disables the averaged weights
  long long transition_lr_warmup_steps = 0;
  double optimizer_reset_scale = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;
  double puzzle_emb_lr_mult = 1.0;
  std::uint64_t seed = 0;
  long long checkpoint_every = 0;  // 0: final checkpoint only

  void validate() const;
};

// base + sum of milestone deltas whose percent threshold has been reached
// (inclusive at the threshold)
int target_depth(double percent, int base, const std::vector<Milestone>& milestones);

// linear 0 -> lr_max over warmup_steps, then cosine to lr_min at total_steps
double lr_at(long long step, const TrainConfig& cfg);

// 1 with no recent depth transition, else a linear 0 -> 1 ramp over `window`
// steps after the transition
double transition_lr_mult(long long step, std::optional<long long> last_transition_step,
                          long long window);

struct CurriculumState {
  int active_outer = 2;
  int active_inner = 1;
  std::optional<long long> last_transition_step;
};

// global L2 norm over every parameter gradient
double global_grad_norm(const Weights<float>& weights);

// scales gradients so the global norm is at most clip_norm; returns the
// pre-clip norm
double clip_gradients(Weights<float>& weights, double clip_norm);

// Adam with decoupled weight decay. Parameters flagged sparse_rows skip rows
// whose gradient is entirely zero, so unused puzzle-table rows stay put.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const Weights<float>& weights, double beta1, double beta2, double eps,
        double weight_decay);

  void step(Weights<float>& weights, double lr, double puzzle_emb_lr_mult = 1.0);
  void scale_moments(double factor);

  long long step_count() const { return t_; }
  void set_step_count(long long t) { t_ = t; }
  std::vector<std::vector<float>>& first_moments() { return m_; }
  std::vector<std::vector<float>>& second_moments() { return v_; }

 private:
  double beta1_ = 0.9, beta2_ = 0.95, eps_ = 1e-8, weight_decay_ = 0.1;
  long long t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// ema <- decay * ema + (1 - decay) * weights, tracked per parameter
class EmaWeights {
 public:
  EmaWeights() = default;
  explicit EmaWeights(const Weights<float>& weights);
  void update(const Weights<float>& weights, double decay);
  const std::vector<std::vector<float>>& values() const { return values_; }
  std::vector<std::vector<float>>& values() { return values_; }

 private:
  std::vector<std::vector<float>> values_;
};

struct StepMetrics {
  long long step = 0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  int active_outer = 0;
  int active_inner = 0;
  bool include_prev = false;
  double wallclock = 0.0;
  std::size_t tape_nodes = 0;
};

struct TrainBatch {
  int batch = 0;
  std::vector<int> tokens;
  std::vector<int> puzzle_ids;
  std::vector<int> targets;
};

// One optimization step: forward with the resolved depths, terminal
// cross-entropy, backward, clip, AdamW, optional EMA update.
StepMetrics train_step(Model<float>& model, const TrainBatch& batch, AdamW& optimizer,
                       EmaWeights* ema, const CurriculumState& curriculum,
                       const TrainConfig& cfg, long long step);

struct TrainRunResult {
  long long final_step = 0;
  double final_loss = 0.0;
  std::string checkpoint_path;
  std::string ema_checkpoint_path;  // empty when EMA is disabled
  std::string metrics_path;
};

// Full loop: per-epoch shuffling, curriculum resolution, transition events,
// periodic checkpoints (raw + EMA) and JSONL metrics under out_dir.
// `resume_from` restores weights, optimizer state and step numbering.
TrainRunResult run_training(Model<float>& model, const Dataset& dataset,
                            const TrainConfig& cfg, const std::string& out_dir,
                            const std::string& resume_from = "",
                            const std::function<void(const StepMetrics&)>& on_step = nullptr,
                            const std::function<bool()>& should_stop = nullptr);

}  // namespace rsm
