#include "rsm/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "rsm/checkpoint.hpp"

namespace rsm {

using json = nlohmann::ordered_json;

void TrainConfig::validate() const {
  std::vector<std::string> problems;
  if (total_steps < 1) problems.push_back("total_steps must be >= 1");
  if (batch_size < 1) problems.push_back("batch_size must be >= 1");
  if (warmup_steps < 0 || warmup_steps >= total_steps)
    problems.push_back("warmup_steps must be in [0, total_steps)");
  if (detach_prob < 0.0 || detach_prob > 1.0)
    problems.push_back("detach_prob must be in [0, 1]");
  if (clip_norm <= 0.0) problems.push_back("clip_norm must be > 0");
  if (ema_decay < 0.0 || ema_decay >= 1.0)
    problems.push_back("ema_decay must be in [0, 1)");
  if (optimizer_reset_scale < 0.0 || optimizer_reset_scale > 1.0)
    problems.push_back("optimizer_reset_scale must be in [0, 1]");
  if (transition_lr_warmup_steps < 0)
    problems.push_back("transition_lr_warmup_steps must be >= 0");
  auto check_milestones = [&](const std::vector<Milestone>& ms, const char* name) {
    double prev = -1.0;
    for (const auto& m : ms) {
      if (m.percent < 0.0 || m.percent > 100.0)
        problems.push_back(std::string(name) + " percents must be in [0, 100]");
      if (m.percent <= prev)
        problems.push_back(std::string(name) + " percents must be strictly increasing");
      prev = m.percent;
    }
  };
  check_milestones(outer_milestones, "outer_milestones");
  check_milestones(inner_milestones, "inner_milestones");
  if (!problems.empty()) {
    std::string all = "invalid training config:";
    for (const auto& p : problems) all += "\n  - " + p;
    throw config_error(all);
  }
}

int target_depth(double percent, int base, const std::vector<Milestone>& milestones) {
  int depth = base;
  for (const auto& m : milestones)
    if (percent >= m.percent) depth += m.delta;
  return depth;
}

double lr_at(long long step, const TrainConfig& cfg) {
  if (step < 0) throw usage_error("lr_at: negative step");
  if (cfg.warmup_steps > 0 && step <= cfg.warmup_steps)
    return cfg.lr_max * static_cast<double>(step) / static_cast<double>(cfg.warmup_steps);
  const long long span = cfg.total_steps - cfg.warmup_steps;
  const double t = span > 0 ? static_cast<double>(step - cfg.warmup_steps) /
                                  static_cast<double>(span)
                            : 1.0;
  const double clamped = std::min(1.0, std::max(0.0, t));
  return cfg.lr_min +
         (cfg.lr_max - cfg.lr_min) * 0.5 * (1.0 + std::cos(3.14159265358979323846 * clamped));
}

double transition_lr_mult(long long step, std::optional<long long> last_transition_step,
                          long long window) {
  if (!last_transition_step || window <= 0) return 1.0;
  const long long since = step - *last_transition_step;
  if (since <= 0) return 0.0;
  if (since >= window) return 1.0;
  return static_cast<double>(since) / static_cast<double>(window);
}

double global_grad_norm(const Weights<float>& weights) {
  double sum = 0.0;
  for (const auto& p : weights.params) {
    if (!p.value.grad) continue;
    for (float g : p.value.grad->v) sum += static_cast<double>(g) * g;
  }
  return std::sqrt(sum);
}

double clip_gradients(Weights<float>& weights, double clip_norm) {
  if (clip_norm <= 0.0) throw config_error("clip_gradients: clip_norm must be > 0");
  const double norm = global_grad_norm(weights);
  if (norm > clip_norm) {
    const float factor = static_cast<float>(clip_norm / norm);
    for (auto& p : weights.params) {
      if (!p.value.grad) continue;
      for (float& g : p.value.grad->v) g *= factor;
    }
  }
  return norm;
}

AdamW::AdamW(const Weights<float>& weights, double beta1, double beta2, double eps,
             double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  m_.reserve(weights.params.size());
  v_.reserve(weights.params.size());
  for (const auto& p : weights.params) {
    m_.emplace_back(p.value.numel(), 0.0f);
    v_.emplace_back(p.value.numel(), 0.0f);
  }
}

void AdamW::step(Weights<float>& weights, double lr, double puzzle_emb_lr_mult) {
  if (m_.size() != weights.params.size())
    throw usage_error("AdamW: optimizer built for a different parameter set");
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < weights.params.size(); ++i) {
    auto& p = weights.params[i];
    if (!p.value.grad) continue;
    const double eff_lr = p.sparse_rows ? lr * puzzle_emb_lr_mult : lr;
    float* theta = p.value.data();
    const float* grad = p.value.grad->v.data();
    float* m = m_[i].data();
    float* v = v_[i].data();
    const std::size_t n = p.value.numel();

    auto update_range = [&](std::size_t lo, std::size_t hi) {
      for (std::size_t j = lo; j < hi; ++j) {
        const double g = grad[j];
        const double mj = beta1_ * m[j] + (1.0 - beta1_) * g;
        const double vj = beta2_ * v[j] + (1.0 - beta2_) * g * g;
        m[j] = static_cast<float>(mj);
        v[j] = static_cast<float>(vj);
        const double m_hat = mj / bc1;
        const double v_hat = vj / bc2;
        double theta_j = theta[j];
        theta_j -= eff_lr * (m_hat / (std::sqrt(v_hat) + eps_) + weight_decay_ * theta_j);
        theta[j] = static_cast<float>(theta_j);
      }
    };

    if (p.sparse_rows && p.value.rank() == 2) {
      const std::size_t cols = static_cast<std::size_t>(p.value.dim(1));
      const std::size_t rows = static_cast<std::size_t>(p.value.dim(0));
      for (std::size_t r = 0; r < rows; ++r) {
        bool touched = false;
        for (std::size_t c = 0; c < cols; ++c)
          if (grad[r * cols + c] != 0.0f) {
            touched = true;
            break;
          }
        if (touched) update_range(r * cols, (r + 1) * cols);
      }
    } else {
      update_range(0, n);
    }
  }
}

void AdamW::scale_moments(double factor) {
  for (auto& m : m_)
    for (float& x : m) x = static_cast<float>(x * factor);
  for (auto& v : v_)
    for (float& x : v) x = static_cast<float>(x * factor);
}

EmaWeights::EmaWeights(const Weights<float>& weights) {
  values_.reserve(weights.params.size());
  for (const auto& p : weights.params)
    values_.emplace_back(p.value.buf->v);
}

void EmaWeights::update(const Weights<float>& weights, double decay) {
  if (values_.size() != weights.params.size())
    throw usage_error("EmaWeights: tracker built for a different parameter set");
  for (std::size_t i = 0; i < values_.size(); ++i) {
    const float* w = weights.params[i].value.data();
    float* e = values_[i].data();
    for (std::size_t j = 0; j < values_[i].size(); ++j)
      e[j] = static_cast<float>(decay * e[j] + (1.0 - decay) * w[j]);
  }
}

StepMetrics train_step(Model<float>& model, const TrainBatch& batch, AdamW& optimizer,
                       EmaWeights* ema, const CurriculumState& curriculum,
                       const TrainConfig& cfg, long long step) {
  StepMetrics metrics;
  metrics.step = step;
  metrics.active_outer = curriculum.active_outer;
  metrics.active_inner = curriculum.active_inner;

  for (auto& p : model.weights().params) p.value.zero_grad();

  Rng step_rng(mix64(cfg.seed, mix64(0x73746570ull, static_cast<std::uint64_t>(step))));
  Tape<float> tape;
  float loss_value = 0.0f;
  {
    TapeScope<float> scope(tape);
    TrainForward<float> fwd =
        model.forward_train(batch.tokens, batch.puzzle_ids, batch.batch,
                            curriculum.active_outer, curriculum.active_inner, step_rng);
    metrics.include_prev = fwd.include_prev;
    Tensor<float> loss = cross_entropy(fwd.logits, batch.targets, /*ignore_label=*/-1);
    loss_value = loss.scalar();
    if (!std::isfinite(loss_value))
      throw diverged_error("non-finite loss at step " + std::to_string(step),
                           static_cast<int>(step));
    metrics.tape_nodes = tape.node_count();
    tape.backward(loss);
  }
  metrics.loss = loss_value;
  metrics.grad_norm = clip_gradients(model.weights(), cfg.clip_norm);
  metrics.lr = lr_at(step, cfg) * transition_lr_mult(step, curriculum.last_transition_step,
                                                     cfg.transition_lr_warmup_steps);
  optimizer.step(model.weights(), metrics.lr, cfg.puzzle_emb_lr_mult);
  if (ema && cfg.ema_decay > 0.0) ema->update(model.weights(), cfg.ema_decay);
  return metrics;
}

namespace {

// Epoch ordering is a pure function of (seed, epoch) so a resumed run walks
// the same batches.
std::vector<std::size_t> epoch_order(std::uint64_t seed, long long epoch, std::size_t n) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix64(seed, mix64(0x65706f6368ull, static_cast<std::uint64_t>(epoch))));
  rng.shuffle(order);
  return order;
}

TrainBatch assemble_batch(const Dataset& dataset, const std::vector<std::size_t>& order,
                          std::size_t start, int batch_size) {
  TrainBatch batch;
  batch.batch = batch_size;
  const std::size_t seq = static_cast<std::size_t>(dataset.seq_len);
  batch.tokens.reserve(batch_size * seq);
  batch.targets.reserve(batch_size * seq);
  batch.puzzle_ids.reserve(batch_size);
  for (int i = 0; i < batch_size; ++i) {
    const TokenizedExample& ex = dataset.examples[order[start + i]];
    batch.tokens.insert(batch.tokens.end(), ex.input.begin(), ex.input.end());
    batch.targets.insert(batch.targets.end(), ex.target.begin(), ex.target.end());
    batch.puzzle_ids.push_back(ex.puzzle_id);
  }
  return batch;
}

}  // namespace

TrainRunResult run_training(Model<float>& model, const Dataset& dataset,
                            const TrainConfig& cfg, const std::string& out_dir,
                            const std::string& resume_from,
                            const std::function<void(const StepMetrics&)>& on_step,
                            const std::function<bool()>& should_stop) {
  cfg.validate();
  if (dataset.examples.empty()) throw data_error("run_training: empty dataset");
  if (static_cast<std::size_t>(cfg.batch_size) > dataset.examples.size())
    throw config_error("run_training: batch_size exceeds dataset size");
  model.mutable_config().detach_prob = cfg.detach_prob;

  std::filesystem::create_directories(out_dir);
  const std::string metrics_path = out_dir + "/metrics.jsonl";
  const std::string ckpt_path = out_dir + "/model.ckpt";
  const std::string state_path = ckpt_path + ".train";
  const std::string ema_path = ckpt_path + ".ema";

  AdamW optimizer(model.weights(), cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  EmaWeights ema(model.weights());
  const bool use_ema = cfg.ema_decay > 0.0;

  CurriculumState curriculum;
  curriculum.active_outer = std::max(2, target_depth(0.0, model.config().outer_steps,
                                                     cfg.outer_milestones));
  curriculum.active_inner = target_depth(0.0, model.config().inner_steps, cfg.inner_milestones);
  long long start_step = 0;

  if (!resume_from.empty()) {
    Model<float> restored = load_model_checkpoint(resume_from);
    if (model_config_to_header(restored.config()) != model_config_to_header(model.config()))
      throw config_error("resume checkpoint config does not match the run config");
    for (std::size_t i = 0; i < model.weights().params.size(); ++i)
      model.weights().params[i].value.buf->v = restored.weights().params[i].value.buf->v;
    model.weights().state_h0.buf->v = restored.weights().state_h0.buf->v;
    model.weights().state_l0.buf->v = restored.weights().state_l0.buf->v;
    TrainState state = load_train_state(resume_from + ".train", optimizer, model.weights());
    curriculum = state.curriculum;
    start_step = state.step;
    if (use_ema) {
      Model<float> ema_model = load_model_checkpoint(resume_from + ".ema");
      for (std::size_t i = 0; i < ema.values().size(); ++i)
        ema.values()[i] = ema_model.weights().params[i].value.buf->v;
    }
  }

  std::ofstream metrics(metrics_path, start_step > 0 ? std::ios::app : std::ios::trunc);
  if (!metrics) throw io_error("cannot open " + metrics_path);

  const long long steps_per_epoch =
      static_cast<long long>(dataset.examples.size()) / cfg.batch_size;
  const auto t0 = std::chrono::steady_clock::now();

  auto write_checkpoints = [&](long long step) {
    save_model_checkpoint(ckpt_path, model.config(), model.weights());
    TrainState state;
    state.step = step;
    state.curriculum = curriculum;
    state.adam_step_count = optimizer.step_count();
    save_train_state(state_path, state, optimizer, model.weights());
    if (use_ema)
      save_model_checkpoint_with_values(ema_path, model.config(), model.weights(),
                                        ema.values());
  };

  TrainRunResult result;
  result.metrics_path = metrics_path;
  result.checkpoint_path = ckpt_path;
  if (use_ema) result.ema_checkpoint_path = ema_path;

  long long epoch = -1;
  std::vector<std::size_t> order;
  for (long long step = start_step; step < cfg.total_steps; ++step) {
    const long long this_epoch = step / steps_per_epoch;
    if (this_epoch != epoch) {
      epoch = this_epoch;
      order = epoch_order(cfg.seed, epoch, dataset.examples.size());
    }

    const double percent =
        100.0 * static_cast<double>(step) / static_cast<double>(cfg.total_steps);
    const int want_outer =
        std::max(2, target_depth(percent, model.config().outer_steps, cfg.outer_milestones));
    const int want_inner =
        target_depth(percent, model.config().inner_steps, cfg.inner_milestones);
    if (want_outer > curriculum.active_outer || want_inner > curriculum.active_inner) {
      curriculum.active_outer = std::max(curriculum.active_outer, want_outer);
      curriculum.active_inner = std::max(curriculum.active_inner, want_inner);
      curriculum.last_transition_step = step;
      optimizer.scale_moments(cfg.optimizer_reset_scale);
    }

    const std::size_t batch_start =
        static_cast<std::size_t>(step % steps_per_epoch) * cfg.batch_size;
    TrainBatch batch = assemble_batch(dataset, order, batch_start, cfg.batch_size);

    StepMetrics m = train_step(model, batch, optimizer, use_ema ? &ema : nullptr,
                               curriculum, cfg, step);
    m.wallclock =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.final_step = step;
    result.final_loss = m.loss;

    json row = {{"step", m.step},
                {"loss", m.loss},
                {"grad_norm", m.grad_norm},
                {"lr", m.lr},
                {"active_H", m.active_outer},
                {"active_L", m.active_inner},
                {"include_prev_H", m.include_prev},
                {"wallclock", m.wallclock}};
    metrics << row.dump() << "\n";
    if (on_step) on_step(m);

    const long long done = step + 1;
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 &&
        done < cfg.total_steps)
      write_checkpoints(done);
    if (should_stop && should_stop()) {
      metrics.flush();
      write_checkpoints(done);
      return result;
    }
  }
  metrics.flush();
  write_checkpoints(cfg.total_steps);
  return result;
}

}  // namespace rsm
