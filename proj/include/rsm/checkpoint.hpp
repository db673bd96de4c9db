#pragma once

#include <string>
#include <utility>
#include <vector>

#include "rsm/model.hpp"
#include "rsm/trainer.hpp"

namespace rsm {

// Container format (magic "RSM1"): a UTF-8 key=value header terminated by a
// blank line, then each named tensor as u32 name length, name bytes, u32
// rank, u32 dims, raw little-endian float32 values, in declared order.
struct NamedTensors {
  std::vector<std::pair<std::string, std::string>> header;
  std::vector<std::pair<std::string, Tensor<float>>> tensors;

  const std::string* find(const std::string& key) const;
};

void save_named_tensors(const std::string& path, const NamedTensors& content);
NamedTensors load_named_tensors(const std::string& path);

// Model checkpoints: header carries the model config; tensors are every
// trainable parameter followed by the persistent state buffers.
void save_model_checkpoint(const std::string& path, const ModelConfig& cfg,
                           const Weights<float>& weights);
// Same layout with substituted parameter values (used for EMA snapshots).
void save_model_checkpoint_with_values(const std::string& path, const ModelConfig& cfg,
                                       const Weights<float>& weights,
                                       const std::vector<std::vector<float>>& values);
Model<float> load_model_checkpoint(const std::string& path);
ModelConfig read_checkpoint_config(const std::string& path);

// Optimizer / loop state sidecar for exact resume.
struct TrainState {
  long long step = 0;
  CurriculumState curriculum;
  long long adam_step_count = 0;
};

void save_train_state(const std::string& path, const TrainState& state, AdamW& optimizer,
                      const Weights<float>& weights);
TrainState load_train_state(const std::string& path, AdamW& optimizer,
                            const Weights<float>& weights);

std::string model_config_to_header(const ModelConfig& cfg);
ModelConfig model_config_from_header(
    const std::vector<std::pair<std::string, std::string>>& header);

}  // namespace rsm
