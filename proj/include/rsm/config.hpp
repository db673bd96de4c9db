#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rsm/model.hpp"
#include "rsm/trainer.hpp"

namespace rsm {

// Flat key=value run-config file: '#' comments, blank lines allowed, unknown
// keys rejected. Getters mark keys consumed; finish() throws one config_error
// listing every violation at once.
class KeyValues {
 public:
  static KeyValues parse_file(const std::string& path);
  static KeyValues parse_text(const std::string& text, const std::string& origin);

  bool contains(const std::string& key) const;
  std::string get_string(const std::string& key, const std::string& fallback);
  long long get_int(const std::string& key, long long fallback);
  double get_real(const std::string& key, double fallback);
  bool get_bool(const std::string& key, bool fallback);
  std::vector<Milestone> get_milestones(const std::string& key);

  void note_problem(const std::string& message);
  void finish();  // throws config_error if any problem or unconsumed key remains

 private:
  struct Entry {
    std::string key, value;
    std::size_t line = 0;
    bool consumed = false;
  };
  std::string origin_;
  std::vector<Entry> entries_;
  std::vector<std::string> problems_;

  Entry* lookup(const std::string& key);
};

// Reads the model.* and train.* key groups out of one run config.
ModelConfig model_config_from(KeyValues& kv);
TrainConfig train_config_from(KeyValues& kv);

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};

RunConfig load_run_config(const std::string& path);

}  // namespace rsm
