#pragma once

#include <string>
#include <vector>

#include "rsm/tensor.hpp"

namespace rsm {

struct TokenizedExample {
  std::vector<int> input;
  std::vector<int> target;
  int puzzle_id = 0;
};

// JSONL container: a header line describing the token layout, then one
// object per example.
struct Dataset {
  std::string domain;  // "sudoku" | "maze"
  int vocab = 0;
  int seq_len = 0;
  int maze_width = 0;   // maze only
  int maze_height = 0;  // maze only
  std::vector<TokenizedExample> examples;

  void validate() const;
};

void save_dataset(const std::string& path, const Dataset& dataset);
Dataset load_dataset(const std::string& path);

// Rows of "givens,solution", 81 characters each, '0' or '.' for blanks.
Dataset import_sudoku_csv(const std::string& path);

}  // namespace rsm
