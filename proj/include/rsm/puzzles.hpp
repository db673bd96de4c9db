#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rsm/dataset.hpp"
#include "rsm/rng.hpp"

namespace rsm {

// ---------------------------------------------------------------------------
// sudoku
// ---------------------------------------------------------------------------

// Token layout (vocab 11): 0 pad (unused), 1 blank, 2..10 digits 1..9.
inline constexpr int kSudokuVocab = 11;
inline constexpr int kSudokuCells = 81;

struct SudokuInstance {
  std::array<std::uint8_t, kSudokuCells> givens;    // 0 = blank
  std::array<std::uint8_t, kSudokuCells> solution;  // 1..9
};

// Fill a complete grid, then remove cells in random order while the puzzle
// keeps a unique solution, stopping at clue_budget givens.
SudokuInstance generate_sudoku(Rng& rng, int clue_budget);

// All 27 groups contain each digit exactly once; any 0 fails.
bool verify_sudoku(const std::vector<int>& grid);

// Number of completions of the given grid, counted up to `limit`.
int count_sudoku_solutions(const std::array<std::uint8_t, kSudokuCells>& givens, int limit);

TokenizedExample encode_sudoku(const SudokuInstance& inst, int puzzle_id = 0);
std::vector<int> decode_sudoku(const std::vector<int>& tokens);  // cell values, 0 = blank

// Verifier for decoded rollout outputs: constraints plus agreement with the
// givens encoded in `input_tokens`.
bool sudoku_prediction_valid(const std::vector<int>& input_tokens,
                             const std::vector<int>& predicted_tokens);

// ---------------------------------------------------------------------------
// maze
// ---------------------------------------------------------------------------

// Token layout (vocab 6): 0 pad (unused), 1 wall, 2 open, 3 start, 4 goal,
// 5 path. The target marks every path cell (endpoints included) with 5.
inline constexpr int kMazeVocab = 6;
enum MazeToken : int {
  kMazePad = 0,
  kMazeWall = 1,
  kMazeOpen = 2,
  kMazeStart = 3,
  kMazeGoal = 4,
  kMazePath = 5,
};

struct MazeInstance {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> wall;  // row-major, 1 = wall
  int start = 0;  // row-major cell index
  int goal = 0;
  std::vector<int> path;  // cell indices from start to goal, BFS-shortest

  bool is_wall(int r, int c) const { return wall[static_cast<std::size_t>(r) * width + c] != 0; }
};

// Randomized depth-first carve of a perfect maze; width and height must be
// odd and >= 5. Start/goal are a far-apart open pair; the path is shortest.
MazeInstance generate_maze(Rng& rng, int width, int height);

// Shortest-path lengths (in cells) used by generation and verification.
int maze_bfs_length(const MazeInstance& maze);

enum class MazeVerdict { invalid, valid_path, optimal };

// Extracts path-labeled cells from a predicted token grid and checks they
// form one simple 4-connected chain from start to goal over open cells.
MazeVerdict verify_maze(const MazeInstance& maze, const std::vector<int>& predicted_tokens);

TokenizedExample encode_maze(const MazeInstance& inst, int puzzle_id = 0);

// Reconstructs walls/start/goal from input tokens (the path is absent there).
MazeInstance maze_from_input_tokens(const std::vector<int>& input, int width, int height);

}  // namespace rsm
