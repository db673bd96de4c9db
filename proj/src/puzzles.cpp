#include "rsm/puzzles.hpp"

#include <algorithm>
#include <bit>
#include <numeric>
#include <queue>
#include <utility>

namespace rsm {

namespace {

// Bitmask backtracking solver; bit d set means digit d is taken.
struct SudokuBoard {
  std::array<std::uint8_t, kSudokuCells> grid{};
  std::array<std::uint16_t, 9> rows{}, cols{}, boxes{};

  static int box_of(int cell) { return (cell / 27) * 3 + (cell % 9) / 3; }

  bool load(const std::array<std::uint8_t, kSudokuCells>& cells) {
    grid = cells;
    rows.fill(0);
    cols.fill(0);
    boxes.fill(0);
    for (int i = 0; i < kSudokuCells; ++i) {
      const int d = grid[i];
      if (d == 0) continue;
      const std::uint16_t bit = std::uint16_t(1) << d;
      const int r = i / 9, c = i % 9, b = box_of(i);
      if ((rows[r] | cols[c] | boxes[b]) & bit) return false;
      rows[r] |= bit;
      cols[c] |= bit;
      boxes[b] |= bit;
    }
    return true;
  }

  std::uint16_t candidates(int cell) const {
    const std::uint16_t used =
        rows[cell / 9] | cols[cell % 9] | boxes[box_of(cell)];
    return static_cast<std::uint16_t>(~used & 0x3fe);  // bits 1..9
  }

  void place(int cell, int d) {
    const std::uint16_t bit = std::uint16_t(1) << d;
    grid[cell] = static_cast<std::uint8_t>(d);
    rows[cell / 9] |= bit;
    cols[cell % 9] |= bit;
    boxes[box_of(cell)] |= bit;
  }

  void remove(int cell) {
    const std::uint16_t bit = std::uint16_t(1) << grid[cell];
    grid[cell] = 0;
    rows[cell / 9] &= static_cast<std::uint16_t>(~bit);
    cols[cell % 9] &= static_cast<std::uint16_t>(~bit);
    boxes[box_of(cell)] &= static_cast<std::uint16_t>(~bit);
  }

  // Counts completions up to `limit` with a most-constrained-cell heuristic.
  int count(int limit) {
    int best = -1;
    int best_n = 10;
    for (int i = 0; i < kSudokuCells; ++i) {
      if (grid[i] != 0) continue;
      const int n = std::popcount(static_cast<unsigned>(candidates(i)));
      if (n == 0) return 0;
      if (n < best_n) {
        best_n = n;
        best = i;
        if (n == 1) break;
      }
    }
    if (best == -1) return 1;
    int total = 0;
    std::uint16_t cand = candidates(best);
    while (cand) {
      const int d = std::countr_zero(static_cast<unsigned>(cand));
      cand &= static_cast<std::uint16_t>(cand - 1);
      place(best, d);
      total += count(limit - total);
      remove(best);
      if (total >= limit) return total;
    }
    return total;
  }

  bool fill_random(int cell, Rng& rng) {
    while (cell < kSudokuCells && grid[cell] != 0) ++cell;
    if (cell == kSudokuCells) return true;
    std::vector<int> digits;
    std::uint16_t cand = candidates(cell);
    while (cand) {
      digits.push_back(std::countr_zero(static_cast<unsigned>(cand)));
      cand &= static_cast<std::uint16_t>(cand - 1);
    }
    rng.shuffle(digits);
    for (int d : digits) {
      place(cell, d);
      if (fill_random(cell + 1, rng)) return true;
      remove(cell);
    }
    return false;
  }
};

}  // namespace

SudokuInstance generate_sudoku(Rng& rng, int clue_budget) {
  if (clue_budget < 17 || clue_budget > 81)
    throw config_error("generate_sudoku: clue_budget must be in [17, 81]");
  SudokuBoard board;
  while (true) {
    board.load({});
    if (board.fill_random(0, rng)) break;
  }
  SudokuInstance inst;
  inst.solution = board.grid;
  inst.givens = board.grid;

  std::vector<int> order(kSudokuCells);
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  int clues = kSudokuCells;
  for (int cell : order) {
    if (clues <= clue_budget) break;
    const std::uint8_t saved = inst.givens[cell];
    inst.givens[cell] = 0;
    SudokuBoard probe;
    probe.load(inst.givens);
    if (probe.count(2) == 1) {
      --clues;
    } else {
      inst.givens[cell] = saved;
    }
  }
  return inst;
}

bool verify_sudoku(const std::vector<int>& grid) {
  if (grid.size() != kSudokuCells) return false;
  for (int v : grid)
    if (v < 1 || v > 9) return false;
  for (int g = 0; g < 9; ++g) {
    std::uint16_t row = 0, col = 0, box = 0;
    for (int i = 0; i < 9; ++i) {
      row |= std::uint16_t(1) << grid[g * 9 + i];
      col |= std::uint16_t(1) << grid[i * 9 + g];
      const int br = (g / 3) * 3 + i / 3, bc = (g % 3) * 3 + i % 3;
      box |= std::uint16_t(1) << grid[br * 9 + bc];
    }
    if (row != 0x3fe || col != 0x3fe || box != 0x3fe) return false;
  }
  return true;
}

int count_sudoku_solutions(const std::array<std::uint8_t, kSudokuCells>& givens, int limit) {
  SudokuBoard board;
  if (!board.load(givens)) return 0;
  return board.count(limit);
}

TokenizedExample encode_sudoku(const SudokuInstance& inst, int puzzle_id) {
  TokenizedExample ex;
  ex.puzzle_id = puzzle_id;
  ex.input.reserve(kSudokuCells);
  ex.target.reserve(kSudokuCells);
  for (int i = 0; i < kSudokuCells; ++i) {
    ex.input.push_back(inst.givens[i] == 0 ? 1 : inst.givens[i] + 1);
    ex.target.push_back(inst.solution[i] + 1);
  }
  return ex;
}

std::vector<int> decode_sudoku(const std::vector<int>& tokens) {
  std::vector<int> grid;
  grid.reserve(tokens.size());
  for (int t : tokens) {
    if (t == 1)
      grid.push_back(0);
    else if (t >= 2 && t <= 10)
      grid.push_back(t - 1);
    else
      throw data_error("decode_sudoku: unknown token " + std::to_string(t));
  }
  return grid;
}

bool sudoku_prediction_valid(const std::vector<int>& input_tokens,
                             const std::vector<int>& predicted_tokens) {
  if (input_tokens.size() != kSudokuCells || predicted_tokens.size() != kSudokuCells)
    return false;
  for (int t : predicted_tokens)
    if (t < 2 || t > 10) return false;  // blanks or out-of-alphabet tokens
  std::vector<int> grid = decode_sudoku(predicted_tokens);
  if (!verify_sudoku(grid)) return false;
  for (int i = 0; i < kSudokuCells; ++i)
    if (input_tokens[i] != 1 && predicted_tokens[i] != input_tokens[i]) return false;
  return true;
}

// ---------------------------------------------------------------------------
// maze
// ---------------------------------------------------------------------------

namespace {

// BFS distances from `from`; -1 marks unreachable or wall cells.
std::vector<int> bfs_distances(const MazeInstance& maze, int from) {
  std::vector<int> dist(static_cast<std::size_t>(maze.width) * maze.height, -1);
  std::queue<int> q;
  dist[from] = 0;
  q.push(from);
  const int w = maze.width;
  while (!q.empty()) {
    const int cur = q.front();
    q.pop();
    const int r = cur / w, c = cur % w;
    const int nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
    for (auto& nb : nbrs) {
      if (nb[0] < 0 || nb[0] >= maze.height || nb[1] < 0 || nb[1] >= w) continue;
      const int idx = nb[0] * w + nb[1];
      if (maze.wall[idx] || dist[idx] != -1) continue;
      dist[idx] = dist[cur] + 1;
      q.push(idx);
    }
  }
  return dist;
}

int farthest_open(const std::vector<int>& dist) {
  int best = -1, best_d = -1;
  for (std::size_t i = 0; i < dist.size(); ++i)
    if (dist[i] > best_d) {
      best_d = dist[i];
      best = static_cast<int>(i);
    }
  return best;
}

}  // namespace

MazeInstance generate_maze(Rng& rng, int width, int height) {
  if (width < 5 || height < 5 || width % 2 == 0 || height % 2 == 0)
    throw config_error("generate_maze: width and height must be odd and >= 5");
  MazeInstance maze;
  maze.width = width;
  maze.height = height;
  maze.wall.assign(static_cast<std::size_t>(width) * height, 1);

  // depth-first carve over the odd-coordinate lattice
  const int cw = (width - 1) / 2, ch = (height - 1) / 2;
  std::vector<std::uint8_t> visited(static_cast<std::size_t>(cw) * ch, 0);
  std::vector<std::pair<int, int>> stack;
  auto open_cell = [&](int r, int c) { maze.wall[static_cast<std::size_t>(r) * width + c] = 0; };
  visited[0] = 1;
  open_cell(1, 1);
  stack.emplace_back(0, 0);
  while (!stack.empty()) {
    auto [cr, cc] = stack.back();
    std::vector<int> dirs = {0, 1, 2, 3};
    rng.shuffle(dirs);
    const int dr[4] = {-1, 1, 0, 0};
    const int dc[4] = {0, 0, -1, 1};
    bool advanced = false;
    for (int d : dirs) {
      const int nr = cr + dr[d], nc = cc + dc[d];
      if (nr < 0 || nr >= ch || nc < 0 || nc >= cw) continue;
      if (visited[static_cast<std::size_t>(nr) * cw + nc]) continue;
      visited[static_cast<std::size_t>(nr) * cw + nc] = 1;
      open_cell(2 * nr + 1, 2 * nc + 1);
      open_cell(cr + nr + 1, cc + nc + 1);  // wall midpoint between the two nodes
      stack.emplace_back(nr, nc);
      advanced = true;
      break;
    }
    if (!advanced) stack.pop_back();
  }

  // far-apart endpoints: farthest from a random open cell, then farthest again
  std::vector<int> open_cells;
  for (std::size_t i = 0; i < maze.wall.size(); ++i)
    if (!maze.wall[i]) open_cells.push_back(static_cast<int>(i));
  const int seed_cell = open_cells[static_cast<std::size_t>(rng.below(open_cells.size()))];
  maze.start = farthest_open(bfs_distances(maze, seed_cell));
  std::vector<int> dist = bfs_distances(maze, maze.start);
  maze.goal = farthest_open(dist);

  // shortest path via parent pointers; fixed neighbor order keeps it unique
  std::vector<int> parent(maze.wall.size(), -1);
  std::queue<int> q;
  std::vector<int> d2(maze.wall.size(), -1);
  d2[maze.start] = 0;
  q.push(maze.start);
  while (!q.empty()) {
    const int cur = q.front();
    q.pop();
    if (cur == maze.goal) break;
    const int r = cur / width, c = cur % width;
    const int nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
    for (auto& nb : nbrs) {
      if (nb[0] < 0 || nb[0] >= height || nb[1] < 0 || nb[1] >= width) continue;
      const int idx = nb[0] * width + nb[1];
      if (maze.wall[idx] || d2[idx] != -1) continue;
      d2[idx] = d2[cur] + 1;
      parent[idx] = cur;
      q.push(idx);
    }
  }
  for (int cur = maze.goal; cur != -1; cur = parent[cur]) maze.path.push_back(cur);
  std::reverse(maze.path.begin(), maze.path.end());
  return maze;
}

int maze_bfs_length(const MazeInstance& maze) {
  const std::vector<int> dist = bfs_distances(maze, maze.start);
  return dist[maze.goal] < 0 ? -1 : dist[maze.goal] + 1;  // cells, endpoints included
}

MazeVerdict verify_maze(const MazeInstance& maze, const std::vector<int>& predicted_tokens) {
  if (predicted_tokens.size() != static_cast<std::size_t>(maze.width) * maze.height)
    throw shape_error("verify_maze: prediction has wrong cell count");
  std::vector<std::size_t> path_cells;
  for (std::size_t i = 0; i < predicted_tokens.size(); ++i)
    if (predicted_tokens[i] == kMazePath) path_cells.push_back(i);
  if (path_cells.size() < 2) return MazeVerdict::invalid;

  std::vector<std::uint8_t> on_path(predicted_tokens.size(), 0);
  for (std::size_t i : path_cells) {
    if (maze.wall[i]) return MazeVerdict::invalid;
    on_path[i] = 1;
  }
  if (!on_path[static_cast<std::size_t>(maze.start)] ||
      !on_path[static_cast<std::size_t>(maze.goal)])
    return MazeVerdict::invalid;

  const int w = maze.width;
  auto neighbors_on_path = [&](int idx) {
    std::vector<int> out;
    const int r = idx / w, c = idx % w;
    const int nbrs[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
    for (auto& nb : nbrs) {
      if (nb[0] < 0 || nb[0] >= maze.height || nb[1] < 0 || nb[1] >= w) continue;
      const int i2 = nb[0] * w + nb[1];
      if (on_path[static_cast<std::size_t>(i2)]) out.push_back(i2);
    }
    return out;
  };

  // simple chain: endpoints have one path-neighbor, interior cells two,
  // and a start-to-goal walk covers every marked cell
  for (std::size_t i : path_cells) {
    const std::size_t deg = neighbors_on_path(static_cast<int>(i)).size();
    const bool endpoint =
        static_cast<int>(i) == maze.start || static_cast<int>(i) == maze.goal;
    if (deg != (endpoint ? 1u : 2u)) return MazeVerdict::invalid;
  }
  std::vector<std::uint8_t> seen(predicted_tokens.size(), 0);
  int cur = maze.start;
  std::size_t steps = 1;
  seen[static_cast<std::size_t>(cur)] = 1;
  while (cur != maze.goal) {
    int next = -1;
    for (int nb : neighbors_on_path(cur))
      if (!seen[static_cast<std::size_t>(nb)]) {
        next = nb;
        break;
      }
    if (next == -1) return MazeVerdict::invalid;
    seen[static_cast<std::size_t>(next)] = 1;
    cur = next;
    ++steps;
  }
  if (steps != path_cells.size()) return MazeVerdict::invalid;

  const int shortest = maze_bfs_length(maze);
  return static_cast<int>(path_cells.size()) == shortest ? MazeVerdict::optimal
                                                         : MazeVerdict::valid_path;
}

TokenizedExample encode_maze(const MazeInstance& inst, int puzzle_id) {
  TokenizedExample ex;
  ex.puzzle_id = puzzle_id;
  const std::size_t n = static_cast<std::size_t>(inst.width) * inst.height;
  ex.input.resize(n);
  for (std::size_t i = 0; i < n; ++i) ex.input[i] = inst.wall[i] ? kMazeWall : kMazeOpen;
  ex.input[static_cast<std::size_t>(inst.start)] = kMazeStart;
  ex.input[static_cast<std::size_t>(inst.goal)] = kMazeGoal;
  ex.target = ex.input;
  for (int cell : inst.path) ex.target[static_cast<std::size_t>(cell)] = kMazePath;
  return ex;
}

MazeInstance maze_from_input_tokens(const std::vector<int>& input, int width, int height) {
  if (input.size() != static_cast<std::size_t>(width) * height)
    throw data_error("maze_from_input_tokens: token count does not match dimensions");
  MazeInstance maze;
  maze.width = width;
  maze.height = height;
  maze.wall.assign(input.size(), 0);
  int start = -1, goal = -1;
  for (std::size_t i = 0; i < input.size(); ++i) {
    switch (input[i]) {
      case kMazeWall:
        maze.wall[i] = 1;
        break;
      case kMazeOpen:
        break;
      case kMazeStart:
        if (start != -1) throw data_error("maze input: duplicate start cell");
        start = static_cast<int>(i);
        break;
      case kMazeGoal:
        if (goal != -1) throw data_error("maze input: duplicate goal cell");
        goal = static_cast<int>(i);
        break;
      default:
        throw data_error("maze input: unexpected token " + std::to_string(input[i]));
    }
  }
  if (start == -1 || goal == -1) throw data_error("maze input: missing start or goal");
  maze.start = start;
  maze.goal = goal;
  return maze;
}

}  // namespace rsm
