#include "rsm/dataset.hpp"

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "rsm/puzzles.hpp"

namespace rsm {

using json = nlohmann::ordered_json;

void Dataset::validate() const {
  if (domain != "sudoku" && domain != "maze")
    throw data_error("dataset: unknown domain '" + domain + "'");
  if (vocab <= 0 || seq_len <= 0) throw data_error("dataset: bad vocab or seq_len");
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& ex = examples[i];
    if (ex.input.size() != static_cast<std::size_t>(seq_len) ||
        ex.target.size() != static_cast<std::size_t>(seq_len))
      throw data_error("dataset: example " + std::to_string(i) + " has wrong length");
    for (int t : ex.input)
      if (t < 0 || t >= vocab)
        throw data_error("dataset: example " + std::to_string(i) + " input token out of range");
    for (int t : ex.target)
      if (t < 0 || t >= vocab)
        throw data_error("dataset: example " + std::to_string(i) + " target token out of range");
  }
}

void save_dataset(const std::string& path, const Dataset& dataset) {
  dataset.validate();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path + " for writing");
  json header = {{"format", "rsm-dataset"},
                 {"version", 1},
                 {"domain", dataset.domain},
                 {"vocab", dataset.vocab},
                 {"seq_len", dataset.seq_len}};
  if (dataset.domain == "maze") {
    header["maze_width"] = dataset.maze_width;
    header["maze_height"] = dataset.maze_height;
  }
  out << header.dump() << "\n";
  for (const auto& ex : dataset.examples) {
    json row = {{"domain", dataset.domain},
                {"input", ex.input},
                {"target", ex.target},
                {"puzzle_id", ex.puzzle_id}};
    out << row.dump() << "\n";
  }
  if (!out) throw io_error("failed writing " + path);
}

Dataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  Dataset ds;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw data_error(path + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    json row;
    try {
      row = json::parse(line);
    } catch (const std::exception& e) {
      fail(std::string("invalid JSON: ") + e.what());
    }
    if (line_no == 1) {
      if (!row.contains("format") || row["format"] != "rsm-dataset")
        fail("missing rsm-dataset header");
      if (row.value("version", 0) != 1) fail("unsupported dataset version");
      ds.domain = row.value("domain", "");
      ds.vocab = row.value("vocab", 0);
      ds.seq_len = row.value("seq_len", 0);
      ds.maze_width = row.value("maze_width", 0);
      ds.maze_height = row.value("maze_height", 0);
      continue;
    }
    try {
      TokenizedExample ex;
      ex.input = row.at("input").get<std::vector<int>>();
      ex.target = row.at("target").get<std::vector<int>>();
      ex.puzzle_id = row.value("puzzle_id", 0);
      ds.examples.push_back(std::move(ex));
    } catch (const std::exception& e) {
      fail(std::string("bad example: ") + e.what());
    }
  }
  if (line_no == 0) throw data_error(path + ": empty dataset file");
  ds.validate();
  return ds;
}

Dataset import_sudoku_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  Dataset ds;
  ds.domain = "sudoku";
  ds.vocab = kSudokuVocab;
  ds.seq_len = kSudokuCells;
  std::string line;
  std::size_t line_no = 0;
  auto fail = [&](const std::string& msg) {
    throw data_error(path + ":" + std::to_string(line_no) + ": " + msg);
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    // a leading column-name row is tolerated
    if (line_no == 1 && line.find_first_not_of("0123456789., \t") != std::string::npos)
      continue;
    const std::size_t comma = line.find(',');
    if (comma == std::string::npos) fail("expected 'givens,solution'");
    const std::string givens = line.substr(0, comma);
    const std::string solution = line.substr(comma + 1);
    if (givens.size() != kSudokuCells) fail("givens must be 81 characters");
    if (solution.size() != kSudokuCells) fail("solution must be 81 characters");
    SudokuInstance inst;
    for (int i = 0; i < kSudokuCells; ++i) {
      const char g = givens[static_cast<std::size_t>(i)];
      if (g == '.' || g == '0')
        inst.givens[i] = 0;
      else if (g >= '1' && g <= '9')
        inst.givens[i] = static_cast<std::uint8_t>(g - '0');
      else
        fail("bad givens character");
      const char s = solution[static_cast<std::size_t>(i)];
      if (s >= '1' && s <= '9')
        inst.solution[i] = static_cast<std::uint8_t>(s - '0');
      else
        fail("bad solution character");
      if (inst.givens[i] != 0 && inst.givens[i] != inst.solution[i])
        fail("solution disagrees with givens");
    }
    std::vector<int> grid(inst.solution.begin(), inst.solution.end());
    if (!verify_sudoku(grid)) fail("solution fails the validity check");
    ds.examples.push_back(
        encode_sudoku(inst, static_cast<int>(ds.examples.size())));
  }
  return ds;
}

}  // namespace rsm
