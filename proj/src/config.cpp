#include "rsm/config.hpp"

#include <fstream>
#include <sstream>

namespace rsm {

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r");
  std::size_t e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? "" : s.substr(b, e - b + 1);
}

}  // namespace

KeyValues KeyValues::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw io_error("cannot open config file " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_text(buffer.str(), path);
}

KeyValues KeyValues::parse_text(const std::string& text, const std::string& origin) {
  KeyValues kv;
  kv.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      kv.problems_.push_back(origin + ":" + std::to_string(line_no) +
                             ": expected 'key = value'");
      continue;
    }
    Entry entry;
    entry.key = trim(line.substr(0, eq));
    entry.value = trim(line.substr(eq + 1));
    entry.line = line_no;
    if (entry.key.empty()) {
      kv.problems_.push_back(origin + ":" + std::to_string(line_no) + ": empty key");
      continue;
    }
    for (const auto& existing : kv.entries_)
      if (existing.key == entry.key)
        kv.problems_.push_back(origin + ":" + std::to_string(line_no) + ": duplicate key '" +
                               entry.key + "'");
    kv.entries_.push_back(std::move(entry));
  }
  return kv;
}

KeyValues::Entry* KeyValues::lookup(const std::string& key) {
  for (auto& e : entries_)
    if (e.key == key) {
      e.consumed = true;
      return &e;
    }
  return nullptr;
}

bool KeyValues::contains(const std::string& key) const {
  for (const auto& e : entries_)
    if (e.key == key) return true;
  return false;
}

std::string KeyValues::get_string(const std::string& key, const std::string& fallback) {
  Entry* e = lookup(key);
  return e ? e->value : fallback;
}

long long KeyValues::get_int(const std::string& key, long long fallback) {
  Entry* e = lookup(key);
  if (!e) return fallback;
  std::istringstream is(e->value);
  long long v = 0;
  is >> v;
  char leftover;
  if (is.fail() || (is >> leftover)) {
    note_problem(origin_ + ":" + std::to_string(e->line) + ": '" + key +
                 "' expects an integer, got '" + e->value + "'");
    return fallback;
  }
  return v;
}

double KeyValues::get_real(const std::string& key, double fallback) {
  Entry* e = lookup(key);
  if (!e) return fallback;
  std::istringstream is(e->value);
  double v = 0;
  is >> v;
  char leftover;
  if (is.fail() || (is >> leftover)) {
    note_problem(origin_ + ":" + std::to_string(e->line) + ": '" + key +
                 "' expects a number, got '" + e->value + "'");
    return fallback;
  }
  return v;
}

bool KeyValues::get_bool(const std::string& key, bool fallback) {
  Entry* e = lookup(key);
  if (!e) return fallback;
  if (e->value == "true" || e->value == "1") return true;
  if (e->value == "false" || e->value == "0") return false;
  note_problem(origin_ + ":" + std::to_string(e->line) + ": '" + key +
               "' expects true/false, got '" + e->value + "'");
  return fallback;
}

// "50:+8,95:+8" -> [{50, +8}, {95, +8}]; an empty value means no milestones
std::vector<Milestone> KeyValues::get_milestones(const std::string& key) {
  Entry* e = lookup(key);
  std::vector<Milestone> out;
  if (!e || e->value.empty()) return out;
  std::istringstream list(e->value);
  std::string item;
  while (std::getline(list, item, ',')) {
    item = trim(item);
    const std::size_t colon = item.find(':');
    if (colon == std::string::npos) {
      note_problem(origin_ + ":" + std::to_string(e->line) + ": '" + key +
                   "' entries must look like 'percent:+delta'");
      return out;
    }
    Milestone m;
    std::istringstream p(trim(item.substr(0, colon)));
    std::istringstream d(trim(item.substr(colon + 1)));
    p >> m.percent;
    d >> m.delta;
    if (p.fail() || d.fail()) {
      note_problem(origin_ + ":" + std::to_string(e->line) + ": '" + key +
                   "' has a malformed entry '" + item + "'");
      return out;
    }
    out.push_back(m);
  }
  return out;
}

void KeyValues::note_problem(const std::string& message) { problems_.push_back(message); }

void KeyValues::finish() {
  std::vector<std::string> all = problems_;
  for (const auto& e : entries_)
    if (!e.consumed)
      all.push_back(origin_ + ":" + std::to_string(e.line) + ": unknown key '" + e.key + "'");
  if (all.empty()) return;
  std::string msg = "config rejected (" + std::to_string(all.size()) + " problem(s)):";
  for (const auto& p : all) msg += "\n  - " + p;
  throw config_error(msg);
}

ModelConfig model_config_from(KeyValues& kv) {
  ModelConfig cfg;
  cfg.hidden = static_cast<int>(kv.get_int("hidden", cfg.hidden));
  cfg.vocab = static_cast<int>(kv.get_int("vocab", cfg.vocab));
  cfg.seq_len = static_cast<int>(kv.get_int("seq_len", cfg.seq_len));
  cfg.prefix_len = static_cast<int>(kv.get_int("prefix_len", cfg.prefix_len));
  cfg.num_puzzles = static_cast<int>(kv.get_int("num_puzzles", cfg.num_puzzles));
  cfg.blocks = static_cast<int>(kv.get_int("blocks", cfg.blocks));
  cfg.heads = static_cast<int>(kv.get_int("heads", cfg.heads));
  const std::string variant = kv.get_string("block_variant", "mlp_t");
  if (variant == "attention")
    cfg.variant = BlockVariant::attention;
  else if (variant == "mlp_t")
    cfg.variant = BlockVariant::mlp_t;
  else
    kv.note_problem("'block_variant' must be attention or mlp_t, got '" + variant + "'");
  const std::string pos = kv.get_string("pos_encoding", "none");
  if (pos == "rope")
    cfg.pos = PosEncoding::rope;
  else if (pos == "learned")
    cfg.pos = PosEncoding::learned;
  else if (pos == "none")
    cfg.pos = PosEncoding::none;
  else
    kv.note_problem("'pos_encoding' must be rope, learned or none, got '" + pos + "'");
  cfg.ffn_hidden = static_cast<int>(kv.get_int("ffn_hidden", cfg.ffn_hidden));
  cfg.token_ffn_hidden =
      static_cast<int>(kv.get_int("token_ffn_hidden", cfg.token_ffn_hidden));
  cfg.rope_base = kv.get_real("rope_base", cfg.rope_base);
  cfg.norm_eps = kv.get_real("norm_eps", cfg.norm_eps);
  const std::string norm = kv.get_string("norm_placement", "post");
  if (norm == "post")
    cfg.norm_placement = NormPlacement::post;
  else if (norm == "pre")
    cfg.norm_placement = NormPlacement::pre;
  else
    kv.note_problem("'norm_placement' must be post or pre, got '" + norm + "'");
  const std::string state = kv.get_string("state_init", "zeros");
  if (state == "zeros")
    cfg.state_init = StateInit::zeros;
  else if (state == "random")
    cfg.state_init = StateInit::random;
  else
    kv.note_problem("'state_init' must be zeros or random, got '" + state + "'");
  cfg.outer_steps = static_cast<int>(kv.get_int("H0", cfg.outer_steps));
  cfg.inner_steps = static_cast<int>(kv.get_int("L0", cfg.inner_steps));
  cfg.detach_prob = kv.get_real("p_detach", cfg.detach_prob);
  return cfg;
}

TrainConfig train_config_from(KeyValues& kv) {
  TrainConfig cfg;
  cfg.total_steps = kv.get_int("total_steps", cfg.total_steps);
  cfg.batch_size = static_cast<int>(kv.get_int("batch_size", cfg.batch_size));
  cfg.lr_max = kv.get_real("lr_max", cfg.lr_max);
  cfg.lr_min = kv.get_real("lr_min", cfg.lr_min);
  cfg.warmup_steps = kv.get_int("warmup_steps", cfg.warmup_steps);
  cfg.detach_prob = kv.get_real("p_detach", cfg.detach_prob);
  cfg.outer_milestones = kv.get_milestones("H_milestones");
  cfg.inner_milestones = kv.get_milestones("L_milestones");
  cfg.clip_norm = kv.get_real("clip_norm", cfg.clip_norm);
  cfg.ema_decay = kv.get_real("ema_decay", cfg.ema_decay);
  cfg.transition_lr_warmup_steps =
      kv.get_int("transition_lr_warmup_steps", cfg.transition_lr_warmup_steps);
  cfg.optimizer_reset_scale = kv.get_real("optimizer_reset_scale", cfg.optimizer_reset_scale);
  cfg.beta1 = kv.get_real("beta1", cfg.beta1);
  cfg.beta2 = kv.get_real("beta2", cfg.beta2);
  cfg.adam_eps = kv.get_real("adam_eps", cfg.adam_eps);
  cfg.weight_decay = kv.get_real("weight_decay", cfg.weight_decay);
  cfg.puzzle_emb_lr_mult = kv.get_real("puzzle_emb_lr_mult", cfg.puzzle_emb_lr_mult);
  cfg.seed = static_cast<std::uint64_t>(kv.get_int("seed", 0));
  cfg.checkpoint_every = kv.get_int("checkpoint_every", cfg.checkpoint_every);
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  KeyValues kv = KeyValues::parse_file(path);
  RunConfig run;
  run.model = model_config_from(kv);
  run.train = train_config_from(kv);
  // p_detach is shared between the forward pass and the trainer
  run.model.detach_prob = run.train.detach_prob;
  try {
    run.model.validate();
  } catch (const config_error& e) {
    kv.note_problem(e.what());
  }
  try {
    run.train.validate();
  } catch (const config_error& e) {
    kv.note_problem(e.what());
  }
  kv.finish();
  return run;
}

}  // namespace rsm
