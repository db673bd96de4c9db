#include "rsm/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

namespace rsm {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format stores raw little-endian float32");

namespace {

constexpr char kMagic[4] = {'R', 'S', 'M', '1'};

void write_u32(std::ostream& out, std::uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

std::uint32_t read_u32(std::istream& in, const std::string& path) {
  std::uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof(v));
  if (!in) throw io_error(path + ": truncated checkpoint");
  return v;
}

std::string fmt_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

template <typename T>
T parse_num(const std::string& s, const std::string& key) {
  std::istringstream is(s);
  T v{};
  is >> v;
  if (is.fail()) throw data_error("checkpoint header: bad value for " + key);
  return v;
}

}  // namespace

const std::string* NamedTensors::find(const std::string& key) const {
  for (const auto& [k, v] : header)
    if (k == key) return &v;
  return nullptr;
}

void save_named_tensors(const std::string& path, const NamedTensors& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw io_error("cannot open " + path + " for writing");
  out.write(kMagic, 4);
  for (const auto& [k, v] : content.header) out << k << " = " << v << "\n";
  out << "\n";
  for (const auto& [name, tensor] : content.tensors) {
    write_u32(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(out, static_cast<std::uint32_t>(tensor.rank()));
    for (int d : tensor.shape) write_u32(out, static_cast<std::uint32_t>(d));
    out.write(reinterpret_cast<const char*>(tensor.data()),
              static_cast<std::streamsize>(tensor.numel() * sizeof(float)));
  }
  if (!out) throw io_error("failed writing " + path);
}

NamedTensors load_named_tensors(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kMagic, 4) != 0)
    throw data_error(path + ": not an RSM1 checkpoint");
  NamedTensors content;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) break;
    const std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw data_error(path + ": malformed header line");
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    while (!key.empty() && key.back() == ' ') key.pop_back();
    while (!value.empty() && value.front() == ' ') value.erase(value.begin());
    content.header.emplace_back(std::move(key), std::move(value));
  }
  while (in.peek() != EOF) {
    const std::uint32_t name_len = read_u32(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const std::uint32_t rank = read_u32(in, path);
    if (rank > 3) throw data_error(path + ": tensor rank > 3");
    Shape shape;
    for (std::uint32_t i = 0; i < rank; ++i)
      shape.push_back(static_cast<int>(read_u32(in, path)));
    Tensor<float> t = Tensor<float>::zeros(shape);
    in.read(reinterpret_cast<char*>(t.data()),
            static_cast<std::streamsize>(t.numel() * sizeof(float)));
    if (!in) throw io_error(path + ": truncated tensor data");
    content.tensors.emplace_back(std::move(name), std::move(t));
  }
  return content;
}

std::string model_config_to_header(const ModelConfig& cfg) {
  std::ostringstream os;
  os << "hidden = " << cfg.hidden << "\n";
  os << "vocab = " << cfg.vocab << "\n";
  os << "seq_len = " << cfg.seq_len << "\n";
  os << "prefix_len = " << cfg.prefix_len << "\n";
  os << "num_puzzles = " << cfg.num_puzzles << "\n";
  os << "blocks = " << cfg.blocks << "\n";
  os << "heads = " << cfg.heads << "\n";
  os << "block_variant = " << (cfg.variant == BlockVariant::attention ? "attention" : "mlp_t")
     << "\n";
  os << "pos_encoding = "
     << (cfg.pos == PosEncoding::rope ? "rope"
                                      : cfg.pos == PosEncoding::learned ? "learned" : "none")
     << "\n";
  os << "ffn_hidden = " << cfg.ffn_hidden << "\n";
  os << "token_ffn_hidden = " << cfg.token_ffn_hidden << "\n";
  os << "rope_base = " << fmt_real(cfg.rope_base) << "\n";
  os << "norm_eps = " << fmt_real(cfg.norm_eps) << "\n";
  os << "norm_placement = " << (cfg.norm_placement == NormPlacement::post ? "post" : "pre")
     << "\n";
  os << "state_init = " << (cfg.state_init == StateInit::zeros ? "zeros" : "random") << "\n";
  os << "outer_steps = " << cfg.outer_steps << "\n";
  os << "inner_steps = " << cfg.inner_steps << "\n";
  os << "detach_prob = " << fmt_real(cfg.detach_prob) << "\n";
  return os.str();
}

ModelConfig model_config_from_header(
    const std::vector<std::pair<std::string, std::string>>& header) {
  ModelConfig cfg;
  auto get = [&](const std::string& key) -> const std::string& {
    for (const auto& [k, v] : header)
      if (k == key) return v;
    throw data_error("checkpoint header: missing key " + key);
  };
  cfg.hidden = parse_num<int>(get("hidden"), "hidden");
  cfg.vocab = parse_num<int>(get("vocab"), "vocab");
  cfg.seq_len = parse_num<int>(get("seq_len"), "seq_len");
  cfg.prefix_len = parse_num<int>(get("prefix_len"), "prefix_len");
  cfg.num_puzzles = parse_num<int>(get("num_puzzles"), "num_puzzles");
  cfg.blocks = parse_num<int>(get("blocks"), "blocks");
  cfg.heads = parse_num<int>(get("heads"), "heads");
  const std::string variant = get("block_variant");
  if (variant == "attention")
    cfg.variant = BlockVariant::attention;
  else if (variant == "mlp_t")
    cfg.variant = BlockVariant::mlp_t;
  else
    throw data_error("checkpoint header: bad block_variant " + variant);
  const std::string pos = get("pos_encoding");
  if (pos == "rope")
    cfg.pos = PosEncoding::rope;
  else if (pos == "learned")
    cfg.pos = PosEncoding::learned;
  else if (pos == "none")
    cfg.pos = PosEncoding::none;
  else
    throw data_error("checkpoint header: bad pos_encoding " + pos);
  cfg.ffn_hidden = parse_num<int>(get("ffn_hidden"), "ffn_hidden");
  cfg.token_ffn_hidden = parse_num<int>(get("token_ffn_hidden"), "token_ffn_hidden");
  cfg.rope_base = parse_num<double>(get("rope_base"), "rope_base");
  cfg.norm_eps = parse_num<double>(get("norm_eps"), "norm_eps");
  const std::string norm = get("norm_placement");
  if (norm == "post")
    cfg.norm_placement = NormPlacement::post;
  else if (norm == "pre")
    cfg.norm_placement = NormPlacement::pre;
  else
    throw data_error("checkpoint header: bad norm_placement " + norm);
  const std::string state = get("state_init");
  if (state == "zeros")
    cfg.state_init = StateInit::zeros;
  else if (state == "random")
    cfg.state_init = StateInit::random;
  else
    throw data_error("checkpoint header: bad state_init " + state);
  cfg.outer_steps = parse_num<int>(get("outer_steps"), "outer_steps");
  cfg.inner_steps = parse_num<int>(get("inner_steps"), "inner_steps");
  cfg.detach_prob = parse_num<double>(get("detach_prob"), "detach_prob");
  cfg.validate();
  return cfg;
}

namespace {

std::vector<std::pair<std::string, std::string>> header_from_config(const ModelConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> header;
  header.emplace_back("format", "rsm-model");
  std::istringstream is(model_config_to_header(cfg));
  std::string line;
  while (std::getline(is, line)) {
    const std::size_t eq = line.find(" = ");
    header.emplace_back(line.substr(0, eq), line.substr(eq + 3));
  }
  return header;
}

}  // namespace

void save_model_checkpoint(const std::string& path, const ModelConfig& cfg,
                           const Weights<float>& weights) {
  NamedTensors content;
  content.header = header_from_config(cfg);
  for (const auto& p : weights.params) content.tensors.emplace_back(p.name, p.value);
  content.tensors.emplace_back("state_h0", weights.state_h0);
  content.tensors.emplace_back("state_l0", weights.state_l0);
  save_named_tensors(path, content);
}

void save_model_checkpoint_with_values(const std::string& path, const ModelConfig& cfg,
                                       const Weights<float>& weights,
                                       const std::vector<std::vector<float>>& values) {
  if (values.size() != weights.params.size())
    throw usage_error("checkpoint: substituted value count mismatch");
  NamedTensors content;
  content.header = header_from_config(cfg);
  for (std::size_t i = 0; i < weights.params.size(); ++i) {
    Tensor<float> t = Tensor<float>::zeros(weights.params[i].value.shape);
    if (values[i].size() != t.numel())
      throw usage_error("checkpoint: substituted value size mismatch");
    std::copy(values[i].begin(), values[i].end(), t.data());
    content.tensors.emplace_back(weights.params[i].name, std::move(t));
  }
  content.tensors.emplace_back("state_h0", weights.state_h0);
  content.tensors.emplace_back("state_l0", weights.state_l0);
  save_named_tensors(path, content);
}

ModelConfig read_checkpoint_config(const std::string& path) {
  return model_config_from_header(load_named_tensors(path).header);
}

Model<float> load_model_checkpoint(const std::string& path) {
  NamedTensors content = load_named_tensors(path);
  const std::string* format = content.find("format");
  if (!format || *format != "rsm-model")
    throw data_error(path + ": not a model checkpoint");
  ModelConfig cfg = model_config_from_header(content.header);
  Model<float> model(cfg, /*seed=*/0);
  auto& weights = model.weights();
  const std::size_t expected = weights.params.size() + 2;
  if (content.tensors.size() != expected)
    throw data_error(path + ": incompatible checkpoint (tensor count " +
                     std::to_string(content.tensors.size()) + ", expected " +
                     std::to_string(expected) + ")");
  for (std::size_t i = 0; i < weights.params.size(); ++i) {
    auto& [name, tensor] = content.tensors[i];
    if (name != weights.params[i].name || tensor.shape != weights.params[i].value.shape)
      throw data_error(path + ": incompatible checkpoint at tensor '" + name + "'");
    std::copy(tensor.data(), tensor.data() + tensor.numel(),
              weights.params[i].value.data());
  }
  auto check_buffer = [&](std::size_t idx, const char* name, Tensor<float>& dst) {
    auto& [n, tensor] = content.tensors[idx];
    if (n != name || tensor.shape != dst.shape)
      throw data_error(path + ": incompatible checkpoint at tensor '" + std::string(name) + "'");
    std::copy(tensor.data(), tensor.data() + tensor.numel(), dst.data());
  };
  check_buffer(weights.params.size(), "state_h0", weights.state_h0);
  check_buffer(weights.params.size() + 1, "state_l0", weights.state_l0);
  return model;
}

void save_train_state(const std::string& path, const TrainState& state, AdamW& optimizer,
                      const Weights<float>& weights) {
  NamedTensors content;
  content.header.emplace_back("format", "rsm-train-state");
  content.header.emplace_back("step", std::to_string(state.step));
  content.header.emplace_back("adam_step_count", std::to_string(state.adam_step_count));
  content.header.emplace_back("active_outer", std::to_string(state.curriculum.active_outer));
  content.header.emplace_back("active_inner", std::to_string(state.curriculum.active_inner));
  content.header.emplace_back(
      "last_transition_step",
      state.curriculum.last_transition_step
          ? std::to_string(*state.curriculum.last_transition_step)
          : "none");
  auto& m = optimizer.first_moments();
  auto& v = optimizer.second_moments();
  for (std::size_t i = 0; i < weights.params.size(); ++i) {
    Tensor<float> tm = Tensor<float>::zeros(weights.params[i].value.shape);
    Tensor<float> tv = Tensor<float>::zeros(weights.params[i].value.shape);
    std::copy(m[i].begin(), m[i].end(), tm.data());
    std::copy(v[i].begin(), v[i].end(), tv.data());
    content.tensors.emplace_back("adam.m." + weights.params[i].name, std::move(tm));
    content.tensors.emplace_back("adam.v." + weights.params[i].name, std::move(tv));
  }
  save_named_tensors(path, content);
}

TrainState load_train_state(const std::string& path, AdamW& optimizer,
                            const Weights<float>& weights) {
  NamedTensors content = load_named_tensors(path);
  const std::string* format = content.find("format");
  if (!format || *format != "rsm-train-state")
    throw data_error(path + ": not a train-state file");
  TrainState state;
  auto get = [&](const char* key) {
    const std::string* v = content.find(key);
    if (!v) throw data_error(path + ": missing key " + std::string(key));
    return *v;
  };
  state.step = parse_num<long long>(get("step"), "step");
  state.adam_step_count = parse_num<long long>(get("adam_step_count"), "adam_step_count");
  state.curriculum.active_outer = parse_num<int>(get("active_outer"), "active_outer");
  state.curriculum.active_inner = parse_num<int>(get("active_inner"), "active_inner");
  const std::string last = get("last_transition_step");
  if (last != "none")
    state.curriculum.last_transition_step = parse_num<long long>(last, "last_transition_step");
  auto& m = optimizer.first_moments();
  auto& v = optimizer.second_moments();
  if (content.tensors.size() != 2 * weights.params.size())
    throw data_error(path + ": optimizer tensor count mismatch");
  for (std::size_t i = 0; i < weights.params.size(); ++i) {
    auto& [mn, mt] = content.tensors[2 * i];
    auto& [vn, vt] = content.tensors[2 * i + 1];
    if (mn != "adam.m." + weights.params[i].name || vn != "adam.v." + weights.params[i].name ||
        mt.shape != weights.params[i].value.shape || vt.shape != weights.params[i].value.shape)
      throw data_error(path + ": optimizer state does not match parameter " +
                       weights.params[i].name);
    m[i].assign(mt.data(), mt.data() + mt.numel());
    v[i].assign(vt.data(), vt.data() + vt.numel());
  }
  optimizer.set_step_count(state.adam_step_count);
  return state;
}

}  // namespace rsm
