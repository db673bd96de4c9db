#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "rsm/ops.hpp"
#include "rsm/rng.hpp"
#include "rsm/tensor.hpp"

namespace rsm {

enum class BlockVariant { attention, mlp_t };
enum class PosEncoding { rope, learned, none };
enum class NormPlacement { post, pre };
enum class StateInit { zeros, random };

// Round the 8/3 gated-ffn expansion up to a multiple of 8.
inline int default_ffn_width(int dim) {
  if (dim <= 0) return 0;
  const int raw = (8 * dim + 2) / 3;
  return ((raw + 7) / 8) * 8;
}

struct ModelConfig {
  int hidden = 64;
  int vocab = 16;
  int seq_len = 16;
  int prefix_len = 0;    // puzzle-embedding prefix; 0 disables
  int num_puzzles = 0;   // rows in the puzzle table (required when prefix_len > 0)
  int blocks = 2;        // stacked residual blocks per transition application
  int heads = 4;         // attention variant only
  BlockVariant variant = BlockVariant::mlp_t;
  PosEncoding pos = PosEncoding::none;
  int ffn_hidden = 0;        // 0 -> 8/3 rule
  int token_ffn_hidden = 0;  // 0 -> 8/3 rule over the token axis
  double rope_base = 10000.0;
  double norm_eps = 1e-6;
  NormPlacement norm_placement = NormPlacement::post;
  StateInit state_init = StateInit::zeros;
  int outer_steps = 2;      // base outer depth H0
  int inner_steps = 2;      // base inner depth L0
  double detach_prob = 1.0; // probability the penultimate outer step stays detached

  int s_tot() const { return prefix_len + seq_len; }
  int ffn_width() const { return ffn_hidden > 0 ? ffn_hidden : default_ffn_width(hidden); }
  int token_ffn_width() const {
    return token_ffn_hidden > 0 ? token_ffn_hidden : default_ffn_width(s_tot());
  }

  void validate() const {
    if (hidden < 0 || vocab < 0 || seq_len < 0 || prefix_len < 0 || blocks < 0)
      throw config_error("model: negative dimension");
    if (variant == BlockVariant::attention && heads > 0 && hidden % heads != 0)
      throw config_error("model: hidden " + std::to_string(hidden) +
                         " not divisible by heads " + std::to_string(heads));
    if (variant == BlockVariant::attention && heads <= 0)
      throw config_error("model: attention variant needs heads >= 1");
    if (pos == PosEncoding::rope && variant != BlockVariant::attention)
      throw config_error("model: rope only applies to the attention variant");
    if (pos == PosEncoding::rope && heads > 0 && (hidden / heads) % 2 != 0)
      throw config_error("model: rope needs an even head dimension");
    if (prefix_len > 0 && num_puzzles <= 0)
      throw config_error("model: prefix_len > 0 requires num_puzzles >= 1");
    if (outer_steps < 1 || inner_steps < 1)
      throw config_error("model: outer_steps and inner_steps must be >= 1");
    if (detach_prob < 0.0 || detach_prob > 1.0)
      throw config_error("model: detach_prob must be in [0, 1]");
  }
};

template <typename Real>
struct Param {
  std::string name;
  Tensor<Real> value;
  bool sparse_rows = false;  // rows untouched by a batch skip the optimizer
};

// One parameter set regardless of how many times the transition operator is
// applied; the output projection is the token embedding (shared storage).
template <typename Real>
struct Weights {
  std::vector<Param<Real>> params;
  Tensor<Real> state_h0;  // [hidden], persistent, not trained
  Tensor<Real> state_l0;  // [hidden], persistent, not trained

  Tensor<Real>& at(const std::string& name) {
    for (auto& p : params)
      if (p.name == name) return p.value;
    throw usage_error("unknown parameter: " + name);
  }
  const Tensor<Real>& at(const std::string& name) const {
    return const_cast<Weights*>(this)->at(name);
  }
  bool has(const std::string& name) const {
    for (auto& p : params)
      if (p.name == name) return true;
    return false;
  }
};

struct ParamCount {
  long long embeddings = 0;
  long long blocks = 0;
  long long buffers = 0;  // persistent state inits; not trainable
  long long total_trainable() const { return embeddings + blocks; }
};

template <typename Real>
struct LatentPair {
  Tensor<Real> slow;  // z_H: commit / scratchpad state
  Tensor<Real> fast;  // z_L: working computation state
};

// include_prev_H ~ Bernoulli(1 - p_detach)
inline bool sample_include_prev(Rng& rng, double detach_prob) {
  if (detach_prob < 0.0 || detach_prob > 1.0)
    throw config_error("detach_prob must be in [0, 1]");
  return rng.uniform01() < (1.0 - detach_prob);
}

template <typename Real>
struct TrainForward {
  Tensor<Real> logits;      // [B, S, V]
  bool include_prev = false;
  int executed_outer = 0;
  int executed_inner = 0;
  // value snapshots (no gradient path) for replay-style checks
  LatentPair<Real> states_before_penultimate;
  LatentPair<Real> states_before_final;
  LatentPair<Real> final_states;
};

template <typename Real>
struct InferForward {
  Tensor<Real> logits;
  LatentPair<Real> final_states;
};

template <typename Real>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    init_weights(seed);
    init_rope();
  }

  Model(ModelConfig cfg, Weights<Real> weights)
      : cfg_(std::move(cfg)), w_(std::move(weights)) {
    cfg_.validate();
    init_rope();
  }

  const ModelConfig& config() const { return cfg_; }
  ModelConfig& mutable_config() { return cfg_; }
  Weights<Real>& weights() { return w_; }
  const Weights<Real>& weights() const { return w_; }

  // e(x) = concat(puzzle_rows, sqrt(d) * token_rows) [+ learned positions]
  Tensor<Real> embed_input(const std::vector<int>& tokens,
                           const std::vector<int>& puzzle_ids, int batch) const {
    if (static_cast<std::size_t>(batch) * cfg_.seq_len != tokens.size())
      throw shape_error("embed_input: token count does not match batch");
    for (int t : tokens)
      if (t < 0 || t >= cfg_.vocab)
        throw data_error("embed_input: token " + std::to_string(t) + " out of range");
    Tensor<Real> tok =
        gather_rows(w_.at("token_embedding"), tokens)
            .reshaped({batch, cfg_.seq_len, cfg_.hidden});
    Tensor<Real> e = scale(tok, static_cast<Real>(std::sqrt(double(cfg_.hidden))));
    if (cfg_.prefix_len > 0) {
      if (static_cast<std::size_t>(batch) != puzzle_ids.size())
        throw shape_error("embed_input: puzzle id count does not match batch");
      std::vector<int> rows;
      rows.reserve(static_cast<std::size_t>(batch) * cfg_.prefix_len);
      for (int id : puzzle_ids) {
        if (id < 0 || id >= cfg_.num_puzzles)
          throw data_error("embed_input: puzzle id " + std::to_string(id) + " out of range");
        for (int j = 0; j < cfg_.prefix_len; ++j) rows.push_back(id * cfg_.prefix_len + j);
      }
      Tensor<Real> puz = gather_rows(w_.at("puzzle_embedding"), rows)
                             .reshaped({batch, cfg_.prefix_len, cfg_.hidden});
      e = concat_seq(puz, e);
    }
    if (cfg_.pos == PosEncoding::learned)
      e = broadcast_add_seq(e, w_.at("pos_embedding"));
    return e;
  }

  // Broadcast the persistent init buffers over [batch, s_tot]; never on tape.
  LatentPair<Real> init_latents(int batch) const {
    NoGradScope<Real> ng;
    LatentPair<Real> z;
    z.slow = broadcast_state(w_.state_h0, batch);
    z.fast = broadcast_state(w_.state_l0, batch);
    return z;
  }

  // F(state; injection): add the injection, then the shared block stack.
  Tensor<Real> transition(const Tensor<Real>& state, const Tensor<Real>& injection) const {
    Tensor<Real> x = add(state, injection);
    for (int b = 0; b < cfg_.blocks; ++b) x = block_forward(b, x);
    return x;
  }

  // z_L updated `inner` times with the same injection (z_H + e); z_H untouched.
  LatentPair<Real> inner_cycle(const LatentPair<Real>& z, const Tensor<Real>& e,
                               int inner) const {
    if (inner < 1) throw usage_error("inner_cycle: inner must be >= 1");
    LatentPair<Real> out = z;
    Tensor<Real> injection = add(z.slow, e);
    for (int l = 0; l < inner; ++l) out.fast = transition(out.fast, injection);
    return out;
  }

  // z_H updated once from z_L; z_L untouched.
  LatentPair<Real> outer_step(const LatentPair<Real>& z) const {
    LatentPair<Real> out = z;
    out.slow = transition(z.slow, z.fast);
    return out;
  }

  // logits = z_H W_emb^T with puzzle-prefix positions dropped
  Tensor<Real> decode(const Tensor<Real>& z_slow) const {
    Tensor<Real> trimmed =
        cfg_.prefix_len > 0 ? slice_seq(z_slow, cfg_.prefix_len, cfg_.seq_len) : z_slow;
    return matmul_nt(trimmed, w_.at("token_embedding"));
  }

  // Training forward: warm-up steps run outside the tape, the final step (and,
  // with probability 1 - detach_prob, the penultimate step) are recorded.
  // Requested depth is clamped to >= 2.
  TrainForward<Real> forward_train(const std::vector<int>& tokens,
                                   const std::vector<int>& puzzle_ids, int batch,
                                   int outer, int inner, Rng& rng) const {
    const int executed = std::max(2, outer);
    TrainForward<Real> result;
    result.include_prev = sample_include_prev(rng, cfg_.detach_prob);
    result.executed_outer = executed;
    result.executed_inner = inner;

    Tensor<Real> e = embed_input(tokens, puzzle_ids, batch);
    LatentPair<Real> z = init_latents(batch);
    for (int h = 0; h < executed; ++h) {
      const bool record = (h == executed - 1) || (h == executed - 2 && result.include_prev);
      if (h == executed - 2)
        result.states_before_penultimate = snapshot(z);
      if (h == executed - 1) result.states_before_final = snapshot(z);
      if (record) {
        z = outer_step(inner_cycle(z, e, inner));
      } else {
        NoGradScope<Real> ng;
        z = outer_step(inner_cycle(z, e, inner));
      }
      check_finite(z, h);
    }
    result.final_states = snapshot(z);
    result.logits = decode(z.slow);
    return result;
  }

  // Inference forward: no tape at all; optionally decodes after every outer
  // step; can continue from saved latents.
  InferForward<Real> forward_infer(
      const std::vector<int>& tokens, const std::vector<int>& puzzle_ids, int batch,
      int outer, int inner,
      const std::function<void(int, const std::vector<int>&)>& per_step = nullptr,
      const LatentPair<Real>* start = nullptr, int step_offset = 0) const {
    if (outer < 1) throw usage_error("forward_infer: outer must be >= 1");
    NoGradScope<Real> ng;
    Tensor<Real> e = embed_input(tokens, puzzle_ids, batch);
    LatentPair<Real> z = start ? *start : init_latents(batch);
    for (int h = 0; h < outer; ++h) {
      z = outer_step(inner_cycle(z, e, inner));
      check_finite(z, step_offset + h);
      if (per_step) per_step(step_offset + h + 1, argmax_last(decode(z.slow)));
    }
    InferForward<Real> result;
    result.final_states = z;
    result.logits = decode(z.slow);
    return result;
  }

  static ParamCount count_parameters(const ModelConfig& cfg) {
    ParamCount c;
    c.embeddings += static_cast<long long>(cfg.vocab) * cfg.hidden;
    if (cfg.prefix_len > 0)
      c.embeddings += static_cast<long long>(cfg.num_puzzles) * cfg.prefix_len * cfg.hidden;
    if (cfg.pos == PosEncoding::learned)
      c.embeddings += static_cast<long long>(cfg.s_tot()) * cfg.hidden;
    long long per_block = 0;
    if (cfg.variant == BlockVariant::attention) {
      per_block += static_cast<long long>(cfg.hidden) * 3 * cfg.hidden;  // qkv
      per_block += static_cast<long long>(cfg.hidden) * cfg.hidden;     // out
    } else {
      per_block += 3LL * cfg.s_tot() * cfg.token_ffn_width();
    }
    per_block += 3LL * cfg.hidden * cfg.ffn_width();
    per_block += 2LL * cfg.hidden;  // norm gains
    c.blocks = per_block * cfg.blocks;
    c.buffers = 2LL * cfg.hidden;
    return c;
  }

  ParamCount count_parameters() const {
    ParamCount c = count_parameters(cfg_);
    long long actual = 0;
    for (const auto& p : w_.params) actual += static_cast<long long>(p.value.numel());
    if (actual != c.total_trainable())
      throw usage_error("parameter count mismatch between config and weights");
    return c;
  }

  const Tensor<Real>* rope_cos() const {
    return cfg_.pos == PosEncoding::rope ? &rope_cos_ : nullptr;
  }
  const Tensor<Real>* rope_sin() const {
    return cfg_.pos == PosEncoding::rope ? &rope_sin_ : nullptr;
  }

 private:
  ModelConfig cfg_;
  Weights<Real> w_;
  Tensor<Real> rope_cos_, rope_sin_;

  static LatentPair<Real> snapshot(const LatentPair<Real>& z) {
    return {stop_gradient(z.slow), stop_gradient(z.fast)};
  }

  Tensor<Real> broadcast_state(const Tensor<Real>& init, int batch) const {
    Tensor<Real> out = Tensor<Real>::zeros({batch, cfg_.s_tot(), cfg_.hidden});
    const int d = cfg_.hidden;
    const std::size_t rows = out.numel() / static_cast<std::size_t>(d);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(init.data(), d, out.data() + r * d);
    return out;
  }

  void check_finite(const LatentPair<Real>& z, int step) const {
    if (!z.slow.all_finite() || !z.fast.all_finite())
      throw diverged_error("non-finite latent state at outer step " + std::to_string(step),
                           step);
  }

  Tensor<Real> block_forward(int b, const Tensor<Real>& x) const {
    const std::string pre = "block" + std::to_string(b) + ".";
    const auto& g1 = w_.at(pre + "norm1");
    const auto& g2 = w_.at(pre + "norm2");
    auto sublayer = [&](const Tensor<Real>& in) {
      if (cfg_.variant == BlockVariant::attention)
        return attention(in, w_.at(pre + "attn_qkv"), w_.at(pre + "attn_out"), cfg_.heads,
                         rope_cos(), rope_sin());
      return token_mix_ffn(in, w_.at(pre + "mix_gate"), w_.at(pre + "mix_up"),
                           w_.at(pre + "mix_down"));
    };
    auto ffn = [&](const Tensor<Real>& in) {
      return swiglu_ffn(in, w_.at(pre + "ffn_gate"), w_.at(pre + "ffn_up"),
                        w_.at(pre + "ffn_down"));
    };
    Tensor<Real> y;
    if (cfg_.norm_placement == NormPlacement::post) {
      y = rms_norm(add(x, sublayer(x)), g1, cfg_.norm_eps);
      y = rms_norm(add(y, ffn(y)), g2, cfg_.norm_eps);
    } else {
      y = add(x, sublayer(rms_norm(x, g1, cfg_.norm_eps)));
      y = add(y, ffn(rms_norm(y, g2, cfg_.norm_eps)));
    }
    return y;
  }

  void init_rope() {
    if (cfg_.pos == PosEncoding::rope) {
      auto tables = rope_tables<Real>(cfg_.s_tot(), cfg_.hidden / cfg_.heads, cfg_.rope_base);
      rope_cos_ = tables.first;
      rope_sin_ = tables.second;
    }
  }

  Tensor<Real> init_matrix(int rows, int cols, Rng& rng) {
    Tensor<Real> t = Tensor<Real>::zeros({rows, cols});
    const double std = 1.0 / std::sqrt(static_cast<double>(rows));
    for (std::size_t i = 0; i < t.numel(); ++i)
      t.at(i) = static_cast<Real>(rng.normal(0.0, std));
    t.ensure_grad();
    return t;
  }

  void add_param(const std::string& name, Tensor<Real> value, bool sparse = false) {
    w_.params.push_back({name, std::move(value), sparse});
  }

  void init_weights(std::uint64_t seed) {
    Rng rng(mix64(seed, 0x696e6974ull));  // "init" stream
    {
      Tensor<Real> emb = Tensor<Real>::zeros({cfg_.vocab, cfg_.hidden});
      const double std = cfg_.hidden > 0 ? 1.0 / std::sqrt(double(cfg_.hidden)) : 0.0;
      for (std::size_t i = 0; i < emb.numel(); ++i)
        emb.at(i) = static_cast<Real>(rng.normal(0.0, std));
      emb.ensure_grad();
      add_param("token_embedding", std::move(emb));
    }
    if (cfg_.prefix_len > 0) {
      Tensor<Real> puz =
          Tensor<Real>::zeros({cfg_.num_puzzles * cfg_.prefix_len, cfg_.hidden});
      puz.ensure_grad();  // zero rows until first touched by a batch
      add_param("puzzle_embedding", std::move(puz), /*sparse=*/true);
    }
    if (cfg_.pos == PosEncoding::learned) {
      Tensor<Real> pos = Tensor<Real>::zeros({cfg_.s_tot(), cfg_.hidden});
      for (std::size_t i = 0; i < pos.numel(); ++i)
        pos.at(i) = static_cast<Real>(rng.normal(0.0, 0.02));
      pos.ensure_grad();
      add_param("pos_embedding", std::move(pos));
    }
    for (int b = 0; b < cfg_.blocks; ++b) {
      const std::string pre = "block" + std::to_string(b) + ".";
      if (cfg_.variant == BlockVariant::attention) {
        add_param(pre + "attn_qkv", init_matrix(cfg_.hidden, 3 * cfg_.hidden, rng));
        add_param(pre + "attn_out", init_matrix(cfg_.hidden, cfg_.hidden, rng));
      } else {
        add_param(pre + "mix_gate", init_matrix(cfg_.s_tot(), cfg_.token_ffn_width(), rng));
        add_param(pre + "mix_up", init_matrix(cfg_.s_tot(), cfg_.token_ffn_width(), rng));
        add_param(pre + "mix_down", init_matrix(cfg_.token_ffn_width(), cfg_.s_tot(), rng));
      }
      add_param(pre + "ffn_gate", init_matrix(cfg_.hidden, cfg_.ffn_width(), rng));
      add_param(pre + "ffn_up", init_matrix(cfg_.hidden, cfg_.ffn_width(), rng));
      add_param(pre + "ffn_down", init_matrix(cfg_.ffn_width(), cfg_.hidden, rng));
      Tensor<Real> g1 = Tensor<Real>::full({cfg_.hidden}, Real(1));
      g1.ensure_grad();
      add_param(pre + "norm1", std::move(g1));
      Tensor<Real> g2 = Tensor<Real>::full({cfg_.hidden}, Real(1));
      g2.ensure_grad();
      add_param(pre + "norm2", std::move(g2));
    }
    w_.state_h0 = Tensor<Real>::zeros({cfg_.hidden});
    w_.state_l0 = Tensor<Real>::zeros({cfg_.hidden});
    if (cfg_.state_init == StateInit::random) {
      for (int i = 0; i < cfg_.hidden; ++i) {
        w_.state_h0.at(static_cast<std::size_t>(i)) = static_cast<Real>(rng.normal(0.0, 0.02));
        w_.state_l0.at(static_cast<std::size_t>(i)) = static_cast<Real>(rng.normal(0.0, 0.02));
      }
    }
  }
};

}  // namespace rsm
