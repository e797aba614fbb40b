#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "radt/common.hpp"
#include "radt/grid_env.hpp"
#include "radt/nn.hpp"

namespace radt::policy {

struct PolicyConfig {
  int layers = 2;
  int heads = 4;
  int dim = 64;
  int context_steps = 50;      // input window C, in timesteps
  bool cross_attention = false;
  int ca_every = 1;            // cross-attention after every ca_every-th SA layer
  double dropout = 0.2;
  int n_actions = envs::kNumActions;
  bool include_rtg = true;     // false for the AD variant (s,a,r triplets)
  int max_timesteps = 0;       // positional table rows; defaults to context_steps
  int max_ctx_steps = 0;       // retrieved-context positional rows; defaults to 2*C
  double state_scale = 1.0;    // divisors applied at the embedding layer
  double rtg_scale = 1.0;

  int tokens_per_step() const { return include_rtg ? 4 : 3; }
  void finalize() {
    if (max_timesteps <= 0) max_timesteps = context_steps;
    if (max_ctx_steps <= 0) max_ctx_steps = 2 * context_steps;
    if (heads <= 0 || dim % heads != 0)
      throw std::runtime_error("policy: hidden dim must be divisible by heads");
    if (context_steps < 1) throw std::runtime_error("policy: context_steps must be >= 1");
  }
  std::string to_json() const;
  static PolicyConfig from_json(const std::string& text);
};

// One tokenized (sub-)trajectory with raw (unnormalized) values. Within a
// timestep the order is (RTG, state, action, reward); a partial last step
// carries only RTG and state (the action is what the model predicts).
struct TokenSeq {
  int steps = 0;
  bool partial_last = false;
  std::vector<float> rtg;                    // [steps]
  std::vector<std::array<float, 2>> state;   // [steps]
  std::vector<int> action;                   // [steps], last entry unused if partial
  std::vector<float> reward;                 // [steps], last entry unused if partial
  std::vector<uint8_t> target;               // per step: predict this action in the loss

  int full_steps() const { return partial_last ? steps - 1 : steps; }
  int token_count(bool include_rtg) const {
    int m = include_rtg ? 4 : 3;
    return m * full_steps() + (partial_last ? (include_rtg ? 2 : 1) : 0);
  }
  void validate() const;
};

// token row of the state of step t within one element's block
inline int state_token_row(int t, bool include_rtg) {
  return (include_rtg ? 4 : 3) * t + (include_rtg ? 1 : 0);
}

// Training view: a len-step window of an episode with per-step RTG; every
// step is a prediction target.
TokenSeq make_window(const std::vector<std::array<int, 2>>& states,
                     const std::vector<int>& actions, const std::vector<int>& rewards,
                     const std::vector<int>& rtg, int start, int len);

// detokenize counterpart for round-trip checks: recovers the raw arrays.
struct RawTrajectory {
  std::vector<std::array<int, 2>> states;
  std::vector<int> actions;
  std::vector<int> rewards;
  std::vector<int> rtg;
};
RawTrajectory detokenize(const TokenSeq& seq);

// ---------------------------------------------------------------------------
// Workspace: per-instance forward/backward caches (one per thread for
// concurrent read-only inference)
// ---------------------------------------------------------------------------

template <typename T>
struct BlockCache {
  Matrix<T> x_in, ln1_out, qkv, sa_probs, sa_out, sa_proj;
  Matrix<T> lnc_out, ca_q, ca_kv, ca_out, ca_proj;
  nn::RaggedProbs<T> ca_probs;
  Matrix<T> res1, res2, ln2_out, fc1, act, fc2;
  std::vector<T> ln1_mean, ln1_rstd, lnc_mean, lnc_rstd, ln2_mean, ln2_rstd;
};

template <typename T>
struct Workspace {
  u64 drop_seed = 0;  // dropout mask stream for this model instance

  Matrix<T> x;       // token embeddings / running hidden states
  Matrix<T> ctx_x;   // embedded retrieved-context tokens
  std::vector<BlockCache<T>> blocks;
  Matrix<T> lnf_out, logits;
  std::vector<T> lnf_mean, lnf_rstd;
  // backward buffers
  Matrix<T> dx, d_a, d_b, d_big, d_kv, d_ctx, d_ctx_tmp, d_logits;
  std::vector<T> scratch;

  // token plan (rebuilt per call)
  int B = 0, S = 0;
  std::vector<uint8_t> valid;
  std::vector<int> timestep;          // -1 for padding
  std::vector<int> tok_kind;          // 0 rtg, 1 state, 2 action, 3 reward, -1 pad
  std::vector<float> tok_val_a;       // rtg value / state x / reward value
  std::vector<float> tok_val_b;       // state y
  std::vector<int> tok_action;        // action id
  std::vector<int> target_rows;
  std::vector<int> target_actions;
  // context plan
  std::vector<int> ctx_off;           // B+1 token offsets
  std::vector<int> ctx_timestep;
  std::vector<int> ctx_kind;
  std::vector<float> ctx_val_a, ctx_val_b;
  std::vector<int> ctx_action;
  std::vector<uint8_t> ctx_has;       // per element
};

// Optional capture of cross-attention maps (head-averaged, element 0).
template <typename T>
struct CaptureCA {
  std::vector<Matrix<T>> layer_probs;  // [query token, ctx token]
};

using KeepMasks = std::vector<const std::vector<uint8_t>*>;

// ---------------------------------------------------------------------------
// The sequence policy: causal transformer with per-modality embeddings and
// optional interleaved cross-attention over a retrieved context.
// ---------------------------------------------------------------------------

template <typename T>
class PolicyModel {
 public:
  PolicyModel(const PolicyConfig& cfg, u64 init_seed);

  const PolicyConfig& config() const { return cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  // Forward over a batch of windows; returns mean cross-entropy over target
  // positions. ctx[b] may be null (empty context -> cross-attention layers
  // reduce to the identity). When backward is set, gradients are accumulated
  // into the parameter store.
  double forward_loss(const std::vector<const TokenSeq*>& batch,
                      const std::vector<const TokenSeq*>& ctx, bool training,
                      u64 dropout_step, bool backward, Workspace<T>& ws,
                      Matrix<T>* logits_out = nullptr) const;

  // Inference: logits for the action at the last state token of `seq`.
  void logits_last(const TokenSeq& seq, const TokenSeq* ctx, std::vector<T>& out,
                   Workspace<T>& ws, CaptureCA<T>* capture = nullptr) const;

  // Final hidden states (post final LayerNorm) for every token of one
  // sequence; `keep` optionally drops tokens (query dropout) from attention.
  void hidden_states(const TokenSeq& seq, const std::vector<uint8_t>* keep,
                     Matrix<T>& out, Workspace<T>& ws) const;

  // Batched embedding-model path: mean of final hidden states over valid
  // state-token positions per element -> keys[B, dim].
  void embed_states_mean(const std::vector<const TokenSeq*>& batch,
                         const KeepMasks* keeps, Matrix<T>& keys, Workspace<T>& ws) const;

  u64 param_digest() const { return params_.value_digest(); }

 private:
  void build_plan(const std::vector<const TokenSeq*>& batch,
                  const std::vector<const TokenSeq*>& ctx, const KeepMasks* keeps,
                  Workspace<T>& ws) const;
  void embed_tokens(Workspace<T>& ws, bool training, u64 step) const;
  void embed_ctx(Workspace<T>& ws, bool training, u64 step) const;
  void run_blocks(Workspace<T>& ws, bool training, u64 step, CaptureCA<T>* capture) const;
  void backward_blocks(Workspace<T>& ws, bool training, u64 step) const;
  void embed_backward(Workspace<T>& ws) const;

  PolicyConfig cfg_;
  nn::ParamStore<T> params_;
  // input modality embeddings
  nn::Dense<T> emb_rtg_, emb_state_, emb_reward_;
  nn::Embedding<T> emb_action_, emb_pos_;
  // retrieved-context modality embeddings (separate tables)
  nn::Dense<T> cemb_rtg_, cemb_state_, cemb_reward_;
  nn::Embedding<T> cemb_action_, cemb_pos_;
  struct BlockParams {
    nn::LayerNorm<T> ln1;
    nn::Dense<T> wqkv, wo;
    bool has_ca = false;
    nn::LayerNorm<T> lnc;
    nn::Dense<T> wq, wkv, wco;
    nn::LayerNorm<T> ln2;
    nn::Dense<T> fc1, fc2;
  };
  std::vector<BlockParams> blocks_;
  nn::LayerNorm<T> lnf_;
  nn::Dense<T> head_;
};

using PolicyModelF = PolicyModel<float>;
using PolicyModelD = PolicyModel<double>;

// ---------------------------------------------------------------------------
// Decoding and RTG targets
// ---------------------------------------------------------------------------

enum class DecodeMode { sample, argmax };

DecodeMode decode_mode_from_string(const std::string& s);
std::string to_string(DecodeMode m);

int select_action(std::span<const float> logits, Rng& rng,
                  DecodeMode mode = DecodeMode::sample, double temperature = 1.0);

// Target-return distribution per grid size; unknown sizes require an
// explicit override.
double sample_target_return(envs::TaskKind kind, int width, int height,
                            const std::optional<std::pair<double, double>>& override_ms,
                            Rng& rng);

// Uniformly sample an AD training pair: (episode i, episode i+K).
std::pair<int, int> ad_build_pair(int n_episodes, int k, Rng& rng);

}  // namespace radt::policy

#include "radt/policy_model.ipp"
