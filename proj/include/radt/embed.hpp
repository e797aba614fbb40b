#pragma once

#include <memory>
#include <span>

#include "radt/policy.hpp"

namespace radt::embed {

// FH(x) = E^T softmax(beta * E * P * x), with P sampled once from
// N(0, d_in/d_lm) and never updated. Output lives in the convex hull of E's
// rows.
class FrozenHopfield {
 public:
  FrozenHopfield(Matrix<float> embedding_rows, int d_in, float beta, u64 p_seed);

  void project(std::span<const float> x, std::span<float> out) const;
  std::vector<float> project(const std::vector<float>& x) const;

  int input_dim() const { return d_in_; }
  int output_dim() const { return E_.cols; }
  const Matrix<float>& P() const { return P_; }

 private:
  Matrix<float> E_;  // [v, d_lm]
  Matrix<float> P_;  // [d_lm, d_in]
  float beta_;
  int d_in_;
};

// Query/key embedding model g(.): maps a sub-trajectory to a d_r vector by
// running a frozen encoder over its tokens and averaging the hidden states at
// (kept) state-token positions.
class TrajectoryEmbedder {
 public:
  virtual ~TrajectoryEmbedder() = default;
  virtual int dim() const = 0;
  virtual void embed(const policy::TokenSeq& seq, const std::vector<uint8_t>* keep,
                     std::span<float> out) const = 0;
  virtual void embed_batch(const std::vector<const policy::TokenSeq*>& seqs,
                           const policy::KeepMasks* keeps, Matrix<float>& out) const = 0;
  virtual u64 param_digest() const = 0;
};

// Domain-specific variant: a frozen policy model (stage-1 DT) as the encoder.
class DtEmbedder : public TrajectoryEmbedder {
 public:
  explicit DtEmbedder(std::shared_ptr<const policy::PolicyModelF> model);
  static std::unique_ptr<DtEmbedder> from_checkpoint(const std::string& path);

  int dim() const override;
  void embed(const policy::TokenSeq& seq, const std::vector<uint8_t>* keep,
             std::span<float> out) const override;
  void embed_batch(const std::vector<const policy::TokenSeq*>& seqs,
                   const policy::KeepMasks* keeps, Matrix<float>& out) const override;
  u64 param_digest() const override;

 private:
  std::shared_ptr<const policy::PolicyModelF> model_;
};

// Domain-agnostic variant: FrozenHopfield projections of one-hot tokens into
// a frozen randomly-initialized bidirectional encoder. The encoder's token
// table doubles as the FH embedding matrix E; the P matrices are regenerated
// from recorded seeds and never stored.
struct FhEmbedderConfig {
  int vocab = 512;
  int d_lm = 64;
  int layers = 2;
  int heads = 4;
  float beta = 10.0f;
  int max_tokens = 512;   // positional capacity (4 tokens per step)
  int grid_width = 10;
  int grid_height = 10;
  int rtg_bins = 101;     // episode_len + 1
  u64 seed = 0x52414454;  // encoder + P seed, pinned

  std::string to_json() const;
  static FhEmbedderConfig from_json(const std::string& text);
};

class FhEmbedder : public TrajectoryEmbedder {
 public:
  explicit FhEmbedder(const FhEmbedderConfig& cfg);

  int dim() const override;
  void embed(const policy::TokenSeq& seq, const std::vector<uint8_t>* keep,
             std::span<float> out) const override;
  void embed_batch(const std::vector<const policy::TokenSeq*>& seqs,
                   const policy::KeepMasks* keeps, Matrix<float>& out) const override;
  u64 param_digest() const override;

  const FhEmbedderConfig& config() const { return cfg_; }
  const Matrix<float>& embedding_rows() const;  // E
  // hidden states for one sequence (state-token aggregation left to embed)
  void save(const std::string& path) const;
  static std::unique_ptr<FhEmbedder> load(const std::string& path);

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
  FhEmbedderConfig cfg_;
};

// Loads either encoder flavor from a radt-ckpt-1 file: FhEmbedder snapshots
// restore the frozen random encoder; policy checkpoints become DtEmbedders.
std::unique_ptr<TrajectoryEmbedder> load_frozen_encoder(const std::string& path);

// Query-dropout keep mask over the token positions of `seq`; guarantees at
// least one state token survives.
std::vector<uint8_t> make_keep_mask(const policy::TokenSeq& seq, bool include_rtg,
                                    double drop_rate, Rng& rng);

}  // namespace radt::embed
