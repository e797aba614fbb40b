#pragma once

#include <span>
#include <string>
#include <vector>

#include "radt/common.hpp"
#include "radt/dataset.hpp"
#include "radt/embed.hpp"
#include "radt/policy.hpp"

namespace radt::memory {

inline constexpr const char* kIndexFormat = "radt-idx-1";

// Value payload of one index entry: the key's sub-trajectory (past half) plus
// its continuation (future half), sliced from the source episode.
struct SubTrajectory {
  std::vector<std::array<int, 2>> states;
  std::vector<int> actions;
  std::vector<int> rewards;
  std::vector<int> rtg;  // per-step returns-to-go of the source episode
  int past_len = 0;
  int future_len = 0;

  int length() const { return past_len + future_len; }
  policy::TokenSeq to_token_seq() const;   // full quadruples, no targets
  policy::TokenSeq past_token_seq() const;  // key half only
};

struct IndexEntry {
  std::vector<float> key;
  SubTrajectory value;
  int task_id = 0;
  int episode_id = 0;
  int episode_return = 0;
  int offset = 0;  // window start within the source episode
};

struct RetrievalConfig {
  int context_steps = 50;   // C, chunk and query window length
  int top_l = 50;           // candidates before reweighting
  int top_k = 1;            // selected after reweighting
  double alpha = 1.0;       // utility weight
  double cutoff = 0.98;     // training-only similarity cut-off (m = 2l fetch)
  double query_dropout = 0.2;
  double blend = 0.0;       // blending rate; q' = (1-blend)*q + blend*random key
  int min_len = 10;         // short-query fallback threshold
  int cadence = 1;          // env steps between retrievals at evaluation
  bool dedup = true;
};

enum class UtilityMode { task, ret, position };

UtilityMode utility_mode_from_string(const std::string& s);
std::string to_string(UtilityMode m);

struct Candidate {
  int entry = -1;
  double sim = 0.0;
};

struct Selected {
  int entry = -1;
  double score = 0.0;
  double sim = 0.0;
};

// double-accumulating dot over f32, shared by the index scan, dedup, and the
// test oracles so that scores are bit-identical everywhere
double dot_f64(std::span<const float> a, std::span<const float> b);
double cosine_similarity(std::span<const float> a, std::span<const float> b);

class VectorIndex {
 public:
  explicit VectorIndex(int dim) : dim_(dim) {}

  int dim() const { return dim_; }
  std::size_t size() const { return entries_.size(); }
  const IndexEntry& entry(int i) const { return entries_[i]; }
  const std::vector<IndexEntry>& entries() const { return entries_; }

  void append(IndexEntry e);

  // Exact top-m by cosine similarity with the query's own episode excluded.
  // Ties break by (higher episode_return, lower episode_id, lower offset).
  std::vector<Candidate> search_topl(std::span<const float> q, int m, int exclude_task,
                                     int exclude_episode) const;

  // Greedy in storage order: drop an entry when a retained earlier entry
  // from a different episode is more similar than `threshold`. Idempotent.
  void deduplicate(double threshold);

  void save(const std::string& path) const;
  static VectorIndex load(const std::string& path);

 private:
  int dim_;
  std::vector<IndexEntry> entries_;
  std::vector<double> norms_;
};

// Training-only regularizer: keep the top m=2l fetch, drop candidates with
// similarity above the threshold, truncate to l.
std::vector<Candidate> similarity_cutoff(std::vector<Candidate> cands, double threshold,
                                         int l);

// s_ret = minmax(sim) + alpha * s_u over the candidate set; s_u is the
// task-match indicator (training), min-max normalized episode return
// (inference), or the earlier-episode indicator (position ablation).
// Degenerate normalizations (all equal) map to 0.5.
std::vector<Selected> reweight_select(const VectorIndex& index,
                                      const std::vector<Candidate>& cands,
                                      UtilityMode mode, int query_task,
                                      int query_episode, double alpha, int k);

// Query blending: with rate in (0,1], replaces q by
// (1-rate)*q + rate*(uniformly drawn stored key). Identity outside training.
std::vector<float> regularize_query(std::vector<float> q, bool training,
                                    const RetrievalConfig& cfg, const VectorIndex& index,
                                    Rng& rng);

// Chunk an episode at offsets {0, C, 2C, ...}: per chunk the key covers
// [o, o+C) and the value [o, o+2C), clipped to the episode bounds.
std::vector<SubTrajectory> chunk_episode(const std::vector<std::array<int, 2>>& states,
                                         const std::vector<int>& actions,
                                         const std::vector<int>& rewards, int C,
                                         std::vector<int>* offsets = nullptr);

// Embeds chunk keys with g and appends entries for one episode.
void add_episode(VectorIndex& index, const embed::TrajectoryEmbedder& g, int task_id,
                 int episode_id, const std::vector<std::array<int, 2>>& states,
                 const std::vector<int>& actions, const std::vector<int>& rewards, int C);

// Index over a full dataset (keys embedded in batches); dedup not applied.
VectorIndex build_index(const datagen::Dataset& ds, const embed::TrajectoryEmbedder& g,
                        int C);

}  // namespace radt::memory
