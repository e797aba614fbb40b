#include "radt/memory.hpp"

#include <algorithm>
#include <fstream>

#include <nlohmann/json.hpp>

namespace radt::memory {

using nlohmann::json;
using policy::TokenSeq;

UtilityMode utility_mode_from_string(const std::string& s) {
  if (s == "task") return UtilityMode::task;
  if (s == "return") return UtilityMode::ret;
  if (s == "position") return UtilityMode::position;
  throw std::runtime_error("unknown utility mode: " + s);
}

std::string to_string(UtilityMode m) {
  switch (m) {
    case UtilityMode::task: return "task";
    case UtilityMode::ret: return "return";
    default: return "position";
  }
}

double dot_f64(std::span<const float> a, std::span<const float> b) {
  double s = 0.0;
#pragma omp simd reduction(+ : s)
  for (std::size_t i = 0; i < a.size(); ++i)
    s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  double na = std::sqrt(dot_f64(a, a));
  double nb = std::sqrt(dot_f64(b, b));
  if (na <= 0.0 || nb <= 0.0) return 0.0;
  return dot_f64(a, b) / (na * nb);
}

namespace {

TokenSeq slice_to_seq(const SubTrajectory& v, int from, int len) {
  TokenSeq s;
  s.steps = len;
  s.rtg.resize(len);
  s.state.resize(len);
  s.action.resize(len);
  s.reward.resize(len);
  s.target.assign(len, 0);
  for (int t = 0; t < len; ++t) {
    s.rtg[t] = static_cast<float>(v.rtg[from + t]);
    s.state[t] = {static_cast<float>(v.states[from + t][0]),
                  static_cast<float>(v.states[from + t][1])};
    s.action[t] = v.actions[from + t];
    s.reward[t] = static_cast<float>(v.rewards[from + t]);
  }
  return s;
}

// ranks a before b: higher sim, then higher return, lower episode, lower
// offset, lower storage position
struct CandidateRank {
  const std::vector<IndexEntry>& entries;
  bool operator()(const Candidate& a, const Candidate& b) const {
    if (a.sim != b.sim) return a.sim > b.sim;
    const IndexEntry& ea = entries[a.entry];
    const IndexEntry& eb = entries[b.entry];
    if (ea.episode_return != eb.episode_return) return ea.episode_return > eb.episode_return;
    if (ea.episode_id != eb.episode_id) return ea.episode_id < eb.episode_id;
    if (ea.offset != eb.offset) return ea.offset < eb.offset;
    return a.entry < b.entry;
  }
};

}  // namespace

TokenSeq SubTrajectory::to_token_seq() const { return slice_to_seq(*this, 0, length()); }

TokenSeq SubTrajectory::past_token_seq() const { return slice_to_seq(*this, 0, past_len); }

void VectorIndex::append(IndexEntry e) {
  if (static_cast<int>(e.key.size()) != dim_)
    throw std::runtime_error("index: key dimension mismatch");
  norms_.push_back(std::sqrt(dot_f64(e.key, e.key)));
  entries_.push_back(std::move(e));
}

std::vector<Candidate> VectorIndex::search_topl(std::span<const float> q, int m,
                                                int exclude_task,
                                                int exclude_episode) const {
  const int n = static_cast<int>(entries_.size());
  std::vector<double> sims(n);
  const double qn = std::sqrt(dot_f64(q, q));
#pragma omp parallel for schedule(static)
  for (int i = 0; i < n; ++i) {
    double denom = qn * norms_[i];
    sims[i] = denom > 0.0 ? dot_f64(q, entries_[i].key) / denom : 0.0;
  }
  std::vector<Candidate> cands;
  cands.reserve(n);
  for (int i = 0; i < n; ++i) {
    const IndexEntry& e = entries_[i];
    if (e.task_id == exclude_task && e.episode_id == exclude_episode) continue;
    cands.push_back({i, sims[i]});
  }
  const std::size_t keep = std::min<std::size_t>(cands.size(), static_cast<std::size_t>(m));
  std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(),
                    CandidateRank{entries_});
  cands.resize(keep);
  return cands;
}

void VectorIndex::deduplicate(double threshold) {
  std::vector<int> retained;
  retained.reserve(entries_.size());
  for (int i = 0; i < static_cast<int>(entries_.size()); ++i) {
    const IndexEntry& e = entries_[i];
    bool drop = false;
#pragma omp parallel for schedule(static) reduction(|| : drop)
    for (std::size_t r = 0; r < retained.size(); ++r) {
      const IndexEntry& o = entries_[retained[r]];
      if (o.task_id == e.task_id && o.episode_id == e.episode_id) continue;
      double denom = norms_[i] * norms_[retained[r]];
      if (denom <= 0.0) continue;
      if (dot_f64(e.key, o.key) / denom > threshold) drop = true;
    }
    if (!drop) retained.push_back(i);
  }
  if (retained.size() == entries_.size()) return;
  std::vector<IndexEntry> kept;
  std::vector<double> knorms;
  kept.reserve(retained.size());
  knorms.reserve(retained.size());
  for (int i : retained) {
    kept.push_back(std::move(entries_[i]));
    knorms.push_back(norms_[i]);
  }
  entries_ = std::move(kept);
  norms_ = std::move(knorms);
}

std::vector<Candidate> similarity_cutoff(std::vector<Candidate> cands, double threshold,
                                         int l) {
  std::erase_if(cands, [&](const Candidate& c) { return c.sim > threshold; });
  if (static_cast<int>(cands.size()) > l) cands.resize(l);
  return cands;
}

namespace {

// min-max over the candidate set; all-equal collapses to 0.5
void minmax_normalize(std::vector<double>& v) {
  if (v.empty()) return;
  auto [mn, mx] = std::minmax_element(v.begin(), v.end());
  double lo = *mn, hi = *mx;
  if (hi - lo <= 0.0) {
    std::fill(v.begin(), v.end(), 0.5);
    return;
  }
  for (auto& x : v) x = (x - lo) / (hi - lo);
}

}  // namespace

std::vector<Selected> reweight_select(const VectorIndex& index,
                                      const std::vector<Candidate>& cands,
                                      UtilityMode mode, int query_task, int query_episode,
                                      double alpha, int k) {
  if (cands.empty()) return {};
  const int n = static_cast<int>(cands.size());
  std::vector<double> rel(n), util(n);
  for (int i = 0; i < n; ++i) rel[i] = cands[i].sim;
  minmax_normalize(rel);
  for (int i = 0; i < n; ++i) {
    const IndexEntry& e = index.entry(cands[i].entry);
    switch (mode) {
      case UtilityMode::task:
        util[i] = e.task_id == query_task ? 1.0 : 0.0;
        break;
      case UtilityMode::ret:
        util[i] = e.episode_return;
        break;
      case UtilityMode::position:
        util[i] = (e.task_id == query_task && e.episode_id < query_episode) ? 1.0 : 0.0;
        break;
    }
  }
  if (mode == UtilityMode::ret) minmax_normalize(util);

  std::vector<Selected> scored(n);
  for (int i = 0; i < n; ++i)
    scored[i] = {cands[i].entry, rel[i] + alpha * util[i], cands[i].sim};
  auto rank = [&](const Selected& a, const Selected& b) {
    if (a.score != b.score) return a.score > b.score;
    const IndexEntry& ea = index.entry(a.entry);
    const IndexEntry& eb = index.entry(b.entry);
    if (ea.episode_return != eb.episode_return) return ea.episode_return > eb.episode_return;
    if (ea.episode_id != eb.episode_id) return ea.episode_id < eb.episode_id;
    if (ea.offset != eb.offset) return ea.offset < eb.offset;
    return a.entry < b.entry;
  };
  const std::size_t keep = std::min<std::size_t>(n, static_cast<std::size_t>(k));
  std::partial_sort(scored.begin(), scored.begin() + keep, scored.end(), rank);
  scored.resize(keep);
  return scored;
}

std::vector<float> regularize_query(std::vector<float> q, bool training,
                                    const RetrievalConfig& cfg, const VectorIndex& index,
                                    Rng& rng) {
  if (!training || cfg.blend <= 0.0 || index.size() == 0) return q;
  const auto& pick = index.entry(static_cast<int>(rng.uniform_int(index.size()))).key;
  const float a = static_cast<float>(1.0 - cfg.blend);
  const float b = static_cast<float>(cfg.blend);
  for (std::size_t i = 0; i < q.size(); ++i) q[i] = a * q[i] + b * pick[i];
  return q;
}

std::vector<SubTrajectory> chunk_episode(const std::vector<std::array<int, 2>>& states,
                                         const std::vector<int>& actions,
                                         const std::vector<int>& rewards, int C,
                                         std::vector<int>* offsets) {
  const int H = static_cast<int>(actions.size());
  if (H < 1) throw std::runtime_error("chunk_episode: empty episode");
  std::vector<int> rtg = datagen::compute_rtg(rewards);
  std::vector<SubTrajectory> out;
  if (offsets) offsets->clear();
  for (int o = 0; o < H; o += C) {
    SubTrajectory v;
    int end = std::min(o + 2 * C, H);
    v.past_len = std::min(C, H - o);
    v.future_len = end - o - v.past_len;
    for (int t = o; t < end; ++t) {
      v.states.push_back(states[t]);
      v.actions.push_back(actions[t]);
      v.rewards.push_back(rewards[t]);
      v.rtg.push_back(rtg[t]);
    }
    out.push_back(std::move(v));
    if (offsets) offsets->push_back(o);
  }
  return out;
}

void add_episode(VectorIndex& index, const embed::TrajectoryEmbedder& g, int task_id,
                 int episode_id, const std::vector<std::array<int, 2>>& states,
                 const std::vector<int>& actions, const std::vector<int>& rewards, int C) {
  std::vector<int> offsets;
  auto chunks = chunk_episode(states, actions, rewards, C, &offsets);
  int episode_return = 0;
  for (int r : rewards) episode_return += r;
  std::vector<TokenSeq> key_seqs;
  key_seqs.reserve(chunks.size());
  for (const auto& v : chunks) key_seqs.push_back(v.past_token_seq());
  std::vector<const TokenSeq*> ptrs;
  for (const auto& s : key_seqs) ptrs.push_back(&s);
  Matrix<float> keys;
  g.embed_batch(ptrs, nullptr, keys);
  for (std::size_t i = 0; i < chunks.size(); ++i) {
    IndexEntry e;
    e.key.assign(keys.row(static_cast<int>(i)), keys.row(static_cast<int>(i)) + keys.cols);
    e.value = std::move(chunks[i]);
    e.task_id = task_id;
    e.episode_id = episode_id;
    e.episode_return = episode_return;
    e.offset = offsets[i];
    index.append(std::move(e));
  }
}

VectorIndex build_index(const datagen::Dataset& ds, const embed::TrajectoryEmbedder& g,
                        int C) {
  VectorIndex index(g.dim());
  for (const auto& task : ds.tasks)
    for (const auto& ep : task.episodes)
      add_episode(index, g, task.task_id, ep.episode_id, ep.states, ep.actions, ep.rewards,
                  C);
  return index;
}

// ---------------------------------------------------------------------------
// Snapshot: JSON header line, raw little-endian f32 key block, then one JSON
// line per entry with the value sub-trajectory.
// ---------------------------------------------------------------------------

void VectorIndex::save(const std::string& path) const {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("index: cannot open " + path + " for writing");
  json h;
  h["format"] = kIndexFormat;
  h["dim"] = dim_;
  h["count"] = entries_.size();
  f << h.dump() << "\n";
  for (const auto& e : entries_)
    f.write(reinterpret_cast<const char*>(e.key.data()),
            static_cast<std::streamsize>(e.key.size() * sizeof(float)));
  f << "\n";
  for (const auto& e : entries_) {
    json j;
    j["task_id"] = e.task_id;
    j["episode_id"] = e.episode_id;
    j["episode_return"] = e.episode_return;
    j["offset"] = e.offset;
    j["past_len"] = e.value.past_len;
    j["future_len"] = e.value.future_len;
    json states = json::array();
    for (const auto& s : e.value.states) states.push_back({s[0], s[1]});
    j["states"] = std::move(states);
    j["actions"] = e.value.actions;
    j["rewards"] = e.value.rewards;
    j["rtg"] = e.value.rtg;
    f << j.dump() << "\n";
  }
  if (!f) throw std::runtime_error("index: write failed for " + path);
}

VectorIndex VectorIndex::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("index: cannot open " + path);
  std::string header;
  std::getline(f, header);
  json h = json::parse(header, nullptr, false);
  if (h.is_discarded() || h.value("format", "") != std::string(kIndexFormat))
    throw std::runtime_error("index: format mismatch (expected radt-idx-1)");
  VectorIndex index(h.at("dim").get<int>());
  const std::size_t count = h.at("count").get<std::size_t>();
  std::vector<std::vector<float>> keys(count);
  for (auto& k : keys) {
    k.resize(index.dim_);
    f.read(reinterpret_cast<char*>(k.data()),
           static_cast<std::streamsize>(k.size() * sizeof(float)));
    if (!f) throw std::runtime_error("index: truncated key block");
  }
  std::string blank;
  std::getline(f, blank);
  for (std::size_t i = 0; i < count; ++i) {
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("index: truncated value block");
    json j = json::parse(line);
    IndexEntry e;
    e.key = std::move(keys[i]);
    e.task_id = j.at("task_id").get<int>();
    e.episode_id = j.at("episode_id").get<int>();
    e.episode_return = j.at("episode_return").get<int>();
    e.offset = j.at("offset").get<int>();
    e.value.past_len = j.at("past_len").get<int>();
    e.value.future_len = j.at("future_len").get<int>();
    for (const auto& s : j.at("states"))
      e.value.states.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
    e.value.actions = j.at("actions").get<std::vector<int>>();
    e.value.rewards = j.at("rewards").get<std::vector<int>>();
    e.value.rtg = j.at("rtg").get<std::vector<int>>();
    if (e.value.length() != static_cast<int>(e.value.states.size()))
      throw std::runtime_error("index: inconsistent value lengths");
    index.append(std::move(e));
  }
  return index;
}

}  // namespace radt::memory
