#include "radt/embed.hpp"

#include <nlohmann/json.hpp>

#include "radt/checkpoint.hpp"

namespace radt::embed {

using nlohmann::json;
using policy::TokenSeq;

// ---------------------------------------------------------------------------
// FrozenHopfield
// ---------------------------------------------------------------------------

FrozenHopfield::FrozenHopfield(Matrix<float> embedding_rows, int d_in, float beta,
                               u64 p_seed)
    : E_(std::move(embedding_rows)), beta_(beta), d_in_(d_in) {
  const int d_lm = E_.cols;
  P_.resize(d_lm, d_in);
  Rng rng(p_seed);
  const double stddev = std::sqrt(static_cast<double>(d_in) / d_lm);
  for (auto& v : P_.data) v = static_cast<float>(rng.normal() * stddev);
}

void FrozenHopfield::project(std::span<const float> x, std::span<float> out) const {
  if (static_cast<int>(x.size()) != d_in_)
    throw std::runtime_error("fh_project: input dimension mismatch");
  const int d_lm = E_.cols;
  if (static_cast<int>(out.size()) != d_lm)
    throw std::runtime_error("fh_project: output dimension mismatch");
  // p = P x
  std::vector<float> p(d_lm, 0.0f);
  for (int r = 0; r < d_lm; ++r) {
    const float* pr = P_.row(r);
    float s = 0;
    for (int c = 0; c < d_in_; ++c) s += pr[c] * x[c];
    p[r] = s;
  }
  // logits = beta * E p ; weights = softmax(logits); out = E^T weights
  const int v = E_.rows;
  std::vector<float> logits(v);
  for (int i = 0; i < v; ++i) {
    const float* er = E_.row(i);
    float s = 0;
#pragma omp simd reduction(+ : s)
    for (int c = 0; c < d_lm; ++c) s += er[c] * p[c];
    logits[i] = beta_ * s;
  }
  std::vector<float> w(v);
  nn::softmax_row(logits.data(), w.data(), v);
  std::fill(out.begin(), out.end(), 0.0f);
  for (int i = 0; i < v; ++i) {
    const float* er = E_.row(i);
    float wi = w[i];
    if (wi == 0.0f) continue;
#pragma omp simd
    for (int c = 0; c < d_lm; ++c) out[c] += wi * er[c];
  }
}

std::vector<float> FrozenHopfield::project(const std::vector<float>& x) const {
  std::vector<float> out(E_.cols);
  project(std::span<const float>(x), std::span<float>(out));
  return out;
}

// ---------------------------------------------------------------------------
// DtEmbedder
// ---------------------------------------------------------------------------

DtEmbedder::DtEmbedder(std::shared_ptr<const policy::PolicyModelF> model)
    : model_(std::move(model)) {
  if (!model_) throw std::runtime_error("embedder: null model");
}

std::unique_ptr<DtEmbedder> DtEmbedder::from_checkpoint(const std::string& path) {
  nn::Checkpoint ck = nn::load_checkpoint(path);
  auto cfg = policy::PolicyConfig::from_json(ck.config_json);
  auto model = std::make_shared<policy::PolicyModelF>(cfg, 0);
  ck.load_into(model->params());
  return std::make_unique<DtEmbedder>(std::move(model));
}

int DtEmbedder::dim() const { return model_->config().dim; }

u64 DtEmbedder::param_digest() const { return model_->param_digest(); }

void DtEmbedder::embed(const TokenSeq& seq, const std::vector<uint8_t>* keep,
                       std::span<float> out) const {
  thread_local policy::Workspace<float> ws;
  Matrix<float> keys;
  std::vector<const TokenSeq*> batch{&seq};
  policy::KeepMasks keeps{keep};
  model_->embed_states_mean(batch, keep ? &keeps : nullptr, keys, ws);
  std::copy(keys.row(0), keys.row(0) + keys.cols, out.begin());
}

void DtEmbedder::embed_batch(const std::vector<const TokenSeq*>& seqs,
                             const policy::KeepMasks* keeps, Matrix<float>& out) const {
  thread_local policy::Workspace<float> ws;
  model_->embed_states_mean(seqs, keeps, out, ws);
}

// ---------------------------------------------------------------------------
// FhEmbedder
// ---------------------------------------------------------------------------

std::string FhEmbedderConfig::to_json() const {
  json j;
  j["encoder"] = "fh-frozen";
  j["vocab"] = vocab;
  j["d_lm"] = d_lm;
  j["layers"] = layers;
  j["heads"] = heads;
  j["beta"] = beta;
  j["max_tokens"] = max_tokens;
  j["grid_width"] = grid_width;
  j["grid_height"] = grid_height;
  j["rtg_bins"] = rtg_bins;
  j["seed"] = seed;
  return j.dump();
}

FhEmbedderConfig FhEmbedderConfig::from_json(const std::string& text) {
  json j = json::parse(text);
  if (j.value("encoder", "") != std::string("fh-frozen"))
    throw std::runtime_error("encoder config: not an fh-frozen snapshot");
  FhEmbedderConfig c;
  c.vocab = j.at("vocab").get<int>();
  c.d_lm = j.at("d_lm").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.beta = j.at("beta").get<float>();
  c.max_tokens = j.at("max_tokens").get<int>();
  c.grid_width = j.at("grid_width").get<int>();
  c.grid_height = j.at("grid_height").get<int>();
  c.rtg_bins = j.at("rtg_bins").get<int>();
  c.seed = j.at("seed").get<u64>();
  return c;
}

struct FhEmbedder::Impl {
  nn::ParamStore<float> params;
  nn::Embedding<float> vocab_tab;  // E
  nn::Embedding<float> pos_tab;
  struct Block {
    nn::LayerNorm<float> ln1;
    nn::Dense<float> wqkv, wo;
    nn::LayerNorm<float> ln2;
    nn::Dense<float> fc1, fc2;
  };
  std::vector<Block> blocks;
  nn::LayerNorm<float> lnf;

  // precomputed FH outputs per discrete modality value
  Matrix<float> fh_state, fh_action, fh_reward, fh_rtg;

  struct Scratch {
    Matrix<float> x, ln1_out, qkv, probs, att, proj, ln2_out, fc1o, act, fc2o, lnf_out;
    std::vector<float> m1, r1, m2, r2, mf, rf;
    std::vector<uint8_t> valid;
    std::vector<int> kind;  // token kind per row, -1 padding
  };

  void forward(Scratch& s, int B, int S, int heads) const {
    nn::DropoutCtx<float> off;
    for (const auto& b : blocks) {
      b.ln1.forward(s.x, s.ln1_out, s.m1, s.r1);
      b.wqkv.forward(s.ln1_out, s.qkv);
      nn::attention_self_forward(s.qkv, B, S, heads, s.valid, /*causal=*/false, off, 0,
                                 s.probs, s.att);
      b.wo.forward(s.att, s.proj);
      for (std::size_t i = 0; i < s.x.data.size(); ++i) s.x.data[i] += s.proj.data[i];
      b.ln2.forward(s.x, s.ln2_out, s.m2, s.r2);
      b.fc1.forward(s.ln2_out, s.fc1o);
      s.act.reshape(s.fc1o.rows, s.fc1o.cols);
      for (std::size_t i = 0; i < s.fc1o.data.size(); ++i)
        s.act.data[i] = nn::gelu(s.fc1o.data[i]);
      b.fc2.forward(s.act, s.fc2o);
      for (std::size_t i = 0; i < s.x.data.size(); ++i) s.x.data[i] += s.fc2o.data[i];
    }
    lnf.forward(s.x, s.lnf_out, s.mf, s.rf);
  }

  void fill_fh_tables(const FhEmbedderConfig& cfg) {
    auto fill = [&](Matrix<float>& tab, int d_in, const char* tag) {
      FrozenHopfield fh(vocab_tab.tab->value, d_in, cfg.beta, derive_seed(cfg.seed, tag));
      tab.resize(d_in, cfg.d_lm);
      std::vector<float> onehot(d_in, 0.0f);
      for (int i = 0; i < d_in; ++i) {
        onehot[i] = 1.0f;
        fh.project(std::span<const float>(onehot), std::span<float>(tab.row(i), cfg.d_lm));
        onehot[i] = 0.0f;
      }
    };
    fill(fh_state, cfg.grid_width * cfg.grid_height, "P_state");
    fill(fh_action, envs::kNumActions, "P_action");
    fill(fh_reward, 2, "P_reward");
    fill(fh_rtg, cfg.rtg_bins, "P_rtg");
  }
};

FhEmbedder::FhEmbedder(const FhEmbedderConfig& cfg) : cfg_(cfg) {
  impl_ = std::make_shared<Impl>();
  Rng rng(derive_seed(cfg_.seed, "fh_encoder"));
  auto& im = *impl_;
  im.vocab_tab.init(im.params, "vocab", cfg_.vocab, cfg_.d_lm, rng);
  im.pos_tab.init(im.params, "pos", cfg_.max_tokens, cfg_.d_lm, rng);
  im.blocks.resize(cfg_.layers);
  for (int l = 0; l < cfg_.layers; ++l) {
    auto& b = im.blocks[l];
    std::string p = "blocks." + std::to_string(l) + ".";
    b.ln1.init(im.params, p + "ln1", cfg_.d_lm);
    b.wqkv.init(im.params, p + "attn.wqkv", cfg_.d_lm, 3 * cfg_.d_lm, rng);
    b.wo.init(im.params, p + "attn.wo", cfg_.d_lm, cfg_.d_lm, rng);
    b.ln2.init(im.params, p + "ln2", cfg_.d_lm);
    b.fc1.init(im.params, p + "mlp.fc1", cfg_.d_lm, 4 * cfg_.d_lm, rng);
    b.fc2.init(im.params, p + "mlp.fc2", 4 * cfg_.d_lm, cfg_.d_lm, rng);
  }
  im.lnf.init(im.params, "lnf", cfg_.d_lm);
  im.fill_fh_tables(cfg_);
}

int FhEmbedder::dim() const { return cfg_.d_lm; }

u64 FhEmbedder::param_digest() const { return impl_->params.value_digest(); }

const Matrix<float>& FhEmbedder::embedding_rows() const {
  return impl_->vocab_tab.tab->value;
}

void FhEmbedder::embed_batch(const std::vector<const TokenSeq*>& seqs,
                             const policy::KeepMasks* keeps, Matrix<float>& out) const {
  thread_local Impl::Scratch s;
  const auto& im = *impl_;
  const int B = static_cast<int>(seqs.size());
  int S = 1;
  for (const auto* q : seqs) S = std::max(S, 4 * q->full_steps());
  if (S > cfg_.max_tokens)
    throw std::runtime_error("fh embedder: sequence exceeds positional capacity");
  const int d = cfg_.d_lm;
  s.x.reshape(B * S, d);
  s.x.zero();
  s.valid.assign(static_cast<std::size_t>(B) * S, 0);
  s.kind.assign(static_cast<std::size_t>(B) * S, -1);

  for (int e = 0; e < B; ++e) {
    const TokenSeq& q = *seqs[e];
    if (q.full_steps() < 1) throw std::runtime_error("fh embedder: empty trajectory");
    const std::vector<uint8_t>* keep =
        keeps && e < static_cast<int>(keeps->size()) ? (*keeps)[e] : nullptr;
    int n_tok = 4 * q.full_steps();
    if (keep && static_cast<int>(keep->size()) != n_tok)
      throw std::runtime_error("fh embedder: keep mask length mismatch");
    for (int t = 0; t < q.full_steps(); ++t) {
      int cell = static_cast<int>(std::lround(q.state[t][1])) * cfg_.grid_width +
                 static_cast<int>(std::lround(q.state[t][0]));
      if (cell < 0 || cell >= im.fh_state.rows)
        throw std::runtime_error("fh embedder: state outside configured grid");
      int rtg_id = std::clamp(static_cast<int>(std::lround(q.rtg[t])), 0, cfg_.rtg_bins - 1);
      int rew_id = q.reward[t] > 0.5f ? 1 : 0;
      const float* rows[4] = {im.fh_rtg.row(rtg_id), im.fh_state.row(cell),
                              im.fh_action.row(q.action[t]), im.fh_reward.row(rew_id)};
      for (int k = 0; k < 4; ++k) {
        int tok = 4 * t + k;
        if (keep && !(*keep)[tok]) continue;
        int row = e * S + tok;
        float* xr = s.x.row(row);
        const float* pos = im.pos_tab.row(tok);
        for (int c = 0; c < d; ++c) xr[c] = rows[k][c] + pos[c];
        s.valid[row] = 1;
        s.kind[row] = k;
      }
    }
  }

  impl_->forward(s, B, S, cfg_.heads);

  out.reshape(B, d);
  out.zero();
  for (int e = 0; e < B; ++e) {
    float* key = out.row(e);
    int n = 0;
    for (int tok = 0; tok < S; ++tok) {
      int row = e * S + tok;
      if (s.kind[row] != 1 || !s.valid[row]) continue;  // states only
      const float* h = s.lnf_out.row(row);
      for (int c = 0; c < d; ++c) key[c] += h[c];
      ++n;
    }
    if (n == 0) throw std::runtime_error("fh embedder: no state tokens kept");
    float inv = 1.0f / static_cast<float>(n);
    for (int c = 0; c < d; ++c) key[c] *= inv;
  }
}

void FhEmbedder::embed(const TokenSeq& seq, const std::vector<uint8_t>* keep,
                       std::span<float> out) const {
  Matrix<float> keys;
  std::vector<const TokenSeq*> batch{&seq};
  policy::KeepMasks keeps{keep};
  embed_batch(batch, keep ? &keeps : nullptr, keys);
  std::copy(keys.row(0), keys.row(0) + keys.cols, out.begin());
}

void FhEmbedder::save(const std::string& path) const {
  nn::save_checkpoint(impl_->params, cfg_.to_json(), "", path);
}

std::unique_ptr<FhEmbedder> FhEmbedder::load(const std::string& path) {
  nn::Checkpoint ck = nn::load_checkpoint(path);
  FhEmbedderConfig cfg = FhEmbedderConfig::from_json(ck.config_json);
  auto enc = std::make_unique<FhEmbedder>(cfg);
  ck.load_into(enc->impl_->params);
  // FH tables derive from E: rebuild in case the stored weights differ from
  // the seeded construction (externally exported encoder weights)
  enc->impl_->fill_fh_tables(cfg);
  return enc;
}

std::unique_ptr<TrajectoryEmbedder> load_frozen_encoder(const std::string& path) {
  nn::Checkpoint ck = nn::load_checkpoint(path);
  json j = json::parse(ck.config_json, nullptr, false);
  if (!j.is_discarded() && j.value("encoder", "") == std::string("fh-frozen"))
    return FhEmbedder::load(path);
  return DtEmbedder::from_checkpoint(path);
}

std::vector<uint8_t> make_keep_mask(const TokenSeq& seq, bool include_rtg,
                                    double drop_rate, Rng& rng) {
  const int n = seq.token_count(include_rtg);
  std::vector<uint8_t> keep(n, 1);
  if (drop_rate <= 0.0) return keep;
  for (int i = 0; i < n; ++i) keep[i] = rng.uniform() >= drop_rate ? 1 : 0;
  // keep at least one state token so the aggregation stays defined
  const int m = include_rtg ? 4 : 3;
  const int s_off = include_rtg ? 1 : 0;
  bool any_state = false;
  for (int t = 0; t < seq.full_steps(); ++t) any_state |= keep[m * t + s_off] != 0;
  if (!any_state) keep[m * (seq.full_steps() - 1) + s_off] = 1;
  return keep;
}

}  // namespace radt::embed
