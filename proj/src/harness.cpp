#include "radt/harness.hpp"

#include <omp.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "radt/checkpoint.hpp"

namespace radt::harness {

namespace fs = std::filesystem;
using nlohmann::json;
using policy::TokenSeq;

namespace {

double wall_now() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

}  // namespace

Method method_from_string(const std::string& s) {
  if (s == "dt") return Method::dt;
  if (s == "ad") return Method::ad;
  if (s == "radt") return Method::radt;
  throw std::runtime_error("unknown method: " + s);
}

std::string to_string(Method m) {
  switch (m) {
    case Method::dt: return "dt";
    case Method::ad: return "ad";
    default: return "radt";
  }
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

void ExperimentConfig::resolve() {
  if (env.episode_len <= 0) env.episode_len = env.width * env.height;
  if (seeds.empty()) throw std::runtime_error("config: seeds must be non-empty");
  if (split.n_train < 1 || split.n_eval < 1)
    throw std::runtime_error("config: split sizes must be positive");
  model.cross_attention = method == Method::radt;
  model.include_rtg = method != Method::ad;
  if (method == Method::ad) {
    model.context_steps = 2 * env.episode_len;
    model.max_timesteps = 2 * env.episode_len;
    if (ad.k < 1) throw std::runtime_error("config: ad.k must be >= 1");
  } else {
    model.max_timesteps = model.context_steps;
  }
  model.max_ctx_steps = 2 * model.context_steps;
  model.state_scale = std::max(1, std::max(env.width, env.height) - 1);
  model.rtg_scale = env.episode_len;
  model.n_actions = envs::kNumActions;
  retrieval.context_steps = model.context_steps;
  if (retrieval.top_k > retrieval.top_l)
    throw std::runtime_error("config: retrieval top_k must be <= top_l");
  model.finalize();
}

std::string ExperimentConfig::to_json() const {
  json j;
  j["name"] = name;
  j["env"] = {{"kind", envs::to_string(env.kind)},
              {"width", env.width},
              {"height", env.height},
              {"episode_len", env.episode_len}};
  j["split"] = {{"n_train", split.n_train}, {"n_eval", split.n_eval}, {"seed", split.seed}};
  j["dataset"] = {{"path", dataset.path},
                  {"transitions_per_task", dataset.transitions_per_task},
                  {"qlearn",
                   {{"lr", dataset.qlearn.lr},
                    {"gamma", dataset.qlearn.gamma},
                    {"eps_start", dataset.qlearn.eps_start},
                    {"eps_end", dataset.qlearn.eps_end}}}};
  j["method"] = to_string(method);
  j["embedding"] = {{"variant", embedding == EmbedVariant::domain_specific
                                    ? "domain_specific"
                                    : "domain_agnostic"},
                    {"checkpoint", embedding_checkpoint},
                    {"encoder_seed", encoder_seed}};
  j["sampling"] = sampling == SamplingAblation::none
                      ? "none"
                      : (sampling == SamplingAblation::same_task ? "same_task" : "uniform");
  j["model"] = {{"layers", model.layers},   {"heads", model.heads},
                {"dim", model.dim},         {"context_steps", model.context_steps},
                {"dropout", model.dropout}, {"ca_every", model.ca_every}};
  j["retrieval"] = {{"top_l", retrieval.top_l},
                    {"top_k", retrieval.top_k},
                    {"alpha", retrieval.alpha},
                    {"cutoff", retrieval.cutoff},
                    {"query_dropout", retrieval.query_dropout},
                    {"blend", retrieval.blend},
                    {"min_len", retrieval.min_len},
                    {"cadence", retrieval.cadence},
                    {"dedup", retrieval.dedup}};
  j["optimizer"] = {{"lr", optimizer.lr},
                    {"warmup_steps", optimizer.warmup_steps},
                    {"floor", optimizer.floor},
                    {"weight_decay", optimizer.weight_decay},
                    {"beta1", optimizer.beta1},
                    {"beta2", optimizer.beta2},
                    {"eps", optimizer.eps},
                    {"clip", optimizer.clip}};
  j["train"] = {{"steps", train.steps}, {"batch", train.batch}, {"eval_every", train.eval_every}};
  j["eval"] = {{"trials", eval.trials},
               {"decode", policy::to_string(eval.decode)},
               {"temperature", eval.temperature},
               {"retrieval_enabled", eval.retrieval_enabled}};
  if (eval.target_return)
    j["eval"]["target_return"] = {eval.target_return->first, eval.target_return->second};
  j["ad"] = {{"k", ad.k}};
  j["seeds"] = seeds;
  j["out"] = out_dir;
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json_text(const std::string& text) {
  json j = json::parse(text);
  ExperimentConfig c;
  c.name = j.value("name", c.name);
  if (j.contains("env")) {
    const json& e = j["env"];
    c.env.kind = envs::task_kind_from_string(e.value("kind", "dark_room"));
    c.env.width = e.value("width", c.env.width);
    c.env.height = e.value("height", c.env.height);
    c.env.episode_len = e.value("episode_len", 0);
  }
  if (j.contains("split")) {
    const json& s = j["split"];
    c.split.n_train = s.value("n_train", c.split.n_train);
    c.split.n_eval = s.value("n_eval", c.split.n_eval);
    c.split.seed = s.value("seed", c.split.seed);
  }
  if (j.contains("dataset")) {
    const json& d = j["dataset"];
    c.dataset.path = d.value("path", c.dataset.path);
    c.dataset.transitions_per_task =
        d.value("transitions_per_task", c.dataset.transitions_per_task);
    if (d.contains("qlearn")) {
      const json& q = d["qlearn"];
      c.dataset.qlearn.lr = q.value("lr", c.dataset.qlearn.lr);
      c.dataset.qlearn.gamma = q.value("gamma", c.dataset.qlearn.gamma);
      c.dataset.qlearn.eps_start = q.value("eps_start", c.dataset.qlearn.eps_start);
      c.dataset.qlearn.eps_end = q.value("eps_end", c.dataset.qlearn.eps_end);
    }
  }
  c.method = method_from_string(j.value("method", "dt"));
  if (j.contains("embedding")) {
    const json& e = j["embedding"];
    std::string v = e.value("variant", "domain_specific");
    if (v == "domain_specific") c.embedding = EmbedVariant::domain_specific;
    else if (v == "domain_agnostic") c.embedding = EmbedVariant::domain_agnostic;
    else throw std::runtime_error("unknown embedding variant: " + v);
    c.embedding_checkpoint = e.value("checkpoint", "");
    c.encoder_seed = e.value("encoder_seed", c.encoder_seed);
  }
  {
    std::string s = j.value("sampling", "none");
    if (s == "none") c.sampling = SamplingAblation::none;
    else if (s == "same_task") c.sampling = SamplingAblation::same_task;
    else if (s == "uniform") c.sampling = SamplingAblation::uniform;
    else throw std::runtime_error("unknown sampling mode: " + s);
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    c.model.layers = m.value("layers", c.model.layers);
    c.model.heads = m.value("heads", c.model.heads);
    c.model.dim = m.value("dim", c.model.dim);
    c.model.context_steps = m.value("context_steps", c.model.context_steps);
    c.model.dropout = m.value("dropout", c.model.dropout);
    c.model.ca_every = m.value("ca_every", c.model.ca_every);
  }
  if (j.contains("retrieval")) {
    const json& r = j["retrieval"];
    c.retrieval.top_l = r.value("top_l", c.retrieval.top_l);
    c.retrieval.top_k = r.value("top_k", c.retrieval.top_k);
    c.retrieval.alpha = r.value("alpha", c.retrieval.alpha);
    c.retrieval.cutoff = r.value("cutoff", c.retrieval.cutoff);
    c.retrieval.query_dropout = r.value("query_dropout", c.retrieval.query_dropout);
    c.retrieval.blend = r.value("blend", c.retrieval.blend);
    c.retrieval.min_len = r.value("min_len", c.retrieval.min_len);
    c.retrieval.cadence = r.value("cadence", c.retrieval.cadence);
    c.retrieval.dedup = r.value("dedup", c.retrieval.dedup);
  }
  if (j.contains("optimizer")) {
    const json& o = j["optimizer"];
    c.optimizer.lr = o.value("lr", c.optimizer.lr);
    c.optimizer.warmup_steps = o.value("warmup_steps", c.optimizer.warmup_steps);
    c.optimizer.floor = o.value("floor", c.optimizer.floor);
    c.optimizer.weight_decay = o.value("weight_decay", c.optimizer.weight_decay);
    c.optimizer.beta1 = o.value("beta1", c.optimizer.beta1);
    c.optimizer.beta2 = o.value("beta2", c.optimizer.beta2);
    c.optimizer.eps = o.value("eps", c.optimizer.eps);
    c.optimizer.clip = o.value("clip", c.optimizer.clip);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    c.train.steps = t.value("steps", c.train.steps);
    c.train.batch = t.value("batch", c.train.batch);
    c.train.eval_every = t.value("eval_every", c.train.eval_every);
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    c.eval.trials = e.value("trials", c.eval.trials);
    c.eval.decode = policy::decode_mode_from_string(e.value("decode", "sample"));
    c.eval.temperature = e.value("temperature", c.eval.temperature);
    c.eval.retrieval_enabled = e.value("retrieval_enabled", true);
    if (e.contains("target_return"))
      c.eval.target_return =
          std::make_pair(e["target_return"].at(0).get<double>(),
                         e["target_return"].at(1).get<double>());
  }
  if (j.contains("ad")) c.ad.k = j["ad"].value("k", c.ad.k);
  if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<u64>>();
  c.out_dir = j.value("out", c.out_dir);
  c.resolve();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("config: cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return from_json_text(text);
}

void ExperimentConfig::save(const std::string& path) const {
  std::ofstream f(path);
  f << to_json() << "\n";
  if (!f) throw std::runtime_error("config: cannot write " + path);
}

std::pair<std::vector<envs::GridTask>, std::vector<envs::GridTask>> split_tasks(
    const ExperimentConfig& cfg) {
  return envs::task_split(cfg.env.kind, cfg.env.width, cfg.env.height, cfg.split.n_train,
                          cfg.split.n_eval, cfg.split.seed);
}

void generate_data(const ExperimentConfig& cfg) {
  auto [train_tasks, eval_tasks] = split_tasks(cfg);
  (void)eval_tasks;  // evaluation tasks never get offline data
  datagen::Dataset ds = datagen::generate_dataset(
      train_tasks, cfg.dataset.transitions_per_task, cfg.split.seed, cfg.dataset.qlearn);
  datagen::write_dataset(ds, cfg.dataset.path);
}

// ---------------------------------------------------------------------------
// Embedder plumbing
// ---------------------------------------------------------------------------

namespace {

std::shared_ptr<embed::TrajectoryEmbedder> make_embedder(const ExperimentConfig& cfg) {
  if (cfg.method != Method::radt) return nullptr;
  if (cfg.embedding == EmbedVariant::domain_specific) {
    if (cfg.embedding_checkpoint.empty())
      throw std::runtime_error(
          "config: domain_specific retrieval needs embedding.checkpoint (a trained DT)");
    return std::shared_ptr<embed::TrajectoryEmbedder>(
        embed::load_frozen_encoder(cfg.embedding_checkpoint));
  }
  if (!cfg.embedding_checkpoint.empty())
    return std::shared_ptr<embed::TrajectoryEmbedder>(
        embed::load_frozen_encoder(cfg.embedding_checkpoint));
  embed::FhEmbedderConfig fc;
  fc.seed = cfg.encoder_seed;
  fc.grid_width = cfg.env.width;
  fc.grid_height = cfg.env.height;
  fc.rtg_bins = cfg.env.episode_len + 1;
  fc.max_tokens = 4 * cfg.model.context_steps;
  return std::make_shared<embed::FhEmbedder>(fc);
}

struct EpisodeRef {
  int task_idx = 0;
  int episode_idx = 0;
};

TokenSeq window_of(const datagen::EpisodeRecord& ep, const std::vector<int>& rtg,
                   int start, int len) {
  return policy::make_window(ep.states, ep.actions, ep.rewards, rtg, start, len);
}

}  // namespace

// ---------------------------------------------------------------------------
// Training (Algorithm-2 style loop)
// ---------------------------------------------------------------------------

TrainResult train(const ExperimentConfig& cfg_in, u64 seed) {
  ExperimentConfig cfg = cfg_in;
  cfg.resolve();
  const double t_start = wall_now();

  datagen::Dataset ds = datagen::read_dataset(cfg.dataset.path);
  if (ds.tasks.empty()) throw std::runtime_error("train: dataset is empty");
  for (const auto& t : ds.tasks)
    if (t.task.width != cfg.env.width || t.task.height != cfg.env.height ||
        t.task.kind != cfg.env.kind)
      throw std::runtime_error("train: dataset env does not match config");

  // per-episode returns-to-go, pooled episode list
  std::vector<std::vector<std::vector<int>>> rtgs(ds.tasks.size());
  std::vector<EpisodeRef> pool;
  for (std::size_t ti = 0; ti < ds.tasks.size(); ++ti) {
    rtgs[ti].resize(ds.tasks[ti].episodes.size());
    for (std::size_t ei = 0; ei < ds.tasks[ti].episodes.size(); ++ei) {
      rtgs[ti][ei] = datagen::compute_rtg(ds.tasks[ti].episodes[ei].rewards);
      pool.push_back({static_cast<int>(ti), static_cast<int>(ei)});
    }
  }

  policy::PolicyModelF model(cfg.model, derive_seed(seed, "init"));
  nn::AdamConfig ocfg;
  ocfg.lr.peak = cfg.optimizer.lr;
  ocfg.lr.floor = cfg.optimizer.floor;
  ocfg.lr.warmup_steps = cfg.optimizer.warmup_steps;
  ocfg.lr.decay_steps = cfg.train.steps;
  ocfg.weight_decay = cfg.optimizer.weight_decay;
  ocfg.beta1 = cfg.optimizer.beta1;
  ocfg.beta2 = cfg.optimizer.beta2;
  ocfg.eps = cfg.optimizer.eps;
  ocfg.clip_norm = cfg.optimizer.clip;
  nn::AdamW<float> opt(model.params(), ocfg);

  policy::Workspace<float> ws;
  ws.drop_seed = derive_seed(seed, "dropout");
  Rng batch_rng(derive_seed(seed, "batch"));
  Rng retr_rng(derive_seed(seed, "retrieval"));

  // retrieval machinery
  std::shared_ptr<embed::TrajectoryEmbedder> g = make_embedder(cfg);
  std::unique_ptr<memory::VectorIndex> index;
  std::map<int, std::vector<int>> entries_by_task;
  std::vector<int> all_entries;
  if (g) {
    index = std::make_unique<memory::VectorIndex>(
        memory::build_index(ds, *g, cfg.retrieval.context_steps));
    if (cfg.retrieval.dedup) index->deduplicate(cfg.retrieval.cutoff);
    all_entries.resize(index->size());
    for (int i = 0; i < static_cast<int>(index->size()); ++i) {
      all_entries[i] = i;
      entries_by_task[index->entry(i).task_id].push_back(i);
    }
  }

  fs::create_directories(cfg.out_dir);
  TrainResult result;
  const int B = cfg.train.batch;
  const int C = cfg.model.context_steps;

  std::vector<TokenSeq> windows(B), ctx_seqs(B);
  std::vector<TokenSeq> query_seqs(B);
  std::vector<std::vector<uint8_t>> keeps_store(B);

  auto pick_uniform_entry = [&](const std::vector<int>& from, int ex_task,
                                int ex_ep) -> int {
    // rejection-free: collect eligible once per call (small lists at fallback)
    int tries = 0;
    while (tries++ < 64 && !from.empty()) {
      int idx = from[retr_rng.uniform_int(from.size())];
      const auto& e = index->entry(idx);
      if (e.task_id == ex_task && e.episode_id == ex_ep) continue;
      return idx;
    }
    return -1;
  };

  for (i64 step = 0; step < cfg.train.steps; ++step) {
    std::vector<const TokenSeq*> batch(B), ctx(B, nullptr);

    if (cfg.method == Method::ad) {
      for (int b = 0; b < B; ++b) {
        int ti = static_cast<int>(batch_rng.uniform_int(ds.tasks.size()));
        const auto& eps = ds.tasks[ti].episodes;
        auto [i, j] = policy::ad_build_pair(static_cast<int>(eps.size()), cfg.ad.k,
                                            batch_rng);
        TokenSeq ctx_ep = window_of(eps[i], rtgs[ti][i], 0,
                                    static_cast<int>(eps[i].actions.size()));
        TokenSeq tgt_ep = window_of(eps[j], rtgs[ti][j], 0,
                                    static_cast<int>(eps[j].actions.size()));
        TokenSeq pair;
        pair.steps = ctx_ep.steps + tgt_ep.steps;
        for (const TokenSeq* src : {&ctx_ep, &tgt_ep}) {
          bool is_target = src == &tgt_ep;
          for (int t = 0; t < src->steps; ++t) {
            pair.rtg.push_back(src->rtg[t]);
            pair.state.push_back(src->state[t]);
            pair.action.push_back(src->action[t]);
            pair.reward.push_back(src->reward[t]);
            pair.target.push_back(is_target);
          }
        }
        windows[b] = std::move(pair);
        batch[b] = &windows[b];
      }
    } else {
      // sample C-step windows
      struct Meta {
        int task_id;
        int episode_id;
        int len;
      };
      std::vector<Meta> metas(B);
      for (int b = 0; b < B; ++b) {
        const EpisodeRef ref = pool[batch_rng.uniform_int(pool.size())];
        const auto& ep = ds.tasks[ref.task_idx].episodes[ref.episode_idx];
        const int H = static_cast<int>(ep.actions.size());
        const int len = std::min(C, H);
        const int start = H > len ? static_cast<int>(batch_rng.uniform_int(H - len + 1)) : 0;
        windows[b] = window_of(ep, rtgs[ref.task_idx][ref.episode_idx], start, len);
        batch[b] = &windows[b];
        metas[b] = {ds.tasks[ref.task_idx].task_id, ep.episode_id, len};
      }

      if (cfg.method == Method::radt && index && index->size() > 0) {
        // queries with token-level dropout, embedded as one batch
        policy::KeepMasks keeps(B, nullptr);
        std::vector<const TokenSeq*> qptrs(B);
        for (int b = 0; b < B; ++b) {
          query_seqs[b] = *batch[b];
          keeps_store[b] = embed::make_keep_mask(query_seqs[b], true,
                                                 cfg.retrieval.query_dropout, retr_rng);
          keeps[b] = &keeps_store[b];
          qptrs[b] = &query_seqs[b];
        }
        Matrix<float> queries;
        if (cfg.sampling == SamplingAblation::none)
          g->embed_batch(qptrs, &keeps, queries);

        for (int b = 0; b < B; ++b) {
          int chosen = -1;
          if (cfg.sampling == SamplingAblation::same_task) {
            auto it = entries_by_task.find(metas[b].task_id);
            if (it != entries_by_task.end())
              chosen = pick_uniform_entry(it->second, metas[b].task_id, metas[b].episode_id);
          } else if (cfg.sampling == SamplingAblation::uniform) {
            chosen = pick_uniform_entry(all_entries, metas[b].task_id, metas[b].episode_id);
          } else if (metas[b].len < cfg.retrieval.min_len) {
            // short-query fallback: random same-task experience
            auto it = entries_by_task.find(metas[b].task_id);
            if (it != entries_by_task.end())
              chosen = pick_uniform_entry(it->second, metas[b].task_id, metas[b].episode_id);
          } else {
            std::vector<float> q(queries.row(b), queries.row(b) + queries.cols);
            q = memory::regularize_query(std::move(q), true, cfg.retrieval, *index,
                                         retr_rng);
            auto cands = index->search_topl(q, 2 * cfg.retrieval.top_l, metas[b].task_id,
                                            metas[b].episode_id);
            cands = memory::similarity_cutoff(std::move(cands), cfg.retrieval.cutoff,
                                              cfg.retrieval.top_l);
            auto sel = memory::reweight_select(*index, cands, memory::UtilityMode::task,
                                               metas[b].task_id, metas[b].episode_id,
                                               cfg.retrieval.alpha, cfg.retrieval.top_k);
            if (!sel.empty()) chosen = sel[0].entry;
          }
          if (chosen >= 0) {
            ctx_seqs[b] = index->entry(chosen).value.to_token_seq();
            ctx[b] = &ctx_seqs[b];
          }
        }
      }
    }

    model.params().zero_grads();
    double loss = model.forward_loss(batch, ctx, true, static_cast<u64>(step), true, ws);
    if (!std::isfinite(loss))
      throw std::runtime_error("train: non-finite loss at step " + std::to_string(step));
    nn::clip_global_norm(model.params(), ocfg.clip_norm);
    opt.step(model.params());

    if (step % 50 == 0 || step == cfg.train.steps - 1)
      result.loss_log.emplace_back(step, loss);

    if (cfg.train.eval_every > 0 && (step + 1) % cfg.train.eval_every == 0 &&
        step + 1 < cfg.train.steps) {
      auto [train_tasks, eval_tasks] = split_tasks(cfg);
      (void)train_tasks;
      EvalResult er = icl_evaluate(cfg, model, g.get(), eval_tasks, seed);
      json log;
      log["step"] = step + 1;
      log["trial_mean"] = er.trial_mean();
      std::ofstream f(cfg.out_dir + "/eval_seed" + std::to_string(seed) + ".jsonl",
                      std::ios::app);
      f << log.dump() << "\n";
    }
  }

  // checkpoint: policy config at the top level plus the experiment echo
  json ckpt_cfg = json::parse(cfg.model.to_json());
  ckpt_cfg["experiment"] = json::parse(cfg.to_json());
  ckpt_cfg["seed"] = seed;
  std::string path = cfg.out_dir + "/model_seed" + std::to_string(seed) + ".ckpt";
  Rng final_rng(derive_seed(seed, "post_train"));
  nn::save_checkpoint(model.params(), ckpt_cfg.dump(), final_rng.state(), path);

  std::ofstream loss_csv(cfg.out_dir + "/loss_seed" + std::to_string(seed) + ".csv");
  loss_csv << "step,loss\n";
  for (auto [s, l] : result.loss_log) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%lld,%.6f\n", static_cast<long long>(s), l);
    loss_csv << buf;
  }

  result.checkpoint_path = path;
  result.param_digest = model.param_digest();
  result.wall_seconds = wall_now() - t_start;
  return result;
}

LoadedPolicy load_policy(const std::string& checkpoint_path) {
  nn::Checkpoint ck = nn::load_checkpoint(checkpoint_path);
  json j = json::parse(ck.config_json);
  LoadedPolicy lp;
  lp.config = ExperimentConfig::from_json_text(j.at("experiment").dump());
  lp.model = std::make_shared<policy::PolicyModelF>(lp.config.model, 0);
  ck.load_into(lp.model->params());
  lp.embedder = make_embedder(lp.config);
  return lp;
}

// ---------------------------------------------------------------------------
// Evaluation (Algorithm-1 style ICL loop)
// ---------------------------------------------------------------------------

namespace {

struct RolloutBuffers {
  std::vector<std::array<int, 2>> states;
  std::vector<int> actions;
  std::vector<int> rewards;
  std::vector<float> rtg_stream;
};

TokenSeq eval_window(const RolloutBuffers& rb, int t, float rtg_now,
                     const envs::Cell& obs_now, int C) {
  // steps [start, t] with step t partial (rtg + state only)
  const int start = std::max(0, t + 1 - C);
  TokenSeq s;
  s.steps = t + 1 - start;
  s.partial_last = true;
  s.rtg.resize(s.steps);
  s.state.resize(s.steps);
  s.action.resize(s.steps);
  s.reward.resize(s.steps);
  s.target.assign(s.steps, 0);
  for (int i = 0; i < s.steps - 1; ++i) {
    int u = start + i;
    s.rtg[i] = rb.rtg_stream[u];
    s.state[i] = {static_cast<float>(rb.states[u][0]), static_cast<float>(rb.states[u][1])};
    s.action[i] = rb.actions[u];
    s.reward[i] = static_cast<float>(rb.rewards[u]);
  }
  s.rtg[s.steps - 1] = rtg_now;
  s.state[s.steps - 1] = {static_cast<float>(obs_now.x), static_cast<float>(obs_now.y)};
  s.action[s.steps - 1] = 0;
  s.reward[s.steps - 1] = 0;
  return s;
}

TokenSeq query_window(const RolloutBuffers& rb, int t, int C) {
  // completed steps only: [max(0, t-C), t)
  const int start = std::max(0, t - C);
  TokenSeq s;
  s.steps = t - start;
  s.rtg.resize(s.steps);
  s.state.resize(s.steps);
  s.action.resize(s.steps);
  s.reward.resize(s.steps);
  s.target.assign(s.steps, 0);
  for (int i = 0; i < s.steps; ++i) {
    int u = start + i;
    s.rtg[i] = rb.rtg_stream[u];
    s.state[i] = {static_cast<float>(rb.states[u][0]), static_cast<float>(rb.states[u][1])};
    s.action[i] = rb.actions[u];
    s.reward[i] = static_cast<float>(rb.rewards[u]);
  }
  return s;
}

struct CaptureRequest {
  int trial = -1;
  int step = -1;
  policy::CaptureCA<float>* sink = nullptr;
  TokenSeq* ctx_out = nullptr;
  TokenSeq* window_out = nullptr;
};

std::vector<double> eval_one_task(const ExperimentConfig& cfg,
                                  const policy::PolicyModelF& model,
                                  const embed::TrajectoryEmbedder* embedder,
                                  const envs::GridTask& task, int task_idx, u64 seed,
                                  CaptureRequest* capture = nullptr) {
  const bool retrieval = cfg.method == Method::radt && embedder != nullptr &&
                         cfg.eval.retrieval_enabled;
  const int C = cfg.model.context_steps;
  Rng rng(derive_seed(seed, "eval", static_cast<u64>(task_idx)));
  envs::GridEnv env(task);
  memory::VectorIndex index(embedder ? embedder->dim() : 1);
  policy::Workspace<float> ws;
  std::deque<RolloutBuffers> ad_history;
  std::vector<double> trial_returns;
  std::vector<float> logits;
  std::vector<float> qbuf(embedder ? embedder->dim() : 1);

  for (int trial = 0; trial < cfg.eval.trials; ++trial) {
    RolloutBuffers rb;
    envs::Cell obs = env.reset();
    float rtg = static_cast<float>(policy::sample_target_return(
        task.kind, task.width, task.height, cfg.eval.target_return, rng));
    TokenSeq ctx_seq;
    bool has_ctx = false;
    int total = 0;

    for (int t = 0; t < task.episode_len; ++t) {
      if (retrieval && t % cfg.retrieval.cadence == 0) {
        has_ctx = false;
        if (index.size() > 0) {
          int chosen = -1;
          if (t < cfg.retrieval.min_len) {
            chosen = static_cast<int>(rng.uniform_int(index.size()));
          } else {
            TokenSeq q = query_window(rb, t, C);
            embedder->embed(q, nullptr, qbuf);
            auto cands = index.search_topl(qbuf, cfg.retrieval.top_l, -1, -1);
            auto sel = memory::reweight_select(index, cands, memory::UtilityMode::ret,
                                               task_idx, -1, cfg.retrieval.alpha,
                                               cfg.retrieval.top_k);
            if (!sel.empty()) chosen = sel[0].entry;
          }
          if (chosen >= 0) {
            const auto& e = index.entry(chosen);
            if (e.task_id != task_idx)
              throw std::runtime_error("eval: retrieved context from a foreign task");
            ctx_seq = e.value.to_token_seq();
            has_ctx = true;
          }
        }
      }

      TokenSeq window;
      if (cfg.method == Method::ad) {
        // whole-episode sliding context, capped at two episodes of steps
        const int cap = 2 * task.episode_len;
        std::vector<const RolloutBuffers*> chosen;
        int steps_total = t + 1;
        for (auto it = ad_history.rbegin(); it != ad_history.rend(); ++it) {
          int len = static_cast<int>(it->actions.size());
          if (steps_total + len > cap) break;
          chosen.push_back(&*it);
          steps_total += len;
        }
        window.steps = steps_total;
        window.partial_last = true;
        window.rtg.assign(steps_total, 0.0f);
        window.state.resize(steps_total);
        window.action.assign(steps_total, 0);
        window.reward.assign(steps_total, 0.0f);
        window.target.assign(steps_total, 0);
        int w = 0;
        for (auto it = chosen.rbegin(); it != chosen.rend(); ++it) {
          const RolloutBuffers& h = **it;
          for (std::size_t u = 0; u < h.actions.size(); ++u, ++w) {
            window.state[w] = {static_cast<float>(h.states[u][0]),
                               static_cast<float>(h.states[u][1])};
            window.action[w] = h.actions[u];
            window.reward[w] = static_cast<float>(h.rewards[u]);
          }
        }
        for (int u = 0; u < t; ++u, ++w) {
          window.state[w] = {static_cast<float>(rb.states[u][0]),
                             static_cast<float>(rb.states[u][1])};
          window.action[w] = rb.actions[u];
          window.reward[w] = static_cast<float>(rb.rewards[u]);
        }
        window.state[w] = {static_cast<float>(obs.x), static_cast<float>(obs.y)};
      } else {
        window = eval_window(rb, t, rtg, obs, C);
      }

      policy::CaptureCA<float>* cap_sink = nullptr;
      if (capture && capture->trial == trial && capture->step == t) {
        cap_sink = capture->sink;
        if (capture->ctx_out && has_ctx) *capture->ctx_out = ctx_seq;
        if (capture->window_out) *capture->window_out = window;
      }
      model.logits_last(window, has_ctx ? &ctx_seq : nullptr, logits, ws, cap_sink);
      int action = policy::select_action(logits, rng, cfg.eval.decode, cfg.eval.temperature);

      envs::StepResult sr = env.step(action);
      rb.states.push_back({obs.x, obs.y});
      rb.actions.push_back(action);
      rb.rewards.push_back(sr.reward);
      rb.rtg_stream.push_back(rtg);
      total += sr.reward;
      rtg = std::max(0.0f, rtg - static_cast<float>(sr.reward));
      obs = sr.obs;
    }

    trial_returns.push_back(total);
    if (retrieval)
      memory::add_episode(index, *embedder, task_idx, trial, rb.states, rb.actions,
                          rb.rewards, C);
    if (cfg.method == Method::ad) {
      ad_history.push_back(std::move(rb));
      while (ad_history.size() > 2) ad_history.pop_front();
    }
  }
  return trial_returns;
}

}  // namespace

EvalResult icl_evaluate(const ExperimentConfig& cfg_in, const policy::PolicyModelF& model,
                        const embed::TrajectoryEmbedder* embedder,
                        const std::vector<envs::GridTask>& tasks, u64 seed) {
  ExperimentConfig cfg = cfg_in;
  cfg.resolve();
  const double t0 = wall_now();
  EvalResult res;
  res.returns.resize(tasks.size());
  std::string error;
#pragma omp parallel for schedule(dynamic)
  for (std::size_t ti = 0; ti < tasks.size(); ++ti) {
    try {
      res.returns[ti] =
          eval_one_task(cfg, model, embedder, tasks[ti], static_cast<int>(ti), seed);
    } catch (const std::exception& e) {
#pragma omp critical
      error = e.what();
    }
  }
  if (!error.empty()) throw std::runtime_error("icl_evaluate: " + error);
  res.wall_seconds = wall_now() - t0;
  return res;
}

std::vector<double> EvalResult::trial_mean() const {
  if (returns.empty()) return {};
  std::vector<double> mean(returns[0].size(), 0.0);
  for (const auto& task : returns)
    for (std::size_t t = 0; t < task.size(); ++t) mean[t] += task[t];
  for (auto& m : mean) m /= static_cast<double>(returns.size());
  return mean;
}

// ---------------------------------------------------------------------------
// Bootstrap
// ---------------------------------------------------------------------------

BootstrapCi bootstrap_ci(const std::vector<std::vector<double>>& per_seed_task_scores,
                         int resamples, double level, u64 seed) {
  if (per_seed_task_scores.empty() || per_seed_task_scores[0].empty())
    throw std::runtime_error("bootstrap_ci: empty input");
  double grand = 0;
  std::size_t count = 0;
  for (const auto& row : per_seed_task_scores) {
    if (row.empty()) throw std::runtime_error("bootstrap_ci: empty seed row");
    for (double v : row) {
      grand += v;
      ++count;
    }
  }
  grand /= static_cast<double>(count);

  Rng rng(derive_seed(seed, "bootstrap"));
  std::vector<double> stats(resamples);
  for (int b = 0; b < resamples; ++b) {
    double acc = 0;
    std::size_t n = 0;
    for (const auto& row : per_seed_task_scores) {
      const std::size_t m = row.size();
      for (std::size_t j = 0; j < m; ++j) acc += row[rng.uniform_int(m)];
      n += m;
    }
    stats[b] = acc / static_cast<double>(n);
  }
  std::sort(stats.begin(), stats.end());
  auto quantile = [&](double q) {
    double pos = q * (resamples - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min<std::size_t>(lo + 1, resamples - 1);
    double frac = pos - lo;
    return stats[lo] * (1 - frac) + stats[hi] * frac;
  };
  double tail = (1.0 - level) / 2.0;
  return {grand, quantile(tail), quantile(1.0 - tail)};
}

// ---------------------------------------------------------------------------
// Exports
// ---------------------------------------------------------------------------

void export_results(const std::vector<RunRecord>& runs, const std::string& dir,
                    int resamples, u64 ci_seed) {
  fs::create_directories(dir);
  std::vector<const RunRecord*> ordered;
  for (const auto& r : runs) ordered.push_back(&r);
  std::stable_sort(ordered.begin(), ordered.end(),
                   [](const RunRecord* a, const RunRecord* b) {
                     if (a->method != b->method) return a->method < b->method;
                     return a->seed < b->seed;
                   });

  std::ofstream csv(fs::path(dir) / "results.csv");
  csv << "method,task,seed,trial,return\n";
  for (const auto* r : ordered)
    for (std::size_t task = 0; task < r->returns.size(); ++task)
      for (std::size_t trial = 0; trial < r->returns[task].size(); ++trial) {
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%zu,%llu,%zu,%.10g\n", r->method.c_str(), task,
                      static_cast<unsigned long long>(r->seed), trial + 1,
                      r->returns[task][trial]);
        csv << buf;
      }
  if (!csv) throw std::runtime_error("export_results: csv write failed");

  // per-method, per-trial mean with stratified bootstrap CI across
  // (seed, task)
  json summary;
  std::map<std::string, std::vector<const RunRecord*>> by_method;
  for (const auto* r : ordered) by_method[r->method].push_back(r);
  for (const auto& [method, rs] : by_method) {
    std::size_t trials = rs[0]->returns[0].size();
    json curve = json::array();
    for (std::size_t t = 0; t < trials; ++t) {
      std::vector<std::vector<double>> scores;  // [seed][task]
      for (const auto* r : rs) {
        std::vector<double> row;
        for (const auto& task : r->returns) row.push_back(task[t]);
        scores.push_back(std::move(row));
      }
      BootstrapCi ci = bootstrap_ci(scores, resamples, 0.95, ci_seed);
      curve.push_back({{"trial", t + 1}, {"mean", ci.mean}, {"lo", ci.lo}, {"hi", ci.hi}});
    }
    summary[method] = std::move(curve);
  }
  std::ofstream js(fs::path(dir) / "summary.json");
  js << summary.dump(2) << "\n";
  if (!js) throw std::runtime_error("export_results: summary write failed");
}

void export_attention(const std::string& checkpoint_path, const envs::GridTask& task,
                      int trials, int capture_step, const std::string& dir, u64 seed) {
  LoadedPolicy lp = load_policy(checkpoint_path);
  if (lp.config.method != Method::radt)
    throw std::runtime_error("export_attention: checkpoint is not a retrieval model");
  fs::create_directories(dir);
  ExperimentConfig cfg = lp.config;
  cfg.eval.trials = trials;
  policy::CaptureCA<float> cap;
  TokenSeq ctx_used, window_used;
  CaptureRequest req{trials - 1, capture_step, &cap, &ctx_used, &window_used};
  eval_one_task(cfg, *lp.model, lp.embedder.get(), task, 0, seed, &req);

  for (std::size_t l = 0; l < cap.layer_probs.size(); ++l) {
    const auto& probs = cap.layer_probs[l];
    std::ofstream f(fs::path(dir) / ("attention_layer" + std::to_string(l) + ".csv"));
    const int q_tokens = window_used.token_count(true);
    for (int i = 0; i < std::min(q_tokens, probs.rows); ++i) {
      for (int j = 0; j < probs.cols; ++j) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.8f%c", probs.at(i, j),
                      j + 1 == probs.cols ? '\n' : ',');
        f << buf;
      }
    }
    if (!f) throw std::runtime_error("export_attention: write failed");
  }
  json meta;
  meta["task"] = json::parse(task.to_json());
  meta["capture_trial"] = trials - 1;
  meta["capture_step"] = capture_step;
  meta["layers"] = cap.layer_probs.size();
  meta["context_steps"] = ctx_used.steps;
  meta["query_tokens"] = window_used.token_count(true);
  std::ofstream mf(fs::path(dir) / "attention_meta.json");
  mf << meta.dump(2) << "\n";
}

}  // namespace radt::harness
