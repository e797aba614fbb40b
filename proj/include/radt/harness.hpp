#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "radt/dataset.hpp"
#include "radt/embed.hpp"
#include "radt/grid_env.hpp"
#include "radt/memory.hpp"
#include "radt/policy.hpp"

namespace radt::harness {

enum class Method { dt, ad, radt };
enum class EmbedVariant { domain_specific, domain_agnostic };
enum class SamplingAblation { none, same_task, uniform };

Method method_from_string(const std::string& s);
std::string to_string(Method m);

struct EnvSpec {
  envs::TaskKind kind = envs::TaskKind::dark_room;
  int width = 10;
  int height = 10;
  int episode_len = 0;  // defaults to width*height
};

struct SplitSpec {
  int n_train = 80;
  int n_eval = 20;
  u64 seed = 0;
};

struct DataSpec {
  std::string path = "datasets/darkroom10";
  i64 transitions_per_task = 20000;
  datagen::QlearnConfig qlearn;
};

struct OptimSpec {
  double lr = 1e-4;
  i64 warmup_steps = 4000;
  double floor = 1e-6;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip = 0.25;
};

struct TrainSpec {
  i64 steps = 20000;
  int batch = 64;
  i64 eval_every = 5000;  // intermediate ICL evals; >= steps disables
};

struct EvalSpec {
  int trials = 40;
  policy::DecodeMode decode = policy::DecodeMode::sample;
  double temperature = 1.0;
  std::optional<std::pair<double, double>> target_return;  // overrides the table
  bool retrieval_enabled = true;
};

struct AdSpec {
  int k = 100;
};

struct ExperimentConfig {
  std::string name = "experiment";
  EnvSpec env;
  SplitSpec split;
  DataSpec dataset;
  Method method = Method::dt;
  EmbedVariant embedding = EmbedVariant::domain_specific;
  std::string embedding_checkpoint;  // stage-1 DT (domain_specific) or encoder snapshot
  u64 encoder_seed = 0x52414454;     // domain_agnostic frozen-encoder seed
  SamplingAblation sampling = SamplingAblation::none;
  policy::PolicyConfig model;
  memory::RetrievalConfig retrieval;
  OptimSpec optimizer;
  TrainSpec train;
  EvalSpec eval;
  AdSpec ad;
  std::vector<u64> seeds{1, 2, 3};
  std::string out_dir = "runs/experiment";

  // fills model.cross_attention / scales / positional capacities from the
  // env and method, and validates invariants
  void resolve();

  std::string to_json() const;
  static ExperimentConfig from_json_text(const std::string& text);
  static ExperimentConfig load(const std::string& path);
  void save(const std::string& path) const;
};

// tasks for this config, deterministic in split.seed
std::pair<std::vector<envs::GridTask>, std::vector<envs::GridTask>> split_tasks(
    const ExperimentConfig& cfg);

// generate + persist the per-task replay datasets for the train tasks
void generate_data(const ExperimentConfig& cfg);

struct TrainResult {
  std::string checkpoint_path;
  std::vector<std::pair<i64, double>> loss_log;  // (step, loss)
  u64 param_digest = 0;
  double wall_seconds = 0;
};

// Algorithm-2 style training for every method; the checkpoint lands in
// out_dir and embeds the full experiment config.
TrainResult train(const ExperimentConfig& cfg, u64 seed);

struct EvalResult {
  std::vector<std::vector<double>> returns;  // [task][trial]
  double wall_seconds = 0;
  std::vector<double> trial_mean() const;
};

struct LoadedPolicy {
  std::shared_ptr<policy::PolicyModelF> model;
  std::shared_ptr<embed::TrajectoryEmbedder> embedder;  // null for dt/ad
  ExperimentConfig config;
};
LoadedPolicy load_policy(const std::string& checkpoint_path);

// Algorithm-1 in-context evaluation: per task, the index starts empty,
// completed episodes are added back, retrieval reweights by return.
EvalResult icl_evaluate(const ExperimentConfig& cfg, const policy::PolicyModelF& model,
                        const embed::TrajectoryEmbedder* embedder,
                        const std::vector<envs::GridTask>& tasks, u64 seed);

struct BootstrapCi {
  double mean = 0;
  double lo = 0;
  double hi = 0;
};

// Stratified percentile bootstrap: tasks resampled with replacement within
// each seed; deterministic for a given seed.
BootstrapCi bootstrap_ci(const std::vector<std::vector<double>>& per_seed_task_scores,
                         int resamples = 2000, double level = 0.95, u64 seed = 0);

// One evaluated run: method plus per-task trial curves for one model seed.
struct RunRecord {
  std::string method;
  u64 seed = 0;
  std::vector<std::vector<double>> returns;  // [task][trial]
};

// results.csv (method,task,seed,trial,return) + summary.json with per-trial
// mean and stratified bootstrap CI per method. Re-export is byte-identical.
void export_results(const std::vector<RunRecord>& runs, const std::string& dir,
                    int resamples = 2000, u64 ci_seed = 0);

// Cross-attention maps for one evaluation episode of `task`: one CSV per
// layer (query token x context token), captured at the requested step of the
// final trial, plus a JSON sidecar describing the retrieved context.
void export_attention(const std::string& checkpoint_path, const envs::GridTask& task,
                      int trials, int capture_step, const std::string& dir, u64 seed);

}  // namespace radt::harness
