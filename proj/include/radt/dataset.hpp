#pragma once

#include <array>
#include <string>
#include <vector>

#include "radt/common.hpp"
#include "radt/grid_env.hpp"

namespace radt::datagen {

inline constexpr const char* kDatasetFormat = "radt-ds-1";

struct EpisodeRecord {
  int task_id = 0;
  int episode_id = 0;  // monotone within a task stream
  std::vector<std::array<int, 2>> states;
  std::vector<int> actions;
  std::vector<int> rewards;
  int total_return = 0;

  std::vector<int> returns_to_go() const;
};

// R[t] = r[t] + R[t+1], R[T] = r[T]
std::vector<int> compute_rtg(const std::vector<int>& rewards);

struct QlearnConfig {
  double lr = 0.1;
  double gamma = 0.99;
  double eps_start = 1.0;
  double eps_end = 0.05;  // reached after the first half of the budget
};

// Tabular Q-learning over the privileged state ((x,y) plus has_key for
// key-door). The full replay stream is kept: early episodes are exploratory,
// later ones approach the optimal return.
std::vector<EpisodeRecord> collect_task(const envs::GridTask& task, int task_id,
                                        i64 budget, u64 seed,
                                        const QlearnConfig& cfg = {});

struct TaskData {
  int task_id = 0;
  envs::GridTask task;
  std::string file;
  std::vector<EpisodeRecord> episodes;
};

struct DatasetManifest {
  std::string format_version = kDatasetFormat;
  i64 transitions_per_task = 0;
  std::string generator = "tabular_q";
  QlearnConfig qlearn;
  u64 seed = 0;
  // parallel to Dataset::tasks
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<TaskData> tasks;

  i64 total_transitions() const;
  const TaskData& by_task_id(int task_id) const;
};

// One JSON-lines file per task (one episode per line) plus manifest.json.
void write_dataset(const Dataset& ds, const std::string& dir);
Dataset read_dataset(const std::string& dir);

// Collects all tasks and assembles the manifest.
Dataset generate_dataset(const std::vector<envs::GridTask>& tasks, i64 budget_per_task,
                         u64 seed, const QlearnConfig& cfg = {});

}  // namespace radt::datagen
