#include "radt/dataset.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace radt::datagen {

namespace fs = std::filesystem;
using nlohmann::json;

std::vector<int> compute_rtg(const std::vector<int>& rewards) {
  if (rewards.empty()) throw std::runtime_error("compute_rtg: empty reward sequence");
  std::vector<int> rtg(rewards.size());
  int acc = 0;
  for (std::size_t i = rewards.size(); i-- > 0;) {
    acc += rewards[i];
    rtg[i] = acc;
  }
  return rtg;
}

std::vector<int> EpisodeRecord::returns_to_go() const { return compute_rtg(rewards); }

std::vector<EpisodeRecord> collect_task(const envs::GridTask& task, int task_id,
                                        i64 budget, u64 seed, const QlearnConfig& cfg) {
  envs::GridEnv env(task);
  const int eplen = env.task().episode_len;
  if (budget < eplen) throw std::runtime_error("collect_task: budget below episode_len");

  const bool key_door = task.kind == envs::TaskKind::dark_key_door;
  const int n_states = task.width * task.height * (key_door ? 2 : 1);
  std::vector<double> q(static_cast<std::size_t>(n_states) * envs::kNumActions, 0.0);
  auto state_id = [&](envs::Cell c, bool has_key) {
    int base = c.y * task.width + c.x;
    return key_door && has_key ? base + task.width * task.height : base;
  };

  Rng rng(derive_seed(seed, "collect", static_cast<u64>(task_id)));
  std::vector<EpisodeRecord> episodes;
  i64 steps_done = 0;
  int episode_id = 0;
  const double eps_span = static_cast<double>(budget) / 2.0;

  while (steps_done < budget) {
    EpisodeRecord rec;
    rec.task_id = task_id;
    rec.episode_id = episode_id++;
    envs::Cell obs = env.reset();
    int ep_steps = std::min<i64>(eplen, budget - steps_done);

    for (int t = 0; t < ep_steps; ++t) {
      double frac = std::min(1.0, static_cast<double>(steps_done) / eps_span);
      double eps = cfg.eps_start + frac * (cfg.eps_end - cfg.eps_start);
      int s = state_id(obs, env.has_key());

      int action;
      if (rng.uniform() < eps) {
        action = static_cast<int>(rng.uniform_int(envs::kNumActions));
      } else {
        const double* qs = &q[static_cast<std::size_t>(s) * envs::kNumActions];
        double best = *std::max_element(qs, qs + envs::kNumActions);
        int ties[envs::kNumActions];
        int n_ties = 0;
        for (int a = 0; a < envs::kNumActions; ++a)
          if (qs[a] == best) ties[n_ties++] = a;
        action = ties[rng.uniform_int(n_ties)];
      }

      envs::StepResult res = env.step(action);
      int s2 = state_id(res.obs, env.has_key());
      double target = res.reward;
      if (!res.done) {
        const double* qs2 = &q[static_cast<std::size_t>(s2) * envs::kNumActions];
        target += cfg.gamma * *std::max_element(qs2, qs2 + envs::kNumActions);
      }
      double& qv = q[static_cast<std::size_t>(s) * envs::kNumActions + action];
      qv += cfg.lr * (target - qv);

      rec.states.push_back({obs.x, obs.y});
      rec.actions.push_back(action);
      rec.rewards.push_back(res.reward);
      rec.total_return += res.reward;
      obs = res.obs;
      ++steps_done;
    }
    episodes.push_back(std::move(rec));
  }
  return episodes;
}

Dataset generate_dataset(const std::vector<envs::GridTask>& tasks, i64 budget_per_task,
                         u64 seed, const QlearnConfig& cfg) {
  Dataset ds;
  ds.manifest.transitions_per_task = budget_per_task;
  ds.manifest.qlearn = cfg;
  ds.manifest.seed = seed;
  ds.tasks.resize(tasks.size());
#pragma omp parallel for schedule(dynamic)
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    TaskData td;
    td.task_id = static_cast<int>(i);
    td.task = tasks[i];
    char buf[32];
    std::snprintf(buf, sizeof(buf), "task_%03d.jsonl", td.task_id);
    td.file = buf;
    td.episodes = collect_task(tasks[i], td.task_id, budget_per_task, seed, cfg);
    ds.tasks[i] = std::move(td);
  }
  return ds;
}

i64 Dataset::total_transitions() const {
  i64 n = 0;
  for (const auto& t : tasks)
    for (const auto& e : t.episodes) n += static_cast<i64>(e.actions.size());
  return n;
}

const TaskData& Dataset::by_task_id(int task_id) const {
  for (const auto& t : tasks)
    if (t.task_id == task_id) return t;
  throw std::runtime_error("dataset: unknown task_id " + std::to_string(task_id));
}

namespace {

json episode_to_json(const EpisodeRecord& e) {
  json j;
  j["task_id"] = e.task_id;
  j["episode_id"] = e.episode_id;
  json states = json::array();
  for (const auto& s : e.states) states.push_back({s[0], s[1]});
  j["states"] = std::move(states);
  j["actions"] = e.actions;
  j["rewards"] = e.rewards;
  j["total_return"] = e.total_return;
  return j;
}

EpisodeRecord episode_from_json(const json& j) {
  EpisodeRecord e;
  e.task_id = j.at("task_id").get<int>();
  e.episode_id = j.at("episode_id").get<int>();
  for (const auto& s : j.at("states")) e.states.push_back({s.at(0).get<int>(), s.at(1).get<int>()});
  e.actions = j.at("actions").get<std::vector<int>>();
  e.rewards = j.at("rewards").get<std::vector<int>>();
  e.total_return = j.at("total_return").get<int>();
  return e;
}

void validate_episode(const EpisodeRecord& e, const envs::GridTask& task) {
  auto fail = [&](const std::string& what) {
    throw std::runtime_error("dataset: episode " + std::to_string(e.episode_id) +
                             " of task " + std::to_string(e.task_id) + ": " + what);
  };
  if (e.states.size() != e.actions.size() || e.actions.size() != e.rewards.size())
    fail("misaligned state/action/reward lengths");
  if (e.actions.empty()) fail("empty episode");
  if (static_cast<int>(e.actions.size()) > task.episode_len) fail("episode longer than episode_len");
  int sum = std::accumulate(e.rewards.begin(), e.rewards.end(), 0);
  if (sum != e.total_return) fail("total_return does not match rewards");
  for (int a : e.actions)
    if (a < 0 || a >= envs::kNumActions) fail("action out of range");
  for (const auto& s : e.states)
    if (s[0] < 0 || s[0] >= task.width || s[1] < 0 || s[1] >= task.height)
      fail("state outside grid");
  for (int r : e.rewards)
    if (r != 0 && r != 1) fail("reward outside {0,1}");
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& dir) {
  fs::create_directories(dir);
  json m;
  m["format_version"] = ds.manifest.format_version;
  m["transitions_per_task"] = ds.manifest.transitions_per_task;
  m["generator"] = {{"algo", ds.manifest.generator},
                    {"lr", ds.manifest.qlearn.lr},
                    {"gamma", ds.manifest.qlearn.gamma},
                    {"eps_start", ds.manifest.qlearn.eps_start},
                    {"eps_end", ds.manifest.qlearn.eps_end},
                    {"seed", ds.manifest.seed}};
  json tasks = json::array();
  for (const auto& t : ds.tasks) {
    json tj = json::parse(t.task.to_json());
    tj["task_id"] = t.task_id;
    tj["file"] = t.file;
    tasks.push_back(std::move(tj));
  }
  m["tasks"] = std::move(tasks);

  std::ofstream mf(fs::path(dir) / "manifest.json");
  mf << m.dump(2) << "\n";
  if (!mf) throw std::runtime_error("dataset: failed to write manifest");

  for (const auto& t : ds.tasks) {
    std::ofstream f(fs::path(dir) / t.file);
    for (const auto& e : t.episodes) f << episode_to_json(e).dump() << "\n";
    if (!f) throw std::runtime_error("dataset: failed to write " + t.file);
  }
}

Dataset read_dataset(const std::string& dir) {
  std::ifstream mf(fs::path(dir) / "manifest.json");
  if (!mf) throw std::runtime_error("dataset: missing manifest.json in " + dir);
  json m = json::parse(mf);
  Dataset ds;
  if (m.at("format_version").get<std::string>() != kDatasetFormat)
    throw std::runtime_error("dataset: format version mismatch, expected " +
                             std::string(kDatasetFormat));
  ds.manifest.transitions_per_task = m.at("transitions_per_task").get<i64>();
  const json& g = m.at("generator");
  ds.manifest.generator = g.at("algo").get<std::string>();
  ds.manifest.qlearn.lr = g.at("lr").get<double>();
  ds.manifest.qlearn.gamma = g.at("gamma").get<double>();
  ds.manifest.qlearn.eps_start = g.at("eps_start").get<double>();
  ds.manifest.qlearn.eps_end = g.at("eps_end").get<double>();
  ds.manifest.seed = g.at("seed").get<u64>();

  for (const auto& tj : m.at("tasks")) {
    TaskData td;
    td.task_id = tj.at("task_id").get<int>();
    td.task = envs::GridTask::from_json(tj.dump());
    td.file = tj.at("file").get<std::string>();
    std::ifstream f(fs::path(dir) / td.file);
    if (!f) throw std::runtime_error("dataset: missing episode file " + td.file);
    std::string line;
    int prev_episode_id = -1;
    while (std::getline(f, line)) {
      if (line.empty()) continue;
      EpisodeRecord e;
      try {
        e = episode_from_json(json::parse(line));
      } catch (const json::exception& ex) {
        throw std::runtime_error("dataset: bad episode record in " + td.file + ": " + ex.what());
      }
      validate_episode(e, td.task);
      if (e.task_id != td.task_id)
        throw std::runtime_error("dataset: episode " + std::to_string(e.episode_id) +
                                 " has task_id " + std::to_string(e.task_id) +
                                 " but lives in file of task " + std::to_string(td.task_id));
      if (e.episode_id <= prev_episode_id)
        throw std::runtime_error("dataset: episode " + std::to_string(e.episode_id) +
                                 " out of order in " + td.file);
      prev_episode_id = e.episode_id;
      td.episodes.push_back(std::move(e));
    }
    ds.tasks.push_back(std::move(td));
  }
  return ds;
}

}  // namespace radt::datagen
