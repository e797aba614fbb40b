#include "radt/grid_env.hpp"

#include <algorithm>
#include <deque>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace radt::envs {

using nlohmann::json;

std::string to_string(TaskKind k) {
  return k == TaskKind::dark_room ? "dark_room" : "dark_key_door";
}

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "dark_room") return TaskKind::dark_room;
  if (s == "dark_key_door") return TaskKind::dark_key_door;
  throw std::runtime_error("unknown task kind: " + s);
}

void GridTask::validate() const {
  if (width <= 0 || height <= 0) throw std::runtime_error("task: non-positive grid size");
  if (episode_len <= 0) throw std::runtime_error("task: non-positive episode_len");
  if (goal.x < 0 || goal.x >= width || goal.y < 0 || goal.y >= height)
    throw std::runtime_error("task: goal outside grid");
  if (kind == TaskKind::dark_key_door) {
    if (!key) throw std::runtime_error("task: key_door task without key");
    if (key->x < 0 || key->x >= width || key->y < 0 || key->y >= height)
      throw std::runtime_error("task: key outside grid");
    if (*key == goal) throw std::runtime_error("task: key equals goal");
  } else if (key) {
    throw std::runtime_error("task: dark_room task with key");
  }
}

std::string GridTask::to_json() const {
  json j;
  j["kind"] = to_string(kind);
  j["width"] = width;
  j["height"] = height;
  j["goal"] = {goal.x, goal.y};
  if (key)
    j["key"] = {key->x, key->y};
  else
    j["key"] = nullptr;
  j["episode_len"] = episode_len;
  return j.dump();
}

GridTask GridTask::from_json(const std::string& text) {
  json j = json::parse(text);
  GridTask t;
  t.kind = task_kind_from_string(j.at("kind").get<std::string>());
  t.width = j.at("width").get<int>();
  t.height = j.at("height").get<int>();
  t.goal = {j.at("goal").at(0).get<int>(), j.at("goal").at(1).get<int>()};
  if (!j.at("key").is_null())
    t.key = Cell{j.at("key").at(0).get<int>(), j.at("key").at(1).get<int>()};
  t.episode_len = j.at("episode_len").get<int>();
  t.validate();
  return t;
}

GridEnv::GridEnv(const GridTask& task) : task_(task) {
  if (task_.episode_len == 0) task_.episode_len = task_.width * task_.height;
  task_.validate();
  reset();
}

Cell GridEnv::reset() {
  pos_ = {0, 0};
  has_key_ = false;
  t_ = 0;
  return pos_;
}

StepResult GridEnv::step(int action) {
  if (done()) throw std::runtime_error("episode exhausted");
  if (action < 0 || action >= kNumActions) throw std::runtime_error("invalid action");
  switch (action) {
    case kUp: pos_.y = std::max(0, pos_.y - 1); break;
    case kDown: pos_.y = std::min(task_.height - 1, pos_.y + 1); break;
    case kLeft: pos_.x = std::max(0, pos_.x - 1); break;
    case kRight: pos_.x = std::min(task_.width - 1, pos_.x + 1); break;
    case kStay: break;
  }
  ++t_;

  int reward = 0;
  if (task_.kind == TaskKind::dark_room) {
    reward = pos_ == task_.goal ? 1 : 0;
  } else {
    if (!has_key_ && pos_ == *task_.key) {
      // has_key is monotone within an episode, so the +1 fires exactly once
      has_key_ = true;
      reward = 1;
    } else if (has_key_ && pos_ == task_.goal) {
      reward = 1;
    }
  }
  return {pos_, reward, done()};
}

std::pair<std::vector<GridTask>, std::vector<GridTask>> task_split(
    TaskKind kind, int width, int height, int n_train, int n_eval, u64 seed) {
  const int cells = width * height;
  const int episode_len = cells;
  std::vector<GridTask> pool;
  if (kind == TaskKind::dark_room) {
    pool.reserve(cells);
    for (int y = 0; y < height; ++y)
      for (int x = 0; x < width; ++x) {
        GridTask t;
        t.kind = kind;
        t.width = width;
        t.height = height;
        t.goal = {x, y};
        t.episode_len = episode_len;
        pool.push_back(t);
      }
  } else {
    // (key, goal) pairs, key != goal: sampling the full combinatorial space
    // up front would be quadratic in cells, so draw pairs directly.
    Rng rng(derive_seed(seed, "task_pool"));
    std::vector<char> seen(static_cast<std::size_t>(cells) * cells, 0);
    const int want = n_train + n_eval;
    const i64 space = static_cast<i64>(cells) * cells - cells;
    if (want > space) throw std::runtime_error("task_split: insufficient distinct tasks");
    while (static_cast<int>(pool.size()) < want) {
      int k = static_cast<int>(rng.uniform_int(cells));
      int g = static_cast<int>(rng.uniform_int(cells));
      if (k == g) continue;
      std::size_t id = static_cast<std::size_t>(k) * cells + g;
      if (seen[id]) continue;
      seen[id] = 1;
      GridTask t;
      t.kind = kind;
      t.width = width;
      t.height = height;
      t.key = Cell{k % width, k / width};
      t.goal = {g % width, g / width};
      t.episode_len = episode_len;
      pool.push_back(t);
    }
  }

  if (n_train + n_eval > static_cast<int>(pool.size()))
    throw std::runtime_error("task_split: insufficient distinct tasks");

  Rng rng(derive_seed(seed, "task_split"));
  // Fisher-Yates, deterministic for a given seed
  for (std::size_t i = pool.size(); i > 1; --i) {
    std::size_t j = rng.uniform_int(i);
    std::swap(pool[i - 1], pool[j]);
  }
  std::vector<GridTask> train(pool.begin(), pool.begin() + n_train);
  std::vector<GridTask> eval(pool.begin() + n_train, pool.begin() + n_train + n_eval);
  return {std::move(train), std::move(eval)};
}

int bfs_distance(const GridTask& task, Cell from, Cell to) {
  if (from == to) return 0;
  std::vector<int> dist(static_cast<std::size_t>(task.width) * task.height, -1);
  auto id = [&](Cell c) { return static_cast<std::size_t>(c.y) * task.width + c.x; };
  std::deque<Cell> q{from};
  dist[id(from)] = 0;
  while (!q.empty()) {
    Cell c = q.front();
    q.pop_front();
    const Cell nbrs[4] = {{c.x, c.y - 1}, {c.x, c.y + 1}, {c.x - 1, c.y}, {c.x + 1, c.y}};
    for (const Cell& n : nbrs) {
      if (n.x < 0 || n.x >= task.width || n.y < 0 || n.y >= task.height) continue;
      if (dist[id(n)] >= 0) continue;
      dist[id(n)] = dist[id(c)] + 1;
      if (n == to) return dist[id(n)];
      q.push_back(n);
    }
  }
  throw std::runtime_error("optimal_return: unreachable goal");
}

int optimal_return(const GridTask& task) {
  GridTask t = task;
  if (t.episode_len == 0) t.episode_len = t.width * t.height;
  t.validate();
  // Rewards are granted on landing, so the arrival step itself pays: a goal
  // at BFS distance d yields reward on steps d..episode_len (or on every
  // step when d = 0, since staying lands on the goal again).
  if (t.kind == TaskKind::dark_room) {
    // a goal on the start cell still needs one landing move ('stay')
    int d = std::max(1, bfs_distance(t, {0, 0}, t.goal));
    return std::max(0, t.episode_len - d + 1);
  }
  int d1 = std::max(1, bfs_distance(t, {0, 0}, *t.key));
  int d2 = bfs_distance(t, *t.key, t.goal);  // key != goal, so d2 >= 1
  int key_reward = d1 <= t.episode_len ? 1 : 0;
  return key_reward + std::max(0, t.episode_len - (d1 + d2) + 1);
}

}  // namespace radt::envs
