#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "radt/common.hpp"

namespace radt::envs {

enum class TaskKind { dark_room, dark_key_door };

std::string to_string(TaskKind k);
TaskKind task_kind_from_string(const std::string& s);

struct Cell {
  int x = 0;
  int y = 0;
  bool operator==(const Cell&) const = default;
};

struct GridTask {
  TaskKind kind = TaskKind::dark_room;
  int width = 10;
  int height = 10;
  Cell goal;
  std::optional<Cell> key;  // key_door only
  int episode_len = 0;      // defaults to width * height

  void validate() const;
  std::string to_json() const;
  static GridTask from_json(const std::string& text);
};

// Action encoding is part of the on-disk dataset contract:
// 0=up(y-1) 1=down(y+1) 2=left(x-1) 3=right(x+1) 4=stay.
inline constexpr int kNumActions = 5;
enum Action { kUp = 0, kDown = 1, kLeft = 2, kRight = 3, kStay = 4 };

struct StepResult {
  Cell obs;
  int reward = 0;  // {0, 1}
  bool done = false;
};

// Deterministic grid world. The observation exposes only the x-y position;
// goal, key, and has_key stay hidden from the agent.
class GridEnv {
 public:
  explicit GridEnv(const GridTask& task);

  Cell reset();
  StepResult step(int action);

  const GridTask& task() const { return task_; }
  int t() const { return t_; }
  bool done() const { return t_ >= task_.episode_len; }
  bool has_key() const { return has_key_; }
  Cell pos() const { return pos_; }

 private:
  GridTask task_;
  Cell pos_;
  bool has_key_ = false;
  int t_ = 0;
};

// Deterministic 80/20-style split over the task space. Dark-room tasks are
// goal cells; key-door tasks are (key, goal) cell pairs with key != goal.
// Sets are disjoint and reproducible for a given seed.
std::pair<std::vector<GridTask>, std::vector<GridTask>> task_split(
    TaskKind kind, int width, int height, int n_train, int n_eval, u64 seed);

// Best achievable episode return, from a BFS distance oracle.
int optimal_return(const GridTask& task);

// BFS shortest path length between two cells on the open grid.
int bfs_distance(const GridTask& task, Cell from, Cell to);

}  // namespace radt::envs
