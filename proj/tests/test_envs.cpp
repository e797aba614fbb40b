#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>
#include <tuple>

#include "radt/grid_env.hpp"

using namespace radt;
using namespace radt::envs;

namespace {

GridTask dark_room(int w, int h, int gx, int gy) {
  GridTask t;
  t.kind = TaskKind::dark_room;
  t.width = w;
  t.height = h;
  t.goal = {gx, gy};
  t.episode_len = w * h;
  return t;
}

GridTask key_door(int w, int h, Cell key, Cell goal) {
  GridTask t;
  t.kind = TaskKind::dark_key_door;
  t.width = w;
  t.height = h;
  t.key = key;
  t.goal = goal;
  t.episode_len = w * h;
  return t;
}

}  // namespace

TEST_CASE("reset starts at the origin") {
  GridEnv env(dark_room(10, 10, 4, 6));
  Cell c = env.reset();
  CHECK(c.x == 0);
  CHECK(c.y == 0);

  GridEnv kd(key_door(20, 20, {3, 3}, {5, 5}));
  Cell c2 = kd.reset();
  CHECK(c2.x == 0);
  CHECK(c2.y == 0);
  CHECK_FALSE(kd.has_key());

  // reset is idempotent
  kd.step(kRight);
  Cell a = kd.reset();
  Cell b = kd.reset();
  CHECK(a == b);
  CHECK(kd.t() == 0);
}

TEST_CASE("border clamping") {
  GridEnv env(dark_room(10, 10, 4, 6));
  env.reset();
  StepResult r = env.step(kLeft);
  CHECK(r.obs == Cell{0, 0});
  CHECK(r.reward == 0);
  r = env.step(kUp);
  CHECK(r.obs == Cell{0, 0});
}

TEST_CASE("dark_room return matches BFS oracle on a straight walk") {
  // goal (0,3): landing on the goal at step 3 pays, as does every stay after
  GridEnv env(dark_room(10, 10, 0, 3));
  env.reset();
  int total = 0;
  total += env.step(kDown).reward;
  total += env.step(kDown).reward;
  total += env.step(kDown).reward;
  for (int i = 0; i < 97; ++i) total += env.step(kStay).reward;
  CHECK(env.done());
  CHECK(total == 100 - 3 + 1);
  CHECK(optimal_return(dark_room(10, 10, 0, 3)) == total);
}

TEST_CASE("key_door reward rule by hand simulation") {
  GridEnv env(key_door(10, 10, {0, 1}, {0, 2}));
  env.reset();
  StepResult r = env.step(kDown);  // onto key
  CHECK(r.reward == 1);
  CHECK(env.has_key());
  r = env.step(kDown);  // onto door with key
  CHECK(r.reward == 1);
  r = env.step(kStay);  // stay on door
  CHECK(r.reward == 1);
  // leaving the door and revisiting the key cell never pays again
  r = env.step(kUp);
  CHECK(r.reward == 0);
  // optimal route: down (key, +1), down (door, +1), stay 98x
  CHECK(optimal_return(key_door(10, 10, {0, 1}, {0, 2})) == 1 + 99);
}

TEST_CASE("stepping a finished episode fails") {
  GridTask t = dark_room(2, 2, 1, 1);
  GridEnv env(t);
  env.reset();
  for (int i = 0; i < t.episode_len; ++i) env.step(kStay);
  CHECK(env.done());
  CHECK_THROWS_WITH_AS(env.step(kStay), "episode exhausted", std::runtime_error);
}

TEST_CASE("optimal_return oracle values") {
  CHECK(optimal_return(dark_room(10, 10, 0, 1)) == 100);
  CHECK(optimal_return(dark_room(10, 10, 0, 0)) == 100);
  CHECK(optimal_return(dark_room(10, 10, 9, 9)) == 100 - 18 + 1);
  // BFS distance equals manhattan distance on the open grid
  GridTask t = dark_room(10, 10, 4, 6);
  CHECK(bfs_distance(t, {0, 0}, {4, 6}) == 10);
}

TEST_CASE("position stays in bounds under random action fuzz") {
  GridTask t = dark_room(7, 5, 3, 3);
  t.episode_len = 10000;
  GridEnv env(t);
  env.reset();
  Rng rng(123);
  for (int i = 0; i < 10000; ++i) {
    StepResult r = env.step(static_cast<int>(rng.uniform_int(kNumActions)));
    CHECK(r.obs.x >= 0);
    CHECK(r.obs.x < 7);
    CHECK(r.obs.y >= 0);
    CHECK(r.obs.y < 5);
  }
}

TEST_CASE("episode return never exceeds optimal_return") {
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    GridTask t = dark_room(6, 6, static_cast<int>(rng.uniform_int(6)),
                           static_cast<int>(rng.uniform_int(6)));
    GridEnv env(t);
    env.reset();
    int total = 0;
    while (!env.done()) total += env.step(static_cast<int>(rng.uniform_int(5))).reward;
    CHECK(total <= optimal_return(t));
  }
}

TEST_CASE("key_door rollouts that never reach the key return 0") {
  Rng rng(11);
  GridTask t = key_door(8, 8, {7, 7}, {6, 7});
  for (int trial = 0; trial < 10; ++trial) {
    GridEnv env(t);
    env.reset();
    int total = 0;
    bool touched_key = false;
    while (!env.done()) {
      total += env.step(static_cast<int>(rng.uniform_int(5))).reward;
      if (env.has_key()) touched_key = true;
    }
    if (!touched_key) CHECK(total == 0);
  }
}

TEST_CASE("determinism: same action stream, same results") {
  GridTask t = key_door(9, 9, {2, 5}, {7, 1});
  std::vector<int> actions;
  Rng rng(99);
  for (int i = 0; i < t.episode_len; ++i)
    actions.push_back(static_cast<int>(rng.uniform_int(5)));
  auto run = [&] {
    GridEnv env(t);
    env.reset();
    std::vector<StepResult> res;
    for (int a : actions) res.push_back(env.step(a));
    return res;
  };
  auto a = run();
  auto b = run();
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].obs == b[i].obs);
    CHECK(a[i].reward == b[i].reward);
    CHECK(a[i].done == b[i].done);
  }
}

TEST_CASE("task_split partitions the dark_room task space") {
  auto [train, eval] = task_split(TaskKind::dark_room, 10, 10, 80, 20, 0);
  CHECK(train.size() == 80);
  CHECK(eval.size() == 20);
  std::set<std::pair<int, int>> seen;
  for (const auto& t : train) seen.insert({t.goal.x, t.goal.y});
  for (const auto& t : eval) seen.insert({t.goal.x, t.goal.y});
  CHECK(seen.size() == 100);  // disjoint and exhaustive on 10x10

  auto [train2, eval2] = task_split(TaskKind::dark_room, 10, 10, 80, 20, 0);
  for (std::size_t i = 0; i < train.size(); ++i) CHECK(train[i].goal == train2[i].goal);
  for (std::size_t i = 0; i < eval.size(); ++i) CHECK(eval[i].goal == eval2[i].goal);
}

TEST_CASE("task_split rejects oversubscription") {
  CHECK_THROWS_AS(task_split(TaskKind::dark_room, 3, 3, 8, 2, 0), std::runtime_error);
}

TEST_CASE("task_split draws disjoint key_door pairs") {
  auto [train, eval] = task_split(TaskKind::dark_key_door, 10, 10, 80, 20, 5);
  CHECK(train.size() == 80);
  CHECK(eval.size() == 20);
  std::set<std::tuple<int, int, int, int>> seen;
  auto ins = [&](const GridTask& t) {
    CHECK(t.key.has_value());
    CHECK_FALSE(*t.key == t.goal);
    seen.insert({t.key->x, t.key->y, t.goal.x, t.goal.y});
  };
  for (const auto& t : train) ins(t);
  for (const auto& t : eval) ins(t);
  CHECK(seen.size() == 100);
}

TEST_CASE("task json round-trip") {
  GridTask t = key_door(10, 10, {2, 3}, {4, 5});
  GridTask u = GridTask::from_json(t.to_json());
  CHECK(u.kind == t.kind);
  CHECK(u.goal == t.goal);
  CHECK(u.key == t.key);
  CHECK(u.episode_len == t.episode_len);
}
