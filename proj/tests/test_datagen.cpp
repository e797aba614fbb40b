#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <numeric>

#include "radt/dataset.hpp"

using namespace radt;
using namespace radt::datagen;

namespace {

envs::GridTask dark_room(int w, int h, int gx, int gy) {
  envs::GridTask t;
  t.kind = envs::TaskKind::dark_room;
  t.width = w;
  t.height = h;
  t.goal = {gx, gy};
  t.episode_len = w * h;
  return t;
}

// independent O(T^2) suffix-sum oracle
std::vector<int> rtg_oracle(const std::vector<int>& rewards) {
  std::vector<int> out(rewards.size());
  for (std::size_t t = 0; t < rewards.size(); ++t)
    for (std::size_t u = t; u < rewards.size(); ++u) out[t] += rewards[u];
  return out;
}

}  // namespace

TEST_CASE("compute_rtg hand values") {
  CHECK(compute_rtg({0, 0, 1}) == std::vector<int>{1, 1, 1});
  CHECK(compute_rtg({1, 1, 1}) == std::vector<int>{3, 2, 1});
  CHECK_THROWS_AS(compute_rtg({}), std::runtime_error);
}

TEST_CASE("compute_rtg matches the quadratic suffix-sum oracle") {
  Rng rng(42);
  for (int rep = 0; rep < 1000; ++rep) {
    int n = 1 + static_cast<int>(rng.uniform_int(100));
    std::vector<int> r(n);
    for (auto& v : r) v = static_cast<int>(rng.uniform_int(2));
    CHECK(compute_rtg(r) == rtg_oracle(r));
  }
}

TEST_CASE("collect_task spends the budget exactly") {
  auto t = dark_room(5, 5, 2, 3);
  auto eps = collect_task(t, 0, 25 * 7, 1);  // exactly 7 episodes
  CHECK(eps.size() == 7);
  i64 total = 0;
  for (const auto& e : eps) total += static_cast<i64>(e.actions.size());
  CHECK(total == 25 * 7);

  // budget == episode_len -> exactly one episode
  auto one = collect_task(t, 0, 25, 1);
  CHECK(one.size() == 1);

  // non-multiple budget -> final episode truncated
  auto trunc = collect_task(t, 0, 60, 1);
  i64 total2 = 0;
  for (const auto& e : trunc) total2 += static_cast<i64>(e.actions.size());
  CHECK(total2 == 60);
  CHECK(trunc.back().actions.size() == 10);
}

TEST_CASE("collect_task streams are byte-identical for a seed") {
  auto t = dark_room(5, 5, 4, 4);
  auto a = collect_task(t, 3, 500, 77);
  auto b = collect_task(t, 3, 500, 77);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].states == b[i].states);
    CHECK(a[i].actions == b[i].actions);
    CHECK(a[i].rewards == b[i].rewards);
  }
}

TEST_CASE("replay stream has the learning-curve shape") {
  // later episodes earn more than early ones, across 3 seeds
  auto t = dark_room(10, 10, 4, 6);
  for (u64 seed : {1ULL, 2ULL, 3ULL}) {
    auto eps = collect_task(t, 0, 20000, seed);
    REQUIRE(eps.size() == 200);
    double early = 0, late = 0;
    for (int i = 0; i < 100; ++i) early += eps[i].total_return;
    for (int i = 100; i < 200; ++i) late += eps[i].total_return;
    CHECK(late / 100.0 > early / 100.0);
  }
}

TEST_CASE("stored actions and states stay in range") {
  auto t = dark_room(6, 4, 5, 3);
  auto eps = collect_task(t, 0, 24 * 20, 5);
  for (const auto& e : eps) {
    CHECK(std::accumulate(e.rewards.begin(), e.rewards.end(), 0) == e.total_return);
    for (int a : e.actions) {
      CHECK(a >= 0);
      CHECK(a < 5);
    }
    for (const auto& s : e.states) {
      CHECK(s[0] >= 0);
      CHECK(s[0] < 6);
      CHECK(s[1] >= 0);
      CHECK(s[1] < 4);
    }
  }
}

TEST_CASE("dataset write/read round-trip") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "radt_ds_test";
  fs::remove_all(dir);

  std::vector<envs::GridTask> tasks{dark_room(5, 5, 1, 1), dark_room(5, 5, 3, 2)};
  Dataset ds = generate_dataset(tasks, 25 * 10, 9);
  write_dataset(ds, dir.string());
  Dataset rt = read_dataset(dir.string());

  REQUIRE(rt.tasks.size() == ds.tasks.size());
  CHECK(rt.manifest.transitions_per_task == ds.manifest.transitions_per_task);
  CHECK(rt.manifest.seed == ds.manifest.seed);
  for (std::size_t i = 0; i < ds.tasks.size(); ++i) {
    REQUIRE(rt.tasks[i].episodes.size() == ds.tasks[i].episodes.size());
    CHECK(rt.tasks[i].task.goal == ds.tasks[i].task.goal);
    for (std::size_t j = 0; j < ds.tasks[i].episodes.size(); ++j) {
      CHECK(rt.tasks[i].episodes[j].states == ds.tasks[i].episodes[j].states);
      CHECK(rt.tasks[i].episodes[j].actions == ds.tasks[i].episodes[j].actions);
      CHECK(rt.tasks[i].episodes[j].rewards == ds.tasks[i].episodes[j].rewards);
      CHECK(rt.tasks[i].episodes[j].total_return == ds.tasks[i].episodes[j].total_return);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("corrupted episode record is rejected with its episode_id") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "radt_ds_corrupt";
  fs::remove_all(dir);
  Dataset ds = generate_dataset({dark_room(4, 4, 2, 2)}, 16 * 3, 2);
  write_dataset(ds, dir.string());

  // drop one action from the second episode
  auto file = dir / ds.tasks[0].file;
  std::ifstream in(file);
  std::string l0, l1, l2;
  std::getline(in, l0);
  std::getline(in, l1);
  std::getline(in, l2);
  in.close();
  auto pos = l1.find("\"actions\":[");
  REQUIRE(pos != std::string::npos);
  l1.erase(pos + 11, 2);  // remove the first "a," entry
  std::ofstream out(file);
  out << l0 << "\n" << l1 << "\n" << l2 << "\n";
  out.close();

  try {
    read_dataset(dir.string());
    FAIL("expected a read error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("episode 1") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("version mismatch is rejected") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "radt_ds_version";
  fs::remove_all(dir);
  Dataset ds = generate_dataset({dark_room(4, 4, 2, 2)}, 16, 2);
  write_dataset(ds, dir.string());
  auto mf = dir / "manifest.json";
  std::ifstream in(mf);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  in.close();
  auto pos = text.find("radt-ds-1");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 9, "radt-ds-9");
  std::ofstream out(mf);
  out << text;
  out.close();
  CHECK_THROWS_AS(read_dataset(dir.string()), std::runtime_error);
  fs::remove_all(dir);
}

TEST_CASE("empty dataset round-trips") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "radt_ds_empty";
  fs::remove_all(dir);
  Dataset ds;
  ds.manifest.transitions_per_task = 0;
  write_dataset(ds, dir.string());
  Dataset rt = read_dataset(dir.string());
  CHECK(rt.tasks.empty());
  fs::remove_all(dir);
}
