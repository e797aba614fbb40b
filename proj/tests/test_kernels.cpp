#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <omp.h>

#include <cstring>
#include <tuple>

#include "radt/common.hpp"
#include "radt/kernels.hpp"

using namespace radt;

namespace {

template <typename T>
std::vector<T> random_vec(std::size_t n, Rng& rng) {
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return v;
}

// naive triple loop, independent of the tiled kernels
template <typename T>
std::vector<T> matmul_naive(const std::vector<T>& a, const std::vector<T>& b, int m, int k,
                            int n) {
  std::vector<T> c(static_cast<std::size_t>(m) * n, T(0));
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p)
      for (int j = 0; j < n; ++j)
        c[static_cast<std::size_t>(i) * n + j] +=
            a[static_cast<std::size_t>(i) * k + p] * b[static_cast<std::size_t>(p) * n + j];
  return c;
}

}  // namespace

TEST_CASE("omp matmul is bit-identical to the serial reference") {
  Rng rng(1);
  for (auto [m, k, n] : {std::tuple<int,int,int>{64, 16, 32}, {37, 5, 7}, {128, 64, 192},
                         {1, 1, 1}, {9, 64, 64}}) {
    auto a = random_vec<float>(static_cast<std::size_t>(m) * k, rng);
    auto b = random_vec<float>(static_cast<std::size_t>(k) * n, rng);
    std::vector<float> c_omp(static_cast<std::size_t>(m) * n),
        c_ser(static_cast<std::size_t>(m) * n);
    kernels::matmul(a.data(), b.data(), c_omp.data(), m, k, n);
    kernels::matmul_serial(a.data(), b.data(), c_ser.data(), m, k, n);
    CHECK(std::memcmp(c_omp.data(), c_ser.data(), c_omp.size() * sizeof(float)) == 0);

    // and close to the naive triple loop
    auto c_ref = matmul_naive(a, b, m, k, n);
    for (std::size_t i = 0; i < c_ref.size(); ++i)
      CHECK(c_omp[i] == doctest::Approx(c_ref[i]).epsilon(1e-4));
  }
}

TEST_CASE("matmul results do not depend on the thread count") {
  Rng rng(2);
  int m = 100, k = 48, n = 96;
  auto a = random_vec<float>(static_cast<std::size_t>(m) * k, rng);
  auto b = random_vec<float>(static_cast<std::size_t>(k) * n, rng);
  std::vector<float> c1(static_cast<std::size_t>(m) * n), c4(c1.size());
  int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  kernels::matmul(a.data(), b.data(), c1.data(), m, k, n);
  omp_set_num_threads(4);
  kernels::matmul(a.data(), b.data(), c4.data(), m, k, n);
  omp_set_num_threads(saved);
  CHECK(std::memcmp(c1.data(), c4.data(), c1.size() * sizeof(float)) == 0);
}

TEST_CASE("matmul_nt matches its serial reference and the naive form") {
  Rng rng(3);
  int m = 50, k = 24, n = 40;
  auto a = random_vec<double>(static_cast<std::size_t>(m) * k, rng);
  auto bt = random_vec<double>(static_cast<std::size_t>(n) * k, rng);  // B [n,k]
  std::vector<double> c_omp(static_cast<std::size_t>(m) * n), c_ser(c_omp.size());
  kernels::matmul_nt(a.data(), bt.data(), c_omp.data(), m, k, n);
  kernels::matmul_nt_serial(a.data(), bt.data(), c_ser.data(), m, k, n);
  CHECK(c_omp == c_ser);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0;
      for (int p = 0; p < k; ++p)
        s += a[static_cast<std::size_t>(i) * k + p] * bt[static_cast<std::size_t>(j) * k + p];
      CHECK(c_omp[static_cast<std::size_t>(i) * n + j] == doctest::Approx(s).epsilon(1e-10));
    }
}

TEST_CASE("matmul_tn accumulates A^T B") {
  Rng rng(4);
  int m = 33, k = 12, n = 17;
  auto a = random_vec<double>(static_cast<std::size_t>(m) * k, rng);
  auto b = random_vec<double>(static_cast<std::size_t>(m) * n, rng);
  std::vector<double> c(static_cast<std::size_t>(k) * n, 1.0);  // preloaded
  std::vector<double> scratch;
  kernels::matmul_tn(a.data(), b.data(), c.data(), m, k, n, true, scratch);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 1.0;
      for (int p = 0; p < m; ++p)
        s += a[static_cast<std::size_t>(p) * k + i] * b[static_cast<std::size_t>(p) * n + j];
      CHECK(c[static_cast<std::size_t>(i) * n + j] == doctest::Approx(s).epsilon(1e-10));
    }
}

TEST_CASE("transpose round-trips") {
  Rng rng(5);
  int m = 45, n = 23;
  auto a = random_vec<float>(static_cast<std::size_t>(m) * n, rng);
  std::vector<float> at(a.size()), back(a.size());
  kernels::transpose(a.data(), at.data(), m, n);
  kernels::transpose(at.data(), back.data(), n, m);
  CHECK(a == back);
  std::vector<float> at_ser(a.size());
  kernels::transpose_serial(a.data(), at_ser.data(), m, n);
  CHECK(at == at_ser);
}

TEST_CASE("cosine scores agree with a scalar reference") {
  Rng rng(6);
  int count = 500, dim = 16;
  auto keys = random_vec<float>(static_cast<std::size_t>(count) * dim, rng);
  auto q = random_vec<float>(dim, rng);
  std::vector<float> norms(count);
  for (int i = 0; i < count; ++i) {
    double s = 0;
    for (int j = 0; j < dim; ++j) {
      float v = keys[static_cast<std::size_t>(i) * dim + j];
      s += static_cast<double>(v) * v;
    }
    norms[i] = static_cast<float>(std::sqrt(s));
  }
  std::vector<float> s_omp(count), s_ser(count);
  kernels::cosine_scores(q.data(), keys.data(), norms.data(), s_omp.data(), count, dim);
  kernels::cosine_scores_serial(q.data(), keys.data(), norms.data(), s_ser.data(), count,
                                dim);
  CHECK(s_omp == s_ser);
  for (int i = 0; i < count; ++i) {
    CHECK(s_omp[i] <= 1.0f + 1e-5f);
    CHECK(s_omp[i] >= -1.0f - 1e-5f);
  }
  // zero-norm keys score zero
  std::vector<float> zkey(dim, 0.0f), znorm{0.0f};
  float zs;
  kernels::cosine_scores(q.data(), zkey.data(), znorm.data(), &zs, 1, dim);
  CHECK(zs == 0.0f);
}
