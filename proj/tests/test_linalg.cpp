#include "osaq/linalg.hpp"

#include <cmath>

#include "doctest.h"
#include "oracles.hpp"

using namespace osaq;
namespace ot = osaq::testing;

TEST_SUITE_BEGIN("linalg");

TEST_CASE("eigh on a diagonal matrix sorts by magnitude") {
  Matrix h(3, 3);
  h(0, 0) = 3.0;
  h(1, 1) = 1.0;
  h(2, 2) = 2.0;
  const EigenDecomposition eig = eigh_symmetric(h);
  REQUIRE(eig.values.size() == 3);
  CHECK(eig.values[0] == doctest::Approx(1.0));
  CHECK(eig.values[1] == doctest::Approx(2.0));
  CHECK(eig.values[2] == doctest::Approx(3.0));
  // Axis-aligned unit eigenvectors: value 1 ↔ e1, value 2 ↔ e2, value 3 ↔ e0.
  CHECK(eig.vectors(1, 0) == doctest::Approx(1.0));
  CHECK(eig.vectors(2, 1) == doctest::Approx(1.0));
  CHECK(eig.vectors(0, 2) == doctest::Approx(1.0));
}

TEST_CASE("eigh of [[2,1],[1,2]] matches the hand-computed spectrum") {
  Matrix h(2, 2);
  h(0, 0) = 2.0;
  h(0, 1) = 1.0;
  h(1, 0) = 1.0;
  h(1, 1) = 2.0;
  const EigenDecomposition eig = eigh_symmetric(h);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  CHECK(eig.values[0] == doctest::Approx(1.0));
  CHECK(eig.values[1] == doctest::Approx(3.0));
  // Sign convention: first entry positive on magnitude ties.
  CHECK(eig.vectors(0, 0) == doctest::Approx(inv_sqrt2));
  CHECK(eig.vectors(1, 0) == doctest::Approx(-inv_sqrt2));
  CHECK(eig.vectors(0, 1) == doctest::Approx(inv_sqrt2));
  CHECK(eig.vectors(1, 1) == doctest::Approx(inv_sqrt2));
}

TEST_CASE("eigh of a rank-1 outer product exposes the null vector") {
  Matrix h(2, 2, 2.0);  // 2·[[1,1],[1,1]]
  const EigenDecomposition eig = eigh_symmetric(h);
  const double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  CHECK(eig.values[0] == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(eig.values[1] == doctest::Approx(4.0));
  CHECK(eig.vectors(0, 0) == doctest::Approx(inv_sqrt2));
  CHECK(eig.vectors(1, 0) == doctest::Approx(-inv_sqrt2));
}

TEST_CASE("eigh rejects non-finite input") {
  Matrix h(2, 2);
  h(0, 1) = h(1, 0) = std::nan("");
  CHECK_THROWS_AS(eigh_symmetric(h), Error);
}

TEST_CASE("eigh orthonormality and reconstruction on random symmetric matrices") {
  Rng rng(42);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(63);
    const Matrix h = ot::random_symmetric(rng, n, 2.0);
    const EigenDecomposition eig = eigh_symmetric(h);

    const Matrix vtv = matmul_atb(eig.vectors, eig.vectors);
    double ortho_err = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        ortho_err = std::max(ortho_err, std::abs(vtv(i, j) - (i == j ? 1.0 : 0.0)));
    CHECK(ortho_err <= 1e-8);

    Matrix vl = eig.vectors;
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t c = 0; c < n; ++c) vl(r, c) *= eig.values[c];
    const Matrix recon = matmul_abt(vl, eig.vectors);
    double recon_err = 0.0;
    for (std::size_t i = 0; i < n * n; ++i)
      recon_err = std::max(recon_err, std::abs(recon.data()[i] - h.data()[i]));
    CHECK(recon_err <= 1e-7 * (1.0 + max_abs(h)));

    for (std::size_t i = 0; i + 1 < n; ++i)
      CHECK(std::abs(eig.values[i]) <= std::abs(eig.values[i + 1]) + 1e-12);
  }
}

TEST_CASE("eigh shift identity: spectrum of H + cI moves by c, vectors fixed") {
  Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 3 + rng.uniform_index(14);
    const Matrix h = ot::random_spd(rng, n, 0.1);
    const double c = 0.5 + rng.uniform();
    Matrix shifted = h;
    for (std::size_t i = 0; i < n; ++i) shifted(i, i) += c;

    const EigenDecomposition base = eigh_symmetric(h);
    const EigenDecomposition moved = eigh_symmetric(shifted);
    for (std::size_t i = 0; i < n; ++i) {
      CHECK(moved.values[i] == doctest::Approx(base.values[i] + c).epsilon(1e-8));
      double dot = 0.0;
      for (std::size_t r = 0; r < n; ++r) dot += moved.vectors(r, i) * base.vectors(r, i);
      CHECK(std::abs(dot) == doctest::Approx(1.0).epsilon(1e-7));
    }
  }
}

TEST_CASE("cholesky_solve identity and diagonal cases") {
  const Matrix eye = Matrix::identity(3);
  const std::vector<double> b = {1.0, -2.0, 3.0};
  const std::vector<double> x = cholesky_solve(eye, b);
  for (std::size_t i = 0; i < 3; ++i) CHECK(x[i] == doctest::Approx(b[i]));

  Matrix d(2, 2);
  d(0, 0) = 4.0;
  d(1, 1) = 9.0;
  const std::vector<double> y = cholesky_solve(d, std::vector<double>{8.0, 27.0});
  CHECK(y[0] == doctest::Approx(2.0));
  CHECK(y[1] == doctest::Approx(3.0));
}

TEST_CASE("cholesky_solve agrees with a Gauss-Jordan inverse oracle") {
  Rng rng(11);
  const Matrix a = ot::random_spd(rng, 5);
  const std::vector<double> rhs = rng.normal_vector(5);
  const std::vector<double> x = cholesky_solve(a, rhs);

  const Matrix inv = ot::gauss_jordan_inverse(a);
  for (std::size_t i = 0; i < 5; ++i) {
    double expect = 0.0;
    for (std::size_t j = 0; j < 5; ++j) expect += inv(i, j) * rhs[j];
    CHECK(std::abs(x[i] - expect) <= 1e-9);
  }
}

TEST_CASE("cholesky_solve recovers a known solution on random SPD systems") {
  Rng rng(13);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(20);
    const Matrix a = ot::random_spd(rng, n);
    const std::vector<double> x0 = rng.normal_vector(n);
    std::vector<double> rhs(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) rhs[i] += a(i, j) * x0[j];

    const std::vector<double> x = cholesky_solve(a, rhs);
    double err = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      err = std::max(err, std::abs(x[i] - x0[i]));
      scale = std::max(scale, std::abs(x0[i]));
    }
    CHECK(err <= 1e-8 * (1.0 + scale));

    double resid = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double ax = 0.0;
      for (std::size_t j = 0; j < n; ++j) ax += a(i, j) * x[j];
      resid = std::max(resid, std::abs(ax - rhs[i]));
    }
    CHECK(resid <= 1e-8 * (1.0 + max_abs(rhs)));
  }
}

TEST_CASE("cholesky flags indefinite input") {
  Matrix a(2, 2);
  a(0, 0) = 1.0;
  a(0, 1) = a(1, 0) = 2.0;
  a(1, 1) = 1.0;
  CHECK_THROWS_AS(cholesky_solve(a, std::vector<double>{1.0, 1.0}), Error);
  try {
    cholesky_solve(a, std::vector<double>{1.0, 1.0});
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::NotPositiveDefinite);
  }
}

TEST_CASE("singular values: identity, zero, and a hand case") {
  const std::vector<double> ones = singular_values_small(Matrix::identity(4));
  for (double s : ones) CHECK(s == doctest::Approx(1.0));

  const std::vector<double> zeros = singular_values_small(Matrix(3, 2));
  for (double s : zeros) CHECK(s == doctest::Approx(0.0));

  Matrix m(2, 2);
  m(0, 0) = 3.0;
  m(1, 0) = 4.0;
  const std::vector<double> sv = singular_values_small(m);
  CHECK(sv[0] == doctest::Approx(5.0));
  CHECK(sv[1] == doctest::Approx(0.0).epsilon(1e-10));
}

TEST_CASE("singular values are invariant under orthogonal maps") {
  Rng rng(21);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t n = 3 + rng.uniform_index(10);
    const Matrix m = ot::random_matrix(rng, n, n);
    const Matrix q = ot::random_orthogonal(rng, n);
    const std::vector<double> base = singular_values_small(m);
    const std::vector<double> rotated = singular_values_small(matmul(q, m));
    REQUIRE(base.size() == rotated.size());
    for (std::size_t i = 0; i < base.size(); ++i)
      CHECK(std::abs(base[i] - rotated[i]) <= 1e-8 * (1.0 + base[0]));
  }
}

TEST_CASE("rng streams are reproducible per seed") {
  Rng a(0), b(0), c(1);
  const std::vector<double> va = a.normal_vector(4);
  const std::vector<double> vb = b.normal_vector(4);
  const std::vector<double> vc = c.normal_vector(4);
  CHECK(va == vb);
  CHECK(va != vc);
}

TEST_CASE("rng normal moments") {
  Rng rng(3);
  const std::size_t n = 100000;
  double sum = 0.0, sum2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.normal();
    sum += x;
    sum2 += x * x;
  }
  const double mean = sum / static_cast<double>(n);
  const double var = sum2 / static_cast<double>(n) - mean * mean;
  CHECK(std::abs(mean) <= 0.02);
  CHECK(std::abs(var - 1.0) <= 0.05);
}

TEST_SUITE_END();
