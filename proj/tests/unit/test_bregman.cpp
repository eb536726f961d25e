#include <gtest/gtest.h>

#include <filesystem>

#include "metamd/bregman.hpp"
#include "metamd/errors.hpp"
#include "oracles.hpp"

using namespace metamd;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

Matrix rows(std::initializer_list<std::initializer_list<double>> rs) {
  Matrix m(static_cast<Eigen::Index>(rs.size()), static_cast<Eigen::Index>(rs.begin()->size()));
  Eigen::Index r = 0;
  for (auto row : rs) {
    Eigen::Index c = 0;
    for (double x : row) m(r, c++) = x;
    ++r;
  }
  return m;
}

Vector random_vector(RngStream& rng, Eigen::Index n, double scale = 1.0) {
  Vector v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = scale * rng.normal();
  return v;
}

DiagonalMahalanobisSet random_set(RngStream& rng, Eigen::Index n, Eigen::Index kappa) {
  Matrix raw(n, kappa);
  for (Eigen::Index j = 0; j < n; ++j)
    for (Eigen::Index i = 0; i < kappa; ++i) raw(j, i) = rng.uniform(0.5, 2.0) * (rng.uniform() < 0.5 ? -1 : 1);
  return DiagonalMahalanobisSet(raw);
}

}  // namespace

TEST(ActiveIndex, Examples) {
  EXPECT_EQ(active_index(DiagonalMahalanobisSet::ones(1, 3), vec({1, 2, 3})), 0);
  const DiagonalMahalanobisSet m(rows({{1, 1}, {2, 1}}));
  EXPECT_EQ(active_index(m, vec({1, 0})), 1);
}

TEST(ActiveIndex, TiesGoToLowestIndex) {
  const DiagonalMahalanobisSet m(rows({{1, 2}, {2, 1}}));
  EXPECT_EQ(active_index(m, vec({1, 1})), 0);
  EXPECT_EQ(active_index(m, Vector::Zero(2)), 0);
}

TEST(ActiveIndex, ScaleInvariance) {
  RngStream rng(1);
  for (int i = 0; i < 100; ++i) {
    const auto m = random_set(rng, 3, 4);
    const Vector theta = random_vector(rng, 4);
    EXPECT_EQ(active_index(DiagonalMahalanobisSet(3.7 * m.raw()), theta), active_index(m, theta));
  }
}

TEST(ActiveIndex, LengthMismatchThrows) {
  EXPECT_THROW(active_index(DiagonalMahalanobisSet::ones(2, 3), Vector::Zero(2)), ArgumentError);
}

TEST(Phi, Examples) {
  EXPECT_DOUBLE_EQ(phi_value(DiagonalMahalanobisSet::ones(3, 2), vec({3, 4})), 12.5);
  EXPECT_DOUBLE_EQ(phi_value(DiagonalMahalanobisSet(rows({{1, 3}})), vec({2, 0})), 2.0);
  RngStream rng(2);
  const auto m = random_set(rng, 3, 5);
  const Vector theta = random_vector(rng, 5);
  EXPECT_NEAR(phi_value(m, 2 * theta), 4 * phi_value(m, theta), 1e-12 * phi_value(m, theta));
}

TEST(GradPhi, Examples) {
  const Vector theta = vec({1, -2, 3});
  EXPECT_EQ(grad_phi(DiagonalMahalanobisSet::ones(2, 3), theta), theta);
  EXPECT_EQ(grad_phi(DiagonalMahalanobisSet::ones(2, 3), Vector::Zero(3)), Vector::Zero(3));
}

TEST(GradPhi, MatchesFiniteDifferencesAwayFromBoundaries) {
  RngStream rng(3);
  int checked = 0;
  while (checked < 50) {
    const auto m = random_set(rng, 3, 4);
    const Vector theta = random_vector(rng, 4);
    if (oracle::activation_gap(m, theta) <= 1e-3) continue;
    const Vector fd = oracle::fd_gradient([&](const Vector& t) { return phi_value(m, t); }, theta, 1e-7);
    EXPECT_LE((grad_phi(m, theta) - fd).cwiseAbs().maxCoeff(), 1e-6);
    ++checked;
  }
}

TEST(Bregman, Examples) {
  const Vector a = vec({1, 2}), b = vec({-1, 0.5});
  EXPECT_NEAR(bregman_div(DiagonalMahalanobisSet::ones(1, 2), a, b), 0.5 * (a - b).squaredNorm(), 1e-15);
  EXPECT_DOUBLE_EQ(bregman_div(DiagonalMahalanobisSet(rows({{1, 3}})), vec({2, 0}), Vector::Zero(2)), 2.0);
  RngStream rng(4);
  const auto m = random_set(rng, 3, 3);
  const Vector x = random_vector(rng, 3);
  EXPECT_EQ(bregman_div(m, x, x), 0.0);
}

TEST(Bregman, NonNegativeAndStronglyConvex) {
  RngStream rng(5);
  for (int i = 0; i < 1000; ++i) {
    const auto m = random_set(rng, 3, 4);
    const Vector x = random_vector(rng, 4), y = random_vector(rng, 4);
    const double b = bregman_div(m, x, y);
    EXPECT_GE(b, -1e-12);
    EXPECT_GE(b, 0.5 * lambda_strong_convexity(m) * (x - y).squaredNorm() - 1e-10);
  }
}

TEST(Bregman, SingleMatrixIdentityIsExact) {
  RngStream rng(6);
  for (int i = 0; i < 100; ++i) {
    const auto m = random_set(rng, 1, 3);
    const Vector a = random_vector(rng, 3), b = random_vector(rng, 3);
    double expected = 0;
    for (int k = 0; k < 3; ++k) expected += m.raw()(0, k) * m.raw()(0, k) * (a[k] - b[k]) * (a[k] - b[k]);
    EXPECT_NEAR(bregman_div(m, a, b), 0.5 * expected, 1e-12 * std::max(1.0, expected));
  }
}

TEST(Lambda, Examples) {
  EXPECT_EQ(lambda_strong_convexity(DiagonalMahalanobisSet(rows({{1, 2}, {0.5, 3}}))), 0.25);
  EXPECT_EQ(lambda_strong_convexity(DiagonalMahalanobisSet::ones(2, 2)), 1.0);
  EXPECT_EQ(lambda_strong_convexity(DiagonalMahalanobisSet(rows({{0.5, 3}, {1, 2}}))), 0.25);
}

TEST(MirrorStep, ReducesToGradientDescent) {
  const Vector theta = vec({1, -1, 2}), g = vec({0.5, 1, -3});
  const auto r = mirror_step(DiagonalMahalanobisSet::ones(2, 3), {0.1}, theta, g);
  EXPECT_EQ(r.theta, Vector(theta - 0.1 * g));
  EXPECT_EQ(r.active, 0);
}

TEST(MirrorStep, HandExample) {
  const auto r = mirror_step(DiagonalMahalanobisSet(rows({{1, 2}})), {0.1}, vec({1, 1}), vec({2, 4}));
  EXPECT_NEAR(r.theta[0], 0.8, 1e-15);
  EXPECT_NEAR(r.theta[1], 0.9, 1e-15);
  const Vector numeric = oracle::numeric_mirror_argmin(DiagonalMahalanobisSet(rows({{1, 2}})), 0.1, vec({1, 1}),
                                                        vec({2, 4}));
  EXPECT_LE((numeric - r.theta).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(MirrorStep, FirstOrderConditionWhenActiveIndexPersists) {
  RngStream rng(7);
  int checked = 0, boundary = 0;
  while (checked < 200) {
    const auto m = random_set(rng, 3, 5);
    const Vector theta = random_vector(rng, 5), g = random_vector(rng, 5);
    const auto r = mirror_step(m, {0.05}, theta, g);
    if (active_index(m, r.theta) != r.active) {
      ++boundary;
      continue;
    }
    const Vector foc = 0.05 * g + grad_phi(m, r.theta) - grad_phi(m, theta);
    EXPECT_LE(foc.cwiseAbs().maxCoeff(), 1e-10);
    ++checked;
  }
  RecordProperty("boundary_cases", boundary);
}

TEST(MirrorStep, Errors) {
  EXPECT_THROW(mirror_step(DiagonalMahalanobisSet(rows({{1, 0}})), {0.1}, Vector::Ones(2), Vector::Ones(2)),
               DivergenceInvalidError);
  EXPECT_THROW(mirror_step(DiagonalMahalanobisSet::ones(1, 2), {0.0}, Vector::Ones(2), Vector::Ones(2)),
               ArgumentError);
  EXPECT_THROW(mirror_step(DiagonalMahalanobisSet::ones(1, 2), {0.1}, Vector::Ones(2), Vector::Ones(3)),
               ArgumentError);
}

TEST(Set, ClampPreservesSignAndFlagsDegenerate) {
  DiagonalMahalanobisSet m(rows({{0.0, -1e-6, 2.0}}));
  EXPECT_TRUE(m.degenerate());
  m.clamp_magnitude(1e-4);
  EXPECT_FALSE(m.degenerate());
  EXPECT_EQ(m.raw()(0, 0), 1e-4);
  EXPECT_EQ(m.raw()(0, 1), -1e-4);
  EXPECT_EQ(m.raw()(0, 2), 2.0);
  EXPECT_THROW(DiagonalMahalanobisSet(Matrix(0, 2)), ArgumentError);
  EXPECT_THROW(DiagonalMahalanobisSet(rows({{1, NAN}})), ArgumentError);
}

TEST(Frobenius, EffectiveMatchesDenseMatrix) {
  RngStream rng(8);
  const auto m = random_set(rng, 3, 4);
  const Vector norms = frobenius_norms(m);
  for (Eigen::Index j = 0; j < 3; ++j) {
    const Matrix dense = Matrix(m.raw().row(j).transpose().array().square().matrix().asDiagonal());
    EXPECT_NEAR(norms[j], dense.norm(), 1e-14);
    EXPECT_NEAR(frobenius_norms(m, FrobeniusMode::kRaw)[j], m.raw().row(j).norm(), 1e-14);
  }
}

TEST(Snapshot, BinaryAndJsonRoundTrip) {
  RngStream rng(9);
  const auto m = random_set(rng, 3, 7);
  EXPECT_EQ(divergence_from_binary(to_binary(m)), m);
  EXPECT_EQ(divergence_from_json(nlohmann::json::parse(to_json(m).dump())), m);
  const auto dir = std::filesystem::temp_directory_path() / "metamd_bregman_test";
  save_divergence(m, dir / "m.bin");
  save_divergence(m, dir / "m.json");
  EXPECT_EQ(load_divergence(dir / "m.bin"), m);
  EXPECT_EQ(load_divergence(dir / "m.json"), m);
  std::filesystem::remove_all(dir);
}

TEST(Snapshot, RejectsCorruptBinary) {
  const std::string good = to_binary(DiagonalMahalanobisSet::ones(2, 3));
  EXPECT_THROW(divergence_from_binary(good.substr(0, good.size() - 1)), FormatError);
  EXPECT_THROW(divergence_from_binary(good + "x"), FormatError);
  std::string bad_magic = good;
  bad_magic[0] = 'X';
  EXPECT_THROW(divergence_from_binary(bad_magic), FormatError);
  std::string bad_version = good;
  bad_version[4] = 9;
  EXPECT_THROW(divergence_from_binary(bad_version), FormatError);
}
