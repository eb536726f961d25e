#include "metamd/bregman.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "metamd/errors.hpp"
#include "metamd/io.hpp"

namespace metamd {

namespace {

void check_len(const DiagonalMahalanobisSet& m, const Vector& v, const char* op) {
  if (v.size() != m.kappa()) {
    throw ArgumentError(std::string(op) + ": vector has length " + std::to_string(v.size()) +
                        " but divergence has kappa " + std::to_string(m.kappa()));
  }
}

}  // namespace

DiagonalMahalanobisSet::DiagonalMahalanobisSet(Matrix raw) : raw_(std::move(raw)) {
  if (raw_.rows() < 1 || raw_.cols() < 1) {
    throw ArgumentError("DiagonalMahalanobisSet: need N >= 1 matrices of length >= 1");
  }
  if (!raw_.allFinite()) throw ArgumentError("DiagonalMahalanobisSet: non-finite entry");
}

DiagonalMahalanobisSet DiagonalMahalanobisSet::ones(Eigen::Index n_matrices, Eigen::Index kappa) {
  return DiagonalMahalanobisSet(Matrix::Ones(n_matrices, kappa));
}

bool DiagonalMahalanobisSet::degenerate() const { return (raw_.array() == 0.0).any(); }

void DiagonalMahalanobisSet::clamp_magnitude(double floor) {
  for (Eigen::Index j = 0; j < raw_.rows(); ++j) {
    for (Eigen::Index i = 0; i < raw_.cols(); ++i) {
      double& v = raw_(j, i);
      if (std::abs(v) < floor) v = v < 0.0 ? -floor : floor;
    }
  }
}

Eigen::Index active_index(const DiagonalMahalanobisSet& m, const Vector& theta) {
  check_len(m, theta, "active_index");
  const Vector sq = theta.array().square().matrix();
  Eigen::Index best = 0;
  double best_value = 0.0;
  for (Eigen::Index j = 0; j < m.count(); ++j) {
    double value = 0.0;
    for (Eigen::Index i = 0; i < m.kappa(); ++i) {
      const double r = m.raw()(j, i);
      value += r * r * sq[i];
    }
    if (j == 0 || value > best_value) {
      best = j;
      best_value = value;
    }
  }
  return best;
}

double phi_value(const DiagonalMahalanobisSet& m, const Vector& theta) {
  const Eigen::Index j = active_index(m, theta);
  double value = 0.0;
  for (Eigen::Index i = 0; i < m.kappa(); ++i) {
    const double r = m.raw()(j, i);
    value += r * r * theta[i] * theta[i];
  }
  return 0.5 * value;
}

Vector grad_phi(const DiagonalMahalanobisSet& m, const Vector& theta) {
  const Eigen::Index j = active_index(m, theta);
  Vector g(m.kappa());
  for (Eigen::Index i = 0; i < m.kappa(); ++i) {
    const double r = m.raw()(j, i);
    g[i] = r * r * theta[i];
  }
  return g;
}

// Written as [phi_ja(a) - phi_jb(a)] + 1/2 sum d_jb (a - b)^2, which equals
// phi(a) - phi(b) - <grad phi(b), a - b> and has two non-negative parts.
double bregman_div(const DiagonalMahalanobisSet& m, const Vector& a, const Vector& b) {
  check_len(m, a, "bregman_div");
  check_len(m, b, "bregman_div");
  const Eigen::Index ja = active_index(m, a);
  const Eigen::Index jb = active_index(m, b);
  double gap = 0.0, quad = 0.0;
  for (Eigen::Index i = 0; i < m.kappa(); ++i) {
    const double ra = m.raw()(ja, i), rb = m.raw()(jb, i);
    const double diff = a[i] - b[i];
    if (ja != jb) gap += (ra * ra - rb * rb) * a[i] * a[i];
    quad += rb * rb * diff * diff;
  }
  return 0.5 * (std::max(gap, 0.0) + quad);
}

double lambda_strong_convexity(const DiagonalMahalanobisSet& m) {
  return m.raw().array().square().minCoeff();
}

MirrorStepResult mirror_step(const DiagonalMahalanobisSet& m, const MirrorStepConfig& cfg,
                             const Vector& theta, const Vector& g) {
  check_len(m, theta, "mirror_step");
  check_len(m, g, "mirror_step");
  if (!(cfg.eta > 0.0)) throw ArgumentError("mirror_step: eta must be positive");
  if (m.degenerate()) throw DivergenceInvalidError("mirror_step: divergence has a zero diagonal entry");
  const Eigen::Index j = active_index(m, theta);
  Vector next(theta.size());
  for (Eigen::Index i = 0; i < theta.size(); ++i) {
    const double r = m.raw()(j, i);
    next[i] = theta[i] - cfg.eta * (g[i] / (r * r));
  }
  return {std::move(next), j};
}

Vector frobenius_norms(const DiagonalMahalanobisSet& m, FrobeniusMode mode) {
  Vector out(m.count());
  for (Eigen::Index j = 0; j < m.count(); ++j) {
    out[j] = mode == FrobeniusMode::kEffective ? m.raw().row(j).array().square().matrix().norm()
                                               : m.raw().row(j).norm();
  }
  return out;
}

std::string to_binary(const DiagonalMahalanobisSet& m) {
  io::ByteWriter w;
  w.bytes("MMDS");
  w.le<std::uint32_t>(kDivergenceSnapshotVersion);
  w.le<std::uint64_t>(static_cast<std::uint64_t>(m.count()));
  w.le<std::uint64_t>(static_cast<std::uint64_t>(m.kappa()));
  for (double v : row_major(m.raw())) w.le<double>(v);
  return w.take();
}

DiagonalMahalanobisSet divergence_from_binary(const std::string& bytes) {
  io::ByteReader r(bytes);
  r.expect("MMDS", "divergence snapshot magic");
  const auto version = r.le<std::uint32_t>("snapshot version");
  if (version != kDivergenceSnapshotVersion) {
    throw FormatError("unsupported divergence snapshot version " + std::to_string(version), 4);
  }
  const auto n = r.le<std::uint64_t>("matrix count");
  const auto kappa = r.le<std::uint64_t>("kappa");
  if (n == 0 || kappa == 0 || r.remaining() / 8 / n < kappa) {
    throw FormatError("divergence snapshot payload does not match its header", r.offset());
  }
  std::vector<double> values(n * kappa);
  for (auto& v : values) v = r.le<double>("divergence entries");
  r.expect_end();
  return DiagonalMahalanobisSet(
      from_row_major(values, static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(kappa)));
}

nlohmann::json to_json(const DiagonalMahalanobisSet& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index j = 0; j < m.count(); ++j) {
    std::vector<double> row;
    for (Eigen::Index i = 0; i < m.kappa(); ++i) row.push_back(m.raw()(j, i));
    rows.push_back(row);
  }
  return {{"format", "metamd-divergence"},
          {"version", kDivergenceSnapshotVersion},
          {"n_matrices", m.count()},
          {"kappa", m.kappa()},
          {"raw_diagonals", rows}};
}

DiagonalMahalanobisSet divergence_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "metamd-divergence") throw ArgumentError("not a divergence snapshot");
  if (j.at("version").get<std::uint32_t>() != kDivergenceSnapshotVersion) {
    throw ArgumentError("unsupported divergence snapshot version");
  }
  const auto n = j.at("n_matrices").get<Eigen::Index>();
  const auto kappa = j.at("kappa").get<Eigen::Index>();
  const auto& rows = j.at("raw_diagonals");
  if (static_cast<Eigen::Index>(rows.size()) != n) throw ArgumentError("raw_diagonals row count mismatch");
  Matrix raw(n, kappa);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto row = rows.at(static_cast<std::size_t>(r)).get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != kappa) throw ArgumentError("raw_diagonals row length mismatch");
    for (Eigen::Index i = 0; i < kappa; ++i) raw(r, i) = row[static_cast<std::size_t>(i)];
  }
  return DiagonalMahalanobisSet(std::move(raw));
}

void save_divergence(const DiagonalMahalanobisSet& m, const std::filesystem::path& path) {
  if (path.extension() == ".json") {
    io::write_file(path, to_json(m).dump(2) + "\n");
  } else {
    io::write_file(path, to_binary(m));
  }
}

DiagonalMahalanobisSet load_divergence(const std::filesystem::path& path) {
  const std::string bytes = io::read_file(path);
  if (path.extension() == ".json") return divergence_from_json(nlohmann::json::parse(bytes));
  return divergence_from_binary(bytes);
}

}  // namespace metamd
