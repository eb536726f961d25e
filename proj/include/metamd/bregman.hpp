#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <utility>

#include <json.hpp>

#include "metamd/numerics.hpp"

namespace metamd {

/// N diagonal Mahalanobis matrices over kappa parameters.
///
/// Stored as raw (unconstrained) diagonals, one per row. The divergence uses
/// the squared entries m_{j,i}^2, so the effective matrices are always PSD;
/// a zero raw entry makes the set degenerate (lambda = 0, no mirror step).
class DiagonalMahalanobisSet {
 public:
  DiagonalMahalanobisSet(Matrix raw);

  /// All raw entries 1: the induced mirror step is plain gradient descent.
  static DiagonalMahalanobisSet ones(Eigen::Index n_matrices, Eigen::Index kappa);

  Eigen::Index count() const noexcept { return raw_.rows(); }
  Eigen::Index kappa() const noexcept { return raw_.cols(); }
  const Matrix& raw() const noexcept { return raw_; }
  Matrix effective() const { return raw_.array().square().matrix(); }
  bool degenerate() const;

  /// Element-wise |m| >= floor, preserving sign.
  void clamp_magnitude(double floor);

  friend bool operator==(const DiagonalMahalanobisSet& a, const DiagonalMahalanobisSet& b) {
    return a.raw_ == b.raw_;
  }

 private:
  Matrix raw_;
};

struct MirrorStepConfig {
  double eta = 0.1;
};

/// Lowest index attaining max_j sum_i m_{j,i}^2 theta_i^2.
Eigen::Index active_index(const DiagonalMahalanobisSet& m, const Vector& theta);

/// 1/2 max_j theta' M_j^2 theta.
double phi_value(const DiagonalMahalanobisSet& m, const Vector& theta);

/// M_{j*}^2 theta for the active j*.
Vector grad_phi(const DiagonalMahalanobisSet& m, const Vector& theta);

/// phi(a) - phi(b) - <grad_phi(b), a - b>.
double bregman_div(const DiagonalMahalanobisSet& m, const Vector& a, const Vector& b);

/// min_{j,i} m_{j,i}^2.
double lambda_strong_convexity(const DiagonalMahalanobisSet& m);

struct MirrorStepResult {
  Vector theta;
  Eigen::Index active;
};

/// theta - eta * g / m_{j*}^2 with j* active at theta.
MirrorStepResult mirror_step(const DiagonalMahalanobisSet& m, const MirrorStepConfig& cfg,
                             const Vector& theta, const Vector& g);

/// How ||M_j||_F is read: over the squared diagonals (the matrices the
/// divergence actually uses) or over the raw diagonal vectors.
enum class FrobeniusMode { kEffective, kRaw };

Vector frobenius_norms(const DiagonalMahalanobisSet& m, FrobeniusMode mode = FrobeniusMode::kEffective);

// Snapshots. Binary layout (little-endian): "MMDS", u32 version, u64 N,
// u64 kappa, then N*kappa f64 raw entries row-major.
inline constexpr std::uint32_t kDivergenceSnapshotVersion = 1;

std::string to_binary(const DiagonalMahalanobisSet& m);
DiagonalMahalanobisSet divergence_from_binary(const std::string& bytes);
nlohmann::json to_json(const DiagonalMahalanobisSet& m);
DiagonalMahalanobisSet divergence_from_json(const nlohmann::json& j);

void save_divergence(const DiagonalMahalanobisSet& m, const std::filesystem::path& path);
DiagonalMahalanobisSet load_divergence(const std::filesystem::path& path);

}  // namespace metamd
