#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include "metamd/numerics.hpp"
#include "metamd/rng.hpp"

namespace metamd {

enum class Activation { kTanh, kRelu };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

/// Examples are rows of `inputs`. Quadratic and Rosenbrock models ignore it.
struct Batch {
  Matrix inputs;
  std::vector<int> labels;

  Eigen::Index size() const noexcept { return inputs.rows(); }
  bool empty() const noexcept { return inputs.rows() == 0; }
};

/// Training objective over a flattened parameter vector theta.
///
/// Four architectures share one surface: quadratic theta'Q theta - b'theta,
/// the 2-D Rosenbrock function, a linear softmax classifier and a softmax MLP.
/// Classifiers use mean cross-entropy. Parameters of each dense layer are laid
/// out as the row-major (out x in) weight block followed by the bias.
class BaseModel {
 public:
  struct Quadratic {
    Matrix q;
    Vector b;
  };
  struct Rosenbrock {};
  struct Mlp {
    std::vector<int> layer_sizes;  // input, hidden..., classes
    Activation activation = Activation::kTanh;
  };
  using Descriptor = std::variant<Quadratic, Rosenbrock, Mlp>;

  static BaseModel quadratic(Matrix q, Vector b);
  static BaseModel rosenbrock();
  static BaseModel linear(int in_dim, int classes);
  static BaseModel mlp(std::vector<int> layer_sizes, Activation activation = Activation::kTanh);

  const Descriptor& descriptor() const noexcept { return descriptor_; }
  Eigen::Index param_count() const noexcept { return kappa_; }
  bool is_classifier() const noexcept { return std::holds_alternative<Mlp>(descriptor_); }
  bool is_quadratic() const noexcept { return std::holds_alternative<Quadratic>(descriptor_); }
  int class_count() const;
  std::string describe() const;

  double loss(const Vector& theta, const Batch& batch) const;
  Vector grad(const Vector& theta, const Batch& batch) const;
  /// Loss and gradient from a single forward pass.
  double loss_and_grad(const Vector& theta, const Batch& batch, Vector& grad_out) const;
  Vector hvp(const Vector& theta, const Batch& batch, const Vector& v) const;
  /// Hessian assembled column by column from hvp(e_j).
  Matrix hessian_dense(const Vector& theta, const Batch& batch,
                       Eigen::Index cap = kDefaultHessianCap) const;

  /// Fraction of correctly classified rows. Classifiers only.
  double accuracy(const Vector& theta, const Batch& batch) const;

  /// Random starting point: standard normal for the analytic objectives,
  /// N(0, 1/fan_in) weights and zero biases for classifiers.
  Vector init_params(RngStream& rng) const;

  static constexpr Eigen::Index kDefaultHessianCap = 512;

 private:
  explicit BaseModel(Descriptor d);

  void check_theta(const Vector& theta, const char* op) const;
  void check_batch(const Batch& batch, const char* op) const;

  Descriptor descriptor_;
  Eigen::Index kappa_ = 0;
};

}  // namespace metamd
