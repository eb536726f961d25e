#include "metamd/numerics.hpp"

#include <cmath>
#include <string>

#include "metamd/errors.hpp"

namespace metamd {

Vector sample_gaussian(RngStream& rng, const Vector& mean, const Vector& stddev) {
  if (mean.size() != stddev.size()) {
    throw ArgumentError("sample_gaussian: mean has length " + std::to_string(mean.size()) +
                        " but stddev has length " + std::to_string(stddev.size()));
  }
  Vector out(mean.size());
  for (Eigen::Index i = 0; i < mean.size(); ++i) {
    if (!(stddev[i] >= 0.0)) throw ArgumentError("sample_gaussian: negative stddev");
    out[i] = mean[i] + stddev[i] * rng.normal();
  }
  return out;
}

Vector matvec(const Matrix& a, const Vector& x) {
  if (a.cols() != x.size()) {
    throw ArgumentError("matvec: matrix has " + std::to_string(a.cols()) +
                        " columns but vector has length " + std::to_string(x.size()));
  }
  return a * x;
}

double norm2(const Vector& x) { return x.norm(); }

bool all_finite(const Vector& x) { return x.allFinite(); }
bool all_finite(const Matrix& a) { return a.allFinite(); }

bool is_symmetric(const Matrix& a, double rel_tol) {
  if (a.rows() != a.cols()) return false;
  if (a.size() == 0) return true;
  const double scale = a.cwiseAbs().maxCoeff();
  return (a - a.transpose()).cwiseAbs().maxCoeff() <= rel_tol * scale;
}

Vector to_vector(std::span<const double> values) {
  Vector v(static_cast<Eigen::Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) v[static_cast<Eigen::Index>(i)] = values[i];
  return v;
}

std::vector<double> to_std(const Vector& x) { return {x.data(), x.data() + x.size()}; }

std::vector<double> row_major(const Matrix& a) {
  std::vector<double> out;
  out.reserve(static_cast<std::size_t>(a.size()));
  for (Eigen::Index r = 0; r < a.rows(); ++r)
    for (Eigen::Index c = 0; c < a.cols(); ++c) out.push_back(a(r, c));
  return out;
}

Matrix from_row_major(std::span<const double> data, Eigen::Index rows, Eigen::Index cols) {
  if (static_cast<Eigen::Index>(data.size()) != rows * cols) {
    throw ArgumentError("from_row_major: expected " + std::to_string(rows * cols) +
                        " values, got " + std::to_string(data.size()));
  }
  Matrix a(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) a(r, c) = data[static_cast<std::size_t>(r * cols + c)];
  return a;
}

}  // namespace metamd
