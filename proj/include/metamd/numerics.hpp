#pragma once

#include <Eigen/Dense>
#include <span>
#include <vector>

#include "metamd/rng.hpp"

namespace metamd {

// Dense storage is Eigen's. Matrices are column-major in memory; every file
// format in this project serializes them row-major.
using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// mean + stddev (elementwise) * z, z standard normal. Advances rng.
Vector sample_gaussian(RngStream& rng, const Vector& mean, const Vector& stddev);

/// Dense product a * x with an explicit dimension check.
Vector matvec(const Matrix& a, const Vector& x);

double norm2(const Vector& x);

bool all_finite(const Vector& x);
bool all_finite(const Matrix& a);

/// |a_ij - a_ji| <= rel_tol * max|a|.
bool is_symmetric(const Matrix& a, double rel_tol = 1e-12);

Vector to_vector(std::span<const double> values);
std::vector<double> to_std(const Vector& x);

/// Row-major copy of a matrix's entries.
std::vector<double> row_major(const Matrix& a);
Matrix from_row_major(std::span<const double> data, Eigen::Index rows, Eigen::Index cols);

}  // namespace metamd
