#pragma once

#include <Eigen/Dense>

namespace negsteer {

struct SymmetricEigen {
  /// Descending eigenvalues and matching unit eigenvectors as columns.
  Eigen::VectorXd values;
  Eigen::MatrixXd vectors;
  int sweeps = 0;
};

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
SymmetricEigen jacobi_eigen(const Eigen::MatrixXd& symmetric, double tolerance = 1e-14, int max_sweeps = 100);

struct PcaResult {
  Eigen::RowVectorXd mean;
  /// d x k, orthonormal columns.
  Eigen::MatrixXd components;
  /// Sample-covariance eigenvalues (n - 1 denominator) for the k components.
  Eigen::VectorXd explained_variance;
  double total_variance = 0.0;
  /// n x k coordinates of the centered samples.
  Eigen::MatrixXd projections;
};

/// Principal components of the rows of `samples` (n x d). Works on the n x n
/// Gram matrix when n < d. Zero-variance directions are filled with an
/// orthonormal completion and reported with variance 0.
PcaResult fit_pca(const Eigen::MatrixXd& samples, int components);

}  // namespace negsteer
