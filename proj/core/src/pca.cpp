#include "negsteer/pca.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "negsteer/errors.hpp"

namespace negsteer {

SymmetricEigen jacobi_eigen(const Eigen::MatrixXd& symmetric, double tolerance, int max_sweeps) {
  const Eigen::Index n = symmetric.rows();
  if (symmetric.cols() != n) throw InputError("eigendecomposition needs a square matrix");
  Eigen::MatrixXd a = 0.5 * (symmetric + symmetric.transpose());
  Eigen::MatrixXd v = Eigen::MatrixXd::Identity(n, n);
  SymmetricEigen out;

  const double scale = std::max(a.norm(), 1e-300);
  for (out.sweeps = 0; out.sweeps < max_sweeps; ++out.sweeps) {
    double off = 0.0;
    for (Eigen::Index j = 0; j < n; ++j)
      for (Eigen::Index i = 0; i < j; ++i) off += a(i, j) * a(i, j);
    if (std::sqrt(off) <= tolerance * scale) break;

    for (Eigen::Index p = 0; p < n - 1; ++p) {
      for (Eigen::Index q = p + 1; q < n; ++q) {
        const double apq = a(p, q);
        if (std::abs(apq) <= 1e-300) continue;
        const double theta = (a(q, q) - a(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;

        for (Eigen::Index k = 0; k < n; ++k) {
          const double akp = a(k, p), akq = a(k, q);
          a(k, p) = c * akp - s * akq;
          a(k, q) = s * akp + c * akq;
        }
        for (Eigen::Index k = 0; k < n; ++k) {
          const double apk = a(p, k), aqk = a(q, k);
          a(p, k) = c * apk - s * aqk;
          a(q, k) = s * apk + c * aqk;
        }
        a(p, q) = a(q, p) = 0.0;
        for (Eigen::Index k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto x, auto y) { return a(x, x) > a(y, y); });
  out.values.resize(n);
  out.vectors.resize(n, n);
  for (Eigen::Index i = 0; i < n; ++i) {
    out.values(i) = a(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(i)]);
    out.vectors.col(i) = v.col(order[static_cast<std::size_t>(i)]);
  }
  return out;
}

namespace {

// Extends `basis` columns [0, filled) to an orthonormal set of `basis.cols()` columns.
void complete_basis(Eigen::MatrixXd& basis, Eigen::Index filled) {
  const Eigen::Index d = basis.rows();
  Eigen::Index axis = 0;
  for (Eigen::Index c = filled; c < basis.cols(); ++c) {
    for (; axis < d; ++axis) {
      Eigen::VectorXd e = Eigen::VectorXd::Unit(d, axis);
      for (int pass = 0; pass < 2; ++pass)
        for (Eigen::Index j = 0; j < c; ++j) e -= basis.col(j).dot(e) * basis.col(j);
      const double nrm = e.norm();
      if (nrm > 1e-6) {
        basis.col(c) = e / nrm;
        ++axis;
        break;
      }
    }
  }
}

}  // namespace

PcaResult fit_pca(const Eigen::MatrixXd& samples, int components) {
  const Eigen::Index n = samples.rows();
  const Eigen::Index d = samples.cols();
  if (n < 2) throw InputError("PCA needs at least 2 samples, got " + std::to_string(n));
  if (components < 1 || components > d)
    throw InputError("PCA component count " + std::to_string(components) + " outside [1, " + std::to_string(d) + "]");
  if (!samples.allFinite()) throw InputError("PCA input contains non-finite values");

  PcaResult out;
  out.mean = samples.colwise().mean();
  const Eigen::MatrixXd centered = samples.rowwise() - out.mean;
  const double denom = static_cast<double>(n - 1);
  out.total_variance = centered.squaredNorm() / denom;

  const Eigen::Index k = components;
  out.components = Eigen::MatrixXd::Zero(d, k);
  out.explained_variance = Eigen::VectorXd::Zero(k);
  const double floor = 1e-12 * std::max(out.total_variance, 1e-300);

  Eigen::Index filled = 0;
  if (n < d) {
    const auto eig = jacobi_eigen(centered * centered.transpose() / denom);
    for (Eigen::Index i = 0; i < std::min(k, n); ++i) {
      const double lambda = eig.values(i);
      if (lambda <= floor) break;
      Eigen::VectorXd v = centered.transpose() * eig.vectors.col(i);
      // Re-orthogonalize against earlier components; near-equal eigenvalues
      // otherwise leak between columns.
      for (Eigen::Index j = 0; j < filled; ++j) v -= out.components.col(j).dot(v) * out.components.col(j);
      const double nrm = v.norm();
      if (nrm <= 1e-12) break;
      out.components.col(filled) = v / nrm;
      out.explained_variance(filled) = lambda;
      ++filled;
    }
  } else {
    const auto eig = jacobi_eigen(centered.transpose() * centered / denom);
    for (Eigen::Index i = 0; i < k; ++i) {
      if (eig.values(i) <= floor) break;
      out.components.col(filled) = eig.vectors.col(i);
      out.explained_variance(filled) = eig.values(i);
      ++filled;
    }
  }
  complete_basis(out.components, filled);

  // Sign convention: largest-magnitude loading positive.
  for (Eigen::Index c = 0; c < k; ++c) {
    Eigen::Index idx = 0;
    out.components.col(c).cwiseAbs().maxCoeff(&idx);
    if (out.components(idx, c) < 0) out.components.col(c) *= -1.0;
  }
  out.projections = centered * out.components;
  return out;
}

}  // namespace negsteer
