#pragma once

#include <functional>

#include <Eigen/Core>

namespace negsteer {

struct LbfgsOptions {
  int max_iterations = 1000;
  int history = 10;
  /// Converged when the max-abs gradient entry falls below this.
  double gradient_tolerance = 1e-4;
  /// Converged when the relative objective decrease falls below this.
  double function_tolerance = 2.220446049250313e-09;
  int max_line_search_steps = 40;
};

struct LbfgsResult {
  Eigen::VectorXd x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

/// Returns f(x) and writes the gradient into `grad` (already sized).
using Objective = std::function<double(const Eigen::VectorXd& x, Eigen::VectorXd& grad)>;

/// Limited-memory BFGS with a strong-Wolfe line search. On iteration
/// exhaustion or line-search failure the best iterate seen is returned with
/// converged = false.
LbfgsResult minimize_lbfgs(const Objective& objective, Eigen::VectorXd x0, const LbfgsOptions& options = {});

}  // namespace negsteer
