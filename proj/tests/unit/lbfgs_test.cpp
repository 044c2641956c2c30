#include <gtest/gtest.h>

#include <cmath>

#include "negsteer/lbfgs.hpp"

using namespace negsteer;

TEST(Lbfgs, QuadraticMinimum) {
  Eigen::VectorXd target(3);
  target << 1.0, -2.0, 0.5;
  Eigen::VectorXd scale(3);
  scale << 1.0, 10.0, 100.0;
  const Objective f = [&](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const Eigen::VectorXd r = x - target;
    g = scale.cwiseProduct(r);
    return 0.5 * r.dot(g);
  };
  const auto res = minimize_lbfgs(f, Eigen::VectorXd::Zero(3));
  EXPECT_TRUE(res.converged);
  EXPECT_LT((res.x - target).lpNorm<Eigen::Infinity>(), 1e-4);
}

TEST(Lbfgs, Rosenbrock) {
  const Objective f = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const double a = 1.0 - x(0), b = x(1) - x(0) * x(0);
    g(0) = -2.0 * a - 400.0 * x(0) * b;
    g(1) = 200.0 * b;
    return a * a + 100.0 * b * b;
  };
  LbfgsOptions opt;
  opt.gradient_tolerance = 1e-8;
  opt.function_tolerance = 0;
  Eigen::VectorXd x0(2);
  x0 << -1.2, 1.0;
  const auto res = minimize_lbfgs(f, x0, opt);
  EXPECT_NEAR(res.x(0), 1.0, 1e-5);
  EXPECT_NEAR(res.x(1), 1.0, 1e-5);
}

TEST(Lbfgs, IterationCapReportsNotConverged) {
  const Objective f = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    const double a = 1.0 - x(0), b = x(1) - x(0) * x(0);
    g(0) = -2.0 * a - 400.0 * x(0) * b;
    g(1) = 200.0 * b;
    return a * a + 100.0 * b * b;
  };
  LbfgsOptions opt;
  opt.max_iterations = 3;
  Eigen::VectorXd x0(2);
  x0 << -1.2, 1.0;
  const auto res = minimize_lbfgs(f, x0, opt);
  EXPECT_FALSE(res.converged);
  EXPECT_LE(res.iterations, 3);
  Eigen::VectorXd g(2);
  EXPECT_LT(f(res.x, g), f(x0, g));
}

TEST(Lbfgs, StartAtOptimumConvergesImmediately) {
  const Objective f = [](const Eigen::VectorXd& x, Eigen::VectorXd& g) {
    g = x;
    return 0.5 * x.squaredNorm();
  };
  const auto res = minimize_lbfgs(f, Eigen::VectorXd::Zero(4));
  EXPECT_TRUE(res.converged);
  EXPECT_EQ(res.iterations, 0);
}
