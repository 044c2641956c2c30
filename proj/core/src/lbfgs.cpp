#include "negsteer/lbfgs.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

namespace negsteer {
namespace {

constexpr double kC1 = 1e-4;
constexpr double kC2 = 0.9;

struct Point {
  double step;
  double value;
  double slope;  // directional derivative
};

// Minimizer of the cubic through two points with known slopes, or bisection
// when it falls outside the bracket interior.
double interpolate(const Point& a, const Point& b) {
  const double lo = std::min(a.step, b.step);
  const double hi = std::max(a.step, b.step);
  const double d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.step - b.step);
  const double disc = d1 * d1 - a.slope * b.slope;
  if (disc >= 0.0) {
    const double d2 = std::copysign(std::sqrt(disc), b.step - a.step);
    const double t = b.step - (b.step - a.step) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    const double margin = 0.1 * (hi - lo);
    if (std::isfinite(t) && t > lo + margin && t < hi - margin) return t;
  }
  return 0.5 * (lo + hi);
}

struct LineSearch {
  const Objective& f;
  const Eigen::VectorXd& x0;
  const Eigen::VectorXd& dir;
  int max_steps;
  Eigen::VectorXd x;
  Eigen::VectorXd grad;
  double value = 0.0;

  Point eval(double step) {
    x = x0 + step * dir;
    value = f(x, grad);
    return {step, value, grad.dot(dir)};
  }

  // Strong-Wolfe search; leaves x/grad/value at the accepted point.
  bool run(const Point& start, double initial_step) {
    Point prev = start;
    double step = initial_step;
    for (int i = 0; i < max_steps; ++i) {
      Point cur = eval(step);
      if (!std::isfinite(cur.value) || cur.value > start.value + kC1 * step * start.slope ||
          (i > 0 && cur.value >= prev.value))
        return zoom(start, prev, cur);
      if (std::abs(cur.slope) <= -kC2 * start.slope) return true;
      if (cur.slope >= 0.0) return zoom(start, cur, prev);
      prev = cur;
      step *= 2.0;
    }
    return false;
  }

  bool zoom(const Point& start, Point lo, Point hi) {
    for (int i = 0; i < max_steps; ++i) {
      double step = std::isfinite(hi.value) ? interpolate(lo, hi) : 0.5 * (lo.step + hi.step);
      Point cur = eval(step);
      if (!std::isfinite(cur.value) || cur.value > start.value + kC1 * step * start.slope || cur.value >= lo.value) {
        hi = cur;
      } else {
        if (std::abs(cur.slope) <= -kC2 * start.slope) return true;
        if (cur.slope * (hi.step - lo.step) >= 0.0) hi = lo;
        lo = cur;
      }
      if (std::abs(hi.step - lo.step) < 1e-16 * std::max(1.0, lo.step)) break;
    }
    // Accept the best sufficient-decrease point found, if any.
    if (lo.step > 0.0 && lo.value < start.value) {
      eval(lo.step);
      return true;
    }
    return false;
  }
};

}  // namespace

LbfgsResult minimize_lbfgs(const Objective& objective, Eigen::VectorXd x0, const LbfgsOptions& options) {
  const Eigen::Index n = x0.size();
  Eigen::VectorXd x = std::move(x0);
  Eigen::VectorXd g(n);
  double fx = objective(x, g);

  LbfgsResult best{x, fx, 0, false};
  if (g.lpNorm<Eigen::Infinity>() <= options.gradient_tolerance) {
    best.converged = true;
    return best;
  }

  std::deque<Eigen::VectorXd> s_hist, y_hist;
  std::deque<double> rho_hist;
  std::vector<double> alpha(static_cast<std::size_t>(options.history));

  for (int iter = 1; iter <= options.max_iterations; ++iter) {
    // Two-loop recursion for d = -H g.
    Eigen::VectorXd q = g;
    const auto m = s_hist.size();
    for (std::size_t i = m; i-- > 0;) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    double gamma = 1.0;
    if (m > 0) gamma = s_hist.back().dot(y_hist.back()) / y_hist.back().squaredNorm();
    Eigen::VectorXd dir = gamma * q;
    for (std::size_t i = 0; i < m; ++i) {
      const double beta = rho_hist[i] * y_hist[i].dot(dir);
      dir += (alpha[i] - beta) * s_hist[i];
    }
    dir = -dir;

    double slope = g.dot(dir);
    if (!(slope < 0.0)) {
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -g;
      slope = -g.squaredNorm();
    }
    const double initial = m == 0 ? std::min(1.0, 1.0 / g.lpNorm<Eigen::Infinity>()) : 1.0;

    LineSearch ls{objective, x, dir, options.max_line_search_steps, {}, Eigen::VectorXd(n)};
    bool accepted = ls.run({0.0, fx, slope}, initial);
    if (!accepted && m > 0) {
      // Retry from steepest descent with an empty history.
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
      dir = -g;
      accepted = ls.run({0.0, fx, -g.squaredNorm()}, std::min(1.0, 1.0 / g.lpNorm<Eigen::Infinity>()));
    }
    if (!accepted) {
      best.iterations = iter;
      return best;
    }

    Eigen::VectorXd s = ls.x - x;
    Eigen::VectorXd y = ls.grad - g;
    const double prev_f = fx;
    x = ls.x;
    g = ls.grad;
    fx = ls.value;

    if (fx < best.value) {
      best.x = x;
      best.value = fx;
    }
    best.iterations = iter;

    const double sy = s.dot(y);
    if (sy > 1e-12 * y.squaredNorm()) {
      if (static_cast<int>(s_hist.size()) == options.history) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
    }

    if (g.lpNorm<Eigen::Infinity>() <= options.gradient_tolerance) {
      best.converged = true;
      return best;
    }
    const double denom = std::max({std::abs(prev_f), std::abs(fx), 1.0});
    if ((prev_f - fx) / denom <= options.function_tolerance) {
      best.converged = true;
      return best;
    }
  }
  return best;
}

}  // namespace negsteer
