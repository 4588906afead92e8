#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "smmh/errors.hpp"

namespace smmh {

struct NelderMeadConfig {
  double initial_simplex_scale = 0.1;  // relative to |x0_i|, absolute when x0_i == 0
  int max_iters = 500;
  double tol_f = 1e-8;
  double tol_x = 1e-8;
  double reflection = 1.0;
  double expansion = 2.0;
  double contraction = 0.5;
  double shrink = 0.5;
};

struct NelderMeadResult {
  std::vector<double> argmin;
  double value = std::numeric_limits<double>::infinity();
  int iterations = 0;
  bool converged = false;
};

// Downhill simplex minimization. Non-finite objective values are treated as
// +inf, which lets callers encode constraints as infinite penalties. Stops
// once both the spread of simplex values (tol_f, relative to max(1, |f_best|))
// and the simplex radius (tol_x, relative to max(1, |x_best|)) are small, or
// after max_iters iterations.
template <class Objective>
NelderMeadResult nelder_mead(Objective&& objective, std::vector<double> x0, const NelderMeadConfig& cfg = {}) {
  if (!(cfg.reflection > 0.0) || !(cfg.expansion > 1.0) || !(cfg.expansion > cfg.reflection) ||
      !(cfg.contraction > 0.0 && cfg.contraction < 1.0) || !(cfg.shrink > 0.0 && cfg.shrink < 1.0))
    throw ParameterError("nelder_mead: coefficients outside their admissible ranges");

  auto eval = [&](const std::vector<double>& x) {
    const double v = objective(x);
    return std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  const std::size_t dim = x0.size();
  const double f0 = eval(x0);
  if (!std::isfinite(f0)) throw PreconditionError("nelder_mead: objective is not finite at x0");

  std::vector<std::vector<double>> pts(dim + 1, x0);
  std::vector<double> vals(dim + 1, f0);
  for (std::size_t i = 0; i < dim; ++i) {
    const double step = x0[i] != 0.0 ? cfg.initial_simplex_scale * std::abs(x0[i]) : cfg.initial_simplex_scale;
    pts[i + 1][i] += step;
    vals[i + 1] = eval(pts[i + 1]);
  }

  std::vector<std::size_t> order(dim + 1);
  auto sort_simplex = [&] {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return vals[a] < vals[b]; });
  };

  auto along = [&](const std::vector<double>& centroid, const std::vector<double>& worst, double coef) {
    std::vector<double> x(dim);
    for (std::size_t k = 0; k < dim; ++k) x[k] = centroid[k] + coef * (centroid[k] - worst[k]);
    return x;
  };

  NelderMeadResult result;
  int iter = 0;
  for (; iter < cfg.max_iters; ++iter) {
    sort_simplex();
    const std::size_t best = order.front();
    const std::size_t worst = order.back();
    const std::size_t second_worst = order[dim > 0 ? dim - 1 : 0];

    double radius = 0.0;
    double norm_best = 0.0;
    for (std::size_t k = 0; k < dim; ++k) norm_best = std::max(norm_best, std::abs(pts[best][k]));
    for (const auto& p : pts)
      for (std::size_t k = 0; k < dim; ++k) radius = std::max(radius, std::abs(p[k] - pts[best][k]));
    const double spread = vals[worst] - vals[best];
    if (std::isfinite(spread) && spread <= cfg.tol_f * std::max(1.0, std::abs(vals[best])) &&
        radius <= cfg.tol_x * std::max(1.0, norm_best)) {
      result.converged = true;
      break;
    }

    std::vector<double> centroid(dim, 0.0);
    for (std::size_t i = 0; i <= dim; ++i) {
      if (i == worst) continue;
      for (std::size_t k = 0; k < dim; ++k) centroid[k] += pts[i][k];
    }
    for (auto& c : centroid) c /= static_cast<double>(dim);

    const auto xr = along(centroid, pts[worst], cfg.reflection);
    const double fr = eval(xr);
    if (fr < vals[best]) {
      const auto xe = along(centroid, pts[worst], cfg.expansion);
      const double fe = eval(xe);
      if (fe < fr) {
        pts[worst] = xe;
        vals[worst] = fe;
      } else {
        pts[worst] = xr;
        vals[worst] = fr;
      }
      continue;
    }
    if (fr < vals[second_worst]) {
      pts[worst] = xr;
      vals[worst] = fr;
      continue;
    }
    // Contraction: outside when the reflected point beats the worst vertex.
    const bool outside = fr < vals[worst];
    const auto xc = outside ? along(centroid, pts[worst], cfg.reflection * cfg.contraction)
                            : along(centroid, pts[worst], -cfg.contraction);
    const double fc = eval(xc);
    if (fc < (outside ? fr : vals[worst])) {
      pts[worst] = xc;
      vals[worst] = fc;
      continue;
    }
    for (std::size_t i = 0; i <= dim; ++i) {
      if (i == best) continue;
      for (std::size_t k = 0; k < dim; ++k) pts[i][k] = pts[best][k] + cfg.shrink * (pts[i][k] - pts[best][k]);
      vals[i] = eval(pts[i]);
    }
  }
  sort_simplex();
  result.argmin = pts[order.front()];
  result.value = vals[order.front()];
  result.iterations = iter;
  return result;
}

}  // namespace smmh
