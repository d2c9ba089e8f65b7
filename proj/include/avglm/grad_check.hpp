#pragma once

#include <cmath>
#include <vector>

#include "avglm/tensor.hpp"

namespace avglm {

// Central-difference gradient verification. Runs in double precision only;
// single-precision finite differences are too noisy to be a usable oracle.
//
// `f` maps (Graph<double>&, point tensors) -> scalar loss tensor. The same
// callable is used for the analytic pass (recording on) and the numeric
// probes (recording off), so the comparison exercises one forward
// implementation against an independent differentiation route.

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::fabs(analytic), std::fabs(numeric), 1e-8});
  return std::fabs(analytic - numeric) / denom;
}

// Worst relative error across every element of every tensor in `points`.
// Works for double and, where path cancellation leaves gradients near the
// 1e-8 denominator floor, for long double (double-precision differences
// bottom out around 1e-11 absolute, which such elements cannot afford).
template <typename S, typename F>
double grad_check_many(F&& f, std::vector<Tensor<S>>& points, double eps = 1e-5) {
  static_assert(sizeof(S) >= sizeof(double), "finite differences need double precision or better");
  if (eps < 1e-6 || eps > 1e-4)
    throw ContractError("grad_check: eps " + std::to_string(eps) + " outside [1e-6, 1e-4]");
  for (auto& p : points) {
    p.set_requires_grad(true);
    p.zero_grad();
  }

  Graph<S> g;
  Tensor<S> loss = f(g, points);
  if (!loss.all_finite()) throw DivergenceError("grad_check: non-finite function value");
  g.backward(loss);

  std::vector<std::vector<S>> analytic;
  analytic.reserve(points.size());
  for (auto& p : points) analytic.push_back(p.grad());

  auto eval = [&](void) -> S {
    Graph<S> probe;
    probe.set_recording(false);
    Tensor<S> out = f(probe, points);
    if (!out.all_finite()) throw DivergenceError("grad_check: non-finite function value");
    return out.data()[0];
  };

  double worst = 0.0;
  for (std::size_t t = 0; t < points.size(); ++t) {
    auto& p = points[t];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const S saved = p.data()[i];
      p.data()[i] = saved + S(eps);
      const S up = eval();
      p.data()[i] = saved - S(eps);
      const S down = eval();
      p.data()[i] = saved;
      const double numeric = static_cast<double>((up - down) / (S(2) * S(eps)));
      worst = std::max(worst, relative_error(static_cast<double>(analytic[t][i]), numeric));
    }
  }
  return worst;
}

// Single-tensor convenience wrapper.
template <typename F>
double grad_check(F&& f, const Tensor<double>& point, double eps = 1e-5) {
  std::vector<Tensor<double>> pts{point.detached_copy()};
  auto wrapped = [&](Graph<double>& g, std::vector<Tensor<double>>& ps) {
    return f(g, ps[0]);
  };
  return grad_check_many(wrapped, pts, eps);
}

}  // namespace avglm
