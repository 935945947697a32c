#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

#include "drstack/model.hpp"

namespace drstack {

/// Which constraint of the consumer problem is binding at the optimum.
enum class ActiveConstraint { interior, call_cap, unit_cap, zero_floor };

inline const char* to_string(ActiveConstraint a) {
  switch (a) {
    case ActiveConstraint::interior: return "interior";
    case ActiveConstraint::call_cap: return "call_cap";
    case ActiveConstraint::unit_cap: return "unit_cap";
    case ActiveConstraint::zero_floor: return "zero_floor";
  }
  return "?";
}

/// Solution of one consumer's problem for a given call, with the KKT
/// multipliers that certify it (lambda_call for s*B <= c, lambda_unit for
/// s <= 1, lambda_zero for s >= 0).
struct BestResponse {
  double shift = 0.0;                 // s*
  double shifted_kwh = 0.0;           // s* * B
  double unconstrained_vertex = 0.0;  // theta: argmin ignoring constraints
  ActiveConstraint active = ActiveConstraint::interior;
  double kkt_residual = 0.0;
  double lambda_call = 0.0;
  double lambda_unit = 0.0;
  double lambda_zero = 0.0;
};

/// Vertex of the consumer's strictly convex quadratic cost:
///   theta_i = ((1 + rho) * B_i * (p_on - p_off) + b_i) / (2 * a_i)
inline double vertex_shift(const Scenario& sc, std::size_t i) {
  detail::require_index(sc, i);
  const Consumer& c = sc.consumers[i];
  return ((1.0 + sc.reward_factor) * c.baseline * sc.tariff.premium() + c.dissat_b) /
         (2.0 * c.dissat_a);
}

/// theta clamped to [0, 1]; shifted energy saturates at clamped_vertex * B.
inline double clamped_vertex(const Scenario& sc, std::size_t i) {
  return std::clamp(vertex_shift(sc, i), 0.0, 1.0);
}

/// Max KKT violation of (s, lambda) for consumer i's problem at the given
/// call: stationarity, the three complementarity products, and primal
/// feasibility.  Multipliers must be nonnegative.
inline double kkt_residual(const Scenario& sc, std::size_t i, double call, double s,
                           const std::array<double, 3>& lambda) {
  detail::require_index(sc, i);
  const auto [l_call, l_unit, l_zero] = lambda;
  if (l_call < 0.0 || l_unit < 0.0 || l_zero < 0.0)
    throw std::domain_error("KKT multipliers must be nonnegative");
  const Consumer& c = sc.consumers[i];
  const double stationarity = 2.0 * c.dissat_a * s -
                              (1.0 + sc.reward_factor) * c.baseline * sc.tariff.premium() -
                              c.dissat_b + l_call * c.baseline + l_unit - l_zero;
  double r = std::abs(stationarity);
  r = std::max(r, std::abs(l_call * (s * c.baseline - call)));
  r = std::max(r, std::abs(l_unit * (s - 1.0)));
  r = std::max(r, std::abs(l_zero * s));
  r = std::max(r, std::max(0.0, s * c.baseline - call));
  r = std::max(r, std::max(0.0, s - 1.0));
  r = std::max(r, std::max(0.0, -s));
  return r;
}

/// Exact solution of the consumer problem: the cost is strictly convex in s
/// (a_i > 0), so the minimizer is the vertex clamped to [0, min(1, call/B)].
inline BestResponse best_response(const Scenario& sc, std::size_t i, double call) {
  detail::require_index(sc, i);
  const Consumer& c = sc.consumers[i];
  const double tol = 1e-9 * std::max(1.0, c.baseline);
  if (call < -tol || call > c.baseline + tol)
    throw std::domain_error("call outside [0, baseline] for consumer " + std::to_string(i));
  call = std::clamp(call, 0.0, c.baseline);

  BestResponse r;
  r.unconstrained_vertex = vertex_shift(sc, i);
  const double cap = std::min(1.0, call / c.baseline);
  const double theta = r.unconstrained_vertex;

  if (theta < 0.0) {
    r.shift = 0.0;
    r.active = ActiveConstraint::zero_floor;
    r.lambda_zero = -2.0 * c.dissat_a * theta;
  } else if (theta > cap) {
    r.shift = cap;
    if (cap < 1.0) {
      r.active = ActiveConstraint::call_cap;
      r.lambda_call = 2.0 * c.dissat_a * (theta - cap) / c.baseline;
    } else {
      r.active = ActiveConstraint::unit_cap;
      r.lambda_unit = 2.0 * c.dissat_a * (theta - 1.0);
    }
  } else {
    r.shift = theta;
    r.active = ActiveConstraint::interior;
  }

  r.shifted_kwh = r.shift * c.baseline;
  r.kkt_residual = kkt_residual(sc, i, call, r.shift, {r.lambda_call, r.lambda_unit, r.lambda_zero});
  return r;
}

/// Brute-force check of best_response: scans s over {0, step, 2*step, ...}
/// up to min(1, call/B) (endpoint included), plus the analytic vertex when it
/// is feasible, and returns the grid argmin.  Agrees with best_response to
/// within one step.
inline BestResponse oracle_best_response(const Scenario& sc, std::size_t i, double call,
                                         double step) {
  detail::require_index(sc, i);
  if (!(step > 0.0 && step <= 1e-2)) throw std::domain_error("oracle step must be in (0, 1e-2]");
  const Consumer& c = sc.consumers[i];
  const double tol = 1e-9 * std::max(1.0, c.baseline);
  if (call < -tol || call > c.baseline + tol)
    throw std::domain_error("call outside [0, baseline] for consumer " + std::to_string(i));
  call = std::clamp(call, 0.0, c.baseline);
  const double cap = std::min(1.0, call / c.baseline);

  double best_s = 0.0;
  double best_value = follower_objective(sc, i, 0.0);
  auto consider = [&](double s) {
    const double v = follower_objective(sc, i, s);
    if (v < best_value) {
      best_value = v;
      best_s = s;
    }
  };

  const long long k_max = static_cast<long long>(std::floor(cap / step + 1e-9));
  for (long long k = 1; k <= k_max; ++k) consider(std::min(static_cast<double>(k) * step, cap));
  consider(cap);
  const double theta = vertex_shift(sc, i);
  if (theta >= 0.0 && theta <= cap) consider(theta);

  BestResponse r;
  r.unconstrained_vertex = theta;
  r.shift = best_s;
  r.shifted_kwh = best_s * c.baseline;
  if (theta < 0.0)
    r.active = ActiveConstraint::zero_floor;
  else if (theta > best_s + step)
    r.active = best_s >= 1.0 - step ? ActiveConstraint::unit_cap : ActiveConstraint::call_cap;
  else
    r.active = ActiveConstraint::interior;
  r.kkt_residual = std::abs(best_s - std::clamp(theta, 0.0, cap));
  return r;
}

}  // namespace drstack
