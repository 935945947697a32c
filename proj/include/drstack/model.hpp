#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace drstack {

/// Time-of-use tariff pair.  Only the premium (on_peak - off_peak) enters any
/// decision; the absolute level shifts every consumer's bill by a constant.
struct Tariff {
  double on_peak = 0.0;   // currency / kWh
  double off_peak = 0.0;  // currency / kWh

  double premium() const { return on_peak - off_peak; }
};

/// One participating consumer.  `baseline` is the on-peak consumption absent
/// any demand-response action; the discomfort of shifting a fraction s of it
/// is dissat_a * s^2 - dissat_b * s (both coefficients strictly positive).
struct Consumer {
  int id = 0;
  double baseline = 0.0;  // B_i, kWh
  double dissat_a = 0.0;  // currency
  double dissat_b = 0.0;  // currency
};

/// A full game instance: the aggregator's economics plus the consumer list.
struct Scenario {
  Tariff tariff;
  double reward_factor = 0.0;    // rho: per-unit reward multiplier, >= 0
  double commission_rate = 0.0;  // kappa: aggregator commission rate, >= 0
  double fairness_weight = 0.0;  // gamma: currency / kWh^2, >= 0
  double target = 0.0;           // R: total reduction asked by the utility, kWh
  std::vector<Consumer> consumers;

  std::size_t size() const { return consumers.size(); }

  double total_baseline() const {
    double sum = 0.0;
    for (const auto& c : consumers) sum += c.baseline;
    return sum;
  }
};

/// Leader decision: kWh asked of each consumer.  Feasible call vectors
/// satisfy 0 <= c_i <= B_i and sum(c) == target within call_sum_tolerance.
struct CallVector {
  std::vector<double> calls;

  std::size_t size() const { return calls.size(); }

  double total() const {
    double sum = 0.0;
    for (double c : calls) sum += c;
    return sum;
  }

  /// Mean call.
  double mean() const { return calls.empty() ? 0.0 : total() / static_cast<double>(calls.size()); }

  /// (1/N) * sum (mean - c_i)^2 — the spread the fairness term penalizes.
  double variance() const {
    if (calls.empty()) return 0.0;
    const double m = mean();
    double sum = 0.0;
    for (double c : calls) sum += (m - c) * (m - c);
    return sum / static_cast<double>(calls.size());
  }
};

/// Follower decisions: fraction of baseline each consumer moves off-peak.
struct ShiftVector {
  std::vector<double> shifts;

  std::size_t size() const { return shifts.size(); }
};

/// Absolute tolerance on sum(calls) == target (double accumulation over N terms).
inline double call_sum_tolerance(double target) { return 1e-9 * std::max(1.0, target); }

/// One violated invariant; consumer < 0 means a scenario-level field.
struct Violation {
  int consumer = -1;
  std::string field;
  std::string message;
};

namespace detail {
inline void require_fraction(double s) {
  if (!(s >= 0.0 && s <= 1.0))
    throw std::domain_error("shift fraction outside [0,1]: " + std::to_string(s));
}
inline void require_index(const Scenario& sc, std::size_t i) {
  if (i >= sc.consumers.size()) throw std::out_of_range("consumer index out of range");
}
}  // namespace detail

/// Quadratic discomfort a*s^2 - b*s of shifting fraction s.
inline double dissatisfaction(const Consumer& consumer, double s) {
  detail::require_fraction(s);
  return consumer.dissat_a * s * s - consumer.dissat_b * s;
}

/// Electricity bill and reward of consumer i at shift fraction s.
/// bill   = p_on * B * (1 - s) + p_off * B * s
/// reward = rho * s * B * (p_on - p_off)
inline std::pair<double, double> bill_and_reward(const Scenario& sc, std::size_t i, double s) {
  detail::require_index(sc, i);
  detail::require_fraction(s);
  const Consumer& c = sc.consumers[i];
  const double bill = sc.tariff.on_peak * c.baseline * (1.0 - s) + sc.tariff.off_peak * c.baseline * s;
  const double reward = sc.reward_factor * s * c.baseline * sc.tariff.premium();
  return {bill, reward};
}

/// Consumer i's cost at shift fraction s, simplified form:
///   p_on*B - (1+rho)*B*s*(p_on - p_off) + a*s^2 - b*s
inline double follower_objective(const Scenario& sc, std::size_t i, double s) {
  detail::require_index(sc, i);
  detail::require_fraction(s);
  const Consumer& c = sc.consumers[i];
  return sc.tariff.on_peak * c.baseline -
         (1.0 + sc.reward_factor) * c.baseline * s * sc.tariff.premium() +
         c.dissat_a * s * s - c.dissat_b * s;
}

/// Same cost assembled term by term (bill + dissatisfaction - reward).
/// Kept as a separate code path so the algebraic simplification above can be
/// cross-checked in tests.
inline double follower_objective_unsimplified(const Scenario& sc, std::size_t i, double s) {
  const auto [bill, reward] = bill_and_reward(sc, i, s);
  return bill + dissatisfaction(sc.consumers[i], s) - reward;
}

/// Aggregator payoff: commission on total shifted energy minus the weighted
/// squared spread of the calls around their mean.
///   kappa * (p_on - p_off) * sum_i s_i B_i  -  (gamma/N) * sum_i (mean_c - c_i)^2
inline double leader_objective(const Scenario& sc, const CallVector& calls, const ShiftVector& shifts) {
  const std::size_t n = sc.consumers.size();
  if (calls.size() != n || shifts.size() != n)
    throw std::invalid_argument("calls/shifts/consumers length mismatch");
  double shifted = 0.0;
  for (std::size_t i = 0; i < n; ++i) shifted += shifts.shifts[i] * sc.consumers[i].baseline;
  const double commission = sc.commission_rate * sc.tariff.premium() * shifted;
  return commission - sc.fairness_weight * calls.variance();
}

/// Checks every scenario invariant and returns the full violation list;
/// an empty result means the scenario is solvable.
inline std::vector<Violation> validate(const Scenario& sc) {
  std::vector<Violation> out;
  auto add = [&out](int consumer, std::string field, std::string message) {
    out.push_back({consumer, std::move(field), std::move(message)});
  };

  if (!(sc.tariff.off_peak >= 0.0))
    add(-1, "tariff.off_peak", "off-peak tariff must be nonnegative");
  if (!(sc.tariff.on_peak >= sc.tariff.off_peak))
    add(-1, "tariff.on_peak", "on-peak tariff must be at least the off-peak tariff");
  if (!(sc.reward_factor >= 0.0)) add(-1, "reward_factor", "reward factor must be nonnegative");
  if (!(sc.commission_rate >= 0.0)) add(-1, "commission_rate", "commission rate must be nonnegative");
  if (!(sc.fairness_weight >= 0.0)) add(-1, "fairness_weight", "fairness weight must be nonnegative");
  if (sc.consumers.empty()) add(-1, "consumers", "at least one consumer is required");
  if (!(sc.target > 0.0)) add(-1, "target", "reduction target must be positive");

  for (std::size_t i = 0; i < sc.consumers.size(); ++i) {
    const Consumer& c = sc.consumers[i];
    const int id = static_cast<int>(i);
    if (!(c.baseline > 0.0)) add(id, "baseline", "baseline must be positive");
    if (!(c.dissat_a > 0.0)) add(id, "dissat_a", "dissatisfaction coefficient a must be positive");
    if (!(c.dissat_b > 0.0)) add(id, "dissat_b", "dissatisfaction coefficient b must be positive");
  }

  if (!sc.consumers.empty() && sc.target > 0.0 && sc.target > sc.total_baseline())
    add(-1, "target", "target exceeds total baseline");

  return out;
}

inline bool is_valid(const Scenario& sc) { return validate(sc).empty(); }

}  // namespace drstack
