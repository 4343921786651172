#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

namespace pfl {

/// Device-availability and sampling parameters of one FL deployment.
///   N      total devices holding relevant data
///   p      fraction of devices currently eligible (charging, on wifi, ...)
///   q      per-round sampling probability
///   C      cohort size requested per round
///   lambda arrival rate of unavailable devices (per unit time)
struct PopulationConfig {
  double N = 0;
  double p = 0;
  double q = 0;
  double C = 0;
  double lambda = 1.0;

  // m: currently unavailable devices; k: devices the server must wait for.
  double m() const { return N - N * p; }
  double k() const { return C - N * p * q; }

  void validate() const;
};

struct LatencyBounds {
  double lower = 0;
  double upper = 0;
};

struct LatencyEstimate {
  double lower = 0;
  double exact = 0;
  double upper = 0;
};

struct MonteCarloLatency {
  double mean = 0;
  double stderr_ = 0;
};

/// Thrown when C <= N*p*q: the cohort fills from already-available devices
/// and there is nothing to wait for.
class zero_latency_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Thrown when k > m: waiting for more devices than exist.
class infeasible_demand_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Closed-form bounds on the expected waiting time for the cohort to fill:
///   (1/lambda) * (C - Npq) / (N(1-p) + 1)  <=  E[U_k]  <=  C / (lambda (N - C))
/// m and k are kept real-valued here. The upper bound assumes the server
/// oversamples, q >= C/N; below that rate only the lower bound is tight.
LatencyBounds latency_bounds(const PopulationConfig& cfg);

/// Exact expected waiting time, E[U_k] = (1/lambda) * sum_{x=m-k+1}^{m} 1/x,
/// with m and k rounded half-up to integers. k == 0 gives 0.
double latency_exact(const PopulationConfig& cfg);

/// Simulates the k-th order statistic of m exponential arrivals via the
/// sum-of-spacings identity (spacing i ~ Exponential((m-i+1) lambda)),
/// O(k) per trial. Deterministic given the seed.
MonteCarloLatency latency_monte_carlo(const PopulationConfig& cfg, int64_t trials,
                                      uint64_t seed);

/// Full estimate; exact/bounds set to 0 when the zero-latency condition holds.
LatencyEstimate latency_estimate(const PopulationConfig& cfg);

/// Poisson sampling: each id included independently with probability q.
/// Deterministic given (seed, round).
std::vector<int> sample_cohort(const std::vector<int>& available_ids, double q,
                               uint64_t seed, uint64_t round);

/// Fixed-size sampling (latency experiments only; the DP accountant assumes
/// Poisson sampling).
std::vector<int> sample_cohort_fixed(const std::vector<int>& available_ids,
                                     int size, uint64_t seed, uint64_t round);

}  // namespace pfl
