#include "pfl/population.hpp"

#include <algorithm>
#include <cmath>

#include "pfl/rng.hpp"

namespace pfl {

void PopulationConfig::validate() const {
  if (!(N > 0)) throw std::invalid_argument("population: N must be positive");
  if (!(p >= 0 && p <= 1)) throw std::invalid_argument("population: p must be in [0,1]");
  if (!(q > 0 && q <= 1)) throw std::invalid_argument("population: q must be in (0,1]");
  if (!(C > 0)) throw std::invalid_argument("population: C must be positive");
  if (!(lambda > 0)) throw std::invalid_argument("population: lambda must be positive");
}

namespace {

int64_t round_half_up(double x) {
  return static_cast<int64_t>(std::floor(x + 0.5));
}

struct Counts {
  int64_t m;
  int64_t k;
};

Counts integer_counts(const PopulationConfig& cfg) {
  cfg.validate();
  if (cfg.k() < 0) {
    throw zero_latency_error("zero-latency: C <= N*p*q, no waiting needed");
  }
  Counts c{round_half_up(cfg.m()), round_half_up(cfg.k())};
  if (c.k > c.m) {
    throw infeasible_demand_error(
        "infeasible demand: cannot wait for more devices than exist (k > m)");
  }
  return c;
}

}  // namespace

LatencyBounds latency_bounds(const PopulationConfig& cfg) {
  cfg.validate();
  if (cfg.C >= cfg.N) {
    throw std::invalid_argument("latency_bounds: requires C < N");
  }
  const double k = cfg.k();
  if (k < 0) {
    throw zero_latency_error("zero-latency: C <= N*p*q, no waiting needed");
  }
  LatencyBounds b;
  b.lower = (1.0 / cfg.lambda) * k / (cfg.N * (1.0 - cfg.p) + 1.0);
  b.upper = cfg.C / (cfg.lambda * (cfg.N - cfg.C));
  return b;
}

double latency_exact(const PopulationConfig& cfg) {
  const Counts c = integer_counts(cfg);
  // Sum smallest terms first for accuracy.
  double s = 0;
  for (int64_t x = c.m; x >= c.m - c.k + 1; --x) s += 1.0 / static_cast<double>(x);
  return s / cfg.lambda;
}

MonteCarloLatency latency_monte_carlo(const PopulationConfig& cfg, int64_t trials,
                                      uint64_t seed) {
  const Counts c = integer_counts(cfg);
  if (trials < 1) throw std::invalid_argument("latency_monte_carlo: trials >= 1");
  if (c.k < 1) throw std::invalid_argument("latency_monte_carlo: requires k >= 1");

  auto rng = make_rng(seed, "latency_mc");
  std::exponential_distribution<double> unit_exp(1.0);
  double sum = 0, sumsq = 0;
  for (int64_t t = 0; t < trials; ++t) {
    double u = 0;
    for (int64_t i = 1; i <= c.k; ++i) {
      const double rate = static_cast<double>(c.m - i + 1) * cfg.lambda;
      u += unit_exp(rng) / rate;
    }
    sum += u;
    sumsq += u * u;
  }
  const double n = static_cast<double>(trials);
  MonteCarloLatency out;
  out.mean = sum / n;
  const double var = std::max(0.0, (sumsq - n * out.mean * out.mean) / (n - 1.0));
  out.stderr_ = std::sqrt(var / n);
  return out;
}

LatencyEstimate latency_estimate(const PopulationConfig& cfg) {
  cfg.validate();
  if (cfg.k() < 0) return LatencyEstimate{};
  LatencyEstimate e;
  const LatencyBounds b = latency_bounds(cfg);
  e.lower = b.lower;
  e.upper = b.upper;
  e.exact = latency_exact(cfg);
  return e;
}

std::vector<int> sample_cohort(const std::vector<int>& available_ids, double q,
                               uint64_t seed, uint64_t round) {
  if (!(q >= 0 && q <= 1)) throw std::invalid_argument("sample_cohort: q in [0,1]");
  std::vector<int> out;
  if (q == 0) return out;
  if (q == 1) return available_ids;
  auto rng = make_rng(seed, "cohort", round);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (int id : available_ids) {
    if (unif(rng) < q) out.push_back(id);
  }
  return out;
}

std::vector<int> sample_cohort_fixed(const std::vector<int>& available_ids,
                                     int size, uint64_t seed, uint64_t round) {
  if (size < 0 || static_cast<size_t>(size) > available_ids.size()) {
    throw std::invalid_argument("sample_cohort_fixed: size out of range");
  }
  std::vector<int> ids = available_ids;
  auto rng = make_rng(seed, "cohort_fixed", round);
  // Partial Fisher-Yates.
  for (int i = 0; i < size; ++i) {
    std::uniform_int_distribution<size_t> pick(i, ids.size() - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(size);
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace pfl
