#include "pfl/privacy.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

#include "pfl/rng.hpp"

namespace pfl {

void PrivacySpec::validate() const {
  if (!(epsilon > 0)) throw std::invalid_argument("privacy: epsilon must be positive");
  if (!(delta > 0 && delta < 1)) throw std::invalid_argument("privacy: delta in (0,1)");
  if (!(epsilon0 >= 0 && epsilon0 < epsilon)) {
    throw std::invalid_argument("privacy: requires 0 <= epsilon0 < epsilon");
  }
  if (!(delta0 >= 0 && delta0 <= delta)) {
    throw std::invalid_argument("privacy: requires 0 <= delta0 <= delta");
  }
  if (!(clip > 0)) throw std::invalid_argument("privacy: clip must be positive");
  if (T < 1) throw std::invalid_argument("privacy: T >= 1");
}

std::vector<double> default_order_grid() {
  std::vector<double> orders;
  for (int a = 2; a <= 64; ++a) orders.push_back(a);
  orders.push_back(128);
  orders.push_back(256);
  return orders;
}

Eigen::VectorXd clip_to_norm(const Eigen::VectorXd& v, double bound) {
  if (!(bound > 0)) throw std::invalid_argument("clip_to_norm: bound must be positive");
  const double norm = v.norm();
  if (norm <= bound) return v;
  return v * (bound / norm);
}

namespace {

double log_binomial(int n, int k) {
  return std::lgamma(n + 1.0) - std::lgamma(k + 1.0) - std::lgamma(n - k + 1.0);
}

double log_sum_exp(const std::vector<double>& terms) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double t : terms) mx = std::max(mx, t);
  if (!std::isfinite(mx)) return mx;
  double s = 0;
  for (double t : terms) s += std::exp(t - mx);
  return mx + std::log(s);
}

// log E_nu[(mu/nu)^alpha] for mu = (1-q) N(0,s^2) + q N(1,s^2), nu = N(0,s^2),
// at integer alpha, via the binomial expansion; exact at integer orders.
double log_a_int(double q, double sigma, int alpha) {
  std::vector<double> terms;
  terms.reserve(alpha + 1);
  const double log_q = std::log(q);
  const double log_1mq = std::log1p(-q);
  for (int j = 0; j <= alpha; ++j) {
    double t = log_binomial(alpha, j) + j * log_q + (alpha - j) * log_1mq +
               (j * (j - 1.0)) / (2.0 * sigma * sigma);
    terms.push_back(t);
  }
  return log_sum_exp(terms);
}

}  // namespace

RdpCurve rdp_sampled_gaussian(double q, double sigma,
                              const std::vector<double>& orders) {
  if (!(q >= 0 && q <= 1)) throw std::invalid_argument("rdp: q in [0,1]");
  if (!(sigma > 0)) throw std::invalid_argument("rdp: sigma must be positive");
  RdpCurve curve;
  curve.orders = orders;
  curve.values.reserve(orders.size());
  for (double a : orders) {
    if (!(a > 1)) throw std::invalid_argument("rdp: orders must exceed 1");
    const int ia = static_cast<int>(std::llround(a));
    if (std::abs(a - ia) > 1e-9) {
      throw std::invalid_argument("rdp: integer orders required");
    }
    double v;
    if (q == 0) {
      v = 0.0;
    } else if (q == 1) {
      v = a / (2.0 * sigma * sigma);
    } else {
      v = std::max(0.0, log_a_int(q, sigma, ia) / (a - 1.0));
    }
    curve.values.push_back(v);
  }
  return curve;
}

double epsilon_from_rdp(const RdpCurve& curve, int T, double delta) {
  if (curve.orders.empty()) throw std::invalid_argument("epsilon_from_rdp: empty order grid");
  if (T < 1) throw std::invalid_argument("epsilon_from_rdp: T >= 1");
  if (!(delta > 0 && delta < 1)) throw std::invalid_argument("epsilon_from_rdp: delta in (0,1)");
  const double log_inv_delta = std::log(1.0 / delta);
  double best = std::numeric_limits<double>::infinity();
  for (size_t i = 0; i < curve.orders.size(); ++i) {
    const double a = curve.orders[i];
    best = std::min(best, T * curve.values[i] + log_inv_delta / (a - 1.0));
  }
  return best;
}

double calibrate_sigma(double q, int T, double epsilon, double delta, double tol,
                       const std::vector<double>& orders) {
  if (!(epsilon > 0)) throw std::invalid_argument("calibrate_sigma: epsilon > 0");
  if (!(tol > 0 && tol <= 0.1)) throw std::invalid_argument("calibrate_sigma: tol in (0, 0.1]");

  auto achieved = [&](double sigma) {
    return epsilon_from_rdp(rdp_sampled_gaussian(q, sigma, orders), T, delta);
  };

  double lo = 1e-2, hi = 1.0;
  // Grow hi until it over-delivers (achieved <= epsilon).
  int guard = 0;
  while (achieved(hi) > epsilon) {
    hi *= 2.0;
    if (++guard > 60) {
      throw std::runtime_error("calibrate_sigma: bracket exhausted, hi > " +
                               std::to_string(hi));
    }
  }
  if (achieved(lo) <= epsilon) return lo;

  // achieved(sigma) is continuous and decreasing; bisect until the upper end
  // of the bracket lands in [epsilon*(1-tol), epsilon].
  for (int it = 0; it < 200; ++it) {
    const double eh = achieved(hi);
    if (eh >= epsilon * (1.0 - tol) && eh <= epsilon) break;
    const double mid = 0.5 * (lo + hi);
    if (achieved(mid) <= epsilon) {
      hi = mid;
    } else {
      lo = mid;
    }
    if (it == 199) {
      throw std::runtime_error("calibrate_sigma: bisection failed to converge in bracket [" +
                               std::to_string(lo) + ", " + std::to_string(hi) + "]");
    }
  }
  return hi;
}

Eigen::VectorXd gaussian_aggregate(const std::vector<Eigen::VectorXd>& deltas,
                                   double clip, double sigma, int cohort,
                                   uint64_t seed, int noise_cohort) {
  if (cohort < 1) throw std::invalid_argument("gaussian_aggregate: cohort >= 1");
  if (deltas.empty()) throw std::invalid_argument("gaussian_aggregate: no deltas");
  if (noise_cohort <= 0) noise_cohort = cohort;
  const Eigen::Index dim = deltas.front().size();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(dim);
  for (const auto& d : deltas) {
    if (d.size() != dim) throw std::invalid_argument("gaussian_aggregate: dimension mismatch");
    sum += clip_to_norm(d, clip);
  }
  Eigen::VectorXd out = sum / static_cast<double>(cohort);
  if (sigma > 0) {
    auto rng = make_rng(seed, "gaussian_aggregate");
    std::normal_distribution<double> gauss(0.0, sigma * clip / noise_cohort);
    for (Eigen::Index i = 0; i < dim; ++i) out(i) += gauss(rng);
  }
  return out;
}

int64_t geometric_noise(int64_t count, double epsilon0, int64_t sensitivity,
                        std::mt19937_64& rng) {
  if (!(epsilon0 > 0)) throw std::invalid_argument("geometric_noise: epsilon0 > 0");
  if (sensitivity < 1) throw std::invalid_argument("geometric_noise: sensitivity >= 1");
  const double r = std::exp(-epsilon0 / static_cast<double>(sensitivity));
  // Z = G1 - G2 with G ~ Geometric(1-r) on {0,1,...} gives the two-sided pmf.
  std::uniform_real_distribution<double> unif(std::numeric_limits<double>::min(), 1.0);
  const double log_r = std::log(r);
  auto geo = [&]() -> int64_t {
    return static_cast<int64_t>(std::floor(std::log(unif(rng)) / log_r));
  };
  return count + geo() - geo();
}

int64_t geometric_noise(int64_t count, double epsilon0, int64_t sensitivity,
                        uint64_t seed) {
  auto rng = make_rng(seed, "geometric_noise");
  return geometric_noise(count, epsilon0, sensitivity, rng);
}

UnigramEstimate UnigramEstimate::from_probs(std::string domain, Eigen::VectorXd p) {
  UnigramEstimate e;
  e.domain = std::move(domain);
  e.counts = p;
  e.smoothing = 0.0;
  e.probs = p.cwiseMax(1e-300);
  e.total = e.probs.sum();
  e.probs /= e.total;
  return e;
}

UnigramEstimate private_unigrams(const std::vector<UnigramContribution>& clients,
                                 const std::string& domain, double epsilon0,
                                 int max_sequences, int seq_len, int vocab_size,
                                 int pad_id, uint64_t seed) {
  if (vocab_size < 1) throw std::invalid_argument("private_unigrams: vocab_size >= 1");
  if (max_sequences < 1 || seq_len < 1) {
    throw std::invalid_argument("private_unigrams: max_sequences, seq_len >= 1");
  }
  UnigramEstimate est;
  est.domain = domain;
  est.smoothing = 1.0;
  if (clients.empty()) {
    est.uniform_fallback = true;
    est.counts = Eigen::VectorXd::Zero(vocab_size);
    est.probs = Eigen::VectorXd::Constant(vocab_size, 1.0 / vocab_size);
    est.total = vocab_size;
    return est;
  }

  Eigen::VectorXd counts = Eigen::VectorXd::Zero(vocab_size);
  for (const auto& c : clients) {
    if (c.sequences.rows() != seq_len) {
      throw std::invalid_argument("private_unigrams: sequence length mismatch");
    }
    const int n_seq = std::min<int>(max_sequences, static_cast<int>(c.sequences.cols()));
    for (int s = 0; s < n_seq; ++s) {
      for (int t = 0; t < seq_len; ++t) {
        const int id = c.sequences(t, s);
        if (id < 0 || id >= vocab_size) {
          throw std::invalid_argument("private_unigrams: token id out of range");
        }
        if (id != pad_id) counts(id) += 1.0;
      }
    }
  }

  const int64_t sensitivity = static_cast<int64_t>(max_sequences) * seq_len;
  auto rng = make_rng(seed, "private_unigrams");
  for (int v = 0; v < vocab_size; ++v) {
    const int64_t noisy = geometric_noise(static_cast<int64_t>(counts(v)), epsilon0,
                                          sensitivity, rng);
    counts(v) = std::max<int64_t>(0, noisy);
  }
  est.counts = counts;
  est.total = counts.sum() + est.smoothing * vocab_size;
  est.probs = (counts.array() + est.smoothing) / est.total;
  return est;
}

}  // namespace pfl
