#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace pfl {

/// Privacy budget and mechanism parameters for one training run.
struct PrivacySpec {
  double epsilon = 2.0;      // total (epsilon, delta) budget
  double delta = 1e-6;
  double epsilon0 = 0.8;     // pure-epsilon budget for the unigram release
  double delta0 = 0.0;
  double sigma = 0.0;        // noise multiplier (derived via calibrate_sigma)
  int T = 2000;              // round count
  double q = 0.0;            // per-round sampling rate
  double clip = 0.5;         // L2 bound on client model differences

  void validate() const;
};

/// Renyi-DP curve: epsilon(alpha) at a grid of orders alpha > 1.
struct RdpCurve {
  std::vector<double> orders;
  std::vector<double> values;
};

/// Integer orders {2..64} u {128, 256}.
std::vector<double> default_order_grid();

/// Scales v to L2 norm <= bound, preserving direction. v with norm <= bound
/// is returned unchanged (bitwise).
Eigen::VectorXd clip_to_norm(const Eigen::VectorXd& v, double bound);

/// RDP of the Poisson-subsampled Gaussian mechanism at integer orders, via
/// the binomial expansion of E_nu[(mu/nu)^alpha] evaluated in log space
/// (exact at integer alpha). q = 1 reduces to alpha / (2 sigma^2).
RdpCurve rdp_sampled_gaussian(double q, double sigma,
                              const std::vector<double>& orders);

/// Composes the curve over T rounds and converts to (epsilon, delta)-DP:
///   epsilon = min_alpha [ T * eps(alpha) + log(1/delta) / (alpha - 1) ].
double epsilon_from_rdp(const RdpCurve& curve, int T, double delta);

/// Smallest sigma whose achieved epsilon lies in [epsilon*(1-tol), epsilon],
/// found by bisection over sigma (achieved epsilon is decreasing in sigma).
double calibrate_sigma(double q, int T, double epsilon, double delta, double tol,
                       const std::vector<double>& orders = default_order_grid());

/// Clips each delta, averages over `cohort` (the divisor is the nominal
/// cohort even when fewer deltas arrive), and adds isotropic Gaussian noise
/// with per-coordinate std sigma * clip / noise_cohort. noise_cohort <= 0
/// means use `cohort`; passing the calibration cohort here reproduces the
/// large-C-accounting / small-C-training device.
Eigen::VectorXd gaussian_aggregate(const std::vector<Eigen::VectorXd>& deltas,
                                   double clip, double sigma, int cohort,
                                   uint64_t seed, int noise_cohort = 0);

/// Draws two-sided geometric noise Z, Pr[Z=z] = ((1-r)/(1+r)) r^|z| with
/// r = exp(-epsilon0/sensitivity), and returns count + Z.
int64_t geometric_noise(int64_t count, double epsilon0, int64_t sensitivity,
                        std::mt19937_64& rng);
int64_t geometric_noise(int64_t count, double epsilon0, int64_t sensitivity,
                        uint64_t seed);

/// Smoothed, normalized unigram distribution for one domain.
struct UnigramEstimate {
  std::string domain;            // "S" or "T"
  Eigen::VectorXd counts;        // noisy counts, clamped >= 0
  double total = 0;              // normalization mass (post-smoothing)
  double smoothing = 1.0;        // add-constant
  Eigen::VectorXd probs;         // strictly positive, sums to 1
  bool uniform_fallback = false; // set when built from an empty client list

  double prob(int token) const { return probs(token); }
  double log_prob(int token) const { return std::log(probs(token)); }

  /// Builds an estimate directly from a probability vector (tests, synthetic
  /// references). Probabilities are floored at a tiny positive value and
  /// renormalized.
  static UnigramEstimate from_probs(std::string domain, Eigen::VectorXd p);
};

/// Per-client token contributions to a private unigram release. Each client
/// contributes counts from at most max_sequences sequences of seq_len tokens,
/// truncated by sequence index, bounding the L1 sensitivity to
/// max_sequences * seq_len.
struct UnigramContribution {
  Eigen::MatrixXi sequences;  // seq_len x n_sequences, token ids
};

/// Geometric-mechanism unigram estimation: noisy per-token counts, negatives
/// clamped, add-one smoothing, normalized. PAD tokens are excluded from the
/// counts (post-processing); every vocab id still receives smoothed mass.
UnigramEstimate private_unigrams(const std::vector<UnigramContribution>& clients,
                                 const std::string& domain, double epsilon0,
                                 int max_sequences, int seq_len, int vocab_size,
                                 int pad_id, uint64_t seed);

}  // namespace pfl
