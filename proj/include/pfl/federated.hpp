#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "pfl/data.hpp"
#include "pfl/langmodel.hpp"
#include "pfl/population.hpp"
#include "pfl/privacy.hpp"

namespace pfl {

enum class ScheduleKind { TARGET_SMALL, TARGET_LARGE, UNION, IW, PT, IWPT };

std::string schedule_name(ScheduleKind k);
ScheduleKind parse_schedule(const std::string& name);

struct Schedule {
  ScheduleKind kind = ScheduleKind::UNION;
  int rounds_total = 2000;
  int pretrain_rounds = 1000;  // PT / IWPT only; phases must sum to rounds_total
  int finetune_rounds = 1000;
  double alpha = 0.1;          // proportion of devices with target-domain data
  int cohort = 400;
  int calibration_cohort = 5000;

  void validate() const;
};

/// FedAdam server state. The noisy pseudo-gradient is treated as an ascent
/// direction: theta <- theta + lr * m_hat / (sqrt(v_hat) + tau).
struct ServerState {
  int round = 0;
  ModelParams params;
  Eigen::VectorXd adam_m;
  Eigen::VectorXd adam_v;
  std::string schedule_phase;
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.99;
inline constexpr double kAdamTau = 1e-3;

struct RoundResult {
  int round = 0;
  std::string phase;
  int clients_sampled = 0;
  double mean_clip_fraction = 1.0;  // mean of min(1, clip/||delta||) over cohort
  double noisy_update_norm = 0;
  std::optional<double> val_ppl;
  double wallclock_model_latency = 0;
  double sigma = 0;  // noise multiplier in effect this round
};

/// One ledger entry per mechanism invocation; the accountant can re-derive
/// the total budget from these alone.
struct LedgerEntry {
  std::string phase;
  std::string mechanism;   // "sampled_gaussian" or "geometric"
  std::string population;  // "S", "T", or "S+T"
  double q = 0;
  double sigma = 0;
  int rounds = 0;
  double epsilon0 = 0;     // geometric mechanism only (pure epsilon)
  double delta = 0;
};

/// Recomputes the total (epsilon at the given delta) from the ledger:
/// sequential composition within a population, parallel across disjoint
/// ones. Entries on "S+T" compose sequentially with everything.
double ledger_total_epsilon(const std::vector<LedgerEntry>& ledger, double delta);

/// Relative importance weight of one sequence:
///   w(x) = p_T(x) / (alpha p_T(x) + (1-alpha) p_pi(x)),
/// with p(x) the product of unigram probabilities over non-PAD tokens,
/// evaluated in log space. w lies in (0, 1/alpha].
double instance_weight(const Eigen::VectorXi& x, const UnigramEstimate& u_t,
                       const UnigramEstimate& u_pi, double alpha, int pad_id);

using WeightFn = std::function<double(const Eigen::VectorXi& sequence, Domain domain)>;

/// One local iteration: a single SGD step over all of the client's sequences
/// on the weighted loss, returning the clipped model difference
/// clip_to_norm(theta_i - theta, clip).
Eigen::VectorXd local_update(const Eigen::MatrixXi& sequences, Domain domain,
                             const ModelParams& theta, double client_lr,
                             const WeightFn& weight_fn, double clip);

/// FedAdam step, in place; increments the round counter.
void server_step(ServerState& state, const Eigen::VectorXd& noisy_delta,
                 double server_lr);

/// Everything a phase needs to run rounds.
struct PhaseSpec {
  std::string name;
  std::vector<int> eligible;   // client ids eligible this phase
  std::vector<Domain> train_domains;  // domains whose sequences clients train on
  double q = 0;
  int cohort = 0;
  int calibration_cohort = 0;
  double sigma = 0;
  int rounds = 0;
  WeightFn weight_fn;          // null => unit weights
  PopulationConfig latency_cfg;
};

struct TrainContext {
  const std::vector<ClientRecord>* clients = nullptr;
  double client_lr = 0.5;
  double server_lr = 0.1;
  double clip = 0.5;
  uint64_t seed = 0;
  int n_threads = 1;
};

/// Samples a Poisson cohort, runs local updates (in parallel, reduced in
/// ascending client-id order), aggregates with the Gaussian mechanism, and
/// applies the FedAdam step. global_round indexes the seed derivation.
RoundResult run_round(ServerState& state, const PhaseSpec& phase,
                      const TrainContext& ctx, int global_round);

struct TrainHyper {
  ModelConfig model;
  PrivacySpec privacy;
  double client_lr = 0.5;
  double server_lr = 0.1;
  double eligible_frac = 0.5;  // p in the latency model
  double lambda = 1.0;
  int eval_every = 50;
  int max_eval_sequences = 2000;
  int n_threads = 1;
};

struct ScheduleMetrics {
  std::vector<RoundResult> rounds;
  double final_val_ppl = 0;
  double final_test_ppl = 0;
  double cumulative_latency = 0;
  std::vector<LedgerEntry> ledger;
  std::vector<double> sigmas;          // per phase
  double epsilon_spent = 0;            // re-derived from the ledger
};

/// Runs a full schedule: builds phases (populations, budgets, calibrated
/// sigmas, weight functions), executes the rounds, evaluates periodically on
/// validation T data and finally on test T data.
ScheduleMetrics run_schedule(const Schedule& schedule,
                             const std::vector<ClientRecord>& clients,
                             const PopulationSplit& split, const Vocab& vocab,
                             const TrainHyper& hyper, uint64_t seed);

}  // namespace pfl
