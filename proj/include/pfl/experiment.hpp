#pragma once

#include <nlohmann/json.hpp>
#include <ostream>
#include <string>
#include <vector>

#include "pfl/data.hpp"
#include "pfl/federated.hpp"
#include "pfl/population.hpp"

namespace pfl {

/// Fully resolved experiment configuration. Loaded from JSON with unknown
/// keys rejected (a typo in a privacy parameter must not pass silently).
struct SuiteConfig {
  uint64_t master_seed = 1;
  std::vector<uint64_t> seeds;  // defaults to {master_seed}

  // Data: either a synthetic population or a corpus file.
  bool use_synthetic = true;
  SynthConfig synth;
  std::string corpus_path;
  int vocab_size = 2000;

  ModelConfig model;
  PrivacySpec privacy;
  Schedule schedule_defaults;
  double server_lr = 0.1;
  double client_lr = 0.5;
  double eligible_frac = 0.5;
  double lambda = 1.0;
  int eval_every = 50;
  int max_eval_sequences = 2000;
  int threads = 1;

  std::vector<std::string> schedules;  // names to run in a suite

  // Optional latency sweep grid.
  bool has_sweep = false;
  std::vector<double> sweep_n;
  std::vector<double> sweep_c;
  double sweep_p = 0.5;
  double sweep_q = 0.05;
  double sweep_lambda = 1.0;
};

SuiteConfig load_config(const std::string& path);
SuiteConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const SuiteConfig& cfg);

/// Run manifest: resolved config, version, seed, derived quantities. Loading
/// the embedded config back reproduces an identical run.
nlohmann::json make_manifest(const SuiteConfig& cfg,
                             const std::vector<std::string>& notes);

struct LatencySweepCell {
  double n = 0, c = 0, p = 0, q = 0, lambda = 0;
  bool feasible = false;
  std::string status;  // "ok", "zero-latency", "infeasible"
  LatencyEstimate est;
  double relative = 0;  // exact latency normalized to the smallest-N feasible cell
};

/// Evaluates the closed forms over an (N, C) grid. Infeasible cells are kept
/// and flagged.
std::vector<LatencySweepCell> report_latency_sweep(const std::vector<double>& ns,
                                                   const std::vector<double>& cs,
                                                   double p, double q, double lambda);

void write_latency_sweep_csv(const std::vector<LatencySweepCell>& cells, std::ostream& out);

/// Header: round,phase,clients,val_ppl,test_ppl,noisy_update_norm,cum_latency,sigma,eps_spent
void write_metrics_csv(const ScheduleMetrics& metrics, std::ostream& out);

struct Dataset {
  std::vector<ClientRecord> clients;
  Vocab vocab;
  PopulationSplit split;
};

/// Generates or loads the population, builds the vocab from target-domain
/// training clients, preprocesses, splits 6:2:2.
Dataset prepare_dataset(const SuiteConfig& cfg, uint64_t seed);

/// Runs every configured schedule over shared data per seed, writing
/// per-run metrics CSVs, a summary table, the latency sweep CSV (when
/// configured), and the run manifest under out_dir.
void run_experiment_suite(const std::string& config_path, const std::string& out_dir);
void run_experiment_suite(const SuiteConfig& cfg, const std::string& out_dir);

/// CSV-stable number formatting ("%.10g").
std::string format_number(double v);

}  // namespace pfl
