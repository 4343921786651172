// pflsim: desk-scale private federated learning simulator.
//
// Subcommands: prepare, latency, calibrate, train, suite, report.
// Exit code 0 on success; on failure, a machine-readable error JSON is
// printed to stderr and the exit code is nonzero.

#include <CLI11.hpp>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "pfl/experiment.hpp"
#include "pfl/federated.hpp"
#include "pfl/population.hpp"
#include "pfl/privacy.hpp"
#include "pfl/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Grid spec "N1,N2,...xC1,C2,..." e.g. "10000,100000x400,5000".
std::pair<std::vector<double>, std::vector<double>> parse_grid(const std::string& spec) {
  const size_t x = spec.find('x');
  if (x == std::string::npos) throw std::invalid_argument("sweep: expected 'N,...xC,...'");
  auto parse_list = [](const std::string& s) {
    std::vector<double> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stod(item));
    if (out.empty()) throw std::invalid_argument("sweep: empty list");
    return out;
  };
  return {parse_list(spec.substr(0, x)), parse_list(spec.substr(x + 1))};
}

std::ostream& open_out(std::ofstream& file, const std::string& path) {
  if (path.empty()) return std::cout;
  file.open(path);
  if (!file) throw std::runtime_error("cannot open output file " + path);
  return file;
}

int cmd_prepare(const std::string& input, const std::string& synthetic, int vocab_size,
                uint64_t seed, const std::string& out) {
  pfl::SuiteConfig cfg;
  cfg.vocab_size = vocab_size;
  if (!input.empty() && !synthetic.empty()) {
    throw std::invalid_argument("prepare: give exactly one of --input / --synthetic");
  }
  if (!input.empty()) {
    cfg.use_synthetic = false;
    cfg.corpus_path = input;
  } else if (!synthetic.empty()) {
    json j;
    if (fs::exists(synthetic)) {
      std::ifstream in(synthetic);
      in >> j;
    } else {
      j = json::parse(synthetic);
    }
    json wrapped;
    wrapped["data"]["synthetic"] = j;
    cfg = pfl::config_from_json(wrapped);
    cfg.vocab_size = vocab_size;
  } else {
    throw std::invalid_argument("prepare: give one of --input / --synthetic");
  }
  const pfl::Dataset ds = pfl::prepare_dataset(cfg, seed);
  pfl::save_population(ds.clients, ds.vocab, out);
  std::cout << "clients=" << ds.clients.size() << " vocab=" << ds.vocab.size()
            << " train/val/test=" << ds.split.train.size() << "/"
            << ds.split.validation.size() << "/" << ds.split.test.size() << "\n";
  return 0;
}

int cmd_latency(double population, double eligible_frac, double sample_rate, double cohort,
                double rate_lambda, int64_t trials, uint64_t seed, const std::string& sweep,
                const std::string& out_path) {
  std::ofstream file;
  std::ostream& out = open_out(file, out_path);
  out << "N,C,p,q,lambda,lower,exact,upper,mc_mean,mc_stderr\n";
  std::vector<std::pair<double, double>> grid;
  if (!sweep.empty()) {
    auto [ns, cs] = parse_grid(sweep);
    for (double n : ns)
      for (double c : cs) grid.emplace_back(n, c);
  } else {
    grid.emplace_back(population, cohort);
  }
  for (auto [n, c] : grid) {
    pfl::PopulationConfig pc{n, eligible_frac, sample_rate, c, rate_lambda};
    const pfl::LatencyBounds b = pfl::latency_bounds(pc);
    const double exact = pfl::latency_exact(pc);
    pfl::MonteCarloLatency mc;
    if (trials > 0) mc = pfl::latency_monte_carlo(pc, trials, seed);
    out << pfl::format_number(n) << ',' << pfl::format_number(c) << ','
        << pfl::format_number(eligible_frac) << ',' << pfl::format_number(sample_rate)
        << ',' << pfl::format_number(rate_lambda) << ',' << pfl::format_number(b.lower)
        << ',' << pfl::format_number(exact) << ',' << pfl::format_number(b.upper) << ','
        << pfl::format_number(mc.mean) << ',' << pfl::format_number(mc.stderr_) << '\n';
  }
  return 0;
}

int cmd_calibrate(double q, int rounds, double epsilon, double delta, double tol) {
  const double sigma = pfl::calibrate_sigma(q, rounds, epsilon, delta, tol);
  const double achieved = pfl::epsilon_from_rdp(
      pfl::rdp_sampled_gaussian(q, sigma, pfl::default_order_grid()), rounds, delta);
  json j;
  j["sigma"] = sigma;
  j["achieved_epsilon"] = achieved;
  std::cout << j.dump() << "\n";
  return 0;
}

int cmd_train(const std::string& schedule_name, const pfl::SuiteConfig& base,
              const std::string& out_dir) {
  pfl::SuiteConfig cfg = base;
  cfg.schedules = {schedule_name};
  pfl::run_experiment_suite(cfg, out_dir);
  std::cout << "metrics written to " << out_dir << "\n";
  return 0;
}

int cmd_report(const std::string& sweep, double p, double q, double lambda,
               const std::string& out_path) {
  auto [ns, cs] = parse_grid(sweep);
  const auto cells = pfl::report_latency_sweep(ns, cs, p, q, lambda);
  std::ofstream file;
  std::ostream& out = open_out(file, out_path);
  pfl::write_latency_sweep_csv(cells, out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"pflsim: private federated learning population-expansion simulator"};
  app.require_subcommand(1);

  // prepare
  auto* prepare = app.add_subcommand("prepare", "build a preprocessed population cache");
  std::string prep_input, prep_synth, prep_out = "population.pflp";
  int prep_vocab = 2000;
  uint64_t prep_seed = 1;
  prepare->add_option("--input", prep_input, "corpus file: client_id<TAB>domain<TAB>sentence");
  prepare->add_option("--synthetic", prep_synth, "synthetic config (inline JSON or file)");
  prepare->add_option("--vocab-size", prep_vocab);
  prepare->add_option("--seed", prep_seed);
  prepare->add_option("--out", prep_out);

  // latency
  auto* latency = app.add_subcommand("latency", "device-sampling latency estimates");
  double lat_n = 10000, lat_p = 0.5, lat_q = 0.05, lat_c = 500, lat_lambda = 1.0;
  int64_t lat_trials = 0;
  uint64_t lat_seed = 1;
  std::string lat_sweep, lat_out;
  latency->add_option("--population", lat_n);
  latency->add_option("--eligible-frac", lat_p);
  latency->add_option("--sample-rate", lat_q);
  latency->add_option("--cohort", lat_c);
  latency->add_option("--rate-lambda", lat_lambda);
  latency->add_option("--trials", lat_trials, "Monte Carlo trials (0 disables)");
  latency->add_option("--seed", lat_seed);
  latency->add_option("--sweep", lat_sweep, "grid spec: N1,N2,...xC1,C2,...");
  latency->add_option("--out", lat_out);

  // calibrate
  auto* calibrate = app.add_subcommand("calibrate", "noise multiplier calibration");
  double cal_q = 0.08, cal_eps = 1.2, cal_delta = 1e-6, cal_tol = 0.01;
  int cal_rounds = 2000;
  calibrate->add_option("--q", cal_q);
  calibrate->add_option("--rounds", cal_rounds);
  calibrate->add_option("--epsilon", cal_eps);
  calibrate->add_option("--delta", cal_delta);
  calibrate->add_option("--tol", cal_tol);

  // train
  auto* train = app.add_subcommand("train", "run one schedule");
  std::string tr_schedule = "union", tr_corpus, tr_synth, tr_out = "out";
  pfl::SuiteConfig tr_cfg;
  train->add_option("--schedule", tr_schedule)
      ->check(CLI::IsMember(
          {"target-small", "target-large", "union", "iw", "pt", "iwpt"}));
  train->add_option("--rounds", tr_cfg.schedule_defaults.rounds_total);
  train->add_option("--pretrain-rounds", tr_cfg.schedule_defaults.pretrain_rounds);
  train->add_option("--finetune-rounds", tr_cfg.schedule_defaults.finetune_rounds);
  train->add_option("--cohort", tr_cfg.schedule_defaults.cohort);
  train->add_option("--calibration-cohort", tr_cfg.schedule_defaults.calibration_cohort);
  train->add_option("--alpha", tr_cfg.schedule_defaults.alpha);
  train->add_option("--epsilon", tr_cfg.privacy.epsilon);
  train->add_option("--delta", tr_cfg.privacy.delta);
  train->add_option("--epsilon0", tr_cfg.privacy.epsilon0);
  train->add_option("--clip", tr_cfg.privacy.clip);
  train->add_option("--server-lr", tr_cfg.server_lr);
  train->add_option("--client-lr", tr_cfg.client_lr);
  train->add_option("--eval-every", tr_cfg.eval_every);
  train->add_option("--seed", tr_cfg.master_seed);
  train->add_option("--vocab-size", tr_cfg.vocab_size);
  train->add_option("--embed-dim", tr_cfg.model.embed_dim);
  train->add_option("--hidden-dim", tr_cfg.model.hidden_dim);
  train->add_option("--threads", tr_cfg.threads);
  train->add_option("--corpus", tr_corpus);
  train->add_option("--synthetic", tr_synth, "synthetic config (inline JSON or file)");
  train->add_option("--out", tr_out);

  // suite
  auto* suite = app.add_subcommand("suite", "run a full experiment suite from a config");
  std::string suite_config, suite_out = "out";
  suite->add_option("--config", suite_config)->required();
  suite->add_option("--out", suite_out);

  // report
  auto* report = app.add_subcommand("report", "latency sweep report CSV");
  std::string rep_sweep = "10000,20000,50000,100000,1000000x400,5000", rep_out;
  double rep_p = 0.5, rep_q = 0.05, rep_lambda = 1.0;
  report->add_option("--sweep", rep_sweep, "grid spec: N1,N2,...xC1,C2,...");
  report->add_option("--eligible-frac", rep_p);
  report->add_option("--sample-rate", rep_q);
  report->add_option("--rate-lambda", rep_lambda);
  report->add_option("--out", rep_out);

  CLI11_PARSE(app, argc, argv);

  try {
    if (prepare->parsed()) {
      return cmd_prepare(prep_input, prep_synth, prep_vocab, prep_seed, prep_out);
    }
    if (latency->parsed()) {
      return cmd_latency(lat_n, lat_p, lat_q, lat_c, lat_lambda, lat_trials, lat_seed,
                         lat_sweep, lat_out);
    }
    if (calibrate->parsed()) {
      return cmd_calibrate(cal_q, cal_rounds, cal_eps, cal_delta, cal_tol);
    }
    if (train->parsed()) {
      if (!tr_corpus.empty()) {
        tr_cfg.use_synthetic = false;
        tr_cfg.corpus_path = tr_corpus;
      } else if (!tr_synth.empty()) {
        json j;
        if (fs::exists(tr_synth)) {
          std::ifstream in(tr_synth);
          in >> j;
        } else {
          j = json::parse(tr_synth);
        }
        json wrapped;
        wrapped["data"]["synthetic"] = j;
        tr_cfg.synth = pfl::config_from_json(wrapped).synth;
        tr_cfg.use_synthetic = true;
      }
      tr_cfg.seeds = {tr_cfg.master_seed};
      tr_cfg.privacy.T = tr_cfg.schedule_defaults.rounds_total;
      return cmd_train(tr_schedule, tr_cfg, tr_out);
    }
    if (suite->parsed()) {
      pfl::run_experiment_suite(suite_config, suite_out);
      std::cout << "suite written to " << suite_out << "\n";
      return 0;
    }
    if (report->parsed()) {
      return cmd_report(rep_sweep, rep_p, rep_q, rep_lambda, rep_out);
    }
  } catch (const std::exception& e) {
    json err;
    err["error"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
  return 0;
}
