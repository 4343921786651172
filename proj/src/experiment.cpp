#include "pfl/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "pfl/rng.hpp"

namespace pfl {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

namespace {

void check_keys(const json& j, const std::string& path,
                std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw std::invalid_argument("config: " + path + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : allowed) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) throw std::invalid_argument("config: unknown key " + path + "." + it.key());
  }
}

template <typename T>
void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

SuiteConfig config_from_json(const json& j) {
  SuiteConfig cfg;
  check_keys(j, "$",
             {"master_seed", "seeds", "data", "vocab_size", "model", "privacy", "train",
              "schedules", "latency_sweep"});
  get_if(j, "master_seed", cfg.master_seed);
  if (j.contains("seeds")) cfg.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  if (cfg.seeds.empty()) cfg.seeds = {cfg.master_seed};
  get_if(j, "vocab_size", cfg.vocab_size);

  if (j.contains("data")) {
    const json& d = j.at("data");
    check_keys(d, "$.data", {"synthetic", "corpus"});
    if (d.contains("synthetic") && d.contains("corpus")) {
      throw std::invalid_argument("config: $.data must set exactly one of synthetic/corpus");
    }
    if (d.contains("corpus")) {
      cfg.use_synthetic = false;
      cfg.corpus_path = d.at("corpus").get<std::string>();
    } else if (d.contains("synthetic")) {
      cfg.use_synthetic = true;
      const json& s = d.at("synthetic");
      check_keys(s, "$.data.synthetic",
                 {"n_clients_t", "population_ratio", "overlap", "n_words", "shared_mass",
                  "min_tokens", "max_tokens", "min_sentence_len", "max_sentence_len"});
      get_if(s, "n_clients_t", cfg.synth.n_clients_t);
      get_if(s, "population_ratio", cfg.synth.population_ratio);
      get_if(s, "overlap", cfg.synth.overlap);
      get_if(s, "n_words", cfg.synth.n_words);
      get_if(s, "shared_mass", cfg.synth.shared_mass);
      get_if(s, "min_tokens", cfg.synth.min_tokens);
      get_if(s, "max_tokens", cfg.synth.max_tokens);
      get_if(s, "min_sentence_len", cfg.synth.min_sentence_len);
      get_if(s, "max_sentence_len", cfg.synth.max_sentence_len);
    }
  }

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m, "$.model", {"embed_dim", "hidden_dim", "seq_len"});
    get_if(m, "embed_dim", cfg.model.embed_dim);
    get_if(m, "hidden_dim", cfg.model.hidden_dim);
    get_if(m, "seq_len", cfg.model.seq_len);
  }

  if (j.contains("privacy")) {
    const json& p = j.at("privacy");
    check_keys(p, "$.privacy", {"epsilon", "delta", "epsilon0", "delta0", "clip"});
    get_if(p, "epsilon", cfg.privacy.epsilon);
    get_if(p, "delta", cfg.privacy.delta);
    get_if(p, "epsilon0", cfg.privacy.epsilon0);
    get_if(p, "delta0", cfg.privacy.delta0);
    get_if(p, "clip", cfg.privacy.clip);
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, "$.train",
               {"rounds", "pretrain_rounds", "finetune_rounds", "cohort",
                "calibration_cohort", "alpha", "server_lr", "client_lr", "eval_every",
                "eligible_frac", "lambda", "threads", "max_eval_sequences"});
    get_if(t, "rounds", cfg.schedule_defaults.rounds_total);
    get_if(t, "pretrain_rounds", cfg.schedule_defaults.pretrain_rounds);
    get_if(t, "finetune_rounds", cfg.schedule_defaults.finetune_rounds);
    get_if(t, "cohort", cfg.schedule_defaults.cohort);
    get_if(t, "calibration_cohort", cfg.schedule_defaults.calibration_cohort);
    get_if(t, "alpha", cfg.schedule_defaults.alpha);
    double server_lr = 0.1, client_lr = 0.5;
    get_if(t, "server_lr", server_lr);
    get_if(t, "client_lr", client_lr);
    cfg.privacy.T = cfg.schedule_defaults.rounds_total;
    get_if(t, "eval_every", cfg.eval_every);
    get_if(t, "eligible_frac", cfg.eligible_frac);
    get_if(t, "lambda", cfg.lambda);
    get_if(t, "threads", cfg.threads);
    get_if(t, "max_eval_sequences", cfg.max_eval_sequences);
    cfg.server_lr = server_lr;
    cfg.client_lr = client_lr;
  }

  if (j.contains("schedules")) {
    cfg.schedules = j.at("schedules").get<std::vector<std::string>>();
    for (const auto& s : cfg.schedules) parse_schedule(s);  // validate names
  }

  if (j.contains("latency_sweep")) {
    const json& s = j.at("latency_sweep");
    check_keys(s, "$.latency_sweep", {"N", "C", "p", "q", "lambda"});
    cfg.has_sweep = true;
    cfg.sweep_n = s.at("N").get<std::vector<double>>();
    cfg.sweep_c = s.at("C").get<std::vector<double>>();
    get_if(s, "p", cfg.sweep_p);
    get_if(s, "q", cfg.sweep_q);
    get_if(s, "lambda", cfg.sweep_lambda);
  }
  return cfg;
}

SuiteConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("config: cannot open " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("config: parse error in " + path + ": " + e.what());
  }
  return config_from_json(j);
}

json config_to_json(const SuiteConfig& cfg) {
  json j;
  j["master_seed"] = cfg.master_seed;
  j["seeds"] = cfg.seeds;
  j["vocab_size"] = cfg.vocab_size;
  if (cfg.use_synthetic) {
    j["data"]["synthetic"] = {{"n_clients_t", cfg.synth.n_clients_t},
                              {"population_ratio", cfg.synth.population_ratio},
                              {"overlap", cfg.synth.overlap},
                              {"n_words", cfg.synth.n_words},
                              {"shared_mass", cfg.synth.shared_mass},
                              {"min_tokens", cfg.synth.min_tokens},
                              {"max_tokens", cfg.synth.max_tokens},
                              {"min_sentence_len", cfg.synth.min_sentence_len},
                              {"max_sentence_len", cfg.synth.max_sentence_len}};
  } else {
    j["data"]["corpus"] = cfg.corpus_path;
  }
  j["model"] = {{"embed_dim", cfg.model.embed_dim},
                {"hidden_dim", cfg.model.hidden_dim},
                {"seq_len", cfg.model.seq_len}};
  j["privacy"] = {{"epsilon", cfg.privacy.epsilon},
                  {"delta", cfg.privacy.delta},
                  {"epsilon0", cfg.privacy.epsilon0},
                  {"delta0", cfg.privacy.delta0},
                  {"clip", cfg.privacy.clip}};
  j["train"] = {{"rounds", cfg.schedule_defaults.rounds_total},
                {"pretrain_rounds", cfg.schedule_defaults.pretrain_rounds},
                {"finetune_rounds", cfg.schedule_defaults.finetune_rounds},
                {"cohort", cfg.schedule_defaults.cohort},
                {"calibration_cohort", cfg.schedule_defaults.calibration_cohort},
                {"alpha", cfg.schedule_defaults.alpha},
                {"server_lr", cfg.server_lr},
                {"client_lr", cfg.client_lr},
                {"eval_every", cfg.eval_every},
                {"eligible_frac", cfg.eligible_frac},
                {"lambda", cfg.lambda},
                {"threads", cfg.threads},
                {"max_eval_sequences", cfg.max_eval_sequences}};
  j["schedules"] = cfg.schedules;
  if (cfg.has_sweep) {
    j["latency_sweep"] = {{"N", cfg.sweep_n},
                          {"C", cfg.sweep_c},
                          {"p", cfg.sweep_p},
                          {"q", cfg.sweep_q},
                          {"lambda", cfg.sweep_lambda}};
  }
  return j;
}

json make_manifest(const SuiteConfig& cfg, const std::vector<std::string>& notes) {
  json m;
  m["version"] = "pflsim-1.0";
  m["master_seed"] = cfg.master_seed;
  m["config"] = config_to_json(cfg);
  m["notes"] = notes;
  const auto now = std::chrono::system_clock::now();
  m["created_unix"] = std::chrono::duration_cast<std::chrono::seconds>(
                          now.time_since_epoch())
                          .count();
  return m;
}

std::vector<LatencySweepCell> report_latency_sweep(const std::vector<double>& ns,
                                                   const std::vector<double>& cs,
                                                   double p, double q, double lambda) {
  std::vector<LatencySweepCell> cells;
  for (double n : ns) {
    for (double c : cs) {
      LatencySweepCell cell;
      cell.n = n;
      cell.c = c;
      cell.p = p;
      cell.q = q;
      cell.lambda = lambda;
      PopulationConfig pc{n, p, q, c, lambda};
      try {
        if (c >= n) throw std::invalid_argument("C >= N");
        cell.est.lower = latency_bounds(pc).lower;
        cell.est.upper = latency_bounds(pc).upper;
        cell.est.exact = latency_exact(pc);
        cell.feasible = true;
        cell.status = "ok";
      } catch (const zero_latency_error&) {
        cell.status = "zero-latency";
      } catch (const std::exception&) {
        cell.status = "infeasible";
      }
      cells.push_back(cell);
    }
  }
  // Normalize by the smallest-N feasible cell (first in N-major order).
  double ref = 0;
  for (const auto& cell : cells) {
    if (cell.feasible) {
      ref = cell.est.exact;
      break;
    }
  }
  if (ref > 0) {
    for (auto& cell : cells) {
      if (cell.feasible) cell.relative = cell.est.exact / ref;
    }
  }
  return cells;
}

void write_latency_sweep_csv(const std::vector<LatencySweepCell>& cells, std::ostream& out) {
  out << "N,C,p,q,lambda,lower,exact,upper,relative,status\n";
  for (const auto& c : cells) {
    out << format_number(c.n) << ',' << format_number(c.c) << ',' << format_number(c.p)
        << ',' << format_number(c.q) << ',' << format_number(c.lambda) << ',';
    if (c.feasible) {
      out << format_number(c.est.lower) << ',' << format_number(c.est.exact) << ','
          << format_number(c.est.upper) << ',' << format_number(c.relative);
    } else {
      out << ",,,";
    }
    out << ',' << c.status << '\n';
  }
}

void write_metrics_csv(const ScheduleMetrics& metrics, std::ostream& out) {
  out << "round,phase,clients,val_ppl,test_ppl,noisy_update_norm,cum_latency,sigma,eps_spent\n";
  double cum_latency = 0;
  for (size_t i = 0; i < metrics.rounds.size(); ++i) {
    const RoundResult& r = metrics.rounds[i];
    cum_latency += r.wallclock_model_latency;
    const bool last = i + 1 == metrics.rounds.size();
    out << r.round << ',' << r.phase << ',' << r.clients_sampled << ',';
    if (r.val_ppl) out << format_number(*r.val_ppl);
    out << ',';
    if (last) out << format_number(metrics.final_test_ppl);
    out << ',' << format_number(r.noisy_update_norm) << ',' << format_number(cum_latency)
        << ',' << format_number(r.sigma) << ',' << format_number(metrics.epsilon_spent)
        << '\n';
  }
}

Dataset prepare_dataset(const SuiteConfig& cfg, uint64_t seed) {
  Dataset ds;
  std::vector<RawClient> raw;
  if (cfg.use_synthetic) {
    SynthConfig sc = cfg.synth;
    sc.seed = derive_seed(seed, "synth");
    raw = generate_synthetic_population(sc);
  } else {
    raw = load_corpus(cfg.corpus_path);
  }
  // The split is by client id; do it on raw ids so the vocab sees only
  // training clients.
  std::vector<ClientRecord> stubs(raw.size());
  for (size_t i = 0; i < raw.size(); ++i) stubs[i].id = raw[i].id;
  std::sort(stubs.begin(), stubs.end(),
            [](const ClientRecord& a, const ClientRecord& b) { return a.id < b.id; });
  ds.split = split_clients(stubs, derive_seed(seed, "split"));
  ds.vocab = build_vocab(raw, ds.split.train, cfg.vocab_size);
  ds.clients = preprocess_population(raw, ds.vocab);
  return ds;
}

namespace {

double median(std::vector<double> v) {
  if (v.empty()) return 0;
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

void run_experiment_suite(const SuiteConfig& cfg, const std::string& out_dir) {
  if (cfg.schedules.empty()) throw std::invalid_argument("suite: no schedules configured");
  fs::create_directories(out_dir);

  TrainHyper hyper;
  hyper.model = cfg.model;
  hyper.model.vocab_size = cfg.vocab_size;
  hyper.privacy = cfg.privacy;
  hyper.client_lr = cfg.client_lr;
  hyper.server_lr = cfg.server_lr;
  hyper.eligible_frac = cfg.eligible_frac;
  hyper.lambda = cfg.lambda;
  hyper.eval_every = cfg.eval_every;
  hyper.max_eval_sequences = cfg.max_eval_sequences;
  hyper.n_threads = cfg.threads;

  struct Row {
    std::string method;
    std::vector<double> val, test, latency;
  };
  std::vector<Row> rows;
  for (const auto& name : cfg.schedules) rows.push_back({name, {}, {}, {}});

  std::vector<std::string> notes;
  json ledger_out = json::array();

  for (uint64_t seed : cfg.seeds) {
    const Dataset ds = prepare_dataset(cfg, seed);
    for (auto& row : rows) {
      Schedule sched = cfg.schedule_defaults;
      sched.kind = parse_schedule(row.method);
      const ScheduleMetrics m =
          run_schedule(sched, ds.clients, ds.split, ds.vocab, hyper, seed);
      row.val.push_back(m.final_val_ppl);
      row.test.push_back(m.final_test_ppl);
      row.latency.push_back(m.cumulative_latency);

      const fs::path csv_path =
          fs::path(out_dir) / (row.method + "_seed" + std::to_string(seed) + ".csv");
      std::ofstream csv(csv_path);
      write_metrics_csv(m, csv);

      json lj;
      lj["schedule"] = row.method;
      lj["seed"] = seed;
      lj["epsilon_spent"] = m.epsilon_spent;
      lj["entries"] = json::array();
      for (const auto& e : m.ledger) {
        lj["entries"].push_back({{"phase", e.phase},
                                 {"mechanism", e.mechanism},
                                 {"population", e.population},
                                 {"q", e.q},
                                 {"sigma", e.sigma},
                                 {"rounds", e.rounds},
                                 {"epsilon0", e.epsilon0},
                                 {"delta", e.delta}});
      }
      ledger_out.push_back(lj);
      notes.push_back(row.method + " seed " + std::to_string(seed) +
                      ": eps_spent=" + format_number(m.epsilon_spent));
    }
  }

  // Summary table mirroring the method x {val PPL, test PPL, latency} layout,
  // medians across seeds, plus relative improvement vs the union baseline.
  double union_val = 0, union_test = 0;
  for (const auto& row : rows) {
    if (row.method == "union") {
      union_val = median(row.val);
      union_test = median(row.test);
    }
  }
  {
    std::ofstream sum(fs::path(out_dir) / "summary.csv");
    sum << "method,val_ppl,test_ppl,cum_latency,rel_val_vs_union,rel_test_vs_union\n";
    for (const auto& row : rows) {
      const double v = median(row.val), t = median(row.test), l = median(row.latency);
      sum << row.method << ',' << format_number(v) << ',' << format_number(t) << ','
          << format_number(l) << ',';
      if (union_val > 0) sum << format_number((union_val - v) / union_val);
      sum << ',';
      if (union_test > 0) sum << format_number((union_test - t) / union_test);
      sum << '\n';
    }
  }

  if (cfg.has_sweep) {
    const auto cells =
        report_latency_sweep(cfg.sweep_n, cfg.sweep_c, cfg.sweep_p, cfg.sweep_q,
                             cfg.sweep_lambda);
    std::ofstream sw(fs::path(out_dir) / "latency_sweep.csv");
    write_latency_sweep_csv(cells, sw);
  }

  {
    json manifest = make_manifest(cfg, notes);
    manifest["privacy_ledger"] = ledger_out;
    std::ofstream mf(fs::path(out_dir) / "manifest.json");
    mf << manifest.dump(2) << '\n';
  }
}

void run_experiment_suite(const std::string& config_path, const std::string& out_dir) {
  run_experiment_suite(load_config(config_path), out_dir);
}

}  // namespace pfl
