#include "pfl/federated.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <thread>

#include "pfl/rng.hpp"

namespace pfl {

std::string schedule_name(ScheduleKind k) {
  switch (k) {
    case ScheduleKind::TARGET_SMALL: return "target-small";
    case ScheduleKind::TARGET_LARGE: return "target-large";
    case ScheduleKind::UNION: return "union";
    case ScheduleKind::IW: return "iw";
    case ScheduleKind::PT: return "pt";
    case ScheduleKind::IWPT: return "iwpt";
  }
  throw std::logic_error("unreachable");
}

ScheduleKind parse_schedule(const std::string& name) {
  if (name == "target-small") return ScheduleKind::TARGET_SMALL;
  if (name == "target-large") return ScheduleKind::TARGET_LARGE;
  if (name == "union") return ScheduleKind::UNION;
  if (name == "iw") return ScheduleKind::IW;
  if (name == "pt") return ScheduleKind::PT;
  if (name == "iwpt") return ScheduleKind::IWPT;
  throw std::invalid_argument("unknown schedule: " + name);
}

void Schedule::validate() const {
  if (rounds_total < 1) throw std::invalid_argument("schedule: rounds_total >= 1");
  if (!(alpha > 0 && alpha <= 1)) throw std::invalid_argument("schedule: alpha in (0,1]");
  if (cohort < 1) throw std::invalid_argument("schedule: cohort >= 1");
  if (calibration_cohort < 1) throw std::invalid_argument("schedule: calibration_cohort >= 1");
  if (kind == ScheduleKind::PT || kind == ScheduleKind::IWPT) {
    if (pretrain_rounds + finetune_rounds != rounds_total) {
      throw std::invalid_argument("schedule: phase_split must sum to rounds_total");
    }
    if (pretrain_rounds < 1 || finetune_rounds < 1) {
      throw std::invalid_argument("schedule: both phases need at least one round");
    }
  }
}

double instance_weight(const Eigen::VectorXi& x, const UnigramEstimate& u_t,
                       const UnigramEstimate& u_pi, double alpha, int pad_id) {
  if (!(alpha > 0 && alpha < 1)) throw std::invalid_argument("instance_weight: alpha in (0,1)");
  double log_pt = 0, log_ppi = 0;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const int id = x(i);
    if (id == pad_id) continue;
    log_pt += u_t.log_prob(id);
    log_ppi += u_pi.log_prob(id);
  }
  // w = 1 / (alpha + (1-alpha) * p_pi/p_t), computed from the log ratio.
  const double ratio = std::exp(log_ppi - log_pt);
  return 1.0 / (alpha + (1.0 - alpha) * ratio);
}

double ledger_total_epsilon(const std::vector<LedgerEntry>& ledger, double delta) {
  const auto grid = default_order_grid();
  auto line_epsilon = [&](const std::string& pop) {
    double pure = 0;
    std::vector<double> rdp(grid.size(), 0.0);
    bool any_gaussian = false;
    for (const auto& e : ledger) {
      if (e.population != pop && e.population != "S+T") continue;
      if (e.mechanism == "geometric") {
        pure += e.epsilon0;
      } else if (e.mechanism == "sampled_gaussian") {
        any_gaussian = true;
        const RdpCurve c = rdp_sampled_gaussian(e.q, e.sigma, grid);
        for (size_t i = 0; i < grid.size(); ++i) rdp[i] += e.rounds * c.values[i];
      } else {
        throw std::invalid_argument("ledger: unknown mechanism " + e.mechanism);
      }
    }
    double eps = pure;
    if (any_gaussian) {
      RdpCurve total{grid, rdp};
      eps += epsilon_from_rdp(total, 1, delta);
    }
    return eps;
  };
  // Parallel composition across the disjoint S and T populations; "S+T"
  // entries charge both lines.
  return std::max(line_epsilon("S"), line_epsilon("T"));
}

namespace {

struct LocalResult {
  Eigen::VectorXd raw_delta;
  double norm = 0;
};

LocalResult local_delta_raw(const Eigen::MatrixXi& batch, const Eigen::VectorXd& weights,
                            const ModelParams& theta, double client_lr) {
  const LossAndGrad lg = grad(theta, batch, weights);
  LocalResult r;
  r.raw_delta = -client_lr * lg.grad.flat;
  r.norm = r.raw_delta.norm();
  return r;
}

// Gathers a client's training batch for the phase's domains, with weights.
struct ClientBatch {
  Eigen::MatrixXi batch;
  Eigen::VectorXd weights;
};

ClientBatch make_client_batch(const ClientRecord& client,
                              const std::vector<Domain>& domains, int seq_len,
                              const WeightFn& weight_fn) {
  int n = 0;
  for (Domain d : domains) n += static_cast<int>(client.sequences(d).cols());
  ClientBatch cb;
  cb.batch.resize(seq_len, n);
  cb.weights.resize(n);
  int col = 0;
  for (Domain d : domains) {
    const Eigen::MatrixXi& m = client.sequences(d);
    for (int s = 0; s < m.cols(); ++s, ++col) {
      cb.batch.col(col) = m.col(s);
      cb.weights(col) = weight_fn ? weight_fn(m.col(s), d) : 1.0;
    }
  }
  return cb;
}

const ClientRecord& find_client(const std::vector<ClientRecord>& clients, int id) {
  auto it = std::lower_bound(clients.begin(), clients.end(), id,
                             [](const ClientRecord& c, int v) { return c.id < v; });
  if (it == clients.end() || it->id != id) {
    throw std::invalid_argument("unknown client id " + std::to_string(id));
  }
  return *it;
}

}  // namespace

Eigen::VectorXd local_update(const Eigen::MatrixXi& sequences, Domain domain,
                             const ModelParams& theta, double client_lr,
                             const WeightFn& weight_fn, double clip) {
  if (sequences.cols() == 0) throw std::invalid_argument("local_update: empty client");
  Eigen::VectorXd weights(sequences.cols());
  for (int s = 0; s < sequences.cols(); ++s) {
    weights(s) = weight_fn ? weight_fn(sequences.col(s), domain) : 1.0;
  }
  const LossAndGrad lg = grad(theta, sequences, weights);
  return clip_to_norm(-client_lr * lg.grad.flat, clip);
}

void server_step(ServerState& state, const Eigen::VectorXd& noisy_delta,
                 double server_lr) {
  if (!noisy_delta.allFinite()) throw std::invalid_argument("server_step: non-finite delta");
  if (noisy_delta.size() != state.params.flat.size()) {
    throw std::invalid_argument("server_step: dimension mismatch");
  }
  state.round += 1;
  const int t = state.round;
  state.adam_m = kAdamBeta1 * state.adam_m + (1.0 - kAdamBeta1) * noisy_delta;
  state.adam_v =
      kAdamBeta2 * state.adam_v.array() + (1.0 - kAdamBeta2) * noisy_delta.array().square();
  const double bc1 = 1.0 - std::pow(kAdamBeta1, t);
  const double bc2 = 1.0 - std::pow(kAdamBeta2, t);
  const Eigen::ArrayXd m_hat = state.adam_m.array() / bc1;
  const Eigen::ArrayXd v_hat = state.adam_v.array() / bc2;
  state.params.flat.array() += server_lr * m_hat / (v_hat.sqrt() + kAdamTau);
}

RoundResult run_round(ServerState& state, const PhaseSpec& phase,
                      const TrainContext& ctx, int global_round) {
  RoundResult rr;
  rr.phase = phase.name;
  rr.sigma = phase.sigma;
  state.schedule_phase = phase.name;

  const std::vector<int> cohort =
      sample_cohort(phase.eligible, phase.q, derive_seed(ctx.seed, "sampling"),
                    static_cast<uint64_t>(global_round));
  rr.clients_sampled = static_cast<int>(cohort.size());

  const int n = static_cast<int>(cohort.size());
  std::vector<LocalResult> results(n);
  auto worker = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      const ClientRecord& client = find_client(*ctx.clients, cohort[i]);
      ClientBatch cb = make_client_batch(client, phase.train_domains,
                                         state.params.cfg.seq_len, phase.weight_fn);
      if (cb.batch.cols() == 0) throw std::invalid_argument("run_round: empty client sampled");
      results[i] = local_delta_raw(cb.batch, cb.weights, state.params, ctx.client_lr);
    }
  };
  const int n_threads = std::max(1, std::min(ctx.n_threads, n));
  if (n_threads == 1) {
    worker(0, n);
  } else {
    std::vector<std::thread> threads;
    const int chunk = (n + n_threads - 1) / n_threads;
    for (int t = 0; t < n_threads; ++t) {
      const int b = t * chunk, e = std::min(n, b + chunk);
      if (b < e) threads.emplace_back(worker, b, e);
    }
    for (auto& th : threads) th.join();
  }

  Eigen::VectorXd noisy;
  const uint64_t noise_seed = derive_seed(ctx.seed, "agg_noise", global_round);
  if (n > 0) {
    std::vector<Eigen::VectorXd> deltas;
    deltas.reserve(n);
    double clip_frac = 0;
    for (auto& r : results) {
      clip_frac += (r.norm <= ctx.clip) ? 1.0 : ctx.clip / r.norm;
      deltas.push_back(std::move(r.raw_delta));
    }
    rr.mean_clip_fraction = clip_frac / n;
    noisy = gaussian_aggregate(deltas, ctx.clip, phase.sigma, n, noise_seed,
                               phase.calibration_cohort);
  } else {
    // Empty cohort: pure noise round.
    noisy = Eigen::VectorXd::Zero(state.params.flat.size());
    if (phase.sigma > 0) {
      auto rng = make_rng(noise_seed, "gaussian_aggregate");
      std::normal_distribution<double> gauss(0.0,
                                             phase.sigma * ctx.clip / phase.calibration_cohort);
      for (Eigen::Index i = 0; i < noisy.size(); ++i) noisy(i) += gauss(rng);
    }
  }
  rr.noisy_update_norm = noisy.norm();

  server_step(state, noisy, ctx.server_lr);
  rr.round = state.round;
  rr.wallclock_model_latency = latency_estimate(phase.latency_cfg).exact;
  return rr;
}

namespace {

std::vector<int> ids_with_data(const std::vector<ClientRecord>& clients,
                               const std::vector<int>& pool,
                               const std::vector<Domain>& domains, bool exclude_t) {
  std::vector<int> out;
  for (int id : pool) {
    const ClientRecord& c = find_client(clients, id);
    if (exclude_t && c.has_domain(Domain::T)) continue;
    for (Domain d : domains) {
      if (c.has_domain(d)) {
        out.push_back(id);
        break;
      }
    }
  }
  return out;
}

Eigen::MatrixXi gather_eval_sequences(const std::vector<ClientRecord>& clients,
                                      const std::vector<int>& ids, int seq_len,
                                      int max_sequences) {
  std::vector<Eigen::VectorXi> cols;
  for (int id : ids) {
    const Eigen::MatrixXi& m = find_client(clients, id).seq_t;
    for (int s = 0; s < m.cols(); ++s) {
      if (static_cast<int>(cols.size()) >= max_sequences) break;
      cols.push_back(m.col(s));
    }
    if (static_cast<int>(cols.size()) >= max_sequences) break;
  }
  Eigen::MatrixXi out(seq_len, static_cast<int>(cols.size()));
  for (size_t i = 0; i < cols.size(); ++i) out.col(static_cast<int>(i)) = cols[i];
  return out;
}

std::vector<UnigramContribution> unigram_contributions(
    const std::vector<ClientRecord>& clients, const std::vector<int>& ids, Domain d) {
  std::vector<UnigramContribution> out;
  for (int id : ids) {
    const ClientRecord& c = find_client(clients, id);
    if (c.has_domain(d)) out.push_back({c.sequences(d)});
  }
  return out;
}

PopulationConfig phase_latency_cfg(int n_eligible, double p, double q, int cohort,
                                   double lambda) {
  PopulationConfig cfg;
  cfg.N = n_eligible;
  cfg.p = p;
  cfg.q = q;
  cfg.C = cohort;
  cfg.lambda = lambda;
  return cfg;
}

}  // namespace

ScheduleMetrics run_schedule(const Schedule& schedule,
                             const std::vector<ClientRecord>& clients,
                             const PopulationSplit& split, const Vocab& vocab,
                             const TrainHyper& hyper, uint64_t seed) {
  schedule.validate();
  hyper.privacy.validate();
  const double eps = hyper.privacy.epsilon;
  const double eps0 = hyper.privacy.epsilon0;
  const double delta = hyper.privacy.delta;
  const double tol = 0.01;
  const bool weighted = schedule.kind == ScheduleKind::IW || schedule.kind == ScheduleKind::IWPT;
  const bool two_phase = schedule.kind == ScheduleKind::PT || schedule.kind == ScheduleKind::IWPT;

  // Populations. For the two-phase schedules, overlap clients go to the T
  // population so S and T stay disjoint and parallel composition applies.
  const std::vector<int> t_pop = ids_with_data(clients, split.train, {Domain::T}, false);
  const std::vector<int> s_disjoint = ids_with_data(clients, split.train, {Domain::S}, true);
  const std::vector<int> union_pop =
      ids_with_data(clients, split.train, {Domain::S, Domain::T}, false);
  if (t_pop.empty()) throw std::invalid_argument("run_schedule: no target-domain clients");
  if (two_phase && s_disjoint.empty()) {
    throw std::invalid_argument("run_schedule: no disjoint source-domain clients for PT/IWPT");
  }

  ScheduleMetrics metrics;

  // Unigram release for weighted schedules.
  UnigramEstimate u_t, u_s;
  if (weighted) {
    if (!(eps0 > 0 && eps0 < eps)) {
      throw std::invalid_argument("run_schedule: weighted schedules need 0 < epsilon0 < epsilon");
    }
    const auto t_contrib =
        unigram_contributions(clients, ids_with_data(clients, split.train, {Domain::T}, false),
                              Domain::T);
    const auto s_contrib =
        unigram_contributions(clients, ids_with_data(clients, split.train, {Domain::S}, false),
                              Domain::S);
    u_t = private_unigrams(t_contrib, "T", eps0, 5, hyper.model.seq_len, vocab.size(),
                           vocab.pad_id, derive_seed(seed, "unigrams_T"));
    u_s = private_unigrams(s_contrib, "S", eps0, 5, hyper.model.seq_len, vocab.size(),
                           vocab.pad_id, derive_seed(seed, "unigrams_S"));
    // Accounted as a single full-population pure-epsilon release across the
    // domain-partitioned sequence sets.
    metrics.ledger.push_back({"unigrams", "geometric", "S+T", 0, 0, 1, eps0, 0});
  }

  WeightFn weight_fn;
  if (weighted) {
    const double alpha = schedule.alpha;
    const int pad_id = vocab.pad_id;
    weight_fn = [&u_t, &u_s, alpha, pad_id](const Eigen::VectorXi& x, Domain d) {
      const UnigramEstimate& u_pi = (d == Domain::T) ? u_t : u_s;
      return instance_weight(x, u_t, u_pi, alpha, pad_id);
    };
  }

  // Assemble phases.
  std::vector<PhaseSpec> phases;
  const double model_eps = weighted ? eps - eps0 : eps;
  auto add_phase = [&](std::string name, std::vector<int> eligible,
                       std::vector<Domain> domains, int cohort, int calib_cohort,
                       int rounds, double phase_eps, std::string population,
                       WeightFn wf) {
    PhaseSpec ph;
    ph.name = std::move(name);
    ph.eligible = std::move(eligible);
    ph.train_domains = std::move(domains);
    ph.cohort = cohort;
    ph.calibration_cohort = calib_cohort;
    ph.rounds = rounds;
    ph.q = std::min(1.0, static_cast<double>(cohort) / ph.eligible.size());
    ph.sigma = calibrate_sigma(ph.q, rounds, phase_eps, delta, tol);
    ph.weight_fn = std::move(wf);
    ph.latency_cfg = phase_latency_cfg(static_cast<int>(ph.eligible.size()),
                                       hyper.eligible_frac, ph.q, cohort, hyper.lambda);
    metrics.ledger.push_back(
        {ph.name, "sampled_gaussian", std::move(population), ph.q, ph.sigma, rounds, 0, delta});
    metrics.sigmas.push_back(ph.sigma);
    phases.push_back(std::move(ph));
  };

  const int small_cohort = std::max(1, static_cast<int>(std::llround(schedule.alpha * schedule.cohort)));
  const int small_calib =
      std::max(1, static_cast<int>(std::llround(schedule.alpha * schedule.calibration_cohort)));

  switch (schedule.kind) {
    case ScheduleKind::TARGET_SMALL:
      add_phase("target-small", t_pop, {Domain::T}, small_cohort, small_calib,
                schedule.rounds_total, eps, "T", nullptr);
      break;
    case ScheduleKind::TARGET_LARGE:
      add_phase("target-large", t_pop, {Domain::T}, schedule.cohort,
                schedule.calibration_cohort, schedule.rounds_total, eps, "T", nullptr);
      break;
    case ScheduleKind::UNION:
      add_phase("union", union_pop, {Domain::S, Domain::T}, schedule.cohort,
                schedule.calibration_cohort, schedule.rounds_total, eps, "S+T", nullptr);
      break;
    case ScheduleKind::IW:
      add_phase("iw-train", union_pop, {Domain::S, Domain::T}, schedule.cohort,
                schedule.calibration_cohort, schedule.rounds_total, model_eps, "S+T",
                weight_fn);
      break;
    case ScheduleKind::PT:
      add_phase("pretrain", s_disjoint, {Domain::S}, schedule.cohort,
                schedule.calibration_cohort, schedule.pretrain_rounds, eps, "S", nullptr);
      add_phase("finetune", t_pop, {Domain::T}, small_cohort, small_calib,
                schedule.finetune_rounds, eps, "T", nullptr);
      break;
    case ScheduleKind::IWPT:
      // The unigram release already spent epsilon0 on both populations, so
      // each training phase gets epsilon - epsilon0.
      add_phase("iw-pretrain", s_disjoint, {Domain::S}, schedule.cohort,
                schedule.calibration_cohort, schedule.pretrain_rounds, model_eps, "S",
                weight_fn);
      add_phase("finetune", t_pop, {Domain::T}, small_cohort, small_calib,
                schedule.finetune_rounds, model_eps, "T", nullptr);
      break;
  }

  // Evaluation data (target domain).
  const std::vector<int> val_ids = ids_with_data(clients, split.validation, {Domain::T}, false);
  const std::vector<int> test_ids = ids_with_data(clients, split.test, {Domain::T}, false);
  const Eigen::MatrixXi val_data = gather_eval_sequences(clients, val_ids, hyper.model.seq_len,
                                                         hyper.max_eval_sequences);
  const Eigen::MatrixXi test_data = gather_eval_sequences(clients, test_ids, hyper.model.seq_len,
                                                          hyper.max_eval_sequences);

  ModelConfig model_cfg = hyper.model;
  model_cfg.vocab_size = vocab.size();
  model_cfg.pad_id = vocab.pad_id;
  model_cfg.bos_id = vocab.bos_id;

  ServerState state;
  state.params = init_params(model_cfg, derive_seed(seed, "init"));
  state.adam_m = Eigen::VectorXd::Zero(state.params.flat.size());
  state.adam_v = Eigen::VectorXd::Zero(state.params.flat.size());

  TrainContext ctx;
  ctx.clients = &clients;
  ctx.client_lr = hyper.client_lr;
  ctx.server_lr = hyper.server_lr;
  ctx.clip = hyper.privacy.clip;
  ctx.seed = seed;
  ctx.n_threads = hyper.n_threads;

  int global_round = 0;
  for (const PhaseSpec& phase : phases) {
    for (int r = 0; r < phase.rounds; ++r) {
      RoundResult rr = run_round(state, phase, ctx, global_round);
      ++global_round;
      metrics.cumulative_latency += rr.wallclock_model_latency;
      if (hyper.eval_every > 0 && val_data.cols() > 0 &&
          (global_round % hyper.eval_every == 0 || global_round == schedule.rounds_total)) {
        rr.val_ppl = perplexity(state.params, val_data);
      }
      metrics.rounds.push_back(std::move(rr));
    }
  }

  metrics.final_val_ppl = val_data.cols() > 0 ? perplexity(state.params, val_data) : 0;
  metrics.final_test_ppl = test_data.cols() > 0 ? perplexity(state.params, test_data) : 0;
  metrics.epsilon_spent = ledger_total_epsilon(metrics.ledger, delta);
  return metrics;
}

}  // namespace pfl
