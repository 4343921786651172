#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "pfl/federated.hpp"
#include "pfl/rng.hpp"

using namespace pfl;

namespace {

UnigramEstimate ue(std::initializer_list<double> probs) {
  Eigen::VectorXd p(static_cast<Eigen::Index>(probs.size()));
  int i = 0;
  for (double v : probs) p(i++) = v;
  return UnigramEstimate::from_probs("T", p);
}

ModelConfig tiny_cfg() {
  ModelConfig cfg;
  cfg.vocab_size = 11;
  cfg.embed_dim = 5;
  cfg.hidden_dim = 6;
  cfg.seq_len = 6;
  cfg.pad_id = 10;
  cfg.bos_id = 9;
  return cfg;
}

// Three tiny clients with target-domain data only.
std::vector<ClientRecord> tiny_clients() {
  std::vector<ClientRecord> out(3);
  for (int i = 0; i < 3; ++i) {
    out[i].id = i;
    out[i].seq_s.resize(6, 0);
    Eigen::MatrixXi m(6, 2);
    m.col(0) << 9, (1 + i) % 9, (2 + i) % 9, (3 + i) % 9, 4, 10;
    m.col(1) << 9, (5 + i) % 9, (6 + i) % 9, 10, 10, 10;
    out[i].seq_t = m;
  }
  return out;
}

ServerState make_state(uint64_t seed) {
  ServerState st;
  st.params = init_params(tiny_cfg(), seed);
  st.adam_m = Eigen::VectorXd::Zero(st.params.flat.size());
  st.adam_v = Eigen::VectorXd::Zero(st.params.flat.size());
  return st;
}

PopulationConfig ok_latency_cfg() {
  PopulationConfig cfg;
  cfg.N = 100;
  cfg.p = 0.5;
  cfg.q = 0.5;
  cfg.C = 30;
  cfg.lambda = 1.0;
  return cfg;
}

}  // namespace

TEST_CASE("schedule names round-trip") {
  for (ScheduleKind k : {ScheduleKind::TARGET_SMALL, ScheduleKind::TARGET_LARGE,
                         ScheduleKind::UNION, ScheduleKind::IW, ScheduleKind::PT,
                         ScheduleKind::IWPT}) {
    CHECK(parse_schedule(schedule_name(k)) == k);
  }
  CHECK_THROWS_AS(parse_schedule("bogus"), std::invalid_argument);
  Schedule bad;
  bad.kind = ScheduleKind::PT;
  bad.pretrain_rounds = 5;
  bad.finetune_rounds = 5;
  bad.rounds_total = 11;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("instance_weight is 1 when the domains coincide") {
  const UnigramEstimate u = ue({0.4, 0.3, 0.2, 0.1});
  Eigen::VectorXi x(3);
  x << 0, 2, 1;
  CHECK(instance_weight(x, u, u, 0.1, -1) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("instance_weight worked value") {
  // Single-token sequence: p_T = 1e-6, p_pi = 9e-6, alpha = 0.1.
  // ratio = 9 -> w = 1/(0.1 + 0.9*9) = 0.12195...
  const UnigramEstimate ut = ue({1e-6, 1.0 - 1e-6});
  const UnigramEstimate upi = ue({9e-6, 1.0 - 9e-6});
  Eigen::VectorXi x(1);
  x << 0;
  CHECK(instance_weight(x, ut, upi, 0.1, -1) == doctest::Approx(1.0 / 8.2).epsilon(1e-4));
}

TEST_CASE("instance_weight approaches 1/alpha for rare-in-source sequences") {
  const UnigramEstimate ut = ue({0.5, 0.5});
  const UnigramEstimate upi = ue({1e-9, 1.0 - 1e-9});
  Eigen::VectorXi x(1);
  x << 0;
  CHECK(instance_weight(x, ut, upi, 0.1, -1) == doctest::Approx(10.0).epsilon(1e-6));
}

TEST_CASE("instance_weight bounds and pad exclusion") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> unif(0.01, 1.0);
  for (int trial = 0; trial < 200; ++trial) {
    Eigen::VectorXd a(4), b(4);
    for (int i = 0; i < 4; ++i) {
      a(i) = unif(rng);
      b(i) = unif(rng);
    }
    const UnigramEstimate ut = UnigramEstimate::from_probs("T", a);
    const UnigramEstimate upi = UnigramEstimate::from_probs("S", b);
    Eigen::VectorXi x(3);
    x << static_cast<int>(rng() % 4), static_cast<int>(rng() % 4),
        static_cast<int>(rng() % 4);
    const double w = instance_weight(x, ut, upi, 0.1, -1);
    CHECK(w > 0.0);
    CHECK(w <= 10.0 + 1e-12);
  }

  const UnigramEstimate ut = ue({0.2, 0.8});
  const UnigramEstimate upi = ue({0.6, 0.4});
  Eigen::VectorXi plain(1), padded(3);
  plain << 0;
  padded << 0, 1, 1;  // pad_id = 1 below: padded tail ignored
  CHECK(instance_weight(padded, ut, upi, 0.1, 1) ==
        doctest::Approx(instance_weight(plain, ut, upi, 0.1, -1)).epsilon(1e-12));
  CHECK_THROWS_AS(instance_weight(plain, ut, upi, 0.0, -1), std::invalid_argument);
}

TEST_CASE("local_update with zero learning rate is zero") {
  const auto clients = tiny_clients();
  const ModelParams theta = init_params(tiny_cfg(), 1);
  const Eigen::VectorXd d =
      local_update(clients[0].seq_t, Domain::T, theta, 0.0, nullptr, 0.5);
  CHECK(d.norm() == 0.0);
  CHECK_THROWS_AS(local_update(clients[0].seq_s, Domain::S, theta, 0.5, nullptr, 0.5),
                  std::invalid_argument);
}

TEST_CASE("local_update respects the clip bound and the weight function") {
  const auto clients = tiny_clients();
  const ModelParams theta = init_params(tiny_cfg(), 1);
  const double clip = 1e-4;
  const Eigen::VectorXd d =
      local_update(clients[0].seq_t, Domain::T, theta, 0.5, nullptr, clip);
  CHECK(d.norm() <= clip * (1 + 1e-12));
  // Uniform weights rescale nothing: ratio-form loss is scale invariant.
  WeightFn half = [](const Eigen::VectorXi&, Domain) { return 0.5; };
  const Eigen::VectorXd d1 = local_update(clients[0].seq_t, Domain::T, theta, 0.5, nullptr, 10.0);
  const Eigen::VectorXd d2 = local_update(clients[0].seq_t, Domain::T, theta, 0.5, half, 10.0);
  CHECK((d1 - d2).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("server_step matches a scalar adam oracle") {
  ServerState st;
  st.params.cfg = tiny_cfg();
  st.params.flat = Eigen::VectorXd::Zero(1);
  st.adam_m = Eigen::VectorXd::Zero(1);
  st.adam_v = Eigen::VectorXd::Zero(1);
  const double lr = 0.1;
  double theta = 0, m = 0, v = 0;
  std::mt19937_64 rng(17);
  std::normal_distribution<double> g(0.0, 0.3);
  for (int t = 1; t <= 25; ++t) {
    const double delta = g(rng);
    Eigen::VectorXd dv(1);
    dv << delta;
    server_step(st, dv, lr);
    m = kAdamBeta1 * m + (1 - kAdamBeta1) * delta;
    v = kAdamBeta2 * v + (1 - kAdamBeta2) * delta * delta;
    const double mh = m / (1 - std::pow(kAdamBeta1, t));
    const double vh = v / (1 - std::pow(kAdamBeta2, t));
    theta += lr * mh / (std::sqrt(vh) + kAdamTau);
    CHECK(st.params.flat(0) == doctest::Approx(theta).epsilon(1e-12));
    CHECK(st.round == t);
  }
}

TEST_CASE("server_step input validation") {
  ServerState st = make_state(2);
  Eigen::VectorXd wrong(3);
  wrong.setZero();
  CHECK_THROWS_AS(server_step(st, wrong, 0.1), std::invalid_argument);
  Eigen::VectorXd nan_delta = Eigen::VectorXd::Zero(st.params.flat.size());
  nan_delta(0) = std::nan("");
  CHECK_THROWS_AS(server_step(st, nan_delta, 0.1), std::invalid_argument);
}

TEST_CASE("run_round with DP off equals the centralized computation bitwise") {
  const auto clients = tiny_clients();
  ServerState st = make_state(3);
  const ServerState before = st;

  PhaseSpec phase;
  phase.name = "test";
  phase.eligible = {0, 1, 2};
  phase.train_domains = {Domain::T};
  phase.q = 1.0;  // whole population every round
  phase.cohort = 3;
  phase.calibration_cohort = 3;
  phase.sigma = 0.0;
  phase.rounds = 1;
  phase.latency_cfg = ok_latency_cfg();

  TrainContext ctx;
  ctx.clients = &clients;
  ctx.client_lr = 0.5;
  ctx.server_lr = 0.1;
  ctx.clip = 0.5;
  ctx.seed = 9;
  ctx.n_threads = 1;

  const RoundResult rr = run_round(st, phase, ctx, 0);
  CHECK(rr.clients_sampled == 3);
  CHECK(rr.sigma == 0.0);
  CHECK(rr.round == 1);

  // Centralized replica: clip each client's -lr*grad, average, FedAdam step.
  ServerState ref = before;
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(ref.params.flat.size());
  for (const auto& c : clients) {
    const LossAndGrad lg =
        grad(ref.params, c.seq_t, Eigen::VectorXd::Ones(c.seq_t.cols()));
    sum += clip_to_norm((-ctx.client_lr * lg.grad.flat).eval(), ctx.clip);
  }
  const Eigen::VectorXd mean = sum / 3.0;
  server_step(ref, mean, ctx.server_lr);
  CHECK(st.params.flat == ref.params.flat);
  CHECK(rr.noisy_update_norm == doctest::Approx(mean.norm()).epsilon(1e-15));
}

TEST_CASE("run_round threading does not change the result") {
  const auto clients = tiny_clients();
  PhaseSpec phase;
  phase.name = "t";
  phase.eligible = {0, 1, 2};
  phase.train_domains = {Domain::T};
  phase.q = 1.0;
  phase.cohort = 3;
  phase.calibration_cohort = 3;
  phase.sigma = 0.7;
  phase.latency_cfg = ok_latency_cfg();

  TrainContext ctx;
  ctx.clients = &clients;
  ctx.seed = 4;
  ctx.n_threads = 1;
  ServerState a = make_state(5);
  run_round(a, phase, ctx, 0);
  ctx.n_threads = 3;
  ServerState b = make_state(5);
  run_round(b, phase, ctx, 0);
  CHECK(a.params.flat == b.params.flat);
}

TEST_CASE("ledger_total_epsilon composes correctly") {
  const double delta = 1e-6;
  // One sampled-Gaussian line on T must equal the direct conversion.
  LedgerEntry g{"ph", "sampled_gaussian", "T", 0.05, 1.2, 400, 0, delta};
  const double direct =
      epsilon_from_rdp(rdp_sampled_gaussian(0.05, 1.2, default_order_grid()), 400, delta);
  CHECK(ledger_total_epsilon({g}, delta) == doctest::Approx(direct).epsilon(1e-10));

  // Disjoint S and T compose in parallel: total is the max.
  LedgerEntry g_s = g;
  g_s.population = "S";
  g_s.sigma = 2.0;  // cheaper line
  CHECK(ledger_total_epsilon({g, g_s}, delta) == doctest::Approx(direct).epsilon(1e-10));

  // A pure-epsilon release on S+T charges both lines.
  LedgerEntry geo{"unigrams", "geometric", "S+T", 0, 0, 1, 0.8, 0};
  CHECK(ledger_total_epsilon({g, geo}, delta) ==
        doctest::Approx(direct + 0.8).epsilon(1e-10));
  CHECK(ledger_total_epsilon({geo}, delta) == doctest::Approx(0.8).epsilon(1e-12));

  LedgerEntry bad = g;
  bad.mechanism = "laplace";
  CHECK_THROWS_AS(ledger_total_epsilon({bad}, delta), std::invalid_argument);
}

namespace {

struct SmokePopulation {
  std::vector<ClientRecord> clients;
  PopulationSplit split;
  Vocab vocab;
};

SmokePopulation smoke_population() {
  SynthConfig cfg;
  cfg.n_clients_t = 30;
  cfg.population_ratio = 4;
  cfg.overlap = 0.05;
  cfg.n_words = 120;
  cfg.seed = 21;
  const auto raw = generate_synthetic_population(cfg);
  SmokePopulation sp;
  // Vocab from all T text (split-independent here; fine for a smoke test).
  std::vector<int> all_ids;
  for (const auto& c : raw) all_ids.push_back(c.id);
  sp.vocab = build_vocab(raw, all_ids, 80);
  sp.clients = preprocess_population(raw, sp.vocab);
  sp.split = split_clients(sp.clients, 13);
  return sp;
}

TrainHyper smoke_hyper() {
  TrainHyper h;
  h.model.vocab_size = 80;
  h.model.embed_dim = 8;
  h.model.hidden_dim = 12;
  h.model.seq_len = kSeqLen;
  h.privacy.epsilon = 2.0;
  h.privacy.delta = 1e-6;
  h.privacy.epsilon0 = 0.8;
  h.eval_every = 0;
  h.max_eval_sequences = 200;
  h.n_threads = 2;
  return h;
}

}  // namespace

TEST_CASE("run_schedule smoke: all kinds respect the budget and are deterministic") {
  const SmokePopulation sp = smoke_population();
  const TrainHyper h = smoke_hyper();

  for (ScheduleKind kind : {ScheduleKind::TARGET_SMALL, ScheduleKind::UNION,
                            ScheduleKind::IW, ScheduleKind::IWPT}) {
    CAPTURE(schedule_name(kind));
    Schedule s;
    s.kind = kind;
    s.rounds_total = 6;
    s.pretrain_rounds = 3;
    s.finetune_rounds = 3;
    s.cohort = 20;
    s.calibration_cohort = 40;
    const ScheduleMetrics m = run_schedule(s, sp.clients, sp.split, sp.vocab, h, 31);
    CHECK(m.rounds.size() == 6);
    CHECK(m.final_val_ppl > 1.0);
    CHECK(m.final_test_ppl > 1.0);
    CHECK(m.cumulative_latency > 0.0);
    for (double sig : m.sigmas) CHECK(sig > 0.0);
    CHECK(m.epsilon_spent <= h.privacy.epsilon + 1e-9);
    CHECK(m.epsilon_spent == doctest::Approx(ledger_total_epsilon(m.ledger, h.privacy.delta))
                                 .epsilon(1e-12));
    // The unigram release appears in the ledger iff the schedule is weighted.
    const bool weighted = kind == ScheduleKind::IW || kind == ScheduleKind::IWPT;
    bool has_geo = false;
    for (const auto& e : m.ledger) has_geo |= e.mechanism == "geometric";
    CHECK(has_geo == weighted);

    const ScheduleMetrics m2 = run_schedule(s, sp.clients, sp.split, sp.vocab, h, 31);
    CHECK(m2.final_val_ppl == m.final_val_ppl);
    CHECK(m2.final_test_ppl == m.final_test_ppl);
    REQUIRE(m2.rounds.size() == m.rounds.size());
    for (size_t i = 0; i < m.rounds.size(); ++i) {
      CHECK(m2.rounds[i].noisy_update_norm == m.rounds[i].noisy_update_norm);
    }
  }
}

TEST_CASE("run_schedule two-phase schedules switch populations") {
  const SmokePopulation sp = smoke_population();
  const TrainHyper h = smoke_hyper();
  Schedule s;
  s.kind = ScheduleKind::PT;
  s.rounds_total = 4;
  s.pretrain_rounds = 2;
  s.finetune_rounds = 2;
  s.cohort = 20;
  s.calibration_cohort = 40;
  const ScheduleMetrics m = run_schedule(s, sp.clients, sp.split, sp.vocab, h, 8);
  REQUIRE(m.rounds.size() == 4);
  CHECK(m.rounds[0].phase == "pretrain");
  CHECK(m.rounds[3].phase == "finetune");
  CHECK(m.sigmas.size() == 2);
  // Disjoint phases each get the full budget; the ledger max stays <= epsilon.
  CHECK(m.epsilon_spent <= h.privacy.epsilon + 1e-9);
  REQUIRE(m.ledger.size() == 2);
  CHECK(m.ledger[0].population == "S");
  CHECK(m.ledger[1].population == "T");
}
