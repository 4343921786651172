#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>
#include <cstdio>
#include <random>

#include "pfl/langmodel.hpp"

using namespace pfl;

namespace {

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

Eigen::MatrixXi tiny_batch() {
  Eigen::MatrixXi batch(6, 2);
  batch.col(0) << 9, 1, 2, 3, 4, 10;   // BOS a b c d PAD
  batch.col(1) << 9, 5, 6, 10, 10, 10; // BOS e f PAD PAD PAD
  return batch;
}

}  // namespace

TEST_CASE("param_count closed form") {
  // Worked example: V=200, E=16, H=32.
  ModelConfig cfg;
  cfg.vocab_size = 200;
  cfg.embed_dim = 16;
  cfg.hidden_dim = 32;
  const int64_t v = 200, e = 16, h = 32;
  CHECK(param_count(cfg) == v * e + 4 * (h * (e + h) + h) + h * v + v);
  CHECK(param_count(cfg) == 16072);
  // Default config.
  ModelConfig def;
  CHECK(param_count(def) == 2000 * 64 + 4 * (128 * (64 + 128) + 128) + 128 * 2000 + 2000);
}

TEST_CASE("init_params determinism, bounds and forget bias") {
  const ModelConfig cfg = tiny_cfg();
  const ModelParams a = init_params(cfg, 11);
  const ModelParams b = init_params(cfg, 11);
  CHECK(a.flat == b.flat);
  const ModelParams c = init_params(cfg, 12);
  CHECK(a.flat != c.flat);
  CHECK(a.flat.size() == param_count(cfg));

  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  CHECK(a.embedding().cwiseAbs().maxCoeff() <= s);
  CHECK(a.w_out().cwiseAbs().maxCoeff() <= s);
  // Forget-gate bias block (rows H..2H-1) is exactly 1.
  const int h = cfg.hidden_dim;
  for (int i = 0; i < h; ++i) CHECK(a.b()(h + i) == 1.0);
  for (int i = 0; i < h; ++i) CHECK(std::abs(a.b()(i)) <= s);
}

TEST_CASE("param views tile the flat vector exactly") {
  const ModelConfig cfg = tiny_cfg();
  ModelParams p = init_params(cfg, 3);
  p.flat.setZero();
  p.embedding().setOnes();
  p.w_ih().setConstant(2);
  p.w_hh().setConstant(3);
  p.b().setConstant(4);
  p.w_out().setConstant(5);
  p.b_out().setConstant(6);
  const int v = cfg.vocab_size, e = cfg.embed_dim, h = cfg.hidden_dim;
  const double want = 1.0 * e * v + 2.0 * 4 * h * e + 3.0 * 4 * h * h + 4.0 * 4 * h +
                      5.0 * v * h + 6.0 * v;
  CHECK(p.flat.sum() == doctest::Approx(want).epsilon(1e-12));  // no gaps, no overlap
  CHECK(p.flat.minCoeff() >= 1.0);
}

TEST_CASE("zero params give uniform predictions: loss = ln V") {
  const ModelConfig cfg = tiny_cfg();
  ModelParams p = init_params(cfg, 1);
  p.flat.setZero();
  const Eigen::MatrixXi batch = tiny_batch();
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(2);
  CHECK(forward_nll(p, batch, w) ==
        doctest::Approx(std::log(static_cast<double>(cfg.vocab_size))).epsilon(1e-10));
}

TEST_CASE("loss is invariant to uniform weight scaling") {
  const ModelConfig cfg = tiny_cfg();
  const ModelParams p = init_params(cfg, 2);
  const Eigen::MatrixXi batch = tiny_batch();
  const double l1 = forward_nll(p, batch, Eigen::VectorXd::Ones(2));
  const double l2 = forward_nll(p, batch, Eigen::VectorXd::Constant(2, 0.37));
  CHECK(l1 == doctest::Approx(l2).epsilon(1e-12));
}

TEST_CASE("weight-zero sequences are equivalent to dropping them") {
  const ModelConfig cfg = tiny_cfg();
  const ModelParams p = init_params(cfg, 2);
  const Eigen::MatrixXi batch = tiny_batch();
  Eigen::VectorXd w(2);
  w << 1.0, 0.0;
  const Eigen::MatrixXi only_first = batch.col(0);
  CHECK(forward_nll(p, batch, w) ==
        doctest::Approx(forward_nll(p, only_first, Eigen::VectorXd::Ones(1))).epsilon(1e-12));
  const LossAndGrad ga = grad(p, batch, w);
  const LossAndGrad gb = grad(p, only_first, Eigen::VectorXd::Ones(1));
  CHECK((ga.grad.flat - gb.grad.flat).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("pad-only sequences contribute nothing") {
  const ModelConfig cfg = tiny_cfg();
  const ModelParams p = init_params(cfg, 8);
  Eigen::MatrixXi batch(6, 2);
  batch.col(0) = tiny_batch().col(0);
  batch.col(1).setConstant(cfg.pad_id);
  const Eigen::MatrixXi first = batch.col(0);
  CHECK(forward_nll(p, batch, Eigen::VectorXd::Ones(2)) ==
        doctest::Approx(forward_nll(p, first, Eigen::VectorXd::Ones(1))).epsilon(1e-12));
}

TEST_CASE("gradient matches central finite differences") {
  const ModelConfig cfg = tiny_cfg();
  ModelParams p = init_params(cfg, 4);
  const Eigen::MatrixXi batch = tiny_batch();
  Eigen::VectorXd w(2);
  w << 1.0, 0.4;
  const LossAndGrad lg = grad(p, batch, w);
  CHECK(lg.loss == doctest::Approx(forward_nll(p, batch, w)).epsilon(1e-12));

  std::mt19937_64 rng(99);
  std::uniform_int_distribution<int> pick(0, static_cast<int>(p.flat.size()) - 1);
  const double h = 1e-4;
  for (int trial = 0; trial < 50; ++trial) {
    const int i = pick(rng);
    const double orig = p.flat(i);
    p.flat(i) = orig + h;
    const double up = forward_nll(p, batch, w);
    p.flat(i) = orig - h;
    const double down = forward_nll(p, batch, w);
    p.flat(i) = orig;
    const double fd = (up - down) / (2 * h);
    const double an = lg.grad.flat(i);
    const double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
    CHECK(std::abs(fd - an) / denom <= 1e-4);
  }
}

TEST_CASE("perplexity identities") {
  const ModelConfig cfg = tiny_cfg();
  ModelParams p = init_params(cfg, 5);
  const Eigen::MatrixXi batch = tiny_batch();
  CHECK(perplexity(p, batch) ==
        doctest::Approx(std::exp(forward_nll(p, batch, Eigen::VectorXd::Ones(2))))
            .epsilon(1e-10));
  p.flat.setZero();
  CHECK(perplexity(p, batch) ==
        doctest::Approx(static_cast<double>(cfg.vocab_size)).epsilon(1e-9));
}

TEST_CASE("sgd steps decrease the loss") {
  const ModelConfig cfg = tiny_cfg();
  ModelParams p = init_params(cfg, 6);
  const Eigen::MatrixXi batch = tiny_batch();
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(2);
  const double initial = forward_nll(p, batch, w);
  double loss = initial;
  for (int step = 0; step < 100; ++step) {
    const LossAndGrad lg = grad(p, batch, w);
    loss = lg.loss;
    p.flat -= 0.5 * lg.grad.flat;
  }
  CHECK(loss < initial);
  CHECK(loss < 0.8 * initial);
}

TEST_CASE("model can overfit a tiny corpus") {
  const ModelConfig cfg = tiny_cfg();
  ModelParams p = init_params(cfg, 7);
  const Eigen::MatrixXi batch = tiny_batch();
  const Eigen::VectorXd w = Eigen::VectorXd::Ones(2);
  for (int step = 0; step < 500; ++step) {
    const LossAndGrad lg = grad(p, batch, w);
    p.flat -= 0.5 * lg.grad.flat;
  }
  CHECK(perplexity(p, batch) < 1.5);
}

TEST_CASE("checkpoint round-trip is bitwise") {
  const ModelConfig cfg = tiny_cfg();
  const ModelParams p = init_params(cfg, 13);
  const std::string path = "test_ckpt.bin";
  save_checkpoint(p, path);
  const ModelParams q = load_checkpoint(path);
  std::remove(path.c_str());
  CHECK(q.cfg.vocab_size == cfg.vocab_size);
  CHECK(q.cfg.embed_dim == cfg.embed_dim);
  CHECK(q.cfg.hidden_dim == cfg.hidden_dim);
  CHECK(q.cfg.seq_len == cfg.seq_len);
  CHECK(q.cfg.pad_id == cfg.pad_id);
  CHECK(q.cfg.bos_id == cfg.bos_id);
  CHECK(q.flat == p.flat);
  CHECK_THROWS(load_checkpoint("no_such_checkpoint.bin"));
}

TEST_CASE("config validation") {
  ModelConfig bad = tiny_cfg();
  bad.vocab_size = 0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  bad = tiny_cfg();
  bad.pad_id = bad.vocab_size;  // out of range
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
