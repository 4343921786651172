#include "pfl/langmodel.hpp"

#include <cstdio>
#include <cstring>
#include <stdexcept>
#include <vector>

#include "pfl/rng.hpp"

namespace pfl {

void ModelConfig::validate() const {
  if (vocab_size < 1 || embed_dim < 1 || hidden_dim < 1 || seq_len < 2) {
    throw std::invalid_argument("model: dims must be positive, seq_len >= 2");
  }
  if (pad_id >= vocab_size || bos_id >= vocab_size) {
    throw std::invalid_argument("model: pad_id/bos_id out of vocab range");
  }
}

int64_t param_count(const ModelConfig& cfg) {
  const int64_t V = cfg.vocab_size, E = cfg.embed_dim, H = cfg.hidden_dim;
  return V * E + 4 * (H * (E + H) + H) + H * V + V;
}

namespace {

struct Offsets {
  int64_t emb, w_ih, w_hh, b, w_out, b_out, total;
  explicit Offsets(const ModelConfig& c) {
    const int64_t V = c.vocab_size, E = c.embed_dim, H = c.hidden_dim;
    emb = 0;
    w_ih = emb + E * V;
    w_hh = w_ih + 4 * H * E;
    b = w_hh + 4 * H * H;
    w_out = b + 4 * H;
    b_out = w_out + V * H;
    total = b_out + V;
  }
};

}  // namespace

ModelParams::MatMap ModelParams::embedding() {
  Offsets o(cfg);
  return MatMap(flat.data() + o.emb, cfg.embed_dim, cfg.vocab_size);
}
ModelParams::MatMap ModelParams::w_ih() {
  Offsets o(cfg);
  return MatMap(flat.data() + o.w_ih, 4 * cfg.hidden_dim, cfg.embed_dim);
}
ModelParams::MatMap ModelParams::w_hh() {
  Offsets o(cfg);
  return MatMap(flat.data() + o.w_hh, 4 * cfg.hidden_dim, cfg.hidden_dim);
}
ModelParams::VecMap ModelParams::b() {
  Offsets o(cfg);
  return VecMap(flat.data() + o.b, 4 * cfg.hidden_dim);
}
ModelParams::MatMap ModelParams::w_out() {
  Offsets o(cfg);
  return MatMap(flat.data() + o.w_out, cfg.vocab_size, cfg.hidden_dim);
}
ModelParams::VecMap ModelParams::b_out() {
  Offsets o(cfg);
  return VecMap(flat.data() + o.b_out, cfg.vocab_size);
}
ModelParams::CMatMap ModelParams::embedding() const {
  Offsets o(cfg);
  return CMatMap(flat.data() + o.emb, cfg.embed_dim, cfg.vocab_size);
}
ModelParams::CMatMap ModelParams::w_ih() const {
  Offsets o(cfg);
  return CMatMap(flat.data() + o.w_ih, 4 * cfg.hidden_dim, cfg.embed_dim);
}
ModelParams::CMatMap ModelParams::w_hh() const {
  Offsets o(cfg);
  return CMatMap(flat.data() + o.w_hh, 4 * cfg.hidden_dim, cfg.hidden_dim);
}
ModelParams::CVecMap ModelParams::b() const {
  Offsets o(cfg);
  return CVecMap(flat.data() + o.b, 4 * cfg.hidden_dim);
}
ModelParams::CMatMap ModelParams::w_out() const {
  Offsets o(cfg);
  return CMatMap(flat.data() + o.w_out, cfg.vocab_size, cfg.hidden_dim);
}
ModelParams::CVecMap ModelParams::b_out() const {
  Offsets o(cfg);
  return CVecMap(flat.data() + o.b_out, cfg.vocab_size);
}

ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  ModelParams p;
  p.cfg = cfg;
  p.flat.resize(param_count(cfg));
  const double s = 1.0 / std::sqrt(static_cast<double>(cfg.hidden_dim));
  auto rng = make_rng(seed, "init_params");
  std::uniform_real_distribution<double> unif(-s, s);
  for (Eigen::Index i = 0; i < p.flat.size(); ++i) p.flat(i) = unif(rng);
  const int H = cfg.hidden_dim;
  p.b().segment(H, H).setOnes();  // forget gate
  return p;
}

namespace {

inline Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& x) {
  return 1.0 / (1.0 + (-x).exp());
}

struct StepCache {
  Eigen::MatrixXd x;           // E x B inputs
  Eigen::ArrayXXd i, f, g, o;  // H x B gate activations
  Eigen::ArrayXXd c, tanh_c;   // H x B cell state and its tanh
  Eigen::MatrixXd h_prev;      // H x B
  Eigen::ArrayXXd c_prev;      // H x B
};

bool target_masked(const ModelConfig& cfg, int id) {
  return id == cfg.pad_id || id == cfg.bos_id;
}

// Shared forward pass. When caches/grad requested, stores per-step state.
// Returns (weighted nll sum, weighted valid-target count).
std::pair<double, double> forward_impl(const ModelParams& params,
                                       const Eigen::MatrixXi& batch,
                                       const Eigen::VectorXd& weights,
                                       std::vector<StepCache>* caches,
                                       std::vector<Eigen::MatrixXd>* dlogits_out) {
  const ModelConfig& cfg = params.cfg;
  const int B = static_cast<int>(batch.cols());
  const int L = static_cast<int>(batch.rows());
  const int H = cfg.hidden_dim, V = cfg.vocab_size;
  if (L != cfg.seq_len) throw std::invalid_argument("forward: sequence length mismatch");
  if (weights.size() != B) throw std::invalid_argument("forward: weights/batch size mismatch");
  for (int b = 0; b < B; ++b) {
    for (int t = 0; t < L; ++t) {
      const int id = batch(t, b);
      if (id < 0 || id >= V) throw std::invalid_argument("forward: token id out of vocab range");
    }
  }

  const auto emb = params.embedding();
  const auto w_ih = params.w_ih();
  const auto w_hh = params.w_hh();
  const auto bias = params.b();
  const auto w_out = params.w_out();
  const auto b_out = params.b_out();

  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(H, B);
  Eigen::ArrayXXd c = Eigen::ArrayXXd::Zero(H, B);

  double nll_sum = 0;     // sum_b w_b * nll_b
  double weight_mass = 0; // sum_b w_b * valid_count_b

  for (int t = 0; t < L - 1; ++t) {
    StepCache sc;
    sc.x.resize(cfg.embed_dim, B);
    for (int b = 0; b < B; ++b) sc.x.col(b) = emb.col(batch(t, b));
    sc.h_prev = h;
    sc.c_prev = c;

    Eigen::MatrixXd gates = (w_ih * sc.x + w_hh * h).colwise() + bias;
    sc.i = sigmoid(gates.topRows(H).array());
    sc.f = sigmoid(gates.middleRows(H, H).array());
    sc.g = gates.middleRows(2 * H, H).array().tanh();
    sc.o = sigmoid(gates.bottomRows(H).array());
    c = sc.f * sc.c_prev + sc.i * sc.g;
    sc.c = c;
    sc.tanh_c = c.tanh();
    h = (sc.o * sc.tanh_c).matrix();

    Eigen::MatrixXd logits = (w_out * h).colwise() + b_out;

    Eigen::MatrixXd dlogits;
    if (dlogits_out) dlogits = Eigen::MatrixXd::Zero(V, B);
    for (int b = 0; b < B; ++b) {
      const int y = batch(t + 1, b);
      const bool valid = !target_masked(cfg, y);
      const double w = weights(b);
      if (valid && w != 0.0) {
        const auto col = logits.col(b).array();
        const double mx = col.maxCoeff();
        const double lse = mx + std::log((col - mx).exp().sum());
        nll_sum += w * (lse - col(y));
        weight_mass += w;
        if (dlogits_out) {
          dlogits.col(b) = (col - lse).exp().matrix() * w;
          dlogits(y, b) -= w;
        }
      }
    }
    if (caches) caches->push_back(std::move(sc));
    if (dlogits_out) dlogits_out->push_back(std::move(dlogits));
  }
  return {nll_sum, weight_mass};
}

}  // namespace

double forward_nll(const ModelParams& params, const Eigen::MatrixXi& batch,
                   const Eigen::VectorXd& weights) {
  auto [nll, mass] = forward_impl(params, batch, weights, nullptr, nullptr);
  if (mass <= 0) return 0.0;
  return nll / mass;
}

LossAndGrad grad(const ModelParams& params, const Eigen::MatrixXi& batch,
                 const Eigen::VectorXd& weights) {
  const ModelConfig& cfg = params.cfg;
  const int B = static_cast<int>(batch.cols());
  const int L = static_cast<int>(batch.rows());
  const int H = cfg.hidden_dim;

  std::vector<StepCache> caches;
  std::vector<Eigen::MatrixXd> dlogits;
  caches.reserve(L - 1);
  dlogits.reserve(L - 1);
  auto [nll, mass] = forward_impl(params, batch, weights, &caches, &dlogits);

  LossAndGrad out;
  out.grad.flat = Eigen::VectorXd::Zero(params.flat.size());
  if (mass <= 0) {
    out.loss = 0.0;
    return out;
  }
  out.loss = nll / mass;

  ModelParams g;  // reuse the view machinery for the gradient
  g.cfg = cfg;
  g.flat.swap(out.grad.flat);
  auto d_emb = g.embedding();
  auto d_w_ih = g.w_ih();
  auto d_w_hh = g.w_hh();
  auto d_b = g.b();
  auto d_w_out = g.w_out();
  auto d_b_out = g.b_out();

  const auto w_ih = params.w_ih();
  const auto w_hh = params.w_hh();
  const auto w_out = params.w_out();

  const double inv_mass = 1.0 / mass;
  Eigen::MatrixXd dh_next = Eigen::MatrixXd::Zero(H, B);
  Eigen::ArrayXXd dc_next = Eigen::ArrayXXd::Zero(H, B);

  for (int t = L - 2; t >= 0; --t) {
    const StepCache& sc = caches[t];
    const Eigen::MatrixXd dlg = dlogits[t] * inv_mass;
    const Eigen::MatrixXd h_t = (sc.o * sc.tanh_c).matrix();

    d_w_out += dlg * h_t.transpose();
    d_b_out += dlg.rowwise().sum();

    Eigen::ArrayXXd dh = (w_out.transpose() * dlg + dh_next).array();
    Eigen::ArrayXXd do_ = dh * sc.tanh_c;
    Eigen::ArrayXXd dc = dh * sc.o * (1.0 - sc.tanh_c.square()) + dc_next;
    Eigen::ArrayXXd di = dc * sc.g;
    Eigen::ArrayXXd df = dc * sc.c_prev;
    Eigen::ArrayXXd dg = dc * sc.i;
    dc_next = dc * sc.f;

    Eigen::MatrixXd dgates(4 * H, B);
    dgates.topRows(H) = (di * sc.i * (1.0 - sc.i)).matrix();
    dgates.middleRows(H, H) = (df * sc.f * (1.0 - sc.f)).matrix();
    dgates.middleRows(2 * H, H) = (dg * (1.0 - sc.g.square())).matrix();
    dgates.bottomRows(H) = (do_ * sc.o * (1.0 - sc.o)).matrix();

    d_w_ih += dgates * sc.x.transpose();
    d_w_hh += dgates * sc.h_prev.transpose();
    d_b += dgates.rowwise().sum();
    dh_next = w_hh.transpose() * dgates;

    const Eigen::MatrixXd dx = w_ih.transpose() * dgates;
    for (int b = 0; b < B; ++b) d_emb.col(batch(t, b)) += dx.col(b);
  }
  out.grad.flat.swap(g.flat);
  return out;
}

double perplexity(const ModelParams& params, const Eigen::MatrixXi& data) {
  if (data.cols() == 0) throw std::invalid_argument("perplexity: empty data");
  const Eigen::VectorXd ones = Eigen::VectorXd::Ones(data.cols());
  return std::exp(forward_nll(params, data, ones));
}

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
  const char magic[4] = {'P', 'F', 'L', 'M'};
  const uint32_t version = 1;
  const int32_t dims[6] = {static_cast<int32_t>(params.cfg.vocab_size),
                           static_cast<int32_t>(params.cfg.embed_dim),
                           static_cast<int32_t>(params.cfg.hidden_dim),
                           static_cast<int32_t>(params.cfg.seq_len),
                           static_cast<int32_t>(params.cfg.pad_id),
                           static_cast<int32_t>(params.cfg.bos_id)};
  const uint64_t n = static_cast<uint64_t>(params.flat.size());
  bool ok = std::fwrite(magic, 1, 4, f) == 4 &&
            std::fwrite(&version, sizeof version, 1, f) == 1 &&
            std::fwrite(dims, sizeof(int32_t), 6, f) == 6 &&
            std::fwrite(&n, sizeof n, 1, f) == 1 &&
            std::fwrite(params.flat.data(), sizeof(double), n, f) == n;
  std::fclose(f);
  if (!ok) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
  char magic[4];
  uint32_t version;
  int32_t dims[6];
  uint64_t n;
  ModelParams p;
  bool ok = std::fread(magic, 1, 4, f) == 4 && std::memcmp(magic, "PFLM", 4) == 0 &&
            std::fread(&version, sizeof version, 1, f) == 1 && version == 1 &&
            std::fread(dims, sizeof(int32_t), 6, f) == 6 &&
            std::fread(&n, sizeof n, 1, f) == 1;
  if (ok) {
    p.cfg.vocab_size = dims[0];
    p.cfg.embed_dim = dims[1];
    p.cfg.hidden_dim = dims[2];
    p.cfg.seq_len = dims[3];
    p.cfg.pad_id = dims[4];
    p.cfg.bos_id = dims[5];
    p.flat.resize(static_cast<Eigen::Index>(n));
    ok = std::fread(p.flat.data(), sizeof(double), n, f) == n &&
         static_cast<int64_t>(n) == param_count(p.cfg);
  }
  std::fclose(f);
  if (!ok) throw std::runtime_error("load_checkpoint: corrupt or incompatible file " + path);
  return p;
}

}  // namespace pfl
