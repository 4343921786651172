#include "pfl/data.hpp"

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <sstream>
#include <stdexcept>

#include "pfl/rng.hpp"

namespace pfl {

std::string domain_name(Domain d) { return d == Domain::S ? "S" : "T"; }

Domain parse_domain(const std::string& s) {
  if (s == "S") return Domain::S;
  if (s == "T") return Domain::T;
  throw std::invalid_argument("unknown domain label: " + s);
}

int Vocab::lookup(const std::string& token) const {
  auto it = token_to_id.find(token);
  return it == token_to_id.end() ? unk_id : it->second;
}

bool ClientRecord::has_domain(Domain d) const {
  return sequences(d).cols() > 0;
}

const Eigen::MatrixXi& ClientRecord::sequences(Domain d) const {
  return d == Domain::S ? seq_s : seq_t;
}

std::vector<std::string> tokenize(const std::string& sentence) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : sentence) {
    if (std::isspace(static_cast<unsigned char>(ch))) {
      if (!cur.empty()) {
        out.push_back(cur);
        cur.clear();
      }
    } else {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

Vocab build_vocab(const std::vector<RawClient>& clients,
                  const std::vector<int>& train_ids, int size) {
  if (size < 4) throw std::invalid_argument("build_vocab: size >= 4 required");
  std::unordered_map<int, bool> in_train;
  for (int id : train_ids) in_train[id] = true;

  std::unordered_map<std::string, int64_t> freq;
  for (const auto& c : clients) {
    if (!in_train.count(c.id)) continue;
    for (const auto& [dom, text] : c.sentences) {
      if (dom != Domain::T) continue;
      for (const auto& w : tokenize(text)) ++freq[w];
    }
  }
  if (freq.empty()) throw std::invalid_argument("build_vocab: empty target-domain corpus");

  std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocab v;
  const int n_words = std::min<int>(size - 4, static_cast<int>(ranked.size()));
  for (int i = 0; i < n_words; ++i) {
    v.token_to_id[ranked[i].first] = i;
    v.id_to_token.push_back(ranked[i].first);
  }
  auto add_special = [&](const std::string& tok) {
    int id = static_cast<int>(v.id_to_token.size());
    v.token_to_id[tok] = id;
    v.id_to_token.push_back(tok);
    return id;
  };
  v.unk_id = add_special("<UNK>");
  v.bos_id = add_special("<BOS>");
  v.eos_id = add_special("<EOS>");
  v.pad_id = add_special("<PAD>");
  return v;
}

Eigen::MatrixXi preprocess_client(const std::vector<std::string>& raw_sentences,
                                  const Vocab& vocab) {
  std::vector<int> stream;
  for (const auto& sentence : raw_sentences) {
    const auto words = tokenize(sentence);
    if (words.empty()) continue;
    stream.push_back(vocab.bos_id);
    for (const auto& w : words) stream.push_back(vocab.lookup(w));
    stream.push_back(vocab.eos_id);
    if (stream.size() >= kMaxTokensPerClient) break;
  }
  if (stream.size() > kMaxTokensPerClient) stream.resize(kMaxTokensPerClient);
  if (stream.empty()) return Eigen::MatrixXi(kSeqLen, 0);

  const int n_seq = static_cast<int>((stream.size() + kSeqLen - 1) / kSeqLen);
  Eigen::MatrixXi out = Eigen::MatrixXi::Constant(kSeqLen, n_seq, vocab.pad_id);
  for (size_t i = 0; i < stream.size(); ++i) {
    out(static_cast<int>(i % kSeqLen), static_cast<int>(i / kSeqLen)) = stream[i];
  }
  return out;
}

std::vector<ClientRecord> preprocess_population(const std::vector<RawClient>& raw,
                                                const Vocab& vocab) {
  std::vector<ClientRecord> out;
  out.reserve(raw.size());
  for (const auto& rc : raw) {
    std::vector<std::string> s_text, t_text;
    for (const auto& [dom, text] : rc.sentences) {
      (dom == Domain::S ? s_text : t_text).push_back(text);
    }
    ClientRecord r;
    r.id = rc.id;
    r.seq_s = preprocess_client(s_text, vocab);
    r.seq_t = preprocess_client(t_text, vocab);
    out.push_back(std::move(r));
  }
  std::sort(out.begin(), out.end(),
            [](const ClientRecord& a, const ClientRecord& b) { return a.id < b.id; });
  return out;
}

namespace {

// Word blocks: shared core, then S-specific, then T-specific. Zipf weights
// within each block.
struct SynthDists {
  int n_core, n_spec;
  Eigen::VectorXd p_s, p_t;  // over all n_words
};

SynthDists synth_dists(const SynthConfig& cfg) {
  SynthDists d;
  d.n_core = cfg.n_words / 3;
  d.n_spec = (cfg.n_words - d.n_core) / 2;
  auto zipf_block = [](int n) {
    Eigen::VectorXd w(n);
    for (int i = 0; i < n; ++i) w(i) = 1.0 / (i + 1.0);
    return Eigen::VectorXd(w / w.sum());
  };
  d.n_spec = std::min(d.n_spec, d.n_core);
  const Eigen::VectorXd core = zipf_block(d.n_core) * cfg.shared_mass;
  const Eigen::VectorXd spec = zipf_block(d.n_spec) * (1.0 - cfg.shared_mass);
  d.p_s = Eigen::VectorXd::Zero(cfg.n_words);
  d.p_t = Eigen::VectorXd::Zero(cfg.n_words);
  // Shared and domain-specific words are interleaved (indices 3k / 3k+1 /
  // 3k+2) so every topic chunk mixes shared words with both domains'
  // specific words: domain mismatch then pollutes the within-topic
  // conditionals, not just the unigram marginal.
  for (int k = 0; k < d.n_core; ++k) {
    d.p_s(3 * k) = core(k);
    d.p_t(3 * k) = core(k);
  }
  for (int k = 0; k < d.n_spec; ++k) {
    d.p_s(3 * k + 1) = spec(k);
    d.p_t(3 * k + 2) = spec(k);
  }
  return d;
}

std::string word_name(int idx) { return "w" + std::to_string(idx); }

// Sentences are topic-coherent: the first word is drawn from the full domain
// distribution and selects a narrow "topic" chunk of the vocabulary; the rest
// of the sentence is drawn from the distribution renormalized within that
// chunk. The unigram marginal is exactly unchanged (chunks are picked with
// probability equal to their mass), but sentences now carry learnable
// sequential structure, so volume in a domain teaches its topics.
constexpr int kTopicWidth = 50;

void emit_sentences(RawClient& client, Domain dom, const Eigen::VectorXd& dist,
                    const SynthConfig& cfg, std::mt19937_64& rng) {
  const int n = static_cast<int>(dist.size());
  std::discrete_distribution<int> draw(dist.data(), dist.data() + dist.size());
  std::vector<std::discrete_distribution<int>> topic_draw;  // lazily built
  topic_draw.resize(static_cast<size_t>((n + kTopicWidth - 1) / kTopicWidth));
  std::vector<bool> topic_ready(topic_draw.size(), false);

  std::uniform_int_distribution<int> n_tokens(cfg.min_tokens, cfg.max_tokens);
  std::uniform_int_distribution<int> sent_len(cfg.min_sentence_len, cfg.max_sentence_len);
  int remaining = n_tokens(rng);
  while (remaining > 0) {
    const int len = std::min(remaining, sent_len(rng));
    const int first = draw(rng);
    const size_t topic = static_cast<size_t>(first / kTopicWidth);
    if (!topic_ready[topic]) {
      const int lo = static_cast<int>(topic) * kTopicWidth;
      const int hi = std::min(n, lo + kTopicWidth);
      topic_draw[topic] =
          std::discrete_distribution<int>(dist.data() + lo, dist.data() + hi);
      topic_ready[topic] = true;
    }
    std::string s = word_name(first);
    for (int i = 1; i < len; ++i) {
      s.push_back(' ');
      s += word_name(static_cast<int>(topic) * kTopicWidth + topic_draw[topic](rng));
    }
    client.sentences.emplace_back(dom, std::move(s));
    remaining -= len;
  }
}

}  // namespace

Eigen::VectorXd synthetic_domain_distribution(const SynthConfig& cfg, Domain d) {
  const SynthDists sd = synth_dists(cfg);
  return d == Domain::S ? sd.p_s : sd.p_t;
}

std::vector<RawClient> generate_synthetic_population(const SynthConfig& cfg) {
  if (cfg.population_ratio < 1) throw std::invalid_argument("synth: population_ratio >= 1");
  if (cfg.n_clients_t < 1) throw std::invalid_argument("synth: n_clients_t >= 1");
  const SynthDists sd = synth_dists(cfg);

  const int n_t = cfg.n_clients_t;
  const int n_s = cfg.n_clients_t * cfg.population_ratio;
  std::vector<RawClient> out;
  out.reserve(n_t + n_s);

  for (int i = 0; i < n_t; ++i) {
    RawClient c;
    c.id = i;
    auto rng = make_rng(cfg.seed, "synth_client", static_cast<uint64_t>(c.id));
    emit_sentences(c, Domain::T, sd.p_t, cfg, rng);
    out.push_back(std::move(c));
  }
  const int n_overlap = static_cast<int>(cfg.overlap * n_s);
  for (int i = 0; i < n_s; ++i) {
    RawClient c;
    c.id = n_t + i;
    auto rng = make_rng(cfg.seed, "synth_client", static_cast<uint64_t>(c.id));
    emit_sentences(c, Domain::S, sd.p_s, cfg, rng);
    if (i < n_overlap) emit_sentences(c, Domain::T, sd.p_t, cfg, rng);
    out.push_back(std::move(c));
  }
  return out;
}

PopulationSplit split_clients(const std::vector<ClientRecord>& clients, uint64_t seed) {
  const int n = static_cast<int>(clients.size());
  if (n < 5) throw std::invalid_argument("split_clients: need at least 5 clients");
  std::vector<int> ids(n);
  for (int i = 0; i < n; ++i) ids[i] = clients[i].id;
  auto rng = make_rng(seed, "split_clients");
  std::shuffle(ids.begin(), ids.end(), rng);

  const int n_val = n * 2 / 10;
  const int n_test = n * 2 / 10;
  const int n_train = n - n_val - n_test;
  PopulationSplit sp;
  sp.train.assign(ids.begin(), ids.begin() + n_train);
  sp.validation.assign(ids.begin() + n_train, ids.begin() + n_train + n_val);
  sp.test.assign(ids.begin() + n_train + n_val, ids.end());
  std::sort(sp.train.begin(), sp.train.end());
  std::sort(sp.validation.begin(), sp.validation.end());
  std::sort(sp.test.begin(), sp.test.end());
  return sp;
}

std::vector<RawClient> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
  std::map<int, RawClient> by_id;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const size_t t1 = line.find('\t');
    const size_t t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      throw std::runtime_error("load_corpus: malformed line " + std::to_string(lineno) +
                               " in " + path);
    }
    const int id = std::stoi(line.substr(0, t1));
    const Domain dom = parse_domain(line.substr(t1 + 1, t2 - t1 - 1));
    RawClient& c = by_id[id];
    c.id = id;
    c.sentences.emplace_back(dom, line.substr(t2 + 1));
  }
  std::vector<RawClient> out;
  out.reserve(by_id.size());
  for (auto& [id, c] : by_id) out.push_back(std::move(c));
  return out;
}

void save_corpus(const std::vector<RawClient>& clients, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_corpus: cannot open " + path);
  for (const auto& c : clients) {
    for (const auto& [dom, text] : c.sentences) {
      out << c.id << '\t' << domain_name(dom) << '\t' << text << '\n';
    }
  }
}

namespace {

void write_matrix(std::FILE* f, const Eigen::MatrixXi& m) {
  const int32_t rows = static_cast<int32_t>(m.rows());
  const int32_t cols = static_cast<int32_t>(m.cols());
  std::fwrite(&rows, sizeof rows, 1, f);
  std::fwrite(&cols, sizeof cols, 1, f);
  if (m.size() > 0) std::fwrite(m.data(), sizeof(int32_t), m.size(), f);
}

Eigen::MatrixXi read_matrix(std::FILE* f) {
  int32_t rows = 0, cols = 0;
  if (std::fread(&rows, sizeof rows, 1, f) != 1 ||
      std::fread(&cols, sizeof cols, 1, f) != 1 || rows < 0 || cols < 0) {
    throw std::runtime_error("population cache: corrupt matrix header");
  }
  Eigen::MatrixXi m(rows, cols);
  if (m.size() > 0 &&
      std::fread(m.data(), sizeof(int32_t), m.size(), f) != static_cast<size_t>(m.size())) {
    throw std::runtime_error("population cache: truncated matrix data");
  }
  return m;
}

void write_string(std::FILE* f, const std::string& s) {
  const uint32_t n = static_cast<uint32_t>(s.size());
  std::fwrite(&n, sizeof n, 1, f);
  std::fwrite(s.data(), 1, n, f);
}

std::string read_string(std::FILE* f) {
  uint32_t n = 0;
  if (std::fread(&n, sizeof n, 1, f) != 1) throw std::runtime_error("population cache: corrupt");
  std::string s(n, '\0');
  if (n > 0 && std::fread(s.data(), 1, n, f) != n) {
    throw std::runtime_error("population cache: corrupt string");
  }
  return s;
}

}  // namespace

void save_population(const std::vector<ClientRecord>& clients, const Vocab& vocab,
                     const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "wb");
  if (!f) throw std::runtime_error("save_population: cannot open " + path);
  std::fwrite("PFLP", 1, 4, f);
  const uint32_t version = 1;
  std::fwrite(&version, sizeof version, 1, f);
  const uint32_t n_tokens = static_cast<uint32_t>(vocab.id_to_token.size());
  std::fwrite(&n_tokens, sizeof n_tokens, 1, f);
  for (const auto& t : vocab.id_to_token) write_string(f, t);
  const int32_t specials[4] = {vocab.unk_id, vocab.bos_id, vocab.eos_id, vocab.pad_id};
  std::fwrite(specials, sizeof(int32_t), 4, f);
  const uint32_t n_clients = static_cast<uint32_t>(clients.size());
  std::fwrite(&n_clients, sizeof n_clients, 1, f);
  for (const auto& c : clients) {
    const int32_t id = c.id;
    std::fwrite(&id, sizeof id, 1, f);
    write_matrix(f, c.seq_s);
    write_matrix(f, c.seq_t);
  }
  std::fclose(f);
}

std::pair<std::vector<ClientRecord>, Vocab> load_population(const std::string& path) {
  std::FILE* f = std::fopen(path.c_str(), "rb");
  if (!f) throw std::runtime_error("load_population: cannot open " + path);
  char magic[4];
  uint32_t version = 0;
  if (std::fread(magic, 1, 4, f) != 4 || std::memcmp(magic, "PFLP", 4) != 0 ||
      std::fread(&version, sizeof version, 1, f) != 1 || version != 1) {
    std::fclose(f);
    throw std::runtime_error("load_population: bad magic/version in " + path);
  }
  Vocab vocab;
  uint32_t n_tokens = 0;
  if (std::fread(&n_tokens, sizeof n_tokens, 1, f) != 1) {
    std::fclose(f);
    throw std::runtime_error("load_population: truncated header");
  }
  for (uint32_t i = 0; i < n_tokens; ++i) {
    std::string t = read_string(f);
    vocab.token_to_id[t] = static_cast<int>(i);
    vocab.id_to_token.push_back(std::move(t));
  }
  int32_t specials[4];
  uint32_t n_clients = 0;
  if (std::fread(specials, sizeof(int32_t), 4, f) != 4 ||
      std::fread(&n_clients, sizeof n_clients, 1, f) != 1) {
    std::fclose(f);
    throw std::runtime_error("load_population: truncated header");
  }
  vocab.unk_id = specials[0];
  vocab.bos_id = specials[1];
  vocab.eos_id = specials[2];
  vocab.pad_id = specials[3];
  std::vector<ClientRecord> clients;
  clients.reserve(n_clients);
  for (uint32_t i = 0; i < n_clients; ++i) {
    ClientRecord c;
    int32_t id = 0;
    if (std::fread(&id, sizeof id, 1, f) != 1) {
      std::fclose(f);
      throw std::runtime_error("load_population: truncated client list");
    }
    c.id = id;
    c.seq_s = read_matrix(f);
    c.seq_t = read_matrix(f);
    clients.push_back(std::move(c));
  }
  std::fclose(f);
  return {std::move(clients), std::move(vocab)};
}

}  // namespace pfl
