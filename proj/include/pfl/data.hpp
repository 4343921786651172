#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace pfl {

enum class Domain { S, T };

std::string domain_name(Domain d);
Domain parse_domain(const std::string& s);

/// Token ids are dense in [0, size); the four specials sit at the top of the
/// id range, after the frequency-ranked words.
struct Vocab {
  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, int> token_to_id;
  int unk_id = -1, bos_id = -1, eos_id = -1, pad_id = -1;

  int size() const { return static_cast<int>(id_to_token.size()); }
  int lookup(const std::string& token) const;  // unk_id when absent
};

/// Raw (pre-tokenization) client: sentences labeled with their domain.
struct RawClient {
  int id = 0;
  std::vector<std::pair<Domain, std::string>> sentences;
};

/// Preprocessed client: per-domain matrices of length-10 token-id sequences
/// (seq_len x n_sequences).
struct ClientRecord {
  int id = 0;
  Eigen::MatrixXi seq_s;  // 0 columns when the client has no S data
  Eigen::MatrixXi seq_t;

  bool has_domain(Domain d) const;
  const Eigen::MatrixXi& sequences(Domain d) const;
};

struct PopulationSplit {
  std::vector<int> train, validation, test;
};

/// Two-domain synthetic corpus generator. Each domain draws words from a
/// Zipfian mixture over a shared core plus domain-specific words; the
/// distributions are constructed to differ by total variation >= 0.2.
/// Sentences are topic-coherent (the first word selects a narrow vocabulary
/// chunk that the rest of the sentence is drawn from), which leaves the
/// unigram marginals untouched but gives sequence models real structure to
/// learn and transfer.
struct SynthConfig {
  int n_clients_t = 500;
  int population_ratio = 10;    // S clients per T client
  double overlap = 0.0;         // fraction of S clients that also carry T data
  int n_words = 3000;           // distinct words across both domains
  double shared_mass = 0.2;     // probability mass on the shared core
  int min_tokens = 60;          // tokens per client per domain
  int max_tokens = 120;
  int min_sentence_len = 4;
  int max_sentence_len = 12;
  uint64_t seed = 0;
};

/// Fixed preprocessing knobs.
inline constexpr int kSeqLen = 10;
inline constexpr int kMaxTokensPerClient = 1600;

/// Builds the (size - 4) most frequent target-domain training words, ties
/// broken lexicographically, specials appended. Lowercased whitespace
/// tokenization.
Vocab build_vocab(const std::vector<RawClient>& clients,
                  const std::vector<int>& train_ids, int size);

/// Per sentence: BOS + ids + EOS; the concatenated stream is truncated at
/// 1,600 tokens, chunked into length-10 sequences, last chunk PAD-filled.
Eigen::MatrixXi preprocess_client(const std::vector<std::string>& raw_sentences,
                                  const Vocab& vocab);

std::vector<std::string> tokenize(const std::string& sentence);

/// Preprocess a whole raw population into ClientRecords (per-domain streams).
std::vector<ClientRecord> preprocess_population(const std::vector<RawClient>& raw,
                                                const Vocab& vocab);

std::vector<RawClient> generate_synthetic_population(const SynthConfig& cfg);

/// Reference (non-private) unigram distributions of the synthetic config,
/// over words only (not token ids).
Eigen::VectorXd synthetic_domain_distribution(const SynthConfig& cfg, Domain d);

/// Deterministic shuffle then 6:2:2 split by client, remainder to train.
PopulationSplit split_clients(const std::vector<ClientRecord>& clients, uint64_t seed);

/// Line format: client_id<TAB>domain(S|T)<TAB>sentence
std::vector<RawClient> load_corpus(const std::string& path);
void save_corpus(const std::vector<RawClient>& clients, const std::string& path);

/// Processed-population cache: vocab + per-client sequence matrices, binary,
/// stable layout (magic "PFLP", version 1).
void save_population(const std::vector<ClientRecord>& clients, const Vocab& vocab,
                     const std::string& path);
std::pair<std::vector<ClientRecord>, Vocab> load_population(const std::string& path);

}  // namespace pfl
