#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace pfl {

/// All randomness in a run descends from one master seed. Child streams are
/// derived by mixing the master seed with a purpose label and an index, so
/// independent consumers (cohort sampling, noise, init, ...) never share a
/// stream and runs replay exactly.
uint64_t derive_seed(uint64_t master, std::string_view purpose, uint64_t index = 0);

inline std::mt19937_64 make_rng(uint64_t master, std::string_view purpose, uint64_t index = 0) {
  return std::mt19937_64(derive_seed(master, purpose, index));
}

}  // namespace pfl
