#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace marginal {

// Contract violations on public surfaces (bad shapes, out-of-range config).
class ContractError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Dataset ingestion failures: missing files, checksum/structure mismatch.
class IngestError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Checkpoint persistence failures: missing/garbled/mismatched checkpoints.
class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Training loop aborted on a non-finite loss.
class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// log(1 + e^z), overflow-safe. Antiderivative of the logistic function.
inline double softplus(double z) {
  if (z > 30.0) return z;
  return std::log1p(std::exp(z));
}

// splitmix64: cheap, well-mixed derivation of per-subsystem seeds from the
// single run seed so that e.g. data order and exploration noise stay
// decoupled.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

using Rng = std::mt19937_64;

}  // namespace marginal
