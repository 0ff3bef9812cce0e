#pragma once

// Counter-based seeded streams. A stream is identified by a root seed plus a
// (purpose, a, b) key, so draws for one example or iteration never depend on
// how many draws other examples made.

#include <cstdint>
#include <random>

#include "anyshift/tensor.hpp"

namespace anyshift {

enum class StreamPurpose : std::uint64_t {
  WorldMeans = 1,
  ShiftRotation,
  ShiftBias,
  Sampling,
  ClassNames,
  EncoderInit,
  Pretrain,
  NetInit,
  TrainBatch,
  TrainNoise,
  EvalNoise,
  Test,
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t root, StreamPurpose purpose, std::uint64_t a = 0, std::uint64_t b = 0);

inline std::mt19937_64 make_stream(std::uint64_t root, StreamPurpose purpose, std::uint64_t a = 0,
                                   std::uint64_t b = 0) {
  return std::mt19937_64(derive_seed(root, purpose, a, b));
}

Matrix standard_normal(Index rows, Index cols, std::mt19937_64& rng);

}  // namespace anyshift
