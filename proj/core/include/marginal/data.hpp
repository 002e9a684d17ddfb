#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "marginal/common.hpp"

namespace marginal {

struct DatasetSpec {
  std::string name;           // mnist | cifar10 | svhn | synth2d
  std::string split = "train";  // train | test
  int64_t limit = 0;          // 0 = whole split
  uint64_t seed = 0;          // synth2d generation seed
  int64_t synth_n = 1000;     // synth2d sample count
};

// In-memory dataset: x is float32 in [0,1], y is int64 class indices.
struct Dataset {
  torch::Tensor x;  // [N, dims...]
  torch::Tensor y;  // [N]
  int64_t num_classes = 0;
  std::string name;

  int64_t size() const { return x.size(0); }
};

// Dataset cache directory: $MARGINAL_DATA_DIR, else ~/.cache/marginal/data.
std::string data_dir();

// True when the files for the named dataset are present in the cache.
bool dataset_available(const std::string& name);

// Loads per spec. Files are checksum/structure verified before decoding;
// failures raise IngestError.
Dataset load_dataset(const DatasetSpec& spec);

// Deterministic two-class planar cloud in [0,1]^2 (oracle experiments).
Dataset make_synth2d(int64_t n, uint64_t seed);

// Hex SHA-256 of a file, streaming.
std::string sha256_file(const std::string& path);

// Minimal MATLAB v5 reader for the SVHN cropped-digit containers: extracts
// the uint8 arrays "X" ([H W C N], column-major) and "y" ([N 1]).
// Handles plain and zlib-compressed (miCOMPRESSED) elements.
struct Mat5Array {
  std::string name;
  std::vector<int64_t> dims;
  std::vector<uint8_t> data;  // column-major, as stored
};
std::vector<Mat5Array> read_mat5_uint8(const std::string& path);

}  // namespace marginal
