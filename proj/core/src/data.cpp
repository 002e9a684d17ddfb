#include "marginal/data.hpp"

#include <algorithm>
#include <array>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <openssl/evp.h>
#include <zlib.h>

namespace fs = std::filesystem;

namespace marginal {

namespace {

struct FileExpectation {
  const char* file;
  uint64_t size;        // exact byte size, 0 = unchecked
  const char* sha256;   // nullptr = structural check only
};

// MNIST digests verified against the canonical uncompressed IDX files.
constexpr std::array<FileExpectation, 4> kMnistFiles = {{
    {"mnist/train-images-idx3-ubyte", 47040016,
     "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"},
    {"mnist/train-labels-idx1-ubyte", 60008,
     "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"},
    {"mnist/t10k-images-idx3-ubyte", 7840016,
     "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"},
    {"mnist/t10k-labels-idx1-ubyte", 10008,
     "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"},
}};

constexpr std::array<FileExpectation, 6> kCifarFiles = {{
    {"cifar10/data_batch_1.bin", 30730000, nullptr},
    {"cifar10/data_batch_2.bin", 30730000, nullptr},
    {"cifar10/data_batch_3.bin", 30730000, nullptr},
    {"cifar10/data_batch_4.bin", 30730000, nullptr},
    {"cifar10/data_batch_5.bin", 30730000, nullptr},
    {"cifar10/test_batch.bin", 30730000, nullptr},
}};

constexpr std::array<FileExpectation, 2> kSvhnFiles = {{
    {"svhn/train_32x32.mat", 0, nullptr},
    {"svhn/test_32x32.mat", 0, nullptr},
}};

void verify_file(const fs::path& root, const FileExpectation& exp) {
  const auto path = root / exp.file;
  if (!fs::exists(path)) {
    throw IngestError("dataset file missing: " + path.string());
  }
  if (exp.size != 0 && fs::file_size(path) != exp.size) {
    throw IngestError("dataset file has unexpected size: " + path.string());
  }
  if (exp.sha256 != nullptr) {
    const auto got = sha256_file(path.string());
    if (got != exp.sha256) {
      throw IngestError("checksum mismatch for " + path.string() + " (got " +
                        got + ")");
    }
  }
}

uint32_t read_be32(std::istream& in) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  return (uint32_t(b[0]) << 24) | (uint32_t(b[1]) << 16) |
         (uint32_t(b[2]) << 8) | uint32_t(b[3]);
}

torch::Tensor read_idx_images(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open " + path.string());
  if (read_be32(in) != 0x00000803u) {
    throw IngestError("bad IDX image magic in " + path.string());
  }
  const int64_t n = read_be32(in);
  const int64_t rows = read_be32(in);
  const int64_t cols = read_be32(in);
  std::vector<uint8_t> raw(static_cast<size_t>(n * rows * cols));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IngestError("truncated IDX image file " + path.string());
  auto t = torch::from_blob(raw.data(), {n, 1, rows, cols}, torch::kUInt8).clone();
  return t.to(torch::kFloat).div_(255.0);
}

torch::Tensor read_idx_labels(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open " + path.string());
  if (read_be32(in) != 0x00000801u) {
    throw IngestError("bad IDX label magic in " + path.string());
  }
  const int64_t n = read_be32(in);
  std::vector<uint8_t> raw(static_cast<size_t>(n));
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!in) throw IngestError("truncated IDX label file " + path.string());
  auto t = torch::from_blob(raw.data(), {n}, torch::kUInt8).clone();
  return t.to(torch::kInt64);
}

Dataset load_mnist(const std::string& split, int64_t limit) {
  const fs::path root = data_dir();
  for (const auto& f : kMnistFiles) verify_file(root, f);
  const bool train = split == "train";
  auto x = read_idx_images(root / (train ? "mnist/train-images-idx3-ubyte"
                                         : "mnist/t10k-images-idx3-ubyte"));
  auto y = read_idx_labels(root / (train ? "mnist/train-labels-idx1-ubyte"
                                         : "mnist/t10k-labels-idx1-ubyte"));
  if (limit > 0 && limit < x.size(0)) {
    x = x.narrow(0, 0, limit);
    y = y.narrow(0, 0, limit);
  }
  return Dataset{x.contiguous(), y.contiguous(), 10, "mnist"};
}

Dataset load_cifar10(const std::string& split, int64_t limit) {
  const fs::path root = data_dir();
  for (const auto& f : kCifarFiles) verify_file(root, f);
  std::vector<fs::path> files;
  if (split == "train") {
    for (int i = 1; i <= 5; ++i) {
      files.push_back(root / ("cifar10/data_batch_" + std::to_string(i) + ".bin"));
    }
  } else {
    files.push_back(root / "cifar10/test_batch.bin");
  }
  constexpr int64_t kRecord = 3073;
  constexpr int64_t kPerFile = 10000;
  std::vector<torch::Tensor> xs, ys;
  for (const auto& f : files) {
    std::ifstream in(f, std::ios::binary);
    std::vector<uint8_t> raw(static_cast<size_t>(kRecord * kPerFile));
    in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!in) throw IngestError("truncated CIFAR batch " + f.string());
    auto rec = torch::from_blob(raw.data(), {kPerFile, kRecord}, torch::kUInt8).clone();
    ys.push_back(rec.narrow(1, 0, 1).squeeze(1).to(torch::kInt64));
    xs.push_back(rec.narrow(1, 1, 3072)
                     .reshape({kPerFile, 3, 32, 32})
                     .to(torch::kFloat)
                     .div_(255.0));
  }
  auto x = torch::cat(xs, 0);
  auto y = torch::cat(ys, 0);
  if (limit > 0 && limit < x.size(0)) {
    x = x.narrow(0, 0, limit);
    y = y.narrow(0, 0, limit);
  }
  return Dataset{x.contiguous(), y.contiguous(), 10, "cifar10"};
}

Dataset load_svhn(const std::string& split, int64_t limit) {
  const fs::path root = data_dir();
  for (const auto& f : kSvhnFiles) {
    if (!fs::exists(root / f.file)) {
      throw IngestError(std::string("dataset file missing: ") +
                        (root / f.file).string());
    }
  }
  const bool train = split == "train";
  auto arrays = read_mat5_uint8(
      (root / (train ? "svhn/train_32x32.mat" : "svhn/test_32x32.mat")).string());
  const Mat5Array* xa = nullptr;
  const Mat5Array* ya = nullptr;
  for (const auto& a : arrays) {
    if (a.name == "X") xa = &a;
    if (a.name == "y") ya = &a;
  }
  if (!xa || !ya || xa->dims.size() != 4) {
    throw IngestError("SVHN container lacks expected X/y arrays");
  }
  const int64_t h = xa->dims[0], w = xa->dims[1], c = xa->dims[2], n = xa->dims[3];
  if (h != 32 || w != 32 || c != 3) {
    throw IngestError("SVHN X array has unexpected shape");
  }
  // column-major [H W C N] -> [N C H W]
  auto x = torch::from_blob(const_cast<uint8_t*>(xa->data.data()), {n, c, w, h},
                            torch::kUInt8)
               .clone()
               .permute({0, 1, 3, 2})
               .contiguous()
               .to(torch::kFloat)
               .div_(255.0);
  auto y = torch::from_blob(const_cast<uint8_t*>(ya->data.data()), {n}, torch::kUInt8)
               .clone()
               .to(torch::kInt64)
               .remainder(10);  // label 10 encodes digit 0
  if (limit > 0 && limit < n) {
    x = x.narrow(0, 0, limit);
    y = y.narrow(0, 0, limit);
  }
  return Dataset{x.contiguous(), y.contiguous(), 10, "svhn"};
}

}  // namespace

std::string data_dir() {
  if (const char* env = std::getenv("MARGINAL_DATA_DIR")) return env;
  const char* home = std::getenv("HOME");
  return std::string(home ? home : ".") + "/.cache/marginal/data";
}

bool dataset_available(const std::string& name) {
  const fs::path root = data_dir();
  auto all_present = [&](const auto& files) {
    return std::all_of(files.begin(), files.end(), [&](const FileExpectation& f) {
      return fs::exists(root / f.file);
    });
  };
  if (name == "mnist") return all_present(kMnistFiles);
  if (name == "cifar10") return all_present(kCifarFiles);
  if (name == "svhn") return all_present(kSvhnFiles);
  if (name == "synth2d") return true;
  return false;
}

Dataset make_synth2d(int64_t n, uint64_t seed) {
  Rng rng(derive_seed(seed, 0xda7a));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  auto x = torch::empty({n, 2}, torch::kFloat);
  auto y = torch::empty({n}, torch::kInt64);
  auto xa = x.accessor<float, 2>();
  auto ya = y.accessor<int64_t, 1>();
  // fixed separating rule; labels follow the same boundary the synthetic
  // linear model uses, so every point is consistently classifiable
  const double w0 = 1.0, w1 = -0.6, b = -0.2;
  for (int64_t i = 0; i < n; ++i) {
    const double u = uni(rng), v = uni(rng);
    xa[i][0] = static_cast<float>(u);
    xa[i][1] = static_cast<float>(v);
    ya[i] = (w0 * u + w1 * v + b > 0.0) ? 0 : 1;
  }
  return Dataset{x, y, 2, "synth2d"};
}

Dataset load_dataset(const DatasetSpec& spec) {
  if (spec.split != "train" && spec.split != "test") {
    throw ContractError("unknown split: " + spec.split);
  }
  if (spec.name == "mnist") return load_mnist(spec.split, spec.limit);
  if (spec.name == "cifar10") return load_cifar10(spec.split, spec.limit);
  if (spec.name == "svhn") return load_svhn(spec.split, spec.limit);
  if (spec.name == "synth2d") {
    auto d = make_synth2d(spec.synth_n, spec.seed + (spec.split == "test" ? 1 : 0));
    if (spec.limit > 0 && spec.limit < d.size()) {
      d.x = d.x.narrow(0, 0, spec.limit);
      d.y = d.y.narrow(0, 0, spec.limit);
    }
    return d;
  }
  throw ContractError("unknown dataset: " + spec.name);
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open " + path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 20);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

namespace {

struct ByteReader {
  const uint8_t* p;
  size_t n;
  size_t off = 0;

  bool eof() const { return off >= n; }
  void need(size_t k) const {
    if (off + k > n) throw IngestError("mat5: truncated element");
  }
  uint32_t u32() {
    need(4);
    uint32_t v;
    std::memcpy(&v, p + off, 4);
    off += 4;
    return v;
  }
  const uint8_t* bytes(size_t k) {
    need(k);
    const uint8_t* out = p + off;
    off += k;
    return out;
  }
  void align8() { off = (off + 7) & ~size_t(7); }
};

constexpr uint32_t miUINT8 = 2;
constexpr uint32_t miINT32 = 5;
constexpr uint32_t miUINT32 = 6;
constexpr uint32_t miCOMPRESSED = 15;
constexpr uint32_t miMATRIX = 14;

std::vector<uint8_t> inflate_all(const uint8_t* src, size_t len) {
  std::vector<uint8_t> out;
  out.reserve(len * 4);
  z_stream zs{};
  if (inflateInit(&zs) != Z_OK) throw IngestError("mat5: zlib init failed");
  zs.next_in = const_cast<Bytef*>(src);
  zs.avail_in = static_cast<uInt>(len);
  std::vector<uint8_t> buf(1 << 20);
  int rc = Z_OK;
  while (rc != Z_STREAM_END) {
    zs.next_out = buf.data();
    zs.avail_out = static_cast<uInt>(buf.size());
    rc = inflate(&zs, Z_NO_FLUSH);
    if (rc != Z_OK && rc != Z_STREAM_END) {
      inflateEnd(&zs);
      throw IngestError("mat5: zlib inflate failed");
    }
    out.insert(out.end(), buf.data(), buf.data() + (buf.size() - zs.avail_out));
  }
  inflateEnd(&zs);
  return out;
}

// Parses one miMATRIX payload; returns empty name when the element is not a
// plain uint8 numeric array (those are skipped).
Mat5Array parse_matrix(ByteReader r) {
  Mat5Array arr;
  // array flags
  uint32_t type = r.u32();
  uint32_t bytes = r.u32();
  if (type != miUINT32 || bytes != 8) return arr;
  uint32_t flags = r.u32();
  r.u32();  // reserved
  const uint32_t cls = flags & 0xff;
  constexpr uint32_t mxUINT8_CLASS = 9;
  constexpr uint32_t mxDOUBLE_CLASS = 6;
  // dimensions
  type = r.u32();
  bytes = r.u32();
  if (type != miINT32) return arr;
  const size_t ndims = bytes / 4;
  std::vector<int64_t> dims;
  for (size_t i = 0; i < ndims; ++i) {
    dims.push_back(static_cast<int32_t>(r.u32()));
  }
  r.align8();
  // name (possibly small-element encoded)
  uint32_t name_tag = r.u32();
  std::string name;
  if (name_tag >> 16) {  // small element: length in upper 16 bits
    const uint32_t len = name_tag >> 16;
    const uint32_t data = r.u32();
    name.assign(reinterpret_cast<const char*>(&data), len);
  } else {
    const uint32_t len = r.u32();
    const uint8_t* nm = r.bytes(len);
    name.assign(reinterpret_cast<const char*>(nm), len);
    r.align8();
  }
  if (cls != mxUINT8_CLASS && cls != mxDOUBLE_CLASS) return arr;
  // real part
  type = r.u32();
  uint32_t dlen = r.u32();
  if (type != miUINT8) return arr;  // SVHN stores uint8 payloads
  const uint8_t* data = r.bytes(dlen);
  arr.name = name;
  arr.dims = std::move(dims);
  arr.data.assign(data, data + dlen);
  return arr;
}

void parse_elements(ByteReader& r, std::vector<Mat5Array>& out) {
  while (!r.eof()) {
    if (r.n - r.off < 8) break;
    const uint32_t type = r.u32();
    const uint32_t bytes = r.u32();
    const uint8_t* payload = r.bytes(bytes);
    if (type == miCOMPRESSED) {
      auto raw = inflate_all(payload, bytes);
      ByteReader inner{raw.data(), raw.size()};
      parse_elements(inner, out);
    } else if (type == miMATRIX) {
      auto arr = parse_matrix(ByteReader{payload, bytes});
      if (!arr.name.empty()) out.push_back(std::move(arr));
    }
    r.align8();
  }
}

}  // namespace

std::vector<Mat5Array> read_mat5_uint8(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open " + path);
  std::vector<uint8_t> all((std::istreambuf_iterator<char>(in)),
                           std::istreambuf_iterator<char>());
  if (all.size() < 128) throw IngestError("mat5: file too small " + path);
  ByteReader r{all.data() + 128, all.size() - 128};
  std::vector<Mat5Array> out;
  parse_elements(r, out);
  return out;
}

}  // namespace marginal
