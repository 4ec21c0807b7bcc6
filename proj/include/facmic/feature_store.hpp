// Feature datasets: in-memory representation, the FACM binary format,
// synthetic generation, client partitioning and 8:1:1 splitting.
#pragma once

#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "facmic/core.hpp"

namespace facmic {

/// Image embeddings, labels, and one prompt embedding per class.
///
/// Features are held as doubles but are always float32-representable, since
/// that is the storage width of the file format.
struct FeatureDataset {
  Matrix image_features;               // N x D
  std::vector<std::uint16_t> labels;   // N
  std::vector<std::string> class_names;  // K
  Matrix text_features;                // K x D
  bool unlabeled = false;              // pool files carry no usable labels

  [[nodiscard]] std::size_t n() const noexcept { return image_features.rows(); }
  [[nodiscard]] std::size_t d() const noexcept { return text_features.cols(); }
  [[nodiscard]] std::size_t k() const noexcept { return text_features.rows(); }

  friend bool operator==(const FeatureDataset&, const FeatureDataset&) = default;
};

/// Throws DataError describing the first violated invariant.
inline void validate(const FeatureDataset& ds) {
  const std::size_t k = ds.text_features.rows();
  const std::size_t d = ds.text_features.cols();
  if (ds.image_features.rows() > 0 && ds.image_features.cols() != d)
    throw DataError("dataset: image feature width " +
                    std::to_string(ds.image_features.cols()) +
                    " does not match text feature width " + std::to_string(d));
  if (ds.labels.size() != ds.image_features.rows())
    throw DataError("dataset: label count does not match sample count");
  if (ds.class_names.size() != k)
    throw DataError("dataset: class name count does not match K");
  for (std::size_t i = 0; i < ds.labels.size(); ++i) {
    if (ds.labels[i] >= k)
      throw DataError("dataset: label " + std::to_string(ds.labels[i]) +
                      " at row " + std::to_string(i) + " is outside [0, " +
                      std::to_string(k) + ")");
  }
  for (double v : ds.image_features.data())
    if (!std::isfinite(v)) throw DataError("dataset: non-finite image feature");
  for (std::size_t c = 0; c < k; ++c) {
    bool nonzero = false;
    for (double v : ds.text_features.row(c)) {
      if (!std::isfinite(v)) throw DataError("dataset: non-finite text feature");
      nonzero = nonzero || v != 0.0;
    }
    if (!nonzero)
      throw DataError("dataset: text feature row " + std::to_string(c) + " is all zero");
  }
  for (const auto& name : ds.class_names)
    if (name.size() > 0xFFFF) throw DataError("dataset: class name longer than 65535 bytes");
}

// ---------------------------------------------------------------------------
// Binary format
//
//   "FACM" | u32 version | u32 N | u32 D | u32 K
//   N*D f32 image features | N u16 labels | K*D f32 text features
//   K x (u16 byte length + UTF-8 bytes)
//
// All little-endian, no padding. The version word's low 24 bits hold the
// format version (1); its top byte is a flag byte, bit 0 = unlabeled pool.
// ---------------------------------------------------------------------------

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::uint8_t kFlagUnlabeled = 0x01;

namespace detail {

class ByteWriter {
 public:
  void u16(std::uint16_t v) {
    buf_.push_back(static_cast<char>(v & 0xFF));
    buf_.push_back(static_cast<char>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) buf_.push_back(static_cast<char>((v >> s) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int s = 0; s < 64; s += 8) buf_.push_back(static_cast<char>((v >> s) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }
  void bytes(std::string_view s) { buf_.append(s); }

  [[nodiscard]] const std::string& buffer() const noexcept { return buf_; }

 private:
  std::string buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string data) : data_(std::move(data)) {}

  std::uint16_t u16(std::string_view field) {
    need(2, field);
    std::uint16_t v = static_cast<std::uint8_t>(data_[pos_]) |
                      static_cast<std::uint16_t>(static_cast<std::uint8_t>(data_[pos_ + 1]) << 8);
    pos_ += 2;
    return v;
  }
  std::uint32_t u32(std::string_view field) {
    need(4, field);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<std::uint32_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(std::string_view field) {
    need(8, field);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<std::uint64_t>(static_cast<std::uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32(std::string_view field) { return std::bit_cast<float>(u32(field)); }
  double f64(std::string_view field) { return std::bit_cast<double>(u64(field)); }
  std::string bytes(std::size_t n, std::string_view field) {
    need(n, field);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  [[nodiscard]] std::size_t remaining() const noexcept { return data_.size() - pos_; }

 private:
  void need(std::size_t n, std::string_view field) const {
    if (data_.size() - pos_ < n)
      throw DataError("truncated payload: file ends inside field '" + std::string(field) + "'");
  }

  std::string data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path.string() + "' for reading");
  std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw DataError("read failure on '" + path.string() + "'");
  return data;
}

inline void write_file(const std::filesystem::path& path, const std::string& data) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open '" + path.string() + "' for writing");
  out.write(data.data(), static_cast<std::streamsize>(data.size()));
  if (!out) throw DataError("write failure on '" + path.string() + "'");
}

}  // namespace detail

inline std::string encode_dataset(const FeatureDataset& ds) {
  validate(ds);
  detail::ByteWriter w;
  w.bytes("FACM");
  const std::uint32_t flags = ds.unlabeled ? kFlagUnlabeled : 0;
  w.u32(kFormatVersion | (flags << 24));
  w.u32(static_cast<std::uint32_t>(ds.n()));
  w.u32(static_cast<std::uint32_t>(ds.d()));
  w.u32(static_cast<std::uint32_t>(ds.k()));
  for (double v : ds.image_features.data()) w.f32(static_cast<float>(v));
  for (auto label : ds.labels) w.u16(ds.unlabeled ? 0 : label);
  for (double v : ds.text_features.data()) w.f32(static_cast<float>(v));
  for (const auto& name : ds.class_names) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
  }
  return w.buffer();
}

inline FeatureDataset decode_dataset(std::string bytes) {
  detail::ByteReader r(std::move(bytes));
  if (r.remaining() < 4 || r.bytes(4, "magic") != "FACM")
    throw DataError("bad magic: expected \"FACM\"");
  const std::uint32_t version_word = r.u32("version");
  if ((version_word & 0x00FFFFFF) != kFormatVersion)
    throw DataError("unsupported version " + std::to_string(version_word & 0x00FFFFFF));
  const std::uint8_t flags = static_cast<std::uint8_t>(version_word >> 24);
  if ((flags & ~kFlagUnlabeled) != 0)
    throw DataError("unknown header flags " + std::to_string(flags));
  const std::uint32_t n = r.u32("N");
  const std::uint32_t d = r.u32("D");
  const std::uint32_t k = r.u32("K");

  FeatureDataset ds;
  ds.unlabeled = (flags & kFlagUnlabeled) != 0;
  ds.image_features = Matrix(n, d);
  for (auto& v : ds.image_features.data()) v = r.f32("image_features");
  ds.labels.resize(n);
  for (auto& l : ds.labels) l = r.u16("labels");
  ds.text_features = Matrix(k, d);
  for (auto& v : ds.text_features.data()) v = r.f32("text_features");
  ds.class_names.resize(k);
  for (auto& name : ds.class_names) {
    const std::uint16_t len = r.u16("class_names");
    name = r.bytes(len, "class_names");
  }
  if (r.remaining() != 0)
    throw DataError("trailing bytes after class_names: " + std::to_string(r.remaining()));
  if (n == 0) ds.image_features = Matrix(0, d);
  validate(ds);
  return ds;
}

inline void save_dataset(const FeatureDataset& ds, const std::filesystem::path& path) {
  std::string bytes;
  try {
    bytes = encode_dataset(ds);
  } catch (const DataError& e) {
    throw DataError("refusing to write '" + path.string() + "': " + e.what());
  }
  detail::write_file(path, bytes);
}

/// Loads a labeled dataset; pool files flagged unlabeled are rejected.
inline FeatureDataset load_dataset(const std::filesystem::path& path) {
  FeatureDataset ds;
  try {
    ds = decode_dataset(detail::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  if (ds.unlabeled)
    throw DataError(path.string() +
                    ": file is flagged unlabeled (a target pool), labeled dataset required");
  return ds;
}

/// Loads any FACM file, labeled or not; used for target pools.
inline FeatureDataset load_any_dataset(const std::filesystem::path& path) {
  try {
    return decode_dataset(detail::read_file(path));
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Synthetic features
// ---------------------------------------------------------------------------

struct SyntheticSpec {
  std::size_t d = 32;
  std::size_t k = 4;
  std::size_t n_per_class = 200;
  double shift = 0.0;   // norm of each group's mean offset
  double noise = 1.0;   // expected norm of the isotropic noise vector
  std::size_t groups = 1;  // groups with independent offsets, stored group-major
  std::uint64_t seed = 0;
  std::optional<std::uint64_t> anchor_seed;  // defaults to seed
};

/// Unit-norm class anchors, orthonormal when k <= d.
inline Matrix make_anchors(std::size_t d, std::size_t k, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0));
  std::normal_distribution<double> normal(0.0, 1.0);
  Matrix a(k, d);
  for (auto& v : a.data()) v = normal(rng);
  for (std::size_t c = 0; c < k; ++c) {
    auto row = a.row(c);
    if (k <= d) {
      for (std::size_t p = 0; p < c; ++p) {
        const double proj = dot(row, a.row(p));
        auto prev = a.row(p);
        for (std::size_t j = 0; j < d; ++j) row[j] -= proj * prev[j];
      }
    }
    const double norm = std::sqrt(dot(row, row));
    if (norm < 1e-12) throw NumericError("anchor generation produced a zero vector");
    for (auto& v : row) v /= norm;
  }
  return a;
}

inline FeatureDataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.d < 2) throw UsageError("synthetic: d must be >= 2");
  if (spec.k < 2) throw UsageError("synthetic: k must be >= 2");
  if (spec.k > 0xFFFF) throw UsageError("synthetic: k must fit in 16 bits");
  if (spec.n_per_class < 1) throw UsageError("synthetic: n_per_class must be >= 1");
  if (spec.groups < 1) throw UsageError("synthetic: groups must be >= 1");
  if (!(spec.shift >= 0.0) || !(spec.noise >= 0.0))
    throw UsageError("synthetic: shift and noise must be nonnegative");

  const std::size_t d = spec.d;
  const Matrix anchors = make_anchors(d, spec.k, spec.anchor_seed.value_or(spec.seed));

  std::normal_distribution<double> normal(0.0, 1.0);
  Rng offset_rng(mix_seed(spec.seed, 1));
  Matrix offsets(spec.groups, d);
  for (std::size_t g = 0; g < spec.groups; ++g) {
    auto row = offsets.row(g);
    for (auto& v : row) v = normal(offset_rng);
    const double norm = std::sqrt(dot(row, row));
    for (auto& v : row) v = norm > 0.0 ? spec.shift * v / norm : 0.0;
  }

  FeatureDataset ds;
  const std::size_t n = spec.groups * spec.k * spec.n_per_class;
  ds.image_features = Matrix(n, d);
  ds.labels.resize(n);
  Rng sample_rng(mix_seed(spec.seed, 2));
  const double sigma = spec.noise / std::sqrt(static_cast<double>(d));
  std::size_t i = 0;
  for (std::size_t g = 0; g < spec.groups; ++g) {
    for (std::size_t c = 0; c < spec.k; ++c) {
      for (std::size_t s = 0; s < spec.n_per_class; ++s, ++i) {
        auto row = ds.image_features.row(i);
        for (std::size_t j = 0; j < d; ++j) {
          const double v = anchors(c, j) + offsets(g, j) + sigma * normal(sample_rng);
          row[j] = static_cast<double>(static_cast<float>(v));
        }
        ds.labels[i] = static_cast<std::uint16_t>(c);
      }
    }
  }
  ds.text_features = anchors;
  for (auto& v : ds.text_features.data()) v = static_cast<double>(static_cast<float>(v));
  for (std::size_t c = 0; c < spec.k; ++c) ds.class_names.push_back("class_" + std::to_string(c));
  return ds;
}

// ---------------------------------------------------------------------------
// Partitioning
// ---------------------------------------------------------------------------

enum class PartitionPolicy { iid, dirichlet, blocks };

inline std::string_view to_string(PartitionPolicy p) {
  switch (p) {
    case PartitionPolicy::iid: return "iid";
    case PartitionPolicy::dirichlet: return "dirichlet";
    case PartitionPolicy::blocks: return "blocks";
  }
  return "?";
}

inline PartitionPolicy parse_partition_policy(std::string_view s) {
  if (s == "iid") return PartitionPolicy::iid;
  if (s == "dirichlet") return PartitionPolicy::dirichlet;
  if (s == "blocks") return PartitionPolicy::blocks;
  throw UsageError("unknown partition policy '" + std::string(s) +
                   "' (expected iid, dirichlet or blocks)");
}

struct PartitionSpec {
  std::vector<std::vector<std::size_t>> client_indices;  // each sorted ascending
  PartitionPolicy policy = PartitionPolicy::iid;
  double alpha = 0.0;  // dirichlet only
  std::uint64_t seed = 0;

  [[nodiscard]] std::size_t clients() const noexcept { return client_indices.size(); }
};

namespace detail {

// Near-equal sizes; the first n % clients sets get one extra element.
inline std::vector<std::vector<std::size_t>> chunk(const std::vector<std::size_t>& order,
                                                   std::size_t clients) {
  std::vector<std::vector<std::size_t>> out(clients);
  const std::size_t base = order.size() / clients;
  const std::size_t extra = order.size() % clients;
  std::size_t pos = 0;
  for (std::size_t c = 0; c < clients; ++c) {
    const std::size_t len = base + (c < extra ? 1 : 0);
    out[c].assign(order.begin() + static_cast<std::ptrdiff_t>(pos),
                  order.begin() + static_cast<std::ptrdiff_t>(pos + len));
    std::ranges::sort(out[c]);
    pos += len;
  }
  return out;
}

}  // namespace detail

inline PartitionSpec partition_iid(std::size_t n, std::size_t clients, std::uint64_t seed) {
  if (clients < 1) throw UsageError("partition_iid: clients must be >= 1");
  if (clients > n)
    throw UsageError("partition_iid: " + std::to_string(clients) + " clients for " +
                     std::to_string(n) + " samples");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 10));
  shuffle(order, rng);
  return {detail::chunk(order, clients), PartitionPolicy::iid, 0.0, seed};
}

/// Contiguous near-equal blocks in sample order. Pairs with grouped synthetic
/// data so that group g lands on client g.
inline PartitionSpec partition_blocks(std::size_t n, std::size_t clients) {
  if (clients < 1) throw UsageError("partition_blocks: clients must be >= 1");
  if (clients > n) throw UsageError("partition_blocks: more clients than samples");
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  return {detail::chunk(order, clients), PartitionPolicy::blocks, 0.0, 0};
}

/// Splits `total` items by `proportions` with largest-remainder rounding.
/// Ties in the fractional part go to the lower index.
inline std::vector<std::size_t> largest_remainder(std::size_t total,
                                                  std::span<const double> proportions) {
  const std::size_t m = proportions.size();
  std::vector<std::size_t> counts(m);
  std::vector<double> frac(m);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const double quota = proportions[i] * static_cast<double>(total);
    const double fl = std::floor(quota);
    counts[i] = static_cast<std::size_t>(fl);
    frac[i] = quota - fl;
    assigned += counts[i];
  }
  // Floating error can overshoot by one when the proportions sum above 1.
  while (assigned > total) {
    auto it = std::ranges::max_element(counts);
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::ranges::stable_sort(order, [&](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t r = 0; assigned < total; r = (r + 1) % m, ++assigned) ++counts[order[r]];
  return counts;
}

/// Per class, draws client proportions from Dirichlet([alpha] * clients) and
/// divides that class's (shuffled) samples accordingly.
inline PartitionSpec partition_dirichlet(std::span<const std::uint16_t> labels,
                                         std::size_t clients, double alpha,
                                         std::uint64_t seed) {
  if (!(alpha > 0.0)) throw UsageError("partition_dirichlet: alpha must be > 0");
  if (clients < 2) throw UsageError("partition_dirichlet: clients must be >= 2");

  std::size_t k = 0;
  for (auto l : labels) k = std::max<std::size_t>(k, std::size_t{l} + 1);
  std::vector<std::vector<std::size_t>> by_class(k);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class[labels[i]].push_back(i);

  Rng rng(mix_seed(seed, 11));
  std::gamma_distribution<double> gamma(alpha, 1.0);
  PartitionSpec out{std::vector<std::vector<std::size_t>>(clients), PartitionPolicy::dirichlet,
                    alpha, seed};
  std::vector<double> p(clients);
  for (auto& members : by_class) {
    shuffle(members, rng);
    double sum = 0.0;
    for (auto& v : p) sum += (v = gamma(rng));
    if (sum > 0.0) {
      for (auto& v : p) v /= sum;
    } else {
      // Every draw underflowed (tiny alpha): the whole class goes to one client.
      std::ranges::fill(p, 0.0);
      p[uniform_index(rng, clients)] = 1.0;
    }
    const auto counts = largest_remainder(members.size(), p);
    std::size_t pos = 0;
    for (std::size_t c = 0; c < clients; ++c) {
      for (std::size_t j = 0; j < counts[c]; ++j) out.client_indices[c].push_back(members[pos++]);
    }
  }
  for (auto& idx : out.client_indices) std::ranges::sort(idx);
  return out;
}

// ---------------------------------------------------------------------------
// 8:1:1 split
// ---------------------------------------------------------------------------

struct SplitSpec {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
  std::vector<std::size_t> test;
};

/// Shuffles then splits: |train| = round(0.8 n); the remainder goes to val
/// first, then test (val gets the extra one when the remainder is odd).
inline SplitSpec split_8_1_1(std::span<const std::size_t> indices, std::uint64_t seed) {
  if (indices.size() < 3)
    throw DataError("split_8_1_1: need at least 3 indices, got " + std::to_string(indices.size()));
  std::vector<std::size_t> order(indices.begin(), indices.end());
  Rng rng(mix_seed(seed, 12));
  shuffle(order, rng);
  const std::size_t n = order.size();
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
  const std::size_t rest = n - n_train;
  const std::size_t n_val = (rest + 1) / 2;
  SplitSpec s;
  s.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  s.val.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train),
               order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
  s.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), order.end());
  return s;
}

}  // namespace facmic
