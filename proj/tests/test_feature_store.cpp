#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "facmic/feature_store.hpp"
#include "facmic/losses.hpp"

namespace fs = std::filesystem;
using namespace facmic;

namespace {

fs::path temp_path(const std::string& name) {
  const auto dir = fs::temp_directory_path() / "facmic_tests";
  fs::create_directories(dir);
  return dir / (name + "_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) +
                "_" + ::testing::UnitTest::GetInstance()->current_test_info()->name());
}

FeatureDataset tiny_dataset() {
  FeatureDataset ds;
  ds.image_features = Matrix(2, 4);
  ds.image_features.data() = {0.5, -1.25, 3.0, 0.0, 1.0, 2.0, -0.125, 7.5};
  ds.labels = {0, 1};
  ds.text_features = Matrix(2, 4);
  ds.text_features.data() = {1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0};
  ds.class_names = {"glioma", "pituitary"};
  return ds;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void check_disjoint_cover(const PartitionSpec& p, std::size_t n) {
  std::vector<int> seen(n, 0);
  for (const auto& idx : p.client_indices)
    for (auto i : idx) {
      ASSERT_LT(i, n);
      ++seen[i];
    }
  for (std::size_t i = 0; i < n; ++i) ASSERT_EQ(seen[i], 1) << "index " << i;
}

}  // namespace

// --- file format -----------------------------------------------------------

TEST(DatasetFile, RoundTripReproducesBytes) {
  const auto ds = tiny_dataset();
  const auto a = temp_path("a"), b = temp_path("b");
  save_dataset(ds, a);
  const auto loaded = load_dataset(a);
  EXPECT_EQ(loaded, ds);
  save_dataset(loaded, b);
  EXPECT_EQ(slurp(a), slurp(b));
}

TEST(DatasetFile, HeaderLayoutIsLittleEndianWithoutPadding) {
  const auto bytes = encode_dataset(tiny_dataset());
  // 4 magic + 4*4 header + 2*4*4 features + 2*2 labels + 2*4*4 text + (2+6)+(2+9) names
  EXPECT_EQ(bytes.size(), 4u + 16u + 32u + 4u + 32u + 8u + 11u);
  EXPECT_EQ(bytes.substr(0, 4), "FACM");
  auto u32_at = [&](std::size_t off) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= std::uint32_t(static_cast<std::uint8_t>(bytes[off + i])) << (8 * i);
    return v;
  };
  EXPECT_EQ(u32_at(4), 1u);
  EXPECT_EQ(u32_at(8), 2u);
  EXPECT_EQ(u32_at(12), 4u);
  EXPECT_EQ(u32_at(16), 2u);
  // first feature 0.5f = 0x3F000000
  EXPECT_EQ(u32_at(20), 0x3F000000u);
  // labels start after 8 floats
  EXPECT_EQ(static_cast<std::uint8_t>(bytes[52]), 0);
  EXPECT_EQ(static_cast<std::uint8_t>(bytes[54]), 1);
  // first class-name record: length 6 then "glioma"
  EXPECT_EQ(static_cast<std::uint8_t>(bytes[88]), 6);
  EXPECT_EQ(bytes.substr(90, 6), "glioma");
}

TEST(DatasetFile, LabelEqualToKIsRejectedBeforeWrite) {
  auto ds = tiny_dataset();
  ds.labels[1] = 2;
  const auto p = temp_path("badlabel");
  fs::remove(p);
  EXPECT_THROW(save_dataset(ds, p), DataError);
  EXPECT_FALSE(fs::exists(p));
}

TEST(DatasetFile, ZeroTextRowIsRejected) {
  auto ds = tiny_dataset();
  for (auto& v : ds.text_features.row(1)) v = 0.0;
  EXPECT_THROW(encode_dataset(ds), DataError);
}

TEST(DatasetFile, EmptyDatasetIsValid) {
  auto ds = tiny_dataset();
  ds.image_features = Matrix(0, 4);
  ds.labels.clear();
  const auto p = temp_path("empty");
  save_dataset(ds, p);
  const auto loaded = load_dataset(p);
  EXPECT_EQ(loaded.n(), 0u);
  EXPECT_EQ(loaded.d(), 4u);
  EXPECT_EQ(loaded.k(), 2u);
}

TEST(DatasetFile, CorruptedMagicIsReported) {
  auto bytes = encode_dataset(tiny_dataset());
  bytes[0] = 'X';
  try {
    decode_dataset(bytes);
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("bad magic"), std::string::npos);
  }
}

TEST(DatasetFile, UnsupportedVersionIsReported) {
  auto bytes = encode_dataset(tiny_dataset());
  bytes[4] = 2;
  try {
    decode_dataset(bytes);
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
}

TEST(DatasetFile, MissingRowIsTruncatedPayload) {
  SyntheticSpec s;
  s.d = 3;
  s.k = 2;
  s.n_per_class = 5;
  auto bytes = encode_dataset(generate_synthetic(s));  // N = 10
  // Drop one feature row (3 floats) from the feature block, keep the rest.
  bytes.erase(20 + 9 * 3 * 4, 3 * 4);
  try {
    decode_dataset(bytes);
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("truncated payload"), std::string::npos) << e.what();
  }
}

TEST(DatasetFile, UnlabeledFlagRejectedByLabeledLoader) {
  auto ds = tiny_dataset();
  ds.unlabeled = true;
  const auto p = temp_path("pool");
  save_dataset(ds, p);
  EXPECT_THROW(load_dataset(p), DataError);
  const auto pool = load_any_dataset(p);
  EXPECT_TRUE(pool.unlabeled);
  EXPECT_EQ(pool.image_features, ds.image_features);
  EXPECT_EQ(pool.labels, (std::vector<std::uint16_t>{0, 0}));
}

TEST(DatasetFile, MissingFileNamesPath) {
  try {
    load_dataset("/nonexistent/dir/x.facm");
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("/nonexistent/dir/x.facm"), std::string::npos);
  }
}

TEST(DatasetFile, SaveLoadIsIdentityOnRandomSyntheticData) {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    SyntheticSpec s;
    s.d = 2 + seed % 7;
    s.k = 2 + seed % 4;
    s.n_per_class = 1 + seed;
    s.shift = 0.3 * static_cast<double>(seed % 3);
    s.groups = 1 + seed % 2;
    s.seed = seed;
    const auto ds = generate_synthetic(s);
    EXPECT_EQ(decode_dataset(encode_dataset(ds)), ds) << "seed " << seed;
  }
}

// --- synthetic generator ---------------------------------------------------

TEST(Synthetic, SameSeedIsBitIdentical) {
  SyntheticSpec s;
  s.seed = 7;
  EXPECT_EQ(encode_dataset(generate_synthetic(s)), encode_dataset(generate_synthetic(s)));
  auto t = s;
  t.seed = 8;
  EXPECT_NE(generate_synthetic(s).image_features, generate_synthetic(t).image_features);
}

TEST(Synthetic, SmallestDataset) {
  SyntheticSpec s;
  s.d = 4;
  s.k = 2;
  s.n_per_class = 1;
  const auto ds = generate_synthetic(s);
  EXPECT_EQ(ds.n(), 2u);
  EXPECT_EQ(std::set<std::uint16_t>(ds.labels.begin(), ds.labels.end()),
            (std::set<std::uint16_t>{0, 1}));
}

TEST(Synthetic, InvalidSizesRejected) {
  SyntheticSpec s;
  s.k = 1;
  EXPECT_THROW(generate_synthetic(s), UsageError);
  s = {};
  s.d = 1;
  EXPECT_THROW(generate_synthetic(s), UsageError);
  s = {};
  s.n_per_class = 0;
  EXPECT_THROW(generate_synthetic(s), UsageError);
}

TEST(Synthetic, AnchorsAreOrthonormalTextFeatures) {
  SyntheticSpec s;
  s.d = 16;
  s.k = 5;
  const auto ds = generate_synthetic(s);
  for (std::size_t a = 0; a < 5; ++a)
    for (std::size_t b = 0; b < 5; ++b)
      EXPECT_NEAR(dot(ds.text_features.row(a), ds.text_features.row(b)), a == b ? 1.0 : 0.0, 1e-6);
}

TEST(Synthetic, NearestAnchorAccuracyRegression) {
  SyntheticSpec s;
  s.d = 32;
  s.k = 4;
  s.n_per_class = 2000;
  s.noise = 1.5;
  s.seed = 7;
  const auto ds = generate_synthetic(s);
  // Oracle: brute-force argmax of cosine similarity to each class anchor.
  std::size_t hits = 0;
  for (std::size_t i = 0; i < ds.n(); ++i) {
    const auto x = ds.image_features.row(i);
    std::size_t best = 0;
    double best_cos = -2.0;
    for (std::size_t c = 0; c < ds.k(); ++c) {
      const auto t = ds.text_features.row(c);
      const double cs = dot(x, t) / std::sqrt(dot(x, x) * dot(t, t));
      if (cs > best_cos) best_cos = cs, best = c;
    }
    hits += best == ds.labels[i];
  }
  EXPECT_GT(static_cast<double>(hits) / static_cast<double>(ds.n()), 0.95);
  EXPECT_EQ(hits, 7916u);  // frozen from the first verified run
}

TEST(Synthetic, GroupsGetDistinctOffsets) {
  SyntheticSpec s;
  s.d = 8;
  s.k = 2;
  s.n_per_class = 400;
  s.groups = 2;
  s.shift = 1.0;
  s.noise = 0.1;
  const auto ds = generate_synthetic(s);
  std::vector<double> mean0(8, 0.0), mean1(8, 0.0);
  const std::size_t per_group = 800;
  for (std::size_t i = 0; i < per_group; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      mean0[j] += ds.image_features(i, j) / per_group;
      mean1[j] += ds.image_features(per_group + i, j) / per_group;
    }
  // Same class mix in both groups, so the mean difference is the offset difference.
  const double dist = std::sqrt(squared_distance(mean0, mean1));
  EXPECT_GT(dist, 0.1);
  EXPECT_LT(dist, 2.0 + 1e-6);
}

// --- partitioning ----------------------------------------------------------

TEST(PartitionIid, BrainTumorSizedSplit) {
  const auto p = partition_iid(2868, 3, 0);
  ASSERT_EQ(p.clients(), 3u);
  for (const auto& idx : p.client_indices) EXPECT_EQ(idx.size(), 956u);
  check_disjoint_cover(p, 2868);
}

TEST(PartitionIid, SizesDifferByAtMostOne) {
  const auto p = partition_iid(5, 2, 3);
  EXPECT_EQ(p.client_indices[0].size(), 3u);
  EXPECT_EQ(p.client_indices[1].size(), 2u);
  const auto one = partition_iid(4, 1, 3);
  EXPECT_EQ(one.client_indices[0], (std::vector<std::size_t>{0, 1, 2, 3}));
}

TEST(PartitionIid, MoreClientsThanSamplesIsAnError) {
  EXPECT_THROW(partition_iid(2, 3, 0), UsageError);
  EXPECT_THROW(partition_iid(5, 0, 0), UsageError);
}

TEST(PartitionIid, DisjointCoverProperty) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng() % 300;
    const std::size_t clients = 1 + rng() % std::min<std::size_t>(n, 10);
    const auto p = partition_iid(n, clients, rng());
    check_disjoint_cover(p, n);
    std::size_t lo = n, hi = 0;
    for (const auto& idx : p.client_indices) {
      lo = std::min(lo, idx.size());
      hi = std::max(hi, idx.size());
    }
    EXPECT_LE(hi - lo, 1u);
  }
}

TEST(LargestRemainder, PreservesTotalsAndFavoursLargestFractions) {
  const std::vector<double> p{0.5, 0.3, 0.2};
  EXPECT_EQ(largest_remainder(10, p), (std::vector<std::size_t>{5, 3, 2}));
  // quotas 3.5, 2.1, 1.4 -> floors 3,2,1 (6), one extra to the 0.5 remainder
  EXPECT_EQ(largest_remainder(7, p), (std::vector<std::size_t>{4, 2, 1}));
  const std::vector<double> even{0.5, 0.5};
  EXPECT_EQ(largest_remainder(3, even), (std::vector<std::size_t>{2, 1}));
}

TEST(PartitionDirichlet, BrainTumorTotalIsConserved) {
  // 2870 training images over four classes.
  std::vector<std::uint16_t> labels;
  const std::size_t counts[] = {826, 822, 395, 827};
  for (std::uint16_t c = 0; c < 4; ++c) labels.insert(labels.end(), counts[c], c);
  ASSERT_EQ(labels.size(), 2075u + 389u + 406u);
  const auto p = partition_dirichlet(labels, 3, 0.3, 42);
  std::size_t total = 0;
  for (const auto& idx : p.client_indices) total += idx.size();
  EXPECT_EQ(total, 2870u);
  check_disjoint_cover(p, labels.size());
}

TEST(PartitionDirichlet, HugeAlphaIsNearlyEqual) {
  std::vector<std::uint16_t> labels;
  for (std::uint16_t c = 0; c < 4; ++c) labels.insert(labels.end(), 300, c);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto p = partition_dirichlet(labels, 3, 1e6, seed);
    for (const auto& idx : p.client_indices) {
      std::vector<int> per_class(4, 0);
      for (auto i : idx) ++per_class[labels[i]];
      for (int c = 0; c < 4; ++c) EXPECT_NEAR(per_class[c], 100, 2) << "seed " << seed;
    }
  }
}

TEST(PartitionDirichlet, SingleClassIsConserved) {
  const std::vector<std::uint16_t> labels(57, 0);
  const auto p = partition_dirichlet(labels, 2, 0.3, 9);
  EXPECT_EQ(p.client_indices[0].size() + p.client_indices[1].size(), 57u);
  check_disjoint_cover(p, 57);
}

TEST(PartitionDirichlet, PreconditionsChecked) {
  const std::vector<std::uint16_t> labels{0, 1, 0, 1};
  EXPECT_THROW(partition_dirichlet(labels, 1, 0.3, 0), UsageError);
  EXPECT_THROW(partition_dirichlet(labels, 2, 0.0, 0), UsageError);
  EXPECT_THROW(partition_dirichlet(labels, 2, -1.0, 0), UsageError);
}

TEST(PartitionDirichlet, PerClassConservationProperty) {
  std::mt19937_64 rng(2024);
  for (double alpha : {0.3, 0.6, 0.9}) {
    for (int trial = 0; trial < 60; ++trial) {
      const std::size_t k = 1 + rng() % 9;
      const std::size_t n = 1 + rng() % 500;
      std::vector<std::uint16_t> labels(n);
      for (auto& l : labels) l = static_cast<std::uint16_t>(rng() % k);
      const std::size_t clients = 2 + rng() % 5;
      const auto p = partition_dirichlet(labels, clients, alpha, rng());
      check_disjoint_cover(p, n);
      std::vector<std::size_t> expected(k, 0), got(k, 0);
      for (auto l : labels) ++expected[l];
      for (const auto& idx : p.client_indices)
        for (auto i : idx) ++got[labels[i]];
      EXPECT_EQ(got, expected);
    }
  }
}

TEST(PartitionDirichlet, SmallAlphaIsSkewed) {
  std::vector<std::uint16_t> labels;
  for (std::uint16_t c = 0; c < 4; ++c) labels.insert(labels.end(), 500, c);
  const auto skewed = partition_dirichlet(labels, 3, 0.3, 5);
  const auto flat = partition_dirichlet(labels, 3, 1e6, 5);
  auto spread = [](const PartitionSpec& p) {
    std::size_t lo = SIZE_MAX, hi = 0;
    for (const auto& idx : p.client_indices) {
      lo = std::min(lo, idx.size());
      hi = std::max(hi, idx.size());
    }
    return hi - lo;
  };
  EXPECT_GT(spread(skewed), spread(flat));
}

TEST(PartitionBlocks, ContiguousRanges) {
  const auto p = partition_blocks(7, 3);
  EXPECT_EQ(p.client_indices[0], (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_EQ(p.client_indices[1], (std::vector<std::size_t>{3, 4}));
  EXPECT_EQ(p.client_indices[2], (std::vector<std::size_t>{5, 6}));
}

// --- 8:1:1 split -----------------------------------------------------------

namespace {
std::vector<std::size_t> iota_vec(std::size_t n, std::size_t start = 0) {
  std::vector<std::size_t> v(n);
  std::iota(v.begin(), v.end(), start);
  return v;
}
}  // namespace

TEST(Split811, ExactRatios) {
  auto s = split_8_1_1(iota_vec(10), 0);
  EXPECT_EQ(s.train.size(), 8u);
  EXPECT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
  s = split_8_1_1(iota_vec(100), 0);
  EXPECT_EQ(s.train.size(), 80u);
  EXPECT_EQ(s.val.size(), 10u);
  EXPECT_EQ(s.test.size(), 10u);
}

TEST(Split811, RemainderGoesToValFirst) {
  // round(8.8) = 9 train, remainder 2 -> 1 val, 1 test
  auto s = split_8_1_1(iota_vec(11), 0);
  EXPECT_EQ(s.train.size(), 9u);
  EXPECT_EQ(s.val.size(), 1u);
  EXPECT_EQ(s.test.size(), 1u);
  // round(10.4) = 10 train, remainder 3 -> 2 val, 1 test
  s = split_8_1_1(iota_vec(13), 0);
  EXPECT_EQ(s.train.size(), 10u);
  EXPECT_EQ(s.val.size(), 2u);
  EXPECT_EQ(s.test.size(), 1u);
}

TEST(Split811, TooFewIndices) { EXPECT_THROW(split_8_1_1(iota_vec(2), 0), DataError); }

TEST(Split811, DisjointUnionAndDeterministic) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto idx = iota_vec(3 + rng() % 400, 1000);
    const auto seed = rng();
    const auto s = split_8_1_1(idx, seed);
    std::vector<std::size_t> all;
    all.insert(all.end(), s.train.begin(), s.train.end());
    all.insert(all.end(), s.val.begin(), s.val.end());
    all.insert(all.end(), s.test.begin(), s.test.end());
    std::ranges::sort(all);
    EXPECT_EQ(all, idx);
    EXPECT_EQ(s.train.size(),
              static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(idx.size()))));
    const auto again = split_8_1_1(idx, seed);
    EXPECT_EQ(again.train, s.train);
    EXPECT_EQ(again.test, s.test);
  }
}
