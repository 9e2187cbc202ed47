#include <numeric>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace mfa;
using mfa::testing::ScratchDir;

namespace {

const std::vector<int> kBoth{3, 4};

SyntheticData make(std::uint64_t seed = 1, std::size_t classes = 3, std::size_t shots = 4) {
  SyntheticSpec s;
  s.n_classes = classes;
  s.shots = shots;
  s.test_per_class = 2;
  s.geometry = {{3, {2, 5, 5}}, {4, {3, 4, 4}}};
  s.embed_dim = 6;
  s.seed = seed;
  return generate_synthetic(s);
}

std::vector<std::size_t> support_of(const SyntheticData& d) {
  return sample_episode(d.bundle, d.manifest, {d.bundle.items.size() / d.bundle.n_classes() >= 4 ? 4u : 1u, 1})
      .support;
}

/// Bundle with 1-channel 3×3 maps and hand-chosen items.
FeatureBundle tiny(const std::vector<std::size_t>& labels, std::size_t n) {
  FeatureBundle b;
  b.embed_dim = 2;
  b.geometry = {{3, {1, 3, 3}}};
  for (std::size_t c = 0; c < n; ++c) b.class_names.push_back("k" + std::to_string(c));
  b.text_features = Tensor({n, 2}, 1.0f);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    BundleItem it;
    it.item_id = "i" + std::to_string(i);
    it.label = labels[i];
    Tensor m({1, 3, 3});
    for (std::size_t k = 0; k < 9; ++k) m[k] = static_cast<float>((k * (i + 2)) % 7);
    it.features.low_maps[3] = m;
    it.features.high = Tensor({2}, std::vector<float>{1.0f, static_cast<float>(i)});
    b.items.push_back(it);
  }
  return b;
}

}  // namespace

TEST(Cache, ShapesOnTinyMaps) {
  const auto b = tiny({0, 1}, 2);
  const std::vector<std::size_t> sup{0, 1};
  const std::vector<int> l3{3};
  const auto c = build_cache<float>(b, sup, 2, l3);
  EXPECT_EQ(c.local.layer(3).shape(), (Shape{2, 10}));
  EXPECT_EQ(c.local.per_scale_widths.at(3), (std::vector<std::size_t>{4, 1}));
  EXPECT_EQ(c.local.channels.at(3), 4u);
  EXPECT_EQ(c.global.high_features.shape(), (Shape{2, 2}));
  EXPECT_EQ(c.global.text_features.shape(), (Shape{2, 2}));
}

TEST(Cache, RowsMatchInductionOfEachItem) {
  const auto d = make();
  const auto sup = support_of(d);
  const auto c = build_cache<float>(d.bundle, sup, 2, kBoth);
  for (std::size_t r = 0; r < c.local.rows(); ++r) {
    const auto& item = d.bundle.items[c.local.support_index[r]];
    for (int layer : kBoth) {
      const auto& m = item.features.low_maps.at(layer);
      const auto unit = induce_mf_unit(build_meta_feature(m.reshaped({1, m.dim(0), m.dim(1), m.dim(2)}), 2));
      const auto expected = l2_normalize_rows(unit.values.reshaped({1, unit.values.size()}));
      const auto row = c.local.layer(layer).row(r);
      ASSERT_EQ(row.size(), expected.size());
      for (std::size_t j = 0; j < row.size(); ++j) EXPECT_EQ(row[j], expected[j]);
    }
  }
}

TEST(Cache, OneHotFromLabels) {
  const std::vector<std::size_t> labels{0, 1, 1, 0};
  EXPECT_EQ(one_hot<float>(labels, 2), Tensor::matrix({{1, 0}, {0, 1}, {0, 1}, {1, 0}}));
  const std::vector<std::size_t> bad{2};
  EXPECT_THROW(one_hot<float>(bad, 2), IndexError);
}

TEST(Cache, ClassMajorRowsAndUnitNorms) {
  const auto d = make();
  const auto c = build_cache<float>(d.bundle, support_of(d), 2, kBoth);
  const auto labels = c.local.row_labels();
  EXPECT_TRUE(std::is_sorted(labels.begin(), labels.end()));
  for (std::size_t r = 0; r < c.local.rows(); ++r) {
    float total = 0;
    for (float v : c.local.labels_onehot.row(r)) total += v;
    EXPECT_EQ(total, 1.0f);
    EXPECT_EQ(labels[r], d.bundle.items[c.local.support_index[r]].label);
    for (int layer : kBoth) {
      double s = 0;
      for (float v : c.local.layer(layer).row(r)) s += double(v) * v;
      EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
    }
    double s = 0;
    for (float v : c.global.high_features.row(r)) s += double(v) * v;
    EXPECT_NEAR(std::sqrt(s), 1.0, 1e-6);
  }
}

TEST(Cache, DuplicateSupportItemsGiveIdenticalRows) {
  auto b = tiny({0, 0, 1, 1}, 2);
  b.items[1].features = b.items[0].features;
  const std::vector<std::size_t> sup{0, 1, 2, 3};
  const std::vector<int> l3{3};
  const auto c = build_cache<float>(b, sup, 2, l3);
  EXPECT_TRUE(std::equal(c.local.layer(3).row(0).begin(), c.local.layer(3).row(0).end(),
                         c.local.layer(3).row(1).begin()));
}

TEST(Cache, Deterministic) {
  const auto d = make();
  const auto a = build_cache<float>(d.bundle, support_of(d), 2, kBoth);
  const auto b = build_cache<float>(d.bundle, support_of(d), 2, kBoth);
  EXPECT_EQ(a, b);
  EXPECT_EQ(cache_checksum(a), cache_checksum(b));
  EXPECT_EQ(serialize_cache(a), serialize_cache(b));
}

TEST(Cache, ClassPermutationPermutesOneHotColumns) {
  const auto d = make();
  const auto sup = support_of(d);
  const std::vector<std::size_t> pi{2, 0, 1};  // old class c becomes pi[c]
  FeatureBundle p = d.bundle;
  for (auto& item : p.items) item.label = pi[item.label];
  for (std::size_t c = 0; c < 3; ++c) {
    p.class_names[pi[c]] = d.bundle.class_names[c];
    std::copy(d.bundle.text_features.row(c).begin(), d.bundle.text_features.row(c).end(),
              p.text_features.row(pi[c]).begin());
  }
  const auto a = build_cache<float>(d.bundle, sup, 2, kBoth);
  const auto b = build_cache<float>(p, sup, 2, kBoth);
  // Row order is class-major, so rows move with their item; compare per item.
  for (std::size_t rb = 0; rb < b.local.rows(); ++rb) {
    const std::size_t item = b.local.support_index[rb];
    const std::size_t ra = std::find(a.local.support_index.begin(), a.local.support_index.end(), item) -
                           a.local.support_index.begin();
    ASSERT_LT(ra, a.local.rows());
    for (int layer : kBoth) {
      EXPECT_TRUE(std::equal(a.local.layer(layer).row(ra).begin(), a.local.layer(layer).row(ra).end(),
                             b.local.layer(layer).row(rb).begin()));
    }
    for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(a.local.labels_onehot.at(ra, c), b.local.labels_onehot.at(rb, pi[c]));
  }
}

TEST(Cache, UnbalancedShotsListCounts) {
  const auto d = make();
  auto sup = support_of(d);
  sup.pop_back();
  try {
    build_cache<float>(d.bundle, sup, 2, kBoth);
    FAIL();
  } catch (const ValidationError& e) {
    EXPECT_NE(std::string(e.what()).find("class_2=3"), std::string::npos) << e.what();
  }
}

TEST(Cache, MissingOrRepeatedLayer) {
  auto d = make();
  const auto sup = support_of(d);
  d.bundle.geometry.erase(4);
  for (auto& item : d.bundle.items) item.features.low_maps.erase(4);
  EXPECT_THROW(build_cache<float>(d.bundle, sup, 2, kBoth), ValidationError);
  const std::vector<int> twice{3, 3};
  EXPECT_THROW(build_cache<float>(d.bundle, sup, 2, twice), ValidationError);
}

TEST(Cache, ScaleTooLargeForMapIsGeometryError) {
  const auto d = make();
  EXPECT_THROW(build_cache<float>(d.bundle, support_of(d), 4, kBoth), GeometryError);
}

TEST(CacheFile, RoundTripBitExact) {
  const auto d = make();
  const auto c = build_cache<float>(d.bundle, support_of(d), 2, kBoth);
  const auto bytes = serialize_cache(c);
  const auto back = deserialize_cache(bytes);
  EXPECT_EQ(back, c);
  ScratchDir dir("cache");
  write_cache(c, dir / "c.mfuc");
  EXPECT_EQ(read_cache(dir / "c.mfuc"), c);
}

TEST(CacheFile, CorruptMagicVersionAndTruncation) {
  const auto d = make();
  const auto bytes = serialize_cache(build_cache<float>(d.bundle, support_of(d), 2, kBoth));
  auto bad = bytes;
  bad[1] = 'X';
  EXPECT_THROW(deserialize_cache(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  EXPECT_THROW(deserialize_cache(bad), FormatError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{20}, bytes.size() / 2, bytes.size() - 1}) {
    io::Bytes t(bytes.begin(), bytes.begin() + static_cast<std::ptrdiff_t>(cut));
    EXPECT_THROW(deserialize_cache(t), FormatError) << cut;
  }
  bad = bytes;
  bad.push_back(0);
  EXPECT_THROW(deserialize_cache(bad), FormatError);
}

TEST(CacheFile, FuzzedBytesOnlyRaiseFormatErrors) {
  const auto d = make();
  const auto bytes = serialize_cache(build_cache<float>(d.bundle, support_of(d), 2, kBoth));
  Rng rng(3);
  std::uniform_int_distribution<std::size_t> pos(0, bytes.size() - 1);
  for (int trial = 0; trial < 300; ++trial) {
    auto m = bytes;
    m[pos(rng)] ^= static_cast<std::uint8_t>(1u << (trial % 8));
    try {
      deserialize_cache(m);
    } catch (const FormatError&) {
    } catch (const std::exception& e) {
      FAIL() << e.what();
    }
  }
}

TEST(CacheFile, WrongScaleQueryIsDimensionError) {
  const auto d = make();
  const auto c = deserialize_cache(serialize_cache(build_cache<float>(d.bundle, support_of(d), 2, kBoth)));
  const auto& m = d.bundle.items[0].features.low_maps.at(3);
  const auto q = induce_mf_unit(build_meta_feature(m.reshaped({1, m.dim(0), m.dim(1), m.dim(2)}), 3));
  EXPECT_THROW(local_logits(q.values, c.local, 3), DimensionError);
}

TEST(CacheFile, ChecksumTracksContent) {
  const auto d = make();
  auto c = build_cache<float>(d.bundle, support_of(d), 2, kBoth);
  const auto before = cache_checksum(c);
  c.global.high_features[0] += 1e-3f;
  EXPECT_NE(cache_checksum(c), before);
}
