#include <fstream>
#include <map>
#include <set>

#include <boost/math/distributions/chi_squared.hpp>

#include "doctest.h"
#include "ssda/error.hpp"
#include "ssda/pretext.hpp"
#include "support.hpp"

using namespace ssda;
using ssda::testing::random_image;
using ssda::testing::small_spec;
using ssda::testing::TempDir;

namespace {

// Counter-clockwise quarter turn by explicit coordinate mapping:
// the pixel at (y, x) moves to (w - 1 - x, y).
Image quarter_turn_oracle(const Image& in) {
  Image out(in.width, in.height, in.channels);
  for (int y = 0; y < in.height; ++y)
    for (int x = 0; x < in.width; ++x)
      for (int c = 0; c < in.channels; ++c) out.at(in.width - 1 - x, y, c) = in.at(y, x, c);
  return out;
}

Image labelled_2x2() {
  Image img(2, 2, 1);
  img.at(0, 0, 0) = 0.1;  // a
  img.at(0, 1, 0) = 0.2;  // b
  img.at(1, 0, 0) = 0.3;  // c
  img.at(1, 1, 0) = 0.4;  // d
  return img;
}

Dataset image_dataset(int count, int size, Domain domain, std::uint64_t seed) {
  Dataset ds;
  ds.domain = domain;
  ds.num_classes = 4;
  for (int i = 0; i < count; ++i) {
    LabeledSample s;
    s.image = random_image(size, size, 3, seed + i);
    s.class_id = i % 4;
    s.domain = domain;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

}  // namespace

TEST_CASE("rotate90 identity, inverse and four-fold composition") {
  const Image img = random_image(6, 6, 3, 1);
  CHECK(rotate90(img, 0) == img);
  CHECK(rotate90(rotate90(img, 1), 3) == img);
  CHECK(rotate90(rotate90(img, 3), 1) == img);
  CHECK(rotate90(rotate90(rotate90(rotate90(img, 1), 1), 1), 1) == img);
  CHECK(rotate90(rotate90(img, 1), 1) == rotate90(img, 2));
}

TEST_CASE("rotate90 matches the coordinate-mapping oracle") {
  const Image img = random_image(5, 5, 2, 2);
  Image expected = img;
  for (int r = 0; r < 4; ++r) {
    CHECK(rotate90(img, r) == expected);
    expected = quarter_turn_oracle(expected);
  }
}

TEST_CASE("rotate90 by two on a 2x2 image") {
  const Image out = rotate90(labelled_2x2(), 2);
  CHECK(out.at(0, 0, 0) == 0.4);
  CHECK(out.at(0, 1, 0) == 0.3);
  CHECK(out.at(1, 0, 0) == 0.2);
  CHECK(out.at(1, 1, 0) == 0.1);
}

TEST_CASE("rotate90 permutes pixels") {
  const Image img = random_image(7, 7, 3, 3);
  for (int r = 0; r < 4; ++r) {
    auto a = img.pixels, b = rotate90(img, r).pixels;
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    CHECK(a == b);
  }
}

TEST_CASE("rotate90 rejects odd turns of non-square images") {
  const Image img = random_image(4, 6, 3, 4);
  CHECK_THROWS_AS(rotate90(img, 1), ShapeError);
  CHECK_THROWS_AS(rotate90(img, 3), ShapeError);
  CHECK(rotate90(rotate90(img, 2), 2) == img);
}

TEST_CASE("crop_random covers the full image when size equals the side") {
  const Image img = random_image(8, 8, 3, 5);
  for (std::uint64_t s = 0; s < 5; ++s) {
    Rng rng(s);
    CHECK(crop_random(img, 8, rng) == img);
  }
  Rng rng(0);
  CHECK_THROWS_AS(crop_random(img, 9, rng), ShapeError);
}

TEST_CASE("crop_random is deterministic per rng state") {
  const Image img = random_image(12, 12, 3, 6);
  Rng a(42), b(42);
  int ta = 0, la = 0, tb = 0, lb = 0;
  CHECK(crop_random(img, 5, a, &ta, &la) == crop_random(img, 5, b, &tb, &lb));
  CHECK(ta == tb);
  CHECK(la == lb);
  const Image next = crop_random(img, 5, a, &ta, &la);
  CHECK(next == crop(img, ta, la, 5, 5));
}

TEST_CASE("crop_random top-left positions are uniform") {
  const Image img = random_image(8, 8, 1, 7);
  Rng rng(2024);
  std::map<std::pair<int, int>, int> counts;
  const int draws = 1000;
  for (int i = 0; i < draws; ++i) {
    int top = -1, left = -1;
    crop_random(img, 4, rng, &top, &left);
    REQUIRE(top >= 0);
    REQUIRE(top <= 4);
    REQUIRE(left >= 0);
    REQUIRE(left <= 4);
    ++counts[{top, left}];
  }
  CHECK(counts.size() == 25);
  const double expected = draws / 25.0;
  double chi2 = 0.0;
  for (int t = 0; t < 5; ++t)
    for (int l = 0; l < 5; ++l) {
      const double d = counts[{t, l}] - expected;
      chi2 += d * d / expected;
    }
  const double p = boost::math::cdf(boost::math::complement(boost::math::chi_squared(24), chi2));
  CHECK(p > 0.01);
}

TEST_CASE("split_quadrants tiles the image") {
  const Image img = random_image(4, 4, 3, 8);
  const auto q = split_quadrants(img);
  for (const auto& r : q) {
    CHECK(r.height == 2);
    CHECK(r.width == 2);
  }
  CHECK(q[1] == crop(img, 0, 2, 2, 2));
  CHECK(q[2] == crop(img, 2, 0, 2, 2));
  std::vector<double> all;
  for (const auto& r : q) all.insert(all.end(), r.pixels.begin(), r.pixels.end());
  auto orig = img.pixels;
  std::sort(all.begin(), all.end());
  std::sort(orig.begin(), orig.end());
  CHECK(all == orig);

  const auto small = split_quadrants(labelled_2x2());
  CHECK(small[0].height == 1);
  CHECK(small[0].at(0, 0, 0) == 0.1);
  CHECK(small[3].at(0, 0, 0) == 0.4);
}

TEST_CASE("split_quadrants sends odd remainders to the lower and right regions") {
  const auto q = split_quadrants(random_image(5, 6, 1, 9));
  const std::vector<std::pair<int, int>> expected{{2, 3}, {2, 3}, {3, 3}, {3, 3}};
  for (int i = 0; i < 4; ++i) {
    CHECK(q[i].height == expected[i].first);
    CHECK(q[i].width == expected[i].second);
  }
}

TEST_CASE("rot samples expand one crop into four rotations") {
  const Image img = random_image(16, 16, 3, 10);
  PretextConfig cfg{PretextMode::rot, 8, true};
  Rng rng(3);
  const auto samples = make_pretext_samples(img, Domain::target, cfg, rng);
  REQUIRE(samples.size() == 4);
  std::set<int> labels;
  const Image base = crop(img, samples[0].crop_y, samples[0].crop_x, 8, 8);
  for (const auto& s : samples) {
    labels.insert(s.label);
    CHECK(s.rotation == s.label);
    CHECK(s.crop_y == samples[0].crop_y);
    CHECK(s.crop_x == samples[0].crop_x);
    CHECK(s.patch == rotate90(base, s.label));
    CHECK_FALSE(s.region.has_value());
  }
  CHECK(labels == std::set<int>{0, 1, 2, 3});
}

TEST_CASE("rot without expansion yields one randomly rotated sample") {
  const Image img = random_image(16, 16, 3, 11);
  PretextConfig cfg{PretextMode::rot, 8, false};
  std::set<int> seen;
  for (std::uint64_t s = 0; s < 40; ++s) {
    Rng rng(s);
    const auto samples = make_pretext_samples(img, Domain::target, cfg, rng);
    REQUIRE(samples.size() == 1);
    CHECK(samples[0].patch == rotate90(crop(img, samples[0].crop_y, samples[0].crop_x, 8, 8), samples[0].label));
    seen.insert(samples[0].label);
  }
  CHECK(seen.size() == 4);
}

TEST_CASE("sprot samples cover all sixteen labels") {
  const Image img = random_image(20, 20, 3, 12);
  PretextConfig cfg{PretextMode::sprot, 8, true};
  Rng rng(4);
  const auto samples = make_pretext_samples(img, Domain::target, cfg, rng);
  REQUIRE(samples.size() == 16);
  std::set<int> labels;
  const auto quads = split_quadrants(img);
  for (const auto& s : samples) {
    labels.insert(s.label);
    REQUIRE(s.region.has_value());
    CHECK(decode_region(s.label) == *s.region);
    CHECK(decode_rotation(s.label) == s.rotation);
    CHECK(s.patch == rotate90(crop(quads[*s.region], s.crop_y, s.crop_x, 8, 8), s.rotation));
  }
  CHECK(labels.size() == 16);
  CHECK(*labels.begin() == 0);
  CHECK(*labels.rbegin() == 15);
}

TEST_CASE("spatial labels round-trip") {
  for (int q = 0; q < 4; ++q)
    for (int r = 0; r < 4; ++r) {
      const int label = encode_spatial_label(q, r);
      CHECK(label >= 0);
      CHECK(label < 16);
      CHECK(decode_region(label) == q);
      CHECK(decode_rotation(label) == r);
    }
}

TEST_CASE("crop sizes are validated against the image or its regions") {
  CHECK_THROWS_AS((PretextConfig{PretextMode::sprot, 10, true}.validate_for(16, 16)), ConfigError);
  CHECK_NOTHROW((PretextConfig{PretextMode::sprot, 8, true}.validate_for(16, 16)));
  CHECK_THROWS_AS((PretextConfig{PretextMode::rot, 7, true}.validate_for(16, 16)), ConfigError);
  CHECK_THROWS_AS((PretextConfig{PretextMode::rot, 20, true}.validate_for(16, 16)), ConfigError);
  const Image img = random_image(16, 16, 3, 13);
  Rng rng(0);
  CHECK_THROWS(make_pretext_samples(img, Domain::target, PretextConfig{PretextMode::sprot, 9, true}, rng));
}

TEST_CASE("pretext pools") {
  const Dataset target = image_dataset(10, 16, Domain::target, 100);
  const Dataset source = image_dataset(10, 16, Domain::source, 200);

  SUBCASE("rot over ten target images") {
    const auto pool = build_pretext_pool(target, nullptr, {PretextMode::rot, 8, true}, 1);
    CHECK(pool.num_images() == 10);
    CHECK(pool.size() == 40);
    const auto all = pool.materialize();
    CHECK(all.size() == 40);
    for (const auto& s : all) CHECK(s.domain == Domain::target);
  }
  SUBCASE("rot ignores a provided source dataset") {
    const auto pool = build_pretext_pool(target, &source, {PretextMode::rot, 8, true}, 1);
    CHECK(pool.num_images() == 10);
  }
  SUBCASE("mixrot references both domains") {
    const auto pool = build_pretext_pool(target, &source, {PretextMode::mixrot, 8, true}, 1);
    CHECK(pool.num_images() == 20);
    std::set<const Image*> distinct;
    int sources = 0;
    for (std::size_t i = 0; i < pool.num_images(); ++i) {
      distinct.insert(&pool.image(i));
      sources += pool.domain_of(i) == Domain::source;
    }
    CHECK(distinct.size() == 20);
    CHECK(sources == 10);
  }
  SUBCASE("mixrot without source is a configuration error") {
    CHECK_THROWS_AS(build_pretext_pool(target, nullptr, {PretextMode::mixrot, 8, true}, 1), ConfigError);
  }
  SUBCASE("sprot over five images") {
    const Dataset five = image_dataset(5, 16, Domain::target, 300);
    const auto all = build_pretext_pool(five, nullptr, {PretextMode::sprot, 8, true}, 1).materialize();
    CHECK(all.size() == 80);
    std::map<int, int> histogram;
    for (const auto& s : all) ++histogram[s.label];
    CHECK(histogram.size() == 16);
    for (const auto& [label, count] : histogram) CHECK(count == 5);
  }
}

TEST_CASE("pools are deterministic and independent of class labels") {
  Dataset target = image_dataset(6, 16, Domain::target, 400);
  const PretextConfig cfg{PretextMode::rot, 8, true};
  const auto a = build_pretext_pool(target, nullptr, cfg, 9).batch({0, 3, 5}, 17);
  const auto b = build_pretext_pool(target, nullptr, cfg, 9).batch({0, 3, 5}, 17);
  CHECK(a.patches == b.patches);
  CHECK(a.labels == b.labels);

  for (auto& s : target.samples) s.class_id = 3 - s.class_id;
  const auto scrambled = build_pretext_pool(target, nullptr, cfg, 9).batch({0, 3, 5}, 17);
  CHECK(scrambled.patches == a.patches);
  CHECK(scrambled.labels == a.labels);

  const auto other_draw = build_pretext_pool(target, nullptr, cfg, 9).batch({0, 3, 5}, 18);
  CHECK_FALSE(other_draw.patches == a.patches);
}

TEST_CASE("pretext batches are laid out in groups of four") {
  const Dataset target = image_dataset(3, 16, Domain::target, 500);
  const auto batch = build_pretext_pool(target, nullptr, {PretextMode::rot, 8, true}, 2).batch({2, 0}, 0);
  CHECK(batch.group_size == 4);
  CHECK(batch.patches.n() == 8);
  CHECK(batch.patches.c() == 3);
  CHECK(batch.patches.h() == 8);
  CHECK(batch.labels == std::vector<int>{0, 1, 2, 3, 0, 1, 2, 3});
}

TEST_CASE("pretext manifests can be written for inspection") {
  const Dataset target = image_dataset(2, 16, Domain::target, 600);
  const auto samples = build_pretext_pool(target, nullptr, {PretextMode::rot, 8, true}, 2).materialize();
  TempDir dir("pretext");
  const auto path = write_pretext_manifest(dir.path(), samples, 4);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "pretext,4");
  int rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++rows;
    CHECK(line.find(",target") != std::string::npos);
  }
  CHECK(rows == 8);
}
