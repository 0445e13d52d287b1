#include "wsrtl/alignment.hpp"
#include "wsrtl/au_rules.hpp"
#include "wsrtl/dataset.hpp"
#include "wsrtl/synthetic.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>

using namespace wsrtl;

namespace {

std::vector<Point2> some_landmarks() {
  return {{60, 70}, {140, 72}, {100, 110}, {75, 150}, {128, 149}};
}

// Brute-force least squares over (a, b, tx, ty) via the normal equations,
// independent of the closed form in the library.
Eigen::Vector4d normal_equation_similarity(const std::vector<Point2>& src, const std::vector<Point2>& dst) {
  Eigen::MatrixXd A(2 * src.size(), 4);
  Eigen::VectorXd rhs(2 * src.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    A.row(2 * i) << src[i].x, -src[i].y, 1, 0;
    A.row(2 * i + 1) << src[i].y, src[i].x, 0, 1;
    rhs(2 * i) = dst[i].x;
    rhs(2 * i + 1) = dst[i].y;
  }
  return (A.transpose() * A).ldlt().solve(A.transpose() * rhs);
}

Image test_image(int size) {
  Image img(3, size, size);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) img(c, y, x) = static_cast<float>((x * 7 + y * 3 + c * 11) % 17) / 16.f;
  return img;
}

}  // namespace

TEST_CASE("alignment of identical landmarks is the identity") {
  auto lm = some_landmarks();
  Image img = test_image(200);
  auto face = align_face(img, lm, lm);
  CHECK(face.transform.scale == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(std::abs(face.transform.angle) < 1e-12);
  CHECK(std::abs(face.transform.tx) < 1e-9);
  CHECK(std::abs(face.transform.ty) < 1e-9);
  CHECK((face.image.array() == img.array()).all());
}

TEST_CASE("translated landmarks give the opposite translation") {
  auto ref = some_landmarks();
  auto lm = ref;
  for (auto& p : lm) p.x += 5;
  auto t = estimate_similarity(lm, ref);
  CHECK(t.tx == doctest::Approx(-5.0));
  CHECK(std::abs(t.ty) < 1e-9);
  CHECK(t.scale == doctest::Approx(1.0));
  auto oracle = normal_equation_similarity(lm, ref);
  CHECK(oracle(2) == doctest::Approx(-5.0));
}

TEST_CASE("rotation about the centroid is recovered") {
  auto ref = some_landmarks();
  Point2 c{0, 0};
  for (const auto& p : ref) {
    c.x += p.x / ref.size();
    c.y += p.y / ref.size();
  }
  std::vector<Point2> rotated;
  for (const auto& p : ref) rotated.push_back({c.x - (p.y - c.y), c.y + (p.x - c.x)});  // +90 degrees
  auto t = estimate_similarity(rotated, ref);
  CHECK(std::abs(t.angle + std::numbers::pi / 2) < 1e-6);
  CHECK(t.scale == doctest::Approx(1.0));
}

TEST_CASE("closed form agrees with normal equations on noisy correspondences") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> n(0, 2);
  auto ref = some_landmarks();
  std::vector<Point2> src;
  for (const auto& p : ref) src.push_back({0.9 * p.x + 0.2 * p.y + 7 + n(rng), -0.2 * p.x + 0.9 * p.y - 3 + n(rng)});
  auto t = estimate_similarity(src, ref);
  auto o = normal_equation_similarity(src, ref);
  auto m = t.matrix();
  CHECK(m(0, 0) == doctest::Approx(o(0)).epsilon(1e-9));
  CHECK(m(1, 0) == doctest::Approx(o(1)).epsilon(1e-9));
  CHECK(m(0, 2) == doctest::Approx(o(2)).epsilon(1e-9));
  CHECK(m(1, 2) == doctest::Approx(o(3)).epsilon(1e-9));
}

TEST_CASE("aligning an aligned face is idempotent") {
  std::vector<Point2> ref = some_landmarks();
  std::vector<Point2> lm;
  for (const auto& p : ref) lm.push_back({1.1 * p.x - 0.1 * p.y + 4, 0.1 * p.x + 1.1 * p.y - 9});
  auto first = align_face(test_image(200), lm, ref);
  auto second = estimate_similarity(first.landmarks, ref);
  CHECK(std::abs(second.scale - 1) < 1e-6);
  CHECK(std::abs(second.angle) < 1e-6);
  CHECK(std::abs(second.tx) < 1e-6);
  CHECK(std::abs(second.ty) < 1e-6);
}

TEST_CASE("degenerate landmarks are rejected") {
  std::vector<Point2> same(4, Point2{10, 10});
  std::vector<Point2> target(4, Point2{1, 2});
  CHECK_THROWS_AS(estimate_similarity(same, target), std::invalid_argument);
  std::vector<Point2> one{{1, 1}};
  CHECK_THROWS_AS(estimate_similarity(one, one), std::invalid_argument);
}

TEST_CASE("AU centers from rules") {
  SUBCASE("zero offset returns the anchor") {
    AURuleTable t;
    t.num_landmarks = 2;
    t.rules = {{"AU1", 0, 1, 0, 0}};
    std::vector<Point2> lm{{60.2, 80.6}, {130, 81}};
    auto c = compute_au_centers(lm, t, 192, 192);
    CHECK(c.left[0] == PixelCenter{60, 81});
    CHECK(c.right[0] == PixelCenter{130, 81});
  }
  SUBCASE("synthetic scheme rounds fractional centers") {
    std::vector<Point2> frac{{0.3, 0.4}};
    auto lm = synthetic_landmarks(frac, 192);
    auto c = compute_au_centers(lm, synthetic_rule_table(1), 192, 192);
    CHECK(c.left[0] == PixelCenter{57, 76});
    CHECK(c.right[0] == PixelCenter{134, 76});
  }
  SUBCASE("corner centers are clamped inside") {
    auto t = synthetic_rule_table(1);
    std::vector<Point2> lm{{0, 0}, {191, 191}};
    auto c = compute_au_centers(lm, t, 192, 192);
    CHECK(c.left[0] == PixelCenter{24, 24});
    CHECK(c.right[0] == PixelCenter{168, 168});
  }
  SUBCASE("offsets scale with the reference distance and mirror on the right") {
    AURuleTable t;
    t.num_landmarks = 2;
    t.scale_anchor_a = 0;
    t.scale_anchor_b = 1;
    t.rules = {{"AU", 0, 1, 0.1, -0.25}};
    std::vector<Point2> lm{{60, 100}, {140, 100}};
    auto c = compute_au_centers(lm, t, 200, 200);
    CHECK(c.left[0] == PixelCenter{68, 80});
    CHECK(c.right[0] == PixelCenter{132, 80});
  }
  SUBCASE("patch larger than the image fails") {
    CHECK_THROWS(compute_au_centers(std::vector<Point2>{{5, 5}, {6, 6}}, synthetic_rule_table(1), 40, 40));
  }
  SUBCASE("scheme mismatch fails") {
    CHECK_THROWS(compute_au_centers(std::vector<Point2>{{5, 5}}, synthetic_rule_table(1), 192, 192));
  }
}

TEST_CASE("rule tables round-trip through JSON") {
  AURuleTable t = synthetic_rule_table(3);
  t.rules[1].offset_x = 0.125;
  t.scale_anchor_a = 0;
  t.scale_anchor_b = 1;
  write_rule_table("rules_roundtrip.json", t);
  auto u = read_rule_table("rules_roundtrip.json");
  std::filesystem::remove("rules_roundtrip.json");
  CHECK(u.num_aus() == 3);
  CHECK(u.rules[1].offset_x == 0.125);
  CHECK(u.scale_anchor_b == 1);
}

TEST_CASE("synthetic generation is deterministic") {
  SyntheticSpec spec;
  spec.subjects = 2;
  spec.samples_per_subject = 4;
  auto a = generate_synthetic_dataset(spec, 42);
  auto b = generate_synthetic_dataset(spec, 42);
  REQUIRE(a.labeled.size() == b.labeled.size());
  for (std::size_t i = 0; i < a.labeled.size(); ++i) {
    CHECK((a.labeled[i].image.array() == b.labeled[i].image.array()).all());
    CHECK(a.labeled[i].labels == b.labeled[i].labels);
  }
  auto c = generate_synthetic_dataset(spec, 43);
  CHECK_FALSE((a.labeled[0].image.array() == c.labeled[0].image.array()).all());
  CHECK(a.labeled.size() == 4);
  CHECK(a.unlabeled.size() == 4);
  for (const auto& s : a.labeled) CHECK_NOTHROW(s.validate(spec.num_aus));
  for (const auto& s : a.unlabeled) CHECK_FALSE(s.is_labeled);
}

TEST_CASE("forced-off labels draw no AU patterns") {
  SyntheticSpec spec;
  spec.subjects = 1;
  spec.samples_per_subject = 2;
  spec.force_label = 0.f;
  auto off = generate_synthetic_dataset(spec, 5);
  spec.force_label = 1.f;
  auto on = generate_synthetic_dataset(spec, 5);
  const auto& s0 = off.labeled[0];
  const auto& s1 = on.labeled[0];
  auto centers = compute_au_centers(s0.landmarks, off.rules, 200, 200);
  // Differences must be confined to the stamp boxes and present in each.
  Image diff_mask(1, 200, 200);
  for (int y = 0; y < 200; ++y)
    for (int x = 0; x < 200; ++x)
      for (int c = 0; c < 3; ++c)
        if (s0.image(c, y, x) != s1.image(c, y, x)) diff_mask(0, y, x) = 1;
  const int half = spec.stamp_size / 2;
  float inside = 0;
  for (int k = 0; k < spec.num_aus; ++k)
    for (const auto& pc : {centers.left[static_cast<std::size_t>(k)], centers.right[static_cast<std::size_t>(k)]}) {
      float box = 0;
      for (int y = pc.y - half; y < pc.y + half; ++y)
        for (int x = pc.x - half; x < pc.x + half; ++x) {
          box += diff_mask(0, y, x);
          diff_mask(0, y, x) = 0;
        }
      CHECK(box > 0);
      inside += box;
    }
  CHECK(diff_mask.array().sum() == 0.f);
}

TEST_CASE("synthetic flow is nonzero only on the moving AU") {
  SyntheticSpec spec;
  spec.subjects = 2;
  spec.samples_per_subject = 6;
  spec.force_label = 1.f;
  spec.motion_au = 2;
  spec.motion_x = 1;
  spec.motion_y = 0;
  auto data = generate_synthetic_dataset(spec, 9);
  for (const auto& s : data.labeled) {
    REQUIRE(s.flow_gt.has_value());
    auto centers = compute_au_centers(s.landmarks, data.rules, 200, 200);
    const int half = spec.stamp_size / 2;
    FlowField expected(200, 200);
    for (int y = -half; y < half; ++y)
      for (int x = -half; x < half; ++x) {
        expected.u(centers.left[2].y + y, centers.left[2].x + x) = -1;
        expected.u(centers.right[2].y + y, centers.right[2].x + x) = 1;
      }
    CHECK((s.flow_gt->u == expected.u).all());
    CHECK((s.flow_gt->v == 0.f).all());
  }
  CHECK(data.pairs.size() == data.labeled.size());
}

TEST_CASE("synthetic label structure") {
  SyntheticSpec spec;
  spec.subjects = 40;
  spec.samples_per_subject = 50;
  spec.unlabeled_fraction = 0;
  spec.image_size = 200;
  auto data = generate_synthetic_dataset(spec, 1);
  double n = 0, s0 = 0, s1 = 0, s01 = 0, s00 = 0, s11 = 0;
  for (const auto& s : data.labeled) {
    CHECK_FALSE((s.labels[2] == 1.f && s.labels[3] == 1.f));
    n += 1;
    s0 += s.labels[0];
    s1 += s.labels[1];
    s01 += s.labels[0] * s.labels[1];
    s00 += s.labels[0] * s.labels[0];
    s11 += s.labels[1] * s.labels[1];
  }
  const double corr = (s01 / n - s0 / n * s1 / n) /
                      std::sqrt((s00 / n - s0 * s0 / n / n) * (s11 / n - s1 * s1 / n / n));
  CHECK(corr == doctest::Approx(0.9).epsilon(0.05));
}

TEST_CASE("batch iterator") {
  SyntheticSpec spec;
  spec.subjects = 2;
  spec.samples_per_subject = 6;
  auto data = generate_synthetic_dataset(spec, 11);
  const auto& ds = data.labeled;

  SUBCASE("no augmentation gives the center crop") {
    BatchIterator it(ds, data.rules, 2, 7, false);
    auto b = it.next();
    const auto& s = ds[static_cast<std::size_t>(b.indices[0])];
    Image crop = s.image.crop(4, 4, 192, 192);
    CHECK((b.images.array().head(crop.array().size()) == crop.array()).all());
    for (int k = 0; k < data.rules.num_aus(); ++k)
      CHECK(b.labels.at(0, k) == s.labels[static_cast<std::size_t>(k)]);
  }
  SUBCASE("flip swaps and mirrors centers") {
    const auto& s = ds[0];
    Batch plain = make_batch(ds, {0}, data.rules);
    Batch flipped = plain;
    fill_batch_row(flipped, 0, s, 0, data.rules, 4, 4, true, 192);
    for (int k = 0; k < data.rules.num_aus(); ++k) {
      CHECK(flipped.centers[0].left[static_cast<std::size_t>(k)].x == 192 - plain.centers[0].right[static_cast<std::size_t>(k)].x);
      CHECK(flipped.centers[0].left[static_cast<std::size_t>(k)].y == plain.centers[0].right[static_cast<std::size_t>(k)].y);
      CHECK(flipped.centers[0].right[static_cast<std::size_t>(k)].x == 192 - plain.centers[0].left[static_cast<std::size_t>(k)].x);
    }
    CHECK(flipped.images.at(0, 1, 10, 0) == plain.images.at(0, 1, 10, 191));
    REQUIRE(flipped.flow[0].has_value());
    CHECK(flipped.flow[0]->u(50, 0) == -plain.flow[0]->u(50, 191));
  }
  SUBCASE("same seed gives the same order, epochs are permutations") {
    BatchIterator a(ds, data.rules, 3, 99, true), b(ds, data.rules, 3, 99, true);
    std::multiset<int> epoch;
    for (int i = 0; i < 4; ++i) {
      auto ba = a.next(), bb = b.next();
      CHECK(ba.indices == bb.indices);
      CHECK((ba.images.array() == bb.images.array()).all());
      if (i < 2) epoch.insert(ba.indices.begin(), ba.indices.end());
    }
    CHECK(epoch == std::multiset<int>{0, 1, 2, 3, 4, 5});
  }
  SUBCASE("invalid construction") {
    Dataset empty;
    CHECK_THROWS(BatchIterator(empty, data.rules, 1, 0, false));
    CHECK_THROWS(BatchIterator(ds, data.rules, 100, 0, false));
  }
}

TEST_CASE("manifest round trip and intensity thresholds") {
  SyntheticSpec spec;
  spec.subjects = 1;
  spec.samples_per_subject = 2;
  auto data = generate_synthetic_dataset(spec, 3);
  auto all = merged(data);
  const auto dir = std::filesystem::temp_directory_path() / "wsrtl_manifest_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  save_manifest((dir / "m.jsonl").string(), all);
  ManifestOptions opt;
  opt.num_aus = spec.num_aus;
  auto back = load_manifest((dir / "m.jsonl").string(), opt);
  REQUIRE(back.size() == all.size());
  CHECK(back[0].is_labeled);
  CHECK_FALSE(back[1].is_labeled);
  CHECK(back[1].labels == all[1].labels);
  CHECK(back[0].flow_gt.has_value());
  CHECK((back[0].flow_gt->u == all[0].flow_gt->u).all());
  CHECK((back[0].image.array() - all[0].image.array()).abs().maxCoeff() <= 0.5f / 255 + 1e-6f);

  {
    std::ofstream m(dir / "disfa.jsonl");
    m << R"({"image_path": "images/00000.ppm", "landmarks_path": "images/00000.txt", "subject_id": "X", "labels": [0, 1, 2, 3, 5, 0]})"
      << '\n';
  }
  opt.intensity_threshold = 1.0;
  auto disfa = load_manifest((dir / "disfa.jsonl").string(), opt);
  CHECK(disfa[0].labels == std::vector<float>{0, 0, 1, 1, 1, 0});
  opt.intensity_threshold.reset();
  CHECK_THROWS(load_manifest((dir / "disfa.jsonl").string(), opt));
  std::filesystem::remove_all(dir);
}
