#include "wsrtl/metrics.hpp"
#include "wsrtl/synthetic.hpp"

#include <doctest.h>

#include <algorithm>
#include <set>

using namespace wsrtl;

namespace {

// Straight from the definitions, one AU at a time.
double brute_f1(const TensorF& p, const TensorF& y, int k, double thr) {
  double tp = 0, fp = 0, fn = 0;
  for (int i = 0; i < p.dim(0); ++i) {
    const bool pred = p.at(i, k) >= thr, pos = y.at(i, k) >= 0.5f;
    if (pred && pos) tp += 1;
    if (pred && !pos) fp += 1;
    if (!pred && pos) fn += 1;
  }
  const double prec = tp + fp > 0 ? tp / (tp + fp) : 0, rec = tp + fn > 0 ? tp / (tp + fn) : 0;
  return prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0;
}

}  // namespace

TEST_CASE("per-AU F1 matches a brute-force count") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<float> u(0.f, 1.f);
  for (int trial = 0; trial < 30; ++trial) {
    TensorF p({25, 4}), y({25, 4});
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      p[i] = u(rng);
      y[i] = u(rng) < 0.4f ? 1.f : 0.f;
    }
    const auto r = f1_per_au(p, y);
    double avg = 0;
    for (int k = 0; k < 4; ++k) {
      CHECK(r.f1[static_cast<std::size_t>(k)] == doctest::Approx(brute_f1(p, y, k, 0.5)));
      avg += brute_f1(p, y, k, 0.5) / 4;
    }
    CHECK(r.average == doctest::Approx(avg));
  }
}

TEST_CASE("F1 worked example and degenerate AUs") {
  // AU 0: 1 TP, 1 FP, 1 FN. AU 1: never predicted, never present.
  TensorF p({4, 2}), y({4, 2});
  p.at(0, 0) = 0.9f;
  y.at(0, 0) = 1;
  p.at(1, 0) = 0.5f;  // threshold is inclusive
  y.at(2, 0) = 1;
  const auto r = f1_per_au(p, y);
  CHECK(r.tp[0] == 1);
  CHECK(r.fp[0] == 1);
  CHECK(r.fn[0] == 1);
  CHECK(r.f1[0] == doctest::Approx(0.5));
  CHECK_FALSE(r.degenerate[0]);
  CHECK(r.f1[1] == 0.0);
  CHECK(r.degenerate[1]);
  CHECK(r.average == doctest::Approx(0.25));

  const auto md = report_markdown(r, {"first", ""});
  CHECK(md.find("| first | 50.0 |") != std::string::npos);
  CHECK(md.find("| AU1 | 0.0 (P+R=0) |") != std::string::npos);
  CHECK(md.find("| Avg. | 25.0 |") != std::string::npos);
  const auto csv = report_csv(r, {});
  CHECK(csv.rfind("au,f1,tp,fp,fn,degenerate\nAU0,0.500000,1,1,1,0\nAU1,0.000000,0,0,0,1\n", 0) == 0);
  CHECK(csv.find("Avg.,0.250000") != std::string::npos);

  CHECK_THROWS_AS(f1_per_au(TensorF({2, 2}), TensorF({2, 3})), std::invalid_argument);
}

TEST_CASE("always-positive predictor scores 2p / (1 + p)") {
  TensorF p({10, 3}, 1.f), y({10, 3});
  const int positives[] = {1, 5, 10};
  for (int k = 0; k < 3; ++k)
    for (int i = 0; i < positives[k]; ++i) y.at(i, k) = 1;
  const auto r = f1_per_au(p, y);
  for (int k = 0; k < 3; ++k) {
    const double q = positives[k] / 10.0;
    CHECK(r.f1[static_cast<std::size_t>(k)] == doctest::Approx(2 * q / (1 + q)));
  }
}

TEST_CASE("subject folds partition the subjects") {
  std::vector<std::string> ids;
  for (int s = 0; s < 10; ++s)
    for (int r = 0; r < 3; ++r) ids.push_back("s" + std::to_string(s));
  const auto folds = subject_kfold(ids, 3, 7);
  REQUIRE(folds.size() == 3);
  std::multiset<std::string> all_test;
  for (const auto& f : folds) {
    CHECK(f.test.size() + f.train.size() == 10);
    CHECK(f.test.size() >= 3);
    CHECK(f.test.size() <= 4);
    for (const auto& t : f.test) CHECK(std::find(f.train.begin(), f.train.end(), t) == f.train.end());
    all_test.insert(f.test.begin(), f.test.end());
  }
  CHECK(all_test.size() == 10);
  CHECK(std::set<std::string>(all_test.begin(), all_test.end()).size() == 10);

  const auto again = subject_kfold(ids, 3, 7);
  for (std::size_t i = 0; i < 3; ++i) CHECK(again[i].test == folds[i].test);
  bool differs = false;
  for (std::uint64_t seed = 8; seed < 16 && !differs; ++seed) differs = subject_kfold(ids, 3, seed)[0].test != folds[0].test;
  CHECK(differs);

  CHECK_THROWS_AS(subject_kfold(ids, 1, 0), std::invalid_argument);
  CHECK_THROWS_AS(subject_kfold({"a", "b"}, 3, 0), std::invalid_argument);
}

TEST_CASE("evaluation is deterministic and independent of batch size") {
  SyntheticSpec spec;
  spec.num_aus = 3;
  spec.subjects = 2;
  spec.samples_per_subject = 5;
  spec.image_size = 72;
  const auto data = generate_synthetic_dataset(spec, 3);

  ModelConfig c;
  c.num_aus = 3;
  c.width = 1.0 / 16;
  c.d = 8;
  c.heads = 2;
  c.ffn = 16;
  c.image_size = 64;
  c.patch_size = 16;
  c.roi_hidden = 4;
  c.training_heads = false;
  WsrtlModel<float> model(c);

  const auto a = evaluate(model, data.labeled, data.rules, 16);
  const auto b = evaluate(model, data.labeled, data.rules, 3);
  REQUIRE(a.probs.shape() == Shape{static_cast<int>(data.labeled.size()), 3});
  CHECK((a.probs.array() - b.probs.array()).abs().maxCoeff() < 1e-6f);
  CHECK((a.labels.array() == b.labels.array()).all());
  for (std::size_t i = 0; i < data.labeled.size(); ++i)
    for (int k = 0; k < 3; ++k)
      CHECK(a.labels.at(static_cast<int>(i), k) == data.labeled[i].labels[static_cast<std::size_t>(k)]);

  Dataset missing_labels = data.labeled;
  missing_labels[1].labels.clear();
  CHECK_THROWS_AS(evaluate(model, missing_labels, data.rules), std::invalid_argument);
  CHECK_THROWS_AS(evaluate(model, Dataset{}, data.rules), std::invalid_argument);
}
