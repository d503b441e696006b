#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <random>

#include "edetr/evaluation.hpp"

using namespace edetr;

namespace {

GroundTruth two_truths() {
  GroundTruth gt;
  gt.boxes = {{0.3, 0.3, 0.2, 0.2}, {0.7, 0.7, 0.2, 0.2}};
  gt.labels = {0, 0};
  return gt;
}

}  // namespace

TEST_CASE("perfect single detection scores AP=1, recall=1") {
  GroundTruth gt;
  gt.boxes = {{0.5, 0.5, 0.3, 0.3}};
  gt.labels = {1};
  std::vector<Detection> det = {{0, 1, 0.42, {0.5, 0.5, 0.3, 0.3}}};
  auto r = average_precision(det, {gt}, 0.5);
  CHECK(r.ap == doctest::Approx(1.0));
  CHECK(r.recall == doctest::Approx(1.0));
}

TEST_CASE("no detections means AP=0, recall=0") {
  auto r = average_precision({}, {two_truths()}, 0.5);
  CHECK(r.ap == 0.0);
  CHECK(r.recall == 0.0);
}

TEST_CASE("wrong class never matches") {
  GroundTruth gt;
  gt.boxes = {{0.5, 0.5, 0.3, 0.3}};
  gt.labels = {1};
  std::vector<Detection> det = {{0, 0, 0.9, {0.5, 0.5, 0.3, 0.3}}};
  auto r = average_precision(det, {gt}, 0.5);
  CHECK(r.ap == 0.0);
}

TEST_CASE("3-prediction 2-truth case matches the hand-computed PR curve") {
  // rank 1: exact hit on truth A            -> TP  (prec 1,   rec 1/2)
  // rank 2: overlaps A again, A already used -> FP (prec 1/2, rec 1/2)
  // rank 3: exact hit on truth B            -> TP  (prec 2/3, rec 1)
  // monotone envelope: [1, 2/3, 2/3]; AP = 1/2*1 + 1/2*(2/3) = 5/6
  std::vector<Detection> det = {
      {0, 0, 0.9, {0.3, 0.3, 0.2, 0.2}},
      {0, 0, 0.8, {0.31, 0.3, 0.2, 0.2}},
      {0, 0, 0.7, {0.7, 0.7, 0.2, 0.2}},
  };
  auto r = average_precision(det, {two_truths()}, 0.5);
  CHECK(r.ap == doctest::Approx(5.0 / 6.0).epsilon(1e-12));
  CHECK(r.recall == doctest::Approx(1.0));
}

TEST_CASE("duplicate detections of one truth count a single true positive") {
  std::vector<Detection> det = {
      {0, 0, 0.9, {0.3, 0.3, 0.2, 0.2}},
      {0, 0, 0.8, {0.3, 0.3, 0.2, 0.2}},
      {0, 0, 0.7, {0.3, 0.3, 0.2, 0.2}},
  };
  auto r = average_precision(det, {two_truths()}, 0.5);
  // only rank 1 is TP; recall stalls at 1/2
  CHECK(r.recall == doctest::Approx(0.5));
  CHECK(r.ap == doctest::Approx(0.5));
}

TEST_CASE("greedy match picks the highest-IoU free truth, not the first") {
  GroundTruth gt;
  gt.boxes = {{0.3, 0.3, 0.2, 0.2}, {0.34, 0.3, 0.2, 0.2}};
  gt.labels = {0, 0};
  // the detection equals truth 1 exactly; truth 0 merely overlaps
  std::vector<Detection> det = {{0, 0, 0.9, {0.34, 0.3, 0.2, 0.2}},
                                {0, 0, 0.8, {0.3, 0.3, 0.2, 0.2}}};
  auto r = average_precision(det, {gt}, 0.5);
  CHECK(r.recall == doctest::Approx(1.0));
  CHECK(r.ap == doctest::Approx(1.0));
}

TEST_CASE("AP is monotonically non-increasing in the IoU threshold") {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<GroundTruth> truths(3);
    for (auto& gt : truths)
      for (int g = 0; g < 3; ++g) {
        gt.boxes.push_back(
            {0.2 + 0.6 * U(rng), 0.2 + 0.6 * U(rng), 0.05 + 0.3 * U(rng),
             0.05 + 0.3 * U(rng)});
        gt.labels.push_back(int(U(rng) * 3));
      }
    std::vector<Detection> det;
    for (int i = 0; i < 12; ++i)
      det.push_back({int(U(rng) * 3), int(U(rng) * 3), U(rng),
                     {0.2 + 0.6 * U(rng), 0.2 + 0.6 * U(rng),
                      0.05 + 0.3 * U(rng), 0.05 + 0.3 * U(rng)}});
    double prev = 2.0;
    for (int t = 0; t < 10; ++t) {
      auto r = average_precision(det, truths, 0.5 + 0.05 * t);
      CHECK(r.ap >= 0.0);
      CHECK(r.ap <= 1.0);
      CHECK(r.recall >= 0.0);
      CHECK(r.recall <= 1.0);
      CHECK(r.ap <= prev + 1e-12);
      prev = r.ap;
    }
  }
}

TEST_CASE("evaluate summarizes thresholds and serializes to JSON") {
  std::vector<Detection> det = {{0, 0, 0.9, {0.3, 0.3, 0.2, 0.2}},
                                {0, 0, 0.7, {0.7, 0.7, 0.2, 0.2}}};
  auto s = evaluate(det, {two_truths()});
  CHECK(s.ap50 == doctest::Approx(1.0));
  CHECK(s.ap75 == doctest::Approx(1.0));
  CHECK(s.map == doctest::Approx(1.0));
  CHECK(s.recall == doctest::Approx(1.0));
  std::string j = s.to_json();
  CHECK(j.find("\"ap50\"") != std::string::npos);
  CHECK(j.find("\"ap75\"") != std::string::npos);
  CHECK(j.find("\"map\"") != std::string::npos);
  CHECK(j.find("\"recall\"") != std::string::npos);

  // near-miss box: counted at 0.5 but not at 0.95
  std::vector<Detection> off = {{0, 0, 0.9, {0.32, 0.3, 0.2, 0.2}},
                                {0, 0, 0.7, {0.7, 0.7, 0.2, 0.2}}};
  auto s2 = evaluate(off, {two_truths()});
  CHECK(s2.ap50 == doctest::Approx(1.0));
  CHECK(s2.map < 1.0);
}

TEST_CASE("invalid thresholds and image ids are rejected") {
  std::vector<Detection> det = {{5, 0, 0.9, {0.3, 0.3, 0.2, 0.2}}};
  CHECK_THROWS_AS(average_precision(det, {two_truths()}, 0.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(average_precision(det, {two_truths()}, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(average_precision(det, {two_truths()}, 0.5),
                  std::out_of_range);
}
