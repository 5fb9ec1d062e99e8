#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "cdet/error.hpp"
#include "cdet/eval.hpp"
#include "oracles.hpp"

using cdet::Annotation;
using cdet::ApMode;
using cdet::Box;
using cdet::Detection;
using cdet::ImageDetections;

namespace {

Annotation ann(const std::string& id, std::vector<cdet::AnnotatedObject> objs) {
  return Annotation{id, 100, 100, std::move(objs)};
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const std::filesystem::path kGolden = std::filesystem::path(CDET_TEST_DATA_DIR) / "golden";

}  // namespace

TEST(Ap, PerfectSingleDetection) {
  const std::vector<Annotation> gts{ann("a", {{1, Box(10, 10, 30, 30), false}})};
  const std::vector<ImageDetections> dets{{"a", {{1, 0.9, Box(10, 10, 30, 30)}}}};
  const auto r = cdet::average_precision(dets, gts, 1, 0.5);
  ASSERT_TRUE(r.ap.has_value());
  EXPECT_DOUBLE_EQ(*r.ap, 1.0);
  EXPECT_EQ(r.num_gt, 1U);
  EXPECT_EQ(r.num_det, 1U);
}

TEST(Ap, EmptyCases) {
  const std::vector<Annotation> gts{ann("a", {{1, Box(10, 10, 30, 30), false}})};
  EXPECT_DOUBLE_EQ(*cdet::average_precision({}, gts, 1, 0.5).ap, 0.0);
  EXPECT_FALSE(cdet::average_precision({}, gts, 2, 0.5).ap.has_value());
  const std::vector<ImageDetections> dets{{"a", {{2, 0.9, Box(10, 10, 30, 30)}}}};
  EXPECT_DOUBLE_EQ(*cdet::average_precision(dets, gts, 2, 0.5).ap, 0.0);
}

TEST(Ap, DuplicatesAreFalsePositives) {
  const std::vector<Annotation> gts{ann("a", {{1, Box(0, 0, 10, 10), false}})};
  const std::vector<ImageDetections> dets{
      {"a", {{1, 0.9, Box(0, 0, 10, 10)}, {1, 0.8, Box(0, 0, 10, 10)}}}};
  const auto r = cdet::average_precision(dets, gts, 1, 0.5);
  EXPECT_EQ(r.true_positive, (std::vector<bool>{true, false}));
  EXPECT_DOUBLE_EQ(*r.ap, 1.0);
}

TEST(Ap, DifficultBoxesAreIgnored) {
  const std::vector<Annotation> gts{
      ann("a", {{1, Box(0, 0, 10, 10), true}, {1, Box(50, 50, 60, 60), false}})};
  const std::vector<ImageDetections> dets{
      {"a", {{1, 0.9, Box(0, 0, 10, 10)}, {1, 0.8, Box(50, 50, 60, 60)}}}};
  const auto r = cdet::average_precision(dets, gts, 1, 0.5);
  EXPECT_EQ(r.num_gt, 1U);
  EXPECT_DOUBLE_EQ(*r.ap, 1.0);
}

TEST(Ap, CurveIntegrationByHand) {
  const std::vector<double> rec{0.5, 0.5, 1.0};
  const std::vector<double> prec{1.0, 0.5, 2.0 / 3.0};
  EXPECT_NEAR(cdet::ap_from_curve(rec, prec, ApMode::kAllPoints), 0.5 + 0.5 * 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(cdet::ap_from_curve(rec, prec, ApMode::kElevenPoint),
              (6 * 1.0 + 5 * 2.0 / 3.0) / 11.0, 1e-12);
  EXPECT_DOUBLE_EQ(cdet::ap_from_curve({}, {}, ApMode::kAllPoints), 0.0);
}

TEST(Ap, MatchesBruteForceOnRandomScenes) {
  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> pos(0, 80);
  std::uniform_real_distribution<double> side(5, 30);
  std::uniform_int_distribution<int> cls(1, 2);
  std::uniform_int_distribution<int> coarse(0, 9);
  std::normal_distribution<double> jitter(0, 4);
  for (int t = 0; t < 150; ++t) {
    std::vector<Annotation> gts;
    std::vector<ImageDetections> dets;
    for (int i = 0; i < 1 + t % 5; ++i) {
      const std::string id = "img" + std::to_string(i);
      Annotation a = ann(id, {});
      ImageDetections d{id, {}};
      for (int j = 0; j < t % 4; ++j) {
        const double x = pos(rng);
        const double y = pos(rng);
        const Box b(x, y, x + side(rng), y + side(rng));
        a.objects.push_back({cls(rng), b, coarse(rng) == 0});
        for (int k = 0; k < 2; ++k) {
          const double dx = jitter(rng);
          const double dy = jitter(rng);
          d.detections.push_back(
              {cls(rng), coarse(rng) / 10.0, Box(b.xmin() + dx, b.ymin() + dy, b.xmax() + dx, b.ymax() + dy)});
        }
      }
      const double x = pos(rng);
      d.detections.push_back({cls(rng), coarse(rng) / 10.0, Box(x, x, x + 10, x + 10)});
      gts.push_back(std::move(a));
      dets.push_back(std::move(d));
    }
    for (const int c : {1, 2}) {
      for (const double thr : {0.3, 0.5, 0.75}) {
        for (const auto mode : {ApMode::kAllPoints, ApMode::kElevenPoint}) {
          const auto got = cdet::average_precision(dets, gts, c, thr, mode).ap;
          const auto want = oracle::brute_ap(dets, gts, c, thr, mode == ApMode::kElevenPoint);
          ASSERT_EQ(got.has_value(), want.has_value()) << t;
          if (got) {
            ASSERT_NEAR(*got, *want, 1e-12) << "case " << t << " class " << c << " thr " << thr;
          }
        }
      }
    }
  }
}

TEST(Coco, ThresholdsAndPartialCredit) {
  const auto th = cdet::coco_thresholds();
  ASSERT_EQ(th.size(), 10U);
  EXPECT_DOUBLE_EQ(th.front(), 0.5);
  EXPECT_DOUBLE_EQ(th.back(), 0.95);
  // IoU 0.62 is a TP at 0.50, 0.55 and 0.60 only.
  const std::vector<Annotation> gts{ann("a", {{1, Box(0, 0, 100, 62), false}})};
  const std::vector<ImageDetections> dets{{"a", {{1, 0.9, Box(0, 0, 100, 100)}}}};
  EXPECT_NEAR(cdet::iou(gts[0].objects[0].box, dets[0].detections[0].box), 0.62, 1e-12);
  EXPECT_NEAR(*cdet::coco_ap(dets, gts, 1), 0.3, 1e-12);
}

TEST(Taxonomy, HandFixture) {
  const std::vector<Annotation> gts{ann("a", {{1, Box(0, 0, 20, 20), false},
                                              {2, Box(40, 0, 60, 20), false},
                                              {3, Box(0, 40, 20, 60), false}})};
  const std::vector<ImageDetections> dets{{"a",
                                           {
                                               {1, 0.95, Box(0, 0, 20, 20)},   // TP
                                               {1, 0.90, Box(0, 0, 20, 20)},   // duplicate: Loc
                                               {1, 0.85, Box(10, 0, 30, 20)},  // IoU 1/3: Loc
                                               {1, 0.80, Box(42, 0, 62, 20)},  // on class 2: Sim
                                               {1, 0.75, Box(0, 42, 20, 62)},  // on class 3: Oth
                                               {1, 0.70, Box(80, 80, 95, 95)},  // nothing: BG
                                           }}};
  std::vector<cdet::FpType> types;
  const auto fp = cdet::fp_taxonomy(dets, gts, 1, {{1, 2}}, &types);
  EXPECT_EQ(fp, (cdet::FpCounts{2, 1, 1, 1}));
  EXPECT_EQ(types, (std::vector<cdet::FpType>{cdet::FpType::kLoc, cdet::FpType::kLoc,
                                              cdet::FpType::kSim, cdet::FpType::kOth,
                                              cdet::FpType::kBg}));
  // Without groups every object class counts as similar.
  EXPECT_EQ(cdet::fp_taxonomy(dets, gts, 1, {}), (cdet::FpCounts{2, 2, 0, 1}));
}

TEST(DetectionsFile, RoundTripAndParseErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "cdet_test_eval";
  std::filesystem::create_directories(dir);
  const std::vector<ImageDetections> dets{
      {"000001", {{1, 0.5, Box(1, 2, 3, 4)}, {2, 0.25, Box(0, 0, 10.5, 10.25)}}},
      {"000002", {{3, 0.125, Box(5, 5, 6, 6)}}}};
  EXPECT_EQ(cdet::detection_line("000001", dets[0].detections[0]),
            "000001 1 0.500000 1.0000 2.0000 3.0000 4.0000");
  cdet::write_detections(dir / "d.txt", dets);
  const auto back = cdet::read_detections(dir / "d.txt");
  ASSERT_EQ(back.size(), 2U);
  EXPECT_EQ(back[0].image_id, "000001");
  EXPECT_EQ(back[0].detections.size(), 2U);
  EXPECT_EQ(back[1].detections[0].box, Box(5, 5, 6, 6));
  {
    std::ofstream out(dir / "bad.txt");
    out << "000001 1 0.5 1 2 3 4\n000001 1 0.5 1 2 3\n";
  }
  try {
    cdet::read_detections(dir / "bad.txt");
    FAIL() << "expected ParseError";
  } catch (const cdet::ParseError& e) {
    EXPECT_EQ(e.line(), 2U);
  }
  std::filesystem::remove_all(dir);
}

TEST(Report, EvaluateAggregatesClasses) {
  const std::vector<Annotation> gts{ann("a", {{1, Box(0, 0, 20, 20), false},
                                              {2, Box(40, 0, 60, 20), false}})};
  const std::vector<ImageDetections> dets{{"a", {{1, 0.9, Box(0, 0, 20, 20)}}}};
  cdet::EvalOptions opts;
  opts.class_names = {"rectangle", "ellipse", "triangle"};
  const auto r = cdet::evaluate(dets, gts, opts);
  ASSERT_EQ(r.classes.size(), 3U);
  EXPECT_DOUBLE_EQ(*r.classes[0].ap50, 1.0);
  EXPECT_DOUBLE_EQ(*r.classes[1].ap50, 0.0);
  EXPECT_FALSE(r.classes[2].ap50.has_value());
  EXPECT_DOUBLE_EQ(r.map50, 0.5);
}

TEST(Report, GoldenFixtureIsByteIdentical) {
  const auto dets = cdet::read_detections(kGolden / "detections.txt");
  const auto gts = cdet::load_annotations(kGolden / "annotations.jsonl");
  cdet::EvalOptions opts;
  opts.class_names = {"rectangle", "ellipse", "triangle"};
  const auto report = cdet::evaluate(dets, gts, opts);
  EXPECT_EQ(cdet::format_report(report), slurp(kGolden / "report.txt"));
  for (const auto& c : report.classes) {
    const auto want = oracle::brute_ap(dets, gts, c.class_id, 0.5);
    ASSERT_EQ(c.ap50.has_value(), want.has_value());
    if (want) {
      EXPECT_NEAR(*c.ap50, *want, 1e-12);
    }
  }
}
