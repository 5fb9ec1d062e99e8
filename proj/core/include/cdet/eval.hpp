#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdet/data.hpp"
#include "cdet/geometry.hpp"

namespace cdet {

struct ImageDetections {
  std::string image_id;
  std::vector<Detection> detections;
};

/// Detections files hold one record per line:
///   <image id> <class id> <score> <xmin> <ymin> <xmax> <ymax>
/// with the score printed to 6 decimals and coordinates to 4.
std::string detection_line(const std::string& image_id, const Detection& det);
void write_detections(const std::filesystem::path& path, std::span<const ImageDetections> dets);
/// Groups records by image id in order of first appearance. Throws ParseError.
std::vector<ImageDetections> read_detections(const std::filesystem::path& path);

enum class ApMode { kAllPoints, kElevenPoint };

struct ApResult {
  /// Empty when the class has neither ground truth nor detections.
  std::optional<double> ap;
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
  /// Per ranked detection: cumulative recall/precision and the TP flag.
  std::vector<double> recall;
  std::vector<double> precision;
  std::vector<bool> true_positive;
};

/// VOC-style AP for `class_id`. Detections are ranked by score (ties: lower
/// image id, then input order) and greedily matched to the best-overlapping
/// ground truth of the same image; overlap >= iou_threshold on an unclaimed
/// box is a TP, anything else (including duplicates) is a FP. Difficult
/// boxes are neither counted nor penalized.
ApResult average_precision(std::span<const ImageDetections> dets,
                           std::span<const Annotation> gts, int class_id, double iou_threshold,
                           ApMode mode = ApMode::kAllPoints);

/// Area under the interpolated PR curve from per-rank recall/precision.
double ap_from_curve(std::span<const double> recall, std::span<const double> precision,
                     ApMode mode);

/// IoU thresholds 0.50, 0.55, ..., 0.95.
std::vector<double> coco_thresholds();
/// Mean of average_precision over coco_thresholds().
std::optional<double> coco_ap(std::span<const ImageDetections> dets,
                              std::span<const Annotation> gts, int class_id,
                              ApMode mode = ApMode::kAllPoints);

struct FpCounts {
  std::size_t loc = 0;
  std::size_t sim = 0;
  std::size_t oth = 0;
  std::size_t bg = 0;

  std::size_t total() const noexcept { return loc + sim + oth + bg; }
  FpCounts& operator+=(const FpCounts& o) noexcept;
  friend bool operator==(const FpCounts&, const FpCounts&) = default;
};

enum class FpType { kLoc, kSim, kOth, kBg };

/// Classifies every false positive of `class_id` at IoU 0.5. With `weak`
/// = 0.1: Loc when overlap with a same-class box is >= weak (this includes
/// duplicates), else Sim when overlap with a box of a similar class is >=
/// weak, else Oth when overlap with any other box is >= weak, else BG.
/// `similarity_groups` lists sets of mutually similar class ids.
FpCounts fp_taxonomy(std::span<const ImageDetections> dets, std::span<const Annotation> gts,
                     int class_id, const std::vector<std::vector<int>>& similarity_groups,
                     std::vector<FpType>* types = nullptr);

struct EvalOptions {
  int num_classes = 4;  // includes background
  std::vector<std::string> class_names;  // object classes only, id 1 first
  ApMode mode = ApMode::kAllPoints;
  /// Empty means all object classes are mutually similar.
  std::vector<std::vector<int>> similarity_groups;
  unsigned threads = 1;
};

struct ClassReport {
  int class_id = 0;
  std::string name;
  std::size_t num_gt = 0;
  std::size_t num_det = 0;
  std::optional<double> ap50;
  std::optional<double> coco;
  FpCounts fp;
  std::vector<double> recall;
  std::vector<double> precision;
};

struct EvalReport {
  ApMode mode = ApMode::kAllPoints;
  std::vector<ClassReport> classes;
  double map50 = 0.0;
  double coco_map = 0.0;
  FpCounts fp;
};

EvalReport evaluate(std::span<const ImageDetections> dets, std::span<const Annotation> gts,
                    const EvalOptions& opts);

/// Deterministic plain-text rendering of a report.
std::string format_report(const EvalReport& report);
/// Writes `dir/pr_class<k>.txt` with "recall precision" per ranked detection.
void write_pr_curves(const std::filesystem::path& dir, const EvalReport& report);

}  // namespace cdet
