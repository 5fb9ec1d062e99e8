#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cdet/geometry.hpp"

namespace cdet {

/// Ground-truth objects of one image. Labels are in [1, num_classes - 1];
/// label 0 is reserved for background.
struct GroundTruth {
  std::vector<Box> boxes;
  std::vector<int> labels;

  std::size_t size() const noexcept { return boxes.size(); }
  /// Throws std::invalid_argument on length mismatch or out-of-range labels.
  void validate(int num_classes) const;
};

enum class AnchorStatus : unsigned char { kNegative, kPositive, kFiltered };

/// Per-anchor training assignment. For positives `label` is the matched class
/// and `target` the encoded offsets of the matched box; other anchors carry
/// label 0, matched_gt -1 and a zero target.
struct MatchAssignment {
  std::vector<AnchorStatus> status;
  std::vector<int> matched_gt;
  std::vector<int> label;
  std::vector<BoxDelta> target;

  std::size_t size() const noexcept { return status.size(); }
  std::size_t count(AnchorStatus s) const noexcept;
  std::size_t positives() const noexcept { return count(AnchorStatus::kPositive); }
};

/// Two-step matching: every ground truth first claims its best-overlap anchor
/// (greedy bipartite, highest overlap first; ties by lower ground-truth index
/// then lower anchor index), then every unclaimed anchor whose best overlap
/// exceeds `pos_threshold` becomes positive for that ground truth.
/// Throws std::invalid_argument when `anchors` is empty.
MatchAssignment match(std::span<const Box> anchors, const GroundTruth& gt,
                      double pos_threshold = 0.5, const Variances& var = {});

/// Indices (ascending) of anchors whose background confidence exceeds theta.
std::vector<std::size_t> filter_negatives(std::span<const double> neg_confidence,
                                          double theta = 0.99);

/// Marks filtered anchors in `assignment`. Positives are only marked when
/// `include_positives` is set.
void apply_filter(MatchAssignment& assignment, std::span<const std::size_t> filtered,
                  bool include_positives);

struct MiningSelection {
  std::vector<std::size_t> negatives;  // ascending anchor index
  double neg_to_pos_ratio = 3.0;
};

/// Selects the min(ceil(ratio * max(positives, 1)), available) negatives with
/// the highest loss. Equal losses prefer the lower anchor index.
MiningSelection mine_hard_negatives(std::span<const double> losses,
                                    const MatchAssignment& assignment, double ratio = 3.0);

}  // namespace cdet
