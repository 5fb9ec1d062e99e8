#include "cdet/matching.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cdet {

void GroundTruth::validate(int num_classes) const {
  if (boxes.size() != labels.size()) {
    throw std::invalid_argument("GroundTruth: boxes and labels differ in length");
  }
  for (const int l : labels) {
    if (l < 1 || l >= num_classes) {
      throw std::invalid_argument("GroundTruth: label out of range");
    }
  }
}

std::size_t MatchAssignment::count(AnchorStatus s) const noexcept {
  return static_cast<std::size_t>(std::count(status.begin(), status.end(), s));
}

MatchAssignment match(std::span<const Box> anchors, const GroundTruth& gt, double pos_threshold,
                      const Variances& var) {
  if (anchors.empty()) {
    throw std::invalid_argument("match: no anchors");
  }
  if (gt.boxes.size() != gt.labels.size()) {
    throw std::invalid_argument("match: ground truth boxes/labels mismatch");
  }
  const std::size_t num_anchors = anchors.size();
  const std::size_t num_gt = gt.size();

  MatchAssignment out;
  out.status.assign(num_anchors, AnchorStatus::kNegative);
  out.matched_gt.assign(num_anchors, -1);
  out.label.assign(num_anchors, 0);
  out.target.assign(num_anchors, BoxDelta{});
  if (num_gt == 0) {
    return out;
  }

  // overlaps[g * A + a]
  std::vector<double> overlaps(num_gt * num_anchors);
  for (std::size_t g = 0; g < num_gt; ++g) {
    for (std::size_t a = 0; a < num_anchors; ++a) {
      overlaps[g * num_anchors + a] = iou(gt.boxes[g], anchors[a]);
    }
  }

  // Step 1: greedy bipartite claims.
  std::vector<bool> gt_done(num_gt, false);
  std::vector<bool> claimed(num_anchors, false);
  const std::size_t rounds = std::min(num_gt, num_anchors);
  for (std::size_t round = 0; round < rounds; ++round) {
    double best = -1.0;
    std::size_t best_g = 0;
    std::size_t best_a = 0;
    for (std::size_t g = 0; g < num_gt; ++g) {
      if (gt_done[g]) {
        continue;
      }
      for (std::size_t a = 0; a < num_anchors; ++a) {
        if (claimed[a]) {
          continue;
        }
        const double o = overlaps[g * num_anchors + a];
        if (o > best) {
          best = o;
          best_g = g;
          best_a = a;
        }
      }
    }
    gt_done[best_g] = true;
    claimed[best_a] = true;
    out.matched_gt[best_a] = static_cast<int>(best_g);
  }

  // Step 2: threshold rule for everything not claimed in step 1.
  for (std::size_t a = 0; a < num_anchors; ++a) {
    if (claimed[a]) {
      continue;
    }
    double best = -1.0;
    std::size_t best_g = 0;
    for (std::size_t g = 0; g < num_gt; ++g) {
      const double o = overlaps[g * num_anchors + a];
      if (o > best) {
        best = o;
        best_g = g;
      }
    }
    if (best > pos_threshold) {
      out.matched_gt[a] = static_cast<int>(best_g);
    }
  }

  for (std::size_t a = 0; a < num_anchors; ++a) {
    const int g = out.matched_gt[a];
    if (g < 0) {
      continue;
    }
    out.status[a] = AnchorStatus::kPositive;
    out.label[a] = gt.labels[static_cast<std::size_t>(g)];
    out.target[a] = encode(anchors[a], gt.boxes[static_cast<std::size_t>(g)], var);
  }
  return out;
}

std::vector<std::size_t> filter_negatives(std::span<const double> neg_confidence, double theta) {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < neg_confidence.size(); ++i) {
    if (neg_confidence[i] > theta) {
      out.push_back(i);
    }
  }
  return out;
}

void apply_filter(MatchAssignment& assignment, std::span<const std::size_t> filtered,
                  bool include_positives) {
  for (const std::size_t i : filtered) {
    if (assignment.status[i] == AnchorStatus::kPositive && !include_positives) {
      continue;
    }
    assignment.status[i] = AnchorStatus::kFiltered;
  }
}

MiningSelection mine_hard_negatives(std::span<const double> losses,
                                    const MatchAssignment& assignment, double ratio) {
  if (losses.size() != assignment.size()) {
    throw std::invalid_argument("mine_hard_negatives: loss/assignment size mismatch");
  }
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment.status[i] == AnchorStatus::kNegative) {
      candidates.push_back(i);
    }
  }
  const std::size_t positives = assignment.positives();
  const auto wanted = static_cast<std::size_t>(
      std::ceil(ratio * static_cast<double>(std::max<std::size_t>(positives, 1))));
  const std::size_t take = std::min(wanted, candidates.size());

  std::partial_sort(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(take),
                    candidates.end(), [&](std::size_t a, std::size_t b) {
                      if (losses[a] != losses[b]) {
                        return losses[a] > losses[b];
                      }
                      return a < b;
                    });
  candidates.resize(take);
  std::sort(candidates.begin(), candidates.end());
  return MiningSelection{std::move(candidates), ratio};
}

}  // namespace cdet
