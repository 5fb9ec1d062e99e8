#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "cdet/geometry.hpp"
#include "cdet/matching.hpp"
#include "cdet/tensor.hpp"

namespace cdet {

struct LossBreakdown {
  double arm_cls = 0.0;
  double arm_reg = 0.0;
  double odm_cls = 0.0;
  double odm_reg = 0.0;
  std::size_t n_arm = 0;
  std::size_t n_odm = 0;
  double total = 0.0;
};

/// Softmax cross-entropy of one row of logits. When `grad` is non-empty it
/// receives scale * (softmax - onehot).
double softmax_cross_entropy(std::span<const double> logits, int label,
                             std::span<double> grad = {}, double scale = 1.0);

/// 0.5 x^2 for |x| < 1, |x| - 0.5 otherwise, summed over the four coordinates.
/// `grad`, when given, receives scale * d/dpred.
double smooth_l1(const BoxDelta& pred, const BoxDelta& target, BoxDelta* grad = nullptr,
                 double scale = 1.0);

/// One detection stage's predictions for one image: `pred` is (1, A, k + 4)
/// with k class logits followed by 4 offsets.
struct StageInput {
  const Tensor* pred = nullptr;
  int num_classes = 2;
  const MatchAssignment* assignment = nullptr;
  const MiningSelection* mining = nullptr;
};

/// Unnormalized classification sum over positives and mined negatives, in
/// ascending anchor order. Filtered anchors never contribute.
double classification_sum(const StageInput& stage, Tensor* grad = nullptr, double scale = 1.0);
/// Unnormalized smooth-L1 sum over positives only.
double regression_sum(const StageInput& stage, Tensor* grad = nullptr, double scale = 1.0);

/// Normalized per-image binary loss of the refinement stage (0 when the image
/// has no positives).
double binary_cls_loss(const StageInput& arm);
/// Normalized per-image multi-class loss of the detection stage.
double multi_cls_loss(const StageInput& odm);

/// Per-image inputs of the joint objective. `arm.pred` may be null for
/// variants without a refinement branch.
struct ImageLossInput {
  StageInput arm;
  StageInput odm;
};

/// Gradients w.r.t. the stage predictions of one image (same shapes as the
/// inputs; `arm` is empty when the image had no refinement branch).
struct ImageLossGrad {
  Tensor arm;
  Tensor odm;
};

/// Joint objective over a mini-batch: ARM terms divided by the batch's ARM
/// positive count and ODM terms by the ODM positive count; a stage with zero
/// positives contributes exactly zero (including its mined negatives).
LossBreakdown total_loss(std::span<const ImageLossInput> batch,
                         std::vector<ImageLossGrad>* grads = nullptr);

}  // namespace cdet
