#include "cdet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace cdet {
namespace {

double smooth_l1_scalar(double x, double* dx) {
  const double ax = std::abs(x);
  if (ax < 1.0) {
    if (dx != nullptr) {
      *dx = x;
    }
    return 0.5 * x * x;
  }
  if (dx != nullptr) {
    *dx = x > 0.0 ? 1.0 : -1.0;
  }
  return ax - 0.5;
}

void check_stage(const StageInput& s) {
  if (s.pred == nullptr || s.assignment == nullptr) {
    throw std::invalid_argument("loss: stage input missing predictions or assignment");
  }
  const Shape& sh = s.pred->shape();
  if (sh.w != s.num_classes + 4 || static_cast<std::size_t>(sh.h) != s.assignment->size()) {
    throw std::invalid_argument("loss: prediction shape " + sh.str() +
                                " does not match assignment/classes");
  }
}

Tensor* ensure_grad(Tensor* grad, const Tensor& like) {
  if (grad != nullptr && grad->shape() != like.shape()) {
    *grad = Tensor(like.shape());
  }
  return grad;
}

}  // namespace

double softmax_cross_entropy(std::span<const double> logits, int label, std::span<double> grad,
                             double scale) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (const double z : logits) {
    sum += std::exp(z - m);
  }
  const double lse = m + std::log(sum);
  if (!grad.empty()) {
    for (std::size_t j = 0; j < logits.size(); ++j) {
      const double p = std::exp(logits[j] - lse);
      grad[j] += scale * (p - (static_cast<int>(j) == label ? 1.0 : 0.0));
    }
  }
  return lse - logits[static_cast<std::size_t>(label)];
}

double smooth_l1(const BoxDelta& pred, const BoxDelta& target, BoxDelta* grad, double scale) {
  double g[4] = {0.0, 0.0, 0.0, 0.0};
  const double loss = smooth_l1_scalar(pred.dx - target.dx, &g[0]) +
                      smooth_l1_scalar(pred.dy - target.dy, &g[1]) +
                      smooth_l1_scalar(pred.dw - target.dw, &g[2]) +
                      smooth_l1_scalar(pred.dh - target.dh, &g[3]);
  if (grad != nullptr) {
    grad->dx += scale * g[0];
    grad->dy += scale * g[1];
    grad->dw += scale * g[2];
    grad->dh += scale * g[3];
  }
  return loss;
}

double classification_sum(const StageInput& stage, Tensor* grad, double scale) {
  check_stage(stage);
  grad = ensure_grad(grad, *stage.pred);
  const MatchAssignment& a = *stage.assignment;
  const auto k = static_cast<std::size_t>(stage.num_classes);
  const std::size_t row = k + 4;

  std::vector<char> mined(a.size(), 0);
  if (stage.mining != nullptr) {
    for (const std::size_t i : stage.mining->negatives) {
      if (a.status.at(i) == AnchorStatus::kNegative) {
        mined[i] = 1;
      }
    }
  }

  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool positive = a.status[i] == AnchorStatus::kPositive;
    if (!positive && mined[i] == 0) {
      continue;
    }
    const int label = positive ? (k == 2 ? 1 : a.label[i]) : 0;
    const std::span<const double> logits(stage.pred->data() + i * row, k);
    std::span<double> g;
    if (grad != nullptr) {
      g = std::span<double>(grad->data() + i * row, k);
    }
    sum += softmax_cross_entropy(logits, label, g, scale);
  }
  return sum;
}

double regression_sum(const StageInput& stage, Tensor* grad, double scale) {
  check_stage(stage);
  grad = ensure_grad(grad, *stage.pred);
  const MatchAssignment& a = *stage.assignment;
  const auto k = static_cast<std::size_t>(stage.num_classes);
  const std::size_t row = k + 4;
  double sum = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a.status[i] != AnchorStatus::kPositive) {
      continue;
    }
    const double* p = stage.pred->data() + i * row + k;
    const BoxDelta pred{p[0], p[1], p[2], p[3]};
    BoxDelta g;
    sum += smooth_l1(pred, a.target[i], grad != nullptr ? &g : nullptr, scale);
    if (grad != nullptr) {
      double* gp = grad->data() + i * row + k;
      gp[0] += g.dx;
      gp[1] += g.dy;
      gp[2] += g.dw;
      gp[3] += g.dh;
    }
  }
  return sum;
}

double binary_cls_loss(const StageInput& arm) {
  const std::size_t n = arm.assignment->positives();
  return n == 0 ? 0.0 : classification_sum(arm) / static_cast<double>(n);
}

double multi_cls_loss(const StageInput& odm) {
  const std::size_t n = odm.assignment->positives();
  return n == 0 ? 0.0 : classification_sum(odm) / static_cast<double>(n);
}

LossBreakdown total_loss(std::span<const ImageLossInput> batch,
                         std::vector<ImageLossGrad>* grads) {
  LossBreakdown out;
  for (const auto& img : batch) {
    if (img.arm.pred != nullptr) {
      out.n_arm += img.arm.assignment->positives();
    }
    out.n_odm += img.odm.assignment->positives();
  }
  if (grads != nullptr) {
    grads->assign(batch.size(), ImageLossGrad{});
  }
  const double arm_scale = out.n_arm == 0 ? 0.0 : 1.0 / static_cast<double>(out.n_arm);
  const double odm_scale = out.n_odm == 0 ? 0.0 : 1.0 / static_cast<double>(out.n_odm);

  for (std::size_t b = 0; b < batch.size(); ++b) {
    const ImageLossInput& img = batch[b];
    Tensor* garm = nullptr;
    Tensor* godm = nullptr;
    if (grads != nullptr) {
      ImageLossGrad& g = (*grads)[b];
      if (img.arm.pred != nullptr) {
        g.arm = Tensor(img.arm.pred->shape());
        garm = &g.arm;
      }
      g.odm = Tensor(img.odm.pred->shape());
      godm = &g.odm;
    }
    if (img.arm.pred != nullptr && out.n_arm > 0) {
      out.arm_cls += classification_sum(img.arm, garm, arm_scale);
      out.arm_reg += regression_sum(img.arm, garm, arm_scale);
    }
    if (out.n_odm > 0) {
      out.odm_cls += classification_sum(img.odm, godm, odm_scale);
      out.odm_reg += regression_sum(img.odm, godm, odm_scale);
    }
  }
  out.arm_cls *= arm_scale;
  out.arm_reg *= arm_scale;
  out.odm_cls *= odm_scale;
  out.odm_reg *= odm_scale;
  out.total = out.arm_cls + out.arm_reg + out.odm_cls + out.odm_reg;
  return out;
}

}  // namespace cdet
