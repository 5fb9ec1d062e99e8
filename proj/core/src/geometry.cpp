#include "cdet/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace cdet {

Box::Box(double xmin, double ymin, double xmax, double ymax)
    : xmin_(xmin), ymin_(ymin), xmax_(xmax), ymax_(ymax) {
  if (!(xmax >= xmin) || !(ymax >= ymin)) {
    throw std::invalid_argument("Box: corners out of order or NaN");
  }
}

Box Box::from_center(double cx, double cy, double w, double h) {
  return Box(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h);
}

double iou(const Box& a, const Box& b) noexcept {
  const double iw = std::min(a.xmax(), b.xmax()) - std::max(a.xmin(), b.xmin());
  const double ih = std::min(a.ymax(), b.ymax()) - std::max(a.ymin(), b.ymin());
  if (iw <= 0.0 || ih <= 0.0) {
    return 0.0;
  }
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) {
    return 0.0;
  }
  return std::clamp(inter / uni, 0.0, 1.0);
}

BoxDelta encode(const Box& anchor, const Box& target, const Variances& var) {
  if (!(anchor.width() > 0.0) || !(anchor.height() > 0.0)) {
    throw std::invalid_argument("encode: degenerate anchor");
  }
  if (!(target.width() > 0.0) || !(target.height() > 0.0)) {
    throw std::invalid_argument("encode: degenerate target");
  }
  return BoxDelta{
      (target.cx() - anchor.cx()) / (anchor.width() * var.x),
      (target.cy() - anchor.cy()) / (anchor.height() * var.y),
      std::log(target.width() / anchor.width()) / var.w,
      std::log(target.height() / anchor.height()) / var.h,
  };
}

Box decode(const Box& anchor, const BoxDelta& delta, const Variances& var,
           std::optional<ImageExtent> clip_to) {
  if (!std::isfinite(delta.dx) || !std::isfinite(delta.dy) || !std::isfinite(delta.dw) ||
      !std::isfinite(delta.dh)) {
    throw std::invalid_argument("decode: non-finite delta");
  }
  if (!(anchor.width() > 0.0) || !(anchor.height() > 0.0)) {
    throw std::invalid_argument("decode: degenerate anchor");
  }
  const double cx = anchor.cx() + delta.dx * var.x * anchor.width();
  const double cy = anchor.cy() + delta.dy * var.y * anchor.height();
  const double lw = std::clamp(delta.dw * var.w, -kMaxLogScale, kMaxLogScale);
  const double lh = std::clamp(delta.dh * var.h, -kMaxLogScale, kMaxLogScale);
  const Box out = Box::from_center(cx, cy, anchor.width() * std::exp(lw),
                                   anchor.height() * std::exp(lh));
  return clip_to ? clip(out, *clip_to) : out;
}

Box clip(const Box& box, const ImageExtent& extent) noexcept {
  return Box(std::clamp(box.xmin(), 0.0, extent.width), std::clamp(box.ymin(), 0.0, extent.height),
             std::clamp(box.xmax(), 0.0, extent.width),
             std::clamp(box.ymax(), 0.0, extent.height));
}

std::vector<std::size_t> nms_indices(std::span<const Detection> dets, double overlap,
                                     std::size_t keep) {
  std::vector<std::size_t> order(dets.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return dets[a].score > dets[b].score;
  });

  std::vector<std::size_t> kept;
  for (const std::size_t idx : order) {
    if (kept.size() >= keep) {
      break;
    }
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return iou(dets[k].box, dets[idx].box) > overlap;
    });
    if (!suppressed) {
      kept.push_back(idx);
    }
  }
  return kept;
}

std::vector<Detection> nms(std::span<const Detection> dets, double overlap, std::size_t keep) {
  std::vector<Detection> out;
  for (const std::size_t idx : nms_indices(dets, overlap, keep)) {
    out.push_back(dets[idx]);
  }
  return out;
}

}  // namespace cdet
