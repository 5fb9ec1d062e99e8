#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <vector>

namespace cdet {

/// Axis-aligned rectangle in corner form. Area is (xmax - xmin) * (ymax - ymin);
/// there is no +1 pixel convention.
class Box {
 public:
  constexpr Box() = default;
  /// Throws std::invalid_argument when xmax < xmin, ymax < ymin or any
  /// coordinate is NaN.
  Box(double xmin, double ymin, double xmax, double ymax);

  static Box from_center(double cx, double cy, double w, double h);

  double xmin() const noexcept { return xmin_; }
  double ymin() const noexcept { return ymin_; }
  double xmax() const noexcept { return xmax_; }
  double ymax() const noexcept { return ymax_; }

  double width() const noexcept { return xmax_ - xmin_; }
  double height() const noexcept { return ymax_ - ymin_; }
  double area() const noexcept { return width() * height(); }
  double cx() const noexcept { return 0.5 * (xmin_ + xmax_); }
  double cy() const noexcept { return 0.5 * (ymin_ + ymax_); }

  friend bool operator==(const Box&, const Box&) = default;

 private:
  double xmin_ = 0.0;
  double ymin_ = 0.0;
  double xmax_ = 0.0;
  double ymax_ = 0.0;
};

/// Regression offsets of a box relative to a reference box: center shifts in
/// units of reference size, log-scale size ratios, each divided by a variance.
struct BoxDelta {
  double dx = 0.0;
  double dy = 0.0;
  double dw = 0.0;
  double dh = 0.0;

  friend bool operator==(const BoxDelta&, const BoxDelta&) = default;
};

/// Per-coordinate variances dividing the encoded offsets.
struct Variances {
  double x = 0.1;
  double y = 0.1;
  double w = 0.2;
  double h = 0.2;
};

struct ImageExtent {
  double width = 0.0;
  double height = 0.0;
};

/// Largest log-size step accepted by decode before clamping; keeps exp()
/// finite for untrained heads.
inline constexpr double kMaxLogScale = 4.135166556742356;  // log(1000 / 16)

double iou(const Box& a, const Box& b) noexcept;

/// Throws std::invalid_argument when anchor or target has zero width/height.
BoxDelta encode(const Box& anchor, const Box& target, const Variances& var = {});

/// Inverse of encode. Log-size steps are clamped to kMaxLogScale. With
/// `clip_to`, the result is clamped to [0, W] x [0, H].
/// Throws std::invalid_argument on a non-finite delta or degenerate anchor.
Box decode(const Box& anchor, const BoxDelta& delta, const Variances& var = {},
           std::optional<ImageExtent> clip_to = std::nullopt);

Box clip(const Box& box, const ImageExtent& extent) noexcept;

/// A scored, class-labelled box. Class 0 is background and never emitted.
struct Detection {
  int class_id = 0;
  double score = 0.0;
  Box box;

  friend bool operator==(const Detection&, const Detection&) = default;
};

/// Greedy non-maximum suppression over detections of a single class.
/// Returns indices into `dets` of the survivors in descending score order;
/// equal scores keep the lower index first.
std::vector<std::size_t> nms_indices(std::span<const Detection> dets, double overlap,
                                     std::size_t keep);

std::vector<Detection> nms(std::span<const Detection> dets, double overlap, std::size_t keep);

}  // namespace cdet
