#pragma once

#include <cstddef>
#include <vector>

#include "cdet/geometry.hpp"

namespace cdet {

/// Tiling rule for the multi-level anchor grid. Each level carries one anchor
/// scale (scale_multiplier * stride) at every aspect ratio.
struct AnchorSpec {
  std::vector<int> strides{8, 16, 32, 64};
  int scale_multiplier = 4;
  std::vector<double> aspect_ratios{0.5, 1.0, 2.0};
  int image_width = 320;
  int image_height = 320;

  /// Throws ConfigError on a non-divisible image size, empty or non-positive
  /// strides/ratios.
  void validate() const;
};

struct AnchorProvenance {
  int level = 0;
  int row = 0;
  int col = 0;
  int ratio_index = 0;
};

/// Anchors in tiling order: level-major, then row, column, ratio.
struct AnchorGrid {
  std::vector<Box> boxes;
  std::vector<AnchorProvenance> provenance;

  std::size_t size() const noexcept { return boxes.size(); }
};

/// Closed-form anchor count for a validated spec.
std::size_t anchor_count(const AnchorSpec& spec);

AnchorGrid generate_anchors(const AnchorSpec& spec);

}  // namespace cdet
