#include "cdet/anchors.hpp"

#include <cmath>
#include <string>

#include "cdet/error.hpp"

namespace cdet {

void AnchorSpec::validate() const {
  if (strides.empty()) {
    throw ConfigError("anchors: at least one stride is required");
  }
  if (aspect_ratios.empty()) {
    throw ConfigError("anchors: at least one aspect ratio is required");
  }
  if (scale_multiplier <= 0) {
    throw ConfigError("anchors: scale_multiplier must be positive");
  }
  if (image_width <= 0 || image_height <= 0) {
    throw ConfigError("anchors: image size must be positive");
  }
  for (const int s : strides) {
    if (s <= 0) {
      throw ConfigError("anchors: strides must be positive");
    }
    if (image_width % s != 0 || image_height % s != 0) {
      throw ConfigError("anchors: image size " + std::to_string(image_width) + "x" +
                        std::to_string(image_height) + " not divisible by stride " +
                        std::to_string(s));
    }
  }
  for (const double r : aspect_ratios) {
    if (!(r > 0.0) || !std::isfinite(r)) {
      throw ConfigError("anchors: aspect ratios must be positive and finite");
    }
  }
}

std::size_t anchor_count(const AnchorSpec& spec) {
  spec.validate();
  std::size_t total = 0;
  for (const int s : spec.strides) {
    total += static_cast<std::size_t>(spec.image_width / s) *
             static_cast<std::size_t>(spec.image_height / s) * spec.aspect_ratios.size();
  }
  return total;
}

AnchorGrid generate_anchors(const AnchorSpec& spec) {
  spec.validate();
  AnchorGrid grid;
  grid.boxes.reserve(anchor_count(spec));
  grid.provenance.reserve(grid.boxes.capacity());

  for (std::size_t level = 0; level < spec.strides.size(); ++level) {
    const int stride = spec.strides[level];
    const double scale = static_cast<double>(spec.scale_multiplier) * stride;
    const int rows = spec.image_height / stride;
    const int cols = spec.image_width / stride;
    for (int row = 0; row < rows; ++row) {
      for (int col = 0; col < cols; ++col) {
        const double cx = (col + 0.5) * stride;
        const double cy = (row + 0.5) * stride;
        for (std::size_t r = 0; r < spec.aspect_ratios.size(); ++r) {
          const double root = std::sqrt(spec.aspect_ratios[r]);
          grid.boxes.push_back(Box::from_center(cx, cy, scale * root, scale / root));
          grid.provenance.push_back(AnchorProvenance{static_cast<int>(level), row, col,
                                                     static_cast<int>(r)});
        }
      }
    }
  }
  return grid;
}

}  // namespace cdet
