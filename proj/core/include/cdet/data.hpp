#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "cdet/geometry.hpp"
#include "cdet/image.hpp"
#include "cdet/matching.hpp"

namespace cdet {

struct AnnotatedObject {
  int class_id = 1;
  Box box;
  bool difficult = false;

  friend bool operator==(const AnnotatedObject&, const AnnotatedObject&) = default;
};

struct Annotation {
  std::string image_id;
  int width = 0;
  int height = 0;
  std::vector<AnnotatedObject> objects;

  GroundTruth ground_truth() const;

  friend bool operator==(const Annotation&, const Annotation&) = default;
};

/// Annotation files hold one JSON object per line:
///   {"id":"000001","width":128,"height":128,
///    "objects":[{"class":1,"box":[xmin,ymin,xmax,ymax],"difficult":false}]}
void save_annotations(const std::filesystem::path& path, std::span<const Annotation> annotations);
/// Throws ParseError naming the offending line.
std::vector<Annotation> load_annotations(const std::filesystem::path& path);
std::string annotation_to_line(const Annotation& a);
Annotation annotation_from_line(const std::string& line, const std::string& source,
                                std::size_t line_no);

/// Parameters of the synthetic shapes dataset. Class k (1-based) draws the
/// shape classes[k - 1].
struct SyntheticSpec {
  std::uint64_t seed = 1;
  int image_count = 100;
  int image_width = 128;
  int image_height = 128;
  std::vector<std::string> classes{"rectangle", "ellipse", "triangle"};
  int min_objects = 1;
  int max_objects = 3;
  double min_scale = 0.12;  // object side as a fraction of the image side
  double max_scale = 0.5;
  double overlap_cap = 0.3;
  double noise_level = 0.04;  // Gaussian pixel noise std as a fraction of 255

  /// Throws ConfigError.
  void validate() const;
  int num_classes() const noexcept { return static_cast<int>(classes.size()) + 1; }
};

struct Sample {
  Image image;
  Annotation annotation;
};

/// Renders image `index` from its own derived seed, so any subset can be
/// regenerated independently.
Sample render_sample(const SyntheticSpec& spec, int index);
std::vector<Sample> generate_samples(const SyntheticSpec& spec, unsigned threads = 1);

/// Writes `dir/annotations.jsonl` and `dir/images/<id>.pgm`.
void write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples,
                   unsigned threads = 1);
std::vector<Sample> load_dataset(const std::filesystem::path& dir, unsigned threads = 1);

/// Mirrors pixels and boxes: x -> W - x.
Sample flip(const Sample& s);

struct AugmentOptions {
  double flip_probability = 0.5;
  double crop_probability = 0.5;
  double min_crop_scale = 0.6;
  double min_box_side = 2.0;  // pixels after resampling
  int max_crop_attempts = 50;
};

/// Random horizontal flip plus a random square-aspect crop resampled back to
/// the original size. Crops that would drop every box are resampled; boxes
/// are kept when their center lies inside the crop.
Sample augment(const Sample& s, std::uint64_t seed, const AugmentOptions& opts = {});

/// SplitMix64 step used to derive per-item seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept;

}  // namespace cdet
