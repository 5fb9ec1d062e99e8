#include "cdet/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include <json.hpp>

#include "cdet/error.hpp"
#include "cdet/parallel.hpp"

namespace cdet {
namespace {

using nlohmann::json;

std::string image_id_for(int index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06d", index);
  return buf;
}

bool inside_shape(const std::string& shape, const Box& b, bool pointing_up, double px,
                  double py) {
  if (shape == "rectangle") {
    return px >= b.xmin() && px < b.xmax() && py >= b.ymin() && py < b.ymax();
  }
  if (shape == "ellipse") {
    const double rx = 0.5 * b.width();
    const double ry = 0.5 * b.height();
    const double nx = (px - b.cx()) / rx;
    const double ny = (py - b.cy()) / ry;
    return nx * nx + ny * ny <= 1.0;
  }
  // Isosceles triangle spanning the box, apex at the top or bottom edge.
  if (py < b.ymin() || py >= b.ymax() || px < b.xmin() || px >= b.xmax()) {
    return false;
  }
  const double t = pointing_up ? (py - b.ymin()) / b.height() : (b.ymax() - py) / b.height();
  return std::abs(px - b.cx()) <= 0.5 * b.width() * t;
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

GroundTruth Annotation::ground_truth() const {
  GroundTruth gt;
  for (const auto& o : objects) {
    gt.boxes.push_back(o.box);
    gt.labels.push_back(o.class_id);
  }
  return gt;
}

std::string annotation_to_line(const Annotation& a) {
  json objs = json::array();
  for (const auto& o : a.objects) {
    objs.push_back({{"class", o.class_id},
                    {"box", {o.box.xmin(), o.box.ymin(), o.box.xmax(), o.box.ymax()}},
                    {"difficult", o.difficult}});
  }
  const json j = {{"id", a.image_id}, {"width", a.width}, {"height", a.height}, {"objects", objs}};
  return j.dump();
}

Annotation annotation_from_line(const std::string& line, const std::string& source,
                                std::size_t line_no) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(source, line_no, std::string("invalid JSON: ") + e.what());
  }
  try {
    Annotation a;
    a.image_id = j.at("id").get<std::string>();
    a.width = j.at("width").get<int>();
    a.height = j.at("height").get<int>();
    if (a.width <= 0 || a.height <= 0) {
      throw ParseError(source, line_no, "image size must be positive");
    }
    for (const auto& o : j.at("objects")) {
      const auto& b = o.at("box");
      if (!b.is_array() || b.size() != 4) {
        throw ParseError(source, line_no, "box must have 4 numbers");
      }
      AnnotatedObject obj;
      obj.class_id = o.at("class").get<int>();
      obj.box = Box(b[0].get<double>(), b[1].get<double>(), b[2].get<double>(),
                    b[3].get<double>());
      obj.difficult = o.value("difficult", false);
      a.objects.push_back(obj);
    }
    return a;
  } catch (const ParseError&) {
    throw;
  } catch (const std::exception& e) {
    throw ParseError(source, line_no, e.what());
  }
}

void save_annotations(const std::filesystem::path& path, std::span<const Annotation> annotations) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) {
    throw IoError("annotations: cannot write '" + path.string() + "'");
  }
  for (const auto& a : annotations) {
    os << annotation_to_line(a) << '\n';
  }
  if (!os) {
    throw IoError("annotations: write failed for '" + path.string() + "'");
  }
}

std::vector<Annotation> load_annotations(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("annotations: cannot open '" + path.string() + "'");
  }
  std::vector<Annotation> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    out.push_back(annotation_from_line(line, path.string(), line_no));
  }
  return out;
}

void SyntheticSpec::validate() const {
  if (image_count < 0) {
    throw ConfigError("data: image_count must be >= 0");
  }
  if (image_width <= 0 || image_height <= 0) {
    throw ConfigError("data: image size must be positive");
  }
  if (classes.empty()) {
    throw ConfigError("data: at least one class is required");
  }
  for (const auto& c : classes) {
    if (c != "rectangle" && c != "ellipse" && c != "triangle") {
      throw ConfigError("data: unknown shape class '" + c + "'");
    }
  }
  if (min_objects < 1 || max_objects < min_objects) {
    throw ConfigError("data: need 1 <= min_objects <= max_objects");
  }
  if (!(min_scale > 0.0) || !(max_scale < 1.0) || min_scale > max_scale) {
    throw ConfigError("data: scale range must lie within (0, 1)");
  }
  if (!(overlap_cap >= 0.0) || !(overlap_cap < 1.0)) {
    throw ConfigError("data: overlap_cap must lie in [0, 1)");
  }
  if (!(noise_level >= 0.0)) {
    throw ConfigError("data: noise_level must be >= 0");
  }
}

Sample render_sample(const SyntheticSpec& spec, int index) {
  std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int w = spec.image_width;
  const int h = spec.image_height;

  Sample s;
  s.annotation.image_id = image_id_for(index);
  s.annotation.width = w;
  s.annotation.height = h;

  const int count = std::uniform_int_distribution<int>(spec.min_objects, spec.max_objects)(rng);
  std::uniform_int_distribution<int> class_dist(1, static_cast<int>(spec.classes.size()));
  const double side = std::min(w, h);

  struct Placed {
    int cls;
    Box box;
    bool up;
    double intensity;
  };
  std::vector<Placed> placed;
  for (int k = 0; k < count; ++k) {
    const int cls = class_dist(rng);
    const bool up = unit(rng) < 0.5;
    const double intensity = 150.0 + 105.0 * unit(rng);
    for (int attempt = 0; attempt < 50; ++attempt) {
      const double size = side * (spec.min_scale + (spec.max_scale - spec.min_scale) * unit(rng));
      const double aspect = std::exp(std::log(0.5) + std::log(4.0) * unit(rng));
      const int bw = std::clamp(static_cast<int>(std::lround(size * std::sqrt(aspect))), 2, w);
      const int bh = std::clamp(static_cast<int>(std::lround(size / std::sqrt(aspect))), 2, h);
      const int x0 = std::uniform_int_distribution<int>(0, w - bw)(rng);
      const int y0 = std::uniform_int_distribution<int>(0, h - bh)(rng);
      const Box box(x0, y0, x0 + bw, y0 + bh);
      const bool clash = std::any_of(placed.begin(), placed.end(), [&](const Placed& p) {
        return iou(p.box, box) > spec.overlap_cap;
      });
      if (!clash) {
        placed.push_back(Placed{cls, box, up, intensity});
        break;
      }
    }
  }

  s.image = Image(w, h);
  const double background = 40.0 + 60.0 * unit(rng);
  std::normal_distribution<double> noise(0.0, spec.noise_level * 255.0);
  std::vector<double> canvas(static_cast<std::size_t>(w) * h, background);
  for (const auto& p : placed) {
    const std::string& shape = spec.classes[static_cast<std::size_t>(p.cls - 1)];
    const int x0 = static_cast<int>(p.box.xmin());
    const int y0 = static_cast<int>(p.box.ymin());
    for (int y = y0; y < static_cast<int>(p.box.ymax()); ++y) {
      for (int x = x0; x < static_cast<int>(p.box.xmax()); ++x) {
        if (inside_shape(shape, p.box, p.up, x + 0.5, y + 0.5)) {
          canvas[static_cast<std::size_t>(y) * w + x] = p.intensity;
        }
      }
    }
    s.annotation.objects.push_back(AnnotatedObject{p.cls, p.box, false});
  }
  for (std::size_t i = 0; i < canvas.size(); ++i) {
    const double v = canvas[i] + (spec.noise_level > 0.0 ? noise(rng) : 0.0);
    s.image.pixels[i] = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
  }
  return s;
}

std::vector<Sample> generate_samples(const SyntheticSpec& spec, unsigned threads) {
  spec.validate();
  std::vector<Sample> out(static_cast<std::size_t>(spec.image_count));
  parallel_for(out.size(), threads,
               [&](std::size_t i) { out[i] = render_sample(spec, static_cast<int>(i)); });
  return out;
}

void write_dataset(const std::filesystem::path& dir, std::span<const Sample> samples,
                   unsigned threads) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  if (ec) {
    throw IoError("dataset: cannot create '" + (dir / "images").string() + "': " + ec.message());
  }
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    write_pgm(dir / "images" / (samples[i].annotation.image_id + ".pgm"), samples[i].image);
  });
  std::vector<Annotation> anns;
  anns.reserve(samples.size());
  for (const auto& s : samples) {
    anns.push_back(s.annotation);
  }
  save_annotations(dir / "annotations.jsonl", anns);
}

std::vector<Sample> load_dataset(const std::filesystem::path& dir, unsigned threads) {
  const std::vector<Annotation> anns = load_annotations(dir / "annotations.jsonl");
  std::vector<Sample> out(anns.size());
  parallel_for(anns.size(), threads, [&](std::size_t i) {
    out[i].annotation = anns[i];
    out[i].image = read_pnm(dir / "images" / (anns[i].image_id + ".pgm"));
    if (out[i].image.width != anns[i].width || out[i].image.height != anns[i].height) {
      throw IoError("dataset: image '" + anns[i].image_id + "' size differs from annotation");
    }
  });
  return out;
}

Sample flip(const Sample& s) {
  Sample out;
  out.image = flip_horizontal(s.image);
  out.annotation = s.annotation;
  const double w = s.annotation.width;
  for (auto& o : out.annotation.objects) {
    o.box = Box(w - o.box.xmax(), o.box.ymin(), w - o.box.xmin(), o.box.ymax());
  }
  return out;
}

Sample augment(const Sample& s, std::uint64_t seed, const AugmentOptions& opts) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Sample cur = unit(rng) < opts.flip_probability ? flip(s) : s;
  if (unit(rng) >= opts.crop_probability || cur.annotation.objects.empty()) {
    return cur;
  }
  const double w = cur.annotation.width;
  const double h = cur.annotation.height;
  for (int attempt = 0; attempt < opts.max_crop_attempts; ++attempt) {
    const double scale = opts.min_crop_scale + (1.0 - opts.min_crop_scale) * unit(rng);
    const double cw = w * scale;
    const double ch = h * scale;
    const double x0 = (w - cw) * unit(rng);
    const double y0 = (h - ch) * unit(rng);
    const double sx = w / cw;
    const double sy = h / ch;

    std::vector<AnnotatedObject> kept;
    for (const auto& o : cur.annotation.objects) {
      const double cx = o.box.cx();
      const double cy = o.box.cy();
      if (cx < x0 || cx >= x0 + cw || cy < y0 || cy >= y0 + ch) {
        continue;
      }
      const double nx0 = (std::max(o.box.xmin(), x0) - x0) * sx;
      const double ny0 = (std::max(o.box.ymin(), y0) - y0) * sy;
      const double nx1 = (std::min(o.box.xmax(), x0 + cw) - x0) * sx;
      const double ny1 = (std::min(o.box.ymax(), y0 + ch) - y0) * sy;
      if (nx1 - nx0 < opts.min_box_side || ny1 - ny0 < opts.min_box_side) {
        continue;
      }
      kept.push_back(AnnotatedObject{o.class_id, Box(nx0, ny0, nx1, ny1), o.difficult});
    }
    if (kept.empty()) {
      continue;
    }
    Sample out;
    out.image = resample(cur.image, x0, y0, cw, ch, cur.annotation.width, cur.annotation.height);
    out.annotation = cur.annotation;
    out.annotation.objects = std::move(kept);
    return out;
  }
  return cur;
}

}  // namespace cdet
