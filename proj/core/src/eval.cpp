#include "cdet/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>
#include <unordered_map>

#include "cdet/error.hpp"
#include "cdet/parallel.hpp"

namespace cdet {
namespace {

constexpr double kWeakOverlap = 0.1;
constexpr double kStrongOverlap = 0.5;

struct Ranked {
  const std::string* image_id = nullptr;
  std::size_t order = 0;
  double score = 0.0;
  Box box;
};

enum class Outcome { kTp, kFp, kIgnored };

std::vector<Ranked> rank_detections(std::span<const ImageDetections> dets, int class_id) {
  std::vector<Ranked> out;
  std::size_t order = 0;
  for (const auto& img : dets) {
    for (const auto& d : img.detections) {
      if (d.class_id == class_id) {
        out.push_back(Ranked{&img.image_id, order, d.score, d.box});
      }
      ++order;
    }
  }
  std::sort(out.begin(), out.end(), [](const Ranked& a, const Ranked& b) {
    if (a.score != b.score) {
      return a.score > b.score;
    }
    if (*a.image_id != *b.image_id) {
      return *a.image_id < *b.image_id;
    }
    return a.order < b.order;
  });
  return out;
}

std::unordered_map<std::string, std::size_t> index_by_id(std::span<const Annotation> gts) {
  std::unordered_map<std::string, std::size_t> out;
  for (std::size_t i = 0; i < gts.size(); ++i) {
    out.emplace(gts[i].image_id, i);
  }
  return out;
}

// Greedy matching of ranked detections to same-class ground truth.
std::vector<Outcome> match_ranked(const std::vector<Ranked>& ranked,
                                  std::span<const Annotation> gts,
                                  const std::unordered_map<std::string, std::size_t>& by_id,
                                  int class_id, double threshold) {
  std::vector<std::vector<bool>> claimed(gts.size());
  for (std::size_t i = 0; i < gts.size(); ++i) {
    claimed[i].assign(gts[i].objects.size(), false);
  }
  std::vector<Outcome> out;
  out.reserve(ranked.size());
  for (const auto& r : ranked) {
    const auto it = by_id.find(*r.image_id);
    if (it == by_id.end()) {
      out.push_back(Outcome::kFp);
      continue;
    }
    const Annotation& ann = gts[it->second];
    double best = -1.0;
    std::size_t best_j = 0;
    for (std::size_t j = 0; j < ann.objects.size(); ++j) {
      if (ann.objects[j].class_id != class_id) {
        continue;
      }
      const double o = iou(r.box, ann.objects[j].box);
      if (o > best) {
        best = o;
        best_j = j;
      }
    }
    if (best >= threshold) {
      if (ann.objects[best_j].difficult) {
        out.push_back(Outcome::kIgnored);
      } else if (!claimed[it->second][best_j]) {
        claimed[it->second][best_j] = true;
        out.push_back(Outcome::kTp);
      } else {
        out.push_back(Outcome::kFp);
      }
    } else {
      out.push_back(Outcome::kFp);
    }
  }
  return out;
}

std::size_t count_gt(std::span<const Annotation> gts, int class_id) {
  std::size_t n = 0;
  for (const auto& a : gts) {
    for (const auto& o : a.objects) {
      if (o.class_id == class_id && !o.difficult) {
        ++n;
      }
    }
  }
  return n;
}

bool similar(const std::vector<std::vector<int>>& groups, int a, int b) {
  if (groups.empty()) {
    return true;
  }
  return std::any_of(groups.begin(), groups.end(), [&](const std::vector<int>& g) {
    return std::find(g.begin(), g.end(), a) != g.end() &&
           std::find(g.begin(), g.end(), b) != g.end();
  });
}

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

std::string detection_line(const std::string& image_id, const Detection& det) {
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%s %d %.6f %.4f %.4f %.4f %.4f", image_id.c_str(), det.class_id,
                det.score, det.box.xmin(), det.box.ymin(), det.box.xmax(), det.box.ymax());
  return buf;
}

void write_detections(const std::filesystem::path& path, std::span<const ImageDetections> dets) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) {
    throw IoError("detections: cannot write '" + path.string() + "'");
  }
  for (const auto& img : dets) {
    for (const auto& d : img.detections) {
      os << detection_line(img.image_id, d) << '\n';
    }
  }
  if (!os) {
    throw IoError("detections: write failed for '" + path.string() + "'");
  }
}

std::vector<ImageDetections> read_detections(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) {
    throw IoError("detections: cannot open '" + path.string() + "'");
  }
  std::vector<ImageDetections> out;
  std::unordered_map<std::string, std::size_t> slot;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      continue;
    }
    std::istringstream ls(line);
    std::string id;
    int cls = 0;
    double score = 0.0;
    double x0 = 0.0;
    double y0 = 0.0;
    double x1 = 0.0;
    double y1 = 0.0;
    std::string extra;
    if (!(ls >> id >> cls >> score >> x0 >> y0 >> x1 >> y1) || (ls >> extra)) {
      throw ParseError(path.string(), line_no, "expected 7 fields: id class score x0 y0 x1 y1");
    }
    Detection d;
    d.class_id = cls;
    d.score = score;
    try {
      d.box = Box(x0, y0, x1, y1);
    } catch (const std::invalid_argument& e) {
      throw ParseError(path.string(), line_no, e.what());
    }
    auto [it, inserted] = slot.emplace(id, out.size());
    if (inserted) {
      out.push_back(ImageDetections{id, {}});
    }
    out[it->second].detections.push_back(d);
  }
  return out;
}

double ap_from_curve(std::span<const double> recall, std::span<const double> precision,
                     ApMode mode) {
  if (recall.empty()) {
    return 0.0;
  }
  if (mode == ApMode::kElevenPoint) {
    double ap = 0.0;
    for (int t = 0; t <= 10; ++t) {
      const double level = t / 10.0;
      double p = 0.0;
      for (std::size_t i = 0; i < recall.size(); ++i) {
        if (recall[i] >= level) {
          p = std::max(p, precision[i]);
        }
      }
      ap += p / 11.0;
    }
    return ap;
  }
  std::vector<double> mrec{0.0};
  std::vector<double> mpre{0.0};
  mrec.insert(mrec.end(), recall.begin(), recall.end());
  mpre.insert(mpre.end(), precision.begin(), precision.end());
  mrec.push_back(1.0);
  mpre.push_back(0.0);
  for (std::size_t i = mpre.size() - 1; i-- > 0;) {
    mpre[i] = std::max(mpre[i], mpre[i + 1]);
  }
  double ap = 0.0;
  for (std::size_t i = 1; i < mrec.size(); ++i) {
    if (mrec[i] != mrec[i - 1]) {
      ap += (mrec[i] - mrec[i - 1]) * mpre[i];
    }
  }
  return ap;
}

ApResult average_precision(std::span<const ImageDetections> dets,
                           std::span<const Annotation> gts, int class_id, double iou_threshold,
                           ApMode mode) {
  ApResult out;
  out.num_gt = count_gt(gts, class_id);
  const std::vector<Ranked> ranked = rank_detections(dets, class_id);
  const std::vector<Outcome> outcomes =
      match_ranked(ranked, gts, index_by_id(gts), class_id, iou_threshold);

  std::size_t tp = 0;
  std::size_t fp = 0;
  for (const Outcome o : outcomes) {
    if (o == Outcome::kIgnored) {
      continue;
    }
    ++out.num_det;
    (o == Outcome::kTp ? tp : fp) += 1;
    out.true_positive.push_back(o == Outcome::kTp);
    out.recall.push_back(out.num_gt == 0 ? 0.0
                                         : static_cast<double>(tp) / static_cast<double>(out.num_gt));
    out.precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
  }
  if (out.num_gt == 0 && out.num_det == 0) {
    return out;
  }
  out.ap = out.num_gt == 0 ? 0.0 : ap_from_curve(out.recall, out.precision, mode);
  return out;
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int k = 0; k < 10; ++k) {
    t.push_back(static_cast<double>(50 + 5 * k) / 100.0);
  }
  return t;
}

std::optional<double> coco_ap(std::span<const ImageDetections> dets,
                              std::span<const Annotation> gts, int class_id, ApMode mode) {
  double sum = 0.0;
  for (const double t : coco_thresholds()) {
    const ApResult r = average_precision(dets, gts, class_id, t, mode);
    if (!r.ap) {
      return std::nullopt;
    }
    sum += *r.ap;
  }
  return sum / 10.0;
}

FpCounts& FpCounts::operator+=(const FpCounts& o) noexcept {
  loc += o.loc;
  sim += o.sim;
  oth += o.oth;
  bg += o.bg;
  return *this;
}

FpCounts fp_taxonomy(std::span<const ImageDetections> dets, std::span<const Annotation> gts,
                     int class_id, const std::vector<std::vector<int>>& similarity_groups,
                     std::vector<FpType>* types) {
  const auto by_id = index_by_id(gts);
  const std::vector<Ranked> ranked = rank_detections(dets, class_id);
  const std::vector<Outcome> outcomes =
      match_ranked(ranked, gts, by_id, class_id, kStrongOverlap);
  FpCounts counts;
  if (types != nullptr) {
    types->clear();
  }
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    if (outcomes[i] != Outcome::kFp) {
      continue;
    }
    double same = 0.0;
    double sim = 0.0;
    double other = 0.0;
    const auto it = by_id.find(*ranked[i].image_id);
    if (it != by_id.end()) {
      for (const auto& o : gts[it->second].objects) {
        const double ov = iou(ranked[i].box, o.box);
        if (o.class_id == class_id) {
          same = std::max(same, ov);
        } else if (similar(similarity_groups, class_id, o.class_id)) {
          sim = std::max(sim, ov);
        } else {
          other = std::max(other, ov);
        }
      }
    }
    FpType t = FpType::kBg;
    if (same >= kWeakOverlap) {
      t = FpType::kLoc;
      ++counts.loc;
    } else if (sim >= kWeakOverlap) {
      t = FpType::kSim;
      ++counts.sim;
    } else if (other >= kWeakOverlap) {
      t = FpType::kOth;
      ++counts.oth;
    } else {
      ++counts.bg;
    }
    if (types != nullptr) {
      types->push_back(t);
    }
  }
  return counts;
}

EvalReport evaluate(std::span<const ImageDetections> dets, std::span<const Annotation> gts,
                    const EvalOptions& opts) {
  EvalReport report;
  report.mode = opts.mode;
  const auto n = static_cast<std::size_t>(std::max(0, opts.num_classes - 1));
  report.classes.resize(n);
  parallel_for(n, opts.threads, [&](std::size_t i) {
    const int cls = static_cast<int>(i) + 1;
    ClassReport& c = report.classes[i];
    c.class_id = cls;
    c.name = i < opts.class_names.size() ? opts.class_names[i] : "class" + std::to_string(cls);
    ApResult r50 = average_precision(dets, gts, cls, 0.5, opts.mode);
    c.num_gt = r50.num_gt;
    c.num_det = r50.num_det;
    c.ap50 = r50.ap;
    c.recall = std::move(r50.recall);
    c.precision = std::move(r50.precision);
    c.coco = coco_ap(dets, gts, cls, opts.mode);
    c.fp = fp_taxonomy(dets, gts, cls, opts.similarity_groups);
  });

  double sum50 = 0.0;
  double sum_coco = 0.0;
  std::size_t counted = 0;
  for (const auto& c : report.classes) {
    report.fp += c.fp;
    if (c.ap50) {
      sum50 += *c.ap50;
      sum_coco += c.coco.value_or(0.0);
      ++counted;
    }
  }
  if (counted > 0) {
    report.map50 = sum50 / static_cast<double>(counted);
    report.coco_map = sum_coco / static_cast<double>(counted);
  }
  return report;
}

std::string format_report(const EvalReport& report) {
  std::ostringstream os;
  os << "# detection evaluation report\n";
  os << "ap_mode: " << (report.mode == ApMode::kAllPoints ? "all-points" : "11-point") << '\n';
  os << "classes: " << report.classes.size() << '\n';
  os << "class name gt det ap50 ap50_95 fp_loc fp_sim fp_oth fp_bg\n";
  for (const auto& c : report.classes) {
    os << c.class_id << ' ' << c.name << ' ' << c.num_gt << ' ' << c.num_det << ' '
       << (c.ap50 ? fixed6(*c.ap50) : "-") << ' ' << (c.coco ? fixed6(*c.coco) : "-") << ' '
       << c.fp.loc << ' ' << c.fp.sim << ' ' << c.fp.oth << ' ' << c.fp.bg << '\n';
  }
  os << "mAP@0.5: " << fixed6(report.map50) << '\n';
  os << "AP@[0.50:0.95]: " << fixed6(report.coco_map) << '\n';
  os << "false_positives: loc " << report.fp.loc << " sim " << report.fp.sim << " oth "
     << report.fp.oth << " bg " << report.fp.bg << " total " << report.fp.total() << '\n';
  return os.str();
}

void write_pr_curves(const std::filesystem::path& dir, const EvalReport& report) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) {
    throw IoError("eval: cannot create '" + dir.string() + "': " + ec.message());
  }
  for (const auto& c : report.classes) {
    const auto path = dir / ("pr_class" + std::to_string(c.class_id) + ".txt");
    std::ofstream os(path, std::ios::trunc);
    if (!os) {
      throw IoError("eval: cannot write '" + path.string() + "'");
    }
    os << "# recall precision\n";
    for (std::size_t i = 0; i < c.recall.size(); ++i) {
      os << fixed6(c.recall[i]) << ' ' << fixed6(c.precision[i]) << '\n';
    }
  }
}

}  // namespace cdet
