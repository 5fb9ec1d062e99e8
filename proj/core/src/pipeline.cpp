#include "cdet/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

#include "cdet/error.hpp"
#include "cdet/image.hpp"
#include "cdet/parallel.hpp"

namespace cdet {
namespace {

constexpr int kArmClasses = 2;

BoxDelta offsets_at(const Tensor& pred, std::size_t anchor, int num_classes) {
  const std::size_t row = static_cast<std::size_t>(num_classes) + 4;
  const double* p = pred.data() + anchor * row + static_cast<std::size_t>(num_classes);
  return BoxDelta{p[0], p[1], p[2], p[3]};
}

// Cross-entropy against the background label for every anchor.
std::vector<double> background_losses(const Tensor& pred, int num_classes) {
  const auto rows = static_cast<std::size_t>(pred.shape().h);
  const std::size_t row = static_cast<std::size_t>(num_classes) + 4;
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    out[i] = softmax_cross_entropy(
        std::span<const double>(pred.data() + i * row, static_cast<std::size_t>(num_classes)), 0);
  }
  return out;
}

void check_pred(const Tensor& pred, std::size_t anchors, int num_classes, const char* what) {
  const Shape& s = pred.shape();
  if (s.c != 1 || static_cast<std::size_t>(s.h) != anchors || s.w != num_classes + 4) {
    throw std::invalid_argument(std::string(what) + ": prediction shape " + s.str() +
                                " does not match " + std::to_string(anchors) + " anchors");
  }
}

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

void TrainConfig::validate() const {
  if (lr_schedule.empty()) {
    throw ConfigError("train: lr_schedule must not be empty");
  }
  if (lr_schedule.front().step != 0) {
    throw ConfigError("train: lr_schedule must start at step 0");
  }
  for (std::size_t i = 0; i < lr_schedule.size(); ++i) {
    if (!(lr_schedule[i].lr > 0.0) || !std::isfinite(lr_schedule[i].lr)) {
      throw ConfigError("train: learning rates must be positive");
    }
    if (i > 0 && lr_schedule[i].step <= lr_schedule[i - 1].step) {
      throw ConfigError("train: lr_schedule steps must be strictly ascending");
    }
  }
  if (momentum < 0.0 || momentum >= 1.0) {
    throw ConfigError("train: momentum must be in [0, 1)");
  }
  if (weight_decay < 0.0) {
    throw ConfigError("train: weight_decay must be >= 0");
  }
  if (batch_size < 1) {
    throw ConfigError("train: batch_size must be >= 1");
  }
  if (max_steps < 0) {
    throw ConfigError("train: max_steps must be >= 0");
  }
  if (!(theta > 0.0 && theta <= 1.0)) {
    throw ConfigError("train: theta must be in (0, 1]");
  }
  if (!(pos_threshold > 0.0 && pos_threshold < 1.0)) {
    throw ConfigError("train: pos_threshold must be in (0, 1)");
  }
  if (!(neg_pos_ratio >= 0.0)) {
    throw ConfigError("train: neg_pos_ratio must be >= 0");
  }
  if (!tcb_enabled && (cascade_enabled || filtering_enabled)) {
    throw ConfigError("train: cascade and filtering need the refinement branch (tcb_enabled)");
  }
}

void TrainConfig::check_network(const NetworkConfig& net) const {
  if (net.tcb_enabled != tcb_enabled) {
    throw ConfigError("train: tcb_enabled differs between network and training settings");
  }
}

double TrainConfig::lr_at(int step) const {
  double lr = lr_schedule.front().lr;
  for (const auto& s : lr_schedule) {
    if (s.step <= step) {
      lr = s.lr;
    }
  }
  return lr;
}

void InferenceConfig::validate() const {
  if (!(theta > 0.0 && theta <= 1.0)) {
    throw ConfigError("inference: theta must be in (0, 1]");
  }
  if (!(nms_overlap > 0.0 && nms_overlap <= 1.0)) {
    throw ConfigError("inference: nms_overlap must be in (0, 1]");
  }
  if (top_k == 0 || keep == 0) {
    throw ConfigError("inference: top_k and keep must be positive");
  }
}

InferenceConfig inference_config(const TrainConfig& train) {
  InferenceConfig c;
  c.theta = train.theta;
  c.filtering_enabled = train.filtering_enabled;
  c.cascade_enabled = train.cascade_enabled;
  c.variances = train.variances;
  return c;
}

std::vector<Box> refine_anchors(const AnchorGrid& anchors, const Tensor& arm_pred,
                                const Variances& var) {
  check_pred(arm_pred, anchors.size(), kArmClasses, "refine_anchors");
  std::vector<Box> out;
  out.reserve(anchors.size());
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    out.push_back(decode(anchors.boxes[i], offsets_at(arm_pred, i, kArmClasses), var));
  }
  return out;
}

std::vector<double> arm_negative_confidence(const Tensor& arm_pred) {
  const auto rows = static_cast<std::size_t>(arm_pred.shape().h);
  const std::size_t row = kArmClasses + 4;
  std::vector<double> out(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    const double b = arm_pred[i * row];
    const double o = arm_pred[i * row + 1];
    out[i] = 1.0 / (1.0 + std::exp(o - b));
  }
  return out;
}

ImagePlan plan_image(const Tensor* arm_pred, const Tensor& odm_pred, const AnchorGrid& anchors,
                     const GroundTruth& gt, int num_classes, const TrainConfig& cfg) {
  check_pred(odm_pred, anchors.size(), num_classes, "plan_image");
  gt.validate(num_classes);
  ImagePlan plan;
  if (arm_pred != nullptr) {
    check_pred(*arm_pred, anchors.size(), kArmClasses, "plan_image");
    plan.arm = match(anchors.boxes, gt, cfg.pos_threshold, cfg.variances);
    plan.arm_mining = mine_hard_negatives(background_losses(*arm_pred, kArmClasses), *plan.arm,
                                          cfg.neg_pos_ratio);
  } else if (cfg.cascade_enabled || cfg.filtering_enabled) {
    throw ConfigError("plan_image: cascade and filtering need refinement predictions");
  }

  plan.odm_anchors = cfg.cascade_enabled ? refine_anchors(anchors, *arm_pred, cfg.variances)
                                         : anchors.boxes;
  if (cfg.filtering_enabled) {
    plan.filtered = filter_negatives(arm_negative_confidence(*arm_pred), cfg.theta);
  }
  plan.odm = match(plan.odm_anchors, gt, cfg.pos_threshold, cfg.variances);
  apply_filter(plan.odm, plan.filtered, cfg.filter_positives);
  plan.odm_mining =
      mine_hard_negatives(background_losses(odm_pred, num_classes), plan.odm, cfg.neg_pos_ratio);
  return plan;
}

ImageLossInput loss_input(const ImagePlan& plan, const Tensor* arm_pred, const Tensor& odm_pred,
                          int num_classes) {
  ImageLossInput in;
  if (arm_pred != nullptr && plan.arm) {
    in.arm = StageInput{arm_pred, kArmClasses, &*plan.arm, &*plan.arm_mining};
  }
  in.odm = StageInput{&odm_pred, num_classes, &plan.odm, &plan.odm_mining};
  return in;
}

ImagePlan plan_sample(Network& net, const Sample& sample, const TrainConfig& cfg) {
  Graph g;
  const NetworkOutputs o = net.forward(g, to_tensor(sample.image));
  const Tensor* arm = o.arm ? &g.value(*o.arm) : nullptr;
  return plan_image(arm, g.value(o.odm), net.anchors(), sample.annotation.ground_truth(),
                    net.config().num_classes, cfg);
}

namespace {

void stage_records(std::ostream& os, const std::string& image_id, const char* stage,
                   const MatchAssignment& a, const MiningSelection& mining) {
  std::vector<bool> mined(a.size(), false);
  for (const std::size_t i : mining.negatives) {
    mined[i] = true;
  }
  for (std::size_t i = 0; i < a.size(); ++i) {
    const AnchorStatus st = a.status[i];
    if (st == AnchorStatus::kNegative && !mined[i]) {
      continue;
    }
    const char* name = st == AnchorStatus::kPositive   ? "positive"
                       : st == AnchorStatus::kFiltered ? "filtered"
                                                       : "mined";
    const BoxDelta& d = a.target[i];
    os << image_id << ' ' << stage << ' ' << i << ' ' << name << ' ' << a.matched_gt[i] << ' '
       << a.label[i] << ' ' << format_double(d.dx) << ' ' << format_double(d.dy) << ' '
       << format_double(d.dw) << ' ' << format_double(d.dh) << '\n';
  }
}

}  // namespace

std::string assignment_records(const std::string& image_id, const ImagePlan& plan) {
  std::ostringstream os;
  if (plan.arm && plan.arm_mining) {
    stage_records(os, image_id, "arm", *plan.arm, *plan.arm_mining);
  }
  stage_records(os, image_id, "odm", plan.odm, plan.odm_mining);
  return os.str();
}

LossBreakdown batch_gradients(Network& net, std::span<const Sample> batch, const TrainConfig& cfg) {
  const int classes = net.config().num_classes;
  net.params().zero_grad();
  std::vector<Graph> graphs(batch.size(),
                           Graph(cfg.float_gemm ? GemmPrecision::kSingle : GemmPrecision::kDouble));
  std::vector<NetworkOutputs> outs(batch.size());
  std::vector<ImagePlan> plans(batch.size());
  std::vector<ImageLossInput> inputs(batch.size());
  for (std::size_t b = 0; b < batch.size(); ++b) {
    outs[b] = net.forward(graphs[b], to_tensor(batch[b].image));
    const Tensor* arm = outs[b].arm ? &graphs[b].value(*outs[b].arm) : nullptr;
    const Tensor& odm = graphs[b].value(outs[b].odm);
    if (!odm.all_finite() || (arm != nullptr && !arm->all_finite())) {
      throw NumericError("train: non-finite predictions for image '" +
                         batch[b].annotation.image_id + "'");
    }
    try {
      plans[b] = plan_image(arm, odm, net.anchors(), batch[b].annotation.ground_truth(), classes, cfg);
    } catch (const std::invalid_argument& e) {
      throw NumericError("train: degenerate refined anchors for image '" +
                         batch[b].annotation.image_id + "': " + e.what());
    }
    inputs[b] = loss_input(plans[b], arm, odm, classes);
  }
  std::vector<ImageLossGrad> grads;
  const LossBreakdown loss = total_loss(inputs, &grads);
  if (!std::isfinite(loss.total)) {
    return loss;
  }
  for (std::size_t b = 0; b < batch.size(); ++b) {
    graphs[b].grad(outs[b].odm) = std::move(grads[b].odm);
    if (outs[b].arm) {
      graphs[b].grad(*outs[b].arm) = std::move(grads[b].arm);
    }
    graphs[b].backward();
  }
  return loss;
}

std::string step_record_json(const StepRecord& r) {
  std::ostringstream os;
  os << "{\"step\":" << r.step << ",\"lr\":" << format_double(r.lr)
     << ",\"loss\":" << format_double(r.loss.total)
     << ",\"arm_cls\":" << format_double(r.loss.arm_cls)
     << ",\"arm_reg\":" << format_double(r.loss.arm_reg)
     << ",\"odm_cls\":" << format_double(r.loss.odm_cls)
     << ",\"odm_reg\":" << format_double(r.loss.odm_reg) << ",\"n_arm\":" << r.loss.n_arm
     << ",\"n_odm\":" << r.loss.n_odm << ",\"images\":[";
  for (std::size_t i = 0; i < r.image_ids.size(); ++i) {
    os << (i ? "," : "") << '"' << r.image_ids[i] << '"';
  }
  os << "]}";
  return os.str();
}

TrainResult train(Network& net, std::span<const Sample> data, const TrainConfig& cfg,
                  const StepCallback& on_step) {
  cfg.validate();
  cfg.check_network(net.config());
  if (data.empty() && cfg.max_steps > 0) {
    throw ConfigError("train: empty dataset");
  }
  init(net.params(), cfg.init_scheme, cfg.seed);

  TrainResult result;
  std::vector<std::size_t> order(data.size());
  std::size_t cursor = order.size();
  std::uint64_t epoch = 0;
  std::vector<Sample> batch;
  for (int step = 0; step < cfg.max_steps; ++step) {
    batch.clear();
    StepRecord rec;
    rec.step = step;
    rec.lr = cfg.lr_at(step);
    for (int j = 0; j < cfg.batch_size; ++j) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(mix_seed(cfg.seed, 0x5eed0000ULL + epoch++));
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      const Sample& s = data[order[cursor++]];
      const auto salt = static_cast<std::uint64_t>(step) * 1024U + static_cast<std::uint64_t>(j);
      batch.push_back(cfg.augment ? augment(s, mix_seed(cfg.seed, salt), cfg.augment_options) : s);
      rec.image_ids.push_back(s.annotation.image_id);
    }
    rec.loss = batch_gradients(net, batch, cfg);
    if (!std::isfinite(rec.loss.total)) {
      std::ostringstream os;
      os << "train: non-finite loss at step " << step << ": " << step_record_json(rec);
      for (const auto& s : batch) {
        os << "\n  " << annotation_to_line(s.annotation);
      }
      throw NumericError(os.str());
    }
    sgd_step(net.params(), rec.lr, cfg.momentum, cfg.weight_decay);
    if (on_step) {
      on_step(rec);
    }
    result.steps.push_back(std::move(rec));
  }
  return result;
}

std::vector<Detection> postprocess(const Tensor* arm_pred, const Tensor& odm_pred,
                                   const AnchorGrid& anchors, ImageExtent extent, int num_classes,
                                   const InferenceConfig& cfg, InferenceTrace* trace) {
  cfg.validate();
  check_pred(odm_pred, anchors.size(), num_classes, "postprocess");
  if (arm_pred != nullptr) {
    check_pred(*arm_pred, anchors.size(), kArmClasses, "postprocess");
  }
  const bool filtering = cfg.filtering_enabled && arm_pred != nullptr;
  const bool cascade = cfg.cascade_enabled && arm_pred != nullptr;

  std::vector<char> keep(anchors.size(), 1);
  if (filtering) {
    for (const std::size_t i : filter_negatives(arm_negative_confidence(*arm_pred), cfg.theta)) {
      keep[i] = 0;
    }
  }

  struct Candidate {
    std::size_t anchor;
    int cls;
    double score;
  };
  std::vector<Candidate> cands;
  const auto k = static_cast<std::size_t>(num_classes);
  const std::size_t row = k + 4;
  std::vector<double> probs(k);
  std::size_t kept = 0;
  for (std::size_t i = 0; i < anchors.size(); ++i) {
    if (keep[i] == 0) {
      continue;
    }
    ++kept;
    const double* logits = odm_pred.data() + i * row;
    const double mx = *std::max_element(logits, logits + k);
    double z = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      probs[c] = std::exp(logits[c] - mx);
      z += probs[c];
    }
    for (std::size_t c = 1; c < k; ++c) {
      cands.push_back(Candidate{i, static_cast<int>(c), probs[c] / z});
    }
  }
  const std::size_t pairs = cands.size();
  const auto by_score = [](const Candidate& a, const Candidate& b) {
    if (a.score != b.score) {
      return a.score > b.score;
    }
    if (a.anchor != b.anchor) {
      return a.anchor < b.anchor;
    }
    return a.cls < b.cls;
  };
  const std::size_t top = std::min(cfg.top_k, cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(top), cands.end(),
                    by_score);
  cands.resize(top);

  std::vector<std::vector<Detection>> per_class(k);
  std::vector<std::vector<std::size_t>> per_class_anchor(k);
  for (const Candidate& c : cands) {
    const Box ref = cascade ? decode(anchors.boxes[c.anchor],
                                     offsets_at(*arm_pred, c.anchor, kArmClasses), cfg.variances)
                            : anchors.boxes[c.anchor];
    const Box box =
        decode(ref, offsets_at(odm_pred, c.anchor, num_classes), cfg.variances, extent);
    per_class[static_cast<std::size_t>(c.cls)].push_back(Detection{c.cls, c.score, box});
    per_class_anchor[static_cast<std::size_t>(c.cls)].push_back(c.anchor);
  }

  std::vector<Candidate> survivors;
  std::vector<Detection> boxes;
  for (std::size_t c = 1; c < k; ++c) {
    for (const std::size_t idx : nms_indices(per_class[c], cfg.nms_overlap, per_class[c].size())) {
      survivors.push_back(
          Candidate{per_class_anchor[c][idx], static_cast<int>(c), per_class[c][idx].score});
      boxes.push_back(per_class[c][idx]);
    }
  }
  const std::size_t after_nms = survivors.size();
  std::vector<std::size_t> idx(survivors.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return by_score(survivors[a], survivors[b]); });
  if (idx.size() > cfg.keep) {
    idx.resize(cfg.keep);
  }
  std::vector<Detection> out;
  out.reserve(idx.size());
  for (const std::size_t i : idx) {
    out.push_back(boxes[i]);
  }
  if (trace != nullptr) {
    *trace = InferenceTrace{anchors.size(), kept, pairs, top, after_nms, out.size()};
  }
  return out;
}

std::vector<Detection> infer(Network& net, const Image& image, const InferenceConfig& cfg,
                             InferenceTrace* trace) {
  Graph g;
  const NetworkOutputs outs = net.forward(g, to_tensor(image));
  const Tensor* arm = outs.arm ? &g.value(*outs.arm) : nullptr;
  const ImageExtent extent{static_cast<double>(image.width), static_cast<double>(image.height)};
  return postprocess(arm, g.value(outs.odm), net.anchors(), extent, net.config().num_classes, cfg,
                     trace);
}

std::vector<ImageDetections> infer_all(Network& net, std::span<const Sample> samples,
                                       const InferenceConfig& cfg, unsigned threads) {
  std::vector<ImageDetections> out(samples.size());
  parallel_for(samples.size(), threads, [&](std::size_t i) {
    out[i].image_id = samples[i].annotation.image_id;
    out[i].detections = infer(net, samples[i].image, cfg);
  });
  return out;
}

std::vector<Annotation> annotations_of(std::span<const Sample> samples) {
  std::vector<Annotation> out;
  out.reserve(samples.size());
  for (const auto& s : samples) {
    out.push_back(s.annotation);
  }
  return out;
}

std::string variant_name(Variant v) {
  switch (v) {
    case Variant::kFull:
      return "full";
    case Variant::kNoFiltering:
      return "-filtering";
    case Variant::kNoCascade:
      return "-filtering-cascade";
    case Variant::kNoTcb:
      return "-filtering-cascade-tcb";
  }
  return "?";
}

void apply_variant(Variant v, NetworkConfig& net, TrainConfig& train) {
  if (v == Variant::kFull) {
    return;
  }
  train.filtering_enabled = false;
  if (v == Variant::kNoFiltering) {
    return;
  }
  train.cascade_enabled = false;
  if (v == Variant::kNoCascade) {
    return;
  }
  train.tcb_enabled = false;
  net.tcb_enabled = false;
}

double median(std::vector<double> v) {
  if (v.empty()) {
    return 0.0;
  }
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::vector<AblationRow> run_ablation(const NetworkConfig& net, const TrainConfig& train_cfg,
                                      std::span<const Sample> train_set,
                                      std::span<const Sample> test_set,
                                      const EvalOptions& eval_opts,
                                      std::span<const std::uint64_t> seeds,
                                      const std::function<void(const AblationProgress&)>& progress) {
  const std::vector<Annotation> gts = annotations_of(test_set);
  std::vector<AblationRow> rows;
  for (const Variant v : kAllVariants) {
    AblationRow row;
    row.variant = v;
    for (const std::uint64_t seed : seeds) {
      const auto t0 = std::chrono::steady_clock::now();
      NetworkConfig n = net;
      TrainConfig t = train_cfg;
      apply_variant(v, n, t);
      t.seed = seed;
      Network model(n);
      train(model, train_set, t);
      const auto dets = infer_all(model, test_set, inference_config(t), eval_opts.threads);
      const EvalReport report = evaluate(dets, gts, eval_opts);
      row.map50.push_back(report.map50);
      if (progress) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        progress(AblationProgress{v, seed, report.map50, secs});
      }
    }
    row.median = median(row.map50);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string format_ablation(std::span<const AblationRow> rows) {
  std::ostringstream os;
  os << "variant map50_median map50_per_seed\n";
  for (const auto& r : rows) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", 100.0 * r.median);
    os << variant_name(r.variant) << ' ' << buf;
    for (const double m : r.map50) {
      std::snprintf(buf, sizeof(buf), "%.4f", 100.0 * m);
      os << ' ' << buf;
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace cdet
