#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cdet/data.hpp"
#include "cdet/eval.hpp"
#include "cdet/loss.hpp"
#include "cdet/matching.hpp"
#include "cdet/network.hpp"

namespace cdet {

struct LrStep {
  int step = 0;
  double lr = 1e-3;

  friend bool operator==(const LrStep&, const LrStep&) = default;
};

struct TrainConfig {
  std::vector<LrStep> lr_schedule{{0, 1e-3}};
  double momentum = 0.9;
  double weight_decay = 5e-4;
  int batch_size = 2;
  int max_steps = 2000;
  std::uint64_t seed = 1;
  double theta = 0.99;
  /// Filtered anchors are dropped from the detection stage even when matched.
  bool filter_positives = true;
  bool cascade_enabled = true;
  bool tcb_enabled = true;
  bool filtering_enabled = true;
  double pos_threshold = 0.5;
  double neg_pos_ratio = 3.0;
  bool augment = true;
  AugmentOptions augment_options;
  /// Convolution products in float during training; tensors stay double.
  bool float_gemm = true;
  InitScheme init_scheme = InitScheme::kXavier;
  Variances variances;

  /// Throws ConfigError.
  void validate() const;
  /// Throws ConfigError when the flags need a branch the network lacks.
  void check_network(const NetworkConfig& net) const;
  /// Learning rate of the last schedule entry whose step is <= `step`.
  double lr_at(int step) const;
};

struct InferenceConfig {
  double theta = 0.99;
  bool filtering_enabled = true;
  bool cascade_enabled = true;
  std::size_t top_k = 400;
  double nms_overlap = 0.45;
  std::size_t keep = 200;
  Variances variances;

  void validate() const;
};

/// Inference settings sharing the training run's theta and ablation flags.
InferenceConfig inference_config(const TrainConfig& train);

/// Frozen discrete decisions of one training image.
struct ImagePlan {
  std::optional<MatchAssignment> arm;
  std::optional<MiningSelection> arm_mining;
  MatchAssignment odm;
  MiningSelection odm_mining;
  std::vector<Box> odm_anchors;  // refined when the cascade is on, tiled otherwise
  std::vector<std::size_t> filtered;
};

/// Matches, filters and mines one image from its stage predictions.
/// `arm_pred` may be null for networks without a refinement branch.
ImagePlan plan_image(const Tensor* arm_pred, const Tensor& odm_pred, const AnchorGrid& anchors,
                     const GroundTruth& gt, int num_classes, const TrainConfig& cfg);

/// Plan for one sample under the current weights.
ImagePlan plan_sample(Network& net, const Sample& sample, const TrainConfig& cfg);

/// One line per positive, filtered or mined-negative anchor of each stage:
/// `image stage anchor status gt label dx dy dw dh`.
std::string assignment_records(const std::string& image_id, const ImagePlan& plan);

ImageLossInput loss_input(const ImagePlan& plan, const Tensor* arm_pred, const Tensor& odm_pred,
                          int num_classes);

/// Anchors fed to the detection stage: tiled anchors decoded by the ARM
/// offsets (not clipped).
std::vector<Box> refine_anchors(const AnchorGrid& anchors, const Tensor& arm_pred,
                                const Variances& var);

/// Background confidence of every anchor from the ARM logits.
std::vector<double> arm_negative_confidence(const Tensor& arm_pred);

/// Forward, plan, loss and backward over one batch. Parameter gradients are
/// zeroed first and hold the batch gradient afterwards.
LossBreakdown batch_gradients(Network& net, std::span<const Sample> batch, const TrainConfig& cfg);

struct StepRecord {
  int step = 0;
  double lr = 0.0;
  LossBreakdown loss;
  std::vector<std::string> image_ids;
};

struct TrainResult {
  std::vector<StepRecord> steps;
};

using StepCallback = std::function<void(const StepRecord&)>;

/// Initializes the network from `cfg.seed`, then runs `cfg.max_steps` SGD
/// steps over seeded shuffles of `data`. Throws NumericError on a non-finite
/// loss.
TrainResult train(Network& net, std::span<const Sample> data, const TrainConfig& cfg,
                  const StepCallback& on_step = {});

std::string step_record_json(const StepRecord& r);

/// Candidate counts at every stage of the inference cascade. Pairs are
/// (anchor, foreground class) candidates.
struct InferenceTrace {
  std::size_t anchors = 0;
  std::size_t anchors_kept = 0;
  std::size_t pairs = 0;
  std::size_t after_top_k = 0;
  std::size_t after_nms = 0;
  std::size_t final = 0;
};

/// The inference cascade over raw stage predictions.
std::vector<Detection> postprocess(const Tensor* arm_pred, const Tensor& odm_pred,
                                   const AnchorGrid& anchors, ImageExtent extent, int num_classes,
                                   const InferenceConfig& cfg, InferenceTrace* trace = nullptr);

std::vector<Detection> infer(Network& net, const Image& image, const InferenceConfig& cfg,
                             InferenceTrace* trace = nullptr);

std::vector<ImageDetections> infer_all(Network& net, std::span<const Sample> samples,
                                       const InferenceConfig& cfg, unsigned threads = 1);

std::vector<Annotation> annotations_of(std::span<const Sample> samples);

enum class Variant { kFull, kNoFiltering, kNoCascade, kNoTcb };

inline constexpr Variant kAllVariants[] = {Variant::kFull, Variant::kNoFiltering,
                                           Variant::kNoCascade, Variant::kNoTcb};

std::string variant_name(Variant v);
/// Switches off the variant's components (each variant drops everything the
/// previous one dropped).
void apply_variant(Variant v, NetworkConfig& net, TrainConfig& train);

struct AblationRow {
  Variant variant = Variant::kFull;
  std::vector<double> map50;  // one per seed
  double median = 0.0;
};

struct AblationProgress {
  Variant variant = Variant::kFull;
  std::uint64_t seed = 0;
  double map50 = 0.0;
  double seconds = 0.0;
};

std::vector<AblationRow> run_ablation(const NetworkConfig& net, const TrainConfig& train,
                                      std::span<const Sample> train_set,
                                      std::span<const Sample> test_set,
                                      const EvalOptions& eval_opts,
                                      std::span<const std::uint64_t> seeds,
                                      const std::function<void(const AblationProgress&)>& progress = {});

std::string format_ablation(std::span<const AblationRow> rows);

double median(std::vector<double> v);

}  // namespace cdet
