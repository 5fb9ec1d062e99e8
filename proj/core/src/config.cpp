#include "cdet/config.hpp"

#include <fstream>
#include <sstream>

#include "cdet/error.hpp"
#include "cdet/parallel.hpp"
#include "json.hpp"

namespace cdet {
namespace {

using nlohmann::json;

const char* init_name(InitScheme s) { return s == InitScheme::kXavier ? "xavier" : "gaussian"; }

InitScheme init_from(const std::string& s) {
  if (s == "xavier") {
    return InitScheme::kXavier;
  }
  if (s == "gaussian") {
    return InitScheme::kGaussian;
  }
  throw ConfigError("train.init_scheme: expected \"xavier\" or \"gaussian\", got \"" + s + "\"");
}

const char* mode_name(ApMode m) { return m == ApMode::kAllPoints ? "all-points" : "11-point"; }

ApMode mode_from(const std::string& s) {
  if (s == "all-points") {
    return ApMode::kAllPoints;
  }
  if (s == "11-point") {
    return ApMode::kElevenPoint;
  }
  throw ConfigError("eval.ap_mode: expected \"all-points\" or \"11-point\", got \"" + s + "\"");
}

json variances_json(const Variances& v) { return json::array({v.x, v.y, v.w, v.h}); }

json to_tree(const RunConfig& c) {
  json lr = json::array();
  for (const auto& s : c.train.lr_schedule) {
    lr.push_back(json::array({s.step, s.lr}));
  }
  const NetworkConfig& n = c.network;
  const TrainConfig& t = c.train;
  const SyntheticSpec& d = c.data;
  return json{
      {"network",
       {{"image_width", n.image_width},
        {"image_height", n.image_height},
        {"in_channels", n.in_channels},
        {"strides", n.strides},
        {"stem_channels", n.stem_channels},
        {"level_channels", n.level_channels},
        {"tcb_channels", n.tcb_channels},
        {"num_classes", n.num_classes},
        {"aspect_ratios", n.aspect_ratios},
        {"scale_multiplier", n.scale_multiplier},
        {"l2norm_init", n.l2norm_init},
        {"tcb_enabled", n.tcb_enabled}}},
      {"train",
       {{"lr_schedule", lr},
        {"momentum", t.momentum},
        {"weight_decay", t.weight_decay},
        {"batch_size", t.batch_size},
        {"max_steps", t.max_steps},
        {"seed", t.seed},
        {"theta", t.theta},
        {"filter_positives", t.filter_positives},
        {"cascade_enabled", t.cascade_enabled},
        {"tcb_enabled", t.tcb_enabled},
        {"filtering_enabled", t.filtering_enabled},
        {"pos_threshold", t.pos_threshold},
        {"neg_pos_ratio", t.neg_pos_ratio},
        {"augment", t.augment},
        {"float_gemm", t.float_gemm},
        {"flip_probability", t.augment_options.flip_probability},
        {"crop_probability", t.augment_options.crop_probability},
        {"min_crop_scale", t.augment_options.min_crop_scale},
        {"init_scheme", init_name(t.init_scheme)},
        {"variances", variances_json(t.variances)}}},
      {"inference",
       {{"top_k", c.inference.top_k},
        {"nms_overlap", c.inference.nms_overlap},
        {"keep", c.inference.keep}}},
      {"data",
       {{"seed", d.seed},
        {"image_count", d.image_count},
        {"image_width", d.image_width},
        {"image_height", d.image_height},
        {"classes", d.classes},
        {"min_objects", d.min_objects},
        {"max_objects", d.max_objects},
        {"min_scale", d.min_scale},
        {"max_scale", d.max_scale},
        {"overlap_cap", d.overlap_cap},
        {"noise_level", d.noise_level}}},
      {"eval", {{"ap_mode", mode_name(c.eval.mode)}, {"similarity_groups", c.eval.similarity_groups}}},
      {"threads", c.threads}};
}

// Copies `src` into `dst`, rejecting keys `dst` does not already have.
void merge_strict(json& dst, const json& src, const std::string& path) {
  if (!src.is_object()) {
    throw ConfigError("config: " + (path.empty() ? std::string("top level") : path) +
                      " must be an object");
  }
  for (const auto& [key, value] : src.items()) {
    const std::string full = path.empty() ? key : path + "." + key;
    if (!dst.contains(key)) {
      throw ConfigError("config: unknown key '" + full + "'");
    }
    json& slot = dst[key];
    if (slot.is_object()) {
      merge_strict(slot, value, full);
    } else {
      slot = value;
    }
  }
}

template <typename T>
void read(const json& node, const char* section, const char* key, T& out) {
  try {
    out = node.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("config: ") + section + "." + key + " has the wrong type");
  }
}

RunConfig from_tree(const json& j) {
  RunConfig c;
  const json& n = j.at("network");
  read(n, "network", "image_width", c.network.image_width);
  read(n, "network", "image_height", c.network.image_height);
  read(n, "network", "in_channels", c.network.in_channels);
  read(n, "network", "strides", c.network.strides);
  read(n, "network", "stem_channels", c.network.stem_channels);
  read(n, "network", "level_channels", c.network.level_channels);
  read(n, "network", "tcb_channels", c.network.tcb_channels);
  read(n, "network", "num_classes", c.network.num_classes);
  read(n, "network", "aspect_ratios", c.network.aspect_ratios);
  read(n, "network", "scale_multiplier", c.network.scale_multiplier);
  read(n, "network", "l2norm_init", c.network.l2norm_init);
  read(n, "network", "tcb_enabled", c.network.tcb_enabled);

  const json& t = j.at("train");
  std::vector<std::pair<int, double>> lr;
  read(t, "train", "lr_schedule", lr);
  c.train.lr_schedule.clear();
  for (const auto& [step, rate] : lr) {
    c.train.lr_schedule.push_back(LrStep{step, rate});
  }
  read(t, "train", "momentum", c.train.momentum);
  read(t, "train", "weight_decay", c.train.weight_decay);
  read(t, "train", "batch_size", c.train.batch_size);
  read(t, "train", "max_steps", c.train.max_steps);
  read(t, "train", "seed", c.train.seed);
  read(t, "train", "theta", c.train.theta);
  read(t, "train", "filter_positives", c.train.filter_positives);
  read(t, "train", "cascade_enabled", c.train.cascade_enabled);
  read(t, "train", "tcb_enabled", c.train.tcb_enabled);
  read(t, "train", "filtering_enabled", c.train.filtering_enabled);
  read(t, "train", "pos_threshold", c.train.pos_threshold);
  read(t, "train", "neg_pos_ratio", c.train.neg_pos_ratio);
  read(t, "train", "augment", c.train.augment);
  read(t, "train", "float_gemm", c.train.float_gemm);
  read(t, "train", "flip_probability", c.train.augment_options.flip_probability);
  read(t, "train", "crop_probability", c.train.augment_options.crop_probability);
  read(t, "train", "min_crop_scale", c.train.augment_options.min_crop_scale);
  std::string scheme;
  read(t, "train", "init_scheme", scheme);
  c.train.init_scheme = init_from(scheme);
  std::array<double, 4> var{};
  read(t, "train", "variances", var);
  c.train.variances = Variances{var[0], var[1], var[2], var[3]};

  const json& inf = j.at("inference");
  read(inf, "inference", "top_k", c.inference.top_k);
  read(inf, "inference", "nms_overlap", c.inference.nms_overlap);
  read(inf, "inference", "keep", c.inference.keep);

  const json& d = j.at("data");
  read(d, "data", "seed", c.data.seed);
  read(d, "data", "image_count", c.data.image_count);
  read(d, "data", "image_width", c.data.image_width);
  read(d, "data", "image_height", c.data.image_height);
  read(d, "data", "classes", c.data.classes);
  read(d, "data", "min_objects", c.data.min_objects);
  read(d, "data", "max_objects", c.data.max_objects);
  read(d, "data", "min_scale", c.data.min_scale);
  read(d, "data", "max_scale", c.data.max_scale);
  read(d, "data", "overlap_cap", c.data.overlap_cap);
  read(d, "data", "noise_level", c.data.noise_level);

  const json& e = j.at("eval");
  std::string mode;
  read(e, "eval", "ap_mode", mode);
  c.eval.mode = mode_from(mode);
  read(e, "eval", "similarity_groups", c.eval.similarity_groups);

  read(j, "config", "threads", c.threads);
  return c;
}

json parse_value(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error&) {
    return json(text);
  }
}

}  // namespace

void RunConfig::validate() const {
  network.validate();
  train.validate();
  train.check_network(network);
  resolved_inference().validate();
  data.validate();
  if (network.num_classes != data.num_classes()) {
    throw ConfigError("config: network.num_classes (" + std::to_string(network.num_classes) +
                      ") must equal the data classes plus background (" +
                      std::to_string(data.num_classes()) + ")");
  }
  if (network.image_width != data.image_width || network.image_height != data.image_height) {
    throw ConfigError("config: network and data image sizes differ");
  }
  for (const auto& group : eval.similarity_groups) {
    for (const int cls : group) {
      if (cls < 1 || cls >= network.num_classes) {
        throw ConfigError("config: eval.similarity_groups names unknown class " +
                          std::to_string(cls));
      }
    }
  }
}

unsigned RunConfig::resolved_threads() const { return threads == 0 ? default_threads() : threads; }

InferenceConfig RunConfig::resolved_inference() const {
  InferenceConfig c = inference_config(train);
  c.top_k = inference.top_k;
  c.nms_overlap = inference.nms_overlap;
  c.keep = inference.keep;
  return c;
}

EvalOptions RunConfig::eval_options() const {
  EvalOptions o;
  o.num_classes = network.num_classes;
  o.class_names = data.classes;
  o.mode = eval.mode;
  o.similarity_groups = eval.similarity_groups;
  o.threads = resolved_threads();
  return o;
}

RunConfig parse_run_config(const std::string& text, std::span<const std::string> overrides,
                           const std::string& source) {
  json tree = to_tree(RunConfig{});
  if (text.find_first_not_of(" \t\r\n") != std::string::npos) {
    json user;
    try {
      user = json::parse(text);
    } catch (const json::parse_error& e) {
      throw ConfigError("config: " + source + ": " + e.what());
    }
    merge_strict(tree, user, "");
  }
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos || eq == 0) {
      throw ConfigError("config: override '" + o + "' is not key.path=value");
    }
    json patch = parse_value(o.substr(eq + 1));
    std::vector<std::string> parts;
    std::istringstream keys(o.substr(0, eq));
    for (std::string part; std::getline(keys, part, '.');) {
      parts.push_back(part);
    }
    for (auto it = parts.rbegin(); it != parts.rend(); ++it) {
      patch = json{{*it, patch}};
    }
    merge_strict(tree, patch, "");
  }
  RunConfig c = from_tree(tree);
  c.validate();
  return c;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& path,
                          std::span<const std::string> overrides) {
  std::string text;
  std::string source = "<defaults>";
  if (path) {
    std::ifstream is(*path);
    if (!is) {
      throw IoError("config: cannot read '" + path->string() + "'");
    }
    std::ostringstream ss;
    ss << is.rdbuf();
    text = ss.str();
    source = path->string();
  }
  return parse_run_config(text, overrides, source);
}

std::string to_json(const RunConfig& config) { return to_tree(config).dump(2); }

}  // namespace cdet
