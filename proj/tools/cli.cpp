#include "cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "cdet/anchors.hpp"
#include "cdet/config.hpp"
#include "cdet/data.hpp"
#include "cdet/error.hpp"
#include "cdet/eval.hpp"
#include "cdet/image.hpp"
#include "cdet/pipeline.hpp"

namespace cdet::cli {
namespace {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

RunConfig resolve(const Options& o, std::ostream& err) {
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed = o.seed;
  if (!seed) {
    if (const char* env = std::getenv("CDET_SEED"); env != nullptr && *env != '\0') {
      try {
        std::size_t used = 0;
        seed = std::stoull(env, &used);
        if (used != std::string(env).size()) {
          throw std::invalid_argument(env);
        }
      } catch (const std::exception&) {
        throw ConfigError(std::string("CDET_SEED is not an unsigned integer: '") + env + "'");
      }
    }
  }
  if (seed) {
    overrides.push_back("train.seed=" + std::to_string(*seed));
    overrides.push_back("data.seed=" + std::to_string(*seed));
  }
  if (o.threads) {
    overrides.push_back("threads=" + std::to_string(*o.threads));
  }
  if (o.filter_positives) {
    overrides.push_back(std::string("train.filter_positives=") +
                        (*o.filter_positives ? "true" : "false"));
  }
  overrides.insert(overrides.end(), o.overrides.begin(), o.overrides.end());
  std::optional<fs::path> path;
  if (o.config_path) {
    path = *o.config_path;
  }
  RunConfig cfg = load_run_config(path, overrides);
  err << "resolved config:\n" << to_json(cfg) << '\n';
  return cfg;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) {
    throw IoError("cannot write '" + path + "'");
  }
  return os;
}

void emit(const std::string& path, const std::string& text, std::ostream& out) {
  if (path.empty()) {
    out << text;
    return;
  }
  std::ofstream os = open_out(path);
  os << text;
  if (!os) {
    throw IoError("write failed for '" + path + "'");
  }
}

fs::path annotations_path(const std::string& p) {
  const fs::path path(p);
  return fs::is_directory(path) ? path / "annotations.jsonl" : path;
}

std::vector<Sample> load_checked(const std::string& dir, const RunConfig& cfg) {
  std::vector<Sample> samples = load_dataset(dir, cfg.resolved_threads());
  for (const auto& s : samples) {
    if (s.image.width != cfg.network.image_width || s.image.height != cfg.network.image_height) {
      throw ConfigError("dataset image '" + s.annotation.image_id + "' is " +
                        std::to_string(s.image.width) + "x" + std::to_string(s.image.height) +
                        ", network expects " + std::to_string(cfg.network.image_width) + "x" +
                        std::to_string(cfg.network.image_height));
    }
  }
  return samples;
}

int cmd_gen_data(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve(o, err);
  if (o.count >= 0) {
    cfg.data.image_count = o.count;
    cfg.data.validate();
  }
  const std::vector<Sample> samples = generate_samples(cfg.data, cfg.resolved_threads());
  write_dataset(o.out, samples, cfg.resolved_threads());
  out << "wrote " << samples.size() << " images to " << o.out << '\n';
  return 0;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve(o, err);
  if (o.steps >= 0) {
    cfg.train.max_steps = o.steps;
  }
  const std::vector<Sample> data = load_checked(o.data_dir, cfg);
  std::ofstream log;
  if (!o.log_path.empty()) {
    log = open_out(o.log_path);
  }
  Network net(cfg.network);
  const int every = std::max(1, cfg.train.max_steps / 20);
  train(net, data, cfg.train, [&](const StepRecord& r) {
    if (log.is_open()) {
      log << step_record_json(r) << '\n';
    }
    if ((r.step + 1) % every == 0) {
      err << "step " << r.step + 1 << "/" << cfg.train.max_steps << " loss " << r.loss.total
          << '\n';
    }
  });
  net.save(o.out);
  if (!o.assignments_path.empty()) {
    std::ofstream os = open_out(o.assignments_path);
    for (const Sample& s : data) {
      os << assignment_records(s.annotation.image_id, plan_sample(net, s, cfg.train));
    }
    if (!os) {
      throw IoError("write failed for '" + o.assignments_path + "'");
    }
  }
  out << "wrote checkpoint " << o.out << " (" << net.params().scalar_count() << " parameters, "
      << cfg.train.max_steps << " steps)\n";
  return 0;
}

int cmd_infer(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve(o, err);
  Network net = Network::load(o.checkpoint, cfg.network);
  std::vector<ImageDetections> dets;
  if (!o.image_path.empty()) {
    const Image img = read_pnm(o.image_path);
    dets.push_back(ImageDetections{fs::path(o.image_path).stem().string(),
                                   infer(net, img, cfg.resolved_inference())});
  } else {
    const std::vector<Sample> data = load_checked(o.data_dir, cfg);
    dets = infer_all(net, data, cfg.resolved_inference(), cfg.resolved_threads());
  }
  if (o.out.empty()) {
    for (const auto& img : dets) {
      for (const auto& d : img.detections) {
        out << detection_line(img.image_id, d) << '\n';
      }
    }
  } else {
    write_detections(o.out, dets);
    std::size_t n = 0;
    for (const auto& img : dets) {
      n += img.detections.size();
    }
    out << "wrote " << n << " detections for " << dets.size() << " images to " << o.out << '\n';
  }
  return 0;
}

EvalReport run_eval(const Options& o, RunConfig& cfg) {
  if (o.eleven_point) {
    cfg.eval.mode = ApMode::kElevenPoint;
  }
  const std::vector<ImageDetections> dets = read_detections(o.detections);
  const std::vector<Annotation> gts = load_annotations(annotations_path(o.annotations));
  for (const auto& img : dets) {
    for (const auto& d : img.detections) {
      if (d.class_id < 1 || d.class_id >= cfg.network.num_classes) {
        throw ConfigError("detections for '" + img.image_id + "' use class " +
                          std::to_string(d.class_id) + " outside the configured classes");
      }
    }
  }
  return evaluate(dets, gts, cfg.eval_options());
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve(o, err);
  const EvalReport report = run_eval(o, cfg);
  emit(o.out, format_report(report), out);
  if (!o.pr_dir.empty()) {
    write_pr_curves(o.pr_dir, report);
  }
  return 0;
}

std::string share(std::size_t part, std::size_t total) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f%%",
                total == 0 ? 0.0 : 100.0 * static_cast<double>(part) / static_cast<double>(total));
  return buf;
}

int cmd_analyze(const Options& o, std::ostream& out, std::ostream& err) {
  RunConfig cfg = resolve(o, err);
  const EvalReport report = run_eval(o, cfg);
  std::ostringstream os;
  os << "# false positive analysis (weak overlap 0.1, strong 0.5)\n";
  os << "class name fp loc sim oth bg loc% sim% oth% bg%\n";
  const auto row = [&os](const std::string& head, const FpCounts& f) {
    const std::size_t t = f.total();
    os << head << ' ' << t << ' ' << f.loc << ' ' << f.sim << ' ' << f.oth << ' ' << f.bg << ' '
       << share(f.loc, t) << ' ' << share(f.sim, t) << ' ' << share(f.oth, t) << ' '
       << share(f.bg, t) << '\n';
  };
  for (const auto& c : report.classes) {
    row(std::to_string(c.class_id) + ' ' + c.name, c.fp);
  }
  row("all -", report.fp);
  emit(o.out, os.str(), out);
  return 0;
}

int cmd_anchors(const Options& o, std::ostream& out, std::ostream& err) {
  resolve(o, err);
  AnchorSpec spec;
  spec.image_width = o.anchor_width;
  spec.image_height = o.anchor_height;
  const AnchorGrid grid = generate_anchors(spec);
  std::ostringstream os;
  char buf[160];
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const AnchorProvenance& p = grid.provenance[i];
    const Box& b = grid.boxes[i];
    std::snprintf(buf, sizeof(buf), "%zu %d %d %d %g %.4f %.4f %.4f %.4f\n", i, p.level, p.row,
                  p.col, spec.aspect_ratios[static_cast<std::size_t>(p.ratio_index)], b.xmin(),
                  b.ymin(), b.xmax(), b.ymax());
    os << buf;
  }
  emit(o.out, os.str(), out);
  err << grid.size() << " anchors\n";
  return 0;
}

int cmd_ablate(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve(o, err);
  std::vector<Sample> train_set;
  std::vector<Sample> test_set;
  if (!o.train_dir.empty()) {
    train_set = load_checked(o.train_dir, cfg);
  } else {
    SyntheticSpec s = cfg.data;
    s.image_count = o.train_count;
    train_set = generate_samples(s, cfg.resolved_threads());
  }
  if (!o.test_dir.empty()) {
    test_set = load_checked(o.test_dir, cfg);
  } else {
    SyntheticSpec s = cfg.data;
    s.seed = mix_seed(cfg.data.seed, 0x7e57ULL);
    s.image_count = o.test_count;
    test_set = generate_samples(s, cfg.resolved_threads());
  }
  if (o.seeds.empty()) {
    throw ConfigError("ablate: --seeds must list at least one seed");
  }
  const auto rows = run_ablation(cfg.network, cfg.train, train_set, test_set, cfg.eval_options(),
                                 o.seeds, [&err](const AblationProgress& p) {
                                   err << variant_name(p.variant) << " seed " << p.seed
                                       << " map50 " << p.map50 << " (" << p.seconds << " s)\n";
                                 });
  emit(o.out, format_ablation(rows), out);
  return 0;
}

struct Stat {
  double mean = 0.0;
  double p50 = 0.0;
  double p99 = 0.0;
};

Stat summarize(std::vector<double> v) {
  Stat s;
  if (v.empty()) {
    return s;
  }
  std::sort(v.begin(), v.end());
  for (const double x : v) {
    s.mean += x;
  }
  s.mean /= static_cast<double>(v.size());
  const auto at = [&v](double q) {
    const auto idx = static_cast<std::size_t>(std::ceil(q * static_cast<double>(v.size()))) - 1;
    return v[std::min(idx, v.size() - 1)];
  };
  s.p50 = at(0.50);
  s.p99 = at(0.99);
  return s;
}

int cmd_bench(const Options& o, std::ostream& out, std::ostream& err) {
  const RunConfig cfg = resolve(o, err);
  if (o.reps < 1) {
    throw ConfigError("bench: --reps must be >= 1");
  }
  Network net = o.checkpoint.empty() ? Network(cfg.network) : Network::load(o.checkpoint, cfg.network);
  if (o.checkpoint.empty()) {
    init(net.params(), cfg.train.init_scheme, cfg.train.seed);
  }
  const Image img = o.image_path.empty() ? render_sample(cfg.data, 0).image : read_pnm(o.image_path);
  const Tensor input = to_tensor(img);
  const InferenceConfig icfg = cfg.resolved_inference();
  const ImageExtent extent{static_cast<double>(img.width), static_cast<double>(img.height)};

  std::vector<std::string> names{"backbone", "arm", "tcb", "odm", "postprocess", "end_to_end"};
  std::vector<std::vector<double>> ms(names.size());
  const auto since = [](Clock::time_point t) {
    return std::chrono::duration<double, std::milli>(Clock::now() - t).count();
  };
  for (int r = 0; r < o.reps; ++r) {
    const auto start = Clock::now();
    Graph g;
    auto t = Clock::now();
    const auto features = net.backbone_forward(g, g.constant(input));
    ms[0].push_back(since(t));
    std::optional<Graph::Var> arm;
    Graph::Var odm = 0;
    if (net.config().tcb_enabled) {
      t = Clock::now();
      arm = net.arm_forward(g, features);
      ms[1].push_back(since(t));
      t = Clock::now();
      const auto transferred = net.tcb_forward(g, features);
      ms[2].push_back(since(t));
      t = Clock::now();
      odm = net.odm_forward(g, transferred);
    } else {
      t = Clock::now();
      odm = net.odm_forward(g, features);
    }
    ms[3].push_back(since(t));
    t = Clock::now();
    const auto dets = postprocess(arm ? &g.value(*arm) : nullptr, g.value(odm), net.anchors(),
                                  extent, net.config().num_classes, icfg);
    ms[4].push_back(since(t));
    ms[5].push_back(since(start));
  }
  std::ostringstream os;
  os << "op reps mean_ms p50_ms p99_ms\n";
  char buf[160];
  for (std::size_t i = 0; i < names.size(); ++i) {
    if (ms[i].empty()) {
      continue;
    }
    const Stat s = summarize(ms[i]);
    std::snprintf(buf, sizeof(buf), "%s %zu %.3f %.3f %.3f\n", names[i].c_str(), ms[i].size(),
                  s.mean, s.p50, s.p99);
    os << buf;
  }
  emit(o.out, os.str(), out);
  return 0;
}

}  // namespace

Cli make_cli() {
  Cli cli;
  cli.app = std::make_unique<CLI::App>("cdet: two-step cascade single-shot detector toolkit", "cdet");
  cli.options = std::make_unique<Options>();
  CLI::App& app = *cli.app;
  Options& o = *cli.options;
  app.require_subcommand(1);
  app.fallthrough();

  app.add_option("--config", o.config_path, "JSON run configuration file")->check(CLI::ExistingFile);
  app.add_option("--set", o.overrides, "Override a config value: section.key=value (repeatable)");
  app.add_option("--seed", o.seed, "Seed for training and data generation (falls back to CDET_SEED)");
  app.add_option("--threads", o.threads, "Worker threads for data, inference and eval (default: all cores)")
      ->check(CLI::Range(1U, 1024U));

  CLI::App* gen = app.add_subcommand("gen-data", "Generate a synthetic shapes dataset");
  gen->add_option("--out", o.out, "Output dataset directory")->required();
  gen->add_option("--count", o.count, "Number of images (overrides data.image_count)")
      ->check(CLI::NonNegativeNumber);

  CLI::App* tr = app.add_subcommand("train", "Train a detector and write a checkpoint");
  tr->add_option("--data", o.data_dir, "Training dataset directory")->required();
  tr->add_option("--out", o.out, "Checkpoint path to write")->required();
  tr->add_option("--steps", o.steps, "Training steps (overrides train.max_steps)")
      ->check(CLI::NonNegativeNumber);
  tr->add_option("--log", o.log_path, "Per-step JSON lines metrics log");
  tr->add_option("--filter-positives", o.filter_positives,
                 "Drop positives whose ARM background confidence exceeds theta (overrides "
                 "train.filter_positives)");
  tr->add_option("--dump-assignments", o.assignments_path,
                 "After training, write per-anchor assignment records (positive, filtered, "
                 "mined) for every image");

  CLI::App* inf = app.add_subcommand("infer", "Run the inference cascade and write detections");
  inf->add_option("--checkpoint", o.checkpoint, "Checkpoint to load")->required();
  auto* inf_data = inf->add_option("--data", o.data_dir, "Dataset directory to run on");
  auto* inf_img = inf->add_option("--image", o.image_path, "Single PGM/PPM image to run on");
  inf_data->excludes(inf_img);
  inf->add_option("--out", o.out, "Detections file (default: stdout)");
  inf->callback([inf_data, inf_img] {
    if (inf_data->count() + inf_img->count() == 0) {
      throw CLI::ValidationError("infer", "one of --data or --image is required");
    }
  });

  CLI::App* ev = app.add_subcommand("eval", "Compute VOC/COCO-style AP for a detections file");
  CLI::App* an = app.add_subcommand("analyze", "Break false positives into Loc/Sim/Oth/BG");
  for (CLI::App* sub : {ev, an}) {
    sub->add_option("--detections", o.detections, "Detections file")->required();
    sub->add_option("--annotations", o.annotations, "Annotations file or dataset directory")
        ->required();
    sub->add_option("--out", o.out, "Report path (default: stdout)");
    sub->add_flag("--eleven-point", o.eleven_point, "Use 11-point interpolated AP");
  }
  ev->add_option("--pr-dir", o.pr_dir, "Directory for per-class precision/recall point files");

  CLI::App* anc = app.add_subcommand("anchors", "Print the tiled anchors for an input size");
  anc->add_option("--width", o.anchor_width, "Input width")->check(CLI::PositiveNumber);
  anc->add_option("--height", o.anchor_height, "Input height")->check(CLI::PositiveNumber);
  anc->add_option("--out", o.out, "Output file (default: stdout)");

  CLI::App* ab = app.add_subcommand("ablate", "Train and compare the four ablation variants");
  ab->add_option("--train-data", o.train_dir, "Training dataset directory (default: generated)");
  ab->add_option("--test-data", o.test_dir, "Test dataset directory (default: generated)");
  ab->add_option("--train-count", o.train_count, "Generated training images")
      ->check(CLI::PositiveNumber);
  ab->add_option("--test-count", o.test_count, "Generated test images")->check(CLI::PositiveNumber);
  ab->add_option("--seeds", o.seeds, "Training seeds, one run per seed and variant")
      ->delimiter(',');
  ab->add_option("--out", o.out, "Comparison table path (default: stdout)");

  CLI::App* be = app.add_subcommand("bench", "Measure per-stage and end-to-end inference latency");
  be->add_option("--checkpoint", o.checkpoint, "Checkpoint to load (default: seeded init)");
  be->add_option("--image", o.image_path, "Input image (default: first synthetic image)");
  be->add_option("--reps", o.reps, "Repetitions")->check(CLI::PositiveNumber);
  be->add_option("--out", o.out, "Report path (default: stdout)");
  return cli;
}

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  Cli cli = make_cli();
  CLI::App& app = *cli.app;
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }
  const Options& o = *cli.options;
  try {
    const std::string name = app.get_subcommands().front()->get_name();
    if (name == "gen-data") {
      return cmd_gen_data(o, out, err);
    }
    if (name == "train") {
      return cmd_train(o, out, err);
    }
    if (name == "infer") {
      return cmd_infer(o, out, err);
    }
    if (name == "eval") {
      return cmd_eval(o, out, err);
    }
    if (name == "analyze") {
      return cmd_analyze(o, out, err);
    }
    if (name == "anchors") {
      return cmd_anchors(o, out, err);
    }
    if (name == "ablate") {
      return cmd_ablate(o, out, err);
    }
    return cmd_bench(o, out, err);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << '\n';
    return 3;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << '\n';
    return 4;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace cdet::cli
