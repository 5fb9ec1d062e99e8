#pragma once

#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

namespace cdet::cli {

/// Values bound to the command line.
struct Options {
  std::optional<std::string> config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;

  std::string data_dir;
  std::string out;
  int count = -1;

  std::string checkpoint;
  int steps = -1;
  std::string log_path;
  std::string assignments_path;
  std::optional<bool> filter_positives;

  std::string image_path;

  std::string detections;
  std::string annotations;
  std::string pr_dir;
  bool eleven_point = false;

  int anchor_width = 320;
  int anchor_height = 320;

  std::string train_dir;
  std::string test_dir;
  int train_count = 500;
  int test_count = 100;
  std::vector<std::uint64_t> seeds{1, 2, 3};

  int reps = 20;
};

struct Cli {
  std::unique_ptr<CLI::App> app;
  std::unique_ptr<Options> options;
};

Cli make_cli();

/// Parses, runs and maps errors to exit codes: 2 config, 3 I/O, 4 numeric.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cdet::cli
