#pragma once

#include <array>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cdet/anchors.hpp"
#include "cdet/graph.hpp"
#include "cdet/params.hpp"

namespace cdet {

/// Topology of the toy detector.
///
/// The backbone is a stack of stages, each a stride-2 3x3 conv followed by a
/// stride-1 3x3 conv (both ReLU). `stem_channels` covers the stages below the
/// finest prediction stride; `level_channels` has one entry per prediction
/// level. The two finest levels pass through a learned L2-norm scale.
struct NetworkConfig {
  int image_width = 128;
  int image_height = 128;
  int in_channels = 1;
  std::vector<int> strides{8, 16, 32, 64};
  std::vector<int> stem_channels{8, 16};
  std::vector<int> level_channels{32, 32, 32, 32};
  int tcb_channels = 64;
  int num_classes = 4;  // includes background
  std::vector<double> aspect_ratios{0.5, 1.0, 2.0};
  int scale_multiplier = 4;
  std::array<double, 2> l2norm_init{10.0, 8.0};
  /// Without transfer connection blocks the detection heads read the
  /// backbone directly and no refinement branch exists.
  bool tcb_enabled = true;

  int anchors_per_cell() const noexcept { return static_cast<int>(aspect_ratios.size()); }
  AnchorSpec anchor_spec() const;
  /// Throws ConfigError.
  void validate() const;

  /// Flat numeric echo of the topology stored in checkpoints.
  std::vector<float> topology() const;
  static NetworkConfig from_topology(const std::vector<float>& echo);

  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Graph handles produced by one forward pass.
struct NetworkOutputs {
  std::vector<Graph::Var> features;     // backbone, one per level
  std::vector<Graph::Var> transferred;  // TCB outputs (empty without TCB)
  /// (1, A, 6): background logit, object logit, 4 offsets. Absent without TCB.
  std::optional<Graph::Var> arm;
  /// (1, A, num_classes + 4): class logits, then 4 offsets.
  Graph::Var odm = 0;
};

class Network {
 public:
  explicit Network(NetworkConfig config);

  const NetworkConfig& config() const noexcept { return config_; }
  ParameterStore& params() noexcept { return params_; }
  const ParameterStore& params() const noexcept { return params_; }
  const AnchorGrid& anchors() const noexcept { return anchors_; }

  /// Image tensor is (in_channels, H, W).
  NetworkOutputs forward(Graph& g, const Tensor& image);

  std::vector<Graph::Var> backbone_forward(Graph& g, Graph::Var image);
  Graph::Var arm_forward(Graph& g, const std::vector<Graph::Var>& features);
  std::vector<Graph::Var> tcb_forward(Graph& g, const std::vector<Graph::Var>& features);
  Graph::Var odm_forward(Graph& g, const std::vector<Graph::Var>& transferred);

  void save(const std::filesystem::path& path) const;
  /// Restores topology and parameters. Throws ConfigError when `expected` is
  /// given and differs from the stored topology.
  static Network load(const std::filesystem::path& path,
                      const std::optional<NetworkConfig>& expected = std::nullopt);

 private:
  Graph::Var conv(Graph& g, Graph::Var x, const std::string& name, int stride);

  NetworkConfig config_;
  ParameterStore params_;
  AnchorGrid anchors_;
};

inline constexpr const char* kTopologyEntry = "meta/topology";

}  // namespace cdet
