#include "cdet/network.hpp"

#include <algorithm>
#include <cmath>

#include "cdet/error.hpp"

namespace cdet {
namespace {

constexpr float kTopologyVersion = 1.0F;

std::string level_name(const std::string& prefix, std::size_t level) {
  return prefix + "/level" + std::to_string(level);
}

void add_conv(ParameterStore& store, const std::string& name, int in, int out,
              ParamRole role = ParamRole::kWeight) {
  store.add(name + "/w", {out, in, 3, 3}, role, in * 9, out * 9);
  store.add(name + "/b", {out}, ParamRole::kBias);
}

class TopologyReader {
 public:
  explicit TopologyReader(const std::vector<float>& echo) : echo_(echo) {}

  double next() {
    if (pos_ >= echo_.size()) {
      throw ConfigError("checkpoint: truncated topology echo");
    }
    return static_cast<double>(echo_[pos_++]);
  }
  int next_int() { return static_cast<int>(std::lround(next())); }
  std::vector<int> next_ints() {
    const int n = next_int();
    if (n < 0 || n > 64) {
      throw ConfigError("checkpoint: corrupt topology echo");
    }
    std::vector<int> out;
    for (int i = 0; i < n; ++i) {
      out.push_back(next_int());
    }
    return out;
  }

 private:
  const std::vector<float>& echo_;
  std::size_t pos_ = 0;
};

}  // namespace

AnchorSpec NetworkConfig::anchor_spec() const {
  AnchorSpec spec;
  spec.strides = strides;
  spec.scale_multiplier = scale_multiplier;
  spec.aspect_ratios = aspect_ratios;
  spec.image_width = image_width;
  spec.image_height = image_height;
  return spec;
}

void NetworkConfig::validate() const {
  anchor_spec().validate();
  if (num_classes < 2) {
    throw ConfigError("network: num_classes must be >= 2 (background included)");
  }
  if (in_channels < 1) {
    throw ConfigError("network: in_channels must be >= 1");
  }
  if (level_channels.size() != strides.size()) {
    throw ConfigError("network: level_channels needs one entry per stride");
  }
  for (std::size_t i = 1; i < strides.size(); ++i) {
    if (strides[i] != 2 * strides[i - 1]) {
      throw ConfigError("network: consecutive strides must double");
    }
  }
  int finest = 2;
  for (std::size_t i = 0; i < stem_channels.size(); ++i) {
    finest *= 2;
  }
  if (strides.front() != finest) {
    throw ConfigError("network: finest stride " + std::to_string(strides.front()) +
                      " needs " + std::to_string(static_cast<int>(std::log2(strides.front())) - 1) +
                      " stem stages, got " + std::to_string(stem_channels.size()));
  }
  const auto positive = [](int v) { return v > 0; };
  if (!std::all_of(stem_channels.begin(), stem_channels.end(), positive) ||
      !std::all_of(level_channels.begin(), level_channels.end(), positive) || tcb_channels <= 0) {
    throw ConfigError("network: channel counts must be positive");
  }
}

std::vector<float> NetworkConfig::topology() const {
  std::vector<float> out{kTopologyVersion,
                         static_cast<float>(image_width),
                         static_cast<float>(image_height),
                         static_cast<float>(in_channels),
                         static_cast<float>(num_classes),
                         static_cast<float>(scale_multiplier),
                         tcb_enabled ? 1.0F : 0.0F,
                         static_cast<float>(tcb_channels),
                         static_cast<float>(l2norm_init[0]),
                         static_cast<float>(l2norm_init[1])};
  const auto push_ints = [&out](const std::vector<int>& v) {
    out.push_back(static_cast<float>(v.size()));
    for (const int x : v) {
      out.push_back(static_cast<float>(x));
    }
  };
  push_ints(strides);
  push_ints(stem_channels);
  push_ints(level_channels);
  out.push_back(static_cast<float>(aspect_ratios.size()));
  for (const double r : aspect_ratios) {
    out.push_back(static_cast<float>(r));
  }
  return out;
}

NetworkConfig NetworkConfig::from_topology(const std::vector<float>& echo) {
  TopologyReader r(echo);
  if (r.next() != static_cast<double>(kTopologyVersion)) {
    throw ConfigError("checkpoint: unsupported topology version");
  }
  NetworkConfig c;
  c.image_width = r.next_int();
  c.image_height = r.next_int();
  c.in_channels = r.next_int();
  c.num_classes = r.next_int();
  c.scale_multiplier = r.next_int();
  c.tcb_enabled = r.next_int() != 0;
  c.tcb_channels = r.next_int();
  c.l2norm_init = {r.next(), r.next()};
  c.strides = r.next_ints();
  c.stem_channels = r.next_ints();
  c.level_channels = r.next_ints();
  const int n = r.next_int();
  c.aspect_ratios.clear();
  for (int i = 0; i < n; ++i) {
    c.aspect_ratios.push_back(r.next());
  }
  c.validate();
  return c;
}

Network::Network(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  anchors_ = generate_anchors(config_.anchor_spec());

  const int n = config_.anchors_per_cell();
  const int c = config_.num_classes;
  const std::size_t levels = config_.strides.size();

  int in = config_.in_channels;
  for (std::size_t s = 0; s < config_.stem_channels.size(); ++s) {
    const std::string base = "backbone/stem" + std::to_string(s);
    add_conv(params_, base + "/down", in, config_.stem_channels[s], ParamRole::kBackboneWeight);
    add_conv(params_, base + "/conv", config_.stem_channels[s], config_.stem_channels[s],
             ParamRole::kBackboneWeight);
    in = config_.stem_channels[s];
  }
  for (std::size_t l = 0; l < levels; ++l) {
    const std::string base = level_name("backbone", l);
    const int ch = config_.level_channels[l];
    add_conv(params_, base + "/down", in, ch, ParamRole::kBackboneWeight);
    add_conv(params_, base + "/conv", ch, ch, ParamRole::kBackboneWeight);
    if (l < 2) {
      params_.add(base + "/l2norm", {ch}, ParamRole::kScale, 0, 0, config_.l2norm_init[l]);
    }
    in = ch;
  }

  if (config_.tcb_enabled) {
    const int t = config_.tcb_channels;
    for (std::size_t l = 0; l < levels; ++l) {
      add_conv(params_, level_name("arm", l), config_.level_channels[l], n * (2 + 4));
      const std::string base = level_name("tcb", l);
      add_conv(params_, base + "/lateral_a", config_.level_channels[l], t, ParamRole::kBackboneWeight);
      add_conv(params_, base + "/lateral_b", t, t, ParamRole::kBackboneWeight);
      if (l + 1 < levels) {
        params_.add(base + "/deconv", {t, t, 2, 2}, ParamRole::kWeight, t * 4, t * 4);
      }
      add_conv(params_, base + "/post", t, t, ParamRole::kBackboneWeight);
      add_conv(params_, level_name("odm", l), t, n * (c + 4));
    }
  } else {
    for (std::size_t l = 0; l < levels; ++l) {
      add_conv(params_, level_name("odm", l), config_.level_channels[l], n * (c + 4));
    }
  }
}

Graph::Var Network::conv(Graph& g, Graph::Var x, const std::string& name, int stride) {
  const Graph::Var w = g.parameter(params_.get(name + "/w"));
  const Graph::Var b = g.parameter(params_.get(name + "/b"));
  return g.conv3x3(x, w, b, stride);
}

std::vector<Graph::Var> Network::backbone_forward(Graph& g, Graph::Var image) {
  const Shape& s = g.value(image).shape();
  if (s.c != config_.in_channels || s.h != config_.image_height || s.w != config_.image_width) {
    throw ConfigError("network: image shape " + s.str() + " does not match configured (" +
                      std::to_string(config_.in_channels) + "," +
                      std::to_string(config_.image_height) + "," +
                      std::to_string(config_.image_width) + ")");
  }
  Graph::Var x = image;
  for (std::size_t st = 0; st < config_.stem_channels.size(); ++st) {
    const std::string base = "backbone/stem" + std::to_string(st);
    x = g.relu(conv(g, x, base + "/down", 2));
    x = g.relu(conv(g, x, base + "/conv", 1));
  }
  std::vector<Graph::Var> features;
  for (std::size_t l = 0; l < config_.strides.size(); ++l) {
    const std::string base = level_name("backbone", l);
    x = g.relu(conv(g, x, base + "/down", 2));
    x = g.relu(conv(g, x, base + "/conv", 1));
    if (l < 2) {
      features.push_back(g.l2norm_scale(x, g.parameter(params_.get(base + "/l2norm"))));
    } else {
      features.push_back(x);
    }
  }
  return features;
}

Graph::Var Network::arm_forward(Graph& g, const std::vector<Graph::Var>& features) {
  std::vector<Graph::Var> heads;
  for (std::size_t l = 0; l < features.size(); ++l) {
    heads.push_back(conv(g, features[l], level_name("arm", l), 1));
  }
  return g.anchor_layout(heads, 2 + 4);
}

std::vector<Graph::Var> Network::tcb_forward(Graph& g, const std::vector<Graph::Var>& features) {
  const std::size_t levels = features.size();
  std::vector<Graph::Var> out(levels);
  for (std::size_t l = levels; l-- > 0;) {
    const std::string base = level_name("tcb", l);
    Graph::Var lateral = g.relu(conv(g, features[l], base + "/lateral_a", 1));
    lateral = conv(g, lateral, base + "/lateral_b", 1);
    if (l + 1 < levels) {
      const Graph::Var up = g.deconv2x(out[l + 1], g.parameter(params_.get(base + "/deconv")));
      lateral = g.add(lateral, up);
    }
    out[l] = g.relu(conv(g, g.relu(lateral), base + "/post", 1));
  }
  return out;
}

Graph::Var Network::odm_forward(Graph& g, const std::vector<Graph::Var>& transferred) {
  std::vector<Graph::Var> heads;
  for (std::size_t l = 0; l < transferred.size(); ++l) {
    heads.push_back(conv(g, transferred[l], level_name("odm", l), 1));
  }
  return g.anchor_layout(heads, config_.num_classes + 4);
}

NetworkOutputs Network::forward(Graph& g, const Tensor& image) {
  NetworkOutputs out;
  out.features = backbone_forward(g, g.constant(image));
  if (config_.tcb_enabled) {
    out.arm = arm_forward(g, out.features);
    out.transferred = tcb_forward(g, out.features);
    out.odm = odm_forward(g, out.transferred);
  } else {
    out.odm = odm_forward(g, out.features);
  }
  return out;
}

void Network::save(const std::filesystem::path& path) const {
  std::vector<CheckpointEntry> entries = to_entries(params_);
  CheckpointEntry topo;
  topo.name = kTopologyEntry;
  topo.values = config_.topology();
  topo.dims = {static_cast<std::uint32_t>(topo.values.size())};
  entries.push_back(std::move(topo));
  std::sort(entries.begin(), entries.end(),
            [](const CheckpointEntry& a, const CheckpointEntry& b) { return a.name < b.name; });
  write_checkpoint(path, entries);
}

Network Network::load(const std::filesystem::path& path,
                      const std::optional<NetworkConfig>& expected) {
  const std::vector<CheckpointEntry> entries = read_checkpoint(path);
  const auto it = std::find_if(entries.begin(), entries.end(),
                               [](const CheckpointEntry& e) { return e.name == kTopologyEntry; });
  if (it == entries.end()) {
    throw ConfigError("checkpoint: '" + path.string() + "' has no topology echo");
  }
  const NetworkConfig stored = NetworkConfig::from_topology(it->values);
  if (expected && !(NetworkConfig::from_topology(expected->topology()) == stored)) {
    throw ConfigError("checkpoint: topology in '" + path.string() +
                      "' does not match the configured network");
  }
  Network net(stored);
  load_entries(net.params_, entries);
  return net;
}

}  // namespace cdet
