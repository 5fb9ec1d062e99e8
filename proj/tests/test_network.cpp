#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "cdet/error.hpp"
#include "cdet/network.hpp"

using cdet::Graph;
using cdet::Network;
using cdet::NetworkConfig;
using cdet::Shape;
using cdet::Tensor;

namespace {

NetworkConfig small_config() {
  NetworkConfig c;
  c.image_width = 64;
  c.image_height = 64;
  c.strides = {8, 16, 32};
  c.stem_channels = {4, 6};
  c.level_channels = {8, 8, 8};
  c.tcb_channels = 8;
  return c;
}

Tensor test_image(const NetworkConfig& c) {
  Tensor t(Shape{c.in_channels, c.image_height, c.image_width});
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = static_cast<double>((i * 37) % 101) / 101.0;
  }
  return t;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("cdet_test_network_" + name);
}

}  // namespace

TEST(Network, OutputShapesFollowAnchorCount) {
  const NetworkConfig c = small_config();
  Network net(c);
  cdet::init(net.params(), cdet::InitScheme::kXavier, 1);
  Graph g;
  const auto out = net.forward(g, test_image(c));
  const int anchors = static_cast<int>(net.anchors().size());
  EXPECT_EQ(anchors, 3 * (8 * 8 + 4 * 4 + 2 * 2));
  ASSERT_TRUE(out.arm.has_value());
  EXPECT_EQ(g.value(*out.arm).shape(), (Shape{1, anchors, 6}));
  EXPECT_EQ(g.value(out.odm).shape(), (Shape{1, anchors, c.num_classes + 4}));
  ASSERT_EQ(out.features.size(), 3U);
  ASSERT_EQ(out.transferred.size(), 3U);
  for (std::size_t l = 0; l < 3; ++l) {
    const int s = c.strides[l];
    EXPECT_EQ(g.value(out.features[l]).shape(), (Shape{8, 64 / s, 64 / s}));
    EXPECT_EQ(g.value(out.transferred[l]).shape(), (Shape{8, 64 / s, 64 / s}));
  }
  EXPECT_EQ(g.count(cdet::OpKind::kDeconv2x), 2U);
  EXPECT_EQ(g.count(cdet::OpKind::kL2NormScale), 2U);
}

TEST(Network, WithoutTcbHasNoDeconvOrRefinementBranch) {
  NetworkConfig c = small_config();
  c.tcb_enabled = false;
  Network net(c);
  cdet::init(net.params(), cdet::InitScheme::kXavier, 1);
  for (const auto& [name, p] : net.params()) {
    EXPECT_EQ(name.find("tcb"), std::string::npos) << name;
    EXPECT_EQ(name.find("arm"), std::string::npos) << name;
  }
  Graph g;
  const auto out = net.forward(g, test_image(c));
  EXPECT_FALSE(out.arm.has_value());
  EXPECT_TRUE(out.transferred.empty());
  EXPECT_EQ(g.count(cdet::OpKind::kDeconv2x), 0U);
  EXPECT_EQ(g.value(out.odm).shape().h, static_cast<int>(net.anchors().size()));
}

TEST(Network, ParameterNamesAndShapes) {
  Network net(small_config());
  const auto& p = net.params();
  EXPECT_TRUE(p.contains("tcb/level0/deconv"));
  EXPECT_EQ(p.get("arm/level0/w").dims, (std::vector<int>{18, 8, 3, 3}));
  EXPECT_EQ(p.get("odm/level2/w").dims, (std::vector<int>{3 * 8, 8, 3, 3}));
  EXPECT_EQ(p.get("arm/level1/b").dims, (std::vector<int>{18}));
  EXPECT_FALSE(p.contains("tcb/level2/deconv"));
}

TEST(Network, InitIsDeterministicAndFloatRepresentable) {
  Network a(small_config());
  Network b(small_config());
  cdet::init(a.params(), cdet::InitScheme::kXavier, 42);
  cdet::init(b.params(), cdet::InitScheme::kXavier, 42);
  EXPECT_EQ(cdet::to_entries(a.params()), cdet::to_entries(b.params()));
  for (const auto& [name, p] : a.params()) {
    for (const double v : p.value.values()) {
      ASSERT_EQ(static_cast<double>(static_cast<float>(v)), v) << name;
    }
    if (p.role == cdet::ParamRole::kScale) {
      for (const double v : p.value.values()) {
        ASSERT_EQ(v, p.init_value);
      }
    }
    if (p.role == cdet::ParamRole::kBias) {
      for (const double v : p.value.values()) {
        ASSERT_EQ(v, 0.0);
      }
    }
  }
  cdet::init(b.params(), cdet::InitScheme::kXavier, 43);
  EXPECT_NE(cdet::to_entries(a.params()), cdet::to_entries(b.params()));
}

TEST(Network, SharedLayersInitIdenticallyAcrossVariants) {
  NetworkConfig no_tcb = small_config();
  no_tcb.tcb_enabled = false;
  Network full(small_config());
  Network plain(no_tcb);
  cdet::init(full.params(), cdet::InitScheme::kXavier, 7);
  cdet::init(plain.params(), cdet::InitScheme::kXavier, 7);
  std::size_t shared = 0;
  for (const auto& [name, p] : plain.params()) {
    if (name.rfind("backbone/", 0) == 0) {
      ASSERT_TRUE(std::ranges::equal(p.value.values(), full.params().get(name).value.values()))
          << name;
      ++shared;
    }
  }
  EXPECT_GT(shared, 0U);
}

TEST(Network, SaveLoadIsBitExact) {
  const NetworkConfig c = small_config();
  Network net(c);
  cdet::init(net.params(), cdet::InitScheme::kGaussian, 7);
  const auto path = temp_path("roundtrip.ckpt");
  net.save(path);
  Network back = Network::load(path, c);
  EXPECT_EQ(back.config(), c);
  EXPECT_EQ(cdet::to_entries(back.params()), cdet::to_entries(net.params()));
  Graph g1;
  Graph g2;
  const auto o1 = net.forward(g1, test_image(c));
  const auto o2 = back.forward(g2, test_image(c));
  for (std::size_t i = 0; i < g1.value(o1.odm).size(); ++i) {
    ASSERT_EQ(g1.value(o1.odm)[i], g2.value(o2.odm)[i]);
  }
  std::filesystem::remove(path);
}

TEST(Network, LoadRejectsMismatchedTopology) {
  const NetworkConfig c = small_config();
  Network net(c);
  cdet::init(net.params(), cdet::InitScheme::kXavier, 1);
  const auto path = temp_path("mismatch.ckpt");
  net.save(path);
  NetworkConfig other = c;
  other.tcb_channels = 16;
  EXPECT_THROW(Network::load(path, other), cdet::ConfigError);
  other = c;
  other.tcb_enabled = false;
  EXPECT_THROW(Network::load(path, other), cdet::ConfigError);
  std::filesystem::remove(path);
}

TEST(Network, ForwardRejectsWrongImageShape) {
  Network net(small_config());
  Graph g;
  EXPECT_THROW(net.forward(g, Tensor(Shape{1, 32, 64})), cdet::ConfigError);
}

TEST(Network, ValidateRejectsBadTopologies) {
  NetworkConfig c = small_config();
  c.num_classes = 1;
  EXPECT_THROW(c.validate(), cdet::ConfigError);
  c = small_config();
  c.strides = {8, 24, 32};
  EXPECT_THROW(c.validate(), cdet::ConfigError);
  c = small_config();
  c.level_channels = {8, 8};
  EXPECT_THROW(c.validate(), cdet::ConfigError);
  c = small_config();
  c.tcb_channels = 0;
  EXPECT_THROW(c.validate(), cdet::ConfigError);
}

TEST(Network, TopologyEchoRoundTrips) {
  NetworkConfig c = small_config();
  c.aspect_ratios = {1.0, 3.0};
  c.l2norm_init = {5.0, 4.0};
  EXPECT_EQ(NetworkConfig::from_topology(c.topology()), c);
}
