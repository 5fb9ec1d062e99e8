#include <gtest/gtest.h>

#include <cmath>
#include <functional>
#include <random>

#include "cdet/graph.hpp"
#include "oracles.hpp"

using cdet::Graph;
using cdet::Parameter;
using cdet::Shape;
using cdet::Tensor;

namespace {

Parameter make_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  Parameter p;
  p.dims = {shape.c, shape.h, shape.w};
  p.value = Tensor(shape);
  p.grad = Tensor(shape);
  std::uniform_real_distribution<double> u(lo, hi);
  for (auto& v : p.value.values()) {
    v = u(rng);
  }
  return p;
}

using Builder = std::function<Graph::Var(Graph&, std::vector<Graph::Var>&)>;

// Loss = sum(output * R) for a fixed random R; checks every bound parameter.
oracle::GradCheck check_op(std::vector<Parameter*> params, const Builder& build,
                           std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor weights;
  auto loss = [&]() {
    Graph g;
    std::vector<Graph::Var> vars;
    for (Parameter* p : params) {
      vars.push_back(g.parameter(*p));
    }
    const Graph::Var out = build(g, vars);
    if (weights.size() != g.value(out).size()) {
      weights = Tensor(g.value(out).shape());
      for (auto& w : weights.values()) {
        w = u(rng);
      }
    }
    double s = 0.0;
    for (std::size_t i = 0; i < weights.size(); ++i) {
      s += weights[i] * g.value(out)[i];
    }
    return s;
  };
  loss();
  for (Parameter* p : params) {
    p->zero_grad();
  }
  {
    Graph g;
    std::vector<Graph::Var> vars;
    for (Parameter* p : params) {
      vars.push_back(g.parameter(*p));
    }
    const Graph::Var out = build(g, vars);
    g.grad(out) = weights;
    g.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (Parameter* p : params) {
    analytic.emplace_back(p->grad.values().begin(), p->grad.values().end());
  }
  return oracle::finite_difference(params, analytic, loss, 1e-6);
}

Tensor naive_conv(const Tensor& x, const Tensor& w, const Tensor& b, int out_c, int stride) {
  const int in_c = x.shape().c;
  const int oh = (x.shape().h + stride - 1) / stride;
  const int ow = (x.shape().w + stride - 1) / stride;
  Tensor y(Shape{out_c, oh, ow});
  for (int o = 0; o < out_c; ++o) {
    for (int r = 0; r < oh; ++r) {
      for (int c = 0; c < ow; ++c) {
        double s = b[static_cast<std::size_t>(o)];
        for (int i = 0; i < in_c; ++i) {
          for (int ky = 0; ky < 3; ++ky) {
            for (int kx = 0; kx < 3; ++kx) {
              const int yy = r * stride + ky - 1;
              const int xx = c * stride + kx - 1;
              if (yy < 0 || xx < 0 || yy >= x.shape().h || xx >= x.shape().w) {
                continue;
              }
              s += w[(static_cast<std::size_t>(o) * in_c + i) * 9 + ky * 3 + kx] * x.at(i, yy, xx);
            }
          }
        }
        y.at(o, r, c) = s;
      }
    }
  }
  return y;
}

}  // namespace

TEST(Graph, ConvForwardMatchesDirectLoops) {
  std::mt19937_64 rng(2);
  for (const int stride : {1, 2}) {
    for (const Shape in : {Shape{3, 7, 5}, Shape{4, 8, 8}, Shape{1, 1, 3}}) {
      Parameter x = make_param(in, rng);
      Parameter w = make_param(Shape{5, in.c, 9}, rng);
      Parameter b = make_param(Shape{1, 1, 5}, rng);
      Graph g;
      const auto y = g.conv3x3(g.parameter(x), g.parameter(w), g.parameter(b), stride);
      const Tensor ref = naive_conv(x.value, w.value, b.value, 5, stride);
      ASSERT_EQ(g.value(y).shape(), ref.shape());
      for (std::size_t i = 0; i < ref.size(); ++i) {
        ASSERT_NEAR(g.value(y)[i], ref[i], 1e-12);
      }
    }
  }
}

TEST(Graph, SinglePrecisionConvTracksDouble) {
  std::mt19937_64 rng(12);
  for (const int stride : {1, 2}) {
    Parameter x = make_param(Shape{6, 9, 8}, rng);
    Parameter w = make_param(Shape{7, 6, 9}, rng);
    Parameter b = make_param(Shape{1, 1, 7}, rng);
    Graph exact;
    Graph fast(cdet::GemmPrecision::kSingle);
    const auto ye = exact.conv3x3(exact.parameter(x), exact.parameter(w), exact.parameter(b), stride);
    const auto yf = fast.conv3x3(fast.constant(x.value), fast.constant(w.value),
                                 fast.constant(b.value), stride);
    for (std::size_t i = 0; i < exact.value(ye).size(); ++i) {
      ASSERT_NEAR(fast.value(yf)[i], exact.value(ye)[i], 1e-5);
    }
    exact.grad(ye).fill(0.5);
    fast.grad(yf).fill(0.5);
    exact.backward();
    fast.backward();
    const auto ge = exact.grad(0);
    const auto gf = fast.grad(0);
    for (std::size_t i = 0; i < ge.size(); ++i) {
      ASSERT_NEAR(gf[i], ge[i], 1e-5);
    }
  }
}

TEST(Graph, DeconvForwardScattersEachInputTo2x2Block) {
  Parameter x;
  x.value = Tensor(Shape{1, 1, 2}, {1.0, 2.0});
  x.grad = Tensor(x.value.shape());
  Parameter w;
  w.value = Tensor(Shape{1, 1, 4}, {1.0, 10.0, 100.0, 1000.0});
  w.grad = Tensor(w.value.shape());
  Graph g;
  const auto y = g.deconv2x(g.parameter(x), g.parameter(w));
  ASSERT_EQ(g.value(y).shape(), (Shape{1, 2, 4}));
  const std::vector<double> expect{1, 10, 2, 20, 100, 1000, 200, 2000};
  for (std::size_t i = 0; i < expect.size(); ++i) {
    EXPECT_DOUBLE_EQ(g.value(y)[i], expect[i]);
  }
}

TEST(Graph, ConvGradientStride1) {
  std::mt19937_64 rng(3);
  Parameter x = make_param(Shape{3, 6, 5}, rng);
  Parameter w = make_param(Shape{4, 3, 9}, rng);
  Parameter b = make_param(Shape{1, 1, 4}, rng);
  const auto r = check_op({&x, &w, &b}, [](Graph& g, auto& v) {
    return g.conv3x3(v[0], v[1], v[2], 1);
  });
  EXPECT_LT(r.relative(), 1e-4) << r.max_abs_diff;
}

TEST(Graph, ConvGradientStride2OddSize) {
  std::mt19937_64 rng(4);
  Parameter x = make_param(Shape{2, 7, 9}, rng);
  Parameter w = make_param(Shape{3, 2, 9}, rng);
  Parameter b = make_param(Shape{1, 1, 3}, rng);
  const auto r = check_op({&x, &w, &b}, [](Graph& g, auto& v) {
    return g.conv3x3(v[0], v[1], v[2], 2);
  });
  EXPECT_LT(r.relative(), 1e-4) << r.max_abs_diff;
}

TEST(Graph, DeconvGradient) {
  std::mt19937_64 rng(5);
  Parameter x = make_param(Shape{3, 3, 4}, rng);
  Parameter w = make_param(Shape{3, 2, 4}, rng);
  const auto r = check_op({&x, &w}, [](Graph& g, auto& v) { return g.deconv2x(v[0], v[1]); });
  EXPECT_LT(r.relative(), 1e-4) << r.max_abs_diff;
}

TEST(Graph, ReluGradientAwayFromKink) {
  std::mt19937_64 rng(6);
  Parameter x = make_param(Shape{2, 4, 4}, rng);
  for (auto& v : x.value.values()) {
    v += v > 0 ? 0.1 : -0.1;
  }
  const auto r = check_op({&x}, [](Graph& g, auto& v) { return g.relu(v[0]); });
  EXPECT_LT(r.relative(), 1e-4);
}

TEST(Graph, AddGradientFeedsBothInputs) {
  std::mt19937_64 rng(7);
  Parameter a = make_param(Shape{2, 3, 3}, rng);
  Parameter b = make_param(Shape{2, 3, 3}, rng);
  const auto r = check_op({&a, &b}, [](Graph& g, auto& v) { return g.add(v[0], v[1]); });
  EXPECT_LT(r.relative(), 1e-4);
}

TEST(Graph, AddSameVarTwiceDoublesGradient) {
  std::mt19937_64 rng(8);
  Parameter a = make_param(Shape{1, 2, 2}, rng);
  const auto r = check_op({&a}, [](Graph& g, auto& v) { return g.add(v[0], v[0]); });
  EXPECT_LT(r.relative(), 1e-4);
}

TEST(Graph, SoftmaxRowsSumToOneAndGradient) {
  std::mt19937_64 rng(9);
  Parameter x = make_param(Shape{1, 6, 4}, rng, -20, 20);
  Graph g;
  const auto y = g.softmax(g.parameter(x));
  for (int r = 0; r < 6; ++r) {
    double s = 0.0;
    for (int c = 0; c < 4; ++c) {
      s += g.value(y).at(0, r, c);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  Parameter z = make_param(Shape{1, 5, 3}, rng);
  const auto res = check_op({&z}, [](Graph& gg, auto& v) { return gg.softmax(v[0]); });
  EXPECT_LT(res.relative(), 1e-4);
}

TEST(Graph, SoftmaxStableForLargeLogits) {
  Parameter x;
  x.value = Tensor(Shape{1, 1, 3}, {1000.0, 1000.0, -1000.0});
  x.grad = Tensor(x.value.shape());
  Graph g;
  const auto y = g.softmax(g.parameter(x));
  EXPECT_TRUE(g.value(y).all_finite());
  EXPECT_NEAR(g.value(y)[0], 0.5, 1e-12);
}

TEST(Graph, SigmoidGradient) {
  std::mt19937_64 rng(10);
  Parameter x = make_param(Shape{2, 3, 2}, rng, -4, 4);
  const auto r = check_op({&x}, [](Graph& g, auto& v) { return g.sigmoid(v[0]); });
  EXPECT_LT(r.relative(), 1e-4);
}

TEST(Graph, L2NormScaleValuesAndGradient) {
  std::mt19937_64 rng(11);
  Parameter x = make_param(Shape{4, 3, 3}, rng);
  Parameter s = make_param(Shape{1, 1, 4}, rng, 5, 15);
  {
    Graph g;
    const auto y = g.l2norm_scale(g.parameter(x), g.parameter(s));
    double norm = 0.0;
    for (int c = 0; c < 4; ++c) {
      norm += std::pow(x.value.at(c, 1, 2), 2);
    }
    norm = std::sqrt(norm + Graph::kL2NormEps);
    for (int c = 0; c < 4; ++c) {
      EXPECT_NEAR(g.value(y).at(c, 1, 2), s.value[static_cast<std::size_t>(c)] * x.value.at(c, 1, 2) / norm,
                  1e-12);
    }
  }
  const auto r = check_op({&x, &s}, [](Graph& g, auto& v) { return g.l2norm_scale(v[0], v[1]); });
  EXPECT_LT(r.relative(), 1e-4);
}

TEST(Graph, AnchorLayoutOrderAndGradient) {
  Parameter a;
  a.value = Tensor(Shape{4, 1, 2}, {0, 1, 10, 11, 20, 21, 30, 31});
  a.grad = Tensor(a.value.shape());
  Parameter b;
  b.value = Tensor(Shape{2, 1, 1}, {100, 101});
  b.grad = Tensor(b.value.shape());
  Graph g;
  const std::vector<Graph::Var> heads{g.parameter(a), g.parameter(b)};
  const auto y = g.anchor_layout(heads, 2);
  // level 0: cell (0,0) anchors 0,1 then cell (0,1); level 1 last.
  const std::vector<double> expect{0, 10, 20, 30, 1, 11, 21, 31, 100, 101};
  ASSERT_EQ(g.value(y).shape(), (Shape{1, 5, 2}));
  for (std::size_t i = 0; i < expect.size(); ++i) {
    EXPECT_DOUBLE_EQ(g.value(y)[i], expect[i]);
  }
  std::mt19937_64 rng(12);
  Parameter p = make_param(Shape{6, 2, 3}, rng);
  Parameter q = make_param(Shape{3, 1, 2}, rng);
  const auto r = check_op({&p, &q}, [](Graph& gg, auto& v) {
    const std::vector<Graph::Var> hs{v[0], v[1]};
    return gg.anchor_layout(hs, 3);
  });
  EXPECT_LT(r.relative(), 1e-4);
  EXPECT_THROW(g.anchor_layout(heads, 3), std::invalid_argument);
}

TEST(Graph, ComposedChainGradient) {
  std::mt19937_64 rng(13);
  Parameter x = make_param(Shape{2, 6, 6}, rng);
  Parameter w1 = make_param(Shape{3, 2, 9}, rng, -0.5, 0.5);
  Parameter b1 = make_param(Shape{1, 1, 3}, rng, 0.05, 0.2);
  Parameter s = make_param(Shape{1, 1, 3}, rng, 1, 3);
  Parameter wd = make_param(Shape{3, 3, 4}, rng, -0.5, 0.5);
  const auto r = check_op({&x, &w1, &b1, &s, &wd}, [](Graph& g, auto& v) {
    const auto c = g.conv3x3(v[0], v[1], v[2], 2);
    const auto n = g.l2norm_scale(c, v[3]);
    const auto up = g.deconv2x(n, v[4]);
    return g.sigmoid(up);
  });
  EXPECT_LT(r.relative(), 1e-4) << r.max_abs_diff;
}

TEST(Graph, ShapeMismatchesThrow) {
  std::mt19937_64 rng(14);
  Parameter a = make_param(Shape{1, 2, 2}, rng);
  Parameter b = make_param(Shape{1, 2, 3}, rng);
  Parameter w = make_param(Shape{1, 2, 10}, rng);
  Parameter bias = make_param(Shape{1, 1, 2}, rng);
  Graph g;
  const auto va = g.parameter(a);
  EXPECT_THROW(g.add(va, g.parameter(b)), std::invalid_argument);
  EXPECT_THROW(g.conv3x3(va, g.parameter(w), g.parameter(bias), 1), std::invalid_argument);
  EXPECT_THROW(g.conv3x3(va, g.parameter(w), g.parameter(bias), 3), std::invalid_argument);
}

TEST(Graph, CountsOpsByKind) {
  std::mt19937_64 rng(15);
  Parameter a = make_param(Shape{1, 2, 2}, rng);
  Graph g;
  const auto v = g.parameter(a);
  g.relu(g.relu(v));
  EXPECT_EQ(g.count(cdet::OpKind::kRelu), 2U);
  EXPECT_EQ(g.count(cdet::OpKind::kDeconv2x), 0U);
  EXPECT_EQ(g.size(), 3U);
}
