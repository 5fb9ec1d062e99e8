#include "cdet/graph.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <type_traits>

#include <Eigen/Core>

namespace cdet {
namespace {

// Valid output-column range [lo, hi) for kernel column kx, so that the input
// column ox * stride + kx - 1 lies inside [0, in_w).
inline void column_range(int kx, int stride, int in_w, int out_w, int& lo, int& hi) {
  lo = (kx == 0) ? 1 : 0;
  // ox * stride + kx - 1 <= in_w - 1  =>  ox <= (in_w - kx) / stride
  const int span = in_w - kx;
  hi = span < 0 ? 0 : std::min(out_w, span / stride + 1);
}

template <class T>
using RowMatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMat = RowMatT<double>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// Unfolds the padded 3x3 neighbourhoods into a (in_c * 9, oh * ow) matrix.
template <class T>
RowMatT<T> im2col(const Tensor& in, int stride, int oh, int ow) {
  const int ic_n = in.shape().c;
  const int ih = in.shape().h;
  const int iw = in.shape().w;
  RowMatT<T> col = RowMatT<T>::Zero(static_cast<Eigen::Index>(ic_n) * 9,
                                    static_cast<Eigen::Index>(oh) * ow);
  for (int ic = 0; ic < ic_n; ++ic) {
    const double* iplane = in.data() + static_cast<std::size_t>(ic) * ih * iw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        T* row = col.data() + (static_cast<std::size_t>(ic) * 9 + ky * 3 + kx) * oh * ow;
        int lo = 0;
        int hi = 0;
        column_range(kx, stride, iw, ow, lo, hi);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= ih) {
            continue;
          }
          const double* irow = iplane + static_cast<std::size_t>(iy) * iw + (kx - 1);
          T* crow = row + static_cast<std::size_t>(oy) * ow;
          for (int ox = lo; ox < hi; ++ox) {
            crow[ox] = static_cast<T>(irow[ox * stride]);
          }
        }
      }
    }
  }
  return col;
}

template <class T>
void col2im(const RowMatT<T>& col, int stride, int oh, int ow, Tensor& gin) {
  const int ic_n = gin.shape().c;
  const int ih = gin.shape().h;
  const int iw = gin.shape().w;
  for (int ic = 0; ic < ic_n; ++ic) {
    double* gplane = gin.data() + static_cast<std::size_t>(ic) * ih * iw;
    for (int ky = 0; ky < 3; ++ky) {
      for (int kx = 0; kx < 3; ++kx) {
        const T* row = col.data() + (static_cast<std::size_t>(ic) * 9 + ky * 3 + kx) * oh * ow;
        int lo = 0;
        int hi = 0;
        column_range(kx, stride, iw, ow, lo, hi);
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ky - 1;
          if (iy < 0 || iy >= ih) {
            continue;
          }
          double* grow = gplane + static_cast<std::size_t>(iy) * iw + (kx - 1);
          const T* crow = row + static_cast<std::size_t>(oy) * ow;
          for (int ox = lo; ox < hi; ++ox) {
            grow[ox * stride] += static_cast<double>(crow[ox]);
          }
        }
      }
    }
  }
}

template <class T>
void conv3x3_forward(const Tensor& in, const Tensor& w, const Tensor& b, int stride, Tensor& out) {
  const int oc_n = out.shape().c;
  const int oh = out.shape().h;
  const int ow = out.shape().w;
  const Eigen::Index k = static_cast<Eigen::Index>(in.shape().c) * 9;
  const Eigen::Index p = static_cast<Eigen::Index>(oh) * ow;
  const RowMatT<T> col = im2col<T>(in, stride, oh, ow);
  MutMap o(out.data(), oc_n, p);
  if constexpr (std::is_same_v<T, double>) {
    o.noalias() = ConstMap(w.data(), oc_n, k) * col;
  } else {
    const RowMatT<T> wt = ConstMap(w.data(), oc_n, k).cast<T>();
    o = (wt * col).template cast<double>();
  }
  for (int oc = 0; oc < oc_n; ++oc) {
    o.row(oc).array() += b[static_cast<std::size_t>(oc)];
  }
}

template <class T>
void conv3x3_backward(const Tensor& in, const Tensor& w, int stride, const Tensor& gout,
                      Tensor* gin, Tensor* gw, Tensor* gb) {
  const int oc_n = gout.shape().c;
  const int oh = gout.shape().h;
  const int ow = gout.shape().w;
  const Eigen::Index k = static_cast<Eigen::Index>(in.shape().c) * 9;
  const Eigen::Index p = static_cast<Eigen::Index>(oh) * ow;
  const ConstMap g(gout.data(), oc_n, p);
  if (gb != nullptr) {
    Eigen::Map<Eigen::VectorXd>(gb->data(), oc_n) += g.rowwise().sum();
  }
  if constexpr (std::is_same_v<T, double>) {
    if (gw != nullptr) {
      const RowMat col = im2col<double>(in, stride, oh, ow);
      MutMap(gw->data(), oc_n, k).noalias() += g * col.transpose();
    }
    if (gin != nullptr) {
      const RowMat gcol = ConstMap(w.data(), oc_n, k).transpose() * g;
      col2im<double>(gcol, stride, oh, ow, *gin);
    }
  } else {
    const RowMatT<T> gt = g.cast<T>();
    if (gw != nullptr) {
      const RowMatT<T> col = im2col<T>(in, stride, oh, ow);
      const RowMatT<T> prod = gt * col.transpose();
      MutMap(gw->data(), oc_n, k) += prod.template cast<double>();
    }
    if (gin != nullptr) {
      const RowMatT<T> wt = ConstMap(w.data(), oc_n, k).cast<T>();
      const RowMatT<T> gcol = wt.transpose() * gt;
      col2im<T>(gcol, stride, oh, ow, *gin);
    }
  }
}

// Deconvolution as one product: (out_c * 4, in_c) x (in_c, h * w), then each
// row scatters to one of the four sub-pixel phases of its output channel.
void deconv2x_forward(const Tensor& in, const Tensor& w, Tensor& out) {
  const int ic_n = in.shape().c;
  const int ih = in.shape().h;
  const int iw = in.shape().w;
  const int oc_n = out.shape().c;
  const int ow = out.shape().w;
  const Eigen::Index p = static_cast<Eigen::Index>(ih) * iw;
  const RowMat m = ConstMap(w.data(), ic_n, static_cast<Eigen::Index>(oc_n) * 4).transpose() *
                   ConstMap(in.data(), ic_n, p);
  for (int oc = 0; oc < oc_n; ++oc) {
    for (int k = 0; k < 4; ++k) {
      const int ky = k / 2;
      const int kx = k % 2;
      const double* row = m.data() + (static_cast<std::size_t>(oc) * 4 + k) * p;
      for (int y = 0; y < ih; ++y) {
        double* orow = out.data() + (static_cast<std::size_t>(oc) * 2 * ih + 2 * y + ky) * ow + kx;
        const double* mrow = row + static_cast<std::size_t>(y) * iw;
        for (int x = 0; x < iw; ++x) {
          orow[2 * x] = mrow[x];
        }
      }
    }
  }
}

void deconv2x_backward(const Tensor& in, const Tensor& w, const Tensor& gout, Tensor* gin,
                       Tensor* gw) {
  const int ic_n = in.shape().c;
  const int ih = in.shape().h;
  const int iw = in.shape().w;
  const int oc_n = gout.shape().c;
  const int ow = gout.shape().w;
  const Eigen::Index p = static_cast<Eigen::Index>(ih) * iw;
  RowMat gm(static_cast<Eigen::Index>(oc_n) * 4, p);
  for (int oc = 0; oc < oc_n; ++oc) {
    for (int k = 0; k < 4; ++k) {
      const int ky = k / 2;
      const int kx = k % 2;
      double* row = gm.data() + (static_cast<std::size_t>(oc) * 4 + k) * p;
      for (int y = 0; y < ih; ++y) {
        const double* grow =
            gout.data() + (static_cast<std::size_t>(oc) * 2 * ih + 2 * y + ky) * ow + kx;
        double* mrow = row + static_cast<std::size_t>(y) * iw;
        for (int x = 0; x < iw; ++x) {
          mrow[x] = grow[2 * x];
        }
      }
    }
  }
  if (gw != nullptr) {
    MutMap(gw->data(), ic_n, static_cast<Eigen::Index>(oc_n) * 4).noalias() +=
        ConstMap(in.data(), ic_n, p) * gm.transpose();
  }
  if (gin != nullptr) {
    MutMap(gin->data(), ic_n, p).noalias() +=
        ConstMap(w.data(), ic_n, static_cast<Eigen::Index>(oc_n) * 4) * gm;
  }
}

}  // namespace

Graph::Var Graph::push(Node node) {
  nodes_.push_back(std::move(node));
  return nodes_.size() - 1;
}

void Graph::check(Var v) const {
  if (v >= nodes_.size()) {
    throw std::out_of_range("Graph: unknown variable");
  }
}

Tensor& Graph::grad(Var v) {
  check(v);
  Node& n = nodes_[v];
  if (!n.has_grad) {
    n.grad = Tensor(n.value.shape());
    n.has_grad = true;
  }
  return n.grad;
}

std::size_t Graph::count(OpKind kind) const noexcept {
  return static_cast<std::size_t>(std::count_if(
      nodes_.begin(), nodes_.end(), [kind](const Node& n) { return n.kind == kind; }));
}

Graph::Var Graph::constant(Tensor value) {
  Node n;
  n.kind = OpKind::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

Graph::Var Graph::parameter(Parameter& param) {
  Node n;
  n.kind = OpKind::kParameter;
  n.value = param.value;
  n.param = &param;
  return push(std::move(n));
}

Graph::Var Graph::conv3x3(Var input, Var weights, Var bias, int stride) {
  check(input);
  check(weights);
  check(bias);
  if (stride != 1 && stride != 2) {
    throw std::invalid_argument("conv3x3: stride must be 1 or 2");
  }
  const Shape& is = nodes_[input].value.shape();
  const Shape& ws = nodes_[weights].value.shape();
  const Shape& bs = nodes_[bias].value.shape();
  if (ws.w != 9 || ws.h != is.c || bs.size() != static_cast<std::size_t>(ws.c)) {
    throw std::invalid_argument("conv3x3: shape mismatch input " + is.str() + " weights " +
                                ws.str() + " bias " + bs.str());
  }
  Node n;
  n.kind = OpKind::kConv3x3;
  n.stride = stride;
  n.inputs = {input, weights, bias};
  n.value = Tensor(Shape{ws.c, (is.h - 1) / stride + 1, (is.w - 1) / stride + 1});
  if (precision_ == GemmPrecision::kSingle) {
    conv3x3_forward<float>(nodes_[input].value, nodes_[weights].value, nodes_[bias].value, stride,
                           n.value);
  } else {
    conv3x3_forward<double>(nodes_[input].value, nodes_[weights].value, nodes_[bias].value, stride,
                            n.value);
  }
  return push(std::move(n));
}

Graph::Var Graph::deconv2x(Var input, Var weights) {
  check(input);
  check(weights);
  const Shape& is = nodes_[input].value.shape();
  const Shape& ws = nodes_[weights].value.shape();
  if (ws.w != 4 || ws.c != is.c) {
    throw std::invalid_argument("deconv2x: shape mismatch input " + is.str() + " weights " +
                                ws.str());
  }
  Node n;
  n.kind = OpKind::kDeconv2x;
  n.inputs = {input, weights};
  n.value = Tensor(Shape{ws.h, is.h * 2, is.w * 2});
  deconv2x_forward(nodes_[input].value, nodes_[weights].value, n.value);
  return push(std::move(n));
}

Graph::Var Graph::relu(Var input) {
  check(input);
  Node n;
  n.kind = OpKind::kRelu;
  n.inputs = {input};
  n.value = nodes_[input].value;
  for (double& v : n.value.values()) {
    v = v > 0.0 ? v : 0.0;
  }
  return push(std::move(n));
}

Graph::Var Graph::add(Var a, Var b) {
  check(a);
  check(b);
  if (nodes_[a].value.shape() != nodes_[b].value.shape()) {
    throw std::invalid_argument("add: shape mismatch " + nodes_[a].value.shape().str() + " vs " +
                                nodes_[b].value.shape().str());
  }
  Node n;
  n.kind = OpKind::kAdd;
  n.inputs = {a, b};
  n.value = nodes_[a].value;
  const Tensor& bv = nodes_[b].value;
  for (std::size_t i = 0; i < n.value.size(); ++i) {
    n.value[i] += bv[i];
  }
  return push(std::move(n));
}

Graph::Var Graph::softmax(Var input) {
  check(input);
  Node n;
  n.kind = OpKind::kSoftmax;
  n.inputs = {input};
  n.value = nodes_[input].value;
  const auto k = static_cast<std::size_t>(n.value.shape().w);
  if (k == 0) {
    return push(std::move(n));
  }
  for (std::size_t row = 0; row < n.value.size() / k; ++row) {
    double* r = n.value.data() + row * k;
    const double m = *std::max_element(r, r + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      r[j] = std::exp(r[j] - m);
      s += r[j];
    }
    for (std::size_t j = 0; j < k; ++j) {
      r[j] /= s;
    }
  }
  return push(std::move(n));
}

Graph::Var Graph::sigmoid(Var input) {
  check(input);
  Node n;
  n.kind = OpKind::kSigmoid;
  n.inputs = {input};
  n.value = nodes_[input].value;
  for (double& v : n.value.values()) {
    v = v >= 0.0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
  }
  return push(std::move(n));
}

Graph::Var Graph::l2norm_scale(Var input, Var scale) {
  check(input);
  check(scale);
  const Tensor& x = nodes_[input].value;
  const Tensor& s = nodes_[scale].value;
  if (s.size() != static_cast<std::size_t>(x.shape().c)) {
    throw std::invalid_argument("l2norm_scale: scale size does not match channels");
  }
  Node n;
  n.kind = OpKind::kL2NormScale;
  n.inputs = {input, scale};
  n.value = Tensor(x.shape());
  const int c_n = x.shape().c;
  const std::size_t plane = static_cast<std::size_t>(x.shape().h) * x.shape().w;
  for (std::size_t p = 0; p < plane; ++p) {
    double sq = 0.0;
    for (int c = 0; c < c_n; ++c) {
      const double v = x[c * plane + p];
      sq += v * v;
    }
    const double inv = 1.0 / std::sqrt(sq + kL2NormEps);
    for (int c = 0; c < c_n; ++c) {
      n.value[c * plane + p] = s[static_cast<std::size_t>(c)] * x[c * plane + p] * inv;
    }
  }
  return push(std::move(n));
}

Graph::Var Graph::anchor_layout(std::span<const Var> heads, int per_anchor) {
  if (per_anchor <= 0) {
    throw std::invalid_argument("anchor_layout: per_anchor must be positive");
  }
  int total = 0;
  for (const Var h : heads) {
    check(h);
    const Shape& s = nodes_[h].value.shape();
    if (s.c % per_anchor != 0) {
      throw std::invalid_argument("anchor_layout: channels " + std::to_string(s.c) +
                                  " not a multiple of " + std::to_string(per_anchor));
    }
    total += s.h * s.w * (s.c / per_anchor);
  }
  Node n;
  n.kind = OpKind::kAnchorLayout;
  n.per_anchor = per_anchor;
  n.inputs.assign(heads.begin(), heads.end());
  n.value = Tensor(Shape{1, total, per_anchor});
  std::size_t row = 0;
  for (const Var h : heads) {
    const Tensor& t = nodes_[h].value;
    const int per_cell = t.shape().c / per_anchor;
    for (int y = 0; y < t.shape().h; ++y) {
      for (int x = 0; x < t.shape().w; ++x) {
        for (int a = 0; a < per_cell; ++a, ++row) {
          for (int j = 0; j < per_anchor; ++j) {
            n.value[row * per_anchor + j] = t.at(a * per_anchor + j, y, x);
          }
        }
      }
    }
  }
  return push(std::move(n));
}

void Graph::backward() {
  for (std::size_t idx = nodes_.size(); idx-- > 0;) {
    if (!nodes_[idx].has_grad) {
      continue;
    }
    const OpKind kind = nodes_[idx].kind;
    const std::vector<Var> in = nodes_[idx].inputs;
    switch (kind) {
      case OpKind::kConstant:
        break;
      case OpKind::kParameter: {
        Node& n = nodes_[idx];
        Tensor& pg = n.param->grad;
        for (std::size_t i = 0; i < pg.size(); ++i) {
          pg[i] += n.grad[i];
        }
        break;
      }
      case OpKind::kConv3x3: {
        Tensor& gx = grad(in[0]);
        Tensor& gw = grad(in[1]);
        Tensor& gb = grad(in[2]);
        const Node& n = nodes_[idx];
        if (precision_ == GemmPrecision::kSingle) {
          conv3x3_backward<float>(nodes_[in[0]].value, nodes_[in[1]].value, n.stride, n.grad, &gx,
                                  &gw, &gb);
        } else {
          conv3x3_backward<double>(nodes_[in[0]].value, nodes_[in[1]].value, n.stride, n.grad,
                                   &gx, &gw, &gb);
        }
        break;
      }
      case OpKind::kDeconv2x: {
        Tensor& gx = grad(in[0]);
        Tensor& gw = grad(in[1]);
        const Node& n = nodes_[idx];
        deconv2x_backward(nodes_[in[0]].value, nodes_[in[1]].value, n.grad, &gx, &gw);
        break;
      }
      case OpKind::kRelu: {
        Tensor& gx = grad(in[0]);
        const Node& n = nodes_[idx];
        for (std::size_t i = 0; i < gx.size(); ++i) {
          if (n.value[i] > 0.0) {
            gx[i] += n.grad[i];
          }
        }
        break;
      }
      case OpKind::kAdd: {
        for (const Var v : in) {
          Tensor& g = grad(v);
          const Node& n = nodes_[idx];
          for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] += n.grad[i];
          }
        }
        break;
      }
      case OpKind::kSoftmax: {
        Tensor& gx = grad(in[0]);
        const Node& n = nodes_[idx];
        const auto k = static_cast<std::size_t>(n.value.shape().w);
        for (std::size_t row = 0; k != 0 && row < n.value.size() / k; ++row) {
          const double* y = n.value.data() + row * k;
          const double* gy = n.grad.data() + row * k;
          double dot = 0.0;
          for (std::size_t j = 0; j < k; ++j) {
            dot += y[j] * gy[j];
          }
          for (std::size_t j = 0; j < k; ++j) {
            gx[row * k + j] += y[j] * (gy[j] - dot);
          }
        }
        break;
      }
      case OpKind::kSigmoid: {
        Tensor& gx = grad(in[0]);
        const Node& n = nodes_[idx];
        for (std::size_t i = 0; i < gx.size(); ++i) {
          gx[i] += n.grad[i] * n.value[i] * (1.0 - n.value[i]);
        }
        break;
      }
      case OpKind::kL2NormScale: {
        Tensor& gx = grad(in[0]);
        Tensor& gs = grad(in[1]);
        const Node& n = nodes_[idx];
        const Tensor& x = nodes_[in[0]].value;
        const Tensor& s = nodes_[in[1]].value;
        const int c_n = x.shape().c;
        const std::size_t plane = static_cast<std::size_t>(x.shape().h) * x.shape().w;
        for (std::size_t p = 0; p < plane; ++p) {
          double sq = 0.0;
          for (int c = 0; c < c_n; ++c) {
            const double v = x[c * plane + p];
            sq += v * v;
          }
          const double inv = 1.0 / std::sqrt(sq + kL2NormEps);
          // g_hat = dy * scale; dx = g_hat * inv - x * (x . g_hat) * inv^3
          double dot = 0.0;
          for (int c = 0; c < c_n; ++c) {
            const std::size_t i = c * plane + p;
            const double gy = n.grad[i];
            gs[static_cast<std::size_t>(c)] += gy * x[i] * inv;
            dot += x[i] * gy * s[static_cast<std::size_t>(c)];
          }
          const double inv3 = inv * inv * inv;
          for (int c = 0; c < c_n; ++c) {
            const std::size_t i = c * plane + p;
            gx[i] += n.grad[i] * s[static_cast<std::size_t>(c)] * inv - x[i] * dot * inv3;
          }
        }
        break;
      }
      case OpKind::kAnchorLayout: {
        const int per_anchor = nodes_[idx].per_anchor;
        std::size_t row = 0;
        for (const Var h : in) {
          Tensor& gh = grad(h);
          const Node& n = nodes_[idx];
          const int per_cell = gh.shape().c / per_anchor;
          for (int y = 0; y < gh.shape().h; ++y) {
            for (int x = 0; x < gh.shape().w; ++x) {
              for (int a = 0; a < per_cell; ++a, ++row) {
                for (int j = 0; j < per_anchor; ++j) {
                  gh.at(a * per_anchor + j, y, x) += n.grad[row * per_anchor + j];
                }
              }
            }
          }
        }
        break;
      }
    }
  }
}

}  // namespace cdet
