#include "wsrtl/ops.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace wsrtl {

std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "," : "") << shape[i];
  out << ']';
  return out.str();
}

namespace {
thread_local bool grad_mode_enabled = true;
}

bool GradMode::enabled() { return grad_mode_enabled; }
void GradMode::set_enabled(bool on) { grad_mode_enabled = on; }

template <typename Scalar>
void backward(const Var<Scalar>& output) {
  using NodeT = Node<Scalar>;
  if (output.value().size() != 1) throw std::invalid_argument("backward: output must be a scalar");
  if (!output.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> visited;
  std::vector<std::pair<NodeT*, std::size_t>> stack;
  stack.emplace_back(output.node().get(), 0);
  visited.insert(output.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodeT* child = node->inputs[next++].get();
      if (child && child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  output.node()->accumulate(Tensor<Scalar>(output.shape(), Scalar(1)));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    NodeT* node = *it;
    if (!node->backward_fn || node->grad.empty()) continue;
    node->backward_fn(*node);
    node->grad = Tensor<Scalar>();
  }
}

namespace ops {
namespace {

template <typename Scalar>
using NodePtr = std::shared_ptr<Node<Scalar>>;

template <typename Scalar>
bool wants(const NodePtr<Scalar>& n) {
  return n && n->requires_grad;
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

template <typename Scalar>
void require_same(const Var<Scalar>& a, const Var<Scalar>& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
}

// Unfolds one image [C, Hs, Ws] into columns [C*k*k, Hd*Wd] written at a
// column offset of a wider row-major buffer with row stride ld.
template <typename Scalar>
void im2col(const Scalar* src, int channels, int hs, int ws, int kh, int kw, int stride, int pad, int hd,
            int wd, Scalar* cols, Eigen::Index ld) {
  for (int c = 0; c < channels; ++c) {
    const Scalar* plane = src + static_cast<Eigen::Index>(c) * hs * ws;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        Scalar* row = cols + ((static_cast<Eigen::Index>(c) * kh + ki) * kw + kj) * ld;
        for (int oy = 0; oy < hd; ++oy) {
          const int iy = oy * stride - pad + ki;
          Scalar* out = row + static_cast<Eigen::Index>(oy) * wd;
          if (iy < 0 || iy >= hs) {
            std::fill(out, out + wd, Scalar(0));
            continue;
          }
          const Scalar* in = plane + static_cast<Eigen::Index>(iy) * ws;
          if (stride == 1) {
            const int off = kj - pad;
            for (int ox = 0; ox < wd; ++ox) {
              const int ix = ox + off;
              out[ox] = (ix >= 0 && ix < ws) ? in[ix] : Scalar(0);
            }
          } else {
            for (int ox = 0; ox < wd; ++ox) {
              const int ix = ox * stride - pad + kj;
              out[ox] = (ix >= 0 && ix < ws) ? in[ix] : Scalar(0);
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into an image.
template <typename Scalar>
void col2im(const Scalar* cols, Eigen::Index ld, int channels, int hs, int ws, int kh, int kw, int stride,
            int pad, int hd, int wd, Scalar* dst) {
  for (int c = 0; c < channels; ++c) {
    Scalar* plane = dst + static_cast<Eigen::Index>(c) * hs * ws;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const Scalar* row = cols + ((static_cast<Eigen::Index>(c) * kh + ki) * kw + kj) * ld;
        for (int oy = 0; oy < hd; ++oy) {
          const int iy = oy * stride - pad + ki;
          if (iy < 0 || iy >= hs) continue;
          const Scalar* in = row + static_cast<Eigen::Index>(oy) * wd;
          Scalar* out = plane + static_cast<Eigen::Index>(iy) * ws;
          for (int ox = 0; ox < wd; ++ox) {
            const int ix = ox * stride - pad + kj;
            if (ix >= 0 && ix < ws) out[ix] += in[ox];
          }
        }
      }
    }
  }
}

// [N, C, P] <-> [C, N*P]
template <typename Scalar>
void batch_to_channel_major(const Scalar* src, int n, int c, Eigen::Index p, Scalar* dst) {
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(src + (static_cast<Eigen::Index>(i) * c + ch) * p, p,
                  dst + static_cast<Eigen::Index>(ch) * n * p + i * p);
}

template <typename Scalar>
void channel_major_to_batch(const Scalar* src, int n, int c, Eigen::Index p, Scalar* dst) {
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch)
      std::copy_n(src + static_cast<Eigen::Index>(ch) * n * p + i * p, p,
                  dst + (static_cast<Eigen::Index>(i) * c + ch) * p);
}

template <typename Scalar>
using Arr = typename Tensor<Scalar>::Array;

template <typename Scalar>
using RowMat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

}  // namespace

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same(a, b, "add");
  Tensor<Scalar> out(a.shape(), Arr<Scalar>(a.value().array() + b.value().array()));
  auto na = a.node(), nb = b.node();
  return make_result<Scalar>(std::move(out), "add", {na, nb}, [na, nb](Node<Scalar>& self) {
    if (wants(na)) na->accumulate(self.grad);
    if (wants(nb)) nb->accumulate(self.grad);
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same(a, b, "sub");
  Tensor<Scalar> out(a.shape(), Arr<Scalar>(a.value().array() - b.value().array()));
  auto na = a.node(), nb = b.node();
  return make_result<Scalar>(std::move(out), "sub", {na, nb}, [na, nb](Node<Scalar>& self) {
    if (wants(na)) na->accumulate(self.grad);
    if (wants(nb)) nb->accumulate(Tensor<Scalar>(self.grad.shape(), -self.grad.array()));
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same(a, b, "mul");
  Tensor<Scalar> out(a.shape(), Arr<Scalar>(a.value().array() * b.value().array()));
  auto na = a.node(), nb = b.node();
  return make_result<Scalar>(std::move(out), "mul", {na, nb}, [na, nb](Node<Scalar>& self) {
    if (wants(na)) na->accumulate(Tensor<Scalar>(self.grad.shape(), self.grad.array() * nb->value.array()));
    if (wants(nb)) nb->accumulate(Tensor<Scalar>(self.grad.shape(), self.grad.array() * na->value.array()));
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape(), Arr<Scalar>(a.value().array() * factor));
  auto na = a.node();
  return make_result<Scalar>(std::move(out), "scale", {na}, [na, factor](Node<Scalar>& self) {
    na->accumulate(Tensor<Scalar>(self.grad.shape(), self.grad.array() * factor));
  });
}

template <typename Scalar>
Var<Scalar> maximum(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same(a, b, "maximum");
  Tensor<Scalar> out(a.shape(), Arr<Scalar>(a.value().array().max(b.value().array())));
  auto na = a.node(), nb = b.node();
  return make_result<Scalar>(std::move(out), "maximum", {na, nb}, [na, nb](Node<Scalar>& self) {
    const auto first = (na->value.array() >= nb->value.array()).template cast<Scalar>();
    if (wants(na)) na->accumulate(Tensor<Scalar>(self.grad.shape(), self.grad.array() * first));
    if (wants(nb)) nb->accumulate(Tensor<Scalar>(self.grad.shape(), self.grad.array() * (Scalar(1) - first)));
  });
}

template <typename Scalar>
Var<Scalar> relu(const Var<Scalar>& a) {
  Tensor<Scalar> out(a.shape(), Arr<Scalar>(a.value().array().max(Scalar(0))));
  auto na = a.node();
  return make_result<Scalar>(std::move(out), "relu", {na}, [na](Node<Scalar>& self) {
    na->accumulate(Tensor<Scalar>(
        self.grad.shape(), self.grad.array() * (na->value.array() > Scalar(0)).template cast<Scalar>()));
  });
}

template <typename Scalar>
Var<Scalar> leaky_relu(const Var<Scalar>& a, Scalar slope) {
  const auto& x = a.value().array();
  Tensor<Scalar> out(a.shape(), Arr<Scalar>((x > Scalar(0)).select(x, x * slope)));
  auto na = a.node();
  return make_result<Scalar>(std::move(out), "leaky_relu", {na}, [na, slope](Node<Scalar>& self) {
    const auto& xv = na->value.array();
    na->accumulate(Tensor<Scalar>(self.grad.shape(),
                                  (xv > Scalar(0)).select(self.grad.array(), self.grad.array() * slope)));
  });
}

template <typename Scalar>
Var<Scalar> sigmoid(const Var<Scalar>& a) {
  Tensor<Scalar> out(a.shape(), Arr<Scalar>(Scalar(1) / (Scalar(1) + (-a.value().array()).exp())));
  auto na = a.node();
  return make_result<Scalar>(std::move(out), "sigmoid", {na}, [na](Node<Scalar>& self) {
    const auto& y = self.value.array();
    na->accumulate(Tensor<Scalar>(self.grad.shape(), self.grad.array() * y * (Scalar(1) - y)));
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  auto na = a.node();
  Shape original = a.shape();
  return make_result<Scalar>(a.value().reshaped(std::move(shape)), "reshape", {na},
                             [na, original](Node<Scalar>& self) { na->accumulate(self.grad.reshaped(original)); });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  auto na = a.node();
  return make_result<Scalar>(Tensor<Scalar>::scalar(a.value().array().sum()), "sum", {na},
                             [na](Node<Scalar>& self) {
                               na->accumulate(Tensor<Scalar>(na->value.shape(), self.grad[0]));
                             });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  auto na = a.node();
  const auto n = static_cast<Scalar>(a.value().size());
  return make_result<Scalar>(Tensor<Scalar>::scalar(a.value().array().sum() / n), "mean", {na},
                             [na, n](Node<Scalar>& self) {
                               na->accumulate(Tensor<Scalar>(na->value.shape(), self.grad[0] / n));
                             });
}

template <typename Scalar>
Var<Scalar> concat0(const std::vector<Var<Scalar>>& parts) {
  require(!parts.empty(), "concat0: no inputs");
  Shape shape = parts.front().shape();
  int rows = 0;
  for (const auto& p : parts) {
    require(p.value().rank() == static_cast<int>(shape.size()), "concat0: rank mismatch");
    for (std::size_t d = 1; d < shape.size(); ++d) require(p.shape()[d] == shape[d], "concat0: shape mismatch");
    rows += p.shape()[0];
  }
  shape[0] = rows;
  Tensor<Scalar> out(shape);
  std::vector<NodePtr<Scalar>> inputs;
  std::vector<Eigen::Index> offsets;
  Eigen::Index offset = 0;
  for (const auto& p : parts) {
    out.array().segment(offset, p.value().size()) = p.value().array();
    offsets.push_back(offset);
    offset += p.value().size();
    inputs.push_back(p.node());
  }
  auto captured = inputs;
  return make_result<Scalar>(std::move(out), "concat0", std::move(inputs),
                             [captured, offsets](Node<Scalar>& self) {
                               for (std::size_t i = 0; i < captured.size(); ++i) {
                                 if (!wants(captured[i])) continue;
                                 const auto& shp = captured[i]->value.shape();
                                 captured[i]->accumulate(Tensor<Scalar>(
                                     shp, self.grad.array().segment(offsets[i], shape_size(shp))));
                               }
                             });
}

template <typename Scalar>
Var<Scalar> slice0(const Var<Scalar>& a, int begin, int end) {
  require(begin >= 0 && end <= a.dim(0) && begin <= end, "slice0: bad range");
  Shape shape = a.shape();
  const Eigen::Index row = a.value().size() / shape[0];
  shape[0] = end - begin;
  Tensor<Scalar> out(shape, Arr<Scalar>(a.value().array().segment(begin * row, (end - begin) * row)));
  auto na = a.node();
  return make_result<Scalar>(std::move(out), "slice0", {na}, [na, begin, row](Node<Scalar>& self) {
    auto& g = na->grad_buffer();
    g.array().segment(begin * row, self.grad.size()) += self.grad.array();
  });
}

template <typename Scalar>
Var<Scalar> select0(const Var<Scalar>& a, const std::vector<int>& rows) {
  Shape shape = a.shape();
  const Eigen::Index row = a.value().size() / shape[0];
  shape[0] = static_cast<int>(rows.size());
  Tensor<Scalar> out(shape);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < a.dim(0), "select0: index out of range");
    out.array().segment(static_cast<Eigen::Index>(i) * row, row) = a.value().array().segment(rows[i] * row, row);
  }
  auto na = a.node();
  return make_result<Scalar>(std::move(out), "select0", {na}, [na, rows, row](Node<Scalar>& self) {
    auto& g = na->grad_buffer();
    for (std::size_t i = 0; i < rows.size(); ++i)
      g.array().segment(rows[i] * row, row) += self.grad.array().segment(static_cast<Eigen::Index>(i) * row, row);
  });
}

template <typename Scalar>
Var<Scalar> broadcast0(const Var<Scalar>& a, int count) {
  Shape shape = a.shape();
  shape.insert(shape.begin(), count);
  const Eigen::Index n = a.value().size();
  Tensor<Scalar> out(shape);
  for (int i = 0; i < count; ++i) out.array().segment(i * n, n) = a.value().array();
  auto na = a.node();
  return make_result<Scalar>(std::move(out), "broadcast0", {na}, [na, count, n](Node<Scalar>& self) {
    Tensor<Scalar> g(na->value.shape());
    for (int i = 0; i < count; ++i) g.array() += self.grad.array().segment(i * n, n);
    na->accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  const int in = weight.dim(1), outf = weight.dim(0);
  require(x.shape().back() == in, "linear: input features " + std::to_string(x.shape().back()) + " != " +
                                      std::to_string(in));
  const Eigen::Index rows = x.value().size() / in;
  Shape shape = x.shape();
  shape.back() = outf;
  Tensor<Scalar> out(shape);
  out.matrix(rows, outf).noalias() = x.value().matrix(rows, in) * weight.value().matrix(outf, in).transpose();
  if (bias.defined()) out.matrix(rows, outf).rowwise() += bias.value().matrix(1, outf).row(0);
  auto nx = x.node(), nw = weight.node(), nb = bias.defined() ? bias.node() : NodePtr<Scalar>();
  return make_result<Scalar>(
      std::move(out), "linear", {nx, nw, nb}, [nx, nw, nb, rows, in, outf](Node<Scalar>& self) {
        const auto g = self.grad.matrix(rows, outf);
        if (wants(nx)) {
          Tensor<Scalar> gx(nx->value.shape());
          gx.matrix(rows, in).noalias() = g * nw->value.matrix(outf, in);
          nx->accumulate(gx);
        }
        if (wants(nw)) {
          Tensor<Scalar> gw(nw->value.shape());
          gw.matrix(outf, in).noalias() = g.transpose() * nx->value.matrix(rows, in);
          nw->accumulate(gw);
        }
        if (wants(nb)) {
          Tensor<Scalar> gb(nb->value.shape());
          gb.matrix(1, outf) = g.colwise().sum();
          nb->accumulate(gb);
        }
      });
}

template <typename Scalar>
Var<Scalar> per_token_linear(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias) {
  require(x.value().rank() == 3, "per_token_linear: expects [B, T, d]");
  const int batch = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  require(weight.dim(0) == tokens && weight.dim(1) == d, "per_token_linear: weight shape");
  Tensor<Scalar> out(Shape{batch, tokens});
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < tokens; ++t) {
      Scalar acc = bias.defined() ? bias.value()[t] : Scalar(0);
      for (int k = 0; k < d; ++k) acc += x.value().at(b, t, k) * weight.value().at(t, k);
      out.at(b, t) = acc;
    }
  auto nx = x.node(), nw = weight.node(), nb = bias.defined() ? bias.node() : NodePtr<Scalar>();
  return make_result<Scalar>(std::move(out), "per_token_linear", {nx, nw, nb},
                             [nx, nw, nb, batch, tokens, d](Node<Scalar>& self) {
                               if (wants(nx)) {
                                 Tensor<Scalar> gx(nx->value.shape());
                                 for (int b = 0; b < batch; ++b)
                                   for (int t = 0; t < tokens; ++t)
                                     for (int k = 0; k < d; ++k)
                                       gx.at(b, t, k) = self.grad.at(b, t) * nw->value.at(t, k);
                                 nx->accumulate(gx);
                               }
                               if (wants(nw)) {
                                 Tensor<Scalar> gw(nw->value.shape());
                                 for (int b = 0; b < batch; ++b)
                                   for (int t = 0; t < tokens; ++t)
                                     for (int k = 0; k < d; ++k)
                                       gw.at(t, k) += self.grad.at(b, t) * nx->value.at(b, t, k);
                                 nw->accumulate(gw);
                               }
                               if (wants(nb)) {
                                 Tensor<Scalar> gb(nb->value.shape());
                                 for (int b = 0; b < batch; ++b)
                                   for (int t = 0; t < tokens; ++t) gb[t] += self.grad.at(b, t);
                                 nb->accumulate(gb);
                               }
                             });
}

template <typename Scalar>
Var<Scalar> stack1(const std::vector<Var<Scalar>>& tokens) {
  require(!tokens.empty(), "stack1: no inputs");
  const int rows = tokens.front().dim(0), d = tokens.front().dim(1);
  const int count = static_cast<int>(tokens.size());
  Tensor<Scalar> out(Shape{rows, count, d});
  std::vector<NodePtr<Scalar>> inputs;
  for (int t = 0; t < count; ++t) {
    require(tokens[t].dim(0) == rows && tokens[t].dim(1) == d, "stack1: shape mismatch");
    for (int m = 0; m < rows; ++m)
      for (int k = 0; k < d; ++k) out.at(m, t, k) = tokens[t].value().at(m, k);
    inputs.push_back(tokens[t].node());
  }
  auto captured = inputs;
  return make_result<Scalar>(std::move(out), "stack1", std::move(inputs),
                             [captured, rows, count, d](Node<Scalar>& self) {
                               for (int t = 0; t < count; ++t) {
                                 if (!wants(captured[t])) continue;
                                 Tensor<Scalar> g(Shape{rows, d});
                                 for (int m = 0; m < rows; ++m)
                                   for (int k = 0; k < d; ++k) g.at(m, k) = self.grad.at(m, t, k);
                                 captured[t]->accumulate(g);
                               }
                             });
}

template <typename Scalar>
Var<Scalar> gather_tokens(const Var<Scalar>& x, const std::vector<int>& index) {
  require(x.value().rank() == 3 && static_cast<int>(index.size()) == x.dim(0), "gather_tokens: shape");
  const int rows = x.dim(0), tokens = x.dim(1), d = x.dim(2);
  Tensor<Scalar> out(Shape{rows, d});
  for (int m = 0; m < rows; ++m) {
    require(index[m] >= 0 && index[m] < tokens, "gather_tokens: index out of range");
    for (int k = 0; k < d; ++k) out.at(m, k) = x.value().at(m, index[m], k);
  }
  auto nx = x.node();
  return make_result<Scalar>(std::move(out), "gather_tokens", {nx}, [nx, index, rows, d](Node<Scalar>& self) {
    auto& g = nx->grad_buffer();
    for (int m = 0; m < rows; ++m)
      for (int k = 0; k < d; ++k) g.at(m, index[m], k) += self.grad.at(m, k);
  });
}

template <typename Scalar>
Var<Scalar> bmm(const Var<Scalar>& a, const Var<Scalar>& b, bool transpose_b) {
  require(a.value().rank() == 3 && b.value().rank() == 3 && a.dim(0) == b.dim(0), "bmm: expects 3-D batches");
  const int batch = a.dim(0), m = a.dim(1), k = a.dim(2);
  const int n = transpose_b ? b.dim(1) : b.dim(2);
  require((transpose_b ? b.dim(2) : b.dim(1)) == k, "bmm: inner dimension mismatch");
  Tensor<Scalar> out(Shape{batch, m, n});
  const Eigen::Index sa = static_cast<Eigen::Index>(m) * k, sb = static_cast<Eigen::Index>(k) * n,
                     so = static_cast<Eigen::Index>(m) * n;
  using CMap = Eigen::Map<const RowMat<Scalar>>;
  using MMap = Eigen::Map<RowMat<Scalar>>;
  for (int i = 0; i < batch; ++i) {
    CMap A(a.value().data() + i * sa, m, k);
    MMap C(out.data() + i * so, m, n);
    if (transpose_b)
      C.noalias() = A * CMap(b.value().data() + i * sb, n, k).transpose();
    else
      C.noalias() = A * CMap(b.value().data() + i * sb, k, n);
  }
  auto na = a.node(), nb = b.node();
  return make_result<Scalar>(
      std::move(out), "bmm", {na, nb}, [na, nb, batch, m, k, n, sa, sb, so, transpose_b](Node<Scalar>& self) {
        Tensor<Scalar> ga, gb;
        if (wants(na)) ga = Tensor<Scalar>(na->value.shape());
        if (wants(nb)) gb = Tensor<Scalar>(nb->value.shape());
        for (int i = 0; i < batch; ++i) {
          CMap G(self.grad.data() + i * so, m, n);
          CMap A(na->value.data() + i * sa, m, k);
          if (transpose_b) {
            CMap B(nb->value.data() + i * sb, n, k);
            if (!ga.empty()) MMap(ga.data() + i * sa, m, k).noalias() = G * B;
            if (!gb.empty()) MMap(gb.data() + i * sb, n, k).noalias() = G.transpose() * A;
          } else {
            CMap B(nb->value.data() + i * sb, k, n);
            if (!ga.empty()) MMap(ga.data() + i * sa, m, k).noalias() = G * B.transpose();
            if (!gb.empty()) MMap(gb.data() + i * sb, k, n).noalias() = A.transpose() * G;
          }
        }
        if (!ga.empty()) na->accumulate(ga);
        if (!gb.empty()) nb->accumulate(gb);
      });
}

template <typename Scalar>
Var<Scalar> softmax_last(const Var<Scalar>& x) {
  const int cols = x.shape().back();
  const Eigen::Index rows = x.value().size() / cols;
  Tensor<Scalar> out(x.shape());
  {
    auto in = x.value().matrix(rows, cols);
    auto y = out.matrix(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Scalar mx = in.row(r).maxCoeff();
      y.row(r) = (in.row(r).array() - mx).exp().matrix();
      y.row(r) /= y.row(r).sum();
    }
  }
  auto nx = x.node();
  return make_result<Scalar>(std::move(out), "softmax", {nx}, [nx, rows, cols](Node<Scalar>& self) {
      Tensor<Scalar> g(nx->value.shape());
      auto y = self.value.matrix(rows, cols);
      auto gy = self.grad.matrix(rows, cols);
      auto gx = g.matrix(rows, cols);
      for (Eigen::Index r = 0; r < rows; ++r) {
        const Scalar dot = y.row(r).dot(gy.row(r));
        gx.row(r) = (y.row(r).array() * (gy.row(r).array() - dot)).matrix();
      }
      nx->accumulate(g);
  });
}

template <typename Scalar>
Var<Scalar> layer_norm_last(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta, Scalar eps) {
  const int cols = x.shape().back();
  const Eigen::Index rows = x.value().size() / cols;
  require(gamma.value().size() == cols && beta.value().size() == cols, "layer_norm: parameter size");
  Tensor<Scalar> out(x.shape());
  Tensor<Scalar> xhat(x.shape());
  Eigen::Array<Scalar, Eigen::Dynamic, 1> inv_std(rows);
  {
    auto in = x.value().matrix(rows, cols);
    auto xh = xhat.matrix(rows, cols);
    auto y = out.matrix(rows, cols);
    const auto g = gamma.value().matrix(1, cols).row(0).array();
    const auto b = beta.value().matrix(1, cols).row(0).array();
    for (Eigen::Index r = 0; r < rows; ++r) {
      const Scalar mu = in.row(r).mean();
      const Scalar var = (in.row(r).array() - mu).square().mean();
      inv_std[r] = Scalar(1) / std::sqrt(var + eps);
      xh.row(r) = ((in.row(r).array() - mu) * inv_std[r]).matrix();
      y.row(r) = (xh.row(r).array() * g + b).matrix();
    }
  }
  auto nx = x.node(), ng = gamma.node(), nb = beta.node();
  return make_result<Scalar>(
      std::move(out), "layer_norm", {nx, ng, nb},
      [nx, ng, nb, xhat = std::move(xhat), inv_std, rows, cols](Node<Scalar>& self) {
        auto gy = self.grad.matrix(rows, cols);
        auto xh = xhat.matrix(rows, cols);
        if (wants(ng)) {
          Tensor<Scalar> gg(ng->value.shape());
          gg.matrix(1, cols) = (gy.array() * xh.array()).colwise().sum().matrix();
          ng->accumulate(gg);
        }
        if (wants(nb)) {
          Tensor<Scalar> gb(nb->value.shape());
          gb.matrix(1, cols) = gy.colwise().sum();
          nb->accumulate(gb);
        }
        if (wants(nx)) {
          Tensor<Scalar> gx(nx->value.shape());
          auto out = gx.matrix(rows, cols);
          const auto g = ng->value.matrix(1, cols).row(0).array();
          for (Eigen::Index r = 0; r < rows; ++r) {
            const auto dxh = (gy.row(r).array() * g).eval();
            const Scalar s1 = dxh.sum();
            const Scalar s2 = (dxh * xh.row(r).array()).sum();
            out.row(r) = ((dxh * Scalar(cols) - s1 - xh.row(r).array() * s2) * (inv_std[r] / Scalar(cols))).matrix();
          }
          nx->accumulate(gx);
        }
      });
}

namespace {
template <typename Scalar>
void permute_heads(const Scalar* src, Scalar* dst, int batch, int tokens, int heads, int dh, bool split) {
  // split: [B, T, H, dh] -> [B, H, T, dh]; merge is the inverse.
  for (int b = 0; b < batch; ++b)
    for (int t = 0; t < tokens; ++t)
      for (int h = 0; h < heads; ++h) {
        const Eigen::Index packed = ((static_cast<Eigen::Index>(b) * tokens + t) * heads + h) * dh;
        const Eigen::Index headed = ((static_cast<Eigen::Index>(b) * heads + h) * tokens + t) * dh;
        if (split)
          std::copy_n(src + packed, dh, dst + headed);
        else
          std::copy_n(src + headed, dh, dst + packed);
      }
}
}  // namespace

template <typename Scalar>
Var<Scalar> split_heads(const Var<Scalar>& x, int heads) {
  require(x.value().rank() == 3 && x.dim(2) % heads == 0, "split_heads: bad shape");
  const int batch = x.dim(0), tokens = x.dim(1), dh = x.dim(2) / heads;
  Tensor<Scalar> out(Shape{batch * heads, tokens, dh});
  permute_heads(x.value().data(), out.data(), batch, tokens, heads, dh, true);
  auto nx = x.node();
  return make_result<Scalar>(std::move(out), "split_heads", {nx},
                             [nx, batch, tokens, heads, dh](Node<Scalar>& self) {
                               Tensor<Scalar> g(nx->value.shape());
                               permute_heads(self.grad.data(), g.data(), batch, tokens, heads, dh, false);
                               nx->accumulate(g);
                             });
}

template <typename Scalar>
Var<Scalar> merge_heads(const Var<Scalar>& x, int heads) {
  require(x.value().rank() == 3 && x.dim(0) % heads == 0, "merge_heads: bad shape");
  const int batch = x.dim(0) / heads, tokens = x.dim(1), dh = x.dim(2);
  Tensor<Scalar> out(Shape{batch, tokens, heads * dh});
  permute_heads(x.value().data(), out.data(), batch, tokens, heads, dh, false);
  auto nx = x.node();
  return make_result<Scalar>(std::move(out), "merge_heads", {nx},
                             [nx, batch, tokens, heads, dh](Node<Scalar>& self) {
                               Tensor<Scalar> g(nx->value.shape());
                               permute_heads(self.grad.data(), g.data(), batch, tokens, heads, dh, true);
                               nx->accumulate(g);
                             });
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, int stride, int pad) {
  require(x.value().rank() == 4 && weight.value().rank() == 4, "conv2d: expects 4-D input and weight");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int o = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  require(weight.dim(1) == c, "conv2d: channel mismatch " + shape_string(x.shape()) + " vs " +
                                  shape_string(weight.shape()));
  const int ho = (h + 2 * pad - kh) / stride + 1, wo = (w + 2 * pad - kw) / stride + 1;
  require(ho > 0 && wo > 0, "conv2d: empty output");
  const Eigen::Index p = static_cast<Eigen::Index>(ho) * wo, ck = static_cast<Eigen::Index>(c) * kh * kw;
  const Eigen::Index in_plane = static_cast<Eigen::Index>(c) * h * w;

  auto unfold = [=](const Tensor<Scalar>& src) {
    RowMat<Scalar> cols(ck, n * p);
    for (int i = 0; i < n; ++i)
      im2col(src.data() + i * in_plane, c, h, w, kh, kw, stride, pad, ho, wo, cols.data() + i * p, n * p);
    return cols;
  };

  RowMat<Scalar> ym;
  {
    const RowMat<Scalar> cols = unfold(x.value());
    ym.noalias() = weight.value().matrix(o, ck) * cols;
  }
  if (bias.defined()) ym.colwise() += bias.value().matrix(o, 1).col(0);
  Tensor<Scalar> out(Shape{n, o, ho, wo});
  channel_major_to_batch(ym.data(), n, o, p, out.data());

  auto nx = x.node(), nw = weight.node(), nb = bias.defined() ? bias.node() : NodePtr<Scalar>();
  return make_result<Scalar>(
      std::move(out), "conv2d", {nx, nw, nb},
      [=](Node<Scalar>& self) {
        RowMat<Scalar> gy(o, n * p);
        batch_to_channel_major(self.grad.data(), n, o, p, gy.data());
        if (wants(nb)) {
          Tensor<Scalar> gb(nb->value.shape());
          gb.matrix(o, 1).col(0) = gy.rowwise().sum();
          nb->accumulate(gb);
        }
        if (!wants(nx) && !wants(nw)) return;
        if (wants(nw)) {
          const RowMat<Scalar> cols = unfold(nx->value);
          Tensor<Scalar> gw(nw->value.shape());
          gw.matrix(o, ck).noalias() = gy * cols.transpose();
          nw->accumulate(gw);
        }
        if (wants(nx)) {
          RowMat<Scalar> gcols;
          gcols.noalias() = nw->value.matrix(o, ck).transpose() * gy;
          auto& gx = nx->grad_buffer();
          for (int i = 0; i < n; ++i)
            col2im(gcols.data() + i * p, n * p, c, h, w, kh, kw, stride, pad, ho, wo, gx.data() + i * in_plane);
        }
      });
}

template <typename Scalar>
Var<Scalar> conv_transpose2d(const Var<Scalar>& x, const Var<Scalar>& weight, const Var<Scalar>& bias, int stride,
                             int pad) {
  require(x.value().rank() == 4 && weight.value().rank() == 4, "conv_transpose2d: expects 4-D tensors");
  const int n = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  require(weight.dim(0) == cin, "conv_transpose2d: channel mismatch");
  const int cout = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  const int ho = (h - 1) * stride - 2 * pad + kh, wo = (w - 1) * stride - 2 * pad + kw;
  require(ho > 0 && wo > 0, "conv_transpose2d: empty output");
  const Eigen::Index p = static_cast<Eigen::Index>(h) * w, ck = static_cast<Eigen::Index>(cout) * kh * kw;
  const Eigen::Index out_plane = static_cast<Eigen::Index>(cout) * ho * wo;

  RowMat<Scalar> xm(cin, n * p);
  batch_to_channel_major(x.value().data(), n, cin, p, xm.data());
  RowMat<Scalar> cols;
  cols.noalias() = weight.value().matrix(cin, ck).transpose() * xm;
  Tensor<Scalar> out(Shape{n, cout, ho, wo});
  for (int i = 0; i < n; ++i)
    col2im(cols.data() + i * p, n * p, cout, ho, wo, kh, kw, stride, pad, h, w, out.data() + i * out_plane);
  if (bias.defined()) {
    auto om = out.matrix(static_cast<Eigen::Index>(n) * cout, static_cast<Eigen::Index>(ho) * wo);
    for (int i = 0; i < n; ++i)
      for (int co = 0; co < cout; ++co) om.row(static_cast<Eigen::Index>(i) * cout + co).array() += bias.value()[co];
  }

  auto nx = x.node(), nw = weight.node(), nb = bias.defined() ? bias.node() : NodePtr<Scalar>();
  return make_result<Scalar>(
      std::move(out), "conv_transpose2d", {nx, nw, nb},
      [=](Node<Scalar>& self) {
        if (wants(nb)) {
          Tensor<Scalar> gb(nb->value.shape());
          auto gm = self.grad.matrix(static_cast<Eigen::Index>(n) * cout, static_cast<Eigen::Index>(ho) * wo);
          for (int i = 0; i < n; ++i)
            for (int co = 0; co < cout; ++co) gb[co] += gm.row(static_cast<Eigen::Index>(i) * cout + co).sum();
          nb->accumulate(gb);
        }
        if (!wants(nx) && !wants(nw)) return;
        RowMat<Scalar> gcols(ck, n * p);
        for (int i = 0; i < n; ++i)
          im2col(self.grad.data() + i * out_plane, cout, ho, wo, kh, kw, stride, pad, h, w, gcols.data() + i * p,
                 n * p);
        if (wants(nx)) {
          RowMat<Scalar> gxm;
          gxm.noalias() = nw->value.matrix(cin, ck) * gcols;
          Tensor<Scalar> gx(nx->value.shape());
          channel_major_to_batch(gxm.data(), n, cin, p, gx.data());
          nx->accumulate(gx);
        }
        if (wants(nw)) {
          RowMat<Scalar> xmv(cin, n * p);
          batch_to_channel_major(nx->value.data(), n, cin, p, xmv.data());
          Tensor<Scalar> gw(nw->value.shape());
          gw.matrix(cin, ck).noalias() = xmv * gcols.transpose();
          nw->accumulate(gw);
        }
      });
}

template <typename Scalar>
Var<Scalar> batch_norm2d(const Var<Scalar>& x, const Var<Scalar>& gamma, const Var<Scalar>& beta,
                         Tensor<Scalar>& running_mean, Tensor<Scalar>& running_var, bool training, Scalar momentum,
                         Scalar eps) {
  require(x.value().rank() == 4, "batch_norm2d: expects NCHW");
  const int n = x.dim(0), c = x.dim(1);
  const Eigen::Index p = static_cast<Eigen::Index>(x.dim(2)) * x.dim(3);
  const Eigen::Index count = n * p;
  Eigen::Array<Scalar, Eigen::Dynamic, 1> mean_c(c), inv_std(c);
  const auto in = x.value().matrix(static_cast<Eigen::Index>(n) * c, p);
  if (training) {
    require(count > 1, "batch_norm2d: training needs more than one value per channel");
    for (int ch = 0; ch < c; ++ch) {
      Scalar s = 0;
      for (int i = 0; i < n; ++i) s += in.row(static_cast<Eigen::Index>(i) * c + ch).sum();
      const Scalar mu = s / Scalar(count);
      Scalar v = 0;
      for (int i = 0; i < n; ++i) v += (in.row(static_cast<Eigen::Index>(i) * c + ch).array() - mu).square().sum();
      const Scalar var = v / Scalar(count);
      mean_c[ch] = mu;
      inv_std[ch] = Scalar(1) / std::sqrt(var + eps);
      running_mean[ch] = (Scalar(1) - momentum) * running_mean[ch] + momentum * mu;
      running_var[ch] = (Scalar(1) - momentum) * running_var[ch] + momentum * v / Scalar(count - 1);
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean_c[ch] = running_mean[ch];
      inv_std[ch] = Scalar(1) / std::sqrt(running_var[ch] + eps);
    }
  }
  Tensor<Scalar> xhat(x.shape());
  Tensor<Scalar> out(x.shape());
  {
    auto xh = xhat.matrix(static_cast<Eigen::Index>(n) * c, p);
    auto y = out.matrix(static_cast<Eigen::Index>(n) * c, p);
    for (int i = 0; i < n; ++i)
      for (int ch = 0; ch < c; ++ch) {
        const Eigen::Index r = static_cast<Eigen::Index>(i) * c + ch;
        xh.row(r) = ((in.row(r).array() - mean_c[ch]) * inv_std[ch]).matrix();
        y.row(r) = (xh.row(r).array() * gamma.value()[ch] + beta.value()[ch]).matrix();
      }
  }
  auto nx = x.node(), ng = gamma.node(), nb = beta.node();
  return make_result<Scalar>(
      std::move(out), "batch_norm2d", {nx, ng, nb},
      [nx, ng, nb, xhat = std::move(xhat), inv_std, n, c, p, count, training](Node<Scalar>& self) {
        const auto gy = self.grad.matrix(static_cast<Eigen::Index>(n) * c, p);
        const auto xh = xhat.matrix(static_cast<Eigen::Index>(n) * c, p);
        Eigen::Array<Scalar, Eigen::Dynamic, 1> sum_g = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(c);
        Eigen::Array<Scalar, Eigen::Dynamic, 1> sum_gx = Eigen::Array<Scalar, Eigen::Dynamic, 1>::Zero(c);
        for (int i = 0; i < n; ++i)
          for (int ch = 0; ch < c; ++ch) {
            const Eigen::Index r = static_cast<Eigen::Index>(i) * c + ch;
            sum_g[ch] += gy.row(r).sum();
            sum_gx[ch] += (gy.row(r).array() * xh.row(r).array()).sum();
          }
        if (wants(ng)) ng->accumulate(Tensor<Scalar>(ng->value.shape(), sum_gx));
        if (wants(nb)) nb->accumulate(Tensor<Scalar>(nb->value.shape(), sum_g));
        if (wants(nx)) {
          Tensor<Scalar> gx(nx->value.shape());
          auto out = gx.matrix(static_cast<Eigen::Index>(n) * c, p);
          for (int i = 0; i < n; ++i)
            for (int ch = 0; ch < c; ++ch) {
              const Eigen::Index r = static_cast<Eigen::Index>(i) * c + ch;
              const Scalar g = ng->value[ch];
              if (training) {
                const Scalar m = Scalar(count);
                out.row(r) = ((gy.row(r).array() * m - sum_g[ch] - xh.row(r).array() * sum_gx[ch]) *
                              (g * inv_std[ch] / m))
                                 .matrix();
              } else {
                out.row(r) = gy.row(r) * (g * inv_std[ch]);
              }
            }
          nx->accumulate(gx);
        }
      });
}

template <typename Scalar>
Var<Scalar> max_pool2d(const Var<Scalar>& x, int kernel, int stride, int pad) {
  require(x.value().rank() == 4, "max_pool2d: expects NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = (h + 2 * pad - kernel) / stride + 1, wo = (w + 2 * pad - kernel) / stride + 1;
  Tensor<Scalar> out(Shape{n, c, ho, wo});
  std::vector<Eigen::Index> argmax(static_cast<std::size_t>(out.size()));
  const Scalar* src = x.value().data();
  Eigen::Index o = 0;
  for (int i = 0; i < n; ++i)
    for (int ch = 0; ch < c; ++ch) {
      const Eigen::Index base = (static_cast<Eigen::Index>(i) * c + ch) * h * w;
      for (int oy = 0; oy < ho; ++oy)
        for (int ox = 0; ox < wo; ++ox, ++o) {
          Scalar best = -std::numeric_limits<Scalar>::infinity();
          Eigen::Index best_idx = -1;
          for (int ky = 0; ky < kernel; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kernel; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= w) continue;
              const Eigen::Index idx = base + static_cast<Eigen::Index>(iy) * w + ix;
              if (src[idx] > best || best_idx < 0) {
                best = src[idx];
                best_idx = idx;
              }
            }
          }
          out[o] = best;
          argmax[static_cast<std::size_t>(o)] = best_idx;
        }
    }
  auto nx = x.node();
  return make_result<Scalar>(std::move(out), "max_pool2d", {nx}, [nx, argmax = std::move(argmax)](Node<Scalar>& self) {
    auto& g = nx->grad_buffer();
    for (std::size_t i = 0; i < argmax.size(); ++i) g[argmax[i]] += self.grad[static_cast<Eigen::Index>(i)];
  });
}

template <typename Scalar>
Var<Scalar> global_avg_pool(const Var<Scalar>& x) {
  require(x.value().rank() == 4, "global_avg_pool: expects NCHW");
  const int n = x.dim(0), c = x.dim(1);
  const Eigen::Index p = static_cast<Eigen::Index>(x.dim(2)) * x.dim(3);
  Tensor<Scalar> out(Shape{n, c});
  out.matrix(static_cast<Eigen::Index>(n) * c, 1).col(0) =
      x.value().matrix(static_cast<Eigen::Index>(n) * c, p).rowwise().mean();
  auto nx = x.node();
  return make_result<Scalar>(std::move(out), "global_avg_pool", {nx}, [nx, n, c, p](Node<Scalar>& self) {
    Tensor<Scalar> g(nx->value.shape());
    auto gm = g.matrix(static_cast<Eigen::Index>(n) * c, p);
    for (Eigen::Index r = 0; r < static_cast<Eigen::Index>(n) * c; ++r) gm.row(r).setConstant(self.grad[r] / Scalar(p));
    nx->accumulate(g);
  });
}

namespace {
struct Lerp {
  int i0, i1;
  double t;
};
std::vector<Lerp> bilinear_taps(int in, int out) {
  std::vector<Lerp> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const int i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - i0};
  }
  return taps;
}
}  // namespace

template <typename Scalar>
Var<Scalar> upsample_bilinear(const Var<Scalar>& x, int out_h, int out_w) {
  require(x.value().rank() == 4, "upsample_bilinear: expects NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto ty = bilinear_taps(h, out_h), tx = bilinear_taps(w, out_w);
  Tensor<Scalar> out(Shape{n, c, out_h, out_w});
  const Eigen::Index planes = static_cast<Eigen::Index>(n) * c;
  for (Eigen::Index pl = 0; pl < planes; ++pl) {
    const Scalar* src = x.value().data() + pl * h * w;
    Scalar* dst = out.data() + pl * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[static_cast<std::size_t>(ox)];
        const Scalar top = src[a.i0 * w + b.i0] * Scalar(1 - b.t) + src[a.i0 * w + b.i1] * Scalar(b.t);
        const Scalar bot = src[a.i1 * w + b.i0] * Scalar(1 - b.t) + src[a.i1 * w + b.i1] * Scalar(b.t);
        dst[oy * out_w + ox] = top * Scalar(1 - a.t) + bot * Scalar(a.t);
      }
    }
  }
  auto nx = x.node();
  return make_result<Scalar>(std::move(out), "upsample_bilinear", {nx},
                             [nx, ty, tx, planes, h, w, out_h, out_w](Node<Scalar>& self) {
                               auto& g = nx->grad_buffer();
                               for (Eigen::Index pl = 0; pl < planes; ++pl) {
                                 Scalar* dst = g.data() + pl * h * w;
                                 const Scalar* src = self.grad.data() + pl * out_h * out_w;
                                 for (int oy = 0; oy < out_h; ++oy) {
                                   const auto& a = ty[static_cast<std::size_t>(oy)];
                                   for (int ox = 0; ox < out_w; ++ox) {
                                     const auto& b = tx[static_cast<std::size_t>(ox)];
                                     const Scalar v = src[oy * out_w + ox];
                                     dst[a.i0 * w + b.i0] += v * Scalar((1 - a.t) * (1 - b.t));
                                     dst[a.i0 * w + b.i1] += v * Scalar((1 - a.t) * b.t);
                                     dst[a.i1 * w + b.i0] += v * Scalar(a.t * (1 - b.t));
                                     dst[a.i1 * w + b.i1] += v * Scalar(a.t * b.t);
                                   }
                                 }
                               }
                             });
}

template <typename Scalar>
Var<Scalar> crop_windows(const Var<Scalar>& x, const std::vector<Window>& windows, int height, int width) {
  require(x.value().rank() == 4, "crop_windows: expects NCHW");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  for (const auto& win : windows)
    require(win.sample >= 0 && win.sample < n && win.y0 >= 0 && win.x0 >= 0 && win.y0 + height <= h &&
                win.x0 + width <= w,
            "crop_windows: window outside map");
  const int m = static_cast<int>(windows.size());
  Tensor<Scalar> out(Shape{m, c, height, width});
  for (int i = 0; i < m; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < height; ++y)
        std::copy_n(x.value().data() +
                        ((static_cast<Eigen::Index>(windows[i].sample) * c + ch) * h + windows[i].y0 + y) * w +
                        windows[i].x0,
                    width, &out.at(i, ch, y, 0));
  auto nx = x.node();
  return make_result<Scalar>(std::move(out), "crop_windows", {nx},
                             [nx, windows, m, c, height, width](Node<Scalar>& self) {
                               auto& g = nx->grad_buffer();
                               for (int i = 0; i < m; ++i)
                                 for (int ch = 0; ch < c; ++ch)
                                   for (int y = 0; y < height; ++y)
                                     for (int xx = 0; xx < width; ++xx)
                                       g.at(windows[i].sample, ch, windows[i].y0 + y, windows[i].x0 + xx) +=
                                           self.grad.at(i, ch, y, xx);
                             });
}

template <typename Scalar>
Var<Scalar> bce(const Var<Scalar>& probs, const Tensor<Scalar>& targets, const Tensor<Scalar>& mask, Scalar eps) {
  require(targets.size() == probs.value().size(), "bce: target size mismatch");
  require(mask.empty() || mask.size() == probs.value().size(), "bce: mask size mismatch");
  using ArrT = Arr<Scalar>;
  const ArrT m = mask.empty() ? ArrT::Ones(probs.value().size()) : ArrT((mask.array() != Scalar(0)).template cast<Scalar>());
  const Scalar count = m.sum();
  const ArrT p = probs.value().array().max(eps).min(Scalar(1) - eps);
  const ArrT& t = targets.array();
  const Scalar total = count > 0 ? -(m * (t * p.log() + (Scalar(1) - t) * (Scalar(1) - p).log())).sum() / count : 0;
  auto np = probs.node();
  return make_result<Scalar>(Tensor<Scalar>::scalar(total), "bce", {np},
                             [np, m, p, t, count, eps](Node<Scalar>& self) {
                               if (count <= 0) return;
                               const auto& raw = np->value.array();
                               const Arr<Scalar> inside = ((raw >= eps) && (raw <= Scalar(1) - eps)).template cast<Scalar>();
                               const Arr<Scalar> g = m * inside * (-t / p + (Scalar(1) - t) / (Scalar(1) - p)) *
                                             (self.grad[0] / count);
                               np->accumulate(Tensor<Scalar>(np->value.shape(), g));
                             });
}

template <typename Scalar>
Var<Scalar> l1_mean(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same(a, b, "l1_mean");
  const auto n = static_cast<Scalar>(a.value().size());
  const Scalar total = (a.value().array() - b.value().array()).abs().sum() / n;
  auto na = a.node(), nb = b.node();
  return make_result<Scalar>(Tensor<Scalar>::scalar(total), "l1_mean", {na, nb}, [na, nb, n](Node<Scalar>& self) {
    const Arr<Scalar> s = (na->value.array() - nb->value.array()).sign() * (self.grad[0] / n);
    if (wants(na)) na->accumulate(Tensor<Scalar>(na->value.shape(), s));
    if (wants(nb)) nb->accumulate(Tensor<Scalar>(nb->value.shape(), -s));
  });
}

template <typename Scalar>
Var<Scalar> mse_mean(const Var<Scalar>& a, const Tensor<Scalar>& target) {
  require(a.value().size() == target.size(), "mse_mean: size mismatch");
  const auto n = static_cast<Scalar>(a.value().size());
  const Scalar total = (a.value().array() - target.array()).square().sum() / n;
  auto na = a.node();
  return make_result<Scalar>(Tensor<Scalar>::scalar(total), "mse_mean", {na}, [na, target, n](Node<Scalar>& self) {
    na->accumulate(Tensor<Scalar>(na->value.shape(),
                                  (na->value.array() - target.array()) * (Scalar(2) * self.grad[0] / n)));
  });
}

template <typename Scalar>
Var<Scalar> mean_log(const Var<Scalar>& p, Scalar eps) {
  const auto n = static_cast<Scalar>(p.value().size());
  const auto clipped = p.value().array().max(eps).min(Scalar(1) - eps);
  auto np = p.node();
  return make_result<Scalar>(Tensor<Scalar>::scalar(clipped.log().sum() / n), "mean_log", {np},
                             [np, n, eps](Node<Scalar>& self) {
                               const auto& raw = np->value.array();
                               const Arr<Scalar> g =
                                   ((raw >= eps) && (raw <= Scalar(1) - eps))
                                       .select(Scalar(1) / raw, Scalar(0)) *
                                   (self.grad[0] / n);
                               np->accumulate(Tensor<Scalar>(np->value.shape(), g));
                             });
}

template <typename Scalar>
Var<Scalar> mean_log1m(const Var<Scalar>& p, Scalar eps) {
  const auto n = static_cast<Scalar>(p.value().size());
  const auto clipped = p.value().array().max(eps).min(Scalar(1) - eps);
  auto np = p.node();
  return make_result<Scalar>(Tensor<Scalar>::scalar((Scalar(1) - clipped).log().sum() / n), "mean_log1m", {np},
                             [np, n, eps](Node<Scalar>& self) {
                               const auto& raw = np->value.array();
                               const Arr<Scalar> g =
                                   ((raw >= eps) && (raw <= Scalar(1) - eps))
                                       .select(Scalar(-1) / (Scalar(1) - raw), Scalar(0)) *
                                   (self.grad[0] / n);
                               np->accumulate(Tensor<Scalar>(np->value.shape(), g));
                             });
}

#define WSRTL_INSTANTIATE_OPS(S)                                                                               \
  template Var<S> add(const Var<S>&, const Var<S>&);                                                          \
  template Var<S> sub(const Var<S>&, const Var<S>&);                                                          \
  template Var<S> mul(const Var<S>&, const Var<S>&);                                                          \
  template Var<S> scale(const Var<S>&, S);                                                                    \
  template Var<S> maximum(const Var<S>&, const Var<S>&);                                                      \
  template Var<S> relu(const Var<S>&);                                                                        \
  template Var<S> leaky_relu(const Var<S>&, S);                                                               \
  template Var<S> sigmoid(const Var<S>&);                                                                     \
  template Var<S> reshape(const Var<S>&, Shape);                                                              \
  template Var<S> sum(const Var<S>&);                                                                         \
  template Var<S> mean(const Var<S>&);                                                                        \
  template Var<S> concat0(const std::vector<Var<S>>&);                                                        \
  template Var<S> slice0(const Var<S>&, int, int);                                                            \
  template Var<S> select0(const Var<S>&, const std::vector<int>&);                                            \
  template Var<S> broadcast0(const Var<S>&, int);                                                             \
  template Var<S> linear(const Var<S>&, const Var<S>&, const Var<S>&);                                        \
  template Var<S> per_token_linear(const Var<S>&, const Var<S>&, const Var<S>&);                              \
  template Var<S> stack1(const std::vector<Var<S>>&);                                                         \
  template Var<S> gather_tokens(const Var<S>&, const std::vector<int>&);                                      \
  template Var<S> bmm(const Var<S>&, const Var<S>&, bool);                                                    \
  template Var<S> softmax_last(const Var<S>&);                                                                \
  template Var<S> layer_norm_last(const Var<S>&, const Var<S>&, const Var<S>&, S);                            \
  template Var<S> split_heads(const Var<S>&, int);                                                            \
  template Var<S> merge_heads(const Var<S>&, int);                                                            \
  template Var<S> conv2d(const Var<S>&, const Var<S>&, const Var<S>&, int, int);                              \
  template Var<S> conv_transpose2d(const Var<S>&, const Var<S>&, const Var<S>&, int, int);                    \
  template Var<S> batch_norm2d(const Var<S>&, const Var<S>&, const Var<S>&, Tensor<S>&, Tensor<S>&, bool, S, S); \
  template Var<S> max_pool2d(const Var<S>&, int, int, int);                                                   \
  template Var<S> global_avg_pool(const Var<S>&);                                                             \
  template Var<S> upsample_bilinear(const Var<S>&, int, int);                                                 \
  template Var<S> crop_windows(const Var<S>&, const std::vector<Window>&, int, int);                          \
  template Var<S> bce(const Var<S>&, const Tensor<S>&, const Tensor<S>&, S);                                  \
  template Var<S> l1_mean(const Var<S>&, const Var<S>&);                                                      \
  template Var<S> mse_mean(const Var<S>&, const Tensor<S>&);                                                  \
  template Var<S> mean_log(const Var<S>&, S);                                                                 \
  template Var<S> mean_log1m(const Var<S>&, S);

WSRTL_INSTANTIATE_OPS(float)
WSRTL_INSTANTIATE_OPS(double)

}  // namespace ops

template void backward(const Var<float>&);
template void backward(const Var<double>&);

}  // namespace wsrtl
