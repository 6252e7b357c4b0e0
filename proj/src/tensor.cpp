#include "dfl/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

#include "dfl/errors.hpp"

namespace dfl {

size_t shape_numel(const Shape& shape) {
  size_t n = 1;
  for (size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::conv2d: return "conv2d";
    case OpKind::maxpool2d: return "maxpool2d";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::upsample_nearest: return "upsample_nearest";
    case OpKind::concat_channels: return "concat_channels";
    case OpKind::linear: return "linear";
    case OpKind::add: return "add";
    case OpKind::mul_scalar: return "mul_scalar";
    case OpKind::sum: return "sum";
    case OpKind::custom: return "custom";
  }
  return "?";
}

const Shape& Tensor::shape() const { return graph_->shape(id_); }
size_t Tensor::numel() const { return shape_numel(shape()); }
std::span<const double> Tensor::value() const { return graph_->value(id_); }
std::span<const double> Tensor::grad() const { return graph_->grad(id_); }

namespace {

[[noreturn]] void shape_fail(OpKind kind, const std::string& rule,
                             std::initializer_list<const Shape*> shapes) {
  std::string msg = std::string(op_name(kind)) + ": expected " + rule + ", got";
  for (const Shape* s : shapes) msg += " " + shape_str(*s);
  throw ShapeMismatch(msg);
}

void require_4d(OpKind kind, const Shape& s) {
  if (s.size() != 4 || s[0] != 1)
    shape_fail(kind, "a 1xCxHxW tensor", {&s});
}

}  // namespace

size_t Graph::add_tensor(Shape shape, std::vector<double> values) {
  Storage st;
  st.shape = std::move(shape);
  size_t n = shape_numel(st.shape);
  if (values.empty()) values.assign(n, 0.0);
  st.value = std::move(values);
  st.grad.assign(n, 0.0);
  tensors_.push_back(std::move(st));
  return tensors_.size() - 1;
}

Tensor Graph::leaf(Shape shape) { return Tensor(this, add_tensor(std::move(shape), {})); }

Tensor Graph::leaf(Shape shape, std::span<const double> values) {
  if (values.size() != shape_numel(shape))
    throw ShapeMismatch("leaf: " + std::to_string(values.size()) +
                        " values for shape " + shape_str(shape));
  return Tensor(this, add_tensor(std::move(shape),
                                 std::vector<double>(values.begin(), values.end())));
}

Tensor Graph::forward(const OpSpec& spec, std::span<const Tensor> inputs) {
  for (const Tensor& t : inputs)
    if (t.graph() != this)
      throw ShapeMismatch(std::string(op_name(spec.kind)) +
                          ": input tensor belongs to another graph");

  auto in_shape = [&](size_t i) -> const Shape& { return shape(inputs[i].id()); };
  auto in_val = [&](size_t i) { return value(inputs[i].id()); };
  auto arity = [&](size_t n) {
    if (inputs.size() != n)
      throw ShapeMismatch(std::string(op_name(spec.kind)) + ": expects " +
                          std::to_string(n) + " inputs, got " +
                          std::to_string(inputs.size()));
  };

  Shape out_shape;
  std::vector<double> out;
  std::vector<size_t> aux;

  switch (spec.kind) {
    case OpKind::conv2d: {
      arity(3);
      const Shape& xs = in_shape(0);
      const Shape& ws = in_shape(1);
      const Shape& bs = in_shape(2);
      require_4d(spec.kind, xs);
      if (ws.size() != 4) shape_fail(spec.kind, "OxCxKHxKW weights", {&ws});
      if (ws[1] != xs[1])
        shape_fail(spec.kind, "weight input channels matching x", {&xs, &ws});
      if (bs.size() != 1 || bs[0] != ws[0])
        shape_fail(spec.kind, "bias of length O", {&ws, &bs});
      if (spec.stride < 1) throw ShapeMismatch("conv2d: stride must be >= 1");
      if (spec.pad < 0) throw ShapeMismatch("conv2d: pad must be >= 0");
      int C = (int)xs[1], H = (int)xs[2], W = (int)xs[3];
      int O = (int)ws[0], KH = (int)ws[2], KW = (int)ws[3];
      int s = spec.stride, p = spec.pad;
      if (H + 2 * p < KH || W + 2 * p < KW)
        shape_fail(spec.kind, "kernel no larger than padded input", {&xs, &ws});
      int OH = (H + 2 * p - KH) / s + 1;
      int OW = (W + 2 * p - KW) / s + 1;
      out_shape = {1, (size_t)O, (size_t)OH, (size_t)OW};
      out.assign((size_t)O * OH * OW, 0.0);
      auto x = in_val(0);
      auto w = in_val(1);
      auto b = in_val(2);
      for (int oc = 0; oc < O; ++oc)
        std::fill_n(out.begin() + (size_t)oc * OH * OW, (size_t)OH * OW, b[oc]);
      for (int oc = 0; oc < O; ++oc) {
        for (int ic = 0; ic < C; ++ic) {
          const double* xplane = x.data() + (size_t)ic * H * W;
          double* oplane = out.data() + (size_t)oc * OH * OW;
          for (int ky = 0; ky < KH; ++ky) {
            for (int kx = 0; kx < KW; ++kx) {
              double wv = w[(((size_t)oc * C + ic) * KH + ky) * KW + kx];
              if (wv == 0.0) continue;
              int oy_lo = (p - ky) > 0 ? (p - ky + s - 1) / s : 0;
              int oy_hi = std::min(OH - 1, (H - 1 + p - ky) / s);
              int ox_lo = (p - kx) > 0 ? (p - kx + s - 1) / s : 0;
              int ox_hi = std::min(OW - 1, (W - 1 + p - kx) / s);
              for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                const double* xrow = xplane + (size_t)(oy * s + ky - p) * W;
                double* orow = oplane + (size_t)oy * OW;
                for (int ox = ox_lo; ox <= ox_hi; ++ox)
                  orow[ox] += wv * xrow[ox * s + kx - p];
              }
            }
          }
        }
      }
      break;
    }
    case OpKind::maxpool2d: {
      arity(1);
      const Shape& xs = in_shape(0);
      require_4d(spec.kind, xs);
      int C = (int)xs[1], H = (int)xs[2], W = (int)xs[3];
      int k = spec.window, s = spec.stride;
      if (k < 1 || s < 1) throw ShapeMismatch("maxpool2d: window/stride must be >= 1");
      if (H < k || W < k)
        shape_fail(spec.kind, "window no larger than input", {&xs});
      int OH = (H - k) / s + 1;
      int OW = (W - k) / s + 1;
      out_shape = {1, (size_t)C, (size_t)OH, (size_t)OW};
      out.resize((size_t)C * OH * OW);
      aux.resize(out.size());
      auto x = in_val(0);
      for (int c = 0; c < C; ++c) {
        const double* xplane = x.data() + (size_t)c * H * W;
        for (int oy = 0; oy < OH; ++oy) {
          for (int ox = 0; ox < OW; ++ox) {
            size_t best = (size_t)(oy * s) * W + (size_t)(ox * s);
            double bv = xplane[best];
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                size_t idx = (size_t)(oy * s + ky) * W + (size_t)(ox * s + kx);
                if (xplane[idx] > bv) {  // first maximal wins
                  bv = xplane[idx];
                  best = idx;
                }
              }
            }
            size_t o = ((size_t)c * OH + oy) * OW + ox;
            out[o] = bv;
            aux[o] = (size_t)c * H * W + best;
          }
        }
      }
      break;
    }
    case OpKind::relu: {
      arity(1);
      out_shape = in_shape(0);
      auto x = in_val(0);
      out.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0 ? x[i] : 0.0;
      break;
    }
    case OpKind::sigmoid: {
      arity(1);
      out_shape = in_shape(0);
      auto x = in_val(0);
      out.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-x[i]));
      break;
    }
    case OpKind::upsample_nearest: {
      arity(1);
      const Shape& xs = in_shape(0);
      require_4d(spec.kind, xs);
      int f = spec.factor;
      if (f < 1) throw ShapeMismatch("upsample_nearest: factor must be >= 1");
      int C = (int)xs[1], H = (int)xs[2], W = (int)xs[3];
      out_shape = {1, (size_t)C, (size_t)(H * f), (size_t)(W * f)};
      out.resize(shape_numel(out_shape));
      auto x = in_val(0);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H * f; ++y)
          for (int xx = 0; xx < W * f; ++xx)
            out[((size_t)c * H * f + y) * (W * f) + xx] =
                x[((size_t)c * H + y / f) * W + xx / f];
      break;
    }
    case OpKind::concat_channels: {
      arity(2);
      const Shape& as = in_shape(0);
      const Shape& bs = in_shape(1);
      require_4d(spec.kind, as);
      require_4d(spec.kind, bs);
      if (as[2] != bs[2] || as[3] != bs[3])
        shape_fail(spec.kind, "matching spatial extents", {&as, &bs});
      out_shape = {1, as[1] + bs[1], as[2], as[3]};
      out.reserve(shape_numel(out_shape));
      auto a = in_val(0);
      auto b = in_val(1);
      out.insert(out.end(), a.begin(), a.end());
      out.insert(out.end(), b.begin(), b.end());
      break;
    }
    case OpKind::linear: {
      arity(3);
      const Shape& xs = in_shape(0);
      const Shape& ws = in_shape(1);
      const Shape& bs = in_shape(2);
      if (ws.size() != 2) shape_fail(spec.kind, "OUTxIN weights", {&ws});
      size_t IN = ws[1], OUT = ws[0];
      if (shape_numel(xs) != IN)
        shape_fail(spec.kind, "input numel == IN", {&xs, &ws});
      if (bs.size() != 1 || bs[0] != OUT)
        shape_fail(spec.kind, "bias of length OUT", {&ws, &bs});
      out_shape = {OUT};
      out.resize(OUT);
      auto x = in_val(0);
      auto w = in_val(1);
      auto b = in_val(2);
      for (size_t o = 0; o < OUT; ++o) {
        double acc = b[o];
        const double* wrow = w.data() + o * IN;
        for (size_t i = 0; i < IN; ++i) acc += wrow[i] * x[i];
        out[o] = acc;
      }
      break;
    }
    case OpKind::add: {
      arity(2);
      const Shape& as = in_shape(0);
      const Shape& bs = in_shape(1);
      if (as != bs) shape_fail(spec.kind, "identical shapes", {&as, &bs});
      out_shape = as;
      auto a = in_val(0);
      auto b = in_val(1);
      out.resize(a.size());
      for (size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
      break;
    }
    case OpKind::mul_scalar: {
      arity(1);
      out_shape = in_shape(0);
      auto x = in_val(0);
      out.resize(x.size());
      for (size_t i = 0; i < x.size(); ++i) out[i] = x[i] * spec.scalar;
      break;
    }
    case OpKind::sum: {
      arity(1);
      out_shape = {1};
      auto x = in_val(0);
      double acc = 0;
      for (double v : x) acc += v;
      out = {acc};
      break;
    }
    case OpKind::custom:
      throw ShapeMismatch("custom nodes go through Graph::custom");
  }

  Node node;
  node.spec = spec;
  for (const Tensor& t : inputs) node.in.push_back(t.id());
  node.out = add_tensor(std::move(out_shape), std::move(out));
  node.aux = std::move(aux);
  nodes_.push_back(std::move(node));
  return Tensor(this, nodes_.back().out);
}

Tensor Graph::conv2d(Tensor x, Tensor w, Tensor b, int stride, int pad) {
  OpSpec s{OpKind::conv2d};
  s.stride = stride;
  s.pad = pad;
  Tensor in[] = {x, w, b};
  return forward(s, in);
}
Tensor Graph::maxpool2d(Tensor x, int window, int stride) {
  OpSpec s{OpKind::maxpool2d};
  s.window = window;
  s.stride = stride;
  Tensor in[] = {x};
  return forward(s, in);
}
Tensor Graph::relu(Tensor x) {
  Tensor in[] = {x};
  return forward(OpSpec{OpKind::relu}, in);
}
Tensor Graph::sigmoid(Tensor x) {
  Tensor in[] = {x};
  return forward(OpSpec{OpKind::sigmoid}, in);
}
Tensor Graph::upsample_nearest(Tensor x, int factor) {
  OpSpec s{OpKind::upsample_nearest};
  s.factor = factor;
  Tensor in[] = {x};
  return forward(s, in);
}
Tensor Graph::concat_channels(Tensor a, Tensor b) {
  Tensor in[] = {a, b};
  return forward(OpSpec{OpKind::concat_channels}, in);
}
Tensor Graph::linear(Tensor x, Tensor w, Tensor b) {
  Tensor in[] = {x, w, b};
  return forward(OpSpec{OpKind::linear}, in);
}
Tensor Graph::add(Tensor a, Tensor b) {
  Tensor in[] = {a, b};
  return forward(OpSpec{OpKind::add}, in);
}
Tensor Graph::mul_scalar(Tensor x, double c) {
  OpSpec s{OpKind::mul_scalar};
  s.scalar = c;
  Tensor in[] = {x};
  return forward(s, in);
}
Tensor Graph::sum(Tensor x) {
  Tensor in[] = {x};
  return forward(OpSpec{OpKind::sum}, in);
}

Tensor Graph::custom(std::shared_ptr<CustomOp> op,
                     std::span<const Tensor> inputs, Shape out_shape,
                     std::vector<double> out_values) {
  for (const Tensor& t : inputs)
    if (t.graph() != this)
      throw ShapeMismatch(std::string(op->name()) +
                          ": input tensor belongs to another graph");
  if (out_values.size() != shape_numel(out_shape))
    throw ShapeMismatch(std::string(op->name()) + ": output values mismatch shape");
  Node node;
  node.spec.kind = OpKind::custom;
  for (const Tensor& t : inputs) node.in.push_back(t.id());
  node.out = add_tensor(std::move(out_shape), std::move(out_values));
  node.custom = std::move(op);
  nodes_.push_back(std::move(node));
  return Tensor(this, nodes_.back().out);
}

std::span<const double> Graph::adjoint_of(size_t id) const {
  return adj_[id];
}

std::span<double> Graph::adjoint_accum(size_t id) {
  if (adj_[id].empty()) adj_[id].assign(shape_numel(tensors_[id].shape), 0.0);
  return adj_[id];
}

void Graph::backward(Tensor loss) {
  if (loss.graph() != this)
    throw NotScalarLoss("loss tensor belongs to another graph");
  if (shape_numel(tensors_[loss.id()].shape) != 1)
    throw NotScalarLoss("loss must have a single element, shape " +
                        shape_str(tensors_[loss.id()].shape));

  // One full gradient per call, accumulated into persistent grads at the
  // end, so repeated calls without zero_grads stack additively.
  adj_.assign(tensors_.size(), {});
  adjoint_accum(loss.id())[0] = 1.0;

  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (adj_[it->out].empty()) continue;
    backward_node(*it);
  }

  for (size_t i = 0; i < tensors_.size(); ++i) {
    if (adj_[i].empty()) continue;
    auto& grad = tensors_[i].grad;
    const auto& a = adj_[i];
    for (size_t j = 0; j < grad.size(); ++j) grad[j] += a[j];
  }
  adj_.clear();
}

void Graph::backward_node(const Node& node) {
  const auto& gout = adj_[node.out];
  auto in_shape = [&](size_t i) -> const Shape& { return tensors_[node.in[i]].shape; };
  auto in_val = [&](size_t i) -> const std::vector<double>& {
    return tensors_[node.in[i]].value;
  };

  switch (node.spec.kind) {
    case OpKind::conv2d: {
      const Shape& xs = in_shape(0);
      const Shape& ws = in_shape(1);
      int C = (int)xs[1], H = (int)xs[2], W = (int)xs[3];
      int O = (int)ws[0], KH = (int)ws[2], KW = (int)ws[3];
      int s = node.spec.stride, p = node.spec.pad;
      const Shape& os = tensors_[node.out].shape;
      int OH = (int)os[2], OW = (int)os[3];
      const auto& x = in_val(0);
      const auto& w = in_val(1);
      auto gx = adjoint_accum(node.in[0]);
      auto gw = adjoint_accum(node.in[1]);
      auto gb = adjoint_accum(node.in[2]);
      for (int oc = 0; oc < O; ++oc) {
        const double* gplane = gout.data() + (size_t)oc * OH * OW;
        double acc = 0;
        for (size_t i = 0; i < (size_t)OH * OW; ++i) acc += gplane[i];
        gb[oc] += acc;
        for (int ic = 0; ic < C; ++ic) {
          const double* xplane = x.data() + (size_t)ic * H * W;
          double* gxplane = gx.data() + (size_t)ic * H * W;
          for (int ky = 0; ky < KH; ++ky) {
            for (int kx = 0; kx < KW; ++kx) {
              size_t widx = (((size_t)oc * C + ic) * KH + ky) * KW + kx;
              double wv = w[widx];
              double wacc = 0;
              int oy_lo = (p - ky) > 0 ? (p - ky + s - 1) / s : 0;
              int oy_hi = std::min(OH - 1, (H - 1 + p - ky) / s);
              int ox_lo = (p - kx) > 0 ? (p - kx + s - 1) / s : 0;
              int ox_hi = std::min(OW - 1, (W - 1 + p - kx) / s);
              for (int oy = oy_lo; oy <= oy_hi; ++oy) {
                const double* grow = gplane + (size_t)oy * OW;
                const double* xrow = xplane + (size_t)(oy * s + ky - p) * W;
                double* gxrow = gxplane + (size_t)(oy * s + ky - p) * W;
                for (int ox = ox_lo; ox <= ox_hi; ++ox) {
                  double g = grow[ox];
                  gxrow[ox * s + kx - p] += wv * g;
                  wacc += g * xrow[ox * s + kx - p];
                }
              }
              gw[widx] += wacc;
            }
          }
        }
      }
      break;
    }
    case OpKind::maxpool2d: {
      auto gx = adjoint_accum(node.in[0]);
      for (size_t i = 0; i < gout.size(); ++i) gx[node.aux[i]] += gout[i];
      break;
    }
    case OpKind::relu: {
      const auto& x = in_val(0);
      auto gx = adjoint_accum(node.in[0]);
      for (size_t i = 0; i < gout.size(); ++i)
        if (x[i] > 0) gx[i] += gout[i];
      break;
    }
    case OpKind::sigmoid: {
      const auto& y = tensors_[node.out].value;
      auto gx = adjoint_accum(node.in[0]);
      for (size_t i = 0; i < gout.size(); ++i)
        gx[i] += gout[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case OpKind::upsample_nearest: {
      const Shape& xs = in_shape(0);
      int f = node.spec.factor;
      int C = (int)xs[1], H = (int)xs[2], W = (int)xs[3];
      auto gx = adjoint_accum(node.in[0]);
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < H * f; ++y)
          for (int xx = 0; xx < W * f; ++xx)
            gx[((size_t)c * H + y / f) * W + xx / f] +=
                gout[((size_t)c * H * f + y) * (W * f) + xx];
      break;
    }
    case OpKind::concat_channels: {
      size_t na = shape_numel(in_shape(0));
      auto ga = adjoint_accum(node.in[0]);
      auto gb = adjoint_accum(node.in[1]);
      for (size_t i = 0; i < na; ++i) ga[i] += gout[i];
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += gout[na + i];
      break;
    }
    case OpKind::linear: {
      const Shape& ws = in_shape(1);
      size_t OUT = ws[0], IN = ws[1];
      const auto& x = in_val(0);
      const auto& w = in_val(1);
      auto gx = adjoint_accum(node.in[0]);
      auto gw = adjoint_accum(node.in[1]);
      auto gb = adjoint_accum(node.in[2]);
      for (size_t o = 0; o < OUT; ++o) {
        double g = gout[o];
        if (g == 0.0) continue;
        gb[o] += g;
        const double* wrow = w.data() + o * IN;
        double* gwrow = gw.data() + o * IN;
        for (size_t i = 0; i < IN; ++i) {
          gx[i] += g * wrow[i];
          gwrow[i] += g * x[i];
        }
      }
      break;
    }
    case OpKind::add: {
      auto ga = adjoint_accum(node.in[0]);
      auto gb = adjoint_accum(node.in[1]);
      for (size_t i = 0; i < gout.size(); ++i) {
        ga[i] += gout[i];
        gb[i] += gout[i];
      }
      break;
    }
    case OpKind::mul_scalar: {
      auto gx = adjoint_accum(node.in[0]);
      for (size_t i = 0; i < gout.size(); ++i)
        gx[i] += gout[i] * node.spec.scalar;
      break;
    }
    case OpKind::sum: {
      auto gx = adjoint_accum(node.in[0]);
      double g = gout[0];
      for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
      break;
    }
    case OpKind::custom:
      node.custom->backward(*this, node.in, node.out);
      break;
  }
}

void Graph::zero_grads() {
  for (auto& t : tensors_) std::fill(t.grad.begin(), t.grad.end(), 0.0);
}

double grad_check(const ScalarBuilder& build, std::span<const double> point,
                  double h) {
  std::vector<double> x0(point.begin(), point.end());

  std::vector<double> analytic;
  {
    Graph g;
    BuiltScalar bs = build(g, x0);
    if (!std::isfinite(bs.loss.value()[0]))
      throw NonFiniteValue("grad_check: loss at base point");
    g.backward(bs.loss);
    size_t covered = 0;
    for (const Tensor& t : bs.inputs) {
      for (double gv : t.grad()) {
        if (!std::isfinite(gv))
          throw NonFiniteValue("grad_check: analytic gradient");
        analytic.push_back(gv);
      }
      covered += t.numel();
    }
    if (covered != x0.size())
      throw ShapeMismatch("grad_check: builder inputs cover " +
                          std::to_string(covered) + " of " +
                          std::to_string(x0.size()) + " coordinates");
  }

  auto eval = [&](const std::vector<double>& x) {
    Graph g;
    BuiltScalar bs = build(g, x);
    double v = bs.loss.value()[0];
    if (!std::isfinite(v)) throw NonFiniteValue("grad_check: perturbed evaluation");
    return v;
  };

  double max_err = 0.0;
  std::vector<double> xp = x0;
  for (size_t i = 0; i < x0.size(); ++i) {
    xp[i] = x0[i] + h;
    double fp = eval(xp);
    xp[i] = x0[i] - h;
    double fm = eval(xp);
    xp[i] = x0[i];
    double numeric = (fp - fm) / (2.0 * h);
    double err = std::abs(analytic[i] - numeric) /
                 std::max({1.0, std::abs(analytic[i]), std::abs(numeric)});
    max_err = std::max(max_err, err);
  }
  return max_err;
}

namespace {

constexpr char kCheckpointMagic[] = "DFLW1\n";
constexpr size_t kMagicLen = 6;

void put_u32(std::string& buf, uint32_t v) {
  for (int i = 0; i < 4; ++i) buf.push_back((char)((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& buf, double d) {
  uint64_t u = std::bit_cast<uint64_t>(d);
  for (int i = 0; i < 8; ++i) buf.push_back((char)((u >> (8 * i)) & 0xff));
}

class ByteReader {
 public:
  ByteReader(const std::string& data) : data_(data) {}
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= (uint32_t)(uint8_t)data_[pos_ + i] << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= (uint64_t)(uint8_t)data_[pos_ + i] << (8 * i);
    pos_ += 8;
    return std::bit_cast<double>(v);
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(size_t n) {
    if (pos_ + n > data_.size())
      throw TruncatedFile("checkpoint ends mid-record at byte " +
                          std::to_string(pos_));
  }
  const std::string& data_;
  size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     std::span<const ParamRecord> params) {
  std::string buf(kCheckpointMagic, kMagicLen);
  for (const ParamRecord& p : params) {
    put_u32(buf, (uint32_t)p.name.size());
    buf += p.name;
    put_u32(buf, (uint32_t)p.shape.size());
    for (size_t e : p.shape) put_u32(buf, (uint32_t)e);
    if (p.values.size() != shape_numel(p.shape))
      throw ShapeMismatch("checkpoint record '" + p.name + "': " +
                          std::to_string(p.values.size()) + " values for shape " +
                          shape_str(p.shape));
    for (double v : p.values) put_f64(buf, v);
  }

  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoFailure("cannot open " + tmp.string() + " for writing");
    out.write(buf.data(), (std::streamsize)buf.size());
    if (!out) throw IoFailure("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoFailure("rename " + tmp.string() + " -> " + path.string() +
                          ": " + ec.message());
}

std::vector<ParamRecord> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoFailure("cannot open " + path.string());
  std::string data((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  if (data.size() < kMagicLen ||
      data.compare(0, kMagicLen, kCheckpointMagic, kMagicLen) != 0)
    throw UnsupportedFormat("bad checkpoint magic in " + path.string());

  ByteReader r(data);
  r.bytes(kMagicLen);
  std::vector<ParamRecord> params;
  while (!r.done()) {
    ParamRecord p;
    uint32_t name_len = r.u32();
    p.name = r.bytes(name_len);
    uint32_t rank = r.u32();
    if (rank > 8) throw UnsupportedFormat("checkpoint rank " + std::to_string(rank));
    size_t n = 1;
    for (uint32_t i = 0; i < rank; ++i) {
      uint32_t e = r.u32();
      p.shape.push_back(e);
      n *= e;
    }
    p.values.reserve(n);
    for (size_t i = 0; i < n; ++i) p.values.push_back(r.f64());
    params.push_back(std::move(p));
  }
  return params;
}

}  // namespace dfl
