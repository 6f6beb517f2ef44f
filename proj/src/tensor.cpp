#include "musp/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>

namespace musp {

int64_t shape_size(const Shape& shape) {
  int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << "]";
  return os.str();
}

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

void check_shape(const Shape& shape, const char* who) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError(std::string(who) + ": non-positive extent in " + shape_str(shape));
  }
}

NodePtr make_result(Shape shape, const char* op, std::vector<NodePtr> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<size_t>(shape_size(n->shape)), 0.0);
  n->op = op;
  n->parents = std::move(parents);
  for (const auto& p : n->parents) {
    if (p->requires_grad) {
      n->requires_grad = true;
      break;
    }
  }
  return n;
}

// Splits a shape into (batch, rest...) treating rank `base` as unbatched.
// Returns batch count (1 when unbatched).
int split_batch(const Shape& s, int base, const char* who) {
  const int r = static_cast<int>(s.size());
  if (r == base) return 1;
  if (r == base + 1) return s[0];
  throw ShapeError(std::string(who) + ": expected rank " + std::to_string(base) + " or " +
                   std::to_string(base + 1) + ", got " + shape_str(s));
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Shape shape) {
  check_shape(shape, "Tensor");
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value.assign(static_cast<size_t>(shape_size(node_->shape)), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values) {
  check_shape(shape, "Tensor");
  if (shape_size(shape) != static_cast<int64_t>(values.size())) {
    throw ShapeError("Tensor: " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->value = std::move(values);
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

Tensor Tensor::full(Shape shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.values().begin(), t.values().end(), v);
  return t;
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> n) {
  Tensor t;
  t.node_ = std::move(n);
  return t;
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item: tensor " + shape_str(shape()) + " is not scalar");
  return node_->value[0];
}

static size_t flat_index(const Shape& shape, std::initializer_list<int> idx) {
  if (idx.size() != shape.size()) throw ShapeError("at: index rank mismatch");
  size_t flat = 0;
  size_t axis = 0;
  for (int i : idx) {
    if (i < 0 || i >= shape[axis]) throw ShapeError("at: index out of range");
    flat = flat * static_cast<size_t>(shape[axis]) + static_cast<size_t>(i);
    ++axis;
  }
  return flat;
}

double& Tensor::at(std::initializer_list<int> idx) { return node_->value[flat_index(shape(), idx)]; }
double Tensor::at(std::initializer_list<int> idx) const { return node_->value[flat_index(shape(), idx)]; }

Tensor& Tensor::set_requires_grad(bool v) {
  if (v && !node_->is_leaf()) throw ConfigError("set_requires_grad: only leaves can be marked");
  node_->requires_grad = v;
  return *this;
}

std::vector<double>& Tensor::grad() {
  node_->ensure_grad();
  return node_->grad;
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  node_->ensure_grad();
  std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

bool Tensor::all_finite() const {
  for (double v : node_->value) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

// ---- ComputationRecord -----------------------------------------------------

ComputationRecord::ComputationRecord(const Tensor& root) {
  if (!root.defined()) throw ShapeError("ComputationRecord: undefined root");
  // Iterative post-order DFS; parents precede users in the record.
  std::unordered_set<Node*> done;
  std::vector<std::pair<NodePtr, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (done.count(node.get())) {
      stack.pop_back();
      continue;
    }
    if (next < node->parents.size()) {
      NodePtr child = node->parents[next++];
      if (!done.count(child.get())) stack.emplace_back(std::move(child), 0);
    } else {
      done.insert(node.get());
      entries_.push_back(node);
      stack.pop_back();
    }
  }
}

void ComputationRecord::backward() {
  if (entries_.empty()) return;
  Node& root = *entries_.back();
  if (root.value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(root.shape));
  }
  root.ensure_grad();
  root.grad[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    Node& n = **it;
    if (n.backprop && n.requires_grad) n.backprop(n);
  }
}

void backward(const Tensor& loss) { ComputationRecord(loss).backward(); }

// ---- elementwise ------------------------------------------------------------

namespace {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, const char* name, Fwd fwd, Bwd bwd) {
  NodePtr out = make_result(x.shape(), name, {x.node()});
  const double* in = x.data();
  double* o = out->value.data();
  const size_t n = out->value.size();
  for (size_t i = 0; i < n; ++i) o[i] = fwd(in[i]);
  out->backprop = [bwd](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.value.size(); ++i) {
      p.grad[i] += self.grad[i] * bwd(p.value[i], self.value[i]);
    }
  };
  return Tensor::from_node(out);
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(who) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

}  // namespace

Tensor relu(const Tensor& x) {
  return unary_op(
      x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      x, "sigmoid",
      [](double v) {
        if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  NodePtr out = make_result(a.shape(), "add", {a.node(), b.node()});
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] + b.data()[i];
  out->backprop = [](Node& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      p->ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) p->grad[i] += self.grad[i];
    }
  };
  return Tensor::from_node(out);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  NodePtr out = make_result(a.shape(), "sub", {a.node(), b.node()});
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] - b.data()[i];
  out->backprop = [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) pa.grad[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) pb.grad[i] -= self.grad[i];
    }
  };
  return Tensor::from_node(out);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  NodePtr out = make_result(a.shape(), "mul", {a.node(), b.node()});
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = a.data()[i] * b.data()[i];
  out->backprop = [](Node& self) {
    Node& pa = *self.parents[0];
    Node& pb = *self.parents[1];
    if (pa.requires_grad) {
      pa.ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) pa.grad[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      pb.ensure_grad();
      for (size_t i = 0; i < self.value.size(); ++i) pb.grad[i] += self.grad[i] * pa.value[i];
    }
  };
  return Tensor::from_node(out);
}

Tensor scale(const Tensor& x, double s) {
  NodePtr out = make_result(x.shape(), "scale", {x.node()});
  for (size_t i = 0; i < out->value.size(); ++i) out->value[i] = x.data()[i] * s;
  out->backprop = [s](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.grad[i] * s;
  };
  return Tensor::from_node(out);
}

Tensor sum(const Tensor& x) {
  NodePtr out = make_result({1}, "sum", {x.node()});
  double acc = 0.0;
  for (size_t i = 0; i < x.values().size(); ++i) acc += x.data()[i];
  out->value[0] = acc;
  out->backprop = [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0];
    for (size_t i = 0; i < p.value.size(); ++i) p.grad[i] += g;
  };
  return Tensor::from_node(out);
}

Tensor reshape(const Tensor& x, Shape shape) {
  check_shape(shape, "reshape");
  if (shape_size(shape) != x.size()) {
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  }
  NodePtr out = make_result(std::move(shape), "reshape", {x.node()});
  out->value = x.values();
  out->backprop = [](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (size_t i = 0; i < self.value.size(); ++i) p.grad[i] += self.grad[i];
  };
  return Tensor::from_node(out);
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("slice: bad axis");
  if (start < 0 || length < 1 || start + length > s[axis]) {
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + length) + ") out of axis extent " +
                     std::to_string(s[axis]));
  }
  Shape out_shape = s;
  out_shape[axis] = length;

  int64_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  int64_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  const int64_t axis_len = s[axis];

  NodePtr out = make_result(out_shape, "slice", {x.node()});
  const double* in = x.data();
  double* o = out->value.data();
  for (int64_t u = 0; u < outer; ++u) {
    const double* src = in + (u * axis_len + start) * inner;
    std::memcpy(o + u * length * inner, src, static_cast<size_t>(length * inner) * sizeof(double));
  }
  out->backprop = [axis_len, inner, outer, start, length](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int64_t u = 0; u < outer; ++u) {
      double* dst = p.grad.data() + (u * axis_len + start) * inner;
      const double* g = self.grad.data() + u * length * inner;
      for (int64_t i = 0; i < length * inner; ++i) dst[i] += g[i];
    }
  };
  return Tensor::from_node(out);
}

// ---- softmax ----------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  const Shape& s = x.shape();
  const int r = static_cast<int>(s.size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: bad axis for " + shape_str(s));
  int64_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  const int64_t len = s[axis];
  const int64_t outer = x.size() / (inner * len);

  NodePtr out = make_result(s, "softmax", {x.node()});
  const double* in = x.data();
  double* o = out->value.data();
  for (int64_t u = 0; u < outer; ++u) {
    for (int64_t v = 0; v < inner; ++v) {
      const int64_t base = u * len * inner + v;
      double mx = in[base];
      for (int64_t k = 1; k < len; ++k) mx = std::max(mx, in[base + k * inner]);
      double z = 0.0;
      for (int64_t k = 0; k < len; ++k) {
        const double e = std::exp(in[base + k * inner] - mx);
        o[base + k * inner] = e;
        z += e;
      }
      const double zi = 1.0 / z;
      for (int64_t k = 0; k < len; ++k) o[base + k * inner] *= zi;
    }
  }
  out->backprop = [inner, len, outer](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double* y = self.value.data();
    const double* g = self.grad.data();
    for (int64_t u = 0; u < outer; ++u) {
      for (int64_t v = 0; v < inner; ++v) {
        const int64_t base = u * len * inner + v;
        double dot = 0.0;
        for (int64_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (int64_t k = 0; k < len; ++k) {
          const int64_t i = base + k * inner;
          p.grad[i] += (g[i] - dot) * y[i];
        }
      }
    }
  };
  return Tensor::from_node(out);
}

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias) {
  const Shape& ks = kernel.shape();
  if (ks.size() != 4 || ks[0] != 3 || ks[1] != 3) {
    throw ShapeError("conv2d: kernel must be [3,3,c_in,c_out], got " + shape_str(ks));
  }
  const int ci = ks[2], co = ks[3];
  if (bias.shape() != Shape{co}) {
    throw ShapeError("conv2d: bias " + shape_str(bias.shape()) + " does not match c_out " +
                     std::to_string(co));
  }
  const Shape& is = input.shape();
  const int batch = split_batch(is, 3, "conv2d");
  const bool batched = is.size() == 4;
  const int h = is[batched ? 1 : 0], w = is[batched ? 2 : 1], in_ch = is[batched ? 3 : 2];
  if (in_ch != ci) {
    throw ShapeError("conv2d: input channels " + std::to_string(in_ch) +
                     " do not match kernel c_in " + std::to_string(ci) + " (input " +
                     shape_str(is) + ", kernel " + shape_str(ks) + ")");
  }
  if (h < 1 || w < 1) throw ShapeError("conv2d: empty spatial extent in " + shape_str(is));

  Shape out_shape = batched ? Shape{batch, h, w, co} : Shape{h, w, co};
  NodePtr out = make_result(std::move(out_shape), "conv2d", {input.node(), kernel.node(), bias.node()});

  const double* in = input.data();
  const double* ker = kernel.data();
  const double* b = bias.data();
  double* o = out->value.data();
  const int64_t img_in = static_cast<int64_t>(h) * w * ci;
  const int64_t img_out = static_cast<int64_t>(h) * w * co;

  std::vector<double> acc(static_cast<size_t>(co));
  for (int k = 0; k < batch; ++k) {
    const double* im = in + k * img_in;
    double* om = o + k * img_out;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        std::copy(b, b + co, acc.begin());
        const int dy0 = y > 0 ? 0 : 1, dy1 = y < h - 1 ? 3 : 2;
        const int dx0 = x > 0 ? 0 : 1, dx1 = x < w - 1 ? 3 : 2;
        for (int dy = dy0; dy < dy1; ++dy) {
          const double* row = im + (static_cast<int64_t>(y + dy - 1) * w) * ci;
          for (int dx = dx0; dx < dx1; ++dx) {
            const double* px = row + static_cast<int64_t>(x + dx - 1) * ci;
            const double* kr = ker + (static_cast<int64_t>(dy) * 3 + dx) * ci * co;
            for (int c = 0; c < ci; ++c) {
              const double v = px[c];
              const double* kc = kr + static_cast<int64_t>(c) * co;
              for (int oc = 0; oc < co; ++oc) acc[oc] += v * kc[oc];
            }
          }
        }
        std::copy(acc.begin(), acc.end(), om + (static_cast<int64_t>(y) * w + x) * co);
      }
    }
  }

  out->backprop = [batch, h, w, ci, co, img_in, img_out](Node& self) {
    Node& pin = *self.parents[0];
    Node& pker = *self.parents[1];
    Node& pbias = *self.parents[2];
    const bool want_in = pin.requires_grad;
    const bool want_ker = pker.requires_grad;
    const bool want_bias = pbias.requires_grad;
    if (want_in) pin.ensure_grad();
    if (want_ker) pker.ensure_grad();
    if (want_bias) pbias.ensure_grad();
    const double* ker = pker.value.data();
    const double* in = pin.value.data();
    for (int k = 0; k < batch; ++k) {
      const double* im = in + k * img_in;
      double* gim = want_in ? pin.grad.data() + k * img_in : nullptr;
      const double* gom = self.grad.data() + k * img_out;
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const double* g = gom + (static_cast<int64_t>(y) * w + x) * co;
          if (want_bias) {
            for (int oc = 0; oc < co; ++oc) pbias.grad[oc] += g[oc];
          }
          const int dy0 = y > 0 ? 0 : 1, dy1 = y < h - 1 ? 3 : 2;
          const int dx0 = x > 0 ? 0 : 1, dx1 = x < w - 1 ? 3 : 2;
          for (int dy = dy0; dy < dy1; ++dy) {
            const int64_t row = (static_cast<int64_t>(y + dy - 1) * w) * ci;
            for (int dx = dx0; dx < dx1; ++dx) {
              const int64_t px = row + static_cast<int64_t>(x + dx - 1) * ci;
              const int64_t kbase = (static_cast<int64_t>(dy) * 3 + dx) * ci * co;
              for (int c = 0; c < ci; ++c) {
                const int64_t kc = kbase + static_cast<int64_t>(c) * co;
                if (want_ker) {
                  const double v = im[px + c];
                  double* kg = pker.grad.data() + kc;
                  for (int oc = 0; oc < co; ++oc) kg[oc] += v * g[oc];
                }
                if (want_in) {
                  const double* kr = ker + kc;
                  double dot = 0.0;
                  for (int oc = 0; oc < co; ++oc) dot += kr[oc] * g[oc];
                  gim[px + c] += dot;
                }
              }
            }
          }
        }
      }
    }
  };
  return Tensor::from_node(out);
}

// ---- linear ----------------------------------------------------------------

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  const Shape& ws = weight.shape();
  if (ws.size() != 2) throw ShapeError("linear: weight must be [r_in,r_out], got " + shape_str(ws));
  const int rin = ws[0], rout = ws[1];
  const bool has_bias = bias.defined();
  if (has_bias && bias.shape() != Shape{rout}) {
    throw ShapeError("linear: bias " + shape_str(bias.shape()) + " does not match r_out " +
                     std::to_string(rout));
  }
  const Shape& is = input.shape();
  const int batch = split_batch(is, 1, "linear");
  const bool batched = is.size() == 2;
  const int in_len = is[batched ? 1 : 0];
  if (in_len != rin) {
    throw ShapeError("linear: input length " + std::to_string(in_len) + " does not match weight rows " +
                     std::to_string(rin) + " (input " + shape_str(is) + ", weight " + shape_str(ws) + ")");
  }

  Shape out_shape = batched ? Shape{batch, rout} : Shape{rout};
  std::vector<NodePtr> parents{input.node(), weight.node()};
  if (has_bias) parents.push_back(bias.node());
  NodePtr out = make_result(std::move(out_shape), "linear", std::move(parents));

  const double* in = input.data();
  const double* w = weight.data();
  double* o = out->value.data();
  for (int k = 0; k < batch; ++k) {
    double* orow = o + static_cast<int64_t>(k) * rout;
    if (has_bias) {
      std::memcpy(orow, bias.data(), static_cast<size_t>(rout) * sizeof(double));
    }
    const double* irow = in + static_cast<int64_t>(k) * rin;
    for (int i = 0; i < rin; ++i) {
      const double v = irow[i];
      const double* wrow = w + static_cast<int64_t>(i) * rout;
      for (int j = 0; j < rout; ++j) orow[j] += v * wrow[j];
    }
  }

  out->backprop = [batch, rin, rout, has_bias](Node& self) {
    Node& pin = *self.parents[0];
    Node& pw = *self.parents[1];
    Node* pb = has_bias ? self.parents[2].get() : nullptr;
    if (pin.requires_grad) pin.ensure_grad();
    if (pw.requires_grad) pw.ensure_grad();
    if (pb && pb->requires_grad) pb->ensure_grad();
    const double* w = pw.value.data();
    for (int k = 0; k < batch; ++k) {
      const double* g = self.grad.data() + static_cast<int64_t>(k) * rout;
      const double* irow = pin.value.data() + static_cast<int64_t>(k) * rin;
      if (pb && pb->requires_grad) {
        for (int j = 0; j < rout; ++j) pb->grad[j] += g[j];
      }
      for (int i = 0; i < rin; ++i) {
        const double* wrow = w + static_cast<int64_t>(i) * rout;
        if (pw.requires_grad) {
          double* wg = pw.grad.data() + static_cast<int64_t>(i) * rout;
          const double v = irow[i];
          for (int j = 0; j < rout; ++j) wg[j] += v * g[j];
        }
        if (pin.requires_grad) {
          double dot = 0.0;
          for (int j = 0; j < rout; ++j) dot += wrow[j] * g[j];
          pin.grad[static_cast<int64_t>(k) * rin + i] += dot;
        }
      }
    }
  };
  return Tensor::from_node(out);
}

// ---- pooling ----------------------------------------------------------------

Tensor avg_pool2x2(const Tensor& x) {
  const Shape& s = x.shape();
  const int batch = split_batch(s, 3, "avg_pool2x2");
  const bool batched = s.size() == 4;
  const int h = s[batched ? 1 : 0], w = s[batched ? 2 : 1], c = s[batched ? 3 : 2];
  if (h % 2 || w % 2) throw ShapeError("avg_pool2x2: odd spatial extent in " + shape_str(s));
  const int oh = h / 2, ow = w / 2;
  Shape out_shape = batched ? Shape{batch, oh, ow, c} : Shape{oh, ow, c};
  NodePtr out = make_result(std::move(out_shape), "avg_pool2x2", {x.node()});
  const double* in = x.data();
  double* o = out->value.data();
  const int64_t img_in = static_cast<int64_t>(h) * w * c;
  const int64_t img_out = static_cast<int64_t>(oh) * ow * c;
  for (int k = 0; k < batch; ++k) {
    const double* im = in + k * img_in;
    double* om = o + k * img_out;
    for (int y = 0; y < oh; ++y) {
      for (int x2 = 0; x2 < ow; ++x2) {
        const double* r0 = im + ((2 * static_cast<int64_t>(y)) * w + 2 * x2) * c;
        const double* r1 = im + ((2 * static_cast<int64_t>(y) + 1) * w + 2 * x2) * c;
        double* op = om + (static_cast<int64_t>(y) * ow + x2) * c;
        for (int ch = 0; ch < c; ++ch) {
          op[ch] = 0.25 * (r0[ch] + r0[c + ch] + r1[ch] + r1[c + ch]);
        }
      }
    }
  }
  out->backprop = [batch, oh, ow, w, c, img_in, img_out](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int k = 0; k < batch; ++k) {
      double* gim = p.grad.data() + k * img_in;
      const double* gom = self.grad.data() + k * img_out;
      for (int y = 0; y < oh; ++y) {
        for (int x2 = 0; x2 < ow; ++x2) {
          const double* g = gom + (static_cast<int64_t>(y) * ow + x2) * c;
          double* r0 = gim + ((2 * static_cast<int64_t>(y)) * w + 2 * x2) * c;
          double* r1 = gim + ((2 * static_cast<int64_t>(y) + 1) * w + 2 * x2) * c;
          for (int ch = 0; ch < c; ++ch) {
            const double gv = 0.25 * g[ch];
            r0[ch] += gv;
            r0[c + ch] += gv;
            r1[ch] += gv;
            r1[c + ch] += gv;
          }
        }
      }
    }
  };
  return Tensor::from_node(out);
}

Tensor spatial_mean(const Tensor& x) {
  const Shape& s = x.shape();
  const int batch = split_batch(s, 3, "spatial_mean");
  const bool batched = s.size() == 4;
  const int h = s[batched ? 1 : 0], w = s[batched ? 2 : 1], c = s[batched ? 3 : 2];
  const int64_t hw = static_cast<int64_t>(h) * w;
  Shape out_shape = batched ? Shape{batch, c} : Shape{c};
  NodePtr out = make_result(std::move(out_shape), "spatial_mean", {x.node()});
  const double* in = x.data();
  double* o = out->value.data();
  const double inv = 1.0 / static_cast<double>(hw);
  for (int k = 0; k < batch; ++k) {
    const double* im = in + k * hw * c;
    double* orow = o + static_cast<int64_t>(k) * c;
    for (int64_t p = 0; p < hw; ++p) {
      const double* px = im + p * c;
      for (int ch = 0; ch < c; ++ch) orow[ch] += px[ch];
    }
    for (int ch = 0; ch < c; ++ch) orow[ch] *= inv;
  }
  out->backprop = [batch, hw, c, inv](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    for (int k = 0; k < batch; ++k) {
      const double* g = self.grad.data() + static_cast<int64_t>(k) * c;
      double* gim = p.grad.data() + k * hw * c;
      for (int64_t q = 0; q < hw; ++q) {
        double* px = gim + q * c;
        for (int ch = 0; ch < c; ++ch) px[ch] += g[ch] * inv;
      }
    }
  };
  return Tensor::from_node(out);
}

Tensor weighted_spatial_pool(const Tensor& value, const Tensor& weights) {
  const Shape& vs = value.shape();
  const Shape& ws = weights.shape();
  if (vs.size() != ws.size()) {
    throw ShapeError("weighted_spatial_pool: rank mismatch " + shape_str(vs) + " vs " + shape_str(ws));
  }
  const int batch = split_batch(vs, 3, "weighted_spatial_pool");
  const bool batched = vs.size() == 4;
  const int h = vs[batched ? 1 : 0], w = vs[batched ? 2 : 1], c = vs[batched ? 3 : 2];
  const int n = ws[batched ? 3 : 2];
  Shape expect = batched ? Shape{batch, h, w, n} : Shape{h, w, n};
  if (ws != expect) {
    throw ShapeError("weighted_spatial_pool: weights " + shape_str(ws) + " do not match value " +
                     shape_str(vs));
  }
  const int64_t hw = static_cast<int64_t>(h) * w;
  const double inv = 1.0 / static_cast<double>(hw);
  Shape out_shape = batched ? Shape{batch, n, c} : Shape{n, c};
  NodePtr out = make_result(std::move(out_shape), "weighted_spatial_pool",
                            {value.node(), weights.node()});
  const double* v = value.data();
  const double* wt = weights.data();
  double* o = out->value.data();
  for (int k = 0; k < batch; ++k) {
    const double* vim = v + k * hw * c;
    const double* wim = wt + k * hw * n;
    double* om = o + static_cast<int64_t>(k) * n * c;
    for (int64_t p = 0; p < hw; ++p) {
      const double* vp = vim + p * c;
      const double* wp = wim + p * n;
      for (int i = 0; i < n; ++i) {
        const double wv = wp[i] * inv;
        double* orow = om + static_cast<int64_t>(i) * c;
        for (int ch = 0; ch < c; ++ch) orow[ch] += wv * vp[ch];
      }
    }
  }
  out->backprop = [batch, hw, c, n, inv](Node& self) {
    Node& pv = *self.parents[0];
    Node& pw = *self.parents[1];
    const bool want_v = pv.requires_grad;
    const bool want_w = pw.requires_grad;
    if (want_v) pv.ensure_grad();
    if (want_w) pw.ensure_grad();
    for (int k = 0; k < batch; ++k) {
      const double* g = self.grad.data() + static_cast<int64_t>(k) * n * c;
      const double* vim = pv.value.data() + k * hw * c;
      const double* wim = pw.value.data() + k * hw * n;
      double* gv = want_v ? pv.grad.data() + k * hw * c : nullptr;
      double* gw = want_w ? pw.grad.data() + k * hw * n : nullptr;
      for (int64_t p = 0; p < hw; ++p) {
        for (int i = 0; i < n; ++i) {
          const double* grow = g + static_cast<int64_t>(i) * c;
          if (want_v) {
            const double wv = wim[p * n + i] * inv;
            double* gvp = gv + p * c;
            for (int ch = 0; ch < c; ++ch) gvp[ch] += wv * grow[ch];
          }
          if (want_w) {
            const double* vp = vim + p * c;
            double dot = 0.0;
            for (int ch = 0; ch < c; ++ch) dot += vp[ch] * grow[ch];
            gw[p * n + i] += dot * inv;
          }
        }
      }
    }
  };
  return Tensor::from_node(out);
}

Tensor attention_overlap(const Tensor& weights, int retained) {
  const Shape& s = weights.shape();
  const int batch = split_batch(s, 3, "attention_overlap");
  const bool batched = s.size() == 4;
  const int h = s[batched ? 1 : 0], w = s[batched ? 2 : 1], n = s[batched ? 3 : 2];
  if (retained < 1 || retained > n) {
    throw ConfigError("attention_overlap: retained " + std::to_string(retained) +
                      " outside [1," + std::to_string(n) + "]");
  }
  const int64_t hw = static_cast<int64_t>(h) * w;
  NodePtr out = make_result({1}, "attention_overlap", {weights.node()});
  const double* wt = weights.data();
  double acc = 0.0;
  for (int k = 0; k < batch; ++k) {
    const double* wim = wt + k * hw * n;
    for (int64_t p = 0; p < hw; ++p) {
      double prod = 1.0;
      for (int i = 0; i < retained; ++i) prod *= wim[p * n + i];
      acc += prod;
    }
  }
  out->value[0] = acc;
  out->backprop = [batch, hw, n, retained](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0];
    for (int k = 0; k < batch; ++k) {
      const double* wim = p.value.data() + k * hw * n;
      double* gim = p.grad.data() + k * hw * n;
      for (int64_t q = 0; q < hw; ++q) {
        for (int i = 0; i < retained; ++i) {
          double prod = 1.0;
          for (int j = 0; j < retained; ++j) {
            if (j != i) prod *= wim[q * n + j];
          }
          gim[q * n + i] += g * prod;
        }
      }
    }
  };
  return Tensor::from_node(out);
}

// ---- batch norm --------------------------------------------------------------

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  std::vector<double>& running_mean, std::vector<double>& running_var,
                  bool training, bool update_running, double eps, double momentum) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("batch_norm: scalar input");
  const int c = s.back();
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) {
    throw ShapeError("batch_norm: scale/shift must be [" + std::to_string(c) + "], got " +
                     shape_str(gamma.shape()) + " / " + shape_str(beta.shape()));
  }
  if (running_mean.size() != static_cast<size_t>(c) || running_var.size() != static_cast<size_t>(c)) {
    throw ShapeError("batch_norm: running statistics sized " + std::to_string(running_mean.size()) +
                     " for " + std::to_string(c) + " channels");
  }
  const int64_t rows = x.size() / c;
  if (training && rows < 2) {
    throw ConfigError("batch_norm: training mode needs >= 2 samples per channel, got " +
                      std::to_string(rows));
  }

  NodePtr out = make_result(s, "batch_norm", {x.node(), gamma.node(), beta.node()});
  const double* in = x.data();
  const double* gm = gamma.data();
  const double* bt = beta.data();
  double* o = out->value.data();

  std::vector<double> mean(static_cast<size_t>(c), 0.0);
  std::vector<double> invstd(static_cast<size_t>(c), 0.0);
  if (training) {
    std::vector<double> var(static_cast<size_t>(c), 0.0);
    for (int64_t r = 0; r < rows; ++r) {
      const double* row = in + r * c;
      for (int ch = 0; ch < c; ++ch) mean[ch] += row[ch];
    }
    for (int ch = 0; ch < c; ++ch) mean[ch] /= static_cast<double>(rows);
    for (int64_t r = 0; r < rows; ++r) {
      const double* row = in + r * c;
      for (int ch = 0; ch < c; ++ch) {
        const double d = row[ch] - mean[ch];
        var[ch] += d * d;
      }
    }
    for (int ch = 0; ch < c; ++ch) {
      var[ch] /= static_cast<double>(rows);
      invstd[ch] = 1.0 / std::sqrt(var[ch] + eps);
    }
    if (update_running) {
      for (int ch = 0; ch < c; ++ch) {
        running_mean[ch] = (1.0 - momentum) * running_mean[ch] + momentum * mean[ch];
        running_var[ch] = (1.0 - momentum) * running_var[ch] + momentum * var[ch];
      }
    }
  } else {
    for (int ch = 0; ch < c; ++ch) {
      mean[ch] = running_mean[ch];
      invstd[ch] = 1.0 / std::sqrt(running_var[ch] + eps);
    }
  }

  for (int64_t r = 0; r < rows; ++r) {
    const double* row = in + r * c;
    double* orow = o + r * c;
    for (int ch = 0; ch < c; ++ch) {
      orow[ch] = gm[ch] * (row[ch] - mean[ch]) * invstd[ch] + bt[ch];
    }
  }

  out->backprop = [rows, c, mean, invstd, training](Node& self) {
    Node& px = *self.parents[0];
    Node& pg = *self.parents[1];
    Node& pb = *self.parents[2];
    const bool want_x = px.requires_grad;
    const bool want_g = pg.requires_grad;
    const bool want_b = pb.requires_grad;
    if (want_x) px.ensure_grad();
    if (want_g) pg.ensure_grad();
    if (want_b) pb.ensure_grad();
    const double* in = px.value.data();
    const double* g = self.grad.data();
    const double* gm = pg.value.data();

    std::vector<double> sum_g(static_cast<size_t>(c), 0.0);
    std::vector<double> sum_gx(static_cast<size_t>(c), 0.0);
    for (int64_t r = 0; r < rows; ++r) {
      const double* grow = g + r * c;
      const double* row = in + r * c;
      for (int ch = 0; ch < c; ++ch) {
        const double xh = (row[ch] - mean[ch]) * invstd[ch];
        sum_g[ch] += grow[ch];
        sum_gx[ch] += grow[ch] * xh;
      }
    }
    if (want_b) {
      for (int ch = 0; ch < c; ++ch) pb.grad[ch] += sum_g[ch];
    }
    if (want_g) {
      for (int ch = 0; ch < c; ++ch) pg.grad[ch] += sum_gx[ch];
    }
    if (want_x) {
      const double invn = 1.0 / static_cast<double>(rows);
      for (int64_t r = 0; r < rows; ++r) {
        const double* grow = g + r * c;
        const double* row = in + r * c;
        double* gx = px.grad.data() + r * c;
        for (int ch = 0; ch < c; ++ch) {
          if (training) {
            const double xh = (row[ch] - mean[ch]) * invstd[ch];
            gx[ch] += gm[ch] * invstd[ch] *
                      (grow[ch] - invn * sum_g[ch] - xh * invn * sum_gx[ch]);
          } else {
            gx[ch] += gm[ch] * invstd[ch] * grow[ch];
          }
        }
      }
    }
  };
  return Tensor::from_node(out);
}

// ---- losses as primitives ------------------------------------------------------

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                             double smoothing) {
  const Shape& s = logits.shape();
  const int batch = split_batch(s, 1, "softmax_cross_entropy");
  const bool batched = s.size() == 2;
  const int classes = s[batched ? 1 : 0];
  if (classes < 2) throw ConfigError("softmax_cross_entropy: need >= 2 classes");
  if (smoothing < 0.0 || smoothing >= 1.0) {
    throw ConfigError("softmax_cross_entropy: smoothing must be in [0,1)");
  }
  if (static_cast<int>(labels.size()) != batch) {
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  }
  for (int l : labels) {
    if (l < 0 || l >= classes) {
      throw ConfigError("softmax_cross_entropy: label " + std::to_string(l) + " outside [0," +
                        std::to_string(classes) + ")");
    }
  }
  const double off = smoothing / static_cast<double>(classes - 1);
  const double on = 1.0 - smoothing;

  NodePtr out = make_result({1}, "softmax_cross_entropy", {logits.node()});
  const double* z = logits.data();
  double loss = 0.0;
  for (int k = 0; k < batch; ++k) {
    const double* row = z + static_cast<int64_t>(k) * classes;
    double mx = row[0];
    for (int j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
    double lse = 0.0;
    for (int j = 0; j < classes; ++j) lse += std::exp(row[j] - mx);
    lse = mx + std::log(lse);
    double dot = 0.0;
    for (int j = 0; j < classes; ++j) dot += (j == labels[k] ? on : off) * row[j];
    loss += lse - dot;
  }
  out->value[0] = loss;

  out->backprop = [batch, classes, labels, on, off](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0];
    const double* z = p.value.data();
    for (int k = 0; k < batch; ++k) {
      const double* row = z + static_cast<int64_t>(k) * classes;
      double* grow = p.grad.data() + static_cast<int64_t>(k) * classes;
      double mx = row[0];
      for (int j = 1; j < classes; ++j) mx = std::max(mx, row[j]);
      double zsum = 0.0;
      for (int j = 0; j < classes; ++j) zsum += std::exp(row[j] - mx);
      const double inv = 1.0 / zsum;
      for (int j = 0; j < classes; ++j) {
        const double pj = std::exp(row[j] - mx) * inv;
        grow[j] += g * (pj - (j == labels[k] ? on : off));
      }
    }
  };
  return Tensor::from_node(out);
}

Tensor batch_hard_triplet(const Tensor& embeddings, const std::vector<int>& labels,
                          double margin) {
  const Shape& s = embeddings.shape();
  if (s.size() != 2) throw ShapeError("batch_hard_triplet: embeddings must be [K,c], got " + shape_str(s));
  const int batch = s[0], c = s[1];
  if (static_cast<int>(labels.size()) != batch) {
    throw ShapeError("batch_hard_triplet: " + std::to_string(labels.size()) + " labels for batch " +
                     std::to_string(batch));
  }

  const double* e = embeddings.data();
  std::vector<double> dist(static_cast<size_t>(batch) * batch, 0.0);
  for (int a = 0; a < batch; ++a) {
    for (int b = a + 1; b < batch; ++b) {
      double acc = 0.0;
      const double* ra = e + static_cast<int64_t>(a) * c;
      const double* rb = e + static_cast<int64_t>(b) * c;
      for (int j = 0; j < c; ++j) {
        const double d = ra[j] - rb[j];
        acc += d * d;
      }
      const double d = std::sqrt(acc);
      dist[static_cast<size_t>(a) * batch + b] = d;
      dist[static_cast<size_t>(b) * batch + a] = d;
    }
  }

  // Hardest positive (max, same label) and hardest negative (min, other label)
  // per anchor; ties resolve to the lowest index.
  std::vector<int> hardest_pos(static_cast<size_t>(batch), -1);
  std::vector<int> hardest_neg(static_cast<size_t>(batch), -1);
  double loss = 0.0;
  std::vector<double> terms(static_cast<size_t>(batch), 0.0);
  for (int a = 0; a < batch; ++a) {
    double dp = -1.0, dn = 0.0;
    int ip = -1, in = -1;
    for (int b = 0; b < batch; ++b) {
      if (b == a) continue;
      const double d = dist[static_cast<size_t>(a) * batch + b];
      if (labels[b] == labels[a]) {
        if (d > dp) {
          dp = d;
          ip = b;
        }
      } else if (in < 0 || d < dn) {
        dn = d;
        in = b;
      }
    }
    if (ip < 0 || in < 0) {
      throw ConfigError("batch_hard_triplet: anchor " + std::to_string(a) +
                        " lacks a positive or a negative in the batch");
    }
    hardest_pos[a] = ip;
    hardest_neg[a] = in;
    terms[a] = margin + dp - dn;
    if (terms[a] > 0.0) loss += terms[a];
  }

  NodePtr out = make_result({1}, "batch_hard_triplet", {embeddings.node()});
  out->value[0] = loss;
  out->backprop = [batch, c, dist, hardest_pos, hardest_neg, terms](Node& self) {
    Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    p.ensure_grad();
    const double g = self.grad[0];
    const double* e = p.value.data();
    auto add_pair = [&](int a, int b, double sign) {
      // d/de_a ||e_a - e_b|| = (e_a - e_b)/||.||; 0 at zero distance.
      const double d = dist[static_cast<size_t>(a) * batch + b];
      if (d <= 0.0) return;
      const double f = sign * g / d;
      const double* ra = e + static_cast<int64_t>(a) * c;
      const double* rb = e + static_cast<int64_t>(b) * c;
      double* ga = p.grad.data() + static_cast<int64_t>(a) * c;
      double* gb = p.grad.data() + static_cast<int64_t>(b) * c;
      for (int j = 0; j < c; ++j) {
        const double u = f * (ra[j] - rb[j]);
        ga[j] += u;
        gb[j] -= u;
      }
    };
    for (int a = 0; a < batch; ++a) {
      if (terms[a] <= 0.0) continue;  // hinge inactive (subgradient 0 at the kink)
      add_pair(a, hardest_pos[a], 1.0);
      add_pair(a, hardest_neg[a], -1.0);
    }
  };
  return Tensor::from_node(out);
}

}  // namespace musp
