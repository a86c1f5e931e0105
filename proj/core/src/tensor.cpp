#include "terra/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace terra {

std::size_t shape_size(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

thread_local GradTape* g_active_tape = nullptr;
thread_local std::string g_scope;
bool g_finite_checks = true;

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

NodePtr make_node(Shape shape, double fill = 0.0) {
  auto n = std::make_shared<Node>();
  std::size_t total = shape_size(shape);
  n->shape = std::move(shape);
  n->data.assign(total, fill);
  return n;
}

void check_positive_shape(const Shape& s) {
  for (int d : s)
    require(d > 0, "tensor shape must have positive extents, got ", shape_str(s));
}

void check_finite(const char* op, const Node& n) {
  if (!g_finite_checks) return;
  for (double v : n.data) {
    if (!std::isfinite(v))
      throw NumericError(cat("op '", op, "' produced a non-finite value"));
  }
}

bool want_grad(std::initializer_list<const Tensor*> ins) {
  if (g_active_tape == nullptr) return false;
  for (const Tensor* t : ins)
    if (t->defined() && t->node()->grad_path) return true;  // record() rejects dead tapes
  return false;
}

// Finalizes an op: finite check, grad-path propagation, tape recording.
Tensor finish(const char* op, std::initializer_list<const Tensor*> ins, NodePtr out,
              std::function<void()> backward_fn) {
  check_finite(op, *out);
  if (want_grad(ins)) {
    out->grad_path = true;
    std::vector<NodePtr> inputs;
    inputs.reserve(ins.size());
    for (const Tensor* t : ins)
      if (t->defined()) inputs.push_back(t->node());
    g_active_tape->record(op, std::move(inputs), out, std::move(backward_fn));
  }
  return Tensor::wrap(std::move(out));
}

// Gradient of `out` if it participated in backward, else nullptr.
const double* grad_of(const NodePtr& n) {
  return n->grad.size() == n->data.size() ? n->grad.data() : nullptr;
}

double* acc_grad(const NodePtr& n) {
  n->ensure_grad();
  return n->grad.data();
}

// ---- raw matmul kernels (accumulating) --------------------------------
// Parallel loops only ever split output rows; every output element remains
// a single-thread serial reduction, so results are bit-identical at any
// thread count.

void mm_nn_acc(const double* a, const double* b, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(m) * k * n > 1 << 16)
  for (int i = 0; i < m; ++i) {
    double* crow = c + static_cast<std::size_t>(i) * n;
    const double* arow = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,k] += g[m,n] * b[k,n]^T
void mm_nt_acc(const double* g, const double* b, double* c, int m, int n, int k) {
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(m) * k * n > 1 << 16)
  for (int i = 0; i < m; ++i) {
    const double* grow = g + static_cast<std::size_t>(i) * n;
    double* crow = c + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const double* brow = b + static_cast<std::size_t>(p) * n;
      double acc = 0.0;
      for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
      crow[p] += acc;
    }
  }
}

// c[k,n] += a[m,k]^T * g[m,n]
void mm_tn_acc(const double* a, const double* g, double* c, int m, int k, int n) {
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(m) * k * n > 1 << 16)
  for (int p = 0; p < k; ++p) {
    double* crow = c + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double av = a[static_cast<std::size_t>(i) * k + p];
      const double* grow = g + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * grow[j];
    }
  }
}

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& s, int axis) {
  AxisSplit r{1, static_cast<std::size_t>(s[static_cast<std::size_t>(axis)]), 1};
  for (int i = 0; i < axis; ++i) r.outer *= static_cast<std::size_t>(s[static_cast<std::size_t>(i)]);
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i)
    r.inner *= static_cast<std::size_t>(s[i]);
  return r;
}

}  // namespace

// ---- Tensor ------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  check_positive_shape(shape);
  auto n = make_node(std::move(shape));
  n->requires_grad = requires_grad;
  n->grad_path = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  check_positive_shape(shape);
  auto n = make_node(std::move(shape), value);
  n->requires_grad = requires_grad;
  n->grad_path = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  check_positive_shape(shape);
  require(shape_size(shape) == data.size(), "data length ", data.size(),
          " does not match shape ", shape_str(shape));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  n->grad_path = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from_data({1}, {v}, requires_grad);
}

double Tensor::value() const {
  require(size() == 1, "value() requires a scalar tensor, shape is ", shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(const std::vector<int>& idx) const {
  require(idx.size() == node_->shape.size(), "index rank mismatch");
  std::size_t flat = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    require(idx[i] >= 0 && idx[i] < node_->shape[i], "index out of range");
    flat = flat * static_cast<std::size_t>(node_->shape[i]) + static_cast<std::size_t>(idx[i]);
  }
  return node_->data[flat];
}

void Tensor::set_requires_grad(bool b) {
  node_->requires_grad = b;
  if (b) node_->grad_path = true;
}

const std::vector<double>& Tensor::grad() const {
  require(has_grad(), "tensor has no gradient (backward not run or not on the loss path)");
  return node_->grad;
}

std::vector<double>& Tensor::grad() {
  require(has_grad(), "tensor has no gradient (backward not run or not on the loss path)");
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

// ---- GradTape ----------------------------------------------------------

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(const char* op, std::vector<NodePtr> inputs, NodePtr output,
                      std::function<void()> backward_fn) {
  if (dead_) throw ArtifactError("recording onto a dead tape; run a fresh forward");
  entries_.push_back(Entry{op, g_scope, std::move(inputs), std::move(output), std::move(backward_fn)});
}

void GradTape::backward(const Tensor& loss) {
  if (dead_) throw ArtifactError("backward called twice on the same tape");
  require(loss.defined() && loss.size() == 1, "backward requires a scalar loss");
  if (!loss.node()->grad_path || entries_.empty())
    throw ArtifactError("loss was not produced under this live tape");
  dead_ = true;
  loss.node()->ensure_grad();
  loss.node()->grad[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (grad_of(it->output) == nullptr) continue;  // never influenced the loss
    it->backward_fn();
  }
}

std::map<std::string, std::size_t> GradTape::op_census() const {
  std::map<std::string, std::size_t> c;
  for (const auto& e : entries_) ++c[e.op];
  return c;
}

std::map<std::string, std::size_t> GradTape::scope_census() const {
  std::map<std::string, std::size_t> c;
  for (const auto& e : entries_) ++c[e.scope];
  return c;
}

std::set<std::string> GradTape::reader_scopes(const Tensor& t) const {
  std::set<std::string> out;
  for (const auto& e : entries_)
    for (const auto& in : e.inputs)
      if (in.get() == t.node().get()) out.insert(e.scope);
  return out;
}

std::size_t GradTape::read_count(const Tensor& t) const {
  std::size_t n = 0;
  for (const auto& e : entries_)
    for (const auto& in : e.inputs)
      if (in.get() == t.node().get()) ++n;
  return n;
}

TapeScope::TapeScope(GradTape& tape) : prev_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = prev_; }

OpScope::OpScope(const std::string& name) : prev_(g_scope) {
  g_scope = prev_.empty() ? name : prev_ + "/" + name;
}
OpScope::~OpScope() { g_scope = prev_; }
const std::string& OpScope::current() { return g_scope; }

void set_finite_checks(bool enabled) { g_finite_checks = enabled; }
bool finite_checks_enabled() { return g_finite_checks; }

void backward(GradTape& tape, const Tensor& loss) { tape.backward(loss); }

// ---- elementwise -------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  auto out = make_node(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] + pb[i];
  auto an = a.node(), bn = b.node(), on = out;
  return finish("add", {&a, &b}, out, [an, bn, on] {
    const double* g = grad_of(on);
    if (an->grad_path) {
      double* ga = acc_grad(an);
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g[i];
    }
    if (bn->grad_path) {
      double* gb = acc_grad(bn);
      for (std::size_t i = 0; i < bn->data.size(); ++i) gb[i] += g[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "sub: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  auto out = make_node(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] - pb[i];
  auto an = a.node(), bn = b.node(), on = out;
  return finish("sub", {&a, &b}, out, [an, bn, on] {
    const double* g = grad_of(on);
    if (an->grad_path) {
      double* ga = acc_grad(an);
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g[i];
    }
    if (bn->grad_path) {
      double* gb = acc_grad(bn);
      for (std::size_t i = 0; i < bn->data.size(); ++i) gb[i] -= g[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "mul: shape mismatch ", shape_str(a.shape()), " vs ",
          shape_str(b.shape()));
  auto out = make_node(a.shape());
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = pa[i] * pb[i];
  auto an = a.node(), bn = b.node(), on = out;
  return finish("mul", {&a, &b}, out, [an, bn, on] {
    const double* g = grad_of(on);
    if (an->grad_path) {
      double* ga = acc_grad(an);
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += g[i] * bn->data[i];
    }
    if (bn->grad_path) {
      double* gb = acc_grad(bn);
      for (std::size_t i = 0; i < bn->data.size(); ++i) gb[i] += g[i] * an->data[i];
    }
  });
}

Tensor scale(const Tensor& a, double c) {
  auto out = make_node(a.shape());
  const double* pa = a.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = c * pa[i];
  auto an = a.node(), on = out;
  return finish("scale", {&a}, out, [an, on, c] {
    const double* g = grad_of(on);
    double* ga = acc_grad(an);
    for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += c * g[i];
  });
}

Tensor scale_by(const Tensor& a, const Tensor& s) {
  require(s.size() == 1, "scale_by: scale must have shape [1], got ", shape_str(s.shape()));
  const double c = s.data()[0];
  auto out = make_node(a.shape());
  const double* pa = a.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = c * pa[i];
  auto an = a.node(), sn = s.node(), on = out;
  return finish("scale_by", {&a, &s}, out, [an, sn, on, c] {
    const double* g = grad_of(on);
    if (an->grad_path) {
      double* ga = acc_grad(an);
      for (std::size_t i = 0; i < an->data.size(); ++i) ga[i] += c * g[i];
    }
    if (sn->grad_path) {
      double acc = 0.0;
      for (std::size_t i = 0; i < an->data.size(); ++i) acc += g[i] * an->data[i];
      acc_grad(sn)[0] += acc;
    }
  });
}

Tensor relu(const Tensor& x) {
  auto out = make_node(x.shape());
  const double* px = x.data();
  for (std::size_t i = 0; i < out->data.size(); ++i) out->data[i] = px[i] > 0.0 ? px[i] : 0.0;
  auto xn = x.node(), on = out;
  return finish("relu", {&x}, out, [xn, on] {
    const double* g = grad_of(on);
    double* gx = acc_grad(xn);
    for (std::size_t i = 0; i < xn->data.size(); ++i)
      if (xn->data[i] > 0.0) gx[i] += g[i];
  });
}

Tensor gelu(const Tensor& x) {
  static const double inv_sqrt2 = 0.7071067811865475244;
  static const double inv_sqrt2pi = 0.3989422804014326779;
  auto out = make_node(x.shape());
  const double* px = x.data();
  const std::ptrdiff_t n = static_cast<std::ptrdiff_t>(out->data.size());
  double* po = out->data.data();
#pragma omp parallel for schedule(static) if (n > 1 << 14)
  for (std::ptrdiff_t i = 0; i < n; ++i)
    po[i] = 0.5 * px[i] * (1.0 + std::erf(px[i] * inv_sqrt2));
  auto xn = x.node(), on = out;
  return finish("gelu", {&x}, out, [xn, on, n] {
    const double* g = grad_of(on);
    double* gx = acc_grad(xn);
    const double* pv = xn->data.data();
#pragma omp parallel for schedule(static) if (n > 1 << 14)
    for (std::ptrdiff_t i = 0; i < n; ++i) {
      const double v = pv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
      const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Tensor broadcast_scalar(const Tensor& s, int n) {
  require(s.size() == 1, "broadcast_scalar expects a [1] tensor");
  require(n >= 1, "broadcast_scalar: n must be positive");
  auto out = make_node({n}, s.data()[0]);
  auto sn = s.node(), on = out;
  return finish("broadcast_scalar", {&s}, out, [sn, on] {
    const double* g = grad_of(on);
    double acc = 0.0;
    for (std::size_t i = 0; i < on->data.size(); ++i) acc += g[i];
    acc_grad(sn)[0] += acc;
  });
}

// ---- shape ops ---------------------------------------------------------

Tensor reshape(const Tensor& x, Shape target) {
  check_positive_shape(target);
  require(shape_size(target) == x.size(), "reshape: cannot view ", shape_str(x.shape()),
          " as ", shape_str(target));
  auto out = std::make_shared<Node>();
  out->shape = std::move(target);
  out->data = x.vec();
  auto xn = x.node(), on = out;
  return finish("reshape", {&x}, out, [xn, on] {
    const double* g = grad_of(on);
    double* gx = acc_grad(xn);
    for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g[i];
  });
}

Tensor transpose(const Tensor& x) {
  require(x.ndim() == 2, "transpose expects a 2-D tensor, got ", shape_str(x.shape()));
  const int m = x.dim(0), n = x.dim(1);
  auto out = make_node({n, m});
  const double* px = x.data();
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      out->data[static_cast<std::size_t>(j) * m + i] = px[static_cast<std::size_t>(i) * n + j];
  auto xn = x.node(), on = out;
  return finish("transpose", {&x}, out, [xn, on, m, n] {
    const double* g = grad_of(on);
    double* gx = acc_grad(xn);
    for (int j = 0; j < n; ++j)
      for (int i = 0; i < m; ++i)
        gx[static_cast<std::size_t>(i) * n + j] += g[static_cast<std::size_t>(j) * m + i];
  });
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  require(!xs.empty(), "concat: empty input list");
  const Shape& s0 = xs[0].shape();
  require(axis >= 0 && axis < static_cast<int>(s0.size()), "concat: bad axis");
  Shape out_shape = s0;
  int total_axis = 0;
  for (const Tensor& t : xs) {
    require(t.ndim() == static_cast<int>(s0.size()), "concat: rank mismatch");
    for (int i = 0; i < t.ndim(); ++i)
      if (i != axis)
        require(t.dim(i) == s0[static_cast<std::size_t>(i)], "concat: shape mismatch ",
                shape_str(t.shape()), " vs ", shape_str(s0));
    total_axis += t.dim(axis);
  }
  out_shape[static_cast<std::size_t>(axis)] = total_axis;
  auto out = make_node(out_shape);
  AxisSplit os = split_axis(out_shape, axis);

  std::size_t offset = 0;  // offset along the axis
  std::vector<NodePtr> in_nodes;
  std::vector<std::size_t> in_offsets;
  for (const Tensor& t : xs) {
    AxisSplit ts = split_axis(t.shape(), axis);
    const double* src = t.data();
    for (std::size_t o = 0; o < ts.outer; ++o)
      for (std::size_t a = 0; a < ts.extent; ++a)
        std::copy_n(src + (o * ts.extent + a) * ts.inner, ts.inner,
                    out->data.data() + (o * os.extent + offset + a) * os.inner);
    in_nodes.push_back(t.node());
    in_offsets.push_back(offset);
    offset += ts.extent;
  }

  std::vector<const Tensor*> refs;
  for (const Tensor& t : xs) refs.push_back(&t);
  // finish() wants an initializer_list; record manually for the variadic case.
  check_finite("concat", *out);
  bool needs = false;
  for (const Tensor& t : xs) needs = needs || t.node()->grad_path;
  if (needs && GradTape::active() != nullptr) {
    out->grad_path = true;
    auto on = out;
    GradTape::active()->record("concat", in_nodes, out, [in_nodes, in_offsets, on, os, axis] {
      const double* g = grad_of(on);
      for (std::size_t t = 0; t < in_nodes.size(); ++t) {
        const NodePtr& nd = in_nodes[t];
        if (!nd->grad_path) continue;
        AxisSplit ts = split_axis(nd->shape, axis);
        double* gx = acc_grad(nd);
        for (std::size_t o = 0; o < ts.outer; ++o)
          for (std::size_t a = 0; a < ts.extent; ++a) {
            const double* gs = g + (o * os.extent + in_offsets[t] + a) * os.inner;
            double* gd = gx + (o * ts.extent + a) * ts.inner;
            for (std::size_t i = 0; i < ts.inner; ++i) gd[i] += gs[i];
          }
      }
    });
  }
  return Tensor::wrap(out);
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  require(axis >= 0 && axis < x.ndim(), "slice: bad axis ", axis);
  require(start >= 0 && len >= 1 && start + len <= x.dim(axis), "slice: range [", start, ",",
          start + len, ") out of bounds for axis extent ", x.dim(axis));
  Shape out_shape = x.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  auto out = make_node(out_shape);
  AxisSplit xs = split_axis(x.shape(), axis);
  AxisSplit os = split_axis(out_shape, axis);
  const double* src = x.data();
  for (std::size_t o = 0; o < xs.outer; ++o)
    for (int a = 0; a < len; ++a)
      std::copy_n(src + (o * xs.extent + static_cast<std::size_t>(start + a)) * xs.inner,
                  xs.inner, out->data.data() + (o * os.extent + static_cast<std::size_t>(a)) * os.inner);
  auto xn = x.node(), on = out;
  return finish("slice", {&x}, out, [xn, on, xs, os, start, len] {
    const double* g = grad_of(on);
    double* gx = acc_grad(xn);
    for (std::size_t o = 0; o < xs.outer; ++o)
      for (int a = 0; a < len; ++a) {
        const double* gs = g + (o * os.extent + static_cast<std::size_t>(a)) * os.inner;
        double* gd = gx + (o * xs.extent + static_cast<std::size_t>(start + a)) * xs.inner;
        for (std::size_t i = 0; i < xs.inner; ++i) gd[i] += gs[i];
      }
  });
}

// ---- linear algebra ----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.ndim() == 2 && b.ndim() == 2, "matmul expects 2-D tensors, got ",
          shape_str(a.shape()), " and ", shape_str(b.shape()));
  require(a.dim(1) == b.dim(0), "matmul: inner dimensions disagree, ", shape_str(a.shape()),
          " x ", shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_node({m, n});
  mm_nn_acc(a.data(), b.data(), out->data.data(), m, k, n);
  auto an = a.node(), bn = b.node(), on = out;
  return finish("matmul", {&a, &b}, out, [an, bn, on, m, k, n] {
    const double* g = grad_of(on);
    if (an->grad_path) mm_nt_acc(g, bn->data.data(), acc_grad(an), m, n, k);
    if (bn->grad_path) mm_tn_acc(an->data.data(), g, acc_grad(bn), m, k, n);
  });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.ndim() == 2 && w.ndim() == 2, "linear expects 2-D input and weight");
  require(x.dim(1) == w.dim(0), "linear: input width ", x.dim(1),
          " does not match weight rows ", w.dim(0));
  const int n = x.dim(0), ci = x.dim(1), co = w.dim(1);
  if (b.defined())
    require(b.ndim() == 1 && b.dim(0) == co, "linear: bias shape ", shape_str(b.shape()),
            " does not match output width ", co);
  auto out = make_node({n, co});
  if (b.defined()) {
    const double* pb = b.data();
    for (int i = 0; i < n; ++i)
      std::copy_n(pb, co, out->data.data() + static_cast<std::size_t>(i) * co);
  }
  mm_nn_acc(x.data(), w.data(), out->data.data(), n, ci, co);
  auto xn = x.node(), wn = w.node(), on = out;
  auto bn = b.defined() ? b.node() : nullptr;
  return finish("linear", {&x, &w, &b}, out, [xn, wn, bn, on, n, ci, co] {
    const double* g = grad_of(on);
    if (xn->grad_path) mm_nt_acc(g, wn->data.data(), acc_grad(xn), n, co, ci);
    if (wn->grad_path) mm_tn_acc(xn->data.data(), g, acc_grad(wn), n, ci, co);
    if (bn && bn->grad_path) {
      double* gb = acc_grad(bn);
      for (int i = 0; i < n; ++i) {
        const double* grow = g + static_cast<std::size_t>(i) * co;
        for (int j = 0; j < co; ++j) gb[j] += grow[j];
      }
    }
  });
}

// ---- reductions --------------------------------------------------------

Tensor sum_all(const Tensor& x) {
  auto out = make_node({1});
  out->data[0] = std::accumulate(x.vec().begin(), x.vec().end(), 0.0);
  auto xn = x.node(), on = out;
  return finish("sum_all", {&x}, out, [xn, on] {
    const double g = grad_of(on)[0];
    double* gx = acc_grad(xn);
    for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g;
  });
}

Tensor mean_all(const Tensor& x) {
  auto out = make_node({1});
  const double inv = 1.0 / static_cast<double>(x.size());
  out->data[0] = std::accumulate(x.vec().begin(), x.vec().end(), 0.0) * inv;
  auto xn = x.node(), on = out;
  return finish("mean_all", {&x}, out, [xn, on, inv] {
    const double g = grad_of(on)[0] * inv;
    double* gx = acc_grad(xn);
    for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g;
  });
}

Tensor spatial_mean(const Tensor& x) {
  require(x.ndim() == 3, "spatial_mean expects [C,H,W], got ", shape_str(x.shape()));
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * static_cast<std::size_t>(x.dim(2));
  auto out = make_node({c});
  const double inv = 1.0 / static_cast<double>(hw);
  const double* px = x.data();
  for (int ch = 0; ch < c; ++ch) {
    double acc = 0.0;
    const double* p = px + static_cast<std::size_t>(ch) * hw;
    for (std::size_t i = 0; i < hw; ++i) acc += p[i];
    out->data[static_cast<std::size_t>(ch)] = acc * inv;
  }
  auto xn = x.node(), on = out;
  return finish("spatial_mean", {&x}, out, [xn, on, c, hw, inv] {
    const double* g = grad_of(on);
    double* gx = acc_grad(xn);
    for (int ch = 0; ch < c; ++ch) {
      const double gv = g[ch] * inv;
      double* p = gx + static_cast<std::size_t>(ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) p[i] += gv;
    }
  });
}

// ---- softmax / layer norm ----------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  require(axis >= 0 && axis < x.ndim(), "softmax: bad axis ", axis, " for ",
          shape_str(x.shape()));
  auto out = make_node(x.shape());
  AxisSplit ax = split_axis(x.shape(), axis);
  const double* px = x.data();
  double* po = out->data.data();
  const std::ptrdiff_t slices = static_cast<std::ptrdiff_t>(ax.outer * ax.inner);
#pragma omp parallel for schedule(static) if (slices * static_cast<std::ptrdiff_t>(ax.extent) > 1 << 14)
  for (std::ptrdiff_t s = 0; s < slices; ++s) {
    const std::size_t o = static_cast<std::size_t>(s) / ax.inner;
    const std::size_t i = static_cast<std::size_t>(s) % ax.inner;
    const std::size_t base = o * ax.extent * ax.inner + i;
    double mx = px[base];
    for (std::size_t a = 1; a < ax.extent; ++a)
      mx = std::max(mx, px[base + a * ax.inner]);
    double denom = 0.0;
    for (std::size_t a = 0; a < ax.extent; ++a) {
      const double e = std::exp(px[base + a * ax.inner] - mx);
      po[base + a * ax.inner] = e;
      denom += e;
    }
    const double inv = 1.0 / denom;
    for (std::size_t a = 0; a < ax.extent; ++a) po[base + a * ax.inner] *= inv;
  }
  auto xn = x.node(), on = out;
  return finish("softmax", {&x}, out, [xn, on, ax, slices] {
    const double* g = grad_of(on);
    const double* y = on->data.data();
    double* gx = acc_grad(xn);
#pragma omp parallel for schedule(static) if (slices * static_cast<std::ptrdiff_t>(ax.extent) > 1 << 14)
    for (std::ptrdiff_t s = 0; s < slices; ++s) {
      const std::size_t o = static_cast<std::size_t>(s) / ax.inner;
      const std::size_t i = static_cast<std::size_t>(s) % ax.inner;
      const std::size_t base = o * ax.extent * ax.inner + i;
      double dot = 0.0;
      for (std::size_t a = 0; a < ax.extent; ++a) {
        const std::size_t p = base + a * ax.inner;
        dot += g[p] * y[p];
      }
      for (std::size_t a = 0; a < ax.extent; ++a) {
        const std::size_t p = base + a * ax.inner;
        gx[p] += y[p] * (g[p] - dot);
      }
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  require(x.ndim() == 2, "layer_norm expects [n,c], got ", shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1);
  require(gamma.ndim() == 1 && gamma.dim(0) == c && beta.ndim() == 1 && beta.dim(0) == c,
          "layer_norm: gamma/beta must be [", c, "]");
  auto out = make_node(x.shape());
  // keep normalized activations for backward
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_sigma = std::make_shared<std::vector<double>>(static_cast<std::size_t>(n));
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  for (int i = 0; i < n; ++i) {
    const double* row = px + static_cast<std::size_t>(i) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += row[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = row[j] - mu;
      var += d * d;
    }
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_sigma)[static_cast<std::size_t>(i)] = inv;
    for (int j = 0; j < c; ++j) {
      const double xb = (row[j] - mu) * inv;
      (*xhat)[static_cast<std::size_t>(i) * c + j] = xb;
      out->data[static_cast<std::size_t>(i) * c + j] = xb * pg[j] + pb[j];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node(), on = out;
  return finish("layer_norm", {&x, &gamma, &beta}, out, [xn, gn, bn, on, xhat, inv_sigma, n, c] {
    const double* g = grad_of(on);
    for (int i = 0; i < n; ++i) {
      const std::size_t base = static_cast<std::size_t>(i) * c;
      if (gn->grad_path) {
        double* gg = acc_grad(gn);
        for (int j = 0; j < c; ++j) gg[j] += g[base + j] * (*xhat)[base + j];
      }
      if (bn->grad_path) {
        double* gb = acc_grad(bn);
        for (int j = 0; j < c; ++j) gb[j] += g[base + j];
      }
      if (xn->grad_path) {
        double* gx = acc_grad(xn);
        double m1 = 0.0, m2 = 0.0;  // mean(gy), mean(gy * xhat)
        for (int j = 0; j < c; ++j) {
          const double gy = g[base + j] * gn->data[static_cast<std::size_t>(j)];
          m1 += gy;
          m2 += gy * (*xhat)[base + j];
        }
        m1 /= c;
        m2 /= c;
        const double inv = (*inv_sigma)[static_cast<std::size_t>(i)];
        for (int j = 0; j < c; ++j) {
          const double gy = g[base + j] * gn->data[static_cast<std::size_t>(j)];
          gx[base + j] += inv * (gy - m1 - (*xhat)[base + j] * m2);
        }
      }
    }
  });
}

// ---- bilinear resize ----------------------------------------------------

namespace {
struct LinTap {
  int i0, i1;
  double w0, w1;
};

// Half-pixel source coordinate, edge-clamped.
std::vector<LinTap> bilinear_taps(int in, int out) {
  std::vector<LinTap> taps(static_cast<std::size_t>(out));
  const double sc = static_cast<double>(in) / static_cast<double>(out);
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * sc - 0.5;
    if (src < 0.0) src = 0.0;
    if (src > in - 1) src = in - 1;
    int i0 = static_cast<int>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const double f = src - i0;
    taps[static_cast<std::size_t>(o)] = {i0, std::min(i0 + 1, in - 1), 1.0 - f, f};
  }
  return taps;
}
}  // namespace

Tensor bilinear_resize(const Tensor& x, int out_h, int out_w) {
  require(x.ndim() == 3, "bilinear_resize expects [C,H,W], got ", shape_str(x.shape()));
  require(out_h >= 1 && out_w >= 1, "bilinear_resize: target dims must be positive, got ",
          out_h, "x", out_w);
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h == h && out_w == w) {
    // identity size is a bit-exact passthrough
    auto out = make_node(x.shape());
    out->data = x.vec();
    auto xn = x.node(), on = out;
    return finish("bilinear_resize", {&x}, out, [xn, on] {
      const double* g = grad_of(on);
      double* gx = acc_grad(xn);
      for (std::size_t i = 0; i < xn->data.size(); ++i) gx[i] += g[i];
    });
  }
  auto ys = std::make_shared<std::vector<LinTap>>(bilinear_taps(h, out_h));
  auto xs = std::make_shared<std::vector<LinTap>>(bilinear_taps(w, out_w));
  auto out = make_node({c, out_h, out_w});
  const double* px = x.data();
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(c) * out_h * out_w > 1 << 15)
  for (int ch = 0; ch < c; ++ch) {
    const double* plane = px + static_cast<std::size_t>(ch) * h * w;
    double* oplane = out->data.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int oy = 0; oy < out_h; ++oy) {
      const LinTap& ty = (*ys)[static_cast<std::size_t>(oy)];
      for (int ox = 0; ox < out_w; ++ox) {
        const LinTap& tx = (*xs)[static_cast<std::size_t>(ox)];
        const double v = ty.w0 * (tx.w0 * plane[ty.i0 * w + tx.i0] + tx.w1 * plane[ty.i0 * w + tx.i1]) +
                         ty.w1 * (tx.w0 * plane[ty.i1 * w + tx.i0] + tx.w1 * plane[ty.i1 * w + tx.i1]);
        oplane[static_cast<std::size_t>(oy) * out_w + ox] = v;
      }
    }
  }
  auto xn = x.node(), on = out;
  return finish("bilinear_resize", {&x}, out, [xn, on, ys, xs, c, h, w, out_h, out_w] {
    const double* g = grad_of(on);
    double* gx = acc_grad(xn);
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(c) * out_h * out_w > 1 << 15)
    for (int ch = 0; ch < c; ++ch) {
      double* gplane = gx + static_cast<std::size_t>(ch) * h * w;
      const double* goplane = g + static_cast<std::size_t>(ch) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const LinTap& ty = (*ys)[static_cast<std::size_t>(oy)];
        for (int ox = 0; ox < out_w; ++ox) {
          const LinTap& tx = (*xs)[static_cast<std::size_t>(ox)];
          const double gv = goplane[static_cast<std::size_t>(oy) * out_w + ox];
          gplane[ty.i0 * w + tx.i0] += ty.w0 * tx.w0 * gv;
          gplane[ty.i0 * w + tx.i1] += ty.w0 * tx.w1 * gv;
          gplane[ty.i1 * w + tx.i0] += ty.w1 * tx.w0 * gv;
          gplane[ty.i1 * w + tx.i1] += ty.w1 * tx.w1 * gv;
        }
      }
    }
  });
}

// ---- convolutions -------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  require(x.ndim() == 3, "conv2d expects input [Cin,H,W], got ", shape_str(x.shape()));
  require(w.ndim() == 4, "conv2d expects weight [Cout,Cin,kh,kw], got ", shape_str(w.shape()));
  require(x.dim(0) == w.dim(1), "conv2d: input channels ", x.dim(0),
          " do not match weight channels ", w.dim(1));
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  require(h + 2 * pad >= kh && wd + 2 * pad >= kw, "conv2d: kernel ", kh, "x", kw,
          " larger than padded input");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wd + 2 * pad - kw) / stride + 1;
  if (b.defined())
    require(b.ndim() == 1 && b.dim(0) == co, "conv2d: bias must be [", co, "]");

  // Lowered to a matrix product over patch columns so convolution compute
  // shares the matmul kernels. Patch columns are kept for the backward pass.
  const int taps = ci * kh * kw;
  const std::size_t ohw = static_cast<std::size_t>(oh) * ow;
  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(taps) * ohw, 0.0);
  const double* px = x.data();
  {
    double* pc = cols->data();
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(taps) * ohw > 1 << 15)
    for (int t = 0; t < taps; ++t) {
      const int ic = t / (kh * kw);
      const int ky = (t / kw) % kh;
      const int kx = t % kw;
      const double* xplane = px + static_cast<std::size_t>(ic) * h * wd;
      double* crow = pc + static_cast<std::size_t>(t) * ohw;
      for (int oy = 0; oy < oh; ++oy) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        const double* xrow = xplane + static_cast<std::size_t>(iy) * wd;
        double* cr = crow + static_cast<std::size_t>(oy) * ow;
        for (int ox = 0; ox < ow; ++ox) {
          const int ix = ox * stride - pad + kx;
          if (ix >= 0 && ix < wd) cr[ox] = xrow[ix];
        }
      }
    }
  }
  auto out = make_node({co, oh, ow});
  double* po = out->data.data();
  if (b.defined()) {
    const double* pb = b.data();
    for (int oc = 0; oc < co; ++oc)
      for (std::size_t i = 0; i < ohw; ++i) po[static_cast<std::size_t>(oc) * ohw + i] = pb[oc];
  }
  mm_nn_acc(w.data(), cols->data(), po, co, taps, static_cast<int>(ohw));

  auto xn = x.node(), wn = w.node(), on = out;
  auto bn = b.defined() ? b.node() : nullptr;
  return finish("conv2d", {&x, &w, &b}, out,
                [xn, wn, bn, on, cols, ci, h, wd, co, kh, kw, oh, ow, stride, pad, taps, ohw] {
    const double* g = grad_of(on);
    if (bn && bn->grad_path) {
      double* gb = acc_grad(bn);
      for (int oc = 0; oc < co; ++oc) {
        const double* gplane = g + static_cast<std::size_t>(oc) * ohw;
        double acc = 0.0;
        for (std::size_t i = 0; i < ohw; ++i) acc += gplane[i];
        gb[oc] += acc;
      }
    }
    if (wn->grad_path)
      mm_nt_acc(g, cols->data(), acc_grad(wn), co, static_cast<int>(ohw), taps);
    if (xn->grad_path) {
      // gcols = w^T g, then scatter patch columns back onto the input grid
      std::vector<double> gcols(static_cast<std::size_t>(taps) * ohw, 0.0);
      mm_tn_acc(wn->data.data(), g, gcols.data(), co, taps, static_cast<int>(ohw));
      double* gx = acc_grad(xn);
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(taps) * ohw > 1 << 15)
      for (int ic = 0; ic < ci; ++ic) {
        double* gxplane = gx + static_cast<std::size_t>(ic) * h * wd;
        for (int ky = 0; ky < kh; ++ky)
          for (int kx = 0; kx < kw; ++kx) {
            const double* grow =
                gcols.data() + ((static_cast<std::size_t>(ic) * kh + ky) * kw + kx) * ohw;
            for (int oy = 0; oy < oh; ++oy) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              double* gxrow = gxplane + static_cast<std::size_t>(iy) * wd;
              const double* gr = grow + static_cast<std::size_t>(oy) * ow;
              for (int ox = 0; ox < ow; ++ox) {
                const int ix = ox * stride - pad + kx;
                if (ix >= 0 && ix < wd) gxrow[ix] += gr[ox];
              }
            }
          }
      }
    }
  });
}

Tensor depthwise_conv2d(const Tensor& x, const Tensor& k, int dilation) {
  require(x.ndim() == 3, "depthwise_conv2d expects [C,H,W], got ", shape_str(x.shape()));
  require(k.ndim() == 3, "depthwise_conv2d expects kernels [C,kh,kw], got ",
          shape_str(k.shape()));
  require(x.dim(0) == k.dim(0), "depthwise_conv2d: channel counts differ, input ",
          shape_str(x.shape()), " vs kernels ", shape_str(k.shape()));
  require(dilation >= 1, "depthwise_conv2d: dilation must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int kh = k.dim(1), kw = k.dim(2);
  require(kh % 2 == 1 && kw % 2 == 1, "depthwise_conv2d: kernel extents must be odd for same padding");
  const int ry = dilation * (kh / 2), rx = dilation * (kw / 2);

  auto out = make_node({c, h, w});
  const double* px = x.data();
  const double* pk = k.data();
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(c) * h * w * kh * kw > 1 << 16)
  for (int ch = 0; ch < c; ++ch) {
    const double* xplane = px + static_cast<std::size_t>(ch) * h * w;
    const double* kplane = pk + static_cast<std::size_t>(ch) * kh * kw;
    double* oplane = out->data.data() + static_cast<std::size_t>(ch) * h * w;
    for (int y = 0; y < h; ++y)
      for (int xo = 0; xo < w; ++xo) {
        double acc = 0.0;
        for (int ky = 0; ky < kh; ++ky) {
          const int iy = y + ky * dilation - ry;
          if (iy < 0 || iy >= h) continue;
          for (int kx = 0; kx < kw; ++kx) {
            const int ix = xo + kx * dilation - rx;
            if (ix < 0 || ix >= w) continue;
            acc += xplane[iy * w + ix] * kplane[ky * kw + kx];
          }
        }
        oplane[static_cast<std::size_t>(y) * w + xo] = acc;
      }
  }
  auto xn = x.node(), kn = k.node(), on = out;
  return finish("depthwise_conv2d", {&x, &k}, out, [xn, kn, on, c, h, w, kh, kw, dilation, ry, rx] {
    const double* g = grad_of(on);
    double* gx = xn->grad_path ? acc_grad(xn) : nullptr;
    double* gk = kn->grad_path ? acc_grad(kn) : nullptr;
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(c) * h * w * kh * kw > 1 << 16)
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t xbase = static_cast<std::size_t>(ch) * h * w;
      const std::size_t kbase = static_cast<std::size_t>(ch) * kh * kw;
      const double* gplane = g + xbase;
      for (int y = 0; y < h; ++y)
        for (int xo = 0; xo < w; ++xo) {
          const double gv = gplane[static_cast<std::size_t>(y) * w + xo];
          if (gv == 0.0) continue;
          for (int ky = 0; ky < kh; ++ky) {
            const int iy = y + ky * dilation - ry;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kw; ++kx) {
              const int ix = xo + kx * dilation - rx;
              if (ix < 0 || ix >= w) continue;
              if (gx) gx[xbase + iy * w + ix] += gv * kn->data[kbase + ky * kw + kx];
              if (gk) gk[kbase + ky * kw + kx] += gv * xn->data[xbase + iy * w + ix];
            }
          }
        }
    }
  });
}

Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b) {
  require(x.ndim() == 3, "pointwise_conv expects [Cin,H,W], got ", shape_str(x.shape()));
  require(w.ndim() == 2, "pointwise_conv expects weight [Cout,Cin], got ", shape_str(w.shape()));
  require(x.dim(0) == w.dim(1), "pointwise_conv: input channels ", x.dim(0),
          " do not match weight columns ", w.dim(1));
  const int ci = x.dim(0), h = x.dim(1), wd = x.dim(2);
  const int co = w.dim(0);
  const std::size_t hw = static_cast<std::size_t>(h) * wd;
  if (b.defined())
    require(b.ndim() == 1 && b.dim(0) == co, "pointwise_conv: bias must be [", co, "]");

  auto out = make_node({co, h, wd});
  const double* px = x.data();
  const double* pw = w.data();
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(co) * ci * hw > 1 << 16)
  for (int oc = 0; oc < co; ++oc) {
    double* oplane = out->data.data() + static_cast<std::size_t>(oc) * hw;
    const double bias = b.defined() ? b.data()[oc] : 0.0;
    for (std::size_t i = 0; i < hw; ++i) oplane[i] = bias;
    const double* wrow = pw + static_cast<std::size_t>(oc) * ci;
    for (int ic = 0; ic < ci; ++ic) {
      const double wv = wrow[ic];
      const double* xplane = px + static_cast<std::size_t>(ic) * hw;
      for (std::size_t i = 0; i < hw; ++i) oplane[i] += wv * xplane[i];
    }
  }
  auto xn = x.node(), wn = w.node(), on = out;
  auto bn = b.defined() ? b.node() : nullptr;
  return finish("pointwise_conv", {&x, &w, &b}, out, [xn, wn, bn, on, ci, co, hw] {
    const double* g = grad_of(on);
    double* gx = xn->grad_path ? acc_grad(xn) : nullptr;
    double* gw = wn->grad_path ? acc_grad(wn) : nullptr;
    double* gb = (bn && bn->grad_path) ? acc_grad(bn) : nullptr;
    if (gb != nullptr || gw != nullptr) {
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(co) * ci * hw > 1 << 16)
      for (int oc = 0; oc < co; ++oc) {
        const double* gplane = g + static_cast<std::size_t>(oc) * hw;
        if (gb) {
          double acc = 0.0;
          for (std::size_t i = 0; i < hw; ++i) acc += gplane[i];
          gb[oc] += acc;
        }
        if (gw) {
          for (int ic = 0; ic < ci; ++ic) {
            const double* xplane = xn->data.data() + static_cast<std::size_t>(ic) * hw;
            double acc = 0.0;
            for (std::size_t i = 0; i < hw; ++i) acc += gplane[i] * xplane[i];
            gw[static_cast<std::size_t>(oc) * ci + ic] += acc;
          }
        }
      }
    }
    if (gx != nullptr) {
#pragma omp parallel for schedule(static) if (static_cast<std::size_t>(co) * ci * hw > 1 << 16)
      for (int ic = 0; ic < ci; ++ic) {
        double* gxp = gx + static_cast<std::size_t>(ic) * hw;
        for (int oc = 0; oc < co; ++oc) {
          const double wv = wn->data[static_cast<std::size_t>(oc) * ci + ic];
          const double* gplane = g + static_cast<std::size_t>(oc) * hw;
          for (std::size_t i = 0; i < hw; ++i) gxp[i] += wv * gplane[i];
        }
      }
    }
  });
}

// ---- gather / scatter ----------------------------------------------------

namespace {
std::pair<int, std::size_t> rows_cols(const Tensor& t) {
  require(t.ndim() >= 2, "expected at least 2-D tensor, got ", shape_str(t.shape()));
  const int c = t.dim(0);
  return {c, t.size() / static_cast<std::size_t>(c)};
}
}  // namespace

Tensor gather_cols(const Tensor& x, const std::vector<int>& idx) {
  auto [c, n] = rows_cols(x);
  for (int i : idx)
    require(i >= 0 && static_cast<std::size_t>(i) < n, "gather_cols: index ", i,
            " out of range [0,", n, ")");
  const int k = static_cast<int>(idx.size());
  require(k >= 1, "gather_cols: empty index list");
  auto out = make_node({c, k});
  const double* px = x.data();
  for (int ch = 0; ch < c; ++ch) {
    const double* row = px + static_cast<std::size_t>(ch) * n;
    double* orow = out->data.data() + static_cast<std::size_t>(ch) * k;
    for (int j = 0; j < k; ++j) orow[j] = row[idx[static_cast<std::size_t>(j)]];
  }
  auto xn = x.node(), on = out;
  auto idx_copy = std::make_shared<std::vector<int>>(idx);
  const std::size_t nn = n;
  return finish("gather_cols", {&x}, out, [xn, on, idx_copy, nn, c, k] {
    const double* g = grad_of(on);
    double* gx = acc_grad(xn);
    for (int ch = 0; ch < c; ++ch) {
      double* grow = gx + static_cast<std::size_t>(ch) * nn;
      const double* gorow = g + static_cast<std::size_t>(ch) * k;
      for (int j = 0; j < k; ++j) grow[(*idx_copy)[static_cast<std::size_t>(j)]] += gorow[j];
    }
  });
}

Tensor scatter_add_cols(const Tensor& base, const std::vector<int>& idx, const Tensor& upd) {
  auto [c, n] = rows_cols(base);
  require(upd.ndim() == 2 && upd.dim(0) == c, "scatter_add_cols: update rows ",
          shape_str(upd.shape()), " do not match base ", shape_str(base.shape()));
  require(static_cast<std::size_t>(upd.dim(1)) == idx.size(),
          "scatter_add_cols: update width must equal index count");
  for (int i : idx)
    require(i >= 0 && static_cast<std::size_t>(i) < n, "scatter_add_cols: index ", i,
            " out of range [0,", n, ")");
  const int k = static_cast<int>(idx.size());
  auto out = make_node(base.shape());
  out->data = base.vec();
  const double* pu = upd.data();
  for (int ch = 0; ch < c; ++ch) {
    double* row = out->data.data() + static_cast<std::size_t>(ch) * n;
    const double* urow = pu + static_cast<std::size_t>(ch) * k;
    for (int j = 0; j < k; ++j) row[idx[static_cast<std::size_t>(j)]] += urow[j];
  }
  auto bn = base.node(), un = upd.node(), on = out;
  auto idx_copy = std::make_shared<std::vector<int>>(idx);
  const std::size_t nn = n;
  return finish("scatter_add_cols", {&base, &upd}, out, [bn, un, on, idx_copy, nn, c, k] {
    const double* g = grad_of(on);
    if (bn->grad_path) {
      double* gb = acc_grad(bn);
      for (std::size_t i = 0; i < bn->data.size(); ++i) gb[i] += g[i];
    }
    if (un->grad_path) {
      double* gu = acc_grad(un);
      for (int ch = 0; ch < c; ++ch) {
        const double* grow = g + static_cast<std::size_t>(ch) * nn;
        double* gurow = gu + static_cast<std::size_t>(ch) * k;
        for (int j = 0; j < k; ++j) gurow[j] += grow[(*idx_copy)[static_cast<std::size_t>(j)]];
      }
    }
  });
}

// ---- cosine pair scores --------------------------------------------------

Tensor cosine_pairs(const Tensor& tokens, const std::vector<std::pair<int, int>>& pairs) {
  require(tokens.ndim() == 2, "cosine_pairs expects tokens [N,D], got ",
          shape_str(tokens.shape()));
  require(!pairs.empty(), "cosine_pairs: empty pair list");
  const int n = tokens.dim(0), d = tokens.dim(1);
  for (const auto& [i, j] : pairs)
    require(i >= 0 && i < n && j >= 0 && j < n, "cosine_pairs: pair (", i, ",", j,
            ") out of range for ", n, " tokens");
  const int p = static_cast<int>(pairs.size());
  auto out = make_node({p});
  const double* pt = tokens.data();
  constexpr double kTiny = 1e-30;
  for (int q = 0; q < p; ++q) {
    const double* u = pt + static_cast<std::size_t>(pairs[static_cast<std::size_t>(q)].first) * d;
    const double* v = pt + static_cast<std::size_t>(pairs[static_cast<std::size_t>(q)].second) * d;
    double uu = 0.0, vv = 0.0, uv = 0.0;
    for (int e = 0; e < d; ++e) {
      uu += u[e] * u[e];
      vv += v[e] * v[e];
      uv += u[e] * v[e];
    }
    out->data[static_cast<std::size_t>(q)] =
        (uu < kTiny || vv < kTiny) ? 0.0 : uv / std::sqrt(uu * vv);
  }
  auto tn = tokens.node(), on = out;
  auto pr = std::make_shared<std::vector<std::pair<int, int>>>(pairs);
  return finish("cosine_pairs", {&tokens}, out, [tn, on, pr, d] {
    const double* g = grad_of(on);
    double* gt = acc_grad(tn);
    constexpr double kTiny = 1e-30;
    for (std::size_t q = 0; q < pr->size(); ++q) {
      const double gq = g[q];
      if (gq == 0.0) continue;
      const int i = (*pr)[q].first, j = (*pr)[q].second;
      const double* u = tn->data.data() + static_cast<std::size_t>(i) * d;
      const double* v = tn->data.data() + static_cast<std::size_t>(j) * d;
      double uu = 0.0, vv = 0.0, uv = 0.0;
      for (int e = 0; e < d; ++e) {
        uu += u[e] * u[e];
        vv += v[e] * v[e];
        uv += u[e] * v[e];
      }
      if (uu < kTiny || vv < kTiny) continue;  // cosine pinned to 0
      const double nu = std::sqrt(uu), nv = std::sqrt(vv);
      const double c = uv / (nu * nv);
      double* gu = gt + static_cast<std::size_t>(i) * d;
      double* gv = gt + static_cast<std::size_t>(j) * d;
      for (int e = 0; e < d; ++e) {
        gu[e] += gq * (v[e] / (nu * nv) - c * u[e] / uu);
        gv[e] += gq * (u[e] / (nu * nv) - c * v[e] / vv);
      }
    }
  });
}

// ---- fused losses ---------------------------------------------------------

Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& labels,
                            int ignore_value, bool* all_ignored) {
  require(logits.ndim() >= 2, "cross_entropy_masked expects logits [Cc,...], got ",
          shape_str(logits.shape()));
  const int cc = logits.dim(0);
  require(cc >= 2, "cross_entropy_masked needs at least 2 classes");
  const std::size_t n = logits.size() / static_cast<std::size_t>(cc);
  require(labels.size() == n, "cross_entropy_masked: ", labels.size(), " labels for ", n,
          " columns");
  const double* pl = logits.data();
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y == ignore_value) continue;
    require(y >= 0 && y < cc, "cross_entropy_masked: label ", y, " out of range [0,", cc, ")");
    double mx = pl[i];
    for (int c = 1; c < cc; ++c) mx = std::max(mx, pl[static_cast<std::size_t>(c) * n + i]);
    double denom = 0.0;
    for (int c = 0; c < cc; ++c) denom += std::exp(pl[static_cast<std::size_t>(c) * n + i] - mx);
    total += mx + std::log(denom) - pl[static_cast<std::size_t>(y) * n + i];
    ++count;
  }
  if (all_ignored != nullptr) *all_ignored = (count == 0);
  auto out = make_node({1});
  out->data[0] = count == 0 ? 0.0 : total / static_cast<double>(count);
  auto ln = logits.node(), on = out;
  auto lab = std::make_shared<std::vector<int>>(labels);
  return finish("cross_entropy", {&logits}, out, [ln, on, lab, cc, n, ignore_value] {
    const double g = grad_of(on)[0];
    std::size_t count = 0;
    for (std::size_t i = 0; i < n; ++i)
      if ((*lab)[i] != ignore_value) ++count;
    if (count == 0) return;
    double* gl = acc_grad(ln);
    const double* pl = ln->data.data();
    const double gs = g / static_cast<double>(count);
    for (std::size_t i = 0; i < n; ++i) {
      const int y = (*lab)[i];
      if (y == ignore_value) continue;
      double mx = pl[i];
      for (int c = 1; c < cc; ++c) mx = std::max(mx, pl[static_cast<std::size_t>(c) * n + i]);
      double denom = 0.0;
      for (int c = 0; c < cc; ++c) denom += std::exp(pl[static_cast<std::size_t>(c) * n + i] - mx);
      for (int c = 0; c < cc; ++c) {
        const double p = std::exp(pl[static_cast<std::size_t>(c) * n + i] - mx) / denom;
        gl[static_cast<std::size_t>(c) * n + i] += gs * (p - (c == y ? 1.0 : 0.0));
      }
    }
  });
}

Tensor bce_with_logits_mean(const Tensor& scores, const std::vector<double>& targets) {
  require(scores.ndim() == 1, "bce_with_logits_mean expects scores [P], got ",
          shape_str(scores.shape()));
  require(static_cast<std::size_t>(scores.dim(0)) == targets.size(),
          "bce_with_logits_mean: ", targets.size(), " targets for ", scores.dim(0), " scores");
  const std::size_t p = targets.size();
  const double* ps = scores.data();
  double total = 0.0;
  for (std::size_t i = 0; i < p; ++i) {
    const double s = ps[i];
    // stable softplus(s) - s*t
    total += std::max(s, 0.0) - s * targets[i] + std::log1p(std::exp(-std::abs(s)));
  }
  auto out = make_node({1});
  out->data[0] = total / static_cast<double>(p);
  auto sn = scores.node(), on = out;
  auto tg = std::make_shared<std::vector<double>>(targets);
  return finish("bce_with_logits", {&scores}, out, [sn, on, tg, p] {
    const double g = grad_of(on)[0] / static_cast<double>(p);
    double* gs = acc_grad(sn);
    for (std::size_t i = 0; i < p; ++i) {
      const double s = sn->data[i];
      const double sig = 1.0 / (1.0 + std::exp(-s));
      gs[i] += g * (sig - (*tg)[i]);
    }
  });
}

// ---- top-k ----------------------------------------------------------------

std::vector<int> topk_smallest_indices(const double* values, std::size_t n, std::size_t k) {
  if (k > n) k = n;
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  auto cmp = [values](int a, int b) {
    if (values[a] != values[b]) return values[a] < values[b];
    return a < b;  // raster tie-break
  };
  if (k < n) std::nth_element(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(), cmp);
  idx.resize(k);
  std::sort(idx.begin(), idx.end(), cmp);
  return idx;
}

}  // namespace terra
