#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "terra/common.hpp"

namespace terra {

using Shape = std::vector<int>;

std::size_t shape_size(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily during backward
  bool requires_grad = false;
  bool grad_path = false;  // gradient must flow through this node

  std::size_t size() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Dense tensor of 64-bit floats in row-major order. Value-semantic handle on
// shared storage; ops never mutate an existing tensor's data, they produce
// fresh nodes, so a tensor can be captured by the tape and read later.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::size_t size() const { return node_->data.size(); }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& vec() { return node_->data; }
  const std::vector<double>& vec() const { return node_->data; }

  double value() const;  // scalar tensors only
  double at(const std::vector<int>& idx) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool b);
  bool grad_path() const { return node_->grad_path; }

  bool has_grad() const { return node_ && node_->grad.size() == node_->data.size(); }
  const std::vector<double>& grad() const;
  std::vector<double>& grad();
  void zero_grad();

  std::shared_ptr<detail::Node> node() const { return node_; }
  static Tensor wrap(std::shared_ptr<detail::Node> n) { return Tensor(std::move(n)); }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;
};

// Reverse-mode tape. Ops executed while a tape is active (see TapeScope) and
// touching at least one grad-path tensor append an entry; backward() replays
// entries in strict reverse execution order, exactly once.
class GradTape {
 public:
  GradTape() = default;
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  // Seeds d(loss)/d(loss) = 1 and accumulates gradients into every
  // grad-path ancestor. The tape is dead afterwards; calling backward
  // again (or recording more ops) without a fresh forward is an error.
  void backward(const Tensor& loss);

  bool dead() const { return dead_; }
  std::size_t num_ops() const { return entries_.size(); }

  // Introspection used by the structural-ablation and single-injection
  // checks: which ops ran, under which architectural scope, and who read a
  // given tensor.
  std::map<std::string, std::size_t> op_census() const;
  std::map<std::string, std::size_t> scope_census() const;
  std::set<std::string> reader_scopes(const Tensor& t) const;
  std::size_t read_count(const Tensor& t) const;

  static GradTape* active();

  void record(const char* op, std::vector<std::shared_ptr<detail::Node>> inputs,
              std::shared_ptr<detail::Node> output, std::function<void()> backward_fn);

 private:
  struct Entry {
    const char* op;
    std::string scope;
    std::vector<std::shared_ptr<detail::Node>> inputs;
    std::shared_ptr<detail::Node> output;
    std::function<void()> backward_fn;
  };
  std::vector<Entry> entries_;
  bool dead_ = false;
};

// Activates a tape for the current thread for the lifetime of the scope.
class TapeScope {
 public:
  explicit TapeScope(GradTape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;

 private:
  GradTape* prev_;
};

// Architectural label attached to ops recorded while the scope is alive.
// Nested scopes join with '/'.
class OpScope {
 public:
  explicit OpScope(const std::string& name);
  ~OpScope();
  OpScope(const OpScope&) = delete;
  static const std::string& current();

 private:
  std::string prev_;
};

// When enabled (default), every op verifies its output is finite and throws
// NumericError otherwise. NaN/Inf is an error condition, never silent state.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

// ---- op set -----------------------------------------------------------
// Exactly the operations the architecture needs; everything else in the
// model is composed from these.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor scale_by(const Tensor& a, const Tensor& s);  // s has shape [1]
Tensor relu(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor broadcast_scalar(const Tensor& s, int n);  // [1] -> [n]

Tensor reshape(const Tensor& x, Shape target);
Tensor transpose(const Tensor& x);  // 2-D
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);

Tensor matmul(const Tensor& a, const Tensor& b);
// x:[n,ci] w:[ci,co] b:[co] (b may be undefined for no bias)
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
Tensor spatial_mean(const Tensor& x);  // [C,H,W] -> [C]

Tensor softmax(const Tensor& x, int axis);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);  // x:[n,c], normalized over c

// Half-pixel-center bilinear sampling, edge-clamped; the identity size is a
// bit-exact passthrough. Same convention everywhere in the project.
Tensor bilinear_resize(const Tensor& x, int out_h, int out_w);

// Dense convolution, zero padding. x:[Cin,H,W] w:[Cout,Cin,kh,kw] b:[Cout].
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);

// Per-channel convolution with its own kernel, same-size output via zero
// padding; kernels must have odd extents. x:[C,H,W] k:[C,kh,kw].
Tensor depthwise_conv2d(const Tensor& x, const Tensor& k, int dilation);

// Per-pixel linear map. x:[Cin,H,W] w:[Cout,Cin] b:[Cout].
Tensor pointwise_conv(const Tensor& x, const Tensor& w, const Tensor& b);

// Column gather/scatter on [C, N]-shaped data (trailing dims flattened).
Tensor gather_cols(const Tensor& x, const std::vector<int>& idx);
Tensor scatter_add_cols(const Tensor& base, const std::vector<int>& idx, const Tensor& upd);

// Cosine similarity of token-row pairs; tokens:[N,D], result [P].
// Pairs touching a zero vector get cosine 0 with zero gradient.
Tensor cosine_pairs(const Tensor& tokens, const std::vector<std::pair<int, int>>& pairs);

// Mean softmax cross-entropy over columns of logits:[Cc, ...] against
// integer labels, skipping entries equal to ignore_value. All-ignored
// input yields 0 and sets *all_ignored.
Tensor cross_entropy_masked(const Tensor& logits, const std::vector<int>& labels,
                            int ignore_value, bool* all_ignored = nullptr);

// Mean binary cross-entropy with logits; targets in {0,1}.
Tensor bce_with_logits_mean(const Tensor& scores, const std::vector<double>& targets);

// Indices of the k smallest values; ties broken by lower index. Result is
// sorted by (value, index) ascending. Not differentiable, never on tape.
std::vector<int> topk_smallest_indices(const double* values, std::size_t n, std::size_t k);

// Scalar-loss entry point; requires a live tape that recorded the forward.
void backward(GradTape& tape, const Tensor& loss);

}  // namespace terra
