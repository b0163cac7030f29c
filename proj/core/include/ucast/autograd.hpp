#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "ucast/tensor.hpp"

namespace ucast {

namespace detail {

struct Node {
  Tensor value;
  Tensor grad;  // allocated on first accumulation
  bool requires_grad = false;
  uint64_t id = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Tensor& g);
};

}  // namespace detail

/// Reverse-mode autodiff is globally on by default; a NoGradGuard turns it off
/// for the current scope (ops then produce leaf constants and retain nothing).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Handle to a node in the computation graph. Copies share the node.
class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const;
  /// In-place access for optimizers; only sane on leaf parameters.
  Tensor& mutable_value();
  const Shape& shape() const { return value().shape(); }
  int64_t numel() const { return value().numel(); }

  bool requires_grad() const;
  void set_requires_grad(bool b);

  /// Gradient accumulated by backward(); zero tensor if none reached.
  Tensor grad() const;
  void zero_grad();

  /// Value-sharing constant cut off from the graph.
  Variable detach() const;

  /// Reverse pass from a scalar; accumulates into every reachable
  /// requires_grad leaf (and interior nodes' transient grads).
  void backward() const;

  real item() const;

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  explicit Variable(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}
  std::shared_ptr<detail::Node> node_;

  friend Variable make_op(Tensor out, std::vector<Variable> parents,
                          std::function<void(detail::Node&)> backward_fn);
};

/// Build a graph node: `backward_fn` reads node.grad and accumulates into the
/// parents it captured. Parents are dropped (and backward_fn never stored)
/// when grads are globally off or no parent needs them.
Variable make_op(Tensor out, std::vector<Variable> parents,
                 std::function<void(detail::Node&)> backward_fn);

Variable constant(Tensor t);

// ---- elementwise ----
Variable add(const Variable& a, const Variable& b);
Variable sub(const Variable& a, const Variable& b);
Variable mul(const Variable& a, const Variable& b);
Variable div(const Variable& a, const Variable& b);
Variable neg(const Variable& a);
Variable add_scalar(const Variable& a, real s);
Variable mul_scalar(const Variable& a, real s);
Variable relu(const Variable& a);
Variable leaky_relu(const Variable& a, real slope);
Variable sigmoid(const Variable& a);
Variable tanh(const Variable& a);
Variable exp(const Variable& a);
Variable log(const Variable& a);
Variable sqrt(const Variable& a);
Variable abs(const Variable& a);
Variable clamp(const Variable& a, real lo, real hi);

// ---- reductions ----
Variable sum_all(const Variable& a);
Variable mean_all(const Variable& a);

// ---- 2D linear algebra ----
Variable matmul(const Variable& a, const Variable& b);     // (m,k)x(k,n)
Variable matmul_nt(const Variable& a, const Variable& b);  // (m,k)x(n,k)^T -> (m,n)
Variable linear(const Variable& x, const Variable& w, const Variable& b);  // x(B,F) w(O,F) b(O)
Variable row_dot(const Variable& a, const Variable& b);    // (B,K),(B,K) -> (B,1)
Variable concat_cols(const Variable& a, const Variable& b);
Variable logsumexp_rows(const Variable& a);                // (B,N) -> (B,1), shift-stabilized
Variable diag_col(const Variable& a);                      // (L,L) -> (L,1)
Variable mul_rowwise(const Variable& x, const Variable& s);
Variable slice_cols(const Variable& x, int64_t start, int64_t len);  // (B,N)*(B,1)
Variable l2_normalize_rows(const Variable& x, real eps = 1e-12);
Variable reshape(const Variable& x, Shape shape);

// ---- NCHW image ops ----
Variable conv2d(const Variable& x, const Variable& w, const Variable& b, int64_t stride,
                int64_t pad);
Variable instance_norm(const Variable& x, real eps = 1e-5);
Variable channel_affine(const Variable& x, const Variable& gamma, const Variable& beta);
Variable global_avg_pool(const Variable& x);  // (B,C,H,W) -> (B,C)
Variable global_max_pool(const Variable& x);
Variable upsample_nearest2(const Variable& x);
/// Gather channel vectors at (image, row, col) sites: -> (sites, C).
struct SpatialSite {
  int64_t b, h, w;
};
Variable gather_spatial(const Variable& x, std::vector<SpatialSite> sites);

// ---- operators ----
inline Variable operator+(const Variable& a, const Variable& b) { return add(a, b); }
inline Variable operator-(const Variable& a, const Variable& b) { return sub(a, b); }
inline Variable operator*(const Variable& a, const Variable& b) { return mul(a, b); }
inline Variable operator/(const Variable& a, const Variable& b) { return div(a, b); }
inline Variable operator-(const Variable& a) { return neg(a); }
inline Variable operator*(const Variable& a, real s) { return mul_scalar(a, s); }
inline Variable operator*(real s, const Variable& a) { return mul_scalar(a, s); }
inline Variable operator+(const Variable& a, real s) { return add_scalar(a, s); }
inline Variable operator+(real s, const Variable& a) { return add_scalar(a, s); }
inline Variable operator-(const Variable& a, real s) { return add_scalar(a, -s); }
inline Variable operator-(real s, const Variable& a) { return add_scalar(neg(a), s); }

}  // namespace ucast
