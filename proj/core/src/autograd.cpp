#include "ucast/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace ucast {

using MatRM = Eigen::Matrix<real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using CMapM = Eigen::Map<const MatRM>;

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<uint64_t> g_next_id{1};

void check_same_shape(const Variable& a, const Variable& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

namespace detail {

void Node::accumulate(const Tensor& g) {
  if (grad.empty()) {
    grad = g;
    return;
  }
  if (grad.shape() != g.shape()) throw std::logic_error("grad accumulate: shape mismatch");
  for (int64_t i = 0; i < grad.numel(); ++i) grad[i] += g[i];
}

}  // namespace detail

Variable::Variable(Tensor value, bool requires_grad) {
  node_ = std::make_shared<detail::Node>();
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
  node_->id = g_next_id.fetch_add(1, std::memory_order_relaxed);
}

const Tensor& Variable::value() const {
  if (!node_) throw std::logic_error("Variable: undefined");
  return node_->value;
}

Tensor& Variable::mutable_value() {
  if (!node_) throw std::logic_error("Variable: undefined");
  return node_->value;
}

bool Variable::requires_grad() const { return node_ && node_->requires_grad; }

void Variable::set_requires_grad(bool b) {
  if (!node_) throw std::logic_error("Variable: undefined");
  node_->requires_grad = b;
}

Tensor Variable::grad() const {
  if (!node_) throw std::logic_error("Variable: undefined");
  if (node_->grad.empty()) return Tensor(node_->value.shape());
  return node_->grad;
}

void Variable::zero_grad() {
  if (node_) node_->grad = Tensor();
}

Variable Variable::detach() const {
  if (!node_) return Variable();
  Variable v(node_->value, false);
  return v;
}

real Variable::item() const {
  if (numel() != 1) throw std::invalid_argument("item(): tensor has " + std::to_string(numel()) + " elements");
  return value()[0];
}

void Variable::backward() const {
  if (!node_) throw std::logic_error("backward: undefined Variable");
  if (node_->value.numel() != 1) throw std::invalid_argument("backward: root must be scalar");
  if (!node_->requires_grad) return;

  // Collect the reachable requires_grad subgraph; ids grow in creation order,
  // so descending id is a valid reverse topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->id > b->id; });

  node_->accumulate(Tensor::full(node_->value.shape(), 1.0));
  for (detail::Node* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior grads are scratch; only leaves keep theirs for the optimizer.
  for (detail::Node* n : order) {
    if (n->backward_fn) n->grad = Tensor();
  }
}

Variable make_op(Tensor out, std::vector<Variable> parents,
                 std::function<void(detail::Node&)> backward_fn) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  Variable v(std::move(out), needs);
  if (needs) {
    auto& n = *v.node_;
    n.parents.reserve(parents.size());
    for (auto& p : parents) n.parents.push_back(p.node_);
    n.backward_fn = std::move(backward_fn);
  }
  return v;
}

Variable constant(Tensor t) { return Variable(std::move(t), false); }

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

Variable add(const Variable& a, const Variable& b) {
  check_same_shape(a, b, "add");
  Tensor out(a.shape());
  const Tensor &ta = a.value(), &tb = b.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] + tb[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) n.parents[1]->accumulate(n.grad);
  });
}

Variable sub(const Variable& a, const Variable& b) {
  check_same_shape(a, b, "sub");
  Tensor out(a.shape());
  const Tensor &ta = a.value(), &tb = b.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] - tb[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& n) {
    if (n.parents[0]->requires_grad) n.parents[0]->accumulate(n.grad);
    if (n.parents[1]->requires_grad) {
      Tensor g(n.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = -n.grad[i];
      n.parents[1]->accumulate(g);
    }
  });
}

Variable mul(const Variable& a, const Variable& b) {
  check_same_shape(a, b, "mul");
  Tensor out(a.shape());
  const Tensor &ta = a.value(), &tb = b.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] * tb[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& n) {
    const Tensor &va = n.parents[0]->value, &vb = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor g(n.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * vb[i];
      n.parents[0]->accumulate(g);
    }
    if (n.parents[1]->requires_grad) {
      Tensor g(n.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * va[i];
      n.parents[1]->accumulate(g);
    }
  });
}

Variable div(const Variable& a, const Variable& b) {
  check_same_shape(a, b, "div");
  Tensor out(a.shape());
  const Tensor &ta = a.value(), &tb = b.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] / tb[i];
  return make_op(std::move(out), {a, b}, [](detail::Node& n) {
    const Tensor &va = n.parents[0]->value, &vb = n.parents[1]->value;
    if (n.parents[0]->requires_grad) {
      Tensor g(n.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] / vb[i];
      n.parents[0]->accumulate(g);
    }
    if (n.parents[1]->requires_grad) {
      Tensor g(n.grad.shape());
      for (int64_t i = 0; i < g.numel(); ++i) g[i] = -n.grad[i] * va[i] / (vb[i] * vb[i]);
      n.parents[1]->accumulate(g);
    }
  });
}

Variable neg(const Variable& a) { return mul_scalar(a, -1.0); }

Variable add_scalar(const Variable& a, real s) {
  Tensor out(a.shape());
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] + s;
  return make_op(std::move(out), {a},
                 [](detail::Node& n) { n.parents[0]->accumulate(n.grad); });
}

Variable mul_scalar(const Variable& a, real s) {
  Tensor out(a.shape());
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] * s;
  return make_op(std::move(out), {a}, [s](detail::Node& n) {
    Tensor g(n.grad.shape());
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * s;
    n.parents[0]->accumulate(g);
  });
}

Variable relu(const Variable& a) { return leaky_relu(a, 0.0); }

Variable leaky_relu(const Variable& a, real slope) {
  Tensor out(a.shape());
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = ta[i] > 0 ? ta[i] : slope * ta[i];
  return make_op(std::move(out), {a}, [slope](detail::Node& n) {
    const Tensor& x = n.parents[0]->value;
    Tensor g(n.grad.shape());
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * (x[i] > 0 ? 1.0 : slope);
    n.parents[0]->accumulate(g);
  });
}

Variable sigmoid(const Variable& a) {
  Tensor out(a.shape());
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) {
    real x = ta[i];
    out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
  }
  Tensor saved = out;
  return make_op(std::move(out), {a}, [saved = std::move(saved)](detail::Node& n) {
    Tensor g(n.grad.shape());
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * saved[i] * (1.0 - saved[i]);
    n.parents[0]->accumulate(g);
  });
}

Variable tanh(const Variable& a) {
  Tensor out(a.shape());
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::tanh(ta[i]);
  Tensor saved = out;
  return make_op(std::move(out), {a}, [saved = std::move(saved)](detail::Node& n) {
    Tensor g(n.grad.shape());
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * (1.0 - saved[i] * saved[i]);
    n.parents[0]->accumulate(g);
  });
}

Variable exp(const Variable& a) {
  Tensor out(a.shape());
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::exp(ta[i]);
  Tensor saved = out;
  return make_op(std::move(out), {a}, [saved = std::move(saved)](detail::Node& n) {
    Tensor g(n.grad.shape());
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * saved[i];
    n.parents[0]->accumulate(g);
  });
}

Variable log(const Variable& a) {
  Tensor out(a.shape());
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::log(ta[i]);
  return make_op(std::move(out), {a}, [](detail::Node& n) {
    const Tensor& x = n.parents[0]->value;
    Tensor g(n.grad.shape());
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] / x[i];
    n.parents[0]->accumulate(g);
  });
}

Variable sqrt(const Variable& a) {
  Tensor out(a.shape());
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::sqrt(ta[i]);
  Tensor saved = out;
  return make_op(std::move(out), {a}, [saved = std::move(saved)](detail::Node& n) {
    Tensor g(n.grad.shape());
    for (int64_t i = 0; i < g.numel(); ++i) g[i] = n.grad[i] * 0.5 / saved[i];
    n.parents[0]->accumulate(g);
  });
}

Variable abs(const Variable& a) {
  Tensor out(a.shape());
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::fabs(ta[i]);
  return make_op(std::move(out), {a}, [](detail::Node& n) {
    const Tensor& x = n.parents[0]->value;
    Tensor g(n.grad.shape());
    for (int64_t i = 0; i < g.numel(); ++i)
      g[i] = n.grad[i] * (x[i] > 0 ? 1.0 : (x[i] < 0 ? -1.0 : 0.0));
    n.parents[0]->accumulate(g);
  });
}

Variable clamp(const Variable& a, real lo, real hi) {
  Tensor out(a.shape());
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = std::min(hi, std::max(lo, ta[i]));
  return make_op(std::move(out), {a}, [lo, hi](detail::Node& n) {
    const Tensor& x = n.parents[0]->value;
    Tensor g(n.grad.shape());
    for (int64_t i = 0; i < g.numel(); ++i)
      g[i] = (x[i] >= lo && x[i] <= hi) ? n.grad[i] : 0.0;
    n.parents[0]->accumulate(g);
  });
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

Variable sum_all(const Variable& a) {
  real s = 0;
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < ta.numel(); ++i) s += ta[i];
  return make_op(Tensor::scalar(s), {a}, [](detail::Node& n) {
    n.parents[0]->accumulate(Tensor::full(n.parents[0]->value.shape(), n.grad[0]));
  });
}

Variable mean_all(const Variable& a) {
  const int64_t m = a.numel();
  if (m == 0) throw std::invalid_argument("mean_all: empty tensor");
  real s = 0;
  const Tensor& ta = a.value();
  for (int64_t i = 0; i < m; ++i) s += ta[i];
  return make_op(Tensor::scalar(s / static_cast<real>(m)), {a}, [m](detail::Node& n) {
    n.parents[0]->accumulate(
        Tensor::full(n.parents[0]->value.shape(), n.grad[0] / static_cast<real>(m)));
  });
}

// ---------------------------------------------------------------------------
// 2D linear algebra
// ---------------------------------------------------------------------------

namespace {
void check_2d(const Variable& v, const char* op) {
  if (v.shape().size() != 2) {
    throw std::invalid_argument(std::string(op) + ": expected 2D, got " + shape_str(v.shape()));
  }
}
}  // namespace

Variable matmul(const Variable& a, const Variable& b) {
  check_2d(a, "matmul");
  check_2d(b, "matmul");
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  if (b.shape()[0] != k) throw std::invalid_argument("matmul: inner dim mismatch");
  Tensor out({m, n});
  CMapM A(a.value().data(), m, k);
  CMapM B(b.value().data(), k, n);
  MapM(out.data(), m, n).noalias() = A * B;
  return make_op(std::move(out), {a, b}, [m, k, n](detail::Node& nd) {
    CMapM G(nd.grad.data(), m, n);
    if (nd.parents[0]->requires_grad) {
      Tensor ga({m, k});
      CMapM B(nd.parents[1]->value.data(), k, n);
      MapM(ga.data(), m, k).noalias() = G * B.transpose();
      nd.parents[0]->accumulate(ga);
    }
    if (nd.parents[1]->requires_grad) {
      Tensor gb({k, n});
      CMapM A(nd.parents[0]->value.data(), m, k);
      MapM(gb.data(), k, n).noalias() = A.transpose() * G;
      nd.parents[1]->accumulate(gb);
    }
  });
}

Variable matmul_nt(const Variable& a, const Variable& b) {
  check_2d(a, "matmul_nt");
  check_2d(b, "matmul_nt");
  const int64_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[0];
  if (b.shape()[1] != k) throw std::invalid_argument("matmul_nt: inner dim mismatch");
  Tensor out({m, n});
  CMapM A(a.value().data(), m, k);
  CMapM B(b.value().data(), n, k);
  MapM(out.data(), m, n).noalias() = A * B.transpose();
  return make_op(std::move(out), {a, b}, [m, k, n](detail::Node& nd) {
    CMapM G(nd.grad.data(), m, n);
    if (nd.parents[0]->requires_grad) {
      Tensor ga({m, k});
      CMapM B(nd.parents[1]->value.data(), n, k);
      MapM(ga.data(), m, k).noalias() = G * B;
      nd.parents[0]->accumulate(ga);
    }
    if (nd.parents[1]->requires_grad) {
      Tensor gb({n, k});
      CMapM A(nd.parents[0]->value.data(), m, k);
      MapM(gb.data(), n, k).noalias() = G.transpose() * A;
      nd.parents[1]->accumulate(gb);
    }
  });
}

Variable linear(const Variable& x, const Variable& w, const Variable& b) {
  check_2d(x, "linear");
  check_2d(w, "linear");
  const int64_t B = x.shape()[0], F = x.shape()[1], O = w.shape()[0];
  if (w.shape()[1] != F) throw std::invalid_argument("linear: weight/input dim mismatch");
  if (b.shape() != Shape{O}) throw std::invalid_argument("linear: bias dim mismatch");
  Tensor out({B, O});
  CMapM X(x.value().data(), B, F);
  CMapM W(w.value().data(), O, F);
  MapM Y(out.data(), B, O);
  Y.noalias() = X * W.transpose();
  for (int64_t r = 0; r < B; ++r)
    for (int64_t c = 0; c < O; ++c) out.at(r, c) += b.value()[c];
  return make_op(std::move(out), {x, w, b}, [B, F, O](detail::Node& nd) {
    CMapM G(nd.grad.data(), B, O);
    if (nd.parents[0]->requires_grad) {
      Tensor gx({B, F});
      CMapM W(nd.parents[1]->value.data(), O, F);
      MapM(gx.data(), B, F).noalias() = G * W;
      nd.parents[0]->accumulate(gx);
    }
    if (nd.parents[1]->requires_grad) {
      Tensor gw({O, F});
      CMapM X(nd.parents[0]->value.data(), B, F);
      MapM(gw.data(), O, F).noalias() = G.transpose() * X;
      nd.parents[1]->accumulate(gw);
    }
    if (nd.parents[2]->requires_grad) {
      Tensor gb({O});
      for (int64_t r = 0; r < B; ++r)
        for (int64_t c = 0; c < O; ++c) gb[c] += nd.grad.at(r, c);
      nd.parents[2]->accumulate(gb);
    }
  });
}

Variable row_dot(const Variable& a, const Variable& b) {
  check_2d(a, "row_dot");
  check_same_shape(a, b, "row_dot");
  const int64_t B = a.shape()[0], K = a.shape()[1];
  Tensor out({B, 1});
  for (int64_t r = 0; r < B; ++r) {
    real s = 0;
    for (int64_t c = 0; c < K; ++c) s += a.value().at(r, c) * b.value().at(r, c);
    out[r] = s;
  }
  return make_op(std::move(out), {a, b}, [B, K](detail::Node& nd) {
    const Tensor &va = nd.parents[0]->value, &vb = nd.parents[1]->value;
    if (nd.parents[0]->requires_grad) {
      Tensor g({B, K});
      for (int64_t r = 0; r < B; ++r)
        for (int64_t c = 0; c < K; ++c) g.at(r, c) = nd.grad[r] * vb.at(r, c);
      nd.parents[0]->accumulate(g);
    }
    if (nd.parents[1]->requires_grad) {
      Tensor g({B, K});
      for (int64_t r = 0; r < B; ++r)
        for (int64_t c = 0; c < K; ++c) g.at(r, c) = nd.grad[r] * va.at(r, c);
      nd.parents[1]->accumulate(g);
    }
  });
}

Variable concat_cols(const Variable& a, const Variable& b) {
  check_2d(a, "concat_cols");
  check_2d(b, "concat_cols");
  const int64_t B = a.shape()[0], Ca = a.shape()[1], Cb = b.shape()[1];
  if (b.shape()[0] != B) throw std::invalid_argument("concat_cols: row mismatch");
  Tensor out({B, Ca + Cb});
  for (int64_t r = 0; r < B; ++r) {
    for (int64_t c = 0; c < Ca; ++c) out.at(r, c) = a.value().at(r, c);
    for (int64_t c = 0; c < Cb; ++c) out.at(r, Ca + c) = b.value().at(r, c);
  }
  return make_op(std::move(out), {a, b}, [B, Ca, Cb](detail::Node& nd) {
    if (nd.parents[0]->requires_grad) {
      Tensor g({B, Ca});
      for (int64_t r = 0; r < B; ++r)
        for (int64_t c = 0; c < Ca; ++c) g.at(r, c) = nd.grad.at(r, c);
      nd.parents[0]->accumulate(g);
    }
    if (nd.parents[1]->requires_grad) {
      Tensor g({B, Cb});
      for (int64_t r = 0; r < B; ++r)
        for (int64_t c = 0; c < Cb; ++c) g.at(r, c) = nd.grad.at(r, Ca + c);
      nd.parents[1]->accumulate(g);
    }
  });
}

Variable logsumexp_rows(const Variable& a) {
  check_2d(a, "logsumexp_rows");
  const int64_t B = a.shape()[0], N = a.shape()[1];
  if (N == 0) throw std::invalid_argument("logsumexp_rows: empty rows");
  Tensor out({B, 1});
  const Tensor& x = a.value();
  for (int64_t r = 0; r < B; ++r) {
    real m = x.at(r, 0);
    for (int64_t c = 1; c < N; ++c) m = std::max(m, x.at(r, c));
    real s = 0;
    for (int64_t c = 0; c < N; ++c) s += std::exp(x.at(r, c) - m);
    out[r] = m + std::log(s);
  }
  Tensor saved = out;
  return make_op(std::move(out), {a}, [B, N, saved = std::move(saved)](detail::Node& nd) {
    const Tensor& x = nd.parents[0]->value;
    Tensor g({B, N});
    for (int64_t r = 0; r < B; ++r)
      for (int64_t c = 0; c < N; ++c)
        g.at(r, c) = nd.grad[r] * std::exp(x.at(r, c) - saved[r]);
    nd.parents[0]->accumulate(g);
  });
}

Variable diag_col(const Variable& a) {
  check_2d(a, "diag_col");
  const int64_t L = a.shape()[0];
  if (a.shape()[1] != L) throw std::invalid_argument("diag_col: matrix not square");
  Tensor out({L, 1});
  for (int64_t i = 0; i < L; ++i) out[i] = a.value().at(i, i);
  return make_op(std::move(out), {a}, [L](detail::Node& nd) {
    Tensor g({L, L});
    for (int64_t i = 0; i < L; ++i) g.at(i, i) = nd.grad[i];
    nd.parents[0]->accumulate(g);
  });
}

Variable mul_rowwise(const Variable& x, const Variable& s) {
  check_2d(x, "mul_rowwise");
  const int64_t B = x.shape()[0], N = x.shape()[1];
  if (s.shape() != Shape{B, 1}) throw std::invalid_argument("mul_rowwise: scale must be (B,1)");
  Tensor out({B, N});
  for (int64_t r = 0; r < B; ++r)
    for (int64_t c = 0; c < N; ++c) out.at(r, c) = x.value().at(r, c) * s.value()[r];
  return make_op(std::move(out), {x, s}, [B, N](detail::Node& nd) {
    const Tensor &vx = nd.parents[0]->value, &vs = nd.parents[1]->value;
    if (nd.parents[0]->requires_grad) {
      Tensor g({B, N});
      for (int64_t r = 0; r < B; ++r)
        for (int64_t c = 0; c < N; ++c) g.at(r, c) = nd.grad.at(r, c) * vs[r];
      nd.parents[0]->accumulate(g);
    }
    if (nd.parents[1]->requires_grad) {
      Tensor g({B, 1});
      for (int64_t r = 0; r < B; ++r) {
        real acc = 0;
        for (int64_t c = 0; c < N; ++c) acc += nd.grad.at(r, c) * vx.at(r, c);
        g[r] = acc;
      }
      nd.parents[1]->accumulate(g);
    }
  });
}

Variable slice_cols(const Variable& x, int64_t start, int64_t len) {
  check_2d(x, "slice_cols");
  const int64_t B = x.shape()[0], C = x.shape()[1];
  if (start < 0 || len <= 0 || start + len > C) {
    throw std::invalid_argument("slice_cols: window out of range");
  }
  Tensor out({B, len});
  for (int64_t r = 0; r < B; ++r)
    for (int64_t c = 0; c < len; ++c) out.at(r, c) = x.value().at(r, start + c);
  return make_op(std::move(out), {x}, [B, C, start, len](detail::Node& nd) {
    Tensor g({B, C});
    for (int64_t r = 0; r < B; ++r)
      for (int64_t c = 0; c < len; ++c) g.at(r, start + c) = nd.grad.at(r, c);
    nd.parents[0]->accumulate(g);
  });
}

Variable l2_normalize_rows(const Variable& x, real eps) {
  check_2d(x, "l2_normalize_rows");
  const int64_t B = x.shape()[0], K = x.shape()[1];
  Tensor out({B, K});
  Tensor norms({B});
  for (int64_t r = 0; r < B; ++r) {
    real s = 0;
    for (int64_t c = 0; c < K; ++c) s += x.value().at(r, c) * x.value().at(r, c);
    real n = std::sqrt(s + eps);
    norms[r] = n;
    for (int64_t c = 0; c < K; ++c) out.at(r, c) = x.value().at(r, c) / n;
  }
  Tensor saved_y = out;
  return make_op(std::move(out), {x},
                 [B, K, norms = std::move(norms), saved_y = std::move(saved_y)](detail::Node& nd) {
                   Tensor g({B, K});
                   for (int64_t r = 0; r < B; ++r) {
                     real gy = 0;
                     for (int64_t c = 0; c < K; ++c) gy += nd.grad.at(r, c) * saved_y.at(r, c);
                     for (int64_t c = 0; c < K; ++c)
                       g.at(r, c) = (nd.grad.at(r, c) - gy * saved_y.at(r, c)) / norms[r];
                   }
                   nd.parents[0]->accumulate(g);
                 });
}

Variable reshape(const Variable& x, Shape shape) {
  Tensor out = x.value().reshaped(shape);
  Shape orig = x.shape();
  return make_op(std::move(out), {x}, [orig](detail::Node& nd) {
    nd.parents[0]->accumulate(nd.grad.reshaped(orig));
  });
}

// ---------------------------------------------------------------------------
// NCHW image ops
// ---------------------------------------------------------------------------

namespace {

void check_4d(const Variable& v, const char* op) {
  if (v.shape().size() != 4) {
    throw std::invalid_argument(std::string(op) + ": expected NCHW, got " + shape_str(v.shape()));
  }
}

// col layout: (Cin*kh*kw) rows x (B*Ho*Wo) cols, row-major.
Tensor im2col(const Tensor& x, int64_t kh, int64_t kw, int64_t stride, int64_t pad, int64_t Ho,
              int64_t Wo) {
  const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  Tensor col({C * kh * kw, B * Ho * Wo});
  const int64_t cols = B * Ho * Wo;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        const int64_t row = (c * kh + i) * kw + j;
        real* dst = col.data() + row * cols;
        for (int64_t b = 0; b < B; ++b)
          for (int64_t ho = 0; ho < Ho; ++ho) {
            const int64_t h = ho * stride + i - pad;
            const bool hin = h >= 0 && h < H;
            for (int64_t wo = 0; wo < Wo; ++wo) {
              const int64_t w = wo * stride + j - pad;
              dst[(b * Ho + ho) * Wo + wo] =
                  (hin && w >= 0 && w < W) ? x.at(b, c, h, w) : 0.0;
            }
          }
      }
  return col;
}

void col2im_add(const Tensor& col, Tensor& x, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
                int64_t Ho, int64_t Wo) {
  const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int64_t cols = B * Ho * Wo;
  for (int64_t c = 0; c < C; ++c)
    for (int64_t i = 0; i < kh; ++i)
      for (int64_t j = 0; j < kw; ++j) {
        const int64_t row = (c * kh + i) * kw + j;
        const real* src = col.data() + row * cols;
        for (int64_t b = 0; b < B; ++b)
          for (int64_t ho = 0; ho < Ho; ++ho) {
            const int64_t h = ho * stride + i - pad;
            if (h < 0 || h >= H) continue;
            for (int64_t wo = 0; wo < Wo; ++wo) {
              const int64_t w = wo * stride + j - pad;
              if (w < 0 || w >= W) continue;
              x.at(b, c, h, w) += src[(b * Ho + ho) * Wo + wo];
            }
          }
      }
}

}  // namespace

Variable conv2d(const Variable& x, const Variable& w, const Variable& b, int64_t stride,
                int64_t pad) {
  check_4d(x, "conv2d");
  check_4d(w, "conv2d");
  const int64_t B = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int64_t Cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
  if (w.shape()[1] != Cin) throw std::invalid_argument("conv2d: channel mismatch");
  if (b.shape() != Shape{Cout}) throw std::invalid_argument("conv2d: bias mismatch");
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  if (Ho <= 0 || Wo <= 0) {
    throw std::invalid_argument("conv2d: input " + shape_str(x.shape()) +
                                " too small for kernel/stride");
  }

  Tensor col = im2col(x.value(), kh, kw, stride, pad, Ho, Wo);
  const int64_t kdim = Cin * kh * kw, cols = B * Ho * Wo;
  Tensor ymat({Cout, cols});
  {
    CMapM Wm(w.value().data(), Cout, kdim);
    CMapM Cm(col.data(), kdim, cols);
    MapM(ymat.data(), Cout, cols).noalias() = Wm * Cm;
  }
  Tensor out({B, Cout, Ho, Wo});
  for (int64_t c = 0; c < Cout; ++c) {
    const real bias = b.value()[c];
    const real* src = ymat.data() + c * cols;
    for (int64_t bb = 0; bb < B; ++bb) {
      real* dst = out.data() + ((bb * Cout + c) * Ho) * Wo;
      const real* s = src + bb * Ho * Wo;
      for (int64_t q = 0; q < Ho * Wo; ++q) dst[q] = s[q] + bias;
    }
  }

  // `col` is retained for the weight gradient; recomputing it would trade
  // memory for an extra im2col per backward.
  return make_op(std::move(out), {x, w, b},
                 [B, Cin, H, W, Cout, kh, kw, stride, pad, Ho, Wo, kdim, cols,
                  col = std::move(col)](detail::Node& nd) {
                   // gather dY into (Cout, B*Ho*Wo)
                   Tensor gymat({Cout, cols});
                   for (int64_t c = 0; c < Cout; ++c) {
                     real* dst = gymat.data() + c * cols;
                     for (int64_t bb = 0; bb < B; ++bb) {
                       const real* src = nd.grad.data() + ((bb * Cout + c) * Ho) * Wo;
                       real* d = dst + bb * Ho * Wo;
                       for (int64_t q = 0; q < Ho * Wo; ++q) d[q] = src[q];
                     }
                   }
                   if (nd.parents[1]->requires_grad) {
                     Tensor gw({Cout, Cin, kh, kw});
                     CMapM G(gymat.data(), Cout, cols);
                     CMapM Cm(col.data(), kdim, cols);
                     MapM(gw.data(), Cout, kdim).noalias() = G * Cm.transpose();
                     nd.parents[1]->accumulate(gw);
                   }
                   if (nd.parents[2]->requires_grad) {
                     Tensor gb({Cout});
                     for (int64_t c = 0; c < Cout; ++c) {
                       real s = 0;
                       const real* src = gymat.data() + c * cols;
                       for (int64_t q = 0; q < cols; ++q) s += src[q];
                       gb[c] = s;
                     }
                     nd.parents[2]->accumulate(gb);
                   }
                   if (nd.parents[0]->requires_grad) {
                     Tensor gcol({kdim, cols});
                     CMapM Wm(nd.parents[1]->value.data(), Cout, kdim);
                     CMapM G(gymat.data(), Cout, cols);
                     MapM(gcol.data(), kdim, cols).noalias() = Wm.transpose() * G;
                     Tensor gx({B, Cin, H, W});
                     col2im_add(gcol, gx, kh, kw, stride, pad, Ho, Wo);
                     nd.parents[0]->accumulate(gx);
                   }
                 });
}

Variable instance_norm(const Variable& x, real eps) {
  check_4d(x, "instance_norm");
  const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int64_t n = H * W;
  Tensor out(x.shape());
  Tensor invstd({B, C});
  const Tensor& vx = x.value();
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const real* src = vx.data() + ((b * C + c) * n);
      real mu = 0;
      for (int64_t q = 0; q < n; ++q) mu += src[q];
      mu /= static_cast<real>(n);
      real var = 0;
      for (int64_t q = 0; q < n; ++q) var += (src[q] - mu) * (src[q] - mu);
      var /= static_cast<real>(n);
      const real is = 1.0 / std::sqrt(var + eps);
      invstd.at(b, c) = is;
      real* dst = out.data() + ((b * C + c) * n);
      for (int64_t q = 0; q < n; ++q) dst[q] = (src[q] - mu) * is;
    }
  Tensor saved_y = out;
  return make_op(std::move(out), {x},
                 [B, C, n, invstd = std::move(invstd), saved_y = std::move(saved_y)](detail::Node& nd) {
                   Tensor g(nd.parents[0]->value.shape());
                   for (int64_t b = 0; b < B; ++b)
                     for (int64_t c = 0; c < C; ++c) {
                       const real* gy = nd.grad.data() + ((b * C + c) * n);
                       const real* y = saved_y.data() + ((b * C + c) * n);
                       real mg = 0, mgy = 0;
                       for (int64_t q = 0; q < n; ++q) {
                         mg += gy[q];
                         mgy += gy[q] * y[q];
                       }
                       mg /= static_cast<real>(n);
                       mgy /= static_cast<real>(n);
                       const real is = invstd.at(b, c);
                       real* dst = g.data() + ((b * C + c) * n);
                       for (int64_t q = 0; q < n; ++q) dst[q] = is * (gy[q] - mg - y[q] * mgy);
                     }
                   nd.parents[0]->accumulate(g);
                 });
}

Variable channel_affine(const Variable& x, const Variable& gamma, const Variable& beta) {
  check_4d(x, "channel_affine");
  const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  const int64_t n = H * W;
  if (gamma.shape() != Shape{B, C} || beta.shape() != Shape{B, C}) {
    throw std::invalid_argument("channel_affine: gamma/beta must be (B,C)");
  }
  Tensor out(x.shape());
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const real g = gamma.value().at(b, c), be = beta.value().at(b, c);
      const real* src = x.value().data() + ((b * C + c) * n);
      real* dst = out.data() + ((b * C + c) * n);
      for (int64_t q = 0; q < n; ++q) dst[q] = g * src[q] + be;
    }
  return make_op(std::move(out), {x, gamma, beta}, [B, C, n](detail::Node& nd) {
    const Tensor &vx = nd.parents[0]->value, &vg = nd.parents[1]->value;
    if (nd.parents[0]->requires_grad) {
      Tensor g(vx.shape());
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          const real gm = vg.at(b, c);
          const real* gy = nd.grad.data() + ((b * C + c) * n);
          real* dst = g.data() + ((b * C + c) * n);
          for (int64_t q = 0; q < n; ++q) dst[q] = gy[q] * gm;
        }
      nd.parents[0]->accumulate(g);
    }
    if (nd.parents[1]->requires_grad) {
      Tensor g({B, C});
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          const real* gy = nd.grad.data() + ((b * C + c) * n);
          const real* src = vx.data() + ((b * C + c) * n);
          real s = 0;
          for (int64_t q = 0; q < n; ++q) s += gy[q] * src[q];
          g.at(b, c) = s;
        }
      nd.parents[1]->accumulate(g);
    }
    if (nd.parents[2]->requires_grad) {
      Tensor g({B, C});
      for (int64_t b = 0; b < B; ++b)
        for (int64_t c = 0; c < C; ++c) {
          const real* gy = nd.grad.data() + ((b * C + c) * n);
          real s = 0;
          for (int64_t q = 0; q < n; ++q) s += gy[q];
          g.at(b, c) = s;
        }
      nd.parents[2]->accumulate(g);
    }
  });
}

Variable global_avg_pool(const Variable& x) {
  check_4d(x, "global_avg_pool");
  const int64_t B = x.shape()[0], C = x.shape()[1], n = x.shape()[2] * x.shape()[3];
  Tensor out({B, C});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const real* src = x.value().data() + ((b * C + c) * n);
      real s = 0;
      for (int64_t q = 0; q < n; ++q) s += src[q];
      out.at(b, c) = s / static_cast<real>(n);
    }
  return make_op(std::move(out), {x}, [B, C, n](detail::Node& nd) {
    Tensor g(nd.parents[0]->value.shape());
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c) {
        const real v = nd.grad.at(b, c) / static_cast<real>(n);
        real* dst = g.data() + ((b * C + c) * n);
        for (int64_t q = 0; q < n; ++q) dst[q] = v;
      }
    nd.parents[0]->accumulate(g);
  });
}

Variable global_max_pool(const Variable& x) {
  check_4d(x, "global_max_pool");
  const int64_t B = x.shape()[0], C = x.shape()[1], n = x.shape()[2] * x.shape()[3];
  Tensor out({B, C});
  std::vector<int64_t> argmax(static_cast<size_t>(B * C));
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c) {
      const real* src = x.value().data() + ((b * C + c) * n);
      int64_t best = 0;
      for (int64_t q = 1; q < n; ++q)
        if (src[q] > src[best]) best = q;
      out.at(b, c) = src[best];
      argmax[static_cast<size_t>(b * C + c)] = best;
    }
  return make_op(std::move(out), {x}, [B, C, n, argmax = std::move(argmax)](detail::Node& nd) {
    Tensor g(nd.parents[0]->value.shape());
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        g.data()[(b * C + c) * n + argmax[static_cast<size_t>(b * C + c)]] = nd.grad.at(b, c);
    nd.parents[0]->accumulate(g);
  });
}

Variable upsample_nearest2(const Variable& x) {
  check_4d(x, "upsample_nearest2");
  const int64_t B = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
  Tensor out({B, C, 2 * H, 2 * W});
  for (int64_t b = 0; b < B; ++b)
    for (int64_t c = 0; c < C; ++c)
      for (int64_t h = 0; h < H; ++h)
        for (int64_t w = 0; w < W; ++w) {
          const real v = x.value().at(b, c, h, w);
          out.at(b, c, 2 * h, 2 * w) = v;
          out.at(b, c, 2 * h, 2 * w + 1) = v;
          out.at(b, c, 2 * h + 1, 2 * w) = v;
          out.at(b, c, 2 * h + 1, 2 * w + 1) = v;
        }
  return make_op(std::move(out), {x}, [B, C, H, W](detail::Node& nd) {
    Tensor g({B, C, H, W});
    for (int64_t b = 0; b < B; ++b)
      for (int64_t c = 0; c < C; ++c)
        for (int64_t h = 0; h < H; ++h)
          for (int64_t w = 0; w < W; ++w)
            g.at(b, c, h, w) = nd.grad.at(b, c, 2 * h, 2 * w) + nd.grad.at(b, c, 2 * h, 2 * w + 1) +
                               nd.grad.at(b, c, 2 * h + 1, 2 * w) +
                               nd.grad.at(b, c, 2 * h + 1, 2 * w + 1);
    nd.parents[0]->accumulate(g);
  });
}

Variable gather_spatial(const Variable& x, std::vector<SpatialSite> sites) {
  check_4d(x, "gather_spatial");
  const int64_t C = x.shape()[1];
  const int64_t L = static_cast<int64_t>(sites.size());
  for (const auto& s : sites) {
    if (s.b < 0 || s.b >= x.shape()[0] || s.h < 0 || s.h >= x.shape()[2] || s.w < 0 ||
        s.w >= x.shape()[3]) {
      throw std::invalid_argument("gather_spatial: site out of range");
    }
  }
  Tensor out({L, C});
  for (int64_t l = 0; l < L; ++l)
    for (int64_t c = 0; c < C; ++c) out.at(l, c) = x.value().at(sites[l].b, c, sites[l].h, sites[l].w);
  return make_op(std::move(out), {x}, [C, L, sites = std::move(sites)](detail::Node& nd) {
    Tensor g(nd.parents[0]->value.shape());
    for (int64_t l = 0; l < L; ++l)
      for (int64_t c = 0; c < C; ++c) g.at(sites[l].b, c, sites[l].h, sites[l].w) += nd.grad.at(l, c);
    nd.parents[0]->accumulate(g);
  });
}

}  // namespace ucast
