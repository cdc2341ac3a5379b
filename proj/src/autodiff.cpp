#include "hfrl/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <unordered_set>

namespace hfrl::ad {

namespace {

thread_local bool g_grad_enabled = true;

struct BroadcastShape {
  Index rows;
  Index cols;
};

BroadcastShape broadcast_shape(const Matrix& a, const Matrix& b, const char* op) {
  auto dim = [&](Index x, Index y) -> Index {
    if (x == y) return x;
    if (x == 1) return y;
    if (y == 1) return x;
    throw ShapeError(std::string(op) + ": incompatible shapes (" + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + ") and (" + std::to_string(b.rows()) + "x" + std::to_string(b.cols()) +
                     ")");
  };
  return {dim(a.rows(), b.rows()), dim(a.cols(), b.cols())};
}

// out(i, j) = f(a(i', j'), b(i'', j'')) where extent-1 dimensions broadcast.
template <typename F>
Matrix broadcast_apply(const Matrix& a, const Matrix& b, BroadcastShape s, F f) {
  Matrix out(s.rows, s.cols);
  const bool a_rows = a.rows() == s.rows;
  const bool a_cols = a.cols() == s.cols;
  const bool b_rows = b.rows() == s.rows;
  const bool b_cols = b.cols() == s.cols;
  for (Index r = 0; r < s.rows; ++r) {
    const double* pa = a.data() + (a_rows ? r : 0) * a.cols();
    const double* pb = b.data() + (b_rows ? r : 0) * b.cols();
    double* po = out.data() + r * s.cols;
    if (a_cols && b_cols) {
      for (Index c = 0; c < s.cols; ++c) po[c] = f(pa[c], pb[c]);
    } else if (a_cols) {
      const double y = pb[0];
      for (Index c = 0; c < s.cols; ++c) po[c] = f(pa[c], y);
    } else if (b_cols) {
      const double x = pa[0];
      for (Index c = 0; c < s.cols; ++c) po[c] = f(x, pb[c]);
    } else {
      const double v = f(pa[0], pb[0]);
      for (Index c = 0; c < s.cols; ++c) po[c] = v;
    }
  }
  return out;
}

Matrix reduce_to(const Matrix& g, Index r, Index c) {
  if (g.rows() == r && g.cols() == c) return g;
  if (r == 1 && c == 1) return Matrix::Constant(1, 1, g.sum());
  if (r == 1) return g.colwise().sum();
  return g.rowwise().sum();
}

template <typename Derived>
void accumulate_reduced(Node& p, const Eigen::MatrixBase<Derived>& g) {
  if (g.rows() == p.value.rows() && g.cols() == p.value.cols()) {
    p.accumulate(g);
  } else {
    p.accumulate(reduce_to(g, p.value.rows(), p.value.cols()));
  }
}

template <typename F, typename D>
Tensor unary(const Tensor& a, F&& f, D&& df) {
  Matrix out = a.value().unaryExpr(f);
  return Tensor::make(std::move(out), {a}, [df](Node& self) {
    const Matrix& x = self.parents[0]->value;
    self.parents[0]->accumulate(self.grad.cwiseProduct(x.unaryExpr(df)));
  });
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Tensor Tensor::constant(Matrix value) {
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->value = std::move(value);
  return t;
}

Tensor Tensor::parameter(Matrix value) {
  Tensor t = constant(std::move(value));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

Tensor Tensor::row(std::span<const double> values) {
  Matrix m(1, static_cast<Index>(values.size()));
  for (std::size_t i = 0; i < values.size(); ++i) m(0, static_cast<Index>(i)) = values[i];
  return constant(std::move(m));
}

Node& Tensor::node() const {
  if (!node_) throw std::logic_error("use of an undefined tensor");
  return *node_;
}

Matrix& Tensor::mutable_value() {
  if (!node().leaf) throw std::logic_error("mutable_value on a non-leaf tensor");
  return node_->value;
}

void Tensor::set_requires_grad(bool on) {
  if (!node().leaf) throw std::logic_error("set_requires_grad on a non-leaf tensor");
  node_->requires_grad = on;
}

const Matrix& Tensor::grad() const {
  if (!has_grad()) throw std::logic_error("gradient requested before backward reached this tensor");
  return node_->grad;
}

void Tensor::zero_grad() {
  // Leaf buffers are kept allocated; large hypernetwork heads would otherwise
  // be re-faulted on every backward pass.
  if (defined() && node_->grad.size() != 0) node_->grad.setZero();
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on a tensor of shape " + shape_string(*this));
  return value()(0, 0);
}

Tensor Tensor::make(Matrix value, std::vector<Tensor> parents, std::function<void(Node&)> backward) {
  Tensor t;
  t.node_ = std::make_shared<Node>();
  t.node_->value = std::move(value);
  t.node_->leaf = false;
  if (!g_grad_enabled) return t;
  const bool any = std::any_of(parents.begin(), parents.end(), [](const Tensor& p) { return p.requires_grad(); });
  if (!any) return t;
  t.node_->requires_grad = true;
  t.node_->parents.reserve(parents.size());
  for (auto& p : parents) t.node_->parents.push_back(p.ptr());
  t.node_->backward = std::move(backward);
  return t;
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw std::logic_error("backward on an undefined tensor");
  if (loss.size() != 1) throw ShapeError("backward requires a scalar loss, got " + shape_string(loss));
  if (!loss.requires_grad()) throw std::logic_error("backward on a tensor that does not require grad");

  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.ptr().get(), 0}};
  seen.insert(loss.ptr().get());
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  loss.ptr()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->leaf || !n->backward || n->grad.size() == 0) continue;
    n->backward(*n);
    n->grad.resize(0, 0);
  }
}

Tensor detach(const Tensor& a) { return Tensor::constant(a.value()); }

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: " + shape_string(a) + " x " + shape_string(b));
  Matrix out = a.value() * b.value();
  return Tensor::make(std::move(out), {a, b}, [](Node& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) {
      if (A.grad.size() == 0) A.grad = Matrix::Zero(A.value.rows(), A.value.cols());
      A.grad.noalias() += self.grad * B.value.transpose();
    }
    if (B.requires_grad) {
      if (B.grad.size() == 0) B.grad = Matrix::Zero(B.value.rows(), B.value.cols());
      B.grad.noalias() += A.value.transpose() * self.grad;
    }
  });
}

Tensor transpose(const Tensor& a) {
  Matrix out = a.value().transpose();
  return Tensor::make(std::move(out), {a}, [](Node& self) { self.parents[0]->accumulate(self.grad.transpose()); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  const auto s = broadcast_shape(a.value(), b.value(), "add");
  Matrix out = broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x + y; });
  return Tensor::make(std::move(out), {a, b}, [](Node& self) {
    for (auto& p : self.parents) {
      if (p->requires_grad) accumulate_reduced(*p, self.grad);
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  const auto s = broadcast_shape(a.value(), b.value(), "sub");
  Matrix out = broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x - y; });
  return Tensor::make(std::move(out), {a, b}, [](Node& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) accumulate_reduced(A, self.grad);
    if (B.requires_grad) accumulate_reduced(B, -self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  const auto s = broadcast_shape(a.value(), b.value(), "mul");
  Matrix out = broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x * y; });
  return Tensor::make(std::move(out), {a, b}, [s](Node& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    const auto prod = [](double x, double y) { return x * y; };
    if (A.requires_grad) accumulate_reduced(A, broadcast_apply(self.grad, B.value, s, prod));
    if (B.requires_grad) accumulate_reduced(B, broadcast_apply(self.grad, A.value, s, prod));
  });
}

Tensor div(const Tensor& a, const Tensor& b) {
  const auto s = broadcast_shape(a.value(), b.value(), "div");
  Matrix out = broadcast_apply(a.value(), b.value(), s, [](double x, double y) { return x / y; });
  return Tensor::make(std::move(out), {a, b}, [s](Node& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) {
      accumulate_reduced(A, broadcast_apply(self.grad, B.value, s, [](double g, double y) { return g / y; }));
    }
    if (B.requires_grad) {
      // d(a/b)/db = -(a/b) / b, with a/b the forward output.
      const Matrix q = broadcast_apply(self.value, B.value, s, [](double o, double y) { return -o / y; });
      accumulate_reduced(B, self.grad.cwiseProduct(q));
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  Matrix out = a.value() * s;
  return Tensor::make(std::move(out), {a}, [s](Node& self) { self.parents[0]->accumulate(self.grad * s); });
}

Tensor add_scalar(const Tensor& a, double s) {
  Matrix out = a.value().array() + s;
  return Tensor::make(std::move(out), {a}, [](Node& self) { self.parents[0]->accumulate(self.grad); });
}

Tensor neg(const Tensor& a) { return scale(a, -1.0); }

Tensor relu(const Tensor& a) {
  return unary(
      a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor softsign(const Tensor& a) {
  return unary(
      a, [](double x) { return x / (1.0 + std::abs(x)); },
      [](double x) {
        const double d = 1.0 + std::abs(x);
        return 1.0 / (d * d);
      });
}

Tensor sin(const Tensor& a) {
  return unary(
      a, [](double x) { return std::sin(x); }, [](double x) { return std::cos(x); });
}

Tensor cos(const Tensor& a) {
  return unary(
      a, [](double x) { return std::cos(x); }, [](double x) { return -std::sin(x); });
}

Tensor exp(const Tensor& a) {
  Matrix out = a.value().array().exp();
  return Tensor::make(out, {a}, [](Node& self) { self.parents[0]->accumulate(self.grad.cwiseProduct(self.value)); });
}

Tensor sqrt(const Tensor& a) {
  Matrix out = a.value().array().sqrt();
  return Tensor::make(out, {a}, [](Node& self) {
    self.parents[0]->accumulate((self.grad.array() / (2.0 * self.value.array())).matrix());
  });
}

Tensor square(const Tensor& a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Tensor clip(const Tensor& a, double lo, double hi) {
  if (lo > hi) throw std::invalid_argument("clip: lo > hi");
  return unary(
      a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Index r = x.rows();
  const Index c = x.cols();
  if (gamma.defined() && (gamma.rows() != 1 || gamma.cols() != c)) throw ShapeError("layer_norm: gamma shape");
  if (beta.defined() && (beta.rows() != 1 || beta.cols() != c)) throw ShapeError("layer_norm: beta shape");
  Matrix xhat(r, c);
  Eigen::VectorXd inv_std(r);
  for (Index i = 0; i < r; ++i) {
    const double mu = x.value().row(i).mean();
    const double var = (x.value().row(i).array() - mu).square().mean();
    inv_std(i) = 1.0 / std::sqrt(var + eps);
    xhat.row(i) = (x.value().row(i).array() - mu) * inv_std(i);
  }
  Matrix out = xhat;
  if (gamma.defined()) out = out.array().rowwise() * gamma.value().row(0).array();
  if (beta.defined()) out = out.rowwise() + beta.value().row(0);

  std::vector<Tensor> parents{x};
  if (gamma.defined()) parents.push_back(gamma);
  if (beta.defined()) parents.push_back(beta);
  const bool has_gamma = gamma.defined();
  const bool has_beta = beta.defined();
  return Tensor::make(std::move(out), parents, [xhat, inv_std, has_gamma, has_beta](Node& self) {
    std::size_t next = 1;
    Node* g = has_gamma ? self.parents[next++].get() : nullptr;
    Node* b = has_beta ? self.parents[next++].get() : nullptr;
    Node& xn = *self.parents[0];
    if (xn.requires_grad) {
      Matrix dxhat = self.grad;
      if (g) dxhat = dxhat.array().rowwise() * g->value.row(0).array();
      const Index cols = dxhat.cols();
      Matrix dx(dxhat.rows(), cols);
      for (Index i = 0; i < dxhat.rows(); ++i) {
        const double m1 = dxhat.row(i).mean();
        const double m2 = dxhat.row(i).dot(xhat.row(i)) / static_cast<double>(cols);
        dx.row(i) = (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2) * inv_std(i);
      }
      xn.accumulate(dx);
    }
    if (g && g->requires_grad) g->accumulate(self.grad.cwiseProduct(xhat).colwise().sum());
    if (b && b->requires_grad) b->accumulate(self.grad.colwise().sum());
  });
}

Tensor sum(const Tensor& a) {
  Matrix out = Matrix::Constant(1, 1, a.value().sum());
  return Tensor::make(std::move(out), {a}, [](Node& self) {
    auto& p = *self.parents[0];
    p.accumulate(Matrix::Constant(p.value.rows(), p.value.cols(), self.grad(0, 0)));
  });
}

Tensor mean(const Tensor& a) {
  const double n = static_cast<double>(a.size());
  if (n == 0) throw ShapeError("mean of an empty tensor");
  return scale(sum(a), 1.0 / n);
}

Tensor sum_rows(const Tensor& a) {
  Matrix out = a.value().colwise().sum();
  return Tensor::make(std::move(out), {a}, [](Node& self) {
    auto& p = *self.parents[0];
    p.accumulate(self.grad.replicate(p.value.rows(), 1));
  });
}

Tensor mean_cols(const Tensor& a) {
  const double n = static_cast<double>(a.cols());
  Matrix out = a.value().rowwise().mean();
  return Tensor::make(std::move(out), {a}, [n](Node& self) {
    auto& p = *self.parents[0];
    p.accumulate((self.grad / n).replicate(1, p.value.cols()));
  });
}

Tensor sort_rows(const Tensor& a) {
  const Index r = a.rows();
  const Index c = a.cols();
  std::vector<Index> perm(static_cast<std::size_t>(r * c));
  Matrix out(r, c);
  for (Index i = 0; i < r; ++i) {
    auto* p = perm.data() + i * c;
    std::iota(p, p + c, Index{0});
    const auto row = a.value().row(i);
    std::stable_sort(p, p + c, [&row](Index x, Index y) { return row(x) < row(y); });
    for (Index j = 0; j < c; ++j) out(i, j) = row(p[j]);
  }
  return Tensor::make(std::move(out), {a}, [perm, r, c](Node& self) {
    Matrix g = Matrix::Zero(r, c);
    for (Index i = 0; i < r; ++i) {
      for (Index j = 0; j < c; ++j) g(i, perm[static_cast<std::size_t>(i * c + j)]) += self.grad(i, j);
    }
    self.parents[0]->accumulate(g);
  });
}

Tensor slice_rows(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) throw ShapeError("slice_rows: out of range");
  Matrix out = a.value().middleRows(start, count);
  return Tensor::make(std::move(out), {a}, [start, count](Node& self) {
    auto& p = *self.parents[0];
    if (p.grad.size() == 0) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    p.grad.middleRows(start, count) += self.grad;
  });
}

Tensor slice_cols(const Tensor& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.cols()) throw ShapeError("slice_cols: out of range");
  Matrix out = a.value().middleCols(start, count);
  return Tensor::make(std::move(out), {a}, [start, count](Node& self) {
    auto& p = *self.parents[0];
    if (p.grad.size() == 0) p.grad = Matrix::Zero(p.value.rows(), p.value.cols());
    p.grad.middleCols(start, count) += self.grad;
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const Index c = parts.front().cols();
  Index r = 0;
  for (const auto& p : parts) {
    if (p.cols() != c) throw ShapeError("concat_rows: column mismatch");
    r += p.rows();
  }
  Matrix out(r, c);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleRows(off, p.rows()) = p.value();
    off += p.rows();
  }
  return Tensor::make(std::move(out), parts, [](Node& self) {
    Index o = 0;
    for (auto& p : self.parents) {
      const Index n = p->value.rows();
      if (p->requires_grad) p->accumulate(self.grad.middleRows(o, n));
      o += n;
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const Index r = parts.front().rows();
  Index c = 0;
  for (const auto& p : parts) {
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    c += p.cols();
  }
  Matrix out(r, c);
  Index off = 0;
  for (const auto& p : parts) {
    out.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return Tensor::make(std::move(out), parts, [](Node& self) {
    Index o = 0;
    for (auto& p : self.parents) {
      const Index n = p->value.cols();
      if (p->requires_grad) p->accumulate(self.grad.middleCols(o, n));
      o += n;
    }
  });
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  const Index c = a.cols();
  Matrix out(static_cast<Index>(index.size()), c);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (static_cast<Index>(index[i]) >= a.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(static_cast<Index>(index[i]));
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  return Tensor::make(std::move(out), {a}, [idx](Node& self) {
    auto& p = *self.parents[0];
    Matrix g = Matrix::Zero(p.value.rows(), p.value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) g.row(static_cast<Index>(idx[i])) += self.grad.row(static_cast<Index>(i));
    p.accumulate(g);
  });
}

Tensor reshape(const Tensor& a, Index rows, Index cols) {
  if (rows * cols != a.size()) throw ShapeError("reshape: size mismatch for " + shape_string(a));
  Matrix out = Eigen::Map<const Matrix>(a.value().data(), rows, cols);
  return Tensor::make(std::move(out), {a}, [](Node& self) {
    auto& p = *self.parents[0];
    p.accumulate(Eigen::Map<const Matrix>(self.grad.data(), p.value.rows(), p.value.cols()));
  });
}

Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }

std::string shape_string(const Tensor& t) {
  if (!t.defined()) return "(undefined)";
  return "(" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + ")";
}

}  // namespace hfrl::ad
