#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// Every tensor is rank <= 2 (vectors are 1 x n). Binary elementwise ops
// broadcast an operand whose extent is 1 along a dimension. Graphs are built
// eagerly; backward() walks the graph reachable from a scalar loss and
// accumulates into leaf gradients until zero_grad().

#include <Eigen/Core>

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace hfrl::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct Node {
  Matrix value;
  Matrix grad;  // empty until a gradient reaches this node
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  template <typename Derived>
  void accumulate(const Eigen::MatrixBase<Derived>& g) {
    if (grad.size() == 0) {
      grad = g;
    } else {
      grad += g;
    }
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor constant(Matrix value);
  static Tensor parameter(Matrix value);
  static Tensor scalar(double v);
  static Tensor row(std::span<const double> values);

  bool defined() const { return static_cast<bool>(node_); }
  const Matrix& value() const { return node().value; }
  // Mutable access is for leaves only (optimizers, checkpoint loading).
  Matrix& mutable_value();

  bool requires_grad() const { return defined() && node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return defined() && node_->grad.size() != 0; }
  const Matrix& grad() const;
  void zero_grad();

  Index rows() const { return node().value.rows(); }
  Index cols() const { return node().value.cols(); }
  Index size() const { return node().value.size(); }
  double item() const;

  const std::shared_ptr<Node>& ptr() const { return node_; }
  Node& node() const;

  // Builds a non-leaf tensor. `backward` is only attached when some parent
  // requires a gradient and grad mode is enabled.
  static Tensor make(Matrix value, std::vector<Tensor> parents, std::function<void(Node&)> backward);

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph construction in scope (targets, acting, evaluation).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

void backward(const Tensor& loss);

// Parent gradient helper for custom ops.
inline bool wants_grad(const Node& self, std::size_t i) {
  return i < self.parents.size() && self.parents[i]->requires_grad;
}

Tensor detach(const Tensor& a);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor relu(const Tensor& a);
Tensor softsign(const Tensor& a);
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clip(const Tensor& a, double lo, double hi);

// Row-wise normalization; gamma/beta (1 x cols) are optional.
Tensor layer_norm(const Tensor& x, const Tensor& gamma = {}, const Tensor& beta = {}, double eps = 1e-5);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_rows(const Tensor& a);   // -> 1 x cols
Tensor mean_cols(const Tensor& a);  // -> rows x 1

// Ascending sort within each row; the gradient is routed back through the
// permutation to the pre-sort positions.
Tensor sort_rows(const Tensor& a);

Tensor slice_rows(const Tensor& a, Index start, Index count);
Tensor slice_cols(const Tensor& a, Index start, Index count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);
Tensor reshape(const Tensor& a, Index rows, Index cols);

Tensor operator+(const Tensor& a, const Tensor& b);
Tensor operator-(const Tensor& a, const Tensor& b);
Tensor operator*(const Tensor& a, const Tensor& b);

std::string shape_string(const Tensor& t);

}  // namespace hfrl::ad
