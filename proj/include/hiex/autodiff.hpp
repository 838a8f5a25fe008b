#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <unordered_set>

#include "hiex/common.hpp"

namespace hiex::ad {

// Minimal reverse-mode differentiation over dense matrices. Rows are batch
// samples, columns are features. A Var holds a shared tape node; calling
// backward() on a 1x1 result accumulates d(result)/d(node) into every
// reachable node's grad.

using Mat = Eigen::MatrixXd;

struct TapeNode {
  Mat value;
  Mat grad;  // same shape, lazily zero-initialized
  std::vector<std::shared_ptr<TapeNode>> parents;
  std::function<void(TapeNode&)> backprop;  // pushes grad into parents

  explicit TapeNode(Mat v) : value(std::move(v)) {}
  void ensure_grad() {
    if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(Mat v) : node_(std::make_shared<TapeNode>(std::move(v))) {}
  static Var constant(double x) { return Var(Mat::Constant(1, 1, x)); }

  const Mat& value() const { return node_->value; }
  const Mat& grad() const { return node_->grad; }
  std::shared_ptr<TapeNode> node() const { return node_; }
  long rows() const { return node_->value.rows(); }
  long cols() const { return node_->value.cols(); }

  /// Reverse sweep from a scalar (1x1) result.
  void backward() const {
    require(rows() == 1 && cols() == 1, "backward() needs a scalar result");
    std::vector<TapeNode*> order;
    std::unordered_set<TapeNode*> seen;
    std::function<void(TapeNode*)> visit = [&](TapeNode* n) {
      if (seen.count(n)) return;
      seen.insert(n);
      for (auto& p : n->parents) visit(p.get());
      order.push_back(n);
    };
    visit(node_.get());
    for (TapeNode* n : order) n->ensure_grad();
    node_->grad(0, 0) = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
      if ((*it)->backprop) (*it)->backprop(**it);
  }

 private:
  std::shared_ptr<TapeNode> node_;
};

namespace detail {
inline Var make(Mat value, std::vector<Var> parents,
                std::function<void(TapeNode&)> backprop) {
  Var out(std::move(value));
  for (auto& p : parents) out.node()->parents.push_back(p.node());
  out.node()->backprop = std::move(backprop);
  return out;
}
}  // namespace detail

inline Var matmul(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  return detail::make(an->value * bn->value, {a, b}, [an, bn](TapeNode& o) {
    an->ensure_grad();
    bn->ensure_grad();
    an->grad.noalias() += o.grad * bn->value.transpose();
    bn->grad.noalias() += an->value.transpose() * o.grad;
  });
}

inline Var add(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  return detail::make(an->value + bn->value, {a, b}, [an, bn](TapeNode& o) {
    an->ensure_grad();
    bn->ensure_grad();
    an->grad += o.grad;
    bn->grad += o.grad;
  });
}

inline Var sub(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  return detail::make(an->value - bn->value, {a, b}, [an, bn](TapeNode& o) {
    an->ensure_grad();
    bn->ensure_grad();
    an->grad += o.grad;
    bn->grad -= o.grad;
  });
}

/// Add a 1 x C row vector to every row of a.
inline Var add_rowvec(const Var& a, const Var& bias) {
  auto an = a.node(), bn = bias.node();
  return detail::make(an->value.rowwise() + bn->value.row(0), {a, bias},
                      [an, bn](TapeNode& o) {
                        an->ensure_grad();
                        bn->ensure_grad();
                        an->grad += o.grad;
                        bn->grad.row(0) += o.grad.colwise().sum();
                      });
}

inline Var mul(const Var& a, const Var& b) {
  auto an = a.node(), bn = b.node();
  return detail::make(an->value.cwiseProduct(bn->value), {a, b},
                      [an, bn](TapeNode& o) {
                        an->ensure_grad();
                        bn->ensure_grad();
                        an->grad += o.grad.cwiseProduct(bn->value);
                        bn->grad += o.grad.cwiseProduct(an->value);
                      });
}

inline Var scale(const Var& a, double k) {
  auto an = a.node();
  return detail::make(an->value * k, {a}, [an, k](TapeNode& o) {
    an->ensure_grad();
    an->grad += o.grad * k;
  });
}

inline Var tanh(const Var& a) {
  auto an = a.node();
  Mat t = an->value.array().tanh();
  return detail::make(t, {a}, [an, t](TapeNode& o) {
    an->ensure_grad();
    an->grad.array() += o.grad.array() * (1.0 - t.array().square());
  });
}

/// log(1 + exp(x)), numerically stable; derivative is the logistic.
inline Var softplus(const Var& a) {
  auto an = a.node();
  Mat s = an->value.unaryExpr([](double x) {
    return x > 30.0 ? x : std::log1p(std::exp(std::min(x, 30.0)));
  });
  return detail::make(s, {a}, [an](TapeNode& o) {
    an->ensure_grad();
    an->grad.array() +=
        o.grad.array() * an->value.array().unaryExpr([](double x) {
          return 1.0 / (1.0 + std::exp(-x));
        });
  });
}

inline Var relu(const Var& a) {
  auto an = a.node();
  return detail::make(an->value.cwiseMax(0.0), {a}, [an](TapeNode& o) {
    an->ensure_grad();
    an->grad.array() +=
        o.grad.array() * (an->value.array() > 0.0).cast<double>();
  });
}

inline Var log(const Var& a) {
  auto an = a.node();
  return detail::make(an->value.array().log().matrix(), {a}, [an](TapeNode& o) {
    an->ensure_grad();
    an->grad.array() += o.grad.array() / an->value.array();
  });
}

inline Var square(const Var& a) { return mul(a, a); }

inline Var sum(const Var& a) {
  auto an = a.node();
  return detail::make(Mat::Constant(1, 1, an->value.sum()), {a},
                      [an](TapeNode& o) {
                        an->ensure_grad();
                        an->grad.array() += o.grad(0, 0);
                      });
}

inline Var mean(const Var& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.rows() * a.cols()));
}

/// Single entry as a scalar Var.
inline Var at(const Var& a, long r, long c) {
  auto an = a.node();
  return detail::make(Mat::Constant(1, 1, an->value(r, c)), {a},
                      [an, r, c](TapeNode& o) {
                        an->ensure_grad();
                        an->grad(r, c) += o.grad(0, 0);
                      });
}

inline Var cwise_inverse(const Var& a) {
  auto an = a.node();
  return detail::make(an->value.cwiseInverse(), {a}, [an](TapeNode& o) {
    an->ensure_grad();
    an->grad.array() -=
        o.grad.array() / (an->value.array() * an->value.array());
  });
}

inline Var div(const Var& a, const Var& b) { return mul(a, cwise_inverse(b)); }

}  // namespace hiex::ad
