#pragma once

// Reverse-mode automatic differentiation on dense double matrices.
//
// The graph is rebuilt per forward pass (dynamic tape). Nodes that do not
// require gradients are constants: backward never visits them, so a loss
// built with some parameters bound as constants has exactly-zero gradients
// for those parameters, not merely small ones. The gradient-routing
// guarantees rely on this.

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "had/common.hpp"

namespace had::ad {

struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
  Mat val;
  Mat grad;  // allocated lazily during backward
  bool requires_grad = false;
  std::vector<Var> parents;
  std::function<void(Node&)> back;

  void accumulate(const Mat& g) {
    if (grad.size() == 0) grad = Mat::Zero(val.rows(), val.cols());
    grad += g;
  }
  const Mat& grad_or_zero() {
    if (grad.size() == 0) grad = Mat::Zero(val.rows(), val.cols());
    return grad;
  }
};

inline Var constant(Mat v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  return n;
}

inline Var constant_scalar(double v) { return constant(Mat::Constant(1, 1, v)); }

inline Var leaf(Mat v) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  n->requires_grad = true;
  return n;
}

inline Var make_op(Mat v, std::vector<Var> parents, std::function<void(Node&)> back) {
  auto n = std::make_shared<Node>();
  n->val = std::move(v);
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->back = std::move(back);
  }
  return n;
}

// --------------------------------------------------------------------------
// Elementwise and structural ops
// --------------------------------------------------------------------------

inline Var add(const Var& a, const Var& b) {
  return make_op(a->val + b->val, {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad);
    if (b->requires_grad) b->accumulate(n.grad);
  });
}

inline Var sub(const Var& a, const Var& b) {
  return make_op(a->val - b->val, {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad);
    if (b->requires_grad) b->accumulate(-n.grad);
  });
}

inline Var hadamard(const Var& a, const Var& b) {
  return make_op(a->val.cwiseProduct(b->val), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad.cwiseProduct(b->val));
    if (b->requires_grad) b->accumulate(n.grad.cwiseProduct(a->val));
  });
}

inline Var hadamard_const(const Var& a, const Mat& c) {
  return make_op(a->val.cwiseProduct(c), {a}, [a, c](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad.cwiseProduct(c));
  });
}

inline Var scale(const Var& a, double c) {
  return make_op(a->val * c, {a}, [a, c](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad * c);
  });
}

inline Var add_scalar(const Var& a, double c) {
  return make_op(a->val.array() + c, {a}, [a](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad);
  });
}

inline Var matmul(const Var& a, const Var& b) {
  return make_op(a->val * b->val, {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad * b->val.transpose());
    if (b->requires_grad) b->accumulate(a->val.transpose() * n.grad);
  });
}

inline Var transpose(const Var& a) {
  return make_op(a->val.transpose(), {a}, [a](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad.transpose());
  });
}

/// Broadcast-add a 1 x d row vector to every row of an n x d matrix.
inline Var add_rowvec(const Var& a, const Var& b) {
  Mat v = a->val;
  v.rowwise() += Eigen::RowVectorXd(b->val.row(0));
  return make_op(std::move(v), {a, b}, [a, b](Node& n) {
    if (a->requires_grad) a->accumulate(n.grad);
    if (b->requires_grad) b->accumulate(n.grad.colwise().sum());
  });
}

/// Multiply a matrix by a 1x1 scalar variable.
inline Var scalar_mul(const Var& s, const Var& a) {
  return make_op(s->val(0, 0) * a->val, {s, a}, [s, a](Node& n) {
    if (s->requires_grad) {
      Mat g(1, 1);
      g(0, 0) = n.grad.cwiseProduct(a->val).sum();
      s->accumulate(g);
    }
    if (a->requires_grad) a->accumulate(s->val(0, 0) * n.grad);
  });
}

inline Var mean_rows(const Var& a) {
  Mat v = a->val.colwise().mean();
  Eigen::Index rows = a->val.rows();
  return make_op(std::move(v), {a}, [a, rows](Node& n) {
    if (a->requires_grad)
      a->accumulate(Mat::Ones(rows, 1) * (n.grad / static_cast<double>(rows)));
  });
}

inline Var sum_all(const Var& a) {
  Mat v(1, 1);
  v(0, 0) = a->val.sum();
  return make_op(std::move(v), {a}, [a](Node& n) {
    if (a->requires_grad)
      a->accumulate(Mat::Constant(a->val.rows(), a->val.cols(), n.grad(0, 0)));
  });
}

inline Var slice_cols(const Var& a, Eigen::Index c0, Eigen::Index ncols) {
  return make_op(a->val.middleCols(c0, ncols), {a, }, [a, c0, ncols](Node& n) {
    if (a->requires_grad) {
      Mat g = Mat::Zero(a->val.rows(), a->val.cols());
      g.middleCols(c0, ncols) = n.grad;
      a->accumulate(g);
    }
  });
}

/// Stack variables vertically (all must share the column count).
inline Var vstack(const std::vector<Var>& parts) {
  Eigen::Index rows = 0;
  for (const auto& p : parts) rows += p->val.rows();
  Mat v(rows, parts.front()->val.cols());
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    v.middleRows(r, p->val.rows()) = p->val;
    r += p->val.rows();
  }
  return make_op(std::move(v), parts, [parts](Node& n) {
    Eigen::Index r = 0;
    for (const auto& p : parts) {
      if (p->requires_grad) p->accumulate(n.grad.middleRows(r, p->val.rows()));
      r += p->val.rows();
    }
  });
}

// --------------------------------------------------------------------------
// Row-wise nonlinear ops
// --------------------------------------------------------------------------

inline Var row_softmax(const Var& a) {
  Mat y = softmax_rows(a->val);
  return make_op(y, {a}, [a, y](Node& n) {
    if (!a->requires_grad) return;
    Mat g(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double dot = n.grad.row(r).cwiseProduct(y.row(r)).sum();
      g.row(r) = y.row(r).array() * (n.grad.row(r).array() - dot);
    }
    a->accumulate(g);
  });
}

inline Var row_log_softmax(const Var& a) {
  Mat y(a->val.rows(), a->val.cols());
  for (Eigen::Index r = 0; r < a->val.rows(); ++r) {
    double mx = a->val.row(r).maxCoeff();
    double lse = std::log((a->val.row(r).array() - mx).exp().sum()) + mx;
    y.row(r) = a->val.row(r).array() - lse;
  }
  return make_op(y, {a}, [a, y](Node& n) {
    if (!a->requires_grad) return;
    Mat p = y.array().exp();
    Mat g(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      double s = n.grad.row(r).sum();
      g.row(r) = n.grad.row(r) - p.row(r) * s;
    }
    a->accumulate(g);
  });
}

/// Per-row layer normalization with learnable gain/bias (1 x d each).
inline Var layer_norm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
  Eigen::Index rows = x->val.rows(), d = x->val.cols();
  Mat xhat(rows, d);
  std::vector<double> inv_std(static_cast<size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    double mu = x->val.row(r).mean();
    double var = (x->val.row(r).array() - mu).square().mean();
    double s = 1.0 / std::sqrt(var + eps);
    inv_std[static_cast<size_t>(r)] = s;
    xhat.row(r) = (x->val.row(r).array() - mu) * s;
  }
  Mat out = xhat;
  for (Eigen::Index r = 0; r < rows; ++r)
    out.row(r) = out.row(r).cwiseProduct(gain->val.row(0)) + bias->val.row(0);
  return make_op(std::move(out), {x, gain, bias}, [x, gain, bias, xhat, inv_std](Node& n) {
    Eigen::Index rows = x->val.rows(), d = x->val.cols();
    if (gain->requires_grad) gain->accumulate(n.grad.cwiseProduct(xhat).colwise().sum());
    if (bias->requires_grad) bias->accumulate(n.grad.colwise().sum());
    if (x->requires_grad) {
      Mat g(rows, d);
      for (Eigen::Index r = 0; r < rows; ++r) {
        Eigen::RowVectorXd dxhat = n.grad.row(r).cwiseProduct(gain->val.row(0));
        double m1 = dxhat.mean();
        double m2 = dxhat.cwiseProduct(xhat.row(r)).mean();
        g.row(r) = inv_std[static_cast<size_t>(r)] *
                   (dxhat.array() - m1 - xhat.row(r).array() * m2);
      }
      x->accumulate(g);
    }
  });
}

/// Normalize every row to unit L2 norm, with the norm clamped below at eps.
inline Var l2_normalize_rows(const Var& x, double eps) {
  Eigen::Index rows = x->val.rows();
  Mat out(rows, x->val.cols());
  std::vector<double> norms(static_cast<size_t>(rows));
  std::vector<bool> clamped(static_cast<size_t>(rows));
  for (Eigen::Index r = 0; r < rows; ++r) {
    double nrm = x->val.row(r).norm();
    bool cl = nrm < eps;
    double denom = cl ? eps : nrm;
    norms[static_cast<size_t>(r)] = denom;
    clamped[static_cast<size_t>(r)] = cl;
    out.row(r) = x->val.row(r) / denom;
  }
  return make_op(std::move(out), {x}, [x, norms, clamped](Node& n) {
    if (!x->requires_grad) return;
    Mat g(x->val.rows(), x->val.cols());
    for (Eigen::Index r = 0; r < x->val.rows(); ++r) {
      double denom = norms[static_cast<size_t>(r)];
      if (clamped[static_cast<size_t>(r)]) {
        g.row(r) = n.grad.row(r) / denom;
      } else {
        Eigen::RowVectorXd xr = x->val.row(r);
        double dot = n.grad.row(r).cwiseProduct(xr).sum();
        g.row(r) = n.grad.row(r) / denom - xr * (dot / (denom * denom * denom));
      }
    }
    x->accumulate(g);
  });
}

/// Mean cross-entropy of logits (b x c) against integer labels.
inline Var cross_entropy_mean(const Var& logits, const std::vector<int>& labels) {
  Eigen::Index b = logits->val.rows();
  Mat probs = softmax_rows(logits->val);
  double loss = 0.0;
  for (Eigen::Index r = 0; r < b; ++r) {
    double mx = logits->val.row(r).maxCoeff();
    double lse = std::log((logits->val.row(r).array() - mx).exp().sum()) + mx;
    loss += lse - logits->val(r, labels[static_cast<size_t>(r)]);
  }
  loss /= static_cast<double>(b);
  Mat v(1, 1);
  v(0, 0) = loss;
  return make_op(std::move(v), {logits}, [logits, probs, labels](Node& n) {
    if (!logits->requires_grad) return;
    Eigen::Index b = probs.rows();
    Mat g = probs;
    for (Eigen::Index r = 0; r < b; ++r) g(r, labels[static_cast<size_t>(r)]) -= 1.0;
    logits->accumulate(g * (n.grad(0, 0) / static_cast<double>(b)));
  });
}

// --------------------------------------------------------------------------
// Backward pass
// --------------------------------------------------------------------------

/// Run reverse-mode accumulation from a 1x1 root. Gradients land in the
/// `grad` member of every reachable node with requires_grad set.
inline void backward(const Var& root) {
  if (root->val.rows() != 1 || root->val.cols() != 1)
    fail("internal", "backward requires a scalar root");
  if (!root->requires_grad) return;

  // iterative post-order DFS over grad-requiring nodes
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad = Mat::Ones(1, 1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->back && n->grad.size() != 0) n->back(*n);
  }
}

}  // namespace had::ad
