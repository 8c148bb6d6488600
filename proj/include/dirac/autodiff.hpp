#pragma once

#include "dirac/types.hpp"

#include <cstddef>
#include <functional>
#include <vector>

namespace dirac::ad {

class Tape;

/// Handle to a matrix-valued node on a Tape. Batched quantities keep one
/// sample per column.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  const Mat& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Reverse-mode tape. Nodes are appended in evaluation order, so a single
/// reverse sweep visits every node after all of its consumers.
class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat& grad)>;

  Var constant(Mat value);
  Var parameter(Mat value);
  Var push(Mat value, bool requires_grad, Backward backward);

  const Mat& value(const Var& v) const { return nodes_[v.id()].value; }
  bool requires_grad(const Var& v) const { return nodes_[v.id()].requires_grad; }

  /// Accumulated gradient of the last backward() root; zero if unreached.
  Mat grad(const Var& v) const;
  void accumulate(const Var& v, const Mat& g);

  /// Seeds d(root)/d(root) = 1 for a 1×1 root and sweeps the tape.
  void backward(const Var& root);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    Backward backward;
  };
  std::vector<Node> nodes_;
};

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var operator+(const Var& a, const Var& b);
Var operator-(const Var& a, const Var& b);
Var operator-(const Var& a);
Var operator*(double s, const Var& a);
Var hadamard(const Var& a, const Var& b);
/// s·a + c, entrywise.
Var affine(const Var& a, double s, double c);
/// a + b·1ᵀ for a column vector b.
Var add_bias(const Var& a, const Var& b);
/// diag(s)·a for a column vector s.
Var scale_rows(const Var& a, const Var& s);
Var scale_rows(const Var& a, const Vec& s);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var rows(const Var& a, Index start, Index count);
Var vstack(const std::vector<Var>& parts);
/// Σ a_ij², as 1×1.
Var sum_squares(const Var& a);
/// Σ_j w_j ‖a_{:,j}‖² for a fixed column weight vector, as 1×1.
Var weighted_column_sum_squares(const Var& a, const Vec& w);

}  // namespace dirac::ad
