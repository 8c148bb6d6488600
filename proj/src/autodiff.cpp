#include "dirac/autodiff.hpp"

#include "dirac/errors.hpp"

#include <string>

namespace dirac::ad {

namespace {

Tape& tape_of(const Var& a) {
  if (a.tape() == nullptr) throw Error("autodiff: unbound variable");
  return *a.tape();
}

Tape& tape_of(const Var& a, const Var& b) {
  if (a.tape() != b.tape()) throw Error("autodiff: variables live on different tapes");
  return tape_of(a);
}

void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                         std::to_string(b.cols()));
}

}  // namespace

const Mat& Var::value() const { return tape_->value(*this); }
bool Var::requires_grad() const { return tape_->requires_grad(*this); }

Var Tape::constant(Mat value) { return push(std::move(value), false, nullptr); }

Var Tape::parameter(Mat value) { return push(std::move(value), true, nullptr); }

Var Tape::push(Mat value, bool requires_grad, Backward backward) {
  nodes_.push_back(Node{std::move(value), Mat(), requires_grad, requires_grad ? std::move(backward) : nullptr});
  return Var(this, nodes_.size() - 1);
}

Mat Tape::grad(const Var& v) const {
  const Node& n = nodes_[v.id()];
  if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::accumulate(const Var& v, const Mat& g) {
  Node& n = nodes_[v.id()];
  if (!n.requires_grad) return;
  if (n.grad.size() == 0)
    n.grad = g;
  else
    n.grad += g;
}

void Tape::backward(const Var& root) {
  if (root.rows() != 1 || root.cols() != 1) throw DimensionError("backward: root must be a scalar");
  for (Node& n : nodes_) n.grad.resize(0, 0);
  nodes_[root.id()].grad = Mat::Ones(1, 1);
  for (std::size_t i = root.id() + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.backward || n.grad.size() == 0) continue;
    const Mat g = n.grad;  // callbacks may grow other nodes' buffers
    n.backward(*this, g);
  }
}

Var matmul(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (a.cols() != b.rows()) throw DimensionError("matmul: inner dimensions differ");
  return t.push(a.value() * b.value(), a.requires_grad() || b.requires_grad(), [a, b](Tape& t, const Mat& g) {
    if (a.requires_grad()) t.accumulate(a, g * b.value().transpose());
    if (b.requires_grad()) t.accumulate(b, a.value().transpose() * g);
  });
}

Var transpose(const Var& a) {
  Tape& t = tape_of(a);
  return t.push(a.value().transpose(), a.requires_grad(),
                [a](Tape& t, const Mat& g) { t.accumulate(a, g.transpose()); });
}

Var operator+(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  same_shape(a, b, "add");
  return t.push(a.value() + b.value(), a.requires_grad() || b.requires_grad(), [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var operator-(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  same_shape(a, b, "sub");
  return t.push(a.value() - b.value(), a.requires_grad() || b.requires_grad(), [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var operator-(const Var& a) { return affine(a, -1.0, 0.0); }

Var operator*(double s, const Var& a) { return affine(a, s, 0.0); }

Var affine(const Var& a, double s, double c) {
  Tape& t = tape_of(a);
  return t.push((s * a.value().array() + c).matrix(), a.requires_grad(),
                [a, s](Tape& t, const Mat& g) { t.accumulate(a, s * g); });
}

Var hadamard(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  same_shape(a, b, "hadamard");
  return t.push(a.value().cwiseProduct(b.value()), a.requires_grad() || b.requires_grad(),
                [a, b](Tape& t, const Mat& g) {
                  if (a.requires_grad()) t.accumulate(a, g.cwiseProduct(b.value()));
                  if (b.requires_grad()) t.accumulate(b, g.cwiseProduct(a.value()));
                });
}

Var add_bias(const Var& a, const Var& b) {
  Tape& t = tape_of(a, b);
  if (b.cols() != 1 || b.rows() != a.rows()) throw DimensionError("add_bias: bias must be a column matching rows");
  Mat out = a.value();
  out.colwise() += b.value().col(0);
  return t.push(std::move(out), a.requires_grad() || b.requires_grad(), [a, b](Tape& t, const Mat& g) {
    t.accumulate(a, g);
    if (b.requires_grad()) t.accumulate(b, g.rowwise().sum());
  });
}

Var scale_rows(const Var& a, const Var& s) {
  Tape& t = tape_of(a, s);
  if (s.cols() != 1 || s.rows() != a.rows()) throw DimensionError("scale_rows: scale must be a column matching rows");
  return t.push(s.value().col(0).asDiagonal() * a.value(), a.requires_grad() || s.requires_grad(),
                [a, s](Tape& t, const Mat& g) {
                  if (a.requires_grad()) t.accumulate(a, s.value().col(0).asDiagonal() * g);
                  if (s.requires_grad()) t.accumulate(s, g.cwiseProduct(a.value()).rowwise().sum());
                });
}

Var scale_rows(const Var& a, const Vec& s) {
  Tape& t = tape_of(a);
  if (s.size() != a.rows()) throw DimensionError("scale_rows: scale must match rows");
  return t.push(s.asDiagonal() * a.value(), a.requires_grad(),
                [a, s](Tape& t, const Mat& g) { t.accumulate(a, s.asDiagonal() * g); });
}

Var sigmoid(const Var& a) {
  Tape& t = tape_of(a);
  Mat y = (1.0 / (1.0 + (-a.value().array()).exp())).matrix();
  const std::size_t id = t.size();
  return t.push(std::move(y), a.requires_grad(), [a, id](Tape& t, const Mat& g) {
    const Mat& y = t.value(Var(&t, id));
    t.accumulate(a, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

Var tanh(const Var& a) {
  Tape& t = tape_of(a);
  Mat y = a.value().array().tanh().matrix();
  const std::size_t id = t.size();
  return t.push(std::move(y), a.requires_grad(), [a, id](Tape& t, const Mat& g) {
    const Mat& y = t.value(Var(&t, id));
    t.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var rows(const Var& a, Index start, Index count) {
  Tape& t = tape_of(a);
  if (start < 0 || count < 0 || start + count > a.rows()) throw DimensionError("rows: range out of bounds");
  return t.push(a.value().middleRows(start, count), a.requires_grad(), [a, start, count](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(a.rows(), a.cols());
    full.middleRows(start, count) = g;
    t.accumulate(a, full);
  });
}

Var vstack(const std::vector<Var>& parts) {
  if (parts.empty()) throw DimensionError("vstack: no parts");
  Tape& t = tape_of(parts.front());
  Index total = 0;
  bool grad = false;
  for (const Var& p : parts) {
    if (p.tape() != &t) throw Error("autodiff: variables live on different tapes");
    if (p.cols() != parts.front().cols()) throw DimensionError("vstack: column counts differ");
    total += p.rows();
    grad = grad || p.requires_grad();
  }
  Mat out(total, parts.front().cols());
  Index r = 0;
  for (const Var& p : parts) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return t.push(std::move(out), grad, [parts](Tape& t, const Mat& g) {
    Index r = 0;
    for (const Var& p : parts) {
      t.accumulate(p, g.middleRows(r, p.rows()));
      r += p.rows();
    }
  });
}

Var sum_squares(const Var& a) {
  Tape& t = tape_of(a);
  return t.push(Mat::Constant(1, 1, a.value().squaredNorm()), a.requires_grad(),
                [a](Tape& t, const Mat& g) { t.accumulate(a, 2.0 * g(0, 0) * a.value()); });
}

Var weighted_column_sum_squares(const Var& a, const Vec& w) {
  Tape& t = tape_of(a);
  if (w.size() != a.cols()) throw DimensionError("weighted_column_sum_squares: weight length must match columns");
  const double v = (a.value().colwise().squaredNorm().transpose().array() * w.array()).sum();
  return t.push(Mat::Constant(1, 1, v), a.requires_grad(), [a, w](Tape& t, const Mat& g) {
    t.accumulate(a, 2.0 * g(0, 0) * (a.value() * w.asDiagonal()));
  });
}

}  // namespace dirac::ad
