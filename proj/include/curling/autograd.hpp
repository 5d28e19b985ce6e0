#pragma once

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// Every op records its output value on a Tape together with a closure that
// pushes the output gradient back into its inputs. Rows are batch samples
// throughout the model. A tape built with record=false evaluates the same
// graph without storing closures, which is what inference uses.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "curling/errors.hpp"

namespace curling::ag {

using Index = Eigen::Index;

template <class S>
using Mat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
using Vec = Eigen::Matrix<S, Eigen::Dynamic, 1>;

template <class S>
struct Parameter {
  Mat<S> value;
  Mat<S> grad;
  // False once cleared; the next backward zero-fills the buffer in place,
  // so an untouched parameter is distinguishable from a zero gradient.
  bool live = false;

  void zero_grad() {
    grad.setZero(value.rows(), value.cols());
    live = true;
  }
  void clear_grad() { live = false; }
  bool has_grad() const { return live && grad.rows() == value.rows() && grad.cols() == value.cols(); }
};

template <class S>
class Tape;

template <class S>
class Var {
 public:
  Var() = default;
  Var(Tape<S>* tape, int id) : tape_(tape), id_(id) {}

  Tape<S>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Mat<S>& value() const { return tape_->value(id_); }
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }

 private:
  Tape<S>* tape_ = nullptr;
  int id_ = -1;
};

template <class S>
class Tape {
 public:
  // (tape, d loss / d output, output value)
  using Backward = std::function<void(Tape&, const Mat<S>&, const Mat<S>&)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var<S> constant(Mat<S> value) {
    Node& n = nodes_.emplace_back();
    n.own = std::move(value);
    return Var<S>(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Leaf bound to a parameter; its gradient accumulates into p.grad.
  Var<S> param(Parameter<S>& p) {
    Node& n = nodes_.emplace_back();
    n.ref = &p.value;
    n.param = &p;
    n.requires_grad = record_;
    return Var<S>(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Read-only leaf bound to a parameter (no gradient).
  Var<S> frozen(const Parameter<S>& p) {
    Node& n = nodes_.emplace_back();
    n.ref = &p.value;
    return Var<S>(this, static_cast<int>(nodes_.size()) - 1);
  }

  // Free leaf that tracks its own gradient (used for input sensitivities).
  Var<S> leaf(Mat<S> value) {
    Node& n = nodes_.emplace_back();
    n.own = std::move(value);
    n.requires_grad = record_;
    return Var<S>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Mat<S>& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ref ? *n.ref : n.own;
  }

  bool requires_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].requires_grad; }
  bool requires_grad(const Var<S>& v) const { return requires_grad(v.id()); }

  // Gradient of a leaf after backward(); nullptr if nothing flowed into it.
  const Mat<S>* grad(const Var<S>& v) const {
    const Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.param) return n.param->has_grad() ? &n.param->grad : nullptr;
    return n.grad.size() ? &n.grad : nullptr;
  }

  Mat<S>& grad_slot(const Var<S>& v) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.param) {
      if (!n.param->has_grad()) n.param->zero_grad();
      return n.param->grad;
    }
    const Mat<S>& val = n.ref ? *n.ref : n.own;
    if (n.grad.rows() != val.rows() || n.grad.cols() != val.cols()) n.grad.setZero(val.rows(), val.cols());
    return n.grad;
  }

  // grad(v) += lhs * rhs. A parameter's first contribution of a pass is
  // written directly, which skips zero-filling large weight gradients.
  template <class L, class R>
  void accumulate_product(const Var<S>& v, const L& lhs, const R& rhs) {
    Node& n = nodes_[static_cast<std::size_t>(v.id())];
    if (n.param && !n.param->has_grad()) {
      n.param->grad.noalias() = lhs * rhs;
      n.param->live = true;
      return;
    }
    grad_slot(v).noalias() += lhs * rhs;
  }

  Var<S> record(Mat<S> value, std::span<const Var<S>> parents, Backward fn) {
    Node& n = nodes_.emplace_back();
    n.own = std::move(value);
    if (record_) {
      for (const auto& p : parents) {
        if (requires_grad(p.id())) {
          n.requires_grad = true;
          break;
        }
      }
      if (n.requires_grad) n.backward = std::move(fn);
    }
    return Var<S>(this, static_cast<int>(nodes_.size()) - 1);
  }

  Var<S> record(Mat<S> value, std::initializer_list<Var<S>> parents, Backward fn) {
    return record(std::move(value), std::span<const Var<S>>(parents.begin(), parents.size()),
                  std::move(fn));
  }

  void backward(const Var<S>& loss) {
    if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward() expects a 1x1 loss");
    if (!requires_grad(loss.id())) return;
    grad_slot(loss)(0, 0) += S(1);
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[static_cast<std::size_t>(i)];
      if (!n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad, n.own);
    }
  }

 private:
  struct Node {
    Mat<S> own;
    const Mat<S>* ref = nullptr;
    Parameter<S>* param = nullptr;
    Mat<S> grad;
    bool requires_grad = false;
    Backward backward;
  };

  bool record_;
  std::deque<Node> nodes_;
};

namespace detail {

inline void check(bool ok, const char* op, const std::string& msg) {
  if (!ok) throw ShapeError(std::string(op) + ": " + msg);
}

template <class S>
std::string dims(const Var<S>& v) {
  return std::to_string(v.rows()) + "x" + std::to_string(v.cols());
}

}  // namespace detail

template <class S>
Var<S> matmul(const Var<S>& a, const Var<S>& b) {
  detail::check(a.cols() == b.rows(), "matmul", detail::dims(a) + " * " + detail::dims(b));
  Mat<S> out = a.value() * b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    if (t.requires_grad(a)) t.grad_slot(a).noalias() += g * b.value().transpose();
    if (t.requires_grad(b)) t.accumulate_product(b, a.value().transpose(), g);
  });
}

template <class S>
Var<S> transpose(const Var<S>& a) {
  Mat<S> out = a.value().transpose();
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    t.grad_slot(a) += g.transpose();
  });
}

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add",
                detail::dims(a) + " + " + detail::dims(b));
  Mat<S> out = a.value() + b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    if (t.requires_grad(a)) t.grad_slot(a) += g;
    if (t.requires_grad(b)) t.grad_slot(b) += g;
  });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "sub",
                detail::dims(a) + " - " + detail::dims(b));
  Mat<S> out = a.value() - b.value();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    if (t.requires_grad(a)) t.grad_slot(a) += g;
    if (t.requires_grad(b)) t.grad_slot(b) -= g;
  });
}

// a (B x C) + row (1 x C), broadcast over rows.
template <class S>
Var<S> add_row(const Var<S>& a, const Var<S>& row) {
  detail::check(row.rows() == 1 && row.cols() == a.cols(), "add_row",
                detail::dims(a) + " + " + detail::dims(row));
  Mat<S> out = a.value().rowwise() + row.value().row(0);
  return a.tape().record(std::move(out), {a, row}, [a, row](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    if (t.requires_grad(a)) t.grad_slot(a) += g;
    if (t.requires_grad(row)) t.grad_slot(row) += g.colwise().sum();
  });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "mul",
                detail::dims(a) + " * " + detail::dims(b));
  Mat<S> out = a.value().cwiseProduct(b.value());
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    if (t.requires_grad(a)) t.grad_slot(a) += g.cwiseProduct(b.value());
    if (t.requires_grad(b)) t.grad_slot(b) += g.cwiseProduct(a.value());
  });
}

// a (B x C) scaled per row by col (B x 1).
template <class S>
Var<S> mul_col(const Var<S>& a, const Var<S>& col) {
  detail::check(col.cols() == 1 && col.rows() == a.rows(), "mul_col",
                detail::dims(a) + " * " + detail::dims(col));
  Mat<S> out = a.value().array().colwise() * col.value().col(0).array();
  return a.tape().record(std::move(out), {a, col}, [a, col](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    if (t.requires_grad(a)) t.grad_slot(a).array() += g.array().colwise() * col.value().col(0).array();
    if (t.requires_grad(col)) t.grad_slot(col) += g.cwiseProduct(a.value()).rowwise().sum();
  });
}

// Element-wise product with a constant of the same shape (masks, dropout).
template <class S>
Var<S> mul_const(const Var<S>& a, Mat<S> c) {
  detail::check(c.rows() == a.rows() && c.cols() == a.cols(), "mul_const", detail::dims(a));
  Mat<S> out = a.value().cwiseProduct(c);
  return a.tape().record(std::move(out), {a},
                         [a, c = std::move(c)](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
                           t.grad_slot(a) += g.cwiseProduct(c);
                         });
}

// Rows of a scaled by a constant per-row factor (B x 1).
template <class S>
Var<S> mul_rows_const(const Var<S>& a, Vec<S> factors) {
  detail::check(factors.size() == a.rows(), "mul_rows_const", detail::dims(a));
  Mat<S> out = a.value().array().colwise() * factors.array();
  return a.tape().record(std::move(out), {a},
                         [a, f = std::move(factors)](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
                           t.grad_slot(a).array() += g.array().colwise() * f.array();
                         });
}

template <class S>
Var<S> add_const(const Var<S>& a, const Mat<S>& c) {
  detail::check(c.rows() == a.rows() && c.cols() == a.cols(), "add_const", detail::dims(a));
  Mat<S> out = a.value() + c;
  return a.tape().record(std::move(out), {a},
                         [a](Tape<S>& t, const Mat<S>& g, const Mat<S>&) { t.grad_slot(a) += g; });
}

// alpha * a + beta
template <class S>
Var<S> affine(const Var<S>& a, S alpha, S beta) {
  Mat<S> out = (alpha * a.value().array() + beta).matrix();
  return a.tape().record(std::move(out), {a}, [a, alpha](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    t.grad_slot(a) += alpha * g;
  });
}

// a scaled by a 1x1 variable.
template <class S>
Var<S> scale_by(const Var<S>& a, const Var<S>& s) {
  detail::check(s.rows() == 1 && s.cols() == 1, "scale_by", detail::dims(s));
  Mat<S> out = a.value() * s.value()(0, 0);
  return a.tape().record(std::move(out), {a, s}, [a, s](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    if (t.requires_grad(a)) t.grad_slot(a) += g * s.value()(0, 0);
    if (t.requires_grad(s)) t.grad_slot(s)(0, 0) += g.cwiseProduct(a.value()).sum();
  });
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
  Mat<S> out = (S(1) / (S(1) + (-a.value().array()).exp())).matrix();
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g, const Mat<S>& y) {
    t.grad_slot(a).array() += g.array() * y.array() * (S(1) - y.array());
  });
}

template <class S>
Var<S> tanh(const Var<S>& a) {
  Mat<S> out = a.value().array().tanh().matrix();
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g, const Mat<S>& y) {
    t.grad_slot(a).array() += g.array() * (S(1) - y.array().square());
  });
}

template <class S>
Var<S> relu(const Var<S>& a) {
  Mat<S> out = a.value().cwiseMax(S(0));
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    t.grad_slot(a).array() += (a.value().array() > S(0)).select(g.array(), S(0));
  });
}

template <class S>
Var<S> concat_cols(const std::vector<Var<S>>& parts) {
  detail::check(!parts.empty(), "concat_cols", "no inputs");
  const Index rows = parts.front().rows();
  Index cols = 0;
  for (const auto& p : parts) {
    detail::check(p.rows() == rows, "concat_cols", "row mismatch " + detail::dims(p));
    cols += p.cols();
  }
  Mat<S> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  return parts.front().tape().record(std::move(out), std::span<const Var<S>>(parts),
                                     [parts](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
                                       Index off = 0;
                                       for (const auto& p : parts) {
                                         if (t.requires_grad(p)) t.grad_slot(p) += g.middleCols(off, p.cols());
                                         off += p.cols();
                                       }
                                     });
}

template <class S>
Var<S> slice_cols(const Var<S>& a, Index start, Index count) {
  detail::check(start >= 0 && start + count <= a.cols(), "slice_cols", detail::dims(a));
  Mat<S> out = a.value().middleCols(start, count);
  return a.tape().record(std::move(out), {a}, [a, start, count](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    t.grad_slot(a).middleCols(start, count) += g;
  });
}

template <class S>
Var<S> vstack(const std::vector<Var<S>>& parts) {
  detail::check(!parts.empty(), "vstack", "no inputs");
  const Index cols = parts.front().cols();
  Index rows = 0;
  for (const auto& p : parts) {
    detail::check(p.cols() == cols, "vstack", "column mismatch " + detail::dims(p));
    rows += p.rows();
  }
  Mat<S> out(rows, cols);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  return parts.front().tape().record(std::move(out), std::span<const Var<S>>(parts),
                                     [parts](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
                                       Index off = 0;
                                       for (const auto& p : parts) {
                                         if (t.requires_grad(p)) t.grad_slot(p) += g.middleRows(off, p.rows());
                                         off += p.rows();
                                       }
                                     });
}

template <class S>
Var<S> sum(const std::vector<Var<S>>& parts) {
  detail::check(!parts.empty(), "sum", "no inputs");
  Mat<S> out = parts.front().value();
  for (std::size_t i = 1; i < parts.size(); ++i) {
    detail::check(parts[i].rows() == out.rows() && parts[i].cols() == out.cols(), "sum", detail::dims(parts[i]));
    out += parts[i].value();
  }
  return parts.front().tape().record(std::move(out), std::span<const Var<S>>(parts),
                                     [parts](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
                                       for (const auto& p : parts)
                                         if (t.requires_grad(p)) t.grad_slot(p) += g;
                                     });
}

// out.row(i) = a.row(index[i]); repeated indices accumulate gradient.
template <class S>
Var<S> gather_rows(const Var<S>& a, std::vector<Index> index) {
  Mat<S> out(static_cast<Index>(index.size()), a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::check(index[i] >= 0 && index[i] < a.rows(), "gather_rows", "row index out of range");
    out.row(static_cast<Index>(i)) = a.value().row(index[i]);
  }
  return a.tape().record(std::move(out), {a},
                         [a, idx = std::move(index)](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
                           Mat<S>& ga = t.grad_slot(a);
                           for (std::size_t i = 0; i < idx.size(); ++i) ga.row(idx[i]) += g.row(static_cast<Index>(i));
                         });
}

// Inverse of gather for unique indices: zeros(rows, C) with a's rows placed at index.
template <class S>
Var<S> scatter_rows(const Var<S>& a, std::vector<Index> index, Index rows) {
  detail::check(static_cast<Index>(index.size()) == a.rows(), "scatter_rows", "index size mismatch");
  Mat<S> out = Mat<S>::Zero(rows, a.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    detail::check(index[i] >= 0 && index[i] < rows, "scatter_rows", "row index out of range");
    out.row(index[i]) = a.value().row(static_cast<Index>(i));
  }
  return a.tape().record(std::move(out), {a},
                         [a, idx = std::move(index)](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
                           Mat<S>& ga = t.grad_slot(a);
                           for (std::size_t i = 0; i < idx.size(); ++i) ga.row(static_cast<Index>(i)) += g.row(idx[i]);
                         });
}

template <class S>
Var<S> reshape(const Var<S>& a, Index rows, Index cols) {
  detail::check(rows * cols == a.rows() * a.cols(), "reshape", detail::dims(a));
  Mat<S> out = Eigen::Map<const Mat<S>>(a.value().data(), rows, cols);
  const Index r0 = a.rows(), c0 = a.cols();
  return a.tape().record(std::move(out), {a}, [a, r0, c0](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    t.grad_slot(a) += Eigen::Map<const Mat<S>>(g.data(), r0, c0);
  });
}

// Each row divided by its L2 norm; all-zero rows stay zero.
template <class S>
Var<S> row_normalize(const Var<S>& a) {
  const Mat<S>& x = a.value();
  Vec<S> norms = x.rowwise().norm();
  Mat<S> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    if (norms[r] > std::numeric_limits<S>::min()) {
      out.row(r) = x.row(r) / norms[r];
    } else {
      out.row(r).setZero();
    }
  }
  return a.tape().record(std::move(out), {a},
                         [a, norms = std::move(norms)](Tape<S>& t, const Mat<S>& g, const Mat<S>& y) {
                           Mat<S>& ga = t.grad_slot(a);
                           for (Index r = 0; r < y.rows(); ++r) {
                             if (!(norms[r] > std::numeric_limits<S>::min())) continue;
                             const S proj = y.row(r).dot(g.row(r));
                             ga.row(r) += (g.row(r) - proj * y.row(r)) / norms[r];
                           }
                         });
}

// Softmax across the columns of each row, restricted to entries where mask != 0.
// Masked-out entries are exactly zero. Every row needs at least one live entry.
template <class S>
Var<S> masked_softmax_rows(const Var<S>& a, const Mat<S>& mask) {
  detail::check(mask.rows() == a.rows() && mask.cols() == a.cols(), "masked_softmax_rows", detail::dims(a));
  const Mat<S>& x = a.value();
  Mat<S> out = Mat<S>::Zero(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    S best = -std::numeric_limits<S>::infinity();
    bool live = false;
    for (Index c = 0; c < x.cols(); ++c)
      if (mask(r, c) != S(0)) {
        best = std::max(best, x(r, c));
        live = true;
      }
    if (!live) throw DataError("masked softmax over a row with no available entries");
    S total = 0;
    for (Index c = 0; c < x.cols(); ++c) {
      if (mask(r, c) != S(0)) {
        out(r, c) = std::exp(x(r, c) - best);
        total += out(r, c);
      }
    }
    out.row(r) /= total;
  }
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g, const Mat<S>& y) {
    Vec<S> inner = g.cwiseProduct(y).rowwise().sum();
    t.grad_slot(a).array() += y.array() * (g.array().colwise() - inner.array());
  });
}

template <class S>
Var<S> softmax_rows(const Var<S>& a) {
  return masked_softmax_rows(a, Mat<S>(Mat<S>::Ones(a.rows(), a.cols())));
}

template <class S>
Var<S> log_softmax_rows(const Var<S>& a) {
  const Mat<S>& x = a.value();
  Mat<S> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const S best = x.row(r).maxCoeff();
    const S lse = best + std::log((x.row(r).array() - best).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g, const Mat<S>& y) {
    Vec<S> gsum = g.rowwise().sum();
    t.grad_slot(a).array() += g.array() - y.array().exp().colwise() * gsum.array();
  });
}

// Per-row dot product: (B x C), (B x C) -> B x 1.
template <class S>
Var<S> rowdot(const Var<S>& a, const Var<S>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "rowdot",
                detail::dims(a) + " . " + detail::dims(b));
  Mat<S> out = a.value().cwiseProduct(b.value()).rowwise().sum();
  return a.tape().record(std::move(out), {a, b}, [a, b](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    if (t.requires_grad(a)) t.grad_slot(a).array() += b.value().array().colwise() * g.col(0).array();
    if (t.requires_grad(b)) t.grad_slot(b).array() += a.value().array().colwise() * g.col(0).array();
  });
}

template <class S>
Var<S> row_sum(const Var<S>& a) {
  Mat<S> out = a.value().rowwise().sum();
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    t.grad_slot(a).colwise() += g.col(0);
  });
}

template <class S>
Var<S> col_sum(const Var<S>& a) {
  Mat<S> out = a.value().colwise().sum();
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    t.grad_slot(a).rowwise() += g.row(0);
  });
}

template <class S>
Var<S> sum_all(const Var<S>& a) {
  Mat<S> out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape().record(std::move(out), {a}, [a](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
    t.grad_slot(a).array() += g(0, 0);
  });
}

template <class S>
Var<S> mean_all(const Var<S>& a) {
  const S n = static_cast<S>(a.rows() * a.cols());
  return affine(sum_all(a), S(1) / n, S(0));
}

// out(r, 0) = a(r, cols[r]).
template <class S>
Var<S> pick(const Var<S>& a, std::vector<Index> cols) {
  detail::check(static_cast<Index>(cols.size()) == a.rows(), "pick", detail::dims(a));
  Mat<S> out(a.rows(), 1);
  for (Index r = 0; r < a.rows(); ++r) out(r, 0) = a.value()(r, cols[static_cast<std::size_t>(r)]);
  return a.tape().record(std::move(out), {a},
                         [a, cols = std::move(cols)](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
                           Mat<S>& ga = t.grad_slot(a);
                           for (Index r = 0; r < g.rows(); ++r) ga(r, cols[static_cast<std::size_t>(r)]) += g(r, 0);
                         });
}

// Element-wise max across slots, considering slot p for row r only when
// valid(r, p) != 0. Rows with no valid slot produce zeros.
template <class S>
Var<S> masked_max(const std::vector<Var<S>>& slots, const Mat<S>& valid) {
  detail::check(!slots.empty(), "masked_max", "no inputs");
  const Index rows = slots.front().rows(), cols = slots.front().cols();
  detail::check(valid.rows() == rows && valid.cols() == static_cast<Index>(slots.size()), "masked_max",
                "validity mask shape");
  Mat<S> out = Mat<S>::Zero(rows, cols);
  Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> arg =
      Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>::Constant(rows, cols, -1);
  for (std::size_t p = 0; p < slots.size(); ++p) {
    const Mat<S>& v = slots[p].value();
    detail::check(v.rows() == rows && v.cols() == cols, "masked_max", detail::dims(slots[p]));
    for (Index r = 0; r < rows; ++r) {
      if (valid(r, static_cast<Index>(p)) == S(0)) continue;
      for (Index c = 0; c < cols; ++c) {
        if (arg(r, c) < 0 || v(r, c) > out(r, c)) {
          out(r, c) = v(r, c);
          arg(r, c) = static_cast<int>(p);
        }
      }
    }
  }
  return slots.front().tape().record(
      std::move(out), std::span<const Var<S>>(slots),
      [slots, arg = std::move(arg)](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
        for (std::size_t p = 0; p < slots.size(); ++p) {
          if (!t.requires_grad(slots[p])) continue;
          Mat<S>* gp = nullptr;
          for (Index r = 0; r < g.rows(); ++r)
            for (Index c = 0; c < g.cols(); ++c)
              if (arg(r, c) == static_cast<int>(p)) {
                if (!gp) gp = &t.grad_slot(slots[p]);
                (*gp)(r, c) += g(r, c);
              }
        }
      });
}

template <class S>
struct BatchStats {
  Vec<S> mean;
  Vec<S> var;  // biased
};

// Batch normalization with batch statistics over rows.
template <class S>
Var<S> batch_norm_train(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps,
                        BatchStats<S>* stats_out) {
  detail::check(gamma.rows() == 1 && gamma.cols() == x.cols() && beta.cols() == x.cols(), "batch_norm",
                detail::dims(x));
  const Mat<S>& v = x.value();
  const S n = static_cast<S>(v.rows());
  Vec<S> mean = v.colwise().mean().transpose();
  Mat<S> centered = v.rowwise() - mean.transpose();
  Vec<S> var = (centered.array().square().colwise().sum() / n).matrix().transpose();
  Vec<S> inv_std = (var.array() + eps).rsqrt().matrix();
  Mat<S> xhat = centered.array().rowwise() * inv_std.transpose().array();
  Mat<S> out = (xhat.array().rowwise() * gamma.value().row(0).array()).rowwise() + beta.value().row(0).array();
  if (stats_out) *stats_out = {mean, var};
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n](Tape<S>& t, const Mat<S>& g,
                                                                               const Mat<S>&) {
        if (t.requires_grad(gamma)) t.grad_slot(gamma) += g.cwiseProduct(xhat).colwise().sum();
        if (t.requires_grad(beta)) t.grad_slot(beta) += g.colwise().sum();
        if (t.requires_grad(x)) {
          Mat<S> dxhat = g.array().rowwise() * gamma.value().row(0).array();
          Eigen::Matrix<S, 1, Eigen::Dynamic> sum_d = dxhat.colwise().sum();
          Eigen::Matrix<S, 1, Eigen::Dynamic> sum_dx = dxhat.cwiseProduct(xhat).colwise().sum();
          Mat<S> dx = (n * dxhat.array()).rowwise() - sum_d.array();
          dx.array() -= xhat.array().rowwise() * sum_dx.array();
          dx.array().rowwise() *= (inv_std.transpose().array() / n);
          t.grad_slot(x) += dx;
        }
      });
}

// Batch normalization with frozen running statistics (evaluation mode).
template <class S>
Var<S> batch_norm_eval(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, const Mat<S>& running_mean,
                       const Mat<S>& running_var, S eps) {
  detail::check(running_mean.cols() == x.cols() && gamma.cols() == x.cols(), "batch_norm_eval", detail::dims(x));
  Eigen::Matrix<S, 1, Eigen::Dynamic> inv = (running_var.row(0).array() + eps).rsqrt().matrix();
  Mat<S> centered = x.value().rowwise() - running_mean.row(0);
  Eigen::Matrix<S, 1, Eigen::Dynamic> scale = inv.cwiseProduct(gamma.value().row(0));
  Mat<S> out = (centered.array().rowwise() * scale.array()).rowwise() + beta.value().row(0).array();
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, centered = std::move(centered), inv, scale](Tape<S>& t, const Mat<S>& g, const Mat<S>&) {
        if (t.requires_grad(x)) t.grad_slot(x).array() += g.array().rowwise() * scale.array();
        if (t.requires_grad(gamma))
          t.grad_slot(gamma) += (g.cwiseProduct(centered).colwise().sum()).cwiseProduct(inv);
        if (t.requires_grad(beta)) t.grad_slot(beta) += g.colwise().sum();
      });
}

}  // namespace curling::ag
