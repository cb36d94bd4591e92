#include "syndiag/autodiff.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace syndiag {

namespace {

std::atomic<int64_t> g_node_counter{0};

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<MatRM>;
using MapCM = Eigen::Map<const MatRM>;
using MapV = Eigen::Map<Eigen::VectorXd>;
using MapCV = Eigen::Map<const Eigen::VectorXd>;

MapCM as_mat(const Tensor& t) { return MapCM(t.data(), t.rows(), t.cols()); }
MapM as_mat(Tensor& t) { return MapM(t.data(), t.rows(), t.cols()); }
MapCV as_vec(const Tensor& t) { return MapCV(t.data(), t.numel()); }
MapV as_vec(Tensor& t) { return MapV(t.data(), t.numel()); }

NodePtr make_node(Tensor value, std::vector<NodePtr> parents,
                  std::function<void(TapeNode&)> backprop) {
  auto n = std::make_shared<TapeNode>();
  n->value = std::move(value);
  n->parents = std::move(parents);
  n->id = g_node_counter.fetch_add(1, std::memory_order_relaxed);
  for (const auto& p : n->parents)
    if (p->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backprop = std::move(backprop);
  return n;
}

Var unary(const Var& a, const std::function<double(double)>& f,
          const std::function<double(double, double)>& df_dx /* (x, y) */) {
  Tensor out(a.value().shape());
  const auto& x = a.value().vec();
  for (size_t i = 0; i < x.size(); ++i) out[static_cast<int64_t>(i)] = f(x[i]);
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an, df_dx](TapeNode& n) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    const auto& x = an->value.vec();
    for (size_t i = 0; i < x.size(); ++i)
      g[static_cast<int64_t>(i)] += n.grad[static_cast<int64_t>(i)] *
                                    df_dx(x[i], n.value[static_cast<int64_t>(i)]);
  }));
}

void check_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value()))
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.value().shape_str() +
                                " vs " + b.value().shape_str());
}

}  // namespace

Var Var::constant(Tensor t) {
  auto n = std::make_shared<TapeNode>();
  n->value = std::move(t);
  n->is_leaf = true;
  n->id = g_node_counter.fetch_add(1, std::memory_order_relaxed);
  return Var(n);
}

Var Var::parameter(Tensor t) {
  Var v = constant(std::move(t));
  v.node()->requires_grad = true;
  return v;
}

void backward(const Var& root) {
  if (!root.defined()) throw std::invalid_argument("backward: undefined root");
  if (root.value().numel() != 1) throw std::invalid_argument("backward: root must be scalar");

  // Reverse creation order of the reachable set is a valid topological order
  // because parents are always created before children.
  std::vector<TapeNode*> order;
  std::unordered_set<TapeNode*> seen;
  std::vector<TapeNode*> stack{root.node().get()};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    TapeNode* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents)
      if (seen.insert(p.get()).second) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](const TapeNode* a, const TapeNode* b) { return a->id > b->id; });

  root.node()->ensure_grad().fill(0.0);
  root.node()->grad[0] = 1.0;
  for (TapeNode* n : order) {
    if (!n->requires_grad || !n->backprop) continue;
    if (n->grad.numel() == 0) continue;  // unreached by any cotangent
    n->backprop(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var add(const Var& a, const Var& b) {
  check_same_shape(a, b, "add");
  Tensor out = a.value();
  as_vec(out) += as_vec(b.value());
  NodePtr an = a.node(), bn = b.node();
  return Var(make_node(std::move(out), {an, bn}, [an, bn](TapeNode& n) {
    if (an->requires_grad) as_vec(an->ensure_grad()) += as_vec(n.grad);
    if (bn->requires_grad) as_vec(bn->ensure_grad()) += as_vec(n.grad);
  }));
}

Var sub(const Var& a, const Var& b) {
  check_same_shape(a, b, "sub");
  Tensor out = a.value();
  as_vec(out) -= as_vec(b.value());
  NodePtr an = a.node(), bn = b.node();
  return Var(make_node(std::move(out), {an, bn}, [an, bn](TapeNode& n) {
    if (an->requires_grad) as_vec(an->ensure_grad()) += as_vec(n.grad);
    if (bn->requires_grad) as_vec(bn->ensure_grad()) -= as_vec(n.grad);
  }));
}

Var mul(const Var& a, const Var& b) {
  check_same_shape(a, b, "mul");
  Tensor out = a.value();
  as_vec(out).array() *= as_vec(b.value()).array();
  NodePtr an = a.node(), bn = b.node();
  return Var(make_node(std::move(out), {an, bn}, [an, bn](TapeNode& n) {
    if (an->requires_grad)
      as_vec(an->ensure_grad()).array() += as_vec(n.grad).array() * as_vec(bn->value).array();
    if (bn->requires_grad)
      as_vec(bn->ensure_grad()).array() += as_vec(n.grad).array() * as_vec(an->value).array();
  }));
}

Var add_const(const Var& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Var scale(const Var& a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var exp_(const Var& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log_(const Var& a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var reciprocal(const Var& a) {
  return unary(a, [](double x) { return 1.0 / x; },
               [](double, double y) { return -y * y; });
}

Var sigmoid(const Var& a) {
  return unary(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
               [](double, double y) { return y * (1.0 - y); });
}

Var tanh_(const Var& a) {
  return unary(a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var gelu(const Var& a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  return unary(
      a,
      [](double x) {
        double inner = k * (x + c * x * x * x);
        return 0.5 * x * (1.0 + std::tanh(inner));
      },
      [](double x, double) {
        double inner = k * (x + c * x * x * x);
        double t = std::tanh(inner);
        return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * c * x * x);
      });
}

Var relu(const Var& a) {
  return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var square(const Var& a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var scale_by(const Var& a, const Var& s) {
  if (s.value().numel() != 1) throw std::invalid_argument("scale_by: scalar expected");
  Tensor out = a.value();
  as_vec(out) *= s.value()[0];
  NodePtr an = a.node(), sn = s.node();
  return Var(make_node(std::move(out), {an, sn}, [an, sn](TapeNode& n) {
    if (an->requires_grad) as_vec(an->ensure_grad()) += sn->value[0] * as_vec(n.grad);
    if (sn->requires_grad) sn->ensure_grad()[0] += as_vec(n.grad).dot(as_vec(an->value));
  }));
}

// --------------------------------------------------------------------- shape

Var reshape(const Var& a, std::vector<int64_t> shape) {
  Tensor out(std::move(shape), a.value().vec());
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an](TapeNode& n) {
    if (an->requires_grad) as_vec(an->ensure_grad()) += as_vec(n.grad);
  }));
}

namespace {
int64_t rows_of(const Tensor& t) { return t.rank() == 1 ? 1 : t.dim(0); }
}  // namespace

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
  int64_t cols = parts[0].value().cols();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.value().cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
    total += rows_of(p.value());
  }
  Tensor out({total, cols});
  std::vector<NodePtr> parents;
  int64_t r = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().numel(), out.data() + r * cols);
    r += rows_of(p.value());
    parents.push_back(p.node());
  }
  auto ps = parents;
  return Var(make_node(std::move(out), std::move(parents), [ps, cols](TapeNode& n) {
    int64_t r = 0;
    for (const auto& p : ps) {
      int64_t nr = rows_of(p->value);
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        MapV(g.data(), g.numel()) += MapCV(n.grad.data() + r * cols, nr * cols);
      }
      r += nr;
    }
  }));
}

Var slice_rows(const Var& a, int64_t begin, int64_t end) {
  const Tensor& v = a.value();
  if (begin < 0 || end > v.rows() || begin >= end)
    throw std::invalid_argument("slice_rows: bad range");
  int64_t cols = v.cols();
  Tensor out({end - begin, cols});
  std::copy(v.data() + begin * cols, v.data() + end * cols, out.data());
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an, begin, cols](TapeNode& n) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    MapV(g.data() + begin * cols, n.grad.numel()) += as_vec(n.grad);
  }));
}

Var row(const Var& a, int64_t r) {
  Var s = slice_rows(a, r, r + 1);
  return reshape(s, {a.value().cols()});
}

Var slice_cols(const Var& a, int64_t begin, int64_t end) {
  const Tensor& v = a.value();
  if (begin < 0 || end > v.cols() || begin >= end)
    throw std::invalid_argument("slice_cols: bad range");
  int64_t m = v.rows(), c = v.cols(), w = end - begin;
  Tensor out({m, w});
  for (int64_t i = 0; i < m; ++i)
    std::copy(v.data() + i * c + begin, v.data() + i * c + end, out.data() + i * w);
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an, begin, c, w](TapeNode& n) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    int64_t m = n.grad.rows();
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < w; ++j) g[i * c + begin + j] += n.grad[i * w + j];
  }));
}

Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
  int64_t m = parts[0].value().rows();
  int64_t total = 0;
  for (const auto& p : parts) {
    if (p.value().rows() != m) throw std::invalid_argument("concat_cols: row mismatch");
    total += p.value().cols();
  }
  Tensor out({m, total});
  std::vector<NodePtr> parents;
  int64_t off = 0;
  for (const auto& p : parts) {
    int64_t w = p.value().cols();
    for (int64_t i = 0; i < m; ++i)
      std::copy(p.value().data() + i * w, p.value().data() + (i + 1) * w,
                out.data() + i * total + off);
    off += w;
    parents.push_back(p.node());
  }
  auto ps = parents;
  return Var(make_node(std::move(out), std::move(parents), [ps, m, total](TapeNode& n) {
    int64_t off = 0;
    for (const auto& p : ps) {
      int64_t w = p->value.cols();
      if (p->requires_grad) {
        auto& g = p->ensure_grad();
        for (int64_t i = 0; i < m; ++i)
          for (int64_t j = 0; j < w; ++j) g[i * w + j] += n.grad[i * total + off + j];
      }
      off += w;
    }
  }));
}

Var stack_rows(const std::vector<Var>& rows) {
  std::vector<Var> parts;
  parts.reserve(rows.size());
  for (const auto& r : rows) {
    if (r.value().rank() != 1) throw std::invalid_argument("stack_rows: rank-1 expected");
    parts.push_back(reshape(r, {1, r.value().numel()}));
  }
  return concat_rows(parts);
}

// -------------------------------------------------------------------- linalg

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows())
    throw std::invalid_argument("matmul: inner dims " + av.shape_str() + " x " + bv.shape_str());
  Tensor out({av.rows(), bv.cols()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv);
  NodePtr an = a.node(), bn = b.node();
  return Var(make_node(std::move(out), {an, bn}, [an, bn](TapeNode& n) {
    if (an->requires_grad)
      as_mat(an->ensure_grad()).noalias() += as_mat(n.grad) * as_mat(bn->value).transpose();
    if (bn->requires_grad)
      as_mat(bn->ensure_grad()).noalias() += as_mat(an->value).transpose() * as_mat(n.grad);
  }));
}

Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols())
    throw std::invalid_argument("matmul_nt: inner dims " + av.shape_str() + " x " +
                                bv.shape_str() + "^T");
  Tensor out({av.rows(), bv.rows()});
  as_mat(out).noalias() = as_mat(av) * as_mat(bv).transpose();
  NodePtr an = a.node(), bn = b.node();
  return Var(make_node(std::move(out), {an, bn}, [an, bn](TapeNode& n) {
    if (an->requires_grad)
      as_mat(an->ensure_grad()).noalias() += as_mat(n.grad) * as_mat(bn->value);
    if (bn->requires_grad)
      as_mat(bn->ensure_grad()).noalias() += as_mat(n.grad).transpose() * as_mat(an->value);
  }));
}

Var matvec(const Var& m, const Var& v) {
  const Tensor& mv = m.value();
  const Tensor& vv = v.value();
  if (vv.rank() != 1 || mv.cols() != vv.numel())
    throw std::invalid_argument("matvec: dims " + mv.shape_str() + " x " + vv.shape_str());
  Tensor out({mv.rows()});
  as_vec(out).noalias() = as_mat(mv) * as_vec(vv);
  NodePtr mn = m.node(), vn = v.node();
  return Var(make_node(std::move(out), {mn, vn}, [mn, vn](TapeNode& n) {
    if (mn->requires_grad)
      as_mat(mn->ensure_grad()).noalias() += as_vec(n.grad) * as_vec(vn->value).transpose();
    if (vn->requires_grad)
      as_vec(vn->ensure_grad()).noalias() += as_mat(mn->value).transpose() * as_vec(n.grad);
  }));
}

Var linear(const Var& x, const Var& w, const Var& b) {
  const bool vec_in = x.value().rank() == 1;
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  int64_t in = wv.cols(), out_dim = wv.rows();
  if (xv.cols() != in || b.value().numel() != out_dim)
    throw std::invalid_argument("linear: dims " + xv.shape_str() + " w " + wv.shape_str());
  int64_t m = vec_in ? 1 : xv.rows();
  Tensor out(vec_in ? std::vector<int64_t>{out_dim} : std::vector<int64_t>{m, out_dim});
  MapM o(out.data(), m, out_dim);
  o.noalias() = MapCM(xv.data(), m, in) * as_mat(wv).transpose();
  o.rowwise() += as_vec(b.value()).transpose();
  NodePtr xn = x.node(), wn = w.node(), bn = b.node();
  return Var(make_node(std::move(out), {xn, wn, bn}, [xn, wn, bn, m, in, out_dim](TapeNode& n) {
    MapCM g(n.grad.data(), m, out_dim);
    if (xn->requires_grad) {
      auto& xg = xn->ensure_grad();
      MapM(xg.data(), m, in).noalias() += g * as_mat(wn->value);
    }
    if (wn->requires_grad)
      as_mat(wn->ensure_grad()).noalias() += g.transpose() * MapCM(xn->value.data(), m, in);
    if (bn->requires_grad) as_vec(bn->ensure_grad()) += g.colwise().sum().transpose();
  }));
}

// ---------------------------------------------------------------- reductions

Var sum(const Var& a) {
  Tensor out = Tensor::scalar(as_vec(a.value()).sum());
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an](TapeNode& n) {
    if (an->requires_grad) as_vec(an->ensure_grad()).array() += n.grad[0];
  }));
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().numel())); }

Var mean_rows(const Var& a) {
  const Tensor& v = a.value();
  int64_t m = v.rows(), c = v.cols();
  Tensor out({c});
  as_vec(out) = as_mat(v).colwise().mean().transpose();
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an, m, c](TapeNode& n) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    MapM(g.data(), m, c).rowwise() += as_vec(n.grad).transpose() / static_cast<double>(m);
  }));
}

namespace {
Var max_reduce(const Var& a, bool over_cols) {
  const Tensor& v = a.value();
  int64_t m = v.rows(), c = v.cols();
  int64_t n_out = over_cols ? m : c;
  Tensor out({n_out});
  auto argmax = std::make_shared<std::vector<int64_t>>(static_cast<size_t>(n_out));
  for (int64_t i = 0; i < n_out; ++i) {
    int64_t extent = over_cols ? c : m;
    double best = -1e308;
    int64_t best_j = 0;
    for (int64_t j = 0; j < extent; ++j) {
      double x = over_cols ? v.at(i, j) : v.at(j, i);
      if (x > best) {
        best = x;
        best_j = j;
      }
    }
    out[i] = best;
    (*argmax)[static_cast<size_t>(i)] = best_j;
  }
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an, argmax, over_cols, c](TapeNode& n) {
    if (!an->requires_grad) return;
    auto& g = an->ensure_grad();
    for (int64_t i = 0; i < n.grad.numel(); ++i) {
      int64_t j = (*argmax)[static_cast<size_t>(i)];
      if (over_cols)
        g[i * c + j] += n.grad[i];
      else
        g[j * c + i] += n.grad[i];
    }
  }));
}
}  // namespace

Var row_max(const Var& a) { return max_reduce(a, true); }
Var col_max(const Var& a) { return max_reduce(a, false); }

Var dot(const Var& a, const Var& b) {
  check_same_shape(a, b, "dot");
  Tensor out = Tensor::scalar(as_vec(a.value()).dot(as_vec(b.value())));
  NodePtr an = a.node(), bn = b.node();
  return Var(make_node(std::move(out), {an, bn}, [an, bn](TapeNode& n) {
    if (an->requires_grad) as_vec(an->ensure_grad()) += n.grad[0] * as_vec(bn->value);
    if (bn->requires_grad) as_vec(bn->ensure_grad()) += n.grad[0] * as_vec(an->value);
  }));
}

// ------------------------------------------------------------- normalization

Var l2_normalize(const Var& a) {
  const Tensor& v = a.value();
  double norm = as_vec(v).norm();
  if (norm < 1e-12) throw std::invalid_argument("l2_normalize: zero vector");
  Tensor out(v.shape());
  as_vec(out) = as_vec(v) / norm;
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an, norm](TapeNode& n) {
    if (!an->requires_grad) return;
    auto y = as_vec(n.value);
    auto g = as_vec(n.grad);
    as_vec(an->ensure_grad()) += (g - y * y.dot(g)) / norm;
  }));
}

Var l2_normalize_rows(const Var& a) {
  const Tensor& v = a.value();
  int64_t m = v.rows(), c = v.cols();
  Tensor out(v.shape());
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    double norm = MapCV(v.data() + i * c, c).norm();
    if (norm < 1e-12) throw std::invalid_argument("l2_normalize_rows: zero row");
    (*norms)[static_cast<size_t>(i)] = norm;
    MapV(out.data() + i * c, c) = MapCV(v.data() + i * c, c) / norm;
  }
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an, norms, m, c](TapeNode& n) {
    if (!an->requires_grad) return;
    auto& ag = an->ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      MapCV y(n.value.data() + i * c, c);
      MapCV g(n.grad.data() + i * c, c);
      MapV(ag.data() + i * c, c) += (g - y * y.dot(g)) / (*norms)[static_cast<size_t>(i)];
    }
  }));
}

Var softmax_rows(const Var& a) {
  const Tensor& v = a.value();
  int64_t m = v.rows(), c = v.cols();
  Tensor out(v.rank() == 1 ? std::vector<int64_t>{c} : std::vector<int64_t>{m, c});
  for (int64_t i = 0; i < m; ++i) {
    MapCV x(v.data() + i * c, c);
    MapV y(out.data() + i * c, c);
    double mx = x.maxCoeff();
    y = (x.array() - mx).exp();
    y /= y.sum();
  }
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an, m, c](TapeNode& n) {
    if (!an->requires_grad) return;
    auto& ag = an->ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      MapCV y(n.value.data() + i * c, c);
      MapCV g(n.grad.data() + i * c, c);
      double s = y.dot(g);
      MapV(ag.data() + i * c, c).array() += y.array() * (g.array() - s);
    }
  }));
}

Var log_softmax_rows(const Var& a) {
  const Tensor& v = a.value();
  int64_t m = v.rows(), c = v.cols();
  Tensor out(v.rank() == 1 ? std::vector<int64_t>{c} : std::vector<int64_t>{m, c});
  for (int64_t i = 0; i < m; ++i) {
    MapCV x(v.data() + i * c, c);
    double mx = x.maxCoeff();
    double lse = mx + std::log((x.array() - mx).exp().sum());
    MapV(out.data() + i * c, c) = x.array() - lse;
  }
  NodePtr an = a.node();
  return Var(make_node(std::move(out), {an}, [an, m, c](TapeNode& n) {
    if (!an->requires_grad) return;
    auto& ag = an->ensure_grad();
    for (int64_t i = 0; i < m; ++i) {
      MapCV y(n.value.data() + i * c, c);
      MapCV g(n.grad.data() + i * c, c);
      double gsum = g.sum();
      MapV(ag.data() + i * c, c).array() += g.array() - y.array().exp() * gsum;
    }
  }));
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& v = x.value();
  int64_t m = v.rows(), c = v.cols();
  if (gamma.value().numel() != c || beta.value().numel() != c)
    throw std::invalid_argument("layer_norm: gamma/beta dim mismatch");
  Tensor out(v.shape());
  auto xhat = std::make_shared<Tensor>(std::vector<int64_t>{m, c});
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(m));
  for (int64_t i = 0; i < m; ++i) {
    MapCV xi(v.data() + i * c, c);
    double mu = xi.mean();
    double var = (xi.array() - mu).square().mean();
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = is;
    MapV h(xhat->data() + i * c, c);
    h = (xi.array() - mu) * is;
    MapV(out.data() + i * c, c) =
        h.array() * as_vec(gamma.value()).array() + as_vec(beta.value()).array();
  }
  NodePtr xn = x.node(), gn = gamma.node(), bn = beta.node();
  return Var(
      make_node(std::move(out), {xn, gn, bn}, [xn, gn, bn, xhat, inv_std, m, c](TapeNode& n) {
        for (int64_t i = 0; i < m; ++i) {
          MapCV g(n.grad.data() + i * c, c);
          MapCV h(xhat->data() + i * c, c);
          if (gn->requires_grad)
            as_vec(gn->ensure_grad()).array() += g.array() * h.array();
          if (bn->requires_grad) as_vec(bn->ensure_grad()) += g;
          if (xn->requires_grad) {
            Eigen::ArrayXd gg = g.array() * as_vec(gn->value).array();
            double mean_gg = gg.mean();
            double mean_ggh = (gg * h.array()).mean();
            MapV(xn->ensure_grad().data() + i * c, c).array() +=
                (gg - mean_gg - h.array() * mean_ggh) * (*inv_std)[static_cast<size_t>(i)];
          }
        }
      }));
}

// -------------------------------------------------------------------- losses

Var mse(const Var& a, const Var& b) {
  check_same_shape(a, b, "mse");
  Var d = sub(a, b);
  return mean(square(d));
}

Var cross_entropy(const Var& logits, const std::vector<int>& targets) {
  const Tensor& v = logits.value();
  int64_t m = v.rows(), c = v.cols();
  if (static_cast<int64_t>(targets.size()) != m)
    throw std::invalid_argument("cross_entropy: target count mismatch");
  for (int t : targets)
    if (t < 0 || t >= c) throw std::invalid_argument("cross_entropy: target out of range");
  Var lsm = log_softmax_rows(logits);
  Tensor mask(v.rank() == 1 ? std::vector<int64_t>{c} : std::vector<int64_t>{m, c});
  for (int64_t i = 0; i < m; ++i) mask[i * c + targets[static_cast<size_t>(i)]] = 1.0;
  Var picked = mul(lsm, Var::constant(std::move(mask)));
  return scale(sum(picked), -1.0 / static_cast<double>(m));
}

// --------------------------------------------------------------- convolution

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 3 || wv.rank() != 4) throw std::invalid_argument("conv2d: rank");
  int64_t cin = xv.dim(0), h = xv.dim(1), wd = xv.dim(2);
  int64_t cout = wv.dim(0), kc = wv.dim(1), kh = wv.dim(2), kw = wv.dim(3);
  if (kc != cin || b.value().numel() != cout)
    throw std::invalid_argument("conv2d: channel mismatch");
  int64_t ho = (h + 2 * pad - kh) / stride + 1;
  int64_t wo = (wd + 2 * pad - kw) / stride + 1;
  Tensor out({cout, ho, wo});
  const double* X = xv.data();
  const double* W = wv.data();
  for (int64_t oc = 0; oc < cout; ++oc) {
    double bias = b.value()[oc];
    for (int64_t oy = 0; oy < ho; ++oy) {
      for (int64_t ox = 0; ox < wo; ++ox) {
        double acc = bias;
        for (int64_t ic = 0; ic < cin; ++ic) {
          for (int64_t ky = 0; ky < kh; ++ky) {
            int64_t iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            for (int64_t kx = 0; kx < kw; ++kx) {
              int64_t ix = ox * stride + kx - pad;
              if (ix < 0 || ix >= wd) continue;
              acc += X[(ic * h + iy) * wd + ix] * W[((oc * cin + ic) * kh + ky) * kw + kx];
            }
          }
        }
        out[(oc * ho + oy) * wo + ox] = acc;
      }
    }
  }
  NodePtr xn = x.node(), wn = w.node(), bn = b.node();
  return Var(make_node(std::move(out), {xn, wn, bn},
                       [xn, wn, bn, stride, pad, cin, h, wd, cout, kh, kw, ho, wo](TapeNode& n) {
    const double* G = n.grad.data();
    const double* X = xn->value.data();
    const double* W = wn->value.data();
    double* GX = xn->requires_grad ? xn->ensure_grad().data() : nullptr;
    double* GW = wn->requires_grad ? wn->ensure_grad().data() : nullptr;
    double* GB = bn->requires_grad ? bn->ensure_grad().data() : nullptr;
    for (int64_t oc = 0; oc < cout; ++oc) {
      for (int64_t oy = 0; oy < ho; ++oy) {
        for (int64_t ox = 0; ox < wo; ++ox) {
          double g = G[(oc * ho + oy) * wo + ox];
          if (g == 0.0) continue;
          if (GB) GB[oc] += g;
          for (int64_t ic = 0; ic < cin; ++ic) {
            for (int64_t ky = 0; ky < kh; ++ky) {
              int64_t iy = oy * stride + ky - pad;
              if (iy < 0 || iy >= h) continue;
              for (int64_t kx = 0; kx < kw; ++kx) {
                int64_t ix = ox * stride + kx - pad;
                if (ix < 0 || ix >= wd) continue;
                int64_t xi = (ic * h + iy) * wd + ix;
                int64_t wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                if (GX) GX[xi] += g * W[wi];
                if (GW) GW[wi] += g * X[xi];
              }
            }
          }
        }
      }
    }
  }));
}

Var adaptive_avg_pool(const Var& x, int out_hw) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3) throw std::invalid_argument("adaptive_avg_pool: rank-3 expected");
  int64_t c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
  int64_t g = out_hw;
  if (g < 1 || g > h || g > w) throw std::invalid_argument("adaptive_avg_pool: bad grid");
  auto bin_lo = [](int64_t i, int64_t n, int64_t m) { return (i * n) / m; };
  auto bin_hi = [](int64_t i, int64_t n, int64_t m) { return ((i + 1) * n + m - 1) / m; };
  Tensor out({c, g, g});
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t i = 0; i < g; ++i)
      for (int64_t j = 0; j < g; ++j) {
        int64_t y0 = bin_lo(i, h, g), y1 = bin_hi(i, h, g);
        int64_t x0 = bin_lo(j, w, g), x1 = bin_hi(j, w, g);
        double acc = 0.0;
        for (int64_t y = y0; y < y1; ++y)
          for (int64_t xx = x0; xx < x1; ++xx) acc += xv[(ch * h + y) * w + xx];
        out[(ch * g + i) * g + j] = acc / static_cast<double>((y1 - y0) * (x1 - x0));
      }
  NodePtr xn = x.node();
  return Var(make_node(std::move(out), {xn}, [xn, c, h, w, g, bin_lo, bin_hi](TapeNode& n) {
    if (!xn->requires_grad) return;
    auto& xg = xn->ensure_grad();
    for (int64_t ch = 0; ch < c; ++ch)
      for (int64_t i = 0; i < g; ++i)
        for (int64_t j = 0; j < g; ++j) {
          int64_t y0 = bin_lo(i, h, g), y1 = bin_hi(i, h, g);
          int64_t x0 = bin_lo(j, w, g), x1 = bin_hi(j, w, g);
          double gg = n.grad[(ch * g + i) * g + j] / static_cast<double>((y1 - y0) * (x1 - x0));
          for (int64_t y = y0; y < y1; ++y)
            for (int64_t xx = x0; xx < x1; ++xx) xg[(ch * h + y) * w + xx] += gg;
        }
  }));
}

Var detach(const Var& a) { return Var::constant(a.value()); }

}  // namespace syndiag
