#include "bmt/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <sstream>
#include <unordered_set>

#include "gemm.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

thread_local bool g_grad_enabled = true;

std::size_t norm_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  if (axis < -r || axis >= r)
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                     " out of range for rank " + std::to_string(rank));
  return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

void check_finite(const char* op, const std::vector<Real>& v) {
  for (Real x : v)
    if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite value in output");
}

// Wraps freshly computed values into a node, attaching tape history when any
// input needs a gradient and recording is on.
Tensor make_result(const char* op, Shape shape, std::vector<Real> values,
                   std::initializer_list<Tensor> inputs,
                   std::function<void(Node&)> bw) {
  check_finite(op, values);
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->op = op;
  bool needs = false;
  if (g_grad_enabled)
    for (const Tensor& t : inputs) needs = needs || t.requires_grad();
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(bw);
  }
  return Tensor::from_node(std::move(node));
}

// Splits `shape` around `axis` into [outer, n, inner].
struct AxisView {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisView axis_view(const Shape& shape, std::size_t axis) {
  AxisView v;
  for (std::size_t i = 0; i < axis; ++i) v.outer *= shape[i];
  v.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) v.inner *= shape[i];
  return v;
}

Shape reduced_shape(const Shape& shape, std::size_t axis, bool keepdim) {
  Shape out = shape;
  if (keepdim)
    out[axis] = 1;
  else
    out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  return out;
}

// ---- broadcasting ---------------------------------------------------------

enum class BcastKind { kSame, kSuffix, kGeneral };

struct Operand {
  BcastKind kind = BcastKind::kSame;
  std::size_t n = 0;
  std::vector<std::size_t> offsets;  // only for kGeneral
  std::size_t offset(std::size_t i) const {
    switch (kind) {
      case BcastKind::kSame: return i;
      case BcastKind::kSuffix: return i % n;
      default: return offsets[i];
    }
  }
};

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(op) + ": cannot broadcast " + shape_str(a) +
                       " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

Operand make_operand(const Shape& out, const Shape& in) {
  Operand op;
  op.n = shape_numel(in);
  if (in == out) return op;
  const std::size_t off = out.size() - in.size();
  bool suffix = true;
  for (std::size_t i = 0; i < in.size(); ++i) suffix = suffix && in[i] == out[off + i];
  if (suffix) {
    op.kind = BcastKind::kSuffix;
    return op;
  }
  op.kind = BcastKind::kGeneral;
  op.offsets = broadcast_offsets(out, in);
  return op;
}

// Calls f(i, ia, ib) for every output element, with loops specialized for
// the common equal-shape and trailing-suffix layouts.
template <class F>
void visit_pairs(const Operand& oa, const Operand& ob, std::size_t total, F&& f) {
  using K = BcastKind;
  if (oa.kind == K::kSame && ob.kind == K::kSame) {
    for (std::size_t i = 0; i < total; ++i) f(i, i, i);
  } else if (oa.kind == K::kSame && ob.kind == K::kSuffix) {
    for (std::size_t o = 0; o < total; o += ob.n)
      for (std::size_t j = 0; j < ob.n; ++j) f(o + j, o + j, j);
  } else if (oa.kind == K::kSuffix && ob.kind == K::kSame) {
    for (std::size_t o = 0; o < total; o += oa.n)
      for (std::size_t j = 0; j < oa.n; ++j) f(o + j, j, o + j);
  } else {
    for (std::size_t i = 0; i < total; ++i) f(i, oa.offset(i), ob.offset(i));
  }
}

template <class Fwd, class DA, class DB>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd,
                 DA da, DB db) {
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), name);
  auto oa = std::make_shared<Operand>(make_operand(out_shape, a.shape()));
  auto ob = std::make_shared<Operand>(make_operand(out_shape, b.shape()));
  const std::size_t total = shape_numel(out_shape);
  std::vector<Real> out(total);
  const Real* av = a.values().data();
  const Real* bv = b.values().data();
  Real* ov = out.data();
  visit_pairs(*oa, *ob, total, [&](std::size_t i, std::size_t ia, std::size_t ib) { ov[i] = fwd(av[ia], bv[ib]); });
  return make_result(name, std::move(out_shape), std::move(out), {a, b},
                     [oa, ob, da, db](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       const Real* g = self.grad.data();
                       const Real* x = na.values.data();
                       const Real* y = nb.values.data();
                       const std::size_t total = self.grad.size();
                       if (na.requires_grad) {
                         Real* ga = na.ensure_grad().data();
                         visit_pairs(*oa, *ob, total, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                           ga[ia] += da(g[i], x[ia], y[ib]);
                         });
                       }
                       if (nb.requires_grad) {
                         Real* gb = nb.ensure_grad().data();
                         visit_pairs(*oa, *ob, total, [&](std::size_t i, std::size_t ia, std::size_t ib) {
                           gb[ib] += db(g[i], x[ia], y[ib]);
                         });
                       }
                     });
}

template <class Fwd, class Deriv>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  auto xv = x.values();
  std::vector<Real> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  return make_result(name, x.shape(), std::move(out), {x}, [deriv](Node& self) {
    Node& in = *self.inputs[0];
    auto& gi = in.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      gi[i] += self.grad[i] * deriv(in.values[i], self.values[i]);
  });
}

void accumulate(std::vector<Real>& dst, const std::vector<Real>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

std::vector<std::size_t> broadcast_offsets(const Shape& out, const Shape& in) {
  if (broadcast_shape(out, in, "broadcast") != out)
    throw ShapeError("broadcast: " + shape_str(in) + " does not broadcast to " + shape_str(out));
  const std::size_t off = out.size() - in.size();
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t s = 1;
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[off + i] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::size_t total = shape_numel(out);
  std::vector<std::size_t> offsets(total);
  std::vector<std::size_t> idx(out.size(), 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < total; ++i) {
    offsets[i] = cur;
    for (std::size_t d = out.size(); d-- > 0;) {
      ++idx[d];
      cur += strides[d];
      if (idx[d] < out[d]) break;
      cur -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  return offsets;
}

// ---- Tensor ---------------------------------------------------------------

Tensor::Tensor(Shape shape, Real fill) : node_(std::make_shared<Node>()) {
  node_->values.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<Real> values) : node_(std::make_shared<Node>()) {
  if (shape_numel(shape) != values.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  node_->shape = std::move(shape);
  node_->values = std::move(values);
}

Tensor Tensor::scalar(Real v) { return Tensor(Shape{}, std::vector<Real>{v}); }

Tensor Tensor::parameter(Shape shape, std::vector<Real> values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return node_ ? node_->shape : kEmpty;
}

std::size_t Tensor::dim(int axis) const { return shape()[norm_axis(axis, rank(), "dim")]; }

std::size_t Tensor::numel() const { return node_ ? node_->values.size() : 0; }

std::span<const Real> Tensor::values() const {
  return node_ ? std::span<const Real>(node_->values) : std::span<const Real>();
}

std::span<Real> Tensor::mutable_values() { return std::span<Real>(node_->values); }

Real Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor has " + std::to_string(numel()) + " elements");
  return node_->values[0];
}

std::vector<double> Tensor::to_vector() const {
  auto v = values();
  return {v.begin(), v.end()};
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && node_->grad.size() == node_->values.size(); }

std::span<const Real> Tensor::grad() const {
  if (!has_grad()) return {};
  return std::span<const Real>(node_->grad);
}

std::span<Real> Tensor::mutable_grad() { return std::span<Real>(node_->ensure_grad()); }

void Tensor::zero_grad() {
  if (node_) node_->grad.assign(node_->values.size(), Real(0));
}

const char* Tensor::op_name() const { return node_ ? node_->op : "undefined"; }

Tensor Tensor::detach() const { return Tensor(shape(), std::vector<Real>(values().begin(), values().end())); }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order of the tape.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order)
    if (!n->is_leaf()) n->grad.assign(n->values.size(), Real(0));
  loss.node()->ensure_grad()[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if (!(*it)->is_leaf()) (*it)->backward(**it);
}

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  const bool batched = sa.size() == 3;
  if (!((sa.size() == 2 && sb.size() == 2) || (sa.size() == 3 && sb.size() == 3)))
    throw ShapeError("matmul: expected rank-2 or rank-3 operands, got " + shape_str(sa) +
                     " and " + shape_str(sb));
  const std::size_t groups = batched ? sa[0] : 1;
  if (batched && sb[0] != groups)
    throw ShapeError("matmul: batch mismatch " + shape_str(sa) + " vs " + shape_str(sb));
  const std::size_t n = sa[sa.size() - 2], d = sa.back();
  const std::size_t d2 = sb[sb.size() - 2], k = sb.back();
  if (d != d2)
    throw ShapeError("matmul: inner dimensions differ " + shape_str(sa) + " vs " + shape_str(sb));

  std::vector<Real> out(groups * n * k);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t g = 0; g < groups; ++g)
    detail::gemm_nn(av.data() + g * n * d, bv.data() + g * d * k, out.data() + g * n * k, n, d, k);

  Shape out_shape = batched ? Shape{groups, n, k} : Shape{n, k};
  return make_result("matmul", std::move(out_shape), std::move(out), {a, b},
                     [groups, n, d, k](Node& self) {
                       Node& na = *self.inputs[0];
                       Node& nb = *self.inputs[1];
                       if (na.requires_grad) {
                         auto& ga = na.ensure_grad();
                         for (std::size_t g = 0; g < groups; ++g)
                           detail::gemm_nt_acc(self.grad.data() + g * n * k, nb.values.data() + g * d * k,
                                               ga.data() + g * n * d, n, k, d);
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.ensure_grad();
                         for (std::size_t g = 0; g < groups; ++g)
                           detail::gemm_tn_acc(na.values.data() + g * n * d, self.grad.data() + g * n * k,
                                               gb.data() + g * d * k, n, d, k);
                       }
                     });
}

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](Real x, Real y) { return x + y; },
      [](Real g, Real, Real) { return g; }, [](Real g, Real, Real) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](Real x, Real y) { return x - y; },
      [](Real g, Real, Real) { return g; }, [](Real g, Real, Real) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](Real x, Real y) { return x * y; },
      [](Real g, Real, Real y) { return g * y; }, [](Real g, Real x, Real) { return g * x; });
}

Tensor scale(const Tensor& x, Real factor) {
  return unary_op(
      "scale", x, [factor](Real v) { return v * factor; },
      [factor](Real, Real) { return factor; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](Real v) { return v > 0 ? v : Real(0); },
      [](Real v, Real) { return v > 0 ? Real(1) : Real(0); });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](Real v) { return std::exp(v); }, [](Real, Real y) { return y; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      "sqrt", x, [](Real v) { return std::sqrt(v); },
      [](Real, Real y) { return Real(0.5) / y; });
}

Tensor square(const Tensor& x) {
  return unary_op(
      "square", x, [](Real v) { return v * v; }, [](Real v, Real) { return 2 * v; });
}

// ---- reductions -----------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0;
  for (Real v : x.values()) acc += v;
  return make_result("sum", Shape{}, {static_cast<Real>(acc)}, {x}, [](Node& self) {
    auto& gi = self.inputs[0]->ensure_grad();
    for (Real& g : gi) g += self.grad[0];
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  double acc = 0;
  for (Real v : x.values()) acc += v;
  const double n = static_cast<double>(x.numel());
  return make_result("mean", Shape{}, {static_cast<Real>(acc / n)}, {x}, [n](Node& self) {
    auto& gi = self.inputs[0]->ensure_grad();
    const Real g = static_cast<Real>(self.grad[0] / n);
    for (Real& v : gi) v += g;
  });
}

Tensor mean(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank(), "mean");
  const AxisView v = axis_view(x.shape(), ax);
  if (v.n == 0) throw ShapeError("mean: empty axis");
  auto xv = x.values();
  std::vector<Real> out(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      double acc = 0;
      for (std::size_t j = 0; j < v.n; ++j) acc += xv[(o * v.n + j) * v.inner + i];
      out[o * v.inner + i] = static_cast<Real>(acc / v.n);
    }
  return make_result("mean_axis", reduced_shape(x.shape(), ax, keepdim), std::move(out), {x},
                     [v](Node& self) {
                       auto& gi = self.inputs[0]->ensure_grad();
                       for (std::size_t o = 0; o < v.outer; ++o)
                         for (std::size_t i = 0; i < v.inner; ++i) {
                           const Real g = self.grad[o * v.inner + i] / static_cast<Real>(v.n);
                           for (std::size_t j = 0; j < v.n; ++j) gi[(o * v.n + j) * v.inner + i] += g;
                         }
                     });
}

Tensor variance(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank(), "variance");
  const AxisView v = axis_view(x.shape(), ax);
  if (v.n == 0) throw ShapeError("variance: empty axis");
  auto xv = x.values();
  auto means = std::make_shared<std::vector<double>>(v.outer * v.inner);
  std::vector<Real> out(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      double mu = 0;
      for (std::size_t j = 0; j < v.n; ++j) mu += xv[(o * v.n + j) * v.inner + i];
      mu /= v.n;
      double var = 0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const double dlt = xv[(o * v.n + j) * v.inner + i] - mu;
        var += dlt * dlt;
      }
      (*means)[o * v.inner + i] = mu;
      out[o * v.inner + i] = static_cast<Real>(var / v.n);
    }
  return make_result("variance", reduced_shape(x.shape(), ax, keepdim), std::move(out), {x},
                     [v, means](Node& self) {
                       Node& in = *self.inputs[0];
                       auto& gi = in.ensure_grad();
                       for (std::size_t o = 0; o < v.outer; ++o)
                         for (std::size_t i = 0; i < v.inner; ++i) {
                           const double g = self.grad[o * v.inner + i];
                           const double mu = (*means)[o * v.inner + i];
                           for (std::size_t j = 0; j < v.n; ++j) {
                             const std::size_t idx = (o * v.n + j) * v.inner + i;
                             gi[idx] += static_cast<Real>(g * 2.0 * (in.values[idx] - mu) / v.n);
                           }
                         }
                     });
}

Tensor max_abs(const Tensor& x, int axis, bool keepdim) {
  const std::size_t ax = norm_axis(axis, x.rank(), "max_abs");
  const AxisView v = axis_view(x.shape(), ax);
  if (v.n == 0) throw ShapeError("max_abs: empty axis");
  auto xv = x.values();
  auto argmax = std::make_shared<std::vector<std::size_t>>(v.outer * v.inner);
  std::vector<Real> out(v.outer * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      std::size_t best = (o * v.n) * v.inner + i;
      for (std::size_t j = 1; j < v.n; ++j) {
        const std::size_t idx = (o * v.n + j) * v.inner + i;
        if (std::abs(xv[idx]) > std::abs(xv[best])) best = idx;
      }
      (*argmax)[o * v.inner + i] = best;
      out[o * v.inner + i] = std::abs(xv[best]);
    }
  return make_result("max_abs", reduced_shape(x.shape(), ax, keepdim), std::move(out), {x},
                     [argmax](Node& self) {
                       Node& in = *self.inputs[0];
                       auto& gi = in.ensure_grad();
                       for (std::size_t r = 0; r < argmax->size(); ++r) {
                         const std::size_t idx = (*argmax)[r];
                         const Real s = in.values[idx] >= 0 ? Real(1) : Real(-1);
                         gi[idx] += s * self.grad[r];
                       }
                     });
}

// ---- layout ---------------------------------------------------------------

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (axes.size() != r) throw ShapeError("permute: axis list size does not match rank");
  std::vector<std::size_t> perm(r);
  std::vector<bool> used(r, false);
  for (std::size_t i = 0; i < r; ++i) {
    perm[i] = norm_axis(axes[i], r, "permute");
    if (used[perm[i]]) throw ShapeError("permute: repeated axis");
    used[perm[i]] = true;
  }
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[perm[i]];
    strides[i] = in_strides[perm[i]];
  }
  const std::size_t total = x.numel();
  auto src = std::make_shared<std::vector<std::size_t>>(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t cur = 0;
  for (std::size_t i = 0; i < total; ++i) {
    (*src)[i] = cur;
    for (std::size_t d = r; d-- > 0;) {
      ++idx[d];
      cur += strides[d];
      if (idx[d] < out_shape[d]) break;
      cur -= strides[d] * idx[d];
      idx[d] = 0;
    }
  }
  auto xv = x.values();
  std::vector<Real> out(total);
  for (std::size_t i = 0; i < total; ++i) out[i] = xv[(*src)[i]];
  return make_result("permute", std::move(out_shape), std::move(out), {x}, [src](Node& self) {
    auto& gi = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) gi[(*src)[i]] += self.grad[i];
  });
}

Tensor transpose(const Tensor& x, int axis0, int axis1) {
  std::vector<int> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[norm_axis(axis0, x.rank(), "transpose")], axes[norm_axis(axis1, x.rank(), "transpose")]);
  return permute(x, axes);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  std::vector<Real> out(x.values().begin(), x.values().end());
  return make_result("reshape", std::move(shape), std::move(out), {x}, [](Node& self) {
    accumulate(self.inputs[0]->ensure_grad(), self.grad);
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const std::size_t ax = norm_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const Tensor& p : parts) {
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != ax && s[i] != out_shape[i]) throw ShapeError("concat: shape mismatch " + shape_str(s));
    out_shape[ax] += s[ax];
  }
  const AxisView v = axis_view(out_shape, ax);
  std::vector<Real> out(shape_numel(out_shape));
  auto sizes = std::make_shared<std::vector<std::size_t>>();
  std::size_t start = 0;
  for (const Tensor& p : parts) {
    const std::size_t n = p.shape()[ax];
    auto pv = p.values();
    for (std::size_t o = 0; o < v.outer; ++o)
      std::copy_n(pv.begin() + static_cast<std::ptrdiff_t>(o * n * v.inner), n * v.inner,
                  out.begin() + static_cast<std::ptrdiff_t>((o * v.n + start) * v.inner));
    start += n;
    sizes->push_back(n);
  }
  auto node = make_result("concat", std::move(out_shape), std::move(out), {}, {});
  if (grad_enabled() && std::any_of(parts.begin(), parts.end(), [](const Tensor& t) { return t.requires_grad(); })) {
    auto& nd = *node.node();
    nd.requires_grad = true;
    for (const Tensor& p : parts) nd.inputs.push_back(p.node());
    nd.backward = [v, sizes](Node& self) {
      std::size_t begin = 0;
      for (std::size_t k = 0; k < self.inputs.size(); ++k) {
        const std::size_t n = (*sizes)[k];
        Node& in = *self.inputs[k];
        if (in.requires_grad) {
          auto& gi = in.ensure_grad();
          for (std::size_t o = 0; o < v.outer; ++o)
            for (std::size_t j = 0; j < n * v.inner; ++j)
              gi[o * n * v.inner + j] += self.grad[(o * v.n + begin) * v.inner + j];
        }
        begin += n;
      }
    };
  }
  return node;
}

Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = norm_axis(axis, x.rank(), "slice");
  if (begin > end || end > x.shape()[ax]) throw ShapeError("slice: range out of bounds");
  const AxisView v = axis_view(x.shape(), ax);
  const std::size_t n = end - begin;
  Shape out_shape = x.shape();
  out_shape[ax] = n;
  auto xv = x.values();
  std::vector<Real> out(v.outer * n * v.inner);
  for (std::size_t o = 0; o < v.outer; ++o)
    std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>((o * v.n + begin) * v.inner), n * v.inner,
                out.begin() + static_cast<std::ptrdiff_t>(o * n * v.inner));
  return make_result("slice", std::move(out_shape), std::move(out), {x}, [v, n, begin](Node& self) {
    auto& gi = self.inputs[0]->ensure_grad();
    for (std::size_t o = 0; o < v.outer; ++o)
      for (std::size_t j = 0; j < n * v.inner; ++j)
        gi[(o * v.n + begin) * v.inner + j] += self.grad[o * n * v.inner + j];
  });
}

// ---- normalization --------------------------------------------------------

namespace {

void softmax_backward_rows(const std::vector<Real>& y, const std::vector<Real>& g,
                           std::vector<Real>& gx, const AxisView& v) {
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      double dot = 0;
      for (std::size_t j = 0; j < v.n; ++j) {
        const std::size_t idx = (o * v.n + j) * v.inner + i;
        dot += static_cast<double>(g[idx]) * y[idx];
      }
      for (std::size_t j = 0; j < v.n; ++j) {
        const std::size_t idx = (o * v.n + j) * v.inner + i;
        gx[idx] += static_cast<Real>(y[idx] * (g[idx] - dot));
      }
    }
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = norm_axis(axis, x.rank(), "softmax");
  const AxisView v = axis_view(x.shape(), ax);
  auto xv = x.values();
  std::vector<Real> out(x.numel());
  for (std::size_t o = 0; o < v.outer; ++o)
    for (std::size_t i = 0; i < v.inner; ++i) {
      Real mx = xv[o * v.n * v.inner + i];
      for (std::size_t j = 1; j < v.n; ++j) mx = std::max(mx, xv[(o * v.n + j) * v.inner + i]);
      double z = 0;
      for (std::size_t j = 0; j < v.n; ++j) z += std::exp(static_cast<double>(xv[(o * v.n + j) * v.inner + i]) - mx);
      for (std::size_t j = 0; j < v.n; ++j) {
        const std::size_t idx = (o * v.n + j) * v.inner + i;
        out[idx] = static_cast<Real>(std::exp(static_cast<double>(xv[idx]) - mx) / z);
      }
    }
  return make_result("softmax", x.shape(), std::move(out), {x}, [v](Node& self) {
    softmax_backward_rows(self.values, self.grad, self.inputs[0]->ensure_grad(), v);
  });
}

Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep, std::size_t group) {
  if (x.rank() != 3) throw ShapeError("masked_softmax: expected [G,Tq,Tk], got " + shape_str(x.shape()));
  const std::size_t g_count = x.shape()[0], tq = x.shape()[1], tk = x.shape()[2];
  if (group == 0 || g_count % group != 0 || keep.size() != (g_count / group) * tq * tk)
    throw ShapeError("masked_softmax: mask size mismatch");
  auto xv = x.values();
  std::vector<Real> out(x.numel(), Real(0));
  for (std::size_t g = 0; g < g_count; ++g) {
    const std::uint8_t* m = keep.data() + (g / group) * tq * tk;
    for (std::size_t r = 0; r < tq; ++r) {
      const Real* row = xv.data() + (g * tq + r) * tk;
      const std::uint8_t* mr = m + r * tk;
      Real* orow = out.data() + (g * tq + r) * tk;
      bool any = false;
      Real mx = 0;
      for (std::size_t j = 0; j < tk; ++j)
        if (mr[j]) {
          mx = any ? std::max(mx, row[j]) : row[j];
          any = true;
        }
      if (!any) continue;
      double z = 0;
      for (std::size_t j = 0; j < tk; ++j)
        if (mr[j]) z += std::exp(static_cast<double>(row[j]) - mx);
      for (std::size_t j = 0; j < tk; ++j)
        if (mr[j]) orow[j] = static_cast<Real>(std::exp(static_cast<double>(row[j]) - mx) / z);
    }
  }
  const AxisView v{g_count * tq, tk, 1};
  return make_result("masked_softmax", x.shape(), std::move(out), {x}, [v](Node& self) {
    softmax_backward_rows(self.values, self.grad, self.inputs[0]->ensure_grad(), v);
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Real eps) {
  if (x.rank() == 0) throw ShapeError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d)
    throw ShapeError("layer_norm: gamma/beta size must equal last axis " + std::to_string(d));
  if (!(eps > 0)) throw ConfigError("layer_norm: eps must be positive");
  const std::size_t rows = x.numel() / d;
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  auto xhat = std::make_shared<std::vector<Real>>(x.numel());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  std::vector<Real> out(x.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const Real* xr = xv.data() + r * d;
    double mu = 0;
    for (std::size_t j = 0; j < d; ++j) mu += xr[j];
    mu /= d;
    double var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    for (std::size_t j = 0; j < d; ++j) {
      const Real xh = static_cast<Real>((xr[j] - mu) * inv);
      (*xhat)[r * d + j] = xh;
      out[r * d + j] = xh * gv[j] + bv[j];
    }
  }
  return make_result("layer_norm", x.shape(), std::move(out), {x, gamma, beta},
                     [rows, d, xhat, inv_std](Node& self) {
                       Node& nx = *self.inputs[0];
                       Node& ng = *self.inputs[1];
                       Node& nb = *self.inputs[2];
                       const auto& g = self.grad;
                       if (ng.requires_grad) {
                         auto& gg = ng.ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
                       }
                       if (nb.requires_grad) {
                         auto& gb = nb.ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
                       }
                       if (nx.requires_grad) {
                         auto& gx = nx.ensure_grad();
                         for (std::size_t r = 0; r < rows; ++r) {
                           double s1 = 0, s2 = 0;
                           for (std::size_t j = 0; j < d; ++j) {
                             const double gh = static_cast<double>(g[r * d + j]) * ng.values[j];
                             s1 += gh;
                             s2 += gh * (*xhat)[r * d + j];
                           }
                           const double inv = (*inv_std)[r];
                           for (std::size_t j = 0; j < d; ++j) {
                             const double gh = static_cast<double>(g[r * d + j]) * ng.values[j];
                             gx[r * d + j] += static_cast<Real>(
                                 inv / d * (d * gh - s1 - (*xhat)[r * d + j] * s2));
                           }
                         }
                       }
                     });
}

// ---- misc -----------------------------------------------------------------

Tensor embedding(const Tensor& table, std::span<const int> ids) {
  if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  auto tv = table.values();
  std::vector<Real> out(ids.size() * d);
  auto rows = std::make_shared<std::vector<int>>(ids.begin(), ids.end());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab)
      throw ShapeError("embedding: token id " + std::to_string(ids[i]) + " out of range for vocab " +
                       std::to_string(vocab));
    std::copy_n(tv.begin() + static_cast<std::ptrdiff_t>(ids[i] * d), d,
                out.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return make_result("embedding", Shape{ids.size(), d}, std::move(out), {table}, [rows, d](Node& self) {
    auto& gt = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < rows->size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[(*rows)[i] * d + j] += self.grad[i * d + j];
  });
}

Tensor dropout(const Tensor& x, Real p, std::uint64_t seed) {
  if (p < 0 || p >= 1) throw ConfigError("dropout: rate must be in [0,1)");
  if (p == 0) return x;
  std::mt19937_64 rng(seed);
  auto mask = std::make_shared<std::vector<Real>>(x.numel());
  const Real keep_scale = Real(1) / (Real(1) - p);
  const std::uint64_t threshold = static_cast<std::uint64_t>(static_cast<double>(p) * 18446744073709551615.0);
  for (Real& m : *mask) m = rng() >= threshold ? keep_scale : Real(0);
  auto xv = x.values();
  std::vector<Real> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * (*mask)[i];
  return make_result("dropout", x.shape(), std::move(out), {x}, [mask](Node& self) {
    auto& gi = self.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[i] * (*mask)[i];
  });
}

Tensor custom_gradient(const CustomOp& op, const std::vector<Tensor>& inputs) {
  Tensor fwd;
  {
    NoGradGuard guard;
    fwd = op.forward(inputs);
  }
  check_finite(op.name, fwd.node()->values);
  auto node = std::make_shared<Node>();
  node->shape = fwd.shape();
  node->values = fwd.node()->values;
  node->op = op.name;
  const bool needs = grad_enabled() &&
                     std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  if (needs) {
    node->requires_grad = true;
    for (const Tensor& t : inputs) node->inputs.push_back(t.node());
    auto rule = op.backward;
    const char* name = op.name;
    Tensor saved_out = fwd;
    node->backward = [rule, name, saved_out](Node& self) {
      std::vector<Tensor> ins;
      ins.reserve(self.inputs.size());
      for (auto& n : self.inputs) ins.push_back(Tensor::from_node(n));
      Tensor upstream(self.shape, self.grad);
      std::vector<Tensor> grads;
      {
        NoGradGuard guard;
        grads = rule(upstream, ins, saved_out);
      }
      if (grads.size() != ins.size())
        throw Error(std::string(name) + ": backward returned wrong number of gradients");
      for (std::size_t i = 0; i < ins.size(); ++i) {
        Node& in = *self.inputs[i];
        if (!grads[i].defined() || !in.requires_grad) continue;
        if (grads[i].numel() != in.values.size())
          throw ShapeError(std::string(name) + ": gradient shape mismatch");
        auto& gi = in.ensure_grad();
        auto gv = grads[i].values();
        for (std::size_t j = 0; j < gi.size(); ++j) gi[j] += gv[j];
      }
    };
  }
  return Tensor::from_node(std::move(node));
}

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
