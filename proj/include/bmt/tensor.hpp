#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "bmt/common.hpp"

namespace bmt {
inline namespace BMT_PRECISION_NS {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// For each element of a tensor shaped `out`, the flat offset of the element
/// of a tensor shaped `in` that broadcasts onto it (numpy rules).
std::vector<std::size_t> broadcast_offsets(const Shape& out, const Shape& in);

namespace detail {

// One vertex of the autodiff tape. A node owns its forward values and, once
// backward has reached it, its gradient. Non-leaf nodes hold the inputs they
// were computed from and the rule that pushes their gradient into them.
struct Node {
  Shape shape;
  std::vector<Real> values;
  std::vector<Real> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }
  std::vector<Real>& ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), Real(0));
    return grad;
  }
};

}  // namespace detail

/// Dense row-major tensor with optional gradient. Copies share storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> values);

  static Tensor scalar(Real v);
  /// A leaf that accumulates gradient during backward().
  static Tensor parameter(Shape shape, std::vector<Real> values);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Size of `axis`; negative axes count from the end.
  std::size_t dim(int axis) const;
  std::size_t numel() const;

  std::span<const Real> values() const;
  std::span<Real> mutable_values();
  Real item() const;
  Real operator[](std::size_t flat_index) const { return values()[flat_index]; }
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();

  const char* op_name() const;
  /// Value copy with no tape history.
  Tensor detach() const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Disables tape recording on this thread while alive.
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

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate;
/// intermediate gradients are reset first so a tape can be replayed.
void backward(const Tensor& loss);

// ---- differentiable ops ---------------------------------------------------

/// [N,D]x[D,K] or batched [G,N,D]x[G,D,K].
Tensor matmul(const Tensor& a, const Tensor& b);

// Binary elementwise ops broadcast numpy-style from the trailing axis.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, Real factor);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis, bool keepdim = false);
/// Population variance along `axis`.
Tensor variance(const Tensor& x, int axis, bool keepdim = false);
/// Max |x| along `axis`; the subgradient routes to the first maximizer.
Tensor max_abs(const Tensor& x, int axis, bool keepdim = false);

Tensor transpose(const Tensor& x, int axis0, int axis1);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor reshape(const Tensor& x, Shape shape);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t begin, std::size_t end);

Tensor softmax(const Tensor& x, int axis = -1);
/// Softmax over the last axis of a [G,Tq,Tk] tensor. `keep` has shape
/// [G/group, Tq, Tk]; entries with keep==0 are exactly zero in the output.
Tensor masked_softmax(const Tensor& x, std::span<const std::uint8_t> keep,
                      std::size_t group);
/// Normalizes over the last axis.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  Real eps = Real(1e-6));

/// Rows of `table` selected by `ids`; result shape [ids.size(), D].
Tensor embedding(const Tensor& table, std::span<const int> ids);

/// Inverted dropout with a seeded mask; identity when p == 0.
Tensor dropout(const Tensor& x, Real p, std::uint64_t seed);

/// An op whose forward is evaluated without recording and whose backward is
/// supplied verbatim. `backward` returns one gradient per input (undefined to
/// skip that input).
struct CustomOp {
  const char* name = "custom";
  std::function<Tensor(const std::vector<Tensor>& inputs)> forward;
  std::function<std::vector<Tensor>(const Tensor& upstream,
                                    const std::vector<Tensor>& inputs,
                                    const Tensor& output)>
      backward;
};
Tensor custom_gradient(const CustomOp& op, const std::vector<Tensor>& inputs);

}  // namespace BMT_PRECISION_NS
}  // namespace bmt
