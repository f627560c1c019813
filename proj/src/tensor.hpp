#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "rng.hpp"

namespace flowcast {

class TensorError : public std::runtime_error {
 public:
  explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

using Shape = std::vector<int>;

namespace detail {
struct TensorNode;
}

// Dense row-major tensor of doubles with reverse-mode autodiff.
//
// A Tensor is a cheap handle to an immutable value buffer. Ops that consume
// tensors with requires_grad set record their inputs and a backward closure;
// backward() replays the recorded graph in reverse topological order and then
// clears it. Leaf values may be updated in place through mutable_values(),
// which is how the optimizer applies parameter steps.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor from_data(const Shape& shape, std::vector<double> values);
  static Tensor scalar(double value);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t size() const;
  int dim(int i) const { return shape().at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(shape().size()); }

  const std::vector<double>& values() const;
  double value_at(std::int64_t i) const { return values()[static_cast<size_t>(i)]; }
  double item() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool enable);

  bool has_grad() const;
  const std::vector<double>& grad() const;
  void zero_grad();

  // In-place value access for leaves (optimizer updates). Calling this on an
  // op output that still carries tape linkage is an error.
  std::vector<double>& mutable_values();

  // Internal: ops share node ownership through the handle.
  explicit Tensor(std::shared_ptr<detail::TensorNode> node) : node_(std::move(node)) {}
  const std::shared_ptr<detail::TensorNode>& handle() const;

 private:
  std::shared_ptr<detail::TensorNode> node_;
};

std::int64_t numel(const Shape& shape);

Tensor randn(const Shape& shape, Rng& rng, double stddev = 1.0);

// ---- elementwise binary ops (trailing-dimension broadcast, scalar allowed)
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// ---- scalar ops
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor neg(const Tensor& a);

// ---- elementwise unary
Tensor sin(const Tensor& a);
Tensor cos(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
// Elementwise Huber penalty: r^2/2 for |r| <= delta, delta*(|r| - delta/2) otherwise.
Tensor huber(const Tensor& a, double delta);

// ---- linear algebra
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- reductions
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- structure ops (2-D, row-major)
Tensor reshape(const Tensor& a, const Shape& shape);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor slice_cols(const Tensor& a, int start, int len);
Tensor gather_rows(const Tensor& a, const std::vector<int>& index);
// Sum rows of `a` into `num_segments` output rows keyed by segment id.
// Backward of gather_rows on repeated indices and forward of segment_sum are
// the matching scatter-add pair used by graph message passing.
Tensor segment_sum(const Tensor& a, const std::vector<int>& segment, int num_segments);
// out[r, c] = a[r, c] * w[r], w a length-rows vector.
Tensor mul_rowscale(const Tensor& a, const Tensor& w);
// [R, C] -> [R, H]: sum each of the H contiguous column blocks (C % H == 0).
Tensor sum_col_blocks(const Tensor& a, int blocks);
// [R, C] * [R, H] -> [R, C]: scale column block h of row r by w[r, h].
Tensor mul_col_blocks(const Tensor& a, const Tensor& w, int blocks);
// Column-wise softmax within each segment of rows; rows of the same segment
// compete, distinct columns are independent.
Tensor segment_softmax(const Tensor& scores, const std::vector<int>& segment, int num_segments);
// Normalization over the last dimension, epsilon 1e-5 inside the square root.
Tensor layer_norm(const Tensor& a, double eps = 1e-5);

// ---- autodiff control
Tensor detach(const Tensor& a);
// Populates grads of every reachable requires_grad tensor with d(loss)/d(tensor),
// then clears the tape. `loss` must be scalar and tape-connected.
void backward(const Tensor& loss);

}  // namespace flowcast
