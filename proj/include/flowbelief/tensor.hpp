#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

#include "flowbelief/common.hpp"

namespace flowbelief {

class Tape;

// Immutable-by-convention dense double tensor with shared storage.  A tensor
// optionally refers to a node on the active tape (node() >= 0); constants and
// tensors built outside any tape have node() == -1 and contribute no
// gradient.  All values are 64-bit floats throughout the library.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor scalar(double value);
  static Tensor from(Shape shape, std::vector<double> values);
  // Wraps existing storage without copying.  Used by Parameter leaves and by
  // ops; the storage must not be mutated afterwards while tensors view it.
  static Tensor wrap(std::shared_ptr<std::vector<double>> storage, Shape shape, int node);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_ ? data_->size() : 0; }
  int node() const { return node_; }

  const std::vector<double>& data() const;
  const std::shared_ptr<std::vector<double>>& storage() const { return data_; }
  double operator[](std::size_t i) const { return data()[i]; }
  // Value of a one-element tensor.
  double value() const;

 private:
  std::shared_ptr<std::vector<double>> data_;
  Shape shape_;
  int node_ = -1;
};

// Define-by-run reverse-mode tape.  Constructing a Tape makes it the active
// tape for the current thread (they nest); ops record backward closures on
// the active tape whenever any input is connected.  Gradients are stored on
// the tape keyed by node id, so several backward passes (model loss, critic
// loss, actor loss) can run over one recorded graph with zero_grad() between
// them.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();
  // True when ops should record: a tape is active and not suspended.
  static bool recording();

  std::uint64_t id() const { return id_; }
  std::size_t size() const { return nodes_.size(); }

  // Appends a node; back may be empty for leaves.  Returns the node id; the
  // closure receives the tape and the node's own id during the sweep.
  int add_node(std::function<void(Tape&, int)> back);

  // Gradient buffer for a node, allocated (zero-filled) on first touch.
  std::vector<double>& grad(int node, std::size_t n);
  bool has_grad(int node) const;
  const std::vector<double>& grad_view(int node) const;

  // Seeds d(loss)/d(loss) = 1 and walks the tape backwards.  loss must be a
  // one-element tensor connected to this tape.  Nodes never touched by the
  // sweep keep no gradient (treated as zero by consumers).
  void backward(const Tensor& loss);
  void zero_grad();

 private:
  friend class NoGradGuard;
  struct Node {
    std::function<void(Tape&, int)> back;
  };
  std::vector<Node> nodes_;
  std::vector<std::vector<double>> grads_;
  std::uint64_t id_ = 0;
  bool enabled_ = true;
  Tape* prev_ = nullptr;
};

// Suspends gradient recording on the active tape for the guard's lifetime.
// Used for evaluation-only math (metrics, Monte Carlo estimates, targets).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();

 private:
  Tape* tape_;
  bool prev_ = false;
};

// ---- Operations ------------------------------------------------------------
//
// Binary elementwise ops broadcast in four ways: identical shapes; a
// one-element operand against anything; a lower-rank operand whose shape is a
// trailing suffix of the other ([D] against [B,D], the bias case); or equal
// rank with the last axis of one operand equal to 1 ([B,1] against [B,D], the
// per-row case).  Anything else raises a Shape error.

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

// Convenience wrappers over scalar constants.
Tensor scale(const Tensor& x, double c);
Tensor add_const(const Tensor& x, double c);
Tensor neg(const Tensor& x);

// Strict rank-2 matrix product [M,K] x [K,N] -> [M,N].
Tensor matmul(const Tensor& a, const Tensor& b);

// Last-axis concatenation / slicing; leading dims must agree.
Tensor concat(const Tensor& a, const Tensor& b);
Tensor slice(const Tensor& x, std::size_t lo, std::size_t hi);

// Full reductions to a scalar, and a keep-dim reduction over the last axis
// ([B,D] -> [B,1], [D] -> [1]).
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor sum_last(const Tensor& x);

Tensor tanh_t(const Tensor& x);
Tensor sigmoid_t(const Tensor& x);
Tensor exp_t(const Tensor& x);
Tensor log_t(const Tensor& x);
Tensor softplus_t(const Tensor& x);
Tensor square_t(const Tensor& x);
Tensor relu_t(const Tensor& x);

// Materialises x broadcast to `target` under the same rules as binary ops.
Tensor broadcast_to(const Tensor& x, const Shape& target);
Tensor reshape(const Tensor& x, Shape shape);

// Identity on values; blocks the gradient exactly (the result is a constant,
// so upstream parameters receive bitwise-zero contribution from this path).
Tensor stop_gradient(const Tensor& x);

// 2-D convolution on channel-last layout.  x is rank-4 [B,H,W,Ci], kernel is
// [kh,kw,Ci,Co], valid padding.  conv2d requires (H - kh) % stride == 0 (same
// for W) so that a transposed convolution with the same geometry mirrors it
// exactly.
Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride);
// Transposed convolution: x is [B,h,w,Ci], kernel [kh,kw,Ci,Co], output
// [B,(h-1)*stride+kh,(w-1)*stride+kw,Co].
Tensor conv2d_transpose(const Tensor& x, const Tensor& kernel, std::size_t stride);

}  // namespace flowbelief
