#include "flowbelief/tensor.hpp"

#include <atomic>
#include <cmath>
#include <cstring>

namespace flowbelief {

namespace {

thread_local Tape* g_current_tape = nullptr;

std::uint64_t next_tape_id() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

void check_finite(const char* op, const std::vector<double>& v, const Shape& shape) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw Error(Error::Code::Numeric,
                  std::string(op) + " produced a non-finite value, output shape " + shape_str(shape));
    }
  }
}

// How the smaller operand of a binary op maps onto the larger one.
enum class BMap { Identity, Scalar, Suffix, Column };

struct BPlan {
  Shape out;
  BMap a = BMap::Identity;
  BMap b = BMap::Identity;
  std::size_t a_numel = 0, b_numel = 0;
  std::size_t out_last = 1;  // last axis of the output, for Column mapping
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.empty() || small.size() >= big.size()) return false;
  for (std::size_t i = 0; i < small.size(); ++i) {
    if (small[small.size() - 1 - i] != big[big.size() - 1 - i]) return false;
  }
  return true;
}

bool is_column(const Shape& small, const Shape& big) {
  if (small.size() != big.size() || small.empty()) return false;
  for (std::size_t i = 0; i + 1 < small.size(); ++i) {
    if (small[i] != big[i]) return false;
  }
  return small.back() == 1 && big.back() > 1;
}

BPlan resolve_broadcast(const char* op, const Shape& as, const Shape& bs) {
  BPlan p;
  p.a_numel = numel(as);
  p.b_numel = numel(bs);
  if (as == bs) {
    p.out = as;
  } else if (p.b_numel == 1) {
    p.out = as;
    p.b = BMap::Scalar;
  } else if (p.a_numel == 1) {
    p.out = bs;
    p.a = BMap::Scalar;
  } else if (is_suffix(bs, as)) {
    p.out = as;
    p.b = BMap::Suffix;
  } else if (is_suffix(as, bs)) {
    p.out = bs;
    p.a = BMap::Suffix;
  } else if (is_column(bs, as)) {
    p.out = as;
    p.b = BMap::Column;
  } else if (is_column(as, bs)) {
    p.out = bs;
    p.a = BMap::Column;
  } else {
    throw Error(Error::Code::Shape, std::string(op) + ": incompatible shapes " + shape_str(as) +
                                        " and " + shape_str(bs));
  }
  p.out_last = p.out.empty() ? 1 : p.out.back();
  return p;
}

inline std::size_t map_index(BMap m, std::size_t i, std::size_t n_small, std::size_t out_last) {
  switch (m) {
    case BMap::Identity: return i;
    case BMap::Scalar: return 0;
    case BMap::Suffix: return i % n_small;
    case BMap::Column: return i / out_last;
  }
  return i;
}

Tensor make_out(Shape shape, std::vector<double> values) {
  return Tensor::wrap(std::make_shared<std::vector<double>>(std::move(values)), std::move(shape), -1);
}

// Shared skeleton for elementwise binary ops.  fwd(a_i, b_i) computes the
// value; da/db give the local gradient contributions g * d(out)/d(input),
// evaluated from the upstream gradient and both operand values.
template <class Fwd, class Da, class Db>
Tensor binary_op(const char* name, const Tensor& a, const Tensor& b, Fwd fwd, Da da, Db db) {
  BPlan p = resolve_broadcast(name, a.shape(), b.shape());
  const std::size_t n = numel(p.out);
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = fwd(av[map_index(p.a, i, p.a_numel, p.out_last)],
                 bv[map_index(p.b, i, p.b_numel, p.out_last)]);
  }
  check_finite(name, out, p.out);
  Tensor result = make_out(p.out, std::move(out));
  if (Tape::recording() && (a.node() >= 0 || b.node() >= 0)) {
    Tensor ac = a, bc = b;  // keep storage alive for the sweep
    int id = Tape::current()->add_node([ac, bc, p, da, db](Tape& t, int self) {
      const auto& g = t.grad_view(self);
      const auto& avd = ac.data();
      const auto& bvd = bc.data();
      if (ac.node() >= 0) {
        auto& ga = t.grad(ac.node(), p.a_numel);
        for (std::size_t i = 0; i < g.size(); ++i) {
          std::size_t ia = map_index(p.a, i, p.a_numel, p.out_last);
          ga[ia] += da(g[i], avd[ia], bvd[map_index(p.b, i, p.b_numel, p.out_last)]);
        }
      }
      if (bc.node() >= 0) {
        auto& gb = t.grad(bc.node(), p.b_numel);
        for (std::size_t i = 0; i < g.size(); ++i) {
          std::size_t ib = map_index(p.b, i, p.b_numel, p.out_last);
          gb[ib] += db(g[i], avd[map_index(p.a, i, p.a_numel, p.out_last)], bvd[ib]);
        }
      }
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

// Unary op skeleton; dfn(g, x_i, y_i) is the gradient contribution.
template <class Fwd, class Dfn>
Tensor unary_op(const char* name, const Tensor& x, Fwd fwd, Dfn dfn) {
  const auto& xv = x.data();
  std::vector<double> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  check_finite(name, out, x.shape());
  Tensor result = make_out(x.shape(), std::move(out));
  if (Tape::recording() && x.node() >= 0) {
    Tensor xc = x;
    auto ys = result.storage();
    int id = Tape::current()->add_node([xc, ys, dfn](Tape& t, int self) {
      const auto& g = t.grad_view(self);
      const auto& xv2 = xc.data();
      const auto& yv = *ys;
      auto& gx = t.grad(xc.node(), xv2.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += dfn(g[i], xv2[i], yv[i]);
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  auto storage = std::make_shared<std::vector<double>>(numel(shape), value);
  return wrap(std::move(storage), std::move(shape), -1);
}

Tensor Tensor::scalar(double value) { return full(Shape{}, value); }

Tensor Tensor::from(Shape shape, std::vector<double> values) {
  if (numel(shape) != values.size()) {
    throw Error(Error::Code::Shape, "Tensor::from: " + shape_str(shape) + " does not hold " +
                                        std::to_string(values.size()) + " values");
  }
  return wrap(std::make_shared<std::vector<double>>(std::move(values)), std::move(shape), -1);
}

Tensor Tensor::wrap(std::shared_ptr<std::vector<double>> storage, Shape shape, int node) {
  Tensor t;
  t.data_ = std::move(storage);
  t.shape_ = std::move(shape);
  t.node_ = node;
  return t;
}

const std::vector<double>& Tensor::data() const {
  if (!data_) throw Error(Error::Code::Logic, "use of an undefined tensor");
  return *data_;
}

double Tensor::value() const {
  const auto& v = data();
  if (v.size() != 1) {
    throw Error(Error::Code::Shape, "value() requires a one-element tensor, got " + shape_str(shape_));
  }
  return v[0];
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() : id_(next_tape_id()), prev_(g_current_tape) { g_current_tape = this; }

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

bool Tape::recording() { return g_current_tape != nullptr && g_current_tape->enabled_; }

int Tape::add_node(std::function<void(Tape&, int)> back) {
  nodes_.push_back(Node{std::move(back)});
  grads_.emplace_back();
  return static_cast<int>(nodes_.size()) - 1;
}

std::vector<double>& Tape::grad(int node, std::size_t n) {
  auto& g = grads_.at(static_cast<std::size_t>(node));
  if (g.empty()) {
    g.assign(n, 0.0);
  } else if (g.size() != n) {
    throw Error(Error::Code::Logic, "gradient size mismatch on tape node");
  }
  return g;
}

bool Tape::has_grad(int node) const {
  return node >= 0 && static_cast<std::size_t>(node) < grads_.size() &&
         !grads_[static_cast<std::size_t>(node)].empty();
}

const std::vector<double>& Tape::grad_view(int node) const {
  if (!has_grad(node)) {
    throw Error(Error::Code::Logic, "no gradient recorded for tape node");
  }
  return grads_[static_cast<std::size_t>(node)];
}

void Tape::backward(const Tensor& loss) {
  if (loss.node() < 0) {
    throw Error(Error::Code::Logic, "backward: loss is not connected to the active tape");
  }
  if (loss.size() != 1) {
    throw Error(Error::Code::Shape, "backward: loss must be a one-element tensor, got " +
                                        shape_str(loss.shape()));
  }
  grad(loss.node(), 1)[0] += 1.0;
  for (int i = loss.node(); i >= 0; --i) {
    auto& buf = grads_[static_cast<std::size_t>(i)];
    if (buf.empty()) continue;  // not reached by any path from the loss
    auto& node = nodes_[static_cast<std::size_t>(i)];
    if (node.back) node.back(*this, i);
  }
}

void Tape::zero_grad() {
  for (auto& g : grads_) g.clear();
}

NoGradGuard::NoGradGuard() : tape_(g_current_tape) {
  if (tape_) {
    prev_ = tape_->enabled_;
    tape_->enabled_ = false;
  }
}

NoGradGuard::~NoGradGuard() {
  if (tape_) tape_->enabled_ = prev_;
}

// ---- Elementwise binary ops ------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return g; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double g, double, double) { return g; }, [](double g, double, double) { return -g; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double g, double, double y) { return g * y; },
      [](double g, double x, double) { return g * x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double g, double, double y) { return g / y; },
      [](double g, double x, double y) { return -g * x / (y * y); });
}

Tensor scale(const Tensor& x, double c) { return mul(x, Tensor::scalar(c)); }

Tensor add_const(const Tensor& x, double c) { return add(x, Tensor::scalar(c)); }

Tensor neg(const Tensor& x) { return scale(x, -1.0); }

// ---- Matrix multiply -------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw Error(Error::Code::Shape,
                "matmul: need [M,K] x [K,N], got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t M = a.shape()[0], K = a.shape()[1], N = b.shape()[1];
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(M * N, 0.0);
  for (std::size_t m = 0; m < M; ++m) {
    const double* arow = av.data() + m * K;
    double* orow = out.data() + m * N;
    for (std::size_t k = 0; k < K; ++k) {
      const double s = arow[k];
      if (s == 0.0) continue;
      const double* brow = bv.data() + k * N;
      for (std::size_t n = 0; n < N; ++n) orow[n] += s * brow[n];
    }
  }
  Shape oshape{M, N};
  check_finite("matmul", out, oshape);
  Tensor result = make_out(oshape, std::move(out));
  if (Tape::recording() && (a.node() >= 0 || b.node() >= 0)) {
    Tensor ac = a, bc = b;
    int id = Tape::current()->add_node([ac, bc, M, K, N](Tape& t, int self) {
      const auto& g = t.grad_view(self);
      const auto& avd = ac.data();
      const auto& bvd = bc.data();
      if (ac.node() >= 0) {
        auto& ga = t.grad(ac.node(), M * K);
        for (std::size_t m = 0; m < M; ++m) {
          const double* grow = g.data() + m * N;
          double* garow = ga.data() + m * K;
          for (std::size_t k = 0; k < K; ++k) {
            const double* brow = bvd.data() + k * N;
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n) s += grow[n] * brow[n];
            garow[k] += s;
          }
        }
      }
      if (bc.node() >= 0) {
        auto& gb = t.grad(bc.node(), K * N);
        for (std::size_t m = 0; m < M; ++m) {
          const double* arow = avd.data() + m * K;
          const double* grow = g.data() + m * N;
          for (std::size_t k = 0; k < K; ++k) {
            const double s = arow[k];
            if (s == 0.0) continue;
            double* gbrow = gb.data() + k * N;
            for (std::size_t n = 0; n < N; ++n) gbrow[n] += s * grow[n];
          }
        }
      }
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

// ---- Concat / slice --------------------------------------------------------

Tensor concat(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || a.rank() == 0) {
    throw Error(Error::Code::Shape,
                "concat: ranks differ, " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  for (std::size_t i = 0; i + 1 < a.rank(); ++i) {
    if (a.shape()[i] != b.shape()[i]) {
      throw Error(Error::Code::Shape, "concat: leading dims differ, " + shape_str(a.shape()) +
                                          " vs " + shape_str(b.shape()));
    }
  }
  const std::size_t al = a.shape().back(), bl = b.shape().back();
  const std::size_t rows = numel(a.shape()) / std::max<std::size_t>(al, 1);
  Shape oshape = a.shape();
  oshape.back() = al + bl;
  const auto& av = a.data();
  const auto& bv = b.data();
  std::vector<double> out(rows * (al + bl));
  for (std::size_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * (al + bl), av.data() + r * al, al * sizeof(double));
    std::memcpy(out.data() + r * (al + bl) + al, bv.data() + r * bl, bl * sizeof(double));
  }
  Tensor result = make_out(oshape, std::move(out));
  if (Tape::recording() && (a.node() >= 0 || b.node() >= 0)) {
    Tensor ac = a, bc = b;
    int id = Tape::current()->add_node([ac, bc, rows, al, bl](Tape& t, int self) {
      const auto& g = t.grad_view(self);
      if (ac.node() >= 0) {
        auto& ga = t.grad(ac.node(), rows * al);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < al; ++j) ga[r * al + j] += g[r * (al + bl) + j];
      }
      if (bc.node() >= 0) {
        auto& gb = t.grad(bc.node(), rows * bl);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < bl; ++j) gb[r * bl + j] += g[r * (al + bl) + al + j];
      }
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

Tensor slice(const Tensor& x, std::size_t lo, std::size_t hi) {
  if (x.rank() == 0 || hi > x.shape().back() || lo >= hi) {
    throw Error(Error::Code::Shape, "slice: range [" + std::to_string(lo) + "," + std::to_string(hi) +
                                        ") invalid for " + shape_str(x.shape()));
  }
  const std::size_t last = x.shape().back();
  const std::size_t width = hi - lo;
  const std::size_t rows = numel(x.shape()) / last;
  Shape oshape = x.shape();
  oshape.back() = width;
  const auto& xv = x.data();
  std::vector<double> out(rows * width);
  for (std::size_t r = 0; r < rows; ++r) {
    std::memcpy(out.data() + r * width, xv.data() + r * last + lo, width * sizeof(double));
  }
  Tensor result = make_out(oshape, std::move(out));
  if (Tape::recording() && x.node() >= 0) {
    Tensor xc = x;
    int id = Tape::current()->add_node([xc, rows, last, lo, width](Tape& t, int self) {
      const auto& g = t.grad_view(self);
      auto& gx = t.grad(xc.node(), rows * last);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < width; ++j) gx[r * last + lo + j] += g[r * width + j];
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

// ---- Reductions ------------------------------------------------------------

Tensor sum(const Tensor& x) {
  const auto& xv = x.data();
  double s = 0.0;
  for (double v : xv) s += v;
  Shape oshape{};
  check_finite("sum", {s}, oshape);
  Tensor result = make_out(oshape, {s});
  if (Tape::recording() && x.node() >= 0) {
    Tensor xc = x;
    int id = Tape::current()->add_node([xc](Tape& t, int self) {
      const double g = t.grad_view(self)[0];
      auto& gx = t.grad(xc.node(), xc.size());
      for (double& v : gx) v += g;
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

Tensor mean(const Tensor& x) {
  const auto& xv = x.data();
  if (xv.empty()) throw Error(Error::Code::Shape, "mean of an empty tensor");
  double s = 0.0;
  for (double v : xv) s += v;
  s /= static_cast<double>(xv.size());
  Shape oshape{};
  check_finite("mean", {s}, oshape);
  Tensor result = make_out(oshape, {s});
  if (Tape::recording() && x.node() >= 0) {
    Tensor xc = x;
    int id = Tape::current()->add_node([xc](Tape& t, int self) {
      const double g = t.grad_view(self)[0] / static_cast<double>(xc.size());
      auto& gx = t.grad(xc.node(), xc.size());
      for (double& v : gx) v += g;
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

Tensor sum_last(const Tensor& x) {
  if (x.rank() == 0) throw Error(Error::Code::Shape, "sum_last needs rank >= 1");
  const std::size_t last = x.shape().back();
  const std::size_t rows = numel(x.shape()) / last;
  Shape oshape = x.shape();
  oshape.back() = 1;
  const auto& xv = x.data();
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < last; ++j) s += xv[r * last + j];
    out[r] = s;
  }
  check_finite("sum_last", out, oshape);
  Tensor result = make_out(oshape, std::move(out));
  if (Tape::recording() && x.node() >= 0) {
    Tensor xc = x;
    int id = Tape::current()->add_node([xc, rows, last](Tape& t, int self) {
      const auto& g = t.grad_view(self);
      auto& gx = t.grad(xc.node(), rows * last);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < last; ++j) gx[r * last + j] += g[r];
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

// ---- Elementwise unary ops -------------------------------------------------

Tensor tanh_t(const Tensor& x) {
  return unary_op(
      "tanh", x, [](double v) { return std::tanh(v); },
      [](double g, double, double y) { return g * (1.0 - y * y); });
}

Tensor sigmoid_t(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
      [](double g, double, double y) { return g * y * (1.0 - y); });
}

Tensor exp_t(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double g, double, double y) { return g * y; });
}

Tensor log_t(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double g, double v, double) { return g / v; });
}

Tensor softplus_t(const Tensor& x) {
  return unary_op(
      "softplus", x,
      [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); },
      [](double g, double v, double) {
        return g * (v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)));
      });
}

Tensor square_t(const Tensor& x) {
  return unary_op(
      "square", x, [](double v) { return v * v; },
      [](double g, double v, double) { return 2.0 * g * v; });
}

Tensor relu_t(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0 ? v : 0.0; },
      [](double g, double v, double) { return v > 0 ? g : 0.0; });
}

// ---- Shape ops -------------------------------------------------------------

Tensor broadcast_to(const Tensor& x, const Shape& target) {
  if (x.shape() == target) return x;
  BPlan p = resolve_broadcast("broadcast_to", target, x.shape());
  if (p.out != target) {
    throw Error(Error::Code::Shape,
                "broadcast_to: cannot expand " + shape_str(x.shape()) + " to " + shape_str(target));
  }
  const std::size_t n = numel(target);
  const auto& xv = x.data();
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = xv[map_index(p.b, i, p.b_numel, p.out_last)];
  Tensor result = make_out(target, std::move(out));
  if (Tape::recording() && x.node() >= 0) {
    Tensor xc = x;
    int id = Tape::current()->add_node([xc, p, n](Tape& t, int self) {
      const auto& g = t.grad_view(self);
      auto& gx = t.grad(xc.node(), p.b_numel);
      for (std::size_t i = 0; i < n; ++i) gx[map_index(p.b, i, p.b_numel, p.out_last)] += g[i];
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size()) {
    throw Error(Error::Code::Shape,
                "reshape: " + shape_str(x.shape()) + " has wrong element count for " + shape_str(shape));
  }
  Tensor result = Tensor::wrap(x.storage(), std::move(shape), -1);
  if (Tape::recording() && x.node() >= 0) {
    Tensor xc = x;
    int id = Tape::current()->add_node([xc](Tape& t, int self) {
      const auto& g = t.grad_view(self);
      auto& gx = t.grad(xc.node(), xc.size());
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

Tensor stop_gradient(const Tensor& x) {
  // Same storage, no tape node: downstream consumers see the value, the
  // backward sweep never reaches anything upstream of x through this edge.
  return Tensor::wrap(x.storage(), x.shape(), -1);
}

// ---- Convolutions ----------------------------------------------------------

namespace {

void conv_geometry(const char* op, const Tensor& x, const Tensor& k, std::size_t stride) {
  if (x.rank() != 4 || k.rank() != 4) {
    throw Error(Error::Code::Shape, std::string(op) + ": need rank-4 input and kernel, got " +
                                        shape_str(x.shape()) + " and " + shape_str(k.shape()));
  }
  if (stride == 0) throw Error(Error::Code::Shape, std::string(op) + ": stride must be positive");
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride) {
  conv_geometry("conv2d", x, kernel, stride);
  const std::size_t B = x.shape()[0], H = x.shape()[1], W = x.shape()[2], Ci = x.shape()[3];
  const std::size_t kh = kernel.shape()[0], kw = kernel.shape()[1];
  if (kernel.shape()[2] != Ci) {
    throw Error(Error::Code::Shape, "conv2d: kernel expects " + std::to_string(kernel.shape()[2]) +
                                        " input channels, input has " + std::to_string(Ci));
  }
  const std::size_t Co = kernel.shape()[3];
  if (H < kh || W < kw || (H - kh) % stride != 0 || (W - kw) % stride != 0) {
    throw Error(Error::Code::Shape, "conv2d: geometry (" + std::to_string(H) + "x" + std::to_string(W) +
                                        ", k=" + std::to_string(kh) + ", s=" + std::to_string(stride) +
                                        ") does not tile exactly");
  }
  const std::size_t Ho = (H - kh) / stride + 1, Wo = (W - kw) / stride + 1;
  const auto& xv = x.data();
  const auto& kv = kernel.data();
  std::vector<double> out(B * Ho * Wo * Co, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < Ho; ++i) {
      for (std::size_t j = 0; j < Wo; ++j) {
        double* orow = out.data() + ((b * Ho + i) * Wo + j) * Co;
        for (std::size_t di = 0; di < kh; ++di) {
          for (std::size_t dj = 0; dj < kw; ++dj) {
            const double* xrow = xv.data() + ((b * H + i * stride + di) * W + j * stride + dj) * Ci;
            const double* krow = kv.data() + (di * kw + dj) * Ci * Co;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double s = xrow[ci];
              if (s == 0.0) continue;
              const double* kk = krow + ci * Co;
              for (std::size_t co = 0; co < Co; ++co) orow[co] += s * kk[co];
            }
          }
        }
      }
    }
  }
  Shape oshape{B, Ho, Wo, Co};
  check_finite("conv2d", out, oshape);
  Tensor result = make_out(oshape, std::move(out));
  if (Tape::recording() && (x.node() >= 0 || kernel.node() >= 0)) {
    Tensor xc = x, kc = kernel;
    int id = Tape::current()->add_node([xc, kc, B, H, W, Ci, kh, kw, Co, Ho, Wo, stride](Tape& t, int self) {
      const auto& g = t.grad_view(self);
      const auto& xvd = xc.data();
      const auto& kvd = kc.data();
      std::vector<double>* gx = xc.node() >= 0 ? &t.grad(xc.node(), xvd.size()) : nullptr;
      std::vector<double>* gk = kc.node() >= 0 ? &t.grad(kc.node(), kvd.size()) : nullptr;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < Ho; ++i) {
          for (std::size_t j = 0; j < Wo; ++j) {
            const double* grow = g.data() + ((b * Ho + i) * Wo + j) * Co;
            for (std::size_t di = 0; di < kh; ++di) {
              for (std::size_t dj = 0; dj < kw; ++dj) {
                const std::size_t xoff = ((b * H + i * stride + di) * W + j * stride + dj) * Ci;
                const std::size_t koff = (di * kw + dj) * Ci * Co;
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                  double gxd = 0.0;
                  for (std::size_t co = 0; co < Co; ++co) {
                    const double gv = grow[co];
                    gxd += gv * kvd[koff + ci * Co + co];
                    if (gk) (*gk)[koff + ci * Co + co] += gv * xvd[xoff + ci];
                  }
                  if (gx) (*gx)[xoff + ci] += gxd;
                }
              }
            }
          }
        }
      }
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

Tensor conv2d_transpose(const Tensor& x, const Tensor& kernel, std::size_t stride) {
  conv_geometry("conv2d_transpose", x, kernel, stride);
  const std::size_t B = x.shape()[0], h = x.shape()[1], w = x.shape()[2], Ci = x.shape()[3];
  const std::size_t kh = kernel.shape()[0], kw = kernel.shape()[1];
  if (kernel.shape()[2] != Ci) {
    throw Error(Error::Code::Shape, "conv2d_transpose: kernel expects " +
                                        std::to_string(kernel.shape()[2]) + " input channels, input has " +
                                        std::to_string(Ci));
  }
  const std::size_t Co = kernel.shape()[3];
  const std::size_t Ho = (h - 1) * stride + kh, Wo = (w - 1) * stride + kw;
  const auto& xv = x.data();
  const auto& kv = kernel.data();
  std::vector<double> out(B * Ho * Wo * Co, 0.0);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < w; ++j) {
        const double* xrow = xv.data() + ((b * h + i) * w + j) * Ci;
        for (std::size_t di = 0; di < kh; ++di) {
          for (std::size_t dj = 0; dj < kw; ++dj) {
            double* orow = out.data() + ((b * Ho + i * stride + di) * Wo + j * stride + dj) * Co;
            const double* krow = kv.data() + (di * kw + dj) * Ci * Co;
            for (std::size_t ci = 0; ci < Ci; ++ci) {
              const double s = xrow[ci];
              if (s == 0.0) continue;
              const double* kk = krow + ci * Co;
              for (std::size_t co = 0; co < Co; ++co) orow[co] += s * kk[co];
            }
          }
        }
      }
    }
  }
  Shape oshape{B, Ho, Wo, Co};
  check_finite("conv2d_transpose", out, oshape);
  Tensor result = make_out(oshape, std::move(out));
  if (Tape::recording() && (x.node() >= 0 || kernel.node() >= 0)) {
    Tensor xc = x, kc = kernel;
    int id = Tape::current()->add_node([xc, kc, B, h, w, Ci, kh, kw, Co, Ho, Wo, stride](Tape& t, int self) {
      const auto& g = t.grad_view(self);
      const auto& xvd = xc.data();
      const auto& kvd = kc.data();
      std::vector<double>* gx = xc.node() >= 0 ? &t.grad(xc.node(), xvd.size()) : nullptr;
      std::vector<double>* gk = kc.node() >= 0 ? &t.grad(kc.node(), kvd.size()) : nullptr;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t xoff = ((b * h + i) * w + j) * Ci;
            for (std::size_t di = 0; di < kh; ++di) {
              for (std::size_t dj = 0; dj < kw; ++dj) {
                const double* grow =
                    g.data() + ((b * Ho + i * stride + di) * Wo + j * stride + dj) * Co;
                const std::size_t koff = (di * kw + dj) * Ci * Co;
                for (std::size_t ci = 0; ci < Ci; ++ci) {
                  double gxd = 0.0;
                  for (std::size_t co = 0; co < Co; ++co) {
                    const double gv = grow[co];
                    gxd += gv * kvd[koff + ci * Co + co];
                    if (gk) (*gk)[koff + ci * Co + co] += gv * xvd[xoff + ci];
                  }
                  if (gx) (*gx)[xoff + ci] += gxd;
                }
              }
            }
          }
        }
      }
    });
    result = Tensor::wrap(result.storage(), result.shape(), id);
  }
  return result;
}

}  // namespace flowbelief
