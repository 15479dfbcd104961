#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "flowbelief/optim.hpp"
#include "flowbelief/rng.hpp"
#include "flowbelief/tensor.hpp"
#include "oracles.hpp"

using namespace flowbelief;

namespace {

Parameter randp(const std::string& name, Shape shape, Rng& rng, double lo = -0.8, double hi = 0.8) {
  std::vector<double> init(numel(shape));
  for (double& x : init) x = rng.uniform(lo, hi);
  return Parameter(name, std::move(shape), std::move(init));
}

Tensor randt(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(v));
}

// Scalarise an arbitrary output with fixed random weights so every element
// gets a distinct gradient.
Tensor weighted_sum(const Tensor& y, const Tensor& w) { return sum(mul(y, w)); }

}  // namespace

TEST_CASE("binary elementwise ops match finite differences") {
  Rng rng(11);
  Parameter a = randp("a", {3, 4}, rng);
  Parameter b = randp("b", {3, 4}, rng);
  Tensor w = randt({3, 4}, rng);

  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(add(a.use(), b.use()), w); }, {&a, &b}),
           1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(sub(a.use(), b.use()), w); }, {&a, &b}),
           1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(mul(a.use(), b.use()), w); }, {&a, &b}),
           1e-6);

  Parameter denom = randp("denom", {3, 4}, rng, 1.0, 2.5);
  CHECK_LT(
      oracle::check_gradients([&] { return weighted_sum(div(a.use(), denom.use()), w); }, {&a, &denom}),
      1e-6);
}

TEST_CASE("broadcast variants match finite differences") {
  Rng rng(12);
  Parameter a = randp("a", {3, 4}, rng);
  Parameter bias = randp("bias", {4}, rng);      // suffix broadcast
  Parameter col = randp("col", {3, 1}, rng);     // column broadcast
  Parameter sc = randp("sc", {1}, rng, 0.5, 2.0);  // scalar broadcast
  Tensor w = randt({3, 4}, rng);

  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(add(a.use(), bias.use()), w); }, {&a, &bias}),
           1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(mul(a.use(), col.use()), w); }, {&a, &col}),
           1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(div(a.use(), sc.use()), w); }, {&a, &sc}),
           1e-6);
  // Smaller operand first.
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(sub(bias.use(), a.use()), w); }, {&a, &bias}),
           1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(mul(col.use(), a.use()), w); }, {&a, &col}),
           1e-6);
}

TEST_CASE("matmul matches finite differences") {
  Rng rng(13);
  Parameter a = randp("a", {3, 4}, rng);
  Parameter b = randp("b", {4, 2}, rng);
  Tensor w = randt({3, 2}, rng);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(matmul(a.use(), b.use()), w); }, {&a, &b}),
           1e-6);
}

TEST_CASE("concat and slice match finite differences") {
  Rng rng(14);
  Parameter a = randp("a", {2, 3}, rng);
  Parameter b = randp("b", {2, 2}, rng);
  Tensor w = randt({2, 5}, rng);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(concat(a.use(), b.use()), w); }, {&a, &b}),
           1e-6);

  Tensor ws = randt({2, 2}, rng);
  CHECK_LT(
      oracle::check_gradients([&] { return weighted_sum(slice(a.use(), 1, 3), ws); }, {&a}),
      1e-6);
}

TEST_CASE("reductions match finite differences") {
  Rng rng(15);
  Parameter a = randp("a", {3, 4}, rng);
  Tensor wl = randt({3, 1}, rng);
  CHECK_LT(oracle::check_gradients([&] { return sum(a.use()); }, {&a}), 1e-6);
  CHECK_LT(oracle::check_gradients([&] { return mean(a.use()); }, {&a}), 1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(sum_last(a.use()), wl); }, {&a}), 1e-6);

  // Shape contracts.
  CHECK(sum(randt({3, 4}, rng)).shape() == Shape{});
  CHECK(sum_last(randt({3, 4}, rng)).shape() == Shape{3, 1});
  CHECK(sum_last(randt({4}, rng)).shape() == Shape{1});
  const Tensor x = Tensor::from({2, 2}, {1, 2, 3, 4});
  CHECK(sum_last(x)[0] == 3.0);
  CHECK(sum_last(x)[1] == 7.0);
  CHECK(mean(x).value() == 2.5);
}

TEST_CASE("unary ops match finite differences") {
  Rng rng(16);
  Parameter a = randp("a", {3, 4}, rng);
  Parameter pos = randp("pos", {3, 4}, rng, 0.4, 2.0);
  Tensor w = randt({3, 4}, rng);

  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(tanh_t(a.use()), w); }, {&a}), 1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(sigmoid_t(a.use()), w); }, {&a}), 1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(exp_t(a.use()), w); }, {&a}), 1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(log_t(pos.use()), w); }, {&pos}), 1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(softplus_t(a.use()), w); }, {&a}), 1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(square_t(a.use()), w); }, {&a}), 1e-6);
  // relu is kinked at zero; keep probes away from it.
  Parameter off = randp("off", {3, 4}, rng, 0.2, 1.0);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(relu_t(off.use()), w); }, {&off}), 1e-6);
  Parameter negp = randp("neg", {3, 4}, rng, -1.0, -0.2);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(relu_t(negp.use()), w); }, {&negp}), 1e-6);
}

TEST_CASE("broadcast_to and reshape match finite differences") {
  Rng rng(17);
  Parameter bias = randp("bias", {4}, rng);
  Parameter col = randp("col", {3, 1}, rng);
  Parameter sc = randp("sc", {1}, rng);
  Parameter a = randp("a", {2, 6}, rng);
  Tensor w = randt({3, 4}, rng);

  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(broadcast_to(bias.use(), {3, 4}), w); },
                                   {&bias}),
           1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(broadcast_to(col.use(), {3, 4}), w); },
                                   {&col}),
           1e-6);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(broadcast_to(sc.use(), {3, 4}), w); },
                                   {&sc}),
           1e-6);

  Tensor w2 = randt({3, 4}, rng);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(reshape(a.use(), {3, 4}), w2); }, {&a}),
           1e-6);
  // reshape is zero-copy
  Tensor t = randt({2, 3}, rng);
  CHECK(reshape(t, {6}).storage() == t.storage());
}

TEST_CASE("conv2d and conv2d_transpose match finite differences") {
  Rng rng(18);
  Parameter x = randp("x", {2, 5, 5, 2}, rng);
  Parameter k = randp("k", {3, 3, 2, 3}, rng);
  Tensor w = randt({2, 2, 2, 3}, rng);
  CHECK_LT(
      oracle::check_gradients([&] { return weighted_sum(conv2d(x.use(), k.use(), 2), w); }, {&x, &k}),
      1e-6);

  Parameter xt = randp("xt", {2, 2, 2, 3}, rng);
  Parameter kt = randp("kt", {3, 3, 3, 2}, rng);
  Tensor wt = randt({2, 5, 5, 2}, rng);
  CHECK_LT(oracle::check_gradients([&] { return weighted_sum(conv2d_transpose(xt.use(), kt.use(), 2), wt); },
                                   {&xt, &kt}),
           1e-6);

  // Transposed geometry mirrors the forward geometry.
  Tensor y = conv2d(randt({1, 9, 9, 1}, rng), randt({3, 3, 1, 2}, rng), 2);
  CHECK(y.shape() == Shape{1, 4, 4, 2});
  Tensor back = conv2d_transpose(y, randt({3, 3, 2, 1}, rng), 2);
  CHECK(back.shape() == Shape{1, 9, 9, 1});
}

TEST_CASE("stop_gradient blocks gradient exactly and keeps the value") {
  Rng rng(19);
  Parameter wp = randp("w", {4}, rng, 0.2, 1.0);

  // y = sg(w) . w  =>  dy/dw = sg(w) = value of w, not 2w.
  Tape tape;
  Tensor wt = wp.use();
  Tensor y = sum(mul(stop_gradient(wt), wt));
  tape.backward(y);
  const auto& g = tape.grad_view(wp.cached_node);
  for (std::size_t i = 0; i < 4; ++i) CHECK(g[i] == (*wp.value)[i]);

  // Value path is untouched (same storage, bitwise identical).
  CHECK(stop_gradient(wt).storage() == wt.storage());

  // A parameter reachable only through stop_gradient gets no gradient at all.
  Parameter q = randp("q", {3}, rng);
  Tape tape2;
  Tensor loss = sum(stop_gradient(scale(q.use(), 3.0)));
  CHECK_THROWS_AS(tape2.backward(loss), Error);  // fully disconnected loss
}

TEST_CASE("parameter used twice accumulates on one node") {
  Rng rng(20);
  Parameter w = randp("w", {3, 3}, rng);
  Tensor x = randt({2, 3}, rng);
  Tensor z = randt({2, 3}, rng);
  Tensor s = randt({2, 3}, rng);
  CHECK_LT(oracle::check_gradients(
               [&] {
                 Tensor y = add(matmul(x, w.use()), matmul(z, w.use()));
                 return weighted_sum(y, s);
               },
               {&w}),
           1e-6);
}

TEST_CASE("three-step recurrent sequence loss matches finite differences") {
  Rng rng(21);
  Parameter W = randp("W", {7, 4}, rng, -0.5, 0.5);
  Parameter b = randp("b", {4}, rng, -0.1, 0.1);
  std::vector<Tensor> xs = {randt({2, 3}, rng), randt({2, 3}, rng), randt({2, 3}, rng)};

  auto build = [&] {
    Tensor h = Tensor::zeros({2, 4});
    Tensor loss = Tensor::scalar(0.0);
    for (int t = 0; t < 3; ++t) {
      h = tanh_t(add(matmul(concat(h, xs[t]), W.use()), b.use()));
      loss = add(loss, mean(square_t(h)));
    }
    return loss;
  };
  CHECK_LT(oracle::check_gradients(build, {&W, &b}), 1e-4);
}

TEST_CASE("repeated backward with zero_grad reproduces gradients exactly") {
  Rng rng(22);
  Parameter w = randp("w", {5}, rng);
  Tensor c = randt({5}, rng);

  Tape tape;
  Tensor loss = sum(mul(square_t(w.use()), c));
  tape.backward(loss);
  std::vector<double> first = tape.grad_view(w.cached_node);

  tape.zero_grad();
  tape.backward(loss);
  std::vector<double> second = tape.grad_view(w.cached_node);
  CHECK(first == second);

  // Two different losses over one recorded graph (the update-step pattern):
  // each backward sees exactly its own gradient after zero_grad.
  tape.zero_grad();
  Tensor other = sum(mul(w.use(), c));
  tape.backward(other);
  for (std::size_t i = 0; i < 5; ++i) CHECK(tape.grad_view(w.cached_node)[i] == c[i]);
}

TEST_CASE("adam matches an independent scalar implementation") {
  Parameter w("w", {3}, {0.5, -0.2, 1.0});
  const std::vector<double> c = {0.3, -1.1, 0.7};
  oracle::ScalarAdam ref[3];
  std::vector<double> expect = {0.5, -0.2, 1.0};

  AdamConfig cfg;
  cfg.lr = 1e-3;
  for (int step = 0; step < 5; ++step) {
    Tape tape;
    Tensor loss = sum(mul(w.use(), Tensor::from({3}, c)));
    tape.backward(loss);
    adam_step(tape, {&w}, cfg);
    for (int i = 0; i < 3; ++i) expect[i] = ref[i].step(expect[i], c[i], cfg.lr);
    for (int i = 0; i < 3; ++i) CHECK((*w.value)[i] == doctest::Approx(expect[i]).epsilon(1e-12));
  }
  // With a constant gradient the parameter moves by about lr per step.
  CHECK(std::fabs((0.5 - (*w.value)[0]) - 5e-3) < 1e-4);
}

TEST_CASE("clip_grad_norm rescales only above the threshold") {
  Parameter a("a", {2}, {0.0, 0.0});
  Parameter b("b", {1}, {0.0});
  const std::vector<double> ga = {3.0, 4.0};  // norm 5 with gb=0

  Tape tape;
  Tensor loss = add(sum(mul(a.use(), Tensor::from({2}, ga))), scale(sum(b.use()), 0.0));
  tape.backward(loss);
  CHECK(grad_norm(tape, {&a, &b}) == doctest::Approx(5.0).epsilon(1e-12));

  // Below threshold: untouched.
  std::vector<double> before = tape.grad_view(a.cached_node);
  CHECK(clip_grad_norm(tape, {&a, &b}, 10.0) == doctest::Approx(5.0));
  CHECK(tape.grad_view(a.cached_node) == before);

  // Above threshold: rescaled to the max norm.
  CHECK(clip_grad_norm(tape, {&a, &b}, 1.0) == doctest::Approx(5.0));
  CHECK(grad_norm(tape, {&a, &b}) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("adam with an unreachable parameter leaves it unchanged") {
  Parameter used("used", {2}, {1.0, 2.0});
  Parameter unused("unused", {2}, {5.0, 6.0});
  Tape tape;
  Tensor loss = sum(square_t(used.use()));
  tape.backward(loss);
  AdamConfig cfg;
  adam_step(tape, {&used, &unused}, cfg);
  CHECK((*unused.value)[0] == 5.0);
  CHECK((*unused.value)[1] == 6.0);
  CHECK(unused.steps == 1);
  CHECK((*used.value)[0] != 1.0);
}

TEST_CASE("structured errors carry category and shapes") {
  CHECK_THROWS_WITH_AS(matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2})),
                       doctest::Contains("[shape]"), Error);
  CHECK_THROWS_WITH_AS(log_t(Tensor::from({1}, {-1.0})), doctest::Contains("[numeric]"), Error);
  CHECK_THROWS_WITH_AS(div(Tensor::from({1}, {1.0}), Tensor::from({1}, {0.0})),
                       doctest::Contains("[numeric]"), Error);
  CHECK_THROWS_WITH_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({3, 2})),
                       doctest::Contains("[shape]"), Error);

  Tape tape;
  Parameter w("w", {2}, {1.0, 1.0});
  Tensor vec = square_t(w.use());
  CHECK_THROWS_AS(tape.backward(vec), Error);  // non-scalar loss
}

TEST_CASE("no-grad guard suspends recording") {
  Tape tape;
  Parameter w("w", {2}, {1.0, 2.0});
  const std::size_t before = tape.size();
  {
    NoGradGuard guard;
    Tensor y = square_t(add(w.use(), Tensor::from({2}, {1.0, 1.0})));
    CHECK(y.node() == -1);
  }
  CHECK(tape.size() == before);
  // Recording resumes after the guard.
  Tensor y = square_t(w.use());
  CHECK(y.node() >= 0);
}

TEST_CASE("branches not reached by the loss receive no gradient") {
  Rng rng(23);
  Parameter w1 = randp("w1", {3}, rng);
  Parameter w2 = randp("w2", {3}, rng);
  Tape tape;
  Tensor used = sum(square_t(w1.use()));
  Tensor unused = sum(square_t(w2.use()));
  (void)unused;
  tape.backward(used);
  CHECK(tape.has_grad(w1.cached_node));
  CHECK_FALSE(tape.has_grad(w2.cached_node));
}
