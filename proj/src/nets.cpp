#include "flowbelief/nets.hpp"

namespace flowbelief {

Dense::Dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool zero_init)
    : W(name + ".W", {in, out},
        zero_init ? zeros_init(in * out) : glorot_uniform(in, out, in * out, rng)),
      b(name + ".b", {out}, zeros_init(out)) {}

Tensor Dense::operator()(const Tensor& x) { return add(matmul(x, W.use()), b.use()); }

void Dense::collect(std::vector<Parameter*>& out) {
  out.push_back(&W);
  out.push_back(&b);
}

MLP::MLP(const std::string& name, std::size_t in, const std::vector<std::size_t>& hidden,
         std::size_t out, Rng& rng, bool zero_init_out) {
  layers.reserve(hidden.size() + 1);
  std::size_t prev = in;
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    layers.emplace_back(name + ".fc" + std::to_string(i), prev, hidden[i], rng);
    prev = hidden[i];
  }
  layers.emplace_back(name + ".out", prev, out, rng, zero_init_out);
}

Tensor MLP::operator()(const Tensor& x) {
  Tensor h = x;
  for (std::size_t i = 0; i + 1 < layers.size(); ++i) h = relu_t(layers[i](h));
  return layers.back()(h);
}

void MLP::collect(std::vector<Parameter*>& out) {
  for (auto& l : layers) l.collect(out);
}

GRUCell::GRUCell(const std::string& name, std::size_t input, std::size_t hidden, Rng& rng)
    : input_dim(input),
      hidden_dim(hidden),
      Wx(name + ".Wx", {input, 3 * hidden}, glorot_uniform(input, hidden, input * 3 * hidden, rng)),
      bx(name + ".bx", {3 * hidden}, zeros_init(3 * hidden)),
      Wh(name + ".Wh", {hidden, 3 * hidden}, glorot_uniform(hidden, hidden, hidden * 3 * hidden, rng)),
      bh(name + ".bh", {3 * hidden}, zeros_init(3 * hidden)) {}

Tensor GRUCell::step(const Tensor& h, const Tensor& x) {
  const std::size_t Z = hidden_dim;
  Tensor gx = add(matmul(x, Wx.use()), bx.use());
  Tensor gh = add(matmul(h, Wh.use()), bh.use());
  Tensor r = sigmoid_t(add(slice(gx, 0, Z), slice(gh, 0, Z)));
  Tensor z = sigmoid_t(add(slice(gx, Z, 2 * Z), slice(gh, Z, 2 * Z)));
  Tensor n = tanh_t(add(slice(gx, 2 * Z, 3 * Z), mul(r, slice(gh, 2 * Z, 3 * Z))));
  // h' = (1 - z) * n + z * h
  return add(mul(sub(Tensor::scalar(1.0), z), n), mul(z, h));
}

void GRUCell::collect(std::vector<Parameter*>& out) {
  for (Parameter* p : {&Wx, &bx, &Wh, &bh}) out.push_back(p);
}

ResidualParamNet::ResidualParamNet(const std::string& name, std::size_t in, std::size_t hidden,
                                   std::size_t out, Rng& rng)
    : fc_in(name + ".fc_in", in, hidden, rng),
      res_a(name + ".res_a", hidden, hidden, rng),
      res_b(name + ".res_b", hidden, hidden, rng),
      fc_out(name + ".fc_out", hidden, out, rng, /*zero_init=*/true) {}

Tensor ResidualParamNet::operator()(const Tensor& x) {
  Tensor h = relu_t(fc_in(x));
  Tensor r = add(h, res_b(relu_t(res_a(h))));
  return fc_out(r);
}

void ResidualParamNet::collect(std::vector<Parameter*>& out) {
  fc_in.collect(out);
  res_a.collect(out);
  res_b.collect(out);
  fc_out.collect(out);
}

}  // namespace flowbelief
