#pragma once

#include <string>
#include <vector>

#include "flowbelief/optim.hpp"
#include "flowbelief/tensor.hpp"

namespace flowbelief {

// Small trainable modules.  Each module owns its Parameters by value and
// exposes them through collect(); owning objects must stay at a fixed address
// once constructed (hold the top-level model in a unique_ptr and never move
// it), so the collected pointers stay valid for the optimizer.

struct Dense {
  Parameter W, b;

  Dense() = default;
  // Glorot-uniform weight, zero bias; zero_init makes the whole layer zero so
  // the module computes the zero function at initialization.
  Dense(const std::string& name, std::size_t in, std::size_t out, Rng& rng, bool zero_init = false);

  Tensor operator()(const Tensor& x);
  void collect(std::vector<Parameter*>& out);
};

// Fully connected stack with ReLU hidden activations and a linear output.
struct MLP {
  std::vector<Dense> layers;

  MLP() = default;
  MLP(const std::string& name, std::size_t in, const std::vector<std::size_t>& hidden,
      std::size_t out, Rng& rng, bool zero_init_out = false);

  Tensor operator()(const Tensor& x);
  void collect(std::vector<Parameter*>& out);
};

// Gated recurrent unit cell (reset/update gates, candidate gated on the
// hidden-to-hidden path).  step maps (h [B,Z], x [B,I]) -> h' [B,Z].
struct GRUCell {
  std::size_t input_dim = 0, hidden_dim = 0;
  Parameter Wx, bx;  // [I, 3Z], [3Z], gate order (r, z, n)
  Parameter Wh, bh;  // [Z, 3Z], [3Z]

  GRUCell() = default;
  GRUCell(const std::string& name, std::size_t input, std::size_t hidden, Rng& rng);

  Tensor step(const Tensor& h, const Tensor& x);
  void collect(std::vector<Parameter*>& out);
};

// Conditioner for coupling layers: a fully connected layer, one residual
// block, and a final fully connected layer.  The final layer is zero-
// initialized so the conditioner outputs zeros at the start of training.
struct ResidualParamNet {
  Dense fc_in, res_a, res_b, fc_out;

  ResidualParamNet() = default;
  ResidualParamNet(const std::string& name, std::size_t in, std::size_t hidden, std::size_t out,
                   Rng& rng);

  Tensor operator()(const Tensor& x);
  void collect(std::vector<Parameter*>& out);
};

}  // namespace flowbelief
