#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "flowbelief/rng.hpp"
#include "flowbelief/tensor.hpp"

namespace flowbelief {

// A named trainable array together with its Adam moments.  Parameter owns the
// storage; use() exposes it to the active tape as a leaf tensor (one leaf per
// tape, cached, so gradients from several uses accumulate on a single node).
struct Parameter {
  std::string name;
  Shape shape;
  std::shared_ptr<std::vector<double>> value;
  std::vector<double> m, v;  // Adam first/second moments
  std::int64_t steps = 0;    // Adam steps taken (for bias correction)

  Parameter() = default;
  Parameter(std::string name_, Shape shape_, std::vector<double> init);

  std::size_t size() const { return value ? value->size() : 0; }
  Tensor use();

  // Leaf cache: valid while the tape with this id is the one in use.
  std::uint64_t cached_tape = 0;
  int cached_node = -1;
};

// Initializers.
std::vector<double> glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t n, Rng& rng);
std::vector<double> zeros_init(std::size_t n);

// While alive, every Parameter::use() on this thread yields a constant view
// (current values, no tape node): modules run with frozen weights, and
// gradients flow only through their inputs.  Nests.
class FreezeParamsGuard {
 public:
  FreezeParamsGuard();
  ~FreezeParamsGuard();
  FreezeParamsGuard(const FreezeParamsGuard&) = delete;
  FreezeParamsGuard& operator=(const FreezeParamsGuard&) = delete;

  static bool active();

 private:
  bool prev_;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Global L2 norm of the recorded gradients of `params` on `tape`; parameters
// the sweep never reached count as zero.
double grad_norm(const Tape& tape, const std::vector<Parameter*>& params);

// Rescales all gradients in place so the global norm is at most max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(Tape& tape, const std::vector<Parameter*>& params, double max_norm);

// Bias-corrected Adam update over the group, reading gradients from the tape.
// Parameters without a recorded gradient are updated with g = 0 (their
// moments decay).  Raises a Numeric error on non-finite gradients.
void adam_step(Tape& tape, const std::vector<Parameter*>& params, const AdamConfig& cfg);

}  // namespace flowbelief
