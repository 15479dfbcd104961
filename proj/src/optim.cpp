#include "flowbelief/optim.hpp"

#include <cmath>

namespace flowbelief {

Parameter::Parameter(std::string name_, Shape shape_, std::vector<double> init)
    : name(std::move(name_)), shape(std::move(shape_)) {
  if (numel(shape) != init.size()) {
    throw Error(Error::Code::Shape,
                "parameter " + name + ": init size does not match " + shape_str(shape));
  }
  value = std::make_shared<std::vector<double>>(std::move(init));
  m.assign(value->size(), 0.0);
  v.assign(value->size(), 0.0);
}

namespace {
thread_local bool g_freeze_params = false;
}  // namespace

FreezeParamsGuard::FreezeParamsGuard() : prev_(g_freeze_params) { g_freeze_params = true; }
FreezeParamsGuard::~FreezeParamsGuard() { g_freeze_params = prev_; }
bool FreezeParamsGuard::active() { return g_freeze_params; }

Tensor Parameter::use() {
  Tape* tape = Tape::current();
  if (g_freeze_params || tape == nullptr || !Tape::recording()) {
    return Tensor::wrap(value, shape, -1);
  }
  if (cached_tape != tape->id() || cached_node < 0 ||
      static_cast<std::size_t>(cached_node) >= tape->size()) {
    cached_node = tape->add_node({});  // leaf: gradient sink, nothing upstream
    cached_tape = tape->id();
  }
  return Tensor::wrap(value, shape, cached_node);
}

std::vector<double> glorot_uniform(std::size_t fan_in, std::size_t fan_out, std::size_t n, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> out(n);
  for (double& x : out) x = rng.uniform(-limit, limit);
  return out;
}

std::vector<double> zeros_init(std::size_t n) { return std::vector<double>(n, 0.0); }

namespace {

const std::vector<double>* grad_of(const Tape& tape, const Parameter& p) {
  if (p.cached_tape != tape.id() || !tape.has_grad(p.cached_node)) return nullptr;
  return &tape.grad_view(p.cached_node);
}

}  // namespace

double grad_norm(const Tape& tape, const std::vector<Parameter*>& params) {
  double sq = 0.0;
  for (const Parameter* p : params) {
    if (const auto* g = grad_of(tape, *p)) {
      for (double x : *g) sq += x * x;
    }
  }
  return std::sqrt(sq);
}

double clip_grad_norm(Tape& tape, const std::vector<Parameter*>& params, double max_norm) {
  const double norm = grad_norm(tape, params);
  if (!std::isfinite(norm)) {
    throw Error(Error::Code::Numeric, "clip_grad_norm: non-finite gradient norm");
  }
  if (norm > max_norm && norm > 0.0) {
    const double s = max_norm / norm;
    for (Parameter* p : params) {
      if (p->cached_tape != tape.id() || !tape.has_grad(p->cached_node)) continue;
      auto& g = tape.grad(p->cached_node, p->size());
      for (double& x : g) x *= s;
    }
  }
  return norm;
}

void adam_step(Tape& tape, const std::vector<Parameter*>& params, const AdamConfig& cfg) {
  for (Parameter* p : params) {
    const std::vector<double>* g = grad_of(tape, *p);
    p->steps += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->steps));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->steps));
    auto& val = *p->value;
    for (std::size_t i = 0; i < val.size(); ++i) {
      const double gi = g ? (*g)[i] : 0.0;
      if (!std::isfinite(gi)) {
        throw Error(Error::Code::Numeric, "adam_step: non-finite gradient for " + p->name);
      }
      p->m[i] = cfg.beta1 * p->m[i] + (1.0 - cfg.beta1) * gi;
      p->v[i] = cfg.beta2 * p->v[i] + (1.0 - cfg.beta2) * gi * gi;
      const double mhat = p->m[i] / bc1;
      const double vhat = p->v[i] / bc2;
      val[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
}

}  // namespace flowbelief
