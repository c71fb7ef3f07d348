#include "pidg/ad/tape.hpp"

#include <string>

#include "pidg/common/error.hpp"

namespace pidg::ad {

void Parameter::zero_grad() {
  if (grad.same_shape(value)) {
    grad.fill(0.0);
  } else {
    grad = Tensor(value.shape(), 0.0);
  }
}

Tensor& Parameter::ensure_grad() {
  if (!grad.same_shape(value)) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Tape& Var::tape() const {
  if (!tape_) throw Error("use of an empty Var");
  return *tape_;
}

const Tensor& Var::value() const { return tape().value(*this); }

bool Var::requires_grad() const { return tape().requires_grad(*this); }

void Tape::check(const Var& v) const {
  if (v.tape_ != this) throw Error("Var belongs to a different tape");
  if (v.generation_ != generation_ || v.id_ >= nodes_.size()) {
    throw Error("stale Var: tape was cleared since it was created");
  }
}

Var Tape::constant(Tensor value) {
  return record("constant", std::move(value), std::span<const Var>{}, nullptr);
}

Var Tape::leaf(Tensor value) {
  if (!value.all_finite()) throw NonFiniteError("leaf holds non-finite values");
  Node n;
  n.op = "leaf";
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return make_var(nodes_.size() - 1);
}

Var Tape::parameter(Parameter& p) {
  if (!p.value.all_finite()) {
    throw NonFiniteError("parameter '" + p.name + "' holds non-finite values");
  }
  Node n;
  n.op = "parameter";
  n.external = &p.value;
  n.param = &p;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return make_var(nodes_.size() - 1);
}

Var Tape::record(const char* op, Tensor value, std::initializer_list<Var> parents,
                 BackwardFn backward) {
  return record(op, std::move(value), std::span<const Var>(parents.begin(), parents.size()),
                std::move(backward));
}

Var Tape::record(const char* op, Tensor value, std::span<const Var> parents,
                 BackwardFn backward) {
  bool needs = false;
  for (const auto& p : parents) {
    check(p);
    needs = needs || nodes_[p.id_].requires_grad;
  }
  if (!value.all_finite()) {
    throw NonFiniteError(std::string("op '") + op + "' (node " + std::to_string(nodes_.size()) +
                         ") produced a non-finite value");
  }
  Node n;
  n.op = op;
  n.value = std::move(value);
  n.requires_grad = needs;
  if (needs) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return make_var(nodes_.size() - 1);
}

const Tensor& Tape::value(const Var& v) const {
  check(v);
  return nodes_[v.id_].val();
}

bool Tape::requires_grad(const Var& v) const {
  check(v);
  return nodes_[v.id_].requires_grad;
}

Tensor* Tape::grad_slot(const Var& v) {
  check(v);
  Node& n = nodes_[v.id_];
  if (!n.requires_grad) return nullptr;
  if (!n.grad.same_shape(n.val())) n.grad = Tensor(n.val().shape(), 0.0);
  return &n.grad;
}

void Tape::sweep(const Var& out, double seed) {
  check(out);
  if (nodes_[out.id_].val().size() != 1) {
    throw ShapeError("gradient requested of non-scalar output with shape " +
                     nodes_[out.id_].val().shape_string());
  }
  for (auto& n : nodes_) n.grad = Tensor();
  if (!nodes_[out.id_].requires_grad) return;
  nodes_[out.id_].grad = Tensor(nodes_[out.id_].val().shape(), seed);
  for (std::size_t i = out.id_ + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.grad.empty() || !n.backward) continue;
    if (!n.grad.all_finite()) {
      throw NonFiniteError(std::string("non-finite adjoint at op '") + n.op + "' (node " +
                           std::to_string(i) + ")");
    }
    // Copy: the callback may reallocate other nodes' buffers but never this one.
    const Tensor& g = n.grad;
    n.backward(*this, g);
  }
}

void Tape::backward(const Var& out, double seed) {
  sweep(out, seed);
  for (auto& n : nodes_) {
    if (n.param && !n.grad.empty()) {
      if (!n.grad.all_finite()) {
        throw NonFiniteError("non-finite gradient for parameter '" + n.param->name + "'");
      }
      n.param->ensure_grad() += n.grad;
    }
  }
}

std::vector<Tensor> Tape::gradients(const Var& out, std::span<const Var> inputs) {
  for (const auto& in : inputs) {
    check(in);
    if (!nodes_[in.id_].requires_grad) {
      throw Error("gradient requested for detached input (node " + std::to_string(in.id_) + ")");
    }
  }
  sweep(out, 1.0);
  std::vector<Tensor> result;
  result.reserve(inputs.size());
  for (const auto& in : inputs) {
    const Node& n = nodes_[in.id_];
    result.push_back(n.grad.empty() ? Tensor(n.val().shape(), 0.0) : n.grad);
  }
  return result;
}

void Tape::clear() {
  nodes_.clear();
  ++generation_;
}

}  // namespace pidg::ad
