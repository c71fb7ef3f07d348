#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "pidg/ad/tensor.hpp"

namespace pidg::ad {

// A learnable tensor that outlives any single tape. Gradients from every
// backward pass that touches it accumulate into `grad` until zero_grad().
struct Parameter {
  std::string name;
  Tensor value;
  Tensor grad;

  Parameter() = default;
  Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {}

  void zero_grad();
  // Allocates `grad` with the value's shape if it is missing or stale.
  Tensor& ensure_grad();
};

class Tape;

// Handle to a node on a tape. Cheap to copy; becomes stale when the tape is
// cleared.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const { return id_; }
  const Tensor& value() const;
  const std::vector<std::size_t>& shape() const { return value().shape(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id, std::uint64_t generation)
      : tape_(tape), id_(id), generation_(generation) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
  std::uint64_t generation_ = 0;
};

// Reverse-mode record. Nodes are appended in evaluation order, so parents
// always precede children and the backward sweep is a single pass in exact
// reverse creation order. A tape belongs to one thread at a time.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  Var leaf(Tensor value);
  // Leaf that reads `p.value` in place. backward() adds into `p.grad`.
  Var parameter(Parameter& p);

  // Appends an op node. `backward` may be empty for ops without gradients; it
  // is dropped when no parent requires a gradient. Throws NonFiniteError if
  // `value` holds NaN/Inf, naming `op` and the node index.
  Var record(const char* op, Tensor value, std::initializer_list<Var> parents,
             BackwardFn backward);
  Var record(const char* op, Tensor value, std::span<const Var> parents, BackwardFn backward);

  const Tensor& value(const Var& v) const;
  bool requires_grad(const Var& v) const;

  // For use inside backward functions: the adjoint buffer of `v`, or nullptr
  // when `v` does not take gradients.
  Tensor* grad_slot(const Var& v);

  // Seeds d(out)/d(out) = seed and sweeps the tape. `out` must hold a single
  // value. Parameter leaves accumulate seed * d(out)/d(p) into p.grad.
  void backward(const Var& out, double seed = 1.0);

  // d(out)/d(input) for each input, without touching Parameter gradients.
  // Rejects non-scalar outputs and inputs that do not take gradients.
  std::vector<Tensor> gradients(const Var& out, std::span<const Var> inputs);

  void clear();
  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }

 private:
  struct Node {
    const char* op = "";
    Tensor value;
    const Tensor* external = nullptr;
    Parameter* param = nullptr;
    Tensor grad;
    bool requires_grad = false;
    BackwardFn backward;
    const Tensor& val() const { return external ? *external : value; }
  };

  Var make_var(std::size_t id) { return Var(this, id, generation_); }
  void check(const Var& v) const;
  void sweep(const Var& out, double seed);

  std::deque<Node> nodes_;  // stable addresses: values stay valid while recording
  std::uint64_t generation_ = 1;
};

}  // namespace pidg::ad
