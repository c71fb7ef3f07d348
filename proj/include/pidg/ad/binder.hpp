#pragma once

#include <unordered_map>

#include "pidg/ad/tape.hpp"

namespace pidg::ad {

// Registers each Parameter on a tape at most once, so a module can be called
// several times in one recording without duplicating leaves.
class Binder {
 public:
  explicit Binder(Tape& tape) : tape_(&tape) {}

  Tape& tape() const { return *tape_; }
  Var operator()(Parameter& p) {
    auto it = bound_.find(&p);
    if (it != bound_.end()) return it->second;
    Var v = tape_->parameter(p);
    bound_.emplace(&p, v);
    return v;
  }
  // Bound value without gradient flow (for frozen modules).
  Var frozen(Parameter& p) { return tape_->constant(p.value); }

 private:
  Tape* tape_;
  std::unordered_map<const Parameter*, Var> bound_;
};

}  // namespace pidg::ad
