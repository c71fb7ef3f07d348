#pragma once

#include <random>
#include <string>

#include "pidg/ad/binder.hpp"
#include "pidg/ad/jet.hpp"

namespace pidg::nn {

enum class Init { kUniform, kZero };

// Fully connected layer y = x W + b with W stored {in, out}.
class Linear {
 public:
  Linear() = default;
  Linear(std::string name, std::size_t in, std::size_t out, Init init, std::mt19937_64& rng);

  std::size_t in_features() const { return weight_.value.rows(); }
  std::size_t out_features() const { return weight_.value.cols(); }

  ad::Var forward(ad::Binder& bind, const ad::Var& x);
  ad::Jet forward(ad::Binder& bind, const ad::Jet& x);

  ad::Parameter& weight() { return weight_; }
  ad::Parameter& bias() { return bias_; }

 private:
  ad::Parameter weight_;
  ad::Parameter bias_;
};

}  // namespace pidg::nn
