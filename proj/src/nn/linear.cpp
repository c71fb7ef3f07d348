#include "pidg/nn/linear.hpp"

#include <cmath>

#include "pidg/ad/ops.hpp"

namespace pidg::nn {

Linear::Linear(std::string name, std::size_t in, std::size_t out, Init init, std::mt19937_64& rng)
    : weight_(name + ".weight", ad::Tensor({in, out}, 0.0)),
      bias_(name + ".bias", ad::Tensor({1, out}, 0.0)) {
  if (init == Init::kUniform) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (double& v : weight_.value.values()) v = u(rng);
    for (double& v : bias_.value.values()) v = u(rng);
  }
}

ad::Var Linear::forward(ad::Binder& bind, const ad::Var& x) {
  return ad::add_row(ad::matmul(x, bind(weight_)), bind(bias_));
}

ad::Jet Linear::forward(ad::Binder& bind, const ad::Jet& x) {
  return ad::jet_affine(x, bind(weight_), bind(bias_));
}

}  // namespace pidg::nn
