#include "pidg/ad/coord_jacobian.hpp"

#include <string>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"

namespace pidg::ad {

Eigen::MatrixXd coord_jacobian(const CoordField& field, const std::array<double, 4>& point) {
  for (double c : point) {
    if (!(c >= 0.0 && c <= 1.0)) {
      throw DomainError("coord_jacobian: coordinate " + std::to_string(c) +
                        " outside the normalized domain [0,1]");
    }
  }
  Tape tape;
  Var p = tape.leaf(Tensor({1, 4}, {point[0], point[1], point[2], point[3]}));
  Var out = field(tape, p);
  const std::size_t k = out.value().size();
  Var flat = reshape(out, {1, k});
  Eigen::MatrixXd jac(static_cast<Eigen::Index>(k), 4);
  for (std::size_t i = 0; i < k; ++i) {
    Var component = slice_cols(flat, i, i + 1);
    const Var inputs[] = {p};
    auto grads = tape.gradients(component, inputs);
    for (std::size_t j = 0; j < 4; ++j) jac(static_cast<Eigen::Index>(i), j) = grads[0][j];
  }
  return jac;
}

}  // namespace pidg::ad
