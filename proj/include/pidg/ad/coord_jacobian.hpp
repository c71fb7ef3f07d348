#pragma once

#include <Eigen/Core>
#include <array>
#include <functional>

#include "pidg/ad/tape.hpp"

namespace pidg::ad {

// A field R^4 -> R^k built from tape ops. Receives the query point as a 1 x 4
// leaf and returns a 1 x k row.
using CoordField = std::function<Var(Tape&, const Var& point)>;

// k x 4 matrix of partials: row i = (dfi/dx, dfi/dy, dfi/dz, dfi/dt) at
// `point`, computed with k reverse sweeps over one recording. Throws
// DomainError when the point leaves the normalized domain [0,1]^4.
Eigen::MatrixXd coord_jacobian(const CoordField& field, const std::array<double, 4>& point);

}  // namespace pidg::ad
