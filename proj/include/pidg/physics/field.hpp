#pragma once

#include <Eigen/Core>
#include <array>
#include <cstdint>
#include <span>

#include "pidg/ad/binder.hpp"
#include "pidg/ad/jet.hpp"

namespace pidg::physics {

// Stress components are packed (xx, yy, zz, xy, xz, yz).
inline constexpr std::size_t kStressComponents = 6;

// Column of the packed stress holding sigma_ij.
constexpr std::size_t stress_index(std::size_t i, std::size_t j) {
  if (i == j) return i;
  const std::size_t a = i < j ? i : j, b = i < j ? j : i;
  return a == 0 ? (b == 1 ? 3 : 4) : 5;
}

Eigen::Matrix3d stress_to_matrix(std::span<const double> packed);
std::array<double, kStressComponents> matrix_to_stress(const Eigen::Matrix3d& sigma);

// Velocity (M x 3) and packed stress (M x 6) with their derivatives in
// physical (x, y, z, t).
struct FieldJet {
  ad::Jet velocity;
  ad::Jet stress;
};

// A velocity/stress field that can be differentiated in its input coordinates.
class JetField {
 public:
  virtual ~JetField() = default;
  // `points` is M x 4 physical (x, y, z, t); `ids` names the particle behind
  // each row (fields without per-particle state ignore it).
  virtual FieldJet evaluate(ad::Binder& bind, const ad::Tensor& points,
                            std::span<const std::int64_t> ids) = 0;
};

}  // namespace pidg::physics
