#pragma once

#include <Eigen/Core>

#include "pidg/ad/tape.hpp"

namespace pidg::geometry {

// Quaternions are stored (w, x, y, z).
using Quaternion = Eigen::Vector4d;

inline constexpr double kMinQuaternionNorm = 1e-8;

// Rotation matrix of a unit quaternion.
Eigen::Matrix3d rotation_matrix(const Quaternion& unit_q);

// Normalizes q; throws DomainError when |q| < kMinQuaternionNorm.
Quaternion normalized(const Quaternion& q);

// Chain rule through rotation_matrix: given dL/dR, returns dL/dq at the unit
// quaternion (before any normalization step).
Quaternion rotation_matrix_vjp(const Quaternion& unit_q, const Eigen::Matrix3d& grad_r);

// Chain rule through q -> q/|q|.
Quaternion normalize_vjp(const Quaternion& q, const Quaternion& grad_unit);

// Unit quaternion for a rotation of `angle` radians about `axis`.
Quaternion axis_angle(const Eigen::Vector3d& axis, double angle);

// Hamilton product a * b.
Quaternion multiply(const Quaternion& a, const Quaternion& b);

// Tape ops over row batches.

// Rows of `quats` (N x 4) are normalized; throws DomainError on a degenerate
// row, naming it.
ad::Var normalize_quaternions(const ad::Var& quats);

// Row i of the result is R(q_i / |q_i|) p_i, for quats N x 4 and points N x 3.
ad::Var rotate_points(const ad::Var& quats, const ad::Var& points);

}  // namespace pidg::geometry
