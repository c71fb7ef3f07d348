#pragma once

#include <array>
#include <cstddef>
#include <span>

#include "pidg/ad/tape.hpp"

namespace pidg::ad {

// Number of input coordinates carried by a jet: (x, y, z, t).
inline constexpr std::size_t kJetDims = 4;

// A batch of values together with their partial derivatives with respect to
// the four input coordinates. Both the value and the tangents are ordinary tape
// nodes, so anything computed from a jet (for example a momentum residual) is
// itself differentiable with respect to network weights.
//
// An invalid tangent Var stands for an identically zero derivative.
struct Jet {
  Var value;
  std::array<Var, kJetDims> d;

  std::size_t rows() const { return value.rows(); }
  std::size_t cols() const { return value.cols(); }
  // Materialized tangent (zeros when the tangent is structurally zero).
  Var tangent(std::size_t k) const;
};

// Jet of a constant (all tangents zero).
Jet jet_constant(const Var& value);

// Input coordinates as a jet: `points` is M x 4, tangent k is the unit column k.
Jet jet_coordinates(Tape& tape, const Tensor& points);

Jet jet_add(const Jet& a, const Jet& b);
Jet jet_sub(const Jet& a, const Jet& b);
Jet jet_mul(const Jet& a, const Jet& b);
Jet jet_scale(const Jet& a, double s);
Jet jet_add_scalar(const Jet& a, double s);
// x * W + b with W, b ordinary variables (weights carry no coordinate tangent).
Jet jet_affine(const Jet& x, const Var& weight, const Var& bias);
Jet jet_relu(const Jet& a);
Jet jet_sigmoid(const Jet& a);
Jet jet_sin(const Jet& a);
Jet jet_cos(const Jet& a);
Jet jet_slice_cols(const Jet& a, std::size_t begin, std::size_t end);
Jet jet_concat_cols(std::span<const Jet> parts);
// a: R x C times column c: R x 1, broadcast over columns.
Jet jet_mul_col(const Jet& a, const Jet& col);

}  // namespace pidg::ad
