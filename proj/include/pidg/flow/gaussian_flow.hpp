#pragma once

#include <cstdint>
#include <vector>

#include "pidg/ad/tape.hpp"
#include "pidg/flow/flow_field.hpp"
#include "pidg/render/rasterize.hpp"

namespace pidg::flow {

// Contributors whose 2D covariance has an eigenvalue below this (px^2) are dropped.
inline constexpr double kMinEigenvalue = 1e-12;

// Per-pixel flow from the top-K contributors of a render at time t, as an
// {H*W, 2} tape variable plus a validity mask (pixels with no usable
// contributor are invalid and hold zero).
struct FlowPrediction {
  ad::Var flow;
  std::vector<std::uint8_t> valid;
};

// Each contributor maps pixel p to U S U^T (p - mu_t) + target, where U are
// the eigenvectors of cov_t, S = sqrt(Lambda_next / Lambda_t) and Lambda_next
// is the diagonal of U^T cov_next U. The flow is the renormalized
// weight-sum of (mapped - p). Top-K weights are treated as constants.
// means: N x 2, covs: N x 3 packed (xx, xy, yy), rows indexed like topk.
ad::Var topk_flow(const render::TopK& topk, const ad::Var& means_t, const ad::Var& cov_t, const ad::Var& target,
                  const ad::Var& cov_next, std::vector<std::uint8_t>* valid);

// Gaussian flow: target = mu_{t+1}.
FlowPrediction gaussian_flow(const render::TopK& topk, const ad::Var& means_t, const ad::Var& cov_t,
                             const ad::Var& means_next, const ad::Var& cov_next);

// Velocity flow: target = mu_t + v2d dt, with v2d the per-particle velocity in
// pixels per unit time.
FlowPrediction velocity_flow(const render::TopK& topk, const ad::Var& means_t, const ad::Var& cov_t,
                             const ad::Var& velocity2d, const ad::Var& cov_next, double dt);

// Pixel-space velocity of world-space velocities (N x 3) through the camera's
// projection Jacobian at the given world positions. Differentiable in the
// velocity only.
ad::Var project_velocity(const render::Camera& camera, const ad::Tensor& positions, const ad::Var& velocity);

// Converts a prediction's values into a FlowField.
FlowField to_flow_field(const FlowPrediction& p, int width, int height);

struct LpfmWeights {
  double gaussian = 0.5;
  double velocity = 0.5;
};

struct LpfmResult {
  ad::Var loss;
  std::size_t pixels = 0;
  bool empty = false;  // no supervised pixel; loss is a constant zero
};

// Mean over pixels that are valid in the ground truth, set in the mask and
// covered in both predictions, of w_g |flow_g - gt|_1 + w_v |flow_v - gt|_1.
LpfmResult lpfm_loss(const FlowPrediction& flow_g, const FlowPrediction& flow_v, const FlowField& gt,
                     const Mask& mask, const LpfmWeights& weights = {});

}  // namespace pidg::flow
