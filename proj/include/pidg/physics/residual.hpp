#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <random>
#include <vector>

#include "pidg/physics/field.hpp"

namespace pidg::physics {

struct ResidualOptions {
  double density = 1.0;
  // Drop (v . grad) v, for linearized dynamics such as small-amplitude elastic waves.
  bool advection = true;
};

// Per-sample momentum balance, each term M x 3:
// residual = inertial - divergence, inertial = rho (dv/dt + (v . grad) v),
// divergence_j = sum_i d sigma_ij / d x_i.
struct MomentumResidual {
  ad::Var inertial;
  ad::Var divergence;
  ad::Var residual;
};

MomentumResidual momentum_residual(const FieldJet& jet, const ResidualOptions& options = {});

// Residual of `field` at a single physical point.
Eigen::Vector3d momentum_residual(JetField& field, const Eigen::Vector4d& point, std::int64_t id,
                                  const ResidualOptions& options = {});

// Mean squared residual norm, (1/M) sum |r|^2.
ad::Var cmr_loss(const MomentumResidual& r);

struct CmrSamples {
  ad::Tensor points;  // M x 4 physical
  std::vector<std::int64_t> ids;
};

// Records one tape for all samples and returns the loss value.
double cmr_loss(JetField& field, const CmrSamples& samples, const ResidualOptions& options = {});

struct BlockCmrOptions {
  std::size_t block_size = 1024;
  double sample_fraction = 1.0;
  // When nonzero, each block's loss is backpropagated with this factor times
  // its count weight, accumulating into the field's parameters.
  double grad_scale = 0.0;
  ResidualOptions residual;
};

struct BlockCmrResult {
  double loss = 0.0;
  std::size_t samples = 0;
  std::size_t blocks = 0;
};

// Splits samples into blocks of contiguous particle ids, evaluating each block
// on its own tape that is released before the next. Block losses are combined
// weighted by their sample counts. With sample_fraction < 1 a subset is drawn
// without replacement from `rng`.
BlockCmrResult block_sampled_cmr(JetField& field, const CmrSamples& samples,
                                 const BlockCmrOptions& options, std::mt19937_64* rng = nullptr);

}  // namespace pidg::physics
