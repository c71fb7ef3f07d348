#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "pidg/ad/binder.hpp"
#include "pidg/grid/hash_grid.hpp"
#include "pidg/nn/linear.hpp"

namespace pidg::deform {

struct DeformationConfig {
  std::size_t spatial_levels = 16;
  double spatial_base = 16;
  double spatial_max = 2048;
  std::size_t temporal_levels = 32;
  // Time-axis vertices of the temporal grids (half the frame count by default;
  // callers fill it in from the sequence length).
  double time_resolution = 8;
  unsigned table_size_log2 = 19;
  std::size_t feature_dim = 2;
  std::size_t attention_width = 256;
  std::size_t decoder_width = 256;
};

// Encoded features of a batch of normalized (x, y, z, t) points.
struct Encoding {
  ad::Var spatial;                  // g_xyz
  std::array<ad::Var, 3> temporal;  // g_xyt, g_yzt, g_xzt
};

// Raw decoder heads for a batch.
struct DeformationHeads {
  ad::Var rotation;        // M x 4, identity offset already added
  ad::Var translation;     // M x 3
  ad::Var delta_rotation;  // M x 4
  ad::Var delta_scale;     // M x 3
};

struct DeformedPose {
  ad::Var means;       // N x 3
  ad::Var quats;       // N x 4 (unit)
  ad::Var log_scales;  // N x 3
};

// Canonical-to-deformed mapping from four 3D hash grids, a directional
// attention aggregator and a two-layer multi-head decoder.
class DeformationField {
 public:
  DeformationField(const DeformationConfig& config, std::uint64_t seed);

  const DeformationConfig& config() const { return config_; }

  // `points` is M x 4 with every coordinate in [0,1].
  Encoding encode4d(ad::Binder& bind, const ad::Tensor& points);
  ad::Var attention_weight(ad::Binder& bind, const ad::Var& spatial);
  ad::Var attention_modulate(ad::Binder& bind, const Encoding& enc);
  DeformationHeads decode(ad::Binder& bind, const ad::Var& h);

  // Deformed poses for all particles. Rows where `active` is false keep their
  // canonical pose exactly. `points` holds normalized (x, y, z, t) per row.
  DeformedPose deform(ad::Binder& bind, const ad::Var& means, const ad::Var& quats,
                      const ad::Var& log_scales, const ad::Tensor& points,
                      const std::vector<bool>& active);

  std::vector<ad::Parameter*> grid_parameters();
  std::vector<ad::Parameter*> network_parameters();
  std::vector<const grid::MultiResGrid*> grids() const;
  // Zeroes the last decoder layer (identity deformation).
  void reset_decoder_output();

 private:
  DeformationConfig config_;
  std::vector<grid::MultiResGrid> grids_;  // xyz, xyt, yzt, xzt
  nn::Linear spatial_net_;
  nn::Linear temporal_net_;
  nn::Linear hidden_;
  nn::Linear output_;
};

// Applies decoded heads to canonical poses: mu' = R(q_x) mu + T_x,
// q' = normalize(q + dr), s' = s + ds.
DeformedPose apply_heads(const DeformationHeads& heads, const ad::Var& means,
                         const ad::Var& quats, const ad::Var& log_scales);

}  // namespace pidg::deform
