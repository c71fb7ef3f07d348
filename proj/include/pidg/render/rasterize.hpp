#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <vector>

#include "pidg/ad/tape.hpp"
#include "pidg/render/camera.hpp"

namespace pidg::render {

struct ProjectOptions {
  double near = 0.01;
  double dilation = 0.3;
};

// Screen-space footprint of a batch of Gaussians.
struct Projection {
  ad::Var means2d;            // N x 2 pixels
  ad::Var cov2d;              // N x 3 (xx, xy, yy), dilation included
  ad::Var depth;              // N x 1 camera-space z
  std::vector<bool> visible;  // false for particles at or behind the near plane
};

// Pinhole projection of 3D Gaussians. `quats` rows need not be normalized.
Projection project(const Camera& camera, const ad::Var& means, const ad::Var& quats,
                   const ad::Var& log_scales, const ProjectOptions& options = {});

struct RasterSettings {
  int tile_size = 16;
  std::size_t top_k = 8;
  double alpha_min = 1.0 / 255.0;
  double alpha_max = 0.99;
  double mahalanobis_cutoff = 9.0;  // squared, i.e. 3 sigma
  double background_depth = 0.0;
  double background[3] = {0.0, 0.0, 0.0};
};

// Per-pixel splatting weights w_i = alpha_i T_i / sum_j alpha_j T_j, the K
// largest kept in descending order (ties by particle id, then row).
struct TopK {
  int width = 0;
  int height = 0;
  std::size_t k = 0;
  std::vector<std::uint32_t> index;  // particle rows, k slots per pixel
  std::vector<double> weight;
  std::vector<std::uint8_t> count;

  std::size_t slot(int x, int y, std::size_t j) const {
    return (static_cast<std::size_t>(y) * width + x) * k + j;
  }
};

struct RenderOutput {
  ad::Var color;  // {H, W, 3}
  ad::Var depth;  // {H, W}, expected depth sum z alpha T + T_final z_bg
  std::vector<double> coverage;  // 1 - final transmittance per pixel
  TopK topk;
  // Filled during backward: d loss / d means2d as seen by the rasterizer.
  std::shared_ptr<ad::Tensor> mean2d_grad;
};

// Tiled front-to-back compositing. `colors` is N x 3, `opacities` N x 1 in
// [0,1]; `ids` orders depth ties.
RenderOutput rasterize(const Camera& camera, const Projection& proj, const ad::Var& colors,
                       const ad::Var& opacities, std::span<const std::int64_t> ids,
                       const RasterSettings& settings = {});

// View-dependent color from degree-0/1 spherical harmonics: clamp(SH + 0.5, 0, 1).
// `directions` holds unit viewing directions (N x 3), treated as constants.
ad::Var sh_to_color(const ad::Var& sh, int degree, const ad::Tensor& directions);

}  // namespace pidg::render
