#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <vector>

#include "pidg/common/image.hpp"
#include "pidg/render/camera.hpp"

namespace pidg::flow {

// Dense per-pixel displacement in pixels. Invalid pixels hold (0, 0).
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<double> uv;  // (du, dv) per pixel, row-major
  std::vector<std::uint8_t> valid;

  FlowField() = default;
  FlowField(int w, int h)
      : width(w), height(h), uv(static_cast<std::size_t>(w) * h * 2, 0.0), valid(static_cast<std::size_t>(w) * h, 0) {}

  std::size_t pixel(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }
  Eigen::Vector2d at(int x, int y) const { return {uv[2 * pixel(x, y)], uv[2 * pixel(x, y) + 1]}; }
  bool is_valid(int x, int y) const { return valid[pixel(x, y)] != 0; }
  void set(int x, int y, const Eigen::Vector2d& d) {
    uv[2 * pixel(x, y)] = d.x();
    uv[2 * pixel(x, y) + 1] = d.y();
    valid[pixel(x, y)] = 1;
  }
  void invalidate(int x, int y) {
    uv[2 * pixel(x, y)] = uv[2 * pixel(x, y) + 1] = 0.0;
    valid[pixel(x, y)] = 0;
  }
  std::size_t valid_count() const;
};

// Camera-space point seen at pixel `p` with depth `depth` (z). Throws
// DomainError when depth <= 0.
Eigen::Vector3d backproject(const Eigen::Vector2d& p, double depth, const Eigen::Matrix3d& K);
Eigen::Vector2d reproject(const Eigen::Vector3d& x, const Eigen::Matrix3d& K);

struct FlowDecomposition {
  FlowField camera;  // p4 - p2
  FlowField motion;  // p2 - p1
};

// Splits the backward flow at frame t+1 (pixel p4 -> p1 in frame t) into the
// part explained by camera motion and the object's own motion, both on the
// pixel grid of frame t+1. Pixels without a valid flow or a positive depth, or
// whose static reprojection p2 leaves frame t (pixel squares centered on
// integer coordinates), are invalid.
FlowDecomposition decompose_backward(const FlowField& flow_b, const DepthMap& depth_next,
                                     const render::Camera& cam_t, const render::Camera& cam_next);

// Resamples a field defined on frame t+1 onto frame t by following the forward
// flow: out(p1) = bilinear(in, p1 + forward(p1)). Invalid where the forward
// flow is invalid, the target leaves the frame or touches an invalid pixel.
FlowField warp_flow_forward(const FlowField& field_next, const FlowField& forward);

// Symmetric square root of a symmetric positive semidefinite 2x2 matrix.
// Throws DomainError on a negative eigenvalue or asymmetric input.
Eigen::Matrix2d sqrt2x2(const Eigen::Matrix2d& m);

// Pixels where the flow magnitude exceeds `threshold`.
Mask motion_mask(const FlowField& flow, double threshold);

// Mean endpoint error over pixels valid in both fields and set in `mask`.
// Returns 0 when no pixel qualifies.
double endpoint_error(const FlowField& a, const FlowField& b, const Mask& mask);

}  // namespace pidg::flow
