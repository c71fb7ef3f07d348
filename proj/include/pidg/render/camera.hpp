#pragma once

#include <Eigen/Core>

namespace pidg::render {

// Pinhole camera, OpenCV axes (x right, y down, z forward). Pixel (u, v) has
// its center at integer coordinates.
struct Camera {
  int width = 0;
  int height = 0;
  double fx = 1, fy = 1, cx = 0, cy = 0;
  Eigen::Matrix3d rotation = Eigen::Matrix3d::Identity();  // world to camera
  Eigen::Vector3d translation = Eigen::Vector3d::Zero();

  Eigen::Matrix3d intrinsics() const;
  Eigen::Vector3d to_camera(const Eigen::Vector3d& world) const { return rotation * world + translation; }
  Eigen::Vector3d center() const { return -rotation.transpose() * translation; }
  // Pixel coordinates of a camera-space point.
  Eigen::Vector2d project(const Eigen::Vector3d& cam) const;
  // Throws ConfigError on non-positive focal or size, or a non-orthonormal rotation.
  void validate() const;

  // Camera at `eye` looking at `target`; `up` is the world direction that
  // appears upward in the image.
  static Camera look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                        const Eigen::Vector3d& up, int width, int height, double focal);
};

}  // namespace pidg::render
