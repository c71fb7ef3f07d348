#include "pidg/render/camera.hpp"

#include <Eigen/Geometry>

#include "pidg/common/error.hpp"

namespace pidg::render {

Eigen::Matrix3d Camera::intrinsics() const {
  Eigen::Matrix3d k;
  k << fx, 0, cx, 0, fy, cy, 0, 0, 1;
  return k;
}

Eigen::Vector2d Camera::project(const Eigen::Vector3d& c) const {
  return Eigen::Vector2d(fx * c.x() / c.z() + cx, fy * c.y() / c.z() + cy);
}

void Camera::validate() const {
  if (width <= 0 || height <= 0) throw ConfigError("camera size must be positive");
  if (!(fx > 0) || !(fy > 0)) throw ConfigError("camera focal length must be positive");
  const double err = (rotation * rotation.transpose() - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff();
  if (!(err <= 1e-9) || rotation.determinant() < 0) {
    throw ConfigError("camera rotation is not orthonormal");
  }
}

Camera Camera::look_at(const Eigen::Vector3d& eye, const Eigen::Vector3d& target,
                       const Eigen::Vector3d& up, int width, int height, double focal) {
  const Eigen::Vector3d forward = (target - eye).normalized();
  const Eigen::Vector3d right = forward.cross(up).normalized();
  const Eigen::Vector3d down = forward.cross(right);
  Camera cam;
  cam.width = width;
  cam.height = height;
  cam.fx = cam.fy = focal;
  cam.cx = 0.5 * width;
  cam.cy = 0.5 * height;
  cam.rotation.row(0) = right;
  cam.rotation.row(1) = down;
  cam.rotation.row(2) = forward;
  cam.translation = -cam.rotation * eye;
  cam.validate();
  return cam;
}

}  // namespace pidg::render
