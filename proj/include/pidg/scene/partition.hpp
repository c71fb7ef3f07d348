#pragma once

#include <Eigen/Core>
#include <span>
#include <vector>

#include "pidg/common/image.hpp"
#include "pidg/render/camera.hpp"

namespace pidg::scene {

inline constexpr double kDynamicFraction = 0.3;

// A particle is dynamic when its projected center lands inside the motion mask
// in at least `fraction` of the frames where it is visible. positions[f] holds
// the particle centers (N x 3, world space) at frame f.
std::vector<bool> partition_dynamic(std::span<const std::vector<Eigen::Vector3d>> positions,
                                    std::span<const Mask> masks,
                                    std::span<const render::Camera> cameras,
                                    double fraction = kDynamicFraction);

}  // namespace pidg::scene
