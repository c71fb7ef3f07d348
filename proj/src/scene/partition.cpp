#include "pidg/scene/partition.hpp"

#include <cmath>

#include "pidg/common/error.hpp"

namespace pidg::scene {

std::vector<bool> partition_dynamic(std::span<const std::vector<Eigen::Vector3d>> positions,
                                    std::span<const Mask> masks,
                                    std::span<const render::Camera> cameras, double fraction) {
  if (positions.size() != masks.size() || masks.size() != cameras.size()) {
    throw ShapeError("partition_dynamic: frame counts differ");
  }
  const std::size_t n = positions.empty() ? 0 : positions[0].size();
  std::vector<int> visible(n, 0), inside(n, 0);
  for (std::size_t f = 0; f < positions.size(); ++f) {
    if (positions[f].size() != n) throw ShapeError("partition_dynamic: particle counts differ");
    const render::Camera& cam = cameras[f];
    const Mask& mask = masks[f];
    for (std::size_t i = 0; i < n; ++i) {
      const Eigen::Vector3d c = cam.to_camera(positions[f][i]);
      if (!(c.z() > 0.01)) continue;
      const Eigen::Vector2d p = cam.project(c);
      const long x = std::lround(p.x()), y = std::lround(p.y());
      if (x < 0 || y < 0 || x >= mask.width || y >= mask.height) continue;
      ++visible[i];
      if (mask.at(static_cast<int>(x), static_cast<int>(y))) ++inside[i];
    }
  }
  std::vector<bool> dynamic(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    dynamic[i] = visible[i] > 0 && inside[i] >= fraction * visible[i];
  }
  return dynamic;
}

}  // namespace pidg::scene
