#include "pidg/flow/flow_field.hpp"

#include <Eigen/Eigenvalues>
#include <cmath>
#include <numeric>

#include "pidg/common/error.hpp"

namespace pidg::flow {

std::size_t FlowField::valid_count() const {
  return static_cast<std::size_t>(std::count_if(valid.begin(), valid.end(), [](std::uint8_t v) { return v != 0; }));
}

Eigen::Vector3d backproject(const Eigen::Vector2d& p, double depth, const Eigen::Matrix3d& K) {
  if (!(depth > 0.0)) throw DomainError("backproject needs positive depth");
  return K.inverse() * (depth * Eigen::Vector3d(p.x(), p.y(), 1.0));
}

Eigen::Vector2d reproject(const Eigen::Vector3d& x, const Eigen::Matrix3d& K) {
  const Eigen::Vector3d h = K * x;
  return h.head<2>() / h.z();
}

FlowDecomposition decompose_backward(const FlowField& flow_b, const DepthMap& depth_next,
                                     const render::Camera& cam_t, const render::Camera& cam_next) {
  if (flow_b.width != depth_next.width || flow_b.height != depth_next.height) {
    throw ShapeError("flow and depth sizes differ");
  }
  FlowDecomposition out{FlowField(flow_b.width, flow_b.height), FlowField(flow_b.width, flow_b.height)};
  const Eigen::Matrix3d K = cam_next.intrinsics();
  for (int y = 0; y < flow_b.height; ++y) {
    for (int x = 0; x < flow_b.width; ++x) {
      const double d = depth_next.at(x, y);
      if (!flow_b.is_valid(x, y) || !(d > 0.0)) continue;
      const Eigen::Vector2d p4(x, y);
      const Eigen::Vector3d world =
          cam_next.rotation.transpose() * (backproject(p4, d, K) - cam_next.translation);
      const Eigen::Vector3d in_t = cam_t.to_camera(world);
      if (!(in_t.z() > 0.0)) continue;
      const Eigen::Vector2d p2 = cam_t.project(in_t);
      if (p2.x() < -0.5 || p2.y() < -0.5 || p2.x() >= cam_t.width - 0.5 || p2.y() >= cam_t.height - 0.5) continue;
      const Eigen::Vector2d p1 = p4 + flow_b.at(x, y);
      out.camera.set(x, y, p4 - p2);
      out.motion.set(x, y, p2 - p1);
    }
  }
  return out;
}

FlowField warp_flow_forward(const FlowField& in, const FlowField& forward) {
  if (in.width != forward.width || in.height != forward.height) throw ShapeError("warp fields differ in size");
  const int w = in.width, h = in.height;
  FlowField out(w, h);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!forward.is_valid(x, y)) continue;
      const Eigen::Vector2d q = Eigen::Vector2d(x, y) + forward.at(x, y);
      if (!(q.x() >= 0.0 && q.y() >= 0.0 && q.x() <= w - 1 && q.y() <= h - 1)) continue;
      const int x0 = std::min(static_cast<int>(std::floor(q.x())), std::max(0, w - 2));
      const int y0 = std::min(static_cast<int>(std::floor(q.y())), std::max(0, h - 2));
      const double fx = q.x() - x0, fy = q.y() - y0;
      Eigen::Vector2d acc = Eigen::Vector2d::Zero();
      bool ok = true;
      for (int dy = 0; dy < 2 && ok; ++dy) {
        for (int dx = 0; dx < 2 && ok; ++dx) {
          const double wt = (dx ? fx : 1.0 - fx) * (dy ? fy : 1.0 - fy);
          if (wt == 0.0) continue;
          const int sx = x0 + dx, sy = y0 + dy;
          if (sx >= w || sy >= h || !in.is_valid(sx, sy)) {
            ok = false;
            break;
          }
          acc += wt * in.at(sx, sy);
        }
      }
      if (ok) out.set(x, y, acc);
    }
  }
  return out;
}

Eigen::Matrix2d sqrt2x2(const Eigen::Matrix2d& m) {
  if (!m.allFinite()) throw NonFiniteError("sqrt2x2 input is not finite");
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if (std::abs(m(0, 1) - m(1, 0)) > 1e-12 * scale) throw DomainError("sqrt2x2 needs a symmetric matrix");
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix2d> eig(m);
  Eigen::Vector2d l = eig.eigenvalues();
  if (l.minCoeff() < -1e-12 * scale) throw DomainError("sqrt2x2: negative eigenvalue");
  l = l.cwiseMax(0.0).cwiseSqrt();
  return eig.eigenvectors() * l.asDiagonal() * eig.eigenvectors().transpose();
}

Mask motion_mask(const FlowField& flow, double threshold) {
  Mask m(flow.width, flow.height);
  for (int y = 0; y < flow.height; ++y)
    for (int x = 0; x < flow.width; ++x) m.set(x, y, flow.is_valid(x, y) && flow.at(x, y).norm() > threshold);
  return m;
}

double endpoint_error(const FlowField& a, const FlowField& b, const Mask& mask) {
  if (a.width != b.width || a.height != b.height || a.width != mask.width || a.height != mask.height) {
    throw ShapeError("endpoint_error: sizes differ");
  }
  double sum = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < a.height; ++y) {
    for (int x = 0; x < a.width; ++x) {
      if (!mask.at(x, y) || !a.is_valid(x, y) || !b.is_valid(x, y)) continue;
      sum += (a.at(x, y) - b.at(x, y)).norm();
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / static_cast<double>(n);
}

}  // namespace pidg::flow
