#include "pidg/geometry/quaternion.hpp"

#include <cmath>
#include <string>

#include "pidg/common/error.hpp"

namespace pidg::geometry {

Eigen::Matrix3d rotation_matrix(const Quaternion& q) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Eigen::Matrix3d r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),  //
      2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),   //
      2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

Quaternion normalized(const Quaternion& q) {
  const double n = q.norm();
  if (!(n >= kMinQuaternionNorm)) {
    throw DomainError("degenerate rotation: quaternion norm " + std::to_string(n) +
                      " below 1e-8");
  }
  return q / n;
}

Quaternion rotation_matrix_vjp(const Quaternion& q, const Eigen::Matrix3d& g) {
  const double w = q[0], x = q[1], y = q[2], z = q[3];
  Quaternion d;
  d[0] = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
  d[1] = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2) +
              z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2));
  d[2] = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) -
              w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2));
  d[3] = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1) +
              y * g(1, 2) + x * g(2, 0) + y * g(2, 1));
  return d;
}

Quaternion normalize_vjp(const Quaternion& q, const Quaternion& g) {
  const double n = q.norm();
  const Quaternion u = q / n;
  return (g - u * u.dot(g)) / n;
}

Quaternion axis_angle(const Eigen::Vector3d& axis, double angle) {
  const Eigen::Vector3d a = axis.normalized();
  const double h = 0.5 * angle;
  return Quaternion(std::cos(h), a.x() * std::sin(h), a.y() * std::sin(h), a.z() * std::sin(h));
}

Quaternion multiply(const Quaternion& a, const Quaternion& b) {
  return Quaternion(a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
                    a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
                    a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
                    a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0]);
}

namespace {

Quaternion row_quat(const ad::Tensor& t, std::size_t i) {
  return Quaternion(t[4 * i], t[4 * i + 1], t[4 * i + 2], t[4 * i + 3]);
}

void check_rows(const ad::Tensor& q) {
  if (q.rank() != 2 || q.cols() != 4) {
    throw ShapeError("expected N x 4 quaternions, got " + q.shape_string());
  }
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const double n = row_quat(q, i).norm();
    if (!(n >= kMinQuaternionNorm)) {
      throw DomainError("degenerate rotation in row " + std::to_string(i) +
                        ": quaternion norm below 1e-8");
    }
  }
}

}  // namespace

ad::Var normalize_quaternions(const ad::Var& quats) {
  const ad::Tensor& q = quats.value();
  check_rows(q);
  ad::Tensor y(q.shape());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const Quaternion u = row_quat(q, i).normalized();
    for (int k = 0; k < 4; ++k) y[4 * i + k] = u[k];
  }
  return quats.tape().record("normalize_quaternions", std::move(y), {quats},
                             [quats](ad::Tape& t, const ad::Tensor& g) {
                               ad::Tensor* gq = t.grad_slot(quats);
                               if (!gq) return;
                               const ad::Tensor& q = quats.value();
                               for (std::size_t i = 0; i < q.rows(); ++i) {
                                 const Quaternion gi(g[4 * i], g[4 * i + 1], g[4 * i + 2],
                                                     g[4 * i + 3]);
                                 const Quaternion d = normalize_vjp(row_quat(q, i), gi);
                                 for (int k = 0; k < 4; ++k) (*gq)[4 * i + k] += d[k];
                               }
                             });
}

ad::Var rotate_points(const ad::Var& quats, const ad::Var& points) {
  const ad::Tensor& q = quats.value();
  const ad::Tensor& p = points.value();
  check_rows(q);
  if (p.rank() != 2 || p.cols() != 3 || p.rows() != q.rows()) {
    throw ShapeError("rotate_points: points " + p.shape_string() + " vs quaternions " +
                     q.shape_string());
  }
  ad::Tensor y(p.shape());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const Eigen::Vector3d v =
        rotation_matrix(row_quat(q, i).normalized()) * Eigen::Vector3d(p[3 * i], p[3 * i + 1], p[3 * i + 2]);
    for (int k = 0; k < 3; ++k) y[3 * i + k] = v[k];
  }
  return quats.tape().record(
      "rotate_points", std::move(y), {quats, points}, [quats, points](ad::Tape& t, const ad::Tensor& g) {
        ad::Tensor* gq = t.grad_slot(quats);
        ad::Tensor* gp = t.grad_slot(points);
        const ad::Tensor& q = quats.value();
        const ad::Tensor& p = points.value();
        for (std::size_t i = 0; i < q.rows(); ++i) {
          const Quaternion raw = row_quat(q, i);
          const Quaternion u = raw.normalized();
          const Eigen::Matrix3d r = rotation_matrix(u);
          const Eigen::Vector3d gi(g[3 * i], g[3 * i + 1], g[3 * i + 2]);
          const Eigen::Vector3d pi(p[3 * i], p[3 * i + 1], p[3 * i + 2]);
          if (gp) {
            const Eigen::Vector3d d = r.transpose() * gi;
            for (int k = 0; k < 3; ++k) (*gp)[3 * i + k] += d[k];
          }
          if (gq) {
            const Eigen::Matrix3d gr = gi * pi.transpose();
            const Quaternion d = normalize_vjp(raw, rotation_matrix_vjp(u, gr));
            for (int k = 0; k < 4; ++k) (*gq)[4 * i + k] += d[k];
          }
        }
      });
}

}  // namespace pidg::geometry
