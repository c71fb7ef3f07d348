#include "pidg/flow/gaussian_flow.hpp"

#include <unsupported/Eigen/AutoDiff>
#include <cmath>
#include <memory>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"

namespace pidg::flow {
namespace {

using Dual = Eigen::AutoDiffScalar<Eigen::Matrix<double, 6, 1>>;

double value_of(const Dual& v) { return v.value(); }

// Affine part U S U^T of the contributor map as a function of the two packed
// covariances. Returns false when an eigenvalue is too small.
template <class T>
bool scale_map(const T* cov, const T* next, Eigen::Matrix<T, 2, 2>& a) {
  using std::atan2, std::cos, std::sin, std::sqrt, std::abs;
  const T& xx = cov[0];
  const T& xy = cov[1];
  const T& yy = cov[2];
  // An isotropic covariance has no preferred axes; use the image axes.
  const double scale = std::max(1.0, std::abs(value_of(xx)) +
                                         std::abs(value_of(yy)));
  const bool isotropic = std::abs(value_of(T(xx - yy))) < 1e-14 * scale &&
                         std::abs(value_of(xy)) < 1e-14 * scale;
  const T theta = isotropic ? T(0.0) : T(0.5 * atan2(T(2.0 * xy), T(xx - yy)));
  const T c = cos(theta), s = sin(theta);
  auto quad = [&](const T* m, const T& ux, const T& uy) { return T(m[0] * ux * ux + 2.0 * m[1] * ux * uy + m[2] * uy * uy); };
  const T l1 = quad(cov, c, s), l2 = quad(cov, T(-s), c);
  const T n1 = quad(next, c, s), n2 = quad(next, T(-s), c);
  auto small = [](const T& v) { return value_of(v) < kMinEigenvalue; };
  if (small(l1) || small(l2) || small(n1) || small(n2)) return false;
  const T s1 = sqrt(T(n1 / l1)), s2 = sqrt(T(n2 / l2));
  a(0, 0) = s1 * c * c + s2 * s * s;
  a(0, 1) = (s1 - s2) * c * s;
  a(1, 0) = a(0, 1);
  a(1, 1) = s1 * s * s + s2 * c * c;
  return true;
}

struct Contributor {
  bool ok = false;
  Eigen::Matrix2d a;
  // d a(r, c) / d (cov_t[0..2], cov_next[0..2]), row r * 2 + c.
  Eigen::Matrix<double, 4, 6> da;
};

void check_inputs(const render::TopK& topk, const ad::Var& means, const ad::Var& cov, const ad::Var& target,
                  const ad::Var& next) {
  const std::size_t n = means.rows();
  if (means.cols() != 2 || target.cols() != 2 || target.rows() != n) throw ShapeError("flow means must be N x 2");
  if (cov.cols() != 3 || next.cols() != 3 || cov.rows() != n || next.rows() != n) {
    throw ShapeError("flow covariances must be N x 3");
  }
  for (std::size_t i = 0; i < topk.index.size(); ++i) {
    if (topk.index[i] >= n && i % topk.k < topk.count[i / topk.k]) throw ShapeError("top-K row out of range");
  }
}

}  // namespace

ad::Var topk_flow(const render::TopK& topk, const ad::Var& means_t, const ad::Var& cov_t, const ad::Var& target,
                  const ad::Var& cov_next, std::vector<std::uint8_t>* valid) {
  check_inputs(topk, means_t, cov_t, target, cov_next);
  const std::size_t n = means_t.rows();
  const ad::Tensor& mu = means_t.value();
  const ad::Tensor& tg = target.value();
  auto contrib = std::make_shared<std::vector<Contributor>>(n);
  for (std::size_t i = 0; i < n; ++i) {
    Dual c[3], d[3];
    for (int k = 0; k < 3; ++k) {
      c[k] = Dual(cov_t.value().at(i, k), 6, k);
      d[k] = Dual(cov_next.value().at(i, k), 6, 3 + k);
    }
    Eigen::Matrix<Dual, 2, 2> a;
    Contributor& out = (*contrib)[i];
    out.ok = scale_map(c, d, a);
    if (!out.ok) continue;
    for (int r = 0; r < 2; ++r) {
      for (int col = 0; col < 2; ++col) {
        out.a(r, col) = a(r, col).value();
        out.da.row(r * 2 + col) = a(r, col).derivatives().transpose();
      }
    }
  }

  const std::size_t pixels = static_cast<std::size_t>(topk.width) * topk.height;
  // Renormalized weight per slot, zero for dropped slots.
  auto weights = std::make_shared<std::vector<double>>(pixels * topk.k, 0.0);
  ad::Tensor flow({pixels, 2}, 0.0);
  if (valid) valid->assign(pixels, 0);
  for (std::size_t px = 0; px < pixels; ++px) {
    double total = 0.0;
    for (std::size_t j = 0; j < topk.count[px]; ++j) {
      const std::size_t slot = px * topk.k + j;
      if ((*contrib)[topk.index[slot]].ok) total += topk.weight[slot];
    }
    if (!(total > 0.0)) continue;
    const Eigen::Vector2d p(static_cast<double>(px % topk.width), static_cast<double>(px / topk.width));
    Eigen::Vector2d f = Eigen::Vector2d::Zero();
    for (std::size_t j = 0; j < topk.count[px]; ++j) {
      const std::size_t slot = px * topk.k + j;
      const std::size_t i = topk.index[slot];
      const Contributor& c = (*contrib)[i];
      if (!c.ok) continue;
      const double w = topk.weight[slot] / total;
      (*weights)[slot] = w;
      const Eigen::Vector2d m(mu.at(i, 0), mu.at(i, 1)), t(tg.at(i, 0), tg.at(i, 1));
      f += w * (c.a * (p - m) + t - p);
    }
    flow.at(px, 0) = f.x();
    flow.at(px, 1) = f.y();
    if (valid) (*valid)[px] = 1;
  }
  const render::TopK tk = topk;
  return means_t.tape().record(
      "topk_flow", std::move(flow), {means_t, cov_t, target, cov_next},
      [tk, contrib, weights, means_t, cov_t, target, cov_next](ad::Tape& tape, const ad::Tensor& g) {
        ad::Tensor* gm = tape.grad_slot(means_t);
        ad::Tensor* gc = tape.grad_slot(cov_t);
        ad::Tensor* gt = tape.grad_slot(target);
        ad::Tensor* gn = tape.grad_slot(cov_next);
        const ad::Tensor& mu = means_t.value();
        const std::size_t n = mu.rows();
        std::vector<Eigen::Matrix2d> ga(n, Eigen::Matrix2d::Zero());
        const std::size_t pixels = static_cast<std::size_t>(tk.width) * tk.height;
        for (std::size_t px = 0; px < pixels; ++px) {
          const Eigen::Vector2d gp(g.at(px, 0), g.at(px, 1));
          if (gp.isZero(0.0)) continue;
          const Eigen::Vector2d p(static_cast<double>(px % tk.width), static_cast<double>(px / tk.width));
          for (std::size_t j = 0; j < tk.count[px]; ++j) {
            const std::size_t slot = px * tk.k + j;
            const double w = (*weights)[slot];
            if (w == 0.0) continue;
            const std::size_t i = tk.index[slot];
            const Contributor& c = (*contrib)[i];
            const Eigen::Vector2d d = p - Eigen::Vector2d(mu.at(i, 0), mu.at(i, 1));
            if (gt) {
              gt->at(i, 0) += w * gp.x();
              gt->at(i, 1) += w * gp.y();
            }
            if (gm) {
              const Eigen::Vector2d back = c.a.transpose() * gp;
              gm->at(i, 0) -= w * back.x();
              gm->at(i, 1) -= w * back.y();
            }
            ga[i] += w * gp * d.transpose();
          }
        }
        if (!gc && !gn) return;
        for (std::size_t i = 0; i < n; ++i) {
          const Contributor& c = (*contrib)[i];
          if (!c.ok) continue;
          const Eigen::Vector4d gflat(ga[i](0, 0), ga[i](0, 1), ga[i](1, 0), ga[i](1, 1));
          const Eigen::Matrix<double, 6, 1> gcov = c.da.transpose() * gflat;
          for (int k = 0; k < 3; ++k) {
            if (gc) gc->at(i, k) += gcov[k];
            if (gn) gn->at(i, k) += gcov[3 + k];
          }
        }
      });
}

FlowPrediction gaussian_flow(const render::TopK& topk, const ad::Var& means_t, const ad::Var& cov_t,
                             const ad::Var& means_next, const ad::Var& cov_next) {
  FlowPrediction out;
  out.flow = topk_flow(topk, means_t, cov_t, means_next, cov_next, &out.valid);
  return out;
}

FlowPrediction velocity_flow(const render::TopK& topk, const ad::Var& means_t, const ad::Var& cov_t,
                             const ad::Var& velocity2d, const ad::Var& cov_next, double dt) {
  FlowPrediction out;
  out.flow = topk_flow(topk, means_t, cov_t, ad::add(means_t, ad::scale(velocity2d, dt)), cov_next, &out.valid);
  return out;
}

ad::Var project_velocity(const render::Camera& camera, const ad::Tensor& positions, const ad::Var& velocity) {
  const std::size_t n = velocity.rows();
  if (velocity.cols() != 3 || positions.rows() != n || positions.cols() != 3) {
    throw ShapeError("project_velocity expects N x 3 positions and velocities");
  }
  // Per-row 2 x 3 map from world velocity to pixel velocity.
  auto maps = std::make_shared<std::vector<Eigen::Matrix<double, 2, 3>>>(n);
  ad::Tensor out({n, 2}, 0.0);
  const ad::Tensor& v = velocity.value();
  for (std::size_t i = 0; i < n; ++i) {
    const Eigen::Vector3d x = camera.to_camera({positions.at(i, 0), positions.at(i, 1), positions.at(i, 2)});
    Eigen::Matrix<double, 2, 3> j = Eigen::Matrix<double, 2, 3>::Zero();
    if (x.z() > 1e-9) {
      j << camera.fx / x.z(), 0, -camera.fx * x.x() / (x.z() * x.z()), 0, camera.fy / x.z(),
          -camera.fy * x.y() / (x.z() * x.z());
    }
    (*maps)[i] = j * camera.rotation;
    const Eigen::Vector2d p = (*maps)[i] * Eigen::Vector3d(v.at(i, 0), v.at(i, 1), v.at(i, 2));
    out.at(i, 0) = p.x();
    out.at(i, 1) = p.y();
  }
  return velocity.tape().record("project_velocity", std::move(out), {velocity},
                                [maps, velocity](ad::Tape& tape, const ad::Tensor& g) {
                                  ad::Tensor* gv = tape.grad_slot(velocity);
                                  if (!gv) return;
                                  for (std::size_t i = 0; i < maps->size(); ++i) {
                                    const Eigen::Vector3d b =
                                        (*maps)[i].transpose() * Eigen::Vector2d(g.at(i, 0), g.at(i, 1));
                                    for (int k = 0; k < 3; ++k) gv->at(i, k) += b[k];
                                  }
                                });
}

FlowField to_flow_field(const FlowPrediction& p, int width, int height) {
  FlowField f(width, height);
  const ad::Tensor& v = p.flow.value();
  if (v.rows() != static_cast<std::size_t>(width) * height) throw ShapeError("flow prediction size mismatch");
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const std::size_t px = f.pixel(x, y);
      if (p.valid[px]) f.set(x, y, {v.at(px, 0), v.at(px, 1)});
    }
  }
  return f;
}

LpfmResult lpfm_loss(const FlowPrediction& flow_g, const FlowPrediction& flow_v, const FlowField& gt,
                     const Mask& mask, const LpfmWeights& weights) {
  const std::size_t pixels = static_cast<std::size_t>(gt.width) * gt.height;
  if (flow_g.flow.rows() != pixels || flow_v.flow.rows() != pixels || mask.width != gt.width ||
      mask.height != gt.height) {
    throw ShapeError("lpfm_loss: field sizes differ");
  }
  if (weights.gaussian < 0.0 || weights.velocity < 0.0) throw ConfigError("flow-matching weights must be >= 0");
  ad::Tape& tape = flow_g.flow.tape();
  ad::Tensor gate({pixels, 1}, 0.0);
  ad::Tensor target({pixels, 2}, 0.0);
  LpfmResult r;
  for (std::size_t px = 0; px < pixels; ++px) {
    if (!gt.valid[px] || !mask.bits[px] || !flow_g.valid[px] || !flow_v.valid[px]) continue;
    gate[px] = 1.0;
    target.at(px, 0) = gt.uv[2 * px];
    target.at(px, 1) = gt.uv[2 * px + 1];
    ++r.pixels;
  }
  if (r.pixels == 0) {
    r.empty = true;
    r.loss = tape.constant(ad::Tensor::scalar(0.0));
    return r;
  }
  const ad::Var t = tape.constant(std::move(target));
  const ad::Var m = tape.constant(std::move(gate));
  auto term = [&](const ad::Var& f) { return ad::sum(ad::mul_col(ad::abs(ad::sub(f, t)), m)); };
  const double inv = 1.0 / static_cast<double>(r.pixels);
  r.loss = ad::add(ad::scale(term(flow_g.flow), weights.gaussian * inv), ad::scale(term(flow_v.flow), weights.velocity * inv));
  return r;
}

}  // namespace pidg::flow
