#include "pidg/scene/gaussian_cloud.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "pidg/common/error.hpp"
#include "pidg/geometry/quaternion.hpp"

namespace pidg::scene {
namespace {

ad::Tensor gather(const ad::Tensor& t, const std::vector<std::size_t>& rows) {
  const std::size_t c = t.cols();
  ad::Tensor out({rows.size(), c});
  for (std::size_t i = 0; i < rows.size(); ++i)
    std::copy_n(t.data() + rows[i] * c, c, out.data() + i * c);
  return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

std::size_t sh_coefficients(int degree) {
  if (degree < 0 || degree > 1) throw ConfigError("spherical harmonics degree must be 0 or 1");
  return 3 * static_cast<std::size_t>((degree + 1) * (degree + 1));
}

bool RowRemap::identity(std::size_t old_rows) const {
  if (source.size() != old_rows) return false;
  for (std::size_t i = 0; i < source.size(); ++i)
    if (source[i] != i || fresh[i]) return false;
  return true;
}

GaussianCloud::GaussianCloud(int sh_degree)
    : sh_degree_(sh_degree),
      means_("gauss.means", ad::Tensor({0, 3})),
      quats_("gauss.quats", ad::Tensor({0, 4})),
      log_scales_("gauss.log_scales", ad::Tensor({0, 3})),
      sh_("gauss.sh", ad::Tensor({0, sh_coefficients(sh_degree)})),
      opacity_("gauss.opacity", ad::Tensor({0, 1})) {}

std::int64_t GaussianCloud::add(const GaussianParticle& p) {
  if (p.sh.size() != sh_size()) {
    throw ShapeError("particle has " + std::to_string(p.sh.size()) + " SH coefficients, cloud expects " +
                     std::to_string(sh_size()));
  }
  auto append = [](ad::Parameter& param, std::span<const double> row) {
    const std::size_t n = param.value.rows();
    std::vector<double> v(param.value.values().begin(), param.value.values().end());
    v.insert(v.end(), row.begin(), row.end());
    param.value = ad::Tensor({n + 1, row.size()}, std::move(v));
    param.grad = ad::Tensor();
  };
  const Eigen::Vector4d q = geometry::normalized(p.rotation);
  append(means_, std::span<const double>(p.position.data(), 3));
  append(quats_, std::span<const double>(q.data(), 4));
  append(log_scales_, std::span<const double>(p.log_scale.data(), 3));
  append(sh_, p.sh);
  const double o = p.opacity_logit;
  append(opacity_, std::span<const double>(&o, 1));
  const std::int64_t id = p.id >= 0 ? p.id : next_id_;
  next_id_ = std::max(next_id_, id + 1);
  ids_.push_back(id);
  dynamic_.push_back(p.dynamic);
  return id;
}

GaussianParticle GaussianCloud::particle(std::size_t i) const {
  GaussianParticle p;
  for (int k = 0; k < 3; ++k) {
    p.position[k] = means_.value.at(i, k);
    p.log_scale[k] = log_scales_.value.at(i, k);
  }
  for (int k = 0; k < 4; ++k) p.rotation[k] = quats_.value.at(i, k);
  p.sh.assign(sh_.value.data() + i * sh_size(), sh_.value.data() + (i + 1) * sh_size());
  p.opacity_logit = opacity_.value[i];
  p.id = ids_.at(i);
  p.dynamic = dynamic_.at(i);
  return p;
}

std::vector<ad::Parameter*> GaussianCloud::parameters() {
  return {&means_, &quats_, &log_scales_, &sh_, &opacity_};
}

void GaussianCloud::set_dynamic(std::vector<bool> flags) {
  if (flags.size() != size()) throw ShapeError("dynamic flags length differs from particle count");
  dynamic_ = std::move(flags);
}

void GaussianCloud::set_ids(std::vector<std::int64_t> ids) {
  if (ids.size() != size()) throw ShapeError("id list length differs from particle count");
  ids_ = std::move(ids);
  for (auto id : ids_) next_id_ = std::max(next_id_, id + 1);
}

void GaussianCloud::apply(const RowRemap& remap) {
  for (ad::Parameter* p : parameters()) {
    p->value = gather(p->value, remap.source);
    p->grad = ad::Tensor();
  }
  std::vector<std::int64_t> ids;
  std::vector<bool> dyn;
  for (std::size_t r : remap.source) {
    ids.push_back(ids_.at(r));
    dyn.push_back(dynamic_.at(r));
  }
  ids_ = std::move(ids);
  dynamic_ = std::move(dyn);
}

void GaussianCloud::normalize_quaternions() {
  for (std::size_t i = 0; i < size(); ++i) {
    Eigen::Vector4d q;
    for (int k = 0; k < 4; ++k) q[k] = quats_.value.at(i, k);
    q = geometry::normalized(q);
    for (int k = 0; k < 4; ++k) quats_.value.at(i, k) = q[k];
  }
}

Eigen::Matrix3d covariance(const Eigen::Vector4d& unit_q, const Eigen::Vector3d& log_scale) {
  const Eigen::Matrix3d r = geometry::rotation_matrix(unit_q);
  const Eigen::Vector3d s2 = (2.0 * log_scale).array().exp();
  Eigen::Matrix3d sigma = r * s2.asDiagonal() * r.transpose();
  return 0.5 * (sigma + sigma.transpose());
}

RowRemap densify(GaussianCloud& cloud, std::span<const double> grad_norm, const DensifyConfig& config,
                 std::mt19937_64& rng) {
  const std::size_t n = cloud.size();
  if (grad_norm.size() != n) throw ShapeError("densify: gradient statistics length differs");
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < n; ++i)
    if (grad_norm[i] >= config.grad_threshold) candidates.push_back(i);
  std::stable_sort(candidates.begin(), candidates.end(),
                   [&](std::size_t a, std::size_t b) { return grad_norm[a] > grad_norm[b]; });

  const ad::Tensor& ls = cloud.log_scales().value;
  auto max_scale = [&](std::size_t i) {
    return std::exp(std::max({ls.at(i, 0), ls.at(i, 1), ls.at(i, 2)}));
  };
  std::vector<bool> split(n, false), clone(n, false);
  std::size_t total = n;
  for (std::size_t i : candidates) {
    if (total + 1 > config.max_particles) break;
    if (max_scale(i) > config.percent_dense * config.extent) {
      split[i] = true;  // one parent becomes two children
    } else {
      clone[i] = true;
    }
    ++total;
  }

  RowRemap remap;
  for (std::size_t i = 0; i < n; ++i) {
    if (split[i]) continue;
    remap.source.push_back(i);
    remap.fresh.push_back(false);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (!clone[i]) continue;
    remap.source.push_back(i);
    remap.fresh.push_back(true);
  }
  const std::size_t first_child = remap.source.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (!split[i]) continue;
    for (int c = 0; c < 2; ++c) {
      remap.source.push_back(i);
      remap.fresh.push_back(true);
    }
  }
  if (remap.identity(n)) return remap;

  // Snapshot parent poses before the rows move.
  std::vector<std::size_t> split_rows;
  for (std::size_t i = 0; i < n; ++i)
    if (split[i]) split_rows.push_back(i);
  std::vector<Eigen::Matrix3d> parent_rot;
  std::vector<Eigen::Vector3d> parent_mean, parent_scale;
  for (std::size_t i : split_rows) {
    const GaussianParticle p = cloud.particle(i);
    parent_rot.push_back(geometry::rotation_matrix(geometry::normalized(p.rotation)));
    parent_mean.push_back(p.position);
    parent_scale.push_back(p.log_scale.array().exp());
  }
  cloud.apply(remap);

  std::normal_distribution<double> normal(0.0, 1.0);
  const double shrink = std::log(config.split_factor);
  std::size_t row = first_child;
  for (std::size_t k = 0; k < split_rows.size(); ++k) {
    for (int c = 0; c < 2; ++c, ++row) {
      // Offsets are drawn from the parent Gaussian, restricted to its 1-sigma ellipsoid.
      Eigen::Vector3d z;
      do {
        z = Eigen::Vector3d(normal(rng), normal(rng), normal(rng));
      } while (z.norm() > 1.0);
      const Eigen::Vector3d pos = parent_mean[k] + parent_rot[k] * parent_scale[k].cwiseProduct(z);
      for (int a = 0; a < 3; ++a) {
        cloud.means().value.at(row, a) = pos[a];
        cloud.log_scales().value.at(row, a) -= shrink;
      }
    }
  }
  return remap;
}

RowRemap prune_by_scale(GaussianCloud& cloud, double threshold, double extent, double opacity_floor) {
  RowRemap remap;
  const ad::Tensor& ls = cloud.log_scales().value;
  const ad::Tensor& op = cloud.opacity().value;
  const double cutoff = threshold * extent;
  for (std::size_t i = 0; i < cloud.size(); ++i) {
    const double s = std::exp(std::max({ls.at(i, 0), ls.at(i, 1), ls.at(i, 2)}));
    if (s > cutoff || sigmoid(op[i]) < opacity_floor) continue;
    remap.source.push_back(i);
    remap.fresh.push_back(false);
  }
  if (!remap.identity(cloud.size())) cloud.apply(remap);
  return remap;
}

}  // namespace pidg::scene
