#include "pidg/material/material_field.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"

namespace pidg::material {
namespace {

constexpr const char* kPlaneNames[6] = {"xz", "xy", "yz", "xt", "yt", "zt"};

grid::GridConfig plane_config(const MaterialConfig& c) {
  grid::GridConfig g;
  g.dims = 2;
  g.levels = c.plane_levels;
  g.base_resolution = {c.plane_base, c.plane_base};
  g.max_resolution = {c.plane_max, c.plane_max};
  g.table_size_log2 = c.plane_table_log2;
  g.feature_dim = 1;
  g.init_range = c.plane_init;
  return g;
}

double frequency(std::size_t k) { return std::ldexp(std::numbers::pi, static_cast<int>(k)); }

}  // namespace

Eigen::Vector4d SpaceTimeBounds::normalize(const Eigen::Vector4d& p) const {
  const Eigen::Vector4d lo4(lo.x(), lo.y(), lo.z(), t0);
  return (p - lo4).cwiseQuotient(extent());
}

Eigen::Vector4d SpaceTimeBounds::clamp(const Eigen::Vector4d& p) const {
  const Eigen::Vector4d lo4(lo.x(), lo.y(), lo.z(), t0), hi4(hi.x(), hi.y(), hi.z(), t1);
  return p.cwiseMax(lo4).cwiseMin(hi4);
}

ad::Var fourier_encode(const ad::Var& t, std::size_t n) {
  if (t.cols() != 1) throw ShapeError("fourier_encode expects an M x 1 input");
  std::vector<ad::Var> parts;
  for (std::size_t k = 0; k < n; ++k) {
    const ad::Var wt = ad::scale(t, frequency(k));
    parts.push_back(ad::sin(wt));
    parts.push_back(ad::cos(wt));
  }
  return ad::concat_cols(parts);
}

std::vector<double> fourier_encode(double t, std::size_t n) {
  std::vector<double> out;
  for (std::size_t k = 0; k < n; ++k) {
    out.push_back(std::sin(frequency(k) * t));
    out.push_back(std::cos(frequency(k) * t));
  }
  return out;
}

MaterialField::MaterialField(const MaterialConfig& config, const SpaceTimeBounds& bounds, std::size_t id_capacity,
                             std::uint64_t seed)
    : config_(config), bounds_(bounds), rng_(seed) {
  if (config_.embedding_dim < 1 || config_.hidden_width < 1) throw ConfigError("material field widths must be positive");
  if ((bounds_.extent().array() <= 0.0).any()) throw ConfigError("material field bounds must have positive extent");
  for (std::size_t p = 0; p < 6; ++p) {
    planes_.emplace_back(std::string("material.plane_") + kPlaneNames[p], plane_config(config_), rng_);
  }
  embedding_ = ad::Parameter("material.embedding", ad::Tensor({0, config_.embedding_dim}));
  ensure_ids(id_capacity);
  hidden_ = nn::Linear("material.hidden", feature_dim(), config_.hidden_width, nn::Init::kUniform, rng_);
  output_ = nn::Linear("material.out", config_.hidden_width, 9, nn::Init::kZero, rng_);
}

void MaterialField::ensure_ids(std::size_t capacity) {
  const std::size_t old = embedding_.value.rows();
  if (capacity <= old) return;
  const std::size_t h = config_.embedding_dim;
  ad::Tensor grown({capacity, h});
  std::copy(embedding_.value.data(), embedding_.value.data() + old * h, grown.data());
  std::uniform_real_distribution<double> u(-config_.embedding_init, config_.embedding_init);
  for (std::size_t i = old * h; i < capacity * h; ++i) grown[i] = u(rng_);
  embedding_.value = std::move(grown);
  if (!embedding_.grad.empty()) {
    ad::Tensor g({capacity, h}, 0.0);
    std::copy(embedding_.grad.data(), embedding_.grad.data() + old * h, g.data());
    embedding_.grad = std::move(g);
  }
}

ad::Var MaterialField::embed(ad::Binder& bind, std::span<const std::int64_t> ids, std::size_t rows) {
  if (ids.size() != rows) throw ShapeError("material field needs one id per point");
  std::vector<std::size_t> idx(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= id_capacity()) {
      throw DomainError("unknown particle id " + std::to_string(ids[i]));
    }
    idx[i] = static_cast<std::size_t>(ids[i]);
  }
  return ad::gather_rows(bind(embedding_), idx);
}

ad::Var MaterialField::featurize(ad::Binder& bind, const ad::Var& points, std::span<const std::int64_t> ids) {
  if (points.value().rank() != 2 || points.cols() != 4) throw ShapeError("featurize expects M x 4 points");
  const std::size_t m = points.rows();
  std::vector<ad::Var> parts;
  for (std::size_t p = 0; p < 6; ++p) {
    const auto [a, b] = kPlaneAxes[p];
    const ad::Var cols[] = {ad::slice_cols(points, a, a + 1), ad::slice_cols(points, b, b + 1)};
    parts.push_back(grid::encode(planes_[p], bind(planes_[p].table()), ad::concat_cols(cols), grid::LevelReduce::kSum));
  }
  parts.push_back(fourier_encode(ad::slice_cols(points, 3, 4), config_.fourier_frequencies));
  parts.push_back(embed(bind, ids, m));
  return ad::concat_cols(parts);
}

MaterialOutput MaterialField::predict(ad::Binder& bind, const ad::Var& features) {
  if (features.cols() != feature_dim()) throw ShapeError("material head expects " + std::to_string(feature_dim()) + " features");
  const ad::Var out = output_.forward(bind, ad::relu(hidden_.forward(bind, features)));
  return {ad::slice_cols(out, 0, 3), ad::slice_cols(out, 3, 9)};
}

ad::Tensor MaterialField::normalized(const ad::Tensor& points) const {
  if (points.rank() != 2 || points.cols() != 4) throw ShapeError("material field expects M x 4 points");
  ad::Tensor out(points.shape());
  for (std::size_t i = 0; i < points.rows(); ++i) {
    const Eigen::Vector4d q =
        bounds_.normalize({points.at(i, 0), points.at(i, 1), points.at(i, 2), points.at(i, 3)});
    for (std::size_t k = 0; k < 4; ++k) out.at(i, k) = q[static_cast<Eigen::Index>(k)];
  }
  return out;
}

MaterialOutput MaterialField::predict_at(ad::Binder& bind, const ad::Tensor& points,
                                         std::span<const std::int64_t> ids) {
  return predict(bind, featurize(bind, bind.tape().constant(normalized(points)), ids));
}

physics::FieldJet MaterialField::evaluate(ad::Binder& bind, const ad::Tensor& points,
                                          std::span<const std::int64_t> ids) {
  ad::Tape& tape = bind.tape();
  const ad::Tensor u = normalized(points);
  const std::size_t m = u.rows();
  const Eigen::Vector4d inv = bounds_.extent().cwiseInverse();

  std::vector<ad::Jet> parts;
  for (std::size_t p = 0; p < 6; ++p) {
    const auto [a, b] = kPlaneAxes[p];
    ad::Tensor uv({m, 2});
    for (std::size_t i = 0; i < m; ++i) {
      uv.at(i, 0) = u.at(i, a);
      uv.at(i, 1) = u.at(i, b);
    }
    const ad::Var table = bind(planes_[p].table());
    ad::Jet j;
    j.value = grid::encode(planes_[p], table, tape.constant(uv), grid::LevelReduce::kSum);
    j.d[a] = ad::scale(grid::encode_slope(planes_[p], table, uv, 0, grid::LevelReduce::kSum), inv[a]);
    j.d[b] = ad::scale(grid::encode_slope(planes_[p], table, uv, 1, grid::LevelReduce::kSum), inv[b]);
    parts.push_back(std::move(j));
  }
  // Normalized time as a jet: d tau / dt = 1 / duration.
  ad::Tensor tau({m, 1});
  for (std::size_t i = 0; i < m; ++i) tau.at(i, 0) = u.at(i, 3);
  for (std::size_t k = 0; k < config_.fourier_frequencies; ++k) {
    const double w = frequency(k);
    ad::Tensor s({m, 1}), c({m, 1});
    for (std::size_t i = 0; i < m; ++i) {
      s[i] = std::sin(w * tau[i]);
      c[i] = std::cos(w * tau[i]);
    }
    ad::Jet js, jc;
    js.value = tape.constant(s);
    jc.value = tape.constant(c);
    ad::Tensor ds = c, dc = s;
    for (std::size_t i = 0; i < m; ++i) {
      ds[i] *= w * inv[3];
      dc[i] *= -w * inv[3];
    }
    js.d[3] = tape.constant(std::move(ds));
    jc.d[3] = tape.constant(std::move(dc));
    parts.push_back(std::move(js));
    parts.push_back(std::move(jc));
  }
  parts.push_back(ad::jet_constant(embed(bind, ids, m)));
  const ad::Jet f = ad::jet_concat_cols(parts);
  const ad::Jet out = output_.forward(bind, ad::jet_relu(hidden_.forward(bind, f)));
  return {ad::jet_slice_cols(out, 0, 3), ad::jet_slice_cols(out, 3, 9)};
}

std::vector<ad::Parameter*> MaterialField::plane_parameters() {
  std::vector<ad::Parameter*> out;
  for (auto& p : planes_) out.push_back(&p.table());
  return out;
}

std::vector<ad::Parameter*> MaterialField::network_parameters() {
  return {&hidden_.weight(), &hidden_.bias(), &output_.weight(), &output_.bias()};
}

void MaterialField::reset_output() {
  output_.weight().value.fill(0.0);
  output_.bias().value.fill(0.0);
}

}  // namespace pidg::material
