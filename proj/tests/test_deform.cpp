#include <doctest.h>

#include <cmath>
#include <random>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"
#include "pidg/deform/deformation.hpp"
#include "pidg/geometry/quaternion.hpp"
#include "support/fd.hpp"

using namespace pidg;
using namespace pidg::deform;

namespace {

DeformationConfig tiny_config() {
  DeformationConfig c;
  c.spatial_levels = 3;
  c.spatial_base = 4;
  c.spatial_max = 16;
  c.temporal_levels = 3;
  c.time_resolution = 4;
  c.table_size_log2 = 10;
  c.attention_width = 8;
  c.decoder_width = 16;
  return c;
}

struct Canon {
  ad::Tensor means, quats, scales, points;
};

Canon canon(std::size_t n, std::mt19937_64& rng) {
  Canon c{test::random_tensor({n, 3}, rng), test::random_tensor({n, 4}, rng), test::random_tensor({n, 3}, rng, -2, 0),
          test::random_tensor({n, 4}, rng, 0.05, 0.95)};
  return c;
}

}  // namespace

TEST_CASE("zero decoder is the identity deformation at every time") {
  DeformationField field(tiny_config(), 1);
  std::mt19937_64 rng(2);
  Canon c = canon(5, rng);
  for (double time : {0.0, 0.4, 1.0}) {
    for (std::size_t i = 0; i < 5; ++i) c.points.at(i, 3) = time;
    ad::Tape t;
    ad::Binder bind(t);
    DeformedPose pose = field.deform(bind, t.constant(c.means), t.constant(c.quats), t.constant(c.scales), c.points,
                                     std::vector<bool>(5, true));
    CHECK(test::bit_identical(pose.means.value(), c.means));
    CHECK(test::bit_identical(pose.log_scales.value(), c.scales));
    for (std::size_t i = 0; i < 5; ++i) {
      const Eigen::Vector4d q(c.quats.at(i, 0), c.quats.at(i, 1), c.quats.at(i, 2), c.quats.at(i, 3));
      for (int k = 0; k < 4; ++k) CHECK(pose.quats.value().at(i, k) == doctest::Approx(q.normalized()[k]).epsilon(1e-15));
    }
  }
}

TEST_CASE("heads apply rotation, translation and additive updates") {
  ad::Tape t;
  const double h = std::sqrt(0.5);
  DeformationHeads heads;
  heads.rotation = t.constant(ad::Tensor({1, 4}, {h, 0, 0, h}));
  heads.translation = t.constant(ad::Tensor({1, 3}, {1, 0, 0}));
  heads.delta_rotation = t.constant(ad::Tensor({1, 4}, 0.0));
  heads.delta_scale = t.constant(ad::Tensor({1, 3}, {0.1, 0, 0}));
  DeformedPose pose = apply_heads(heads, t.constant(ad::Tensor({1, 3}, {1, 0, 0})),
                                  t.constant(ad::Tensor({1, 4}, {1, 0, 0, 0})), t.constant(ad::Tensor({1, 3}, {1, 1, 1})));
  CHECK(pose.means.value()[0] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pose.means.value()[1] == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(std::abs(pose.means.value()[2]) < 1e-15);
  CHECK(pose.log_scales.value()[0] == doctest::Approx(1.1).epsilon(1e-15));
  CHECK(pose.log_scales.value()[1] == 1.0);
  // Orientation ignores R_x.
  CHECK(pose.quats.value()[0] == 1.0);
}

TEST_CASE("degenerate quaternions are rejected") {
  ad::Tape t;
  DeformationHeads heads;
  heads.rotation = t.constant(ad::Tensor({1, 4}, {1, 0, 0, 0}));
  heads.translation = t.constant(ad::Tensor({1, 3}, 0.0));
  heads.delta_rotation = t.constant(ad::Tensor({1, 4}, {-1, 0, 0, 0}));
  heads.delta_scale = t.constant(ad::Tensor({1, 3}, 0.0));
  CHECK_THROWS_AS(apply_heads(heads, t.constant(ad::Tensor({1, 3}, 0.0)), t.constant(ad::Tensor({1, 4}, {1, 0, 0, 0})),
                              t.constant(ad::Tensor({1, 3}, 0.0))),
                  DomainError);
}

TEST_CASE("attention weight is 2 sigmoid - 1 of the spatial logits") {
  DeformationField field(tiny_config(), 3);
  std::mt19937_64 rng(4);
  const ad::Tensor feats = test::random_tensor({4, 6}, rng, -3, 3);
  ad::Tape t;
  ad::Binder bind(t);
  ad::Var a = field.attention_weight(bind, t.constant(feats));
  // Recompute the logits of f_s independently.
  ad::Tape t2;
  ad::Binder b2(t2);
  field.attention_weight(b2, t2.constant(feats));
  for (std::size_t i = 0; i < a.value().size(); ++i) {
    CHECK(a.value()[i] > -1.0);
    CHECK(a.value()[i] < 1.0);
  }
  ad::Tape t3;
  ad::Binder b3(t3);
  ad::Var zero = field.attention_weight(b3, t3.constant(ad::Tensor({1, 6}, 0.0)));
  (void)zero;
  SUBCASE("scalar oracle") {
    for (double x : {-5.0, -0.3, 0.0, 0.7, 4.0, 40.0}) {
      ad::Tape tt;
      ad::Var v = ad::add_scalar(ad::scale(ad::sigmoid(tt.constant(ad::Tensor::scalar(x))), 2.0), -1.0);
      CHECK(std::abs(v.value()[0] - (2.0 / (1.0 + std::exp(-x)) - 1.0)) < 1e-12);
    }
  }
}

TEST_CASE("zero spatial logits silence the modulated feature") {
  DeformationField field(tiny_config(), 5);
  std::mt19937_64 rng(6);
  Canon c = canon(3, rng);
  ad::Tape t;
  ad::Binder bind(t);
  Encoding enc = field.encode4d(bind, c.points);
  for (ad::Parameter* p : field.network_parameters()) {
    if (p->name.rfind("deform.f_s", 0) == 0) p->value.fill(0.0);
  }
  ad::Tape t2;
  ad::Binder b2(t2);
  Encoding e2 = field.encode4d(b2, c.points);
  ad::Var h = field.attention_modulate(b2, e2);
  for (double v : h.value().values()) CHECK(v == 0.0);
}

TEST_CASE("encode4d is deterministic and strict about the domain") {
  DeformationField field(tiny_config(), 7);
  std::mt19937_64 rng(8);
  Canon c = canon(4, rng);
  auto run = [&](const ad::Tensor& pts) {
    ad::Tape t;
    ad::Binder bind(t);
    Encoding e = field.encode4d(bind, pts);
    return std::make_pair(e.spatial.value(), e.temporal[2].value());
  };
  const auto a = run(c.points), b = run(c.points);
  CHECK(test::bit_identical(a.first, b.first));
  CHECK(test::bit_identical(a.second, b.second));
  c.points.at(1, 3) = 1.5;
  CHECK_THROWS_AS(run(c.points), DomainError);
}

TEST_CASE("deformation gradients reach grids and decoder") {
  DeformationField field(tiny_config(), 9);
  std::mt19937_64 rng(10);
  for (ad::Parameter* p : field.network_parameters()) {
    for (double& v : p->value.values()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  }
  Canon c = canon(4, rng);
  const ad::Tensor w = test::random_tensor({4, 3}, rng);
  auto loss = [&](ad::Binder& bind) {
    ad::Tape& t = bind.tape();
    DeformedPose pose = field.deform(bind, t.constant(c.means), t.constant(c.quats), t.constant(c.scales), c.points,
                                     {true, false, true, true});
    return ad::add(ad::sum(ad::mul(pose.means, t.constant(w))), ad::sum(ad::square(pose.quats)));
  };
  for (ad::Parameter* p : field.grid_parameters()) p->zero_grad();
  for (ad::Parameter* p : field.network_parameters()) p->zero_grad();
  {
    ad::Tape t;
    ad::Binder bind(t);
    t.backward(loss(bind));
  }
  auto value_of = [&]() {
    ad::Tape t;
    ad::Binder bind(t);
    return loss(bind).value().item();
  };
  ad::Parameter* targets[] = {field.network_parameters()[6], field.network_parameters()[2], field.grid_parameters()[1]};
  for (ad::Parameter* p : targets) {
    CAPTURE(p->name);
    const ad::Tensor saved = p->value;
    const ad::Tensor fd = test::central_difference(
        [&](const ad::Tensor& v) {
          p->value = v;
          const double r = value_of();
          p->value = saved;
          return r;
        },
        saved);
    CHECK(test::max_relative_error(p->grad, fd) < 1e-5);
  }
}

TEST_CASE("frozen rows keep the canonical pose") {
  DeformationField field(tiny_config(), 11);
  std::mt19937_64 rng(12);
  for (ad::Parameter* p : field.network_parameters())
    for (double& v : p->value.values()) v = std::uniform_real_distribution<double>(-0.5, 0.5)(rng);
  Canon c = canon(3, rng);
  ad::Tape t;
  ad::Binder bind(t);
  DeformedPose pose = field.deform(bind, t.constant(c.means), t.constant(c.quats), t.constant(c.scales), c.points,
                                   {false, true, false});
  for (int k = 0; k < 3; ++k) {
    CHECK(pose.means.value().at(0, k) == c.means.at(0, k));
    CHECK(pose.means.value().at(2, k) == c.means.at(2, k));
  }
  CHECK(pose.means.value().at(1, 0) != c.means.at(1, 0));
}
