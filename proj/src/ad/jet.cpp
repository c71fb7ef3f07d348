#include "pidg/ad/jet.hpp"

#include <vector>

#include "pidg/ad/ops.hpp"
#include "pidg/common/error.hpp"

namespace pidg::ad {
namespace {

Var zeros_like(const Var& v) { return v.tape().constant(Tensor(v.shape(), 0.0)); }

// Sum of two tangents where either may be structurally zero.
Var tangent_add(const Var& a, const Var& b) {
  if (!a.valid()) return b;
  if (!b.valid()) return a;
  return add(a, b);
}

// Elementwise multiply of a tangent by a constant-in-coordinates factor.
Var tangent_mul(const Var& d, const Var& factor) {
  if (!d.valid()) return Var{};
  return mul(d, factor);
}

}  // namespace

Var Jet::tangent(std::size_t k) const { return d[k].valid() ? d[k] : zeros_like(value); }

Jet jet_constant(const Var& value) { return Jet{value, {}}; }

Jet jet_coordinates(Tape& tape, const Tensor& points) {
  if (points.rank() != 2 || points.cols() != kJetDims) {
    throw ShapeError("jet_coordinates expects M x 4 points, got " + points.shape_string());
  }
  Jet j;
  j.value = tape.constant(points);
  for (std::size_t k = 0; k < kJetDims; ++k) {
    Tensor e(points.shape(), 0.0);
    for (std::size_t i = 0; i < points.rows(); ++i) e.at(i, k) = 1.0;
    j.d[k] = tape.constant(std::move(e));
  }
  return j;
}

Jet jet_add(const Jet& a, const Jet& b) {
  Jet r;
  r.value = add(a.value, b.value);
  for (std::size_t k = 0; k < kJetDims; ++k) r.d[k] = tangent_add(a.d[k], b.d[k]);
  return r;
}

Jet jet_sub(const Jet& a, const Jet& b) {
  Jet r;
  r.value = sub(a.value, b.value);
  for (std::size_t k = 0; k < kJetDims; ++k) {
    if (!b.d[k].valid()) {
      r.d[k] = a.d[k];
    } else if (!a.d[k].valid()) {
      r.d[k] = neg(b.d[k]);
    } else {
      r.d[k] = sub(a.d[k], b.d[k]);
    }
  }
  return r;
}

Jet jet_mul(const Jet& a, const Jet& b) {
  Jet r;
  r.value = mul(a.value, b.value);
  for (std::size_t k = 0; k < kJetDims; ++k) {
    r.d[k] = tangent_add(tangent_mul(a.d[k], b.value), tangent_mul(b.d[k], a.value));
  }
  return r;
}

Jet jet_scale(const Jet& a, double s) {
  Jet r;
  r.value = scale(a.value, s);
  for (std::size_t k = 0; k < kJetDims; ++k)
    if (a.d[k].valid()) r.d[k] = scale(a.d[k], s);
  return r;
}

Jet jet_add_scalar(const Jet& a, double s) {
  Jet r = a;
  r.value = add_scalar(a.value, s);
  return r;
}

Jet jet_affine(const Jet& x, const Var& weight, const Var& bias) {
  Jet r;
  r.value = add_row(matmul(x.value, weight), bias);
  for (std::size_t k = 0; k < kJetDims; ++k)
    if (x.d[k].valid()) r.d[k] = matmul(x.d[k], weight);
  return r;
}

Jet jet_relu(const Jet& a) {
  Jet r;
  r.value = relu(a.value);
  const Tensor& pre = a.value.value();
  Tensor step(pre.shape());
  for (std::size_t i = 0; i < pre.size(); ++i) step[i] = pre[i] > 0.0 ? 1.0 : 0.0;
  Var mask = a.value.tape().constant(std::move(step));
  for (std::size_t k = 0; k < kJetDims; ++k) r.d[k] = tangent_mul(a.d[k], mask);
  return r;
}

Jet jet_sigmoid(const Jet& a) {
  Jet r;
  r.value = sigmoid(a.value);
  // s' = s (1 - s), kept on the tape so it differentiates with the weights.
  Var slope = mul(r.value, add_scalar(neg(r.value), 1.0));
  for (std::size_t k = 0; k < kJetDims; ++k) r.d[k] = tangent_mul(a.d[k], slope);
  return r;
}

Jet jet_sin(const Jet& a) {
  Jet r;
  r.value = sin(a.value);
  bool any = false;
  for (const auto& dk : a.d) any = any || dk.valid();
  if (!any) return r;
  Var slope = cos(a.value);
  for (std::size_t k = 0; k < kJetDims; ++k) r.d[k] = tangent_mul(a.d[k], slope);
  return r;
}

Jet jet_cos(const Jet& a) {
  Jet r;
  r.value = cos(a.value);
  bool any = false;
  for (const auto& dk : a.d) any = any || dk.valid();
  if (!any) return r;
  Var slope = neg(sin(a.value));
  for (std::size_t k = 0; k < kJetDims; ++k) r.d[k] = tangent_mul(a.d[k], slope);
  return r;
}

Jet jet_slice_cols(const Jet& a, std::size_t begin, std::size_t end) {
  Jet r;
  r.value = slice_cols(a.value, begin, end);
  for (std::size_t k = 0; k < kJetDims; ++k)
    if (a.d[k].valid()) r.d[k] = slice_cols(a.d[k], begin, end);
  return r;
}

Jet jet_concat_cols(std::span<const Jet> parts) {
  if (parts.empty()) throw ShapeError("jet_concat_cols of nothing");
  Jet r;
  std::vector<Var> values;
  for (const auto& p : parts) values.push_back(p.value);
  r.value = concat_cols(values);
  for (std::size_t k = 0; k < kJetDims; ++k) {
    bool any = false;
    for (const auto& p : parts) any = any || p.d[k].valid();
    if (!any) continue;
    std::vector<Var> ds;
    for (const auto& p : parts) ds.push_back(p.tangent(k));
    r.d[k] = concat_cols(ds);
  }
  return r;
}

Jet jet_mul_col(const Jet& a, const Jet& col) {
  Jet r;
  r.value = mul_col(a.value, col.value);
  for (std::size_t k = 0; k < kJetDims; ++k) {
    Var lhs = a.d[k].valid() ? mul_col(a.d[k], col.value) : Var{};
    Var rhs = col.d[k].valid() ? mul_col(a.value, col.d[k]) : Var{};
    r.d[k] = tangent_add(lhs, rhs);
  }
  return r;
}

}  // namespace pidg::ad
