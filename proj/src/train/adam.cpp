#include "pidg/train/adam.hpp"

#include <cmath>

#include "pidg/common/error.hpp"

namespace pidg::train {

void adam_step(ad::Tensor& value, const ad::Tensor& grad, AdamState& state, double rate,
               const AdamSettings& s, const std::vector<bool>* row_mask) {
  if (!value.same_shape(grad)) throw ShapeError("adam_step: gradient shape " + grad.shape_string());
  if (!state.m.same_shape(value)) {
    state.m = ad::Tensor(value.shape(), 0.0);
    state.v = ad::Tensor(value.shape(), 0.0);
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(s.beta1, t);
  const double c2 = 1.0 - std::pow(s.beta2, t);
  const std::size_t cols = value.rank() >= 2 ? value.cols() : value.size();
  if (row_mask && value.rank() >= 2 && row_mask->size() != value.rows()) {
    throw ShapeError("adam row mask has the wrong length");
  }
  for (std::size_t i = 0; i < value.size(); ++i) {
    if (row_mask && value.rank() >= 2 && !(*row_mask)[i / cols]) continue;
    const double g = grad[i];
    state.m[i] = s.beta1 * state.m[i] + (1.0 - s.beta1) * g;
    state.v[i] = s.beta2 * state.v[i] + (1.0 - s.beta2) * g * g;
    const double mh = state.m[i] / c1;
    const double vh = state.v[i] / c2;
    value[i] -= rate * mh / (std::sqrt(vh) + s.eps);
  }
}

void Adam::add(ad::Parameter* param, double rate) {
  for (const Entry& e : entries_)
    if (e.param == param) throw ConfigError("parameter " + param->name + " registered twice");
  entries_.push_back({param, rate, {}, {}});
}

Adam::Entry& Adam::find(const ad::Parameter* param) {
  for (Entry& e : entries_)
    if (e.param == param) return e;
  throw Error("parameter not registered with the optimizer");
}

const Adam::Entry& Adam::find(const ad::Parameter* param) const {
  for (const Entry& e : entries_)
    if (e.param == param) return e;
  throw Error("parameter not registered with the optimizer");
}

void Adam::set_rate(const ad::Parameter* param, double rate) { find(param).rate = rate; }
double Adam::rate(const ad::Parameter* param) const { return find(param).rate; }

void Adam::step() {
  for (Entry& e : entries_) {
    ad::Parameter& p = *e.param;
    if (p.value.empty()) continue;
    if (!p.grad.same_shape(p.value)) p.grad = ad::Tensor(p.value.shape(), 0.0);
    adam_step(p.value, p.grad, e.state, e.rate, settings_, e.mask.empty() ? nullptr : &e.mask);
    p.grad.fill(0.0);
  }
}

void Adam::set_row_mask(const ad::Parameter* param, std::vector<bool> mask) { find(param).mask = std::move(mask); }

void Adam::clear_row_masks() {
  for (Entry& e : entries_) e.mask.clear();
}

void Adam::remap(const ad::Parameter* param, const scene::RowRemap& remap) {
  Entry& e = find(param);
  if (!e.mask.empty()) {
    std::vector<bool> mask(remap.source.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = e.mask[remap.source[i]];
    e.mask = std::move(mask);
  }
  if (e.state.m.rank() == 0) return;
  const std::size_t cols = e.state.m.cols();
  auto move_rows = [&](const ad::Tensor& old) {
    ad::Tensor out({remap.source.size(), cols}, 0.0);
    for (std::size_t i = 0; i < remap.source.size(); ++i) {
      if (remap.fresh[i]) continue;
      for (std::size_t c = 0; c < cols; ++c) out.at(i, c) = old.at(remap.source[i], c);
    }
    return out;
  };
  e.state.m = move_rows(e.state.m);
  e.state.v = move_rows(e.state.v);
}

void Adam::reconcile() {
  for (Entry& e : entries_) {
    if (!e.state.m.empty() && !e.state.m.same_shape(e.param->value)) {
      e.state.m = ad::Tensor();
      e.state.v = ad::Tensor();
    }
    if (!e.mask.empty() && e.mask.size() != e.param->value.rows()) e.mask.clear();
  }
}

}  // namespace pidg::train
